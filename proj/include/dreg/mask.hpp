#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "dreg/diffeo.hpp"
#include "dreg/tensor.hpp"

namespace dreg {

/// Binary segmentation mask on an H x W grid.
struct BinaryMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> data;

  BinaryMask() = default;
  BinaryMask(std::size_t h, std::size_t w) : height(h), width(w), data(h * w, 0) {}

  bool operator()(std::size_t y, std::size_t x) const { return data[y * width + x] != 0; }
  void set(std::size_t y, std::size_t x, bool v) { data[y * width + x] = v ? 1 : 0; }

  std::size_t area() const {
    std::size_t n = 0;
    for (auto v : data) n += v != 0;
    return n;
  }
  bool empty() const { return area() == 0; }

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

template <typename Real>
Tensor<Real> mask_to_tensor(const BinaryMask& m) {
  Tensor<Real> t(Shape{1, m.height, m.width});
  for (std::size_t i = 0; i < m.data.size(); ++i) t.data[i] = m.data[i] ? Real(1) : Real(0);
  return t;
}

template <typename Real>
BinaryMask mask_from_tensor(const Tensor<Real>& t) {
  if (t.rank() != 3 || t.dim(0) != 1) throw std::invalid_argument("mask tensor must be [1,H,W], got " + shape_str(t.shape));
  BinaryMask m(t.dim(1), t.dim(2));
  for (std::size_t i = 0; i < t.size(); ++i) m.data[i] = t.data[i] > Real(0.5) ? 1 : 0;
  return m;
}

/// Nearest-neighbour pullback of a mask through phi (clamp-to-edge).
template <typename Real>
BinaryMask warp_nearest(const BinaryMask& m, const DeformationField<Real>& phi) {
  if (phi.height() != m.height || phi.width() != m.width)
    throw std::invalid_argument("warp_nearest: mask and deformation grids differ");
  BinaryMask out(m.height, m.width);
  const auto& u = phi.displacement;
  for (std::size_t y = 0; y < m.height; ++y)
    for (std::size_t x = 0; x < m.width; ++x) {
      const double px = std::clamp(std::round(double(x) + double(u.at(0, y, x))), 0.0, double(m.width - 1));
      const double py = std::clamp(std::round(double(y) + double(u.at(1, y, x))), 0.0, double(m.height - 1));
      out.set(y, x, m(std::size_t(py), std::size_t(px)));
    }
  return out;
}

}  // namespace dreg
