#pragma once

// Deformation kernels on 2-D grids: stationary-velocity exponentiation by
// scaling and squaring, bilinear warping, composition, Jacobian determinants
// and Gaussian velocity smoothing. Each kernel has a taped form (operating on
// Var displacements, used inside the network) and a plain form on the strong
// field types below.
//
// Deformations are carried as displacements u with phi(x) = x + u(x); channel
// 0 holds the x (column) component, channel 1 the y (row) component, both in
// pixels of the grid they live on.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "dreg/autodiff.hpp"
#include "dreg/tensor.hpp"

namespace dreg {

/// Intensity image, stored as [1, H, W].
template <typename Real>
struct ScalarImage {
  Tensor<Real> pixels;
  double spacing = 1.0;  // physical length per pixel

  ScalarImage() = default;
  explicit ScalarImage(Tensor<Real> p, double sp = 1.0) : pixels(std::move(p)), spacing(sp) {
    if (pixels.rank() != 3 || pixels.dim(0) != 1)
      throw std::invalid_argument("ScalarImage expects [1,H,W], got " + shape_str(pixels.shape));
  }
  ScalarImage(std::size_t h, std::size_t w, Real fill = 0, double sp = 1.0)
      : pixels(Shape{1, h, w}, fill), spacing(sp) {}

  std::size_t height() const { return pixels.dim(1); }
  std::size_t width() const { return pixels.dim(2); }
  Real& operator()(std::size_t y, std::size_t x) { return pixels.at(0, y, x); }
  const Real& operator()(std::size_t y, std::size_t x) const { return pixels.at(0, y, x); }
};

/// Per-pixel 2-vectors: velocities or displacements, [2, H, W].
template <typename Real>
struct VectorField {
  Tensor<Real> components;
  int scale_index = 1;

  VectorField() = default;
  explicit VectorField(Tensor<Real> c, int s = 1) : components(std::move(c)), scale_index(s) {
    if (components.rank() != 3 || components.dim(0) != 2)
      throw std::invalid_argument("VectorField expects [2,H,W], got " + shape_str(components.shape));
  }
  VectorField(std::size_t h, std::size_t w) : components(Shape{2, h, w}) {}

  std::size_t height() const { return components.dim(1); }
  std::size_t width() const { return components.dim(2); }
  Real max_norm() const { return max_vector_norm(components); }
};

/// phi(x) = x + u(x), held as the displacement u.
template <typename Real>
struct DeformationField {
  Tensor<Real> displacement;

  DeformationField() = default;
  explicit DeformationField(Tensor<Real> u) : displacement(std::move(u)) {
    if (displacement.rank() != 3 || displacement.dim(0) != 2)
      throw std::invalid_argument("DeformationField expects [2,H,W], got " + shape_str(displacement.shape));
  }

  static DeformationField identity(std::size_t h, std::size_t w) {
    return DeformationField(Tensor<Real>(Shape{2, h, w}));
  }

  std::size_t height() const { return displacement.dim(1); }
  std::size_t width() const { return displacement.dim(2); }

  /// Absolute target coordinates phi(x).
  Tensor<Real> coords() const;
};

/// Identity coordinate grid [2, H, W].
template <typename Real>
Tensor<Real> identity_grid(std::size_t h, std::size_t w) {
  Tensor<Real> g(Shape{2, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      g.at(0, y, x) = Real(x);
      g.at(1, y, x) = Real(y);
    }
  return g;
}

template <typename Real>
Tensor<Real> DeformationField<Real>::coords() const {
  Tensor<Real> c = identity_grid<Real>(height(), width());
  for (std::size_t i = 0; i < c.size(); ++i) c.data[i] += displacement.data[i];
  return c;
}

/// Sampled Gaussian normalized to unit sum.
template <typename Real>
std::vector<Real> gaussian_kernel(double sigma, std::size_t size) {
  if (size % 2 == 0) throw std::invalid_argument("gaussian kernel size must be odd, got " + std::to_string(size));
  if (!(sigma > 0)) throw std::invalid_argument("gaussian sigma must be positive");
  std::vector<Real> k(size);
  const std::ptrdiff_t r = std::ptrdiff_t(size / 2);
  double total = 0;
  for (std::ptrdiff_t t = -r; t <= r; ++t) {
    const double v = std::exp(-double(t * t) / (2 * sigma * sigma));
    k[std::size_t(t + r)] = Real(v);
    total += v;
  }
  for (auto& v : k) v = Real(double(v) / total);
  return k;
}

// ---------------------------------------------------------------------------
// Taped kernels
// ---------------------------------------------------------------------------

/// Bilinear warp of img [C,H,W] by phi = id + u, clamp-to-edge.
template <typename Real>
Var<Real> warp(const Var<Real>& img, const Var<Real>& u) {
  const Shape& s = u.shape();
  if (s.size() != 3 || s[0] != 2) detail::shape_error("warp", {img.shape(), s});
  auto id = u.tape().constant(identity_grid<Real>(s[1], s[2]));
  return grid_sample(img, add(id, u));
}

/// Displacement of (phi1 o phi2): u2 + u1(x + u2(x)).
template <typename Real>
Var<Real> compose(const Var<Real>& u1, const Var<Real>& u2) {
  if (u1.shape() != u2.shape()) detail::shape_error("compose", {u1.shape(), u2.shape()});
  return add(u2, warp(u1, u2));
}

/// Displacement of exp(v) by scaling and squaring with `steps` squarings.
/// Records a diagnostic when the scaled field exceeds half a pixel.
template <typename Real>
Var<Real> exponentiate(const Var<Real>& v, int steps, std::vector<std::string>* diagnostics = nullptr) {
  if (steps < 0) throw std::invalid_argument("exponentiate: steps must be >= 0");
  const Shape& s = v.shape();
  if (s.size() != 3 || s[0] != 2) detail::shape_error("exponentiate", {s}, "expected [2,H,W]");
  const Real factor = std::ldexp(Real(1), -steps);
  if (diagnostics) {
    const Real m = max_vector_norm(v.value()) * factor;
    if (m > Real(0.5))
      diagnostics->push_back("exponentiate: scaled velocity " + std::to_string(double(m)) +
                             " px exceeds 0.5 px; increase squaring steps");
  }
  Var<Real> u = scale(v, factor);
  for (int i = 0; i < steps; ++i) u = compose(u, u);
  return u;
}

/// Per-channel Gaussian smoothing; sigma == 0 returns the input unchanged.
template <typename Real>
Var<Real> gaussian_smooth(const Var<Real>& v, double sigma, std::size_t kernel_size) {
  if (kernel_size % 2 == 0)
    throw std::invalid_argument("gaussian_smooth: kernel size must be odd, got " + std::to_string(kernel_size));
  if (sigma < 0) throw std::invalid_argument("gaussian_smooth: sigma must be >= 0");
  if (sigma == 0) return v;
  return separable_filter(v, gaussian_kernel<Real>(sigma, kernel_size));
}

// ---------------------------------------------------------------------------
// Plain kernels
// ---------------------------------------------------------------------------

template <typename Real>
DeformationField<Real> exponentiate(const VectorField<Real>& v, int steps,
                                    std::vector<std::string>* diagnostics = nullptr) {
  Tape<Real> tape;
  auto u = exponentiate(tape.constant(v.components), steps, diagnostics);
  return DeformationField<Real>(u.value());
}

template <typename Real>
ScalarImage<Real> warp(const ScalarImage<Real>& img, const DeformationField<Real>& phi) {
  if (img.height() != phi.height() || img.width() != phi.width())
    detail::shape_error("warp", {img.pixels.shape, phi.displacement.shape});
  Tape<Real> tape;
  auto out = warp(tape.constant(img.pixels), tape.constant(phi.displacement));
  return ScalarImage<Real>(out.value(), img.spacing);
}

template <typename Real>
DeformationField<Real> compose(const DeformationField<Real>& phi1, const DeformationField<Real>& phi2) {
  Tape<Real> tape;
  auto u = compose(tape.constant(phi1.displacement), tape.constant(phi2.displacement));
  return DeformationField<Real>(u.value());
}

template <typename Real>
VectorField<Real> gaussian_smooth(const VectorField<Real>& v, double sigma, std::size_t kernel_size) {
  Tape<Real> tape;
  auto out = gaussian_smooth(tape.constant(v.components), sigma, kernel_size);
  return VectorField<Real>(out.value(), v.scale_index);
}

/// det of the 2x2 spatial Jacobian of phi; central differences inside,
/// one-sided differences on the border rows/columns.
template <typename Real>
ScalarImage<Real> jacobian_determinant(const DeformationField<Real>& phi) {
  const std::size_t h = phi.height(), w = phi.width();
  if (h < 3 || w < 3) throw std::invalid_argument("jacobian_determinant: grid must be at least 3x3");
  const auto& u = phi.displacement;
  auto ddx = [&](std::size_t c, std::size_t y, std::size_t x) -> Real {
    if (x == 0) return u.at(c, y, 1) - u.at(c, y, 0);
    if (x == w - 1) return u.at(c, y, w - 1) - u.at(c, y, w - 2);
    return (u.at(c, y, x + 1) - u.at(c, y, x - 1)) / 2;
  };
  auto ddy = [&](std::size_t c, std::size_t y, std::size_t x) -> Real {
    if (y == 0) return u.at(c, 1, x) - u.at(c, 0, x);
    if (y == h - 1) return u.at(c, h - 1, x) - u.at(c, h - 2, x);
    return (u.at(c, y + 1, x) - u.at(c, y - 1, x)) / 2;
  };
  ScalarImage<Real> det(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      det(y, x) = (1 + ddx(0, y, x)) * (1 + ddy(1, y, x)) - ddy(0, y, x) * ddx(1, y, x);
  return det;
}

/// Squaring count keeping the scaled field under half a pixel, floored at 2.
template <typename Real>
int choose_squaring_steps(const VectorField<Real>& v) {
  const double m = double(v.max_norm());
  if (!(m > 0)) return 2;
  return std::max(2, static_cast<int>(std::ceil(std::log2(m / 0.5))));
}

}  // namespace dreg
