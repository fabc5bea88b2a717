#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace dreg {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream oss;
  oss << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) oss << ',';
    oss << shape[i];
  }
  oss << ']';
  return oss.str();
}

/// Dense row-major array. Spatial tensors are laid out [C, H, W].
template <typename Real>
struct Tensor {
  using value_type = Real;

  Shape shape;
  std::vector<Real> data;

  Tensor() = default;
  explicit Tensor(Shape s, Real fill = Real(0))
      : shape(std::move(s)), data(shape_numel(shape), fill) {
    for (auto e : shape)
      if (e == 0) throw std::invalid_argument("tensor extents must be positive: " + shape_str(shape));
  }
  Tensor(Shape s, std::vector<Real> values) : shape(std::move(s)), data(std::move(values)) {
    if (shape_numel(shape) != data.size())
      throw std::invalid_argument("tensor shape " + shape_str(shape) + " does not match " +
                                  std::to_string(data.size()) + " values");
  }

  static Tensor vector(std::initializer_list<Real> values) {
    return Tensor({values.size()}, std::vector<Real>(values));
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  Real& operator[](std::size_t i) { return data[i]; }
  const Real& operator[](std::size_t i) const { return data[i]; }

  // [C, H, W] accessors.
  std::size_t channels() const { return shape.at(0); }
  std::size_t height() const { return shape.at(1); }
  std::size_t width() const { return shape.at(2); }
  Real& at(std::size_t c, std::size_t y, std::size_t x) {
    return data[(c * shape[1] + y) * shape[2] + x];
  }
  const Real& at(std::size_t c, std::size_t y, std::size_t x) const {
    return data[(c * shape[1] + y) * shape[2] + x];
  }

  std::span<Real> channel(std::size_t c) {
    const std::size_t plane = shape[1] * shape[2];
    return {data.data() + c * plane, plane};
  }
  std::span<const Real> channel(std::size_t c) const {
    const std::size_t plane = shape[1] * shape[2];
    return {data.data() + c * plane, plane};
  }

  void fill(Real v) { std::fill(data.begin(), data.end(), v); }

  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](Real v) { return std::isfinite(v); });
  }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != data.size())
      throw std::invalid_argument("reshape " + shape_str(shape) + " -> " + shape_str(s));
    return Tensor(std::move(s), data);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape && a.data == b.data;
  }
};

template <typename Real>
Real max_abs(const Tensor<Real>& t) {
  Real m = 0;
  for (auto v : t.data) m = std::max(m, std::abs(v));
  return m;
}

/// Largest per-pixel Euclidean norm of a [2, H, W] vector field.
template <typename Real>
Real max_vector_norm(const Tensor<Real>& v) {
  const std::size_t plane = v.shape.at(1) * v.shape.at(2);
  Real m = 0;
  for (std::size_t i = 0; i < plane; ++i)
    m = std::max(m, std::hypot(v.data[i], v.data[plane + i]));
  return m;
}

// ---------------------------------------------------------------------------
// "DRT1" binary format: magic, u32 rank, u32 extents, u8 element width,
// little-endian IEEE-754 payload, row-major.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("DRT1: truncated header");
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
         (std::uint32_t(b[3]) << 24);
}

template <typename Bits>
void put_le(std::ostream& os, Bits bits) {
  unsigned char b[sizeof(Bits)];
  for (std::size_t i = 0; i < sizeof(Bits); ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), sizeof(Bits));
}

template <typename Bits>
Bits get_le(const unsigned char* b) {
  Bits bits = 0;
  for (std::size_t i = 0; i < sizeof(Bits); ++i) bits |= Bits(b[i]) << (8 * i);
  return bits;
}

}  // namespace detail

/// Serializes with the given element width (4 or 8 bytes).
template <typename Real>
void write_drt(std::ostream& os, const Tensor<Real>& t, int element_width = sizeof(Real)) {
  if (element_width != 4 && element_width != 8)
    throw std::invalid_argument("DRT1: element width must be 4 or 8");
  os.write("DRT1", 4);
  detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape) detail::put_u32(os, static_cast<std::uint32_t>(e));
  const char code = static_cast<char>(element_width);
  os.write(&code, 1);
  for (Real v : t.data) {
    if (element_width == 8) {
      double d = static_cast<double>(v);
      std::uint64_t bits;
      std::memcpy(&bits, &d, 8);
      detail::put_le(os, bits);
    } else {
      float f = static_cast<float>(v);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      detail::put_le(os, bits);
    }
  }
}

template <typename Real>
Tensor<Real> read_drt(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "DRT1", 4) != 0)
    throw std::runtime_error("DRT1: bad magic");
  const std::uint32_t rank = detail::get_u32(is);
  Shape shape(rank);
  for (auto& e : shape) {
    e = detail::get_u32(is);
    if (e == 0) throw std::runtime_error("DRT1: zero extent");
  }
  char code;
  if (!is.read(&code, 1)) throw std::runtime_error("DRT1: truncated header");
  if (code != 4 && code != 8) throw std::runtime_error("DRT1: unknown element width " + std::to_string(int(code)));
  const std::size_t n = shape_numel(shape);
  std::vector<unsigned char> raw(n * std::size_t(code));
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw std::runtime_error("DRT1: truncated payload");
  std::vector<Real> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (code == 8) {
      const auto bits = detail::get_le<std::uint64_t>(&raw[i * 8]);
      double d;
      std::memcpy(&d, &bits, 8);
      data[i] = static_cast<Real>(d);
    } else {
      const auto bits = detail::get_le<std::uint32_t>(&raw[i * 4]);
      float f;
      std::memcpy(&f, &bits, 4);
      data[i] = static_cast<Real>(f);
    }
  }
  return Tensor<Real>(std::move(shape), std::move(data));
}

template <typename Real>
void save_drt(const std::string& path, const Tensor<Real>& t, int element_width = sizeof(Real)) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  write_drt(os, t, element_width);
  if (!os) throw std::runtime_error("write failed: " + path);
}

template <typename Real>
Tensor<Real> load_drt(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open for reading: " + path);
  try {
    return read_drt<Real>(is);
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(std::string(e.what()) + " (" + path + ")");
  }
}

}  // namespace dreg
