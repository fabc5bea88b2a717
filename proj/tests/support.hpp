#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dreg/autodiff.hpp"
#include "dreg/diffeo.hpp"
#include "dreg/gradcheck.hpp"

namespace dreg::testing {

inline Tensor<double> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data) v = u(rng);
  return t;
}

using Builder = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

/// Gradient check of sum(build(inputs) * R) for a fixed random weighting R,
/// treating every input as a parameter.
inline GradCheckReport check_inputs(std::vector<Tensor<double>> inputs, const Builder& build, double tol = 1e-4,
                                    double step = 1e-6, std::uint64_t seed = 99) {
  std::vector<Parameter<double>> params;
  for (std::size_t i = 0; i < inputs.size(); ++i) params.emplace_back("in" + std::to_string(i), inputs[i]);
  Tensor<double> weight;
  {
    Tape<double> t;
    std::vector<Var<double>> v;
    for (auto& p : params) v.push_back(t.constant(p.value));
    weight = random_tensor(build(t, v).shape(), seed, 0.5, 1.5);
  }
  std::vector<Parameter<double>*> ptrs;
  for (auto& p : params) ptrs.push_back(&p);
  auto f = [&](Tape<double>& t) {
    std::vector<Var<double>> v;
    for (auto& p : params) v.push_back(t.param(p));
    return reduce_sum(mul(build(t, v), t.constant(weight)));
  };
  GradCheckOptions opt;
  opt.step = step;
  opt.tol = tol;
  return gradient_check<double>(f, ptrs, opt);
}

/// Gaussian-smoothed white noise [2,h,w] rescaled to the given max vector norm.
inline Tensor<double> smooth_field(std::size_t h, std::size_t w, double sigma, double max_norm, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  Tensor<double> v({2, h, w});
  for (auto& x : v.data) x = n01(rng);
  // Direct 2-D convolution with a truncated Gaussian (radius 3 sigma),
  // renormalized over in-bounds taps.
  const std::ptrdiff_t r = std::ptrdiff_t(std::ceil(3 * sigma));
  Tensor<double> out({2, h, w});
  for (std::size_t c = 0; c < 2; ++c)
    for (std::ptrdiff_t y = 0; y < std::ptrdiff_t(h); ++y)
      for (std::ptrdiff_t x = 0; x < std::ptrdiff_t(w); ++x) {
        double s = 0, n = 0;
        for (std::ptrdiff_t dy = -r; dy <= r; ++dy)
          for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
            const std::ptrdiff_t yy = y + dy, xx = x + dx;
            if (yy < 0 || xx < 0 || yy >= std::ptrdiff_t(h) || xx >= std::ptrdiff_t(w)) continue;
            const double g = std::exp(-double(dx * dx + dy * dy) / (2 * sigma * sigma));
            s += g * v.at(c, std::size_t(yy), std::size_t(xx));
            n += g;
          }
        out.at(c, std::size_t(y), std::size_t(x)) = s / n;
      }
  const double m = max_vector_norm(out);
  for (auto& x : out.data) x *= max_norm / m;
  return out;
}

/// Bilinear, clamp-to-edge sample of channel c of a [C,h,w] tensor.
inline double bilinear(const Tensor<double>& t, std::size_t c, double x, double y) {
  const double w = double(t.dim(2)), h = double(t.dim(1));
  x = std::clamp(x, 0.0, w - 1);
  y = std::clamp(y, 0.0, h - 1);
  const double x0 = std::min(std::floor(x), w - 2), y0 = std::min(std::floor(y), h - 2);
  const double fx = x - x0, fy = y - y0;
  const auto X = std::size_t(x0), Y = std::size_t(y0);
  return (1 - fy) * ((1 - fx) * t.at(c, Y, X) + fx * t.at(c, Y, X + 1)) +
         fy * ((1 - fx) * t.at(c, Y + 1, X) + fx * t.at(c, Y + 1, X + 1));
}

/// Displacement of the unit-time flow of a stationary field, forward Euler.
inline Tensor<double> euler_flow(const Tensor<double>& v, int steps) {
  const std::size_t h = v.dim(1), w = v.dim(2);
  Tensor<double> u({2, h, w});
  const double dt = 1.0 / steps;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double px = double(x), py = double(y);
      for (int k = 0; k < steps; ++k) {
        const double vx = bilinear(v, 0, px, py), vy = bilinear(v, 1, px, py);
        px += dt * vx;
        py += dt * vy;
      }
      u.at(0, y, x) = px - double(x);
      u.at(1, y, x) = py - double(y);
    }
  return u;
}

/// Max vector difference of two [2,h,w] fields over pixels at least `margin` from the border.
inline double interior_max_diff(const Tensor<double>& a, const Tensor<double>& b, std::size_t margin) {
  double m = 0;
  for (std::size_t y = margin; y + margin < a.dim(1); ++y)
    for (std::size_t x = margin; x + margin < a.dim(2); ++x)
      m = std::max(m, std::hypot(a.at(0, y, x) - b.at(0, y, x), a.at(1, y, x) - b.at(1, y, x)));
  return m;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("dreg_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace dreg::testing
