// Scaling-and-squaring error against a fine Euler integration of the flow,
// for a range of squaring steps and field smoothness.
//
//   sample_exp_accuracy [max_norm]

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <string>

#include "dreg/diffeo.hpp"

using namespace dreg;

namespace {

double sample(const Tensor<double>& v, std::size_t c, double x, double y) {
  const double h = double(v.dim(1)), w = double(v.dim(2));
  x = std::clamp(x, 0.0, w - 1);
  y = std::clamp(y, 0.0, h - 1);
  const auto x0 = std::size_t(x), y0 = std::size_t(y);
  const auto x1 = std::min(x0 + 1, v.dim(2) - 1), y1 = std::min(y0 + 1, v.dim(1) - 1);
  const double fx = x - double(x0), fy = y - double(y0);
  return (1 - fx) * (1 - fy) * v.at(c, y0, x0) + fx * (1 - fy) * v.at(c, y0, x1) + (1 - fx) * fy * v.at(c, y1, x0) +
         fx * fy * v.at(c, y1, x1);
}

}  // namespace

int main(int argc, char** argv) {
  const double max_norm = argc > 1 ? std::stod(argv[1]) : 2.0;
  const std::size_t n = 64, margin = 4;
  const int euler_steps = 1024;
  std::printf("sigma  N  max_err(px)  inverse(px)\n");
  for (double sigma : {4.0, 8.0, 16.0}) {
    std::mt19937_64 rng(11);
    std::normal_distribution<double> n01;
    VectorField<double> v(n, n);
    for (auto& x : v.components.data) x = n01(rng);
    v = gaussian_smooth(v, sigma, std::size_t(6 * sigma) | 1);
    const double m = v.max_norm();
    for (auto& x : v.components.data) x *= max_norm / m;
    VectorField<double> neg = v;
    for (auto& x : neg.components.data) x = -x;

    Tensor<double> euler(Shape{2, n, n});
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        double px = double(x), py = double(y);
        for (int k = 0; k < euler_steps; ++k) {
          const double vx = sample(v.components, 0, px, py), vy = sample(v.components, 1, px, py);
          px += vx / euler_steps;
          py += vy / euler_steps;
        }
        euler.at(0, y, x) = px - double(x);
        euler.at(1, y, x) = py - double(y);
      }

    for (int steps : {2, 4, 6, 8, 10}) {
      const auto phi = exponentiate(v, steps);
      const auto round = compose(phi, exponentiate(neg, steps));
      double err = 0, inv = 0;
      for (std::size_t y = margin; y + margin < n; ++y)
        for (std::size_t x = margin; x + margin < n; ++x) {
          err = std::max(err, std::hypot(euler.at(0, y, x) - phi.displacement.at(0, y, x),
                                         euler.at(1, y, x) - phi.displacement.at(1, y, x)));
          inv = std::max(inv, std::hypot(round.displacement.at(0, y, x), round.displacement.at(1, y, x)));
        }
      std::printf("%5.1f %2d  %11.2e  %11.2e\n", sigma, steps, err, inv);
    }
  }
}
