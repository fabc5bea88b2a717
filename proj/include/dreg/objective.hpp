#pragma once

// Training objective: symmetric normalized local cross-correlation, the
// closed-form KL divergence to the unit Gaussian prior, and the multi-scale
// total loss  KL - lambda * sum_s w_s * D_lcc(F^s, M^s, v^s).

#include <stdexcept>
#include <vector>

#include "dreg/autodiff.hpp"
#include "dreg/diffeo.hpp"

namespace dreg {

struct LossConfig {
  double lambda = 5000.0;
  std::size_t lcc_window = 9;
  double tau = 1e-15;
  std::vector<int> scales{1, 2, 3};
  std::vector<double> scale_weights{1.0, 1.0, 1.0};
  int squaring_steps = 4;

  void validate() const {
    if (!(lambda > 0)) throw std::invalid_argument("LossConfig: lambda must be > 0");
    if (!(tau > 0)) throw std::invalid_argument("LossConfig: tau must be > 0");
    if (lcc_window % 2 == 0) throw std::invalid_argument("LossConfig: lcc window must be odd");
    if (scales.size() != scale_weights.size())
      throw std::invalid_argument("LossConfig: one weight per scale required");
  }
};

/// Diagonal Gaussian q(z) = N(mu, diag(exp(logvar))).
template <typename Real>
struct EncoderDistribution {
  Var<Real> mu;
  Var<Real> logvar;
};

/// Normalized LCC of two images (already warped), in [-1, 0].
template <typename Real>
Var<Real> lcc_normalized(const Var<Real>& f, const Var<Real>& m, std::size_t window, double tau) {
  if (f.shape() != m.shape()) detail::shape_error("lcc", {f.shape(), m.shape()});
  auto& tape = f.tape();
  const Shape& s = f.shape();
  // Number of in-bounds pixels of each window.
  Tensor<Real> count(s);
  {
    const std::ptrdiff_t r = std::ptrdiff_t(window / 2);
    const std::ptrdiff_t h = std::ptrdiff_t(s[1]), w = std::ptrdiff_t(s[2]);
    for (std::size_t c = 0; c < s[0]; ++c)
      for (std::ptrdiff_t y = 0; y < h; ++y)
        for (std::ptrdiff_t x = 0; x < w; ++x) {
          const auto ny = std::min(y + r, h - 1) - std::max(y - r, std::ptrdiff_t(0)) + 1;
          const auto nx = std::min(x + r, w - 1) - std::max(x - r, std::ptrdiff_t(0)) + 1;
          count.at(c, std::size_t(y), std::size_t(x)) = Real(ny * nx);
        }
  }
  auto n = tape.constant(std::move(count));
  auto mf = mean_filter(f, window);
  auto mm = mean_filter(m, window);
  auto mff = mean_filter(square(f), window);
  auto mmm = mean_filter(square(m), window);
  auto mfm = mean_filter(mul(f, m), window);
  auto cross = mul(n, sub(mfm, mul(mf, mm)));
  auto var_f = mul(n, sub(mff, square(mf)));
  auto var_m = mul(n, sub(mmm, square(mm)));
  auto ratio = div(square(cross), add_scalar(mul(var_f, var_m), Real(tau)));
  return add_scalar(reduce_mean(ratio), Real(-1));
}

/// Symmetric LCC: compares F o exp(-v/2) with M o exp(v/2).
template <typename Real>
Var<Real> lcc_symmetric(const Var<Real>& fixed, const Var<Real>& moving, const Var<Real>& velocity,
                        const LossConfig& cfg) {
  auto half_fwd = exponentiate(scale(velocity, Real(0.5)), cfg.squaring_steps);
  auto half_bwd = exponentiate(scale(velocity, Real(-0.5)), cfg.squaring_steps);
  auto moving_w = warp(moving, half_fwd);
  auto fixed_w = warp(fixed, half_bwd);
  return lcc_normalized(fixed_w, moving_w, cfg.lcc_window, cfg.tau);
}

template <typename Real>
double lcc_symmetric(const ScalarImage<Real>& fixed, const ScalarImage<Real>& moving, const VectorField<Real>& v,
                     const LossConfig& cfg) {
  Tape<Real> tape;
  return double(lcc_symmetric(tape.constant(fixed.pixels), tape.constant(moving.pixels),
                              tape.constant(v.components), cfg)
                    .value()[0]);
}

/// 0.5 * sum(exp(logvar) + mu^2 - 1 - logvar).
template <typename Real>
Var<Real> kl_standard_normal(const EncoderDistribution<Real>& q) {
  if (q.mu.shape() != q.logvar.shape()) detail::shape_error("kl_standard_normal", {q.mu.shape(), q.logvar.shape()});
  auto terms = sub(add(exp(q.logvar), square(q.mu)), add_scalar(q.logvar, Real(1)));
  return scale(reduce_sum(terms), Real(0.5));
}

template <typename Real>
double kl_standard_normal(const Tensor<Real>& mu, const Tensor<Real>& logvar) {
  Tape<Real> tape;
  return double(kl_standard_normal(EncoderDistribution<Real>{tape.constant(mu), tape.constant(logvar)}).value()[0]);
}

template <typename Real>
struct LossTerms {
  Var<Real> total;
  Var<Real> kl;
  std::vector<Var<Real>> lcc;  // one per scale, in cfg.scales order
};

/// Multi-scale loss. fixed/moving hold one [1,H_s,W_s] image per scale and
/// velocities the matching smoothed [2,H_s,W_s] fields.
template <typename Real>
LossTerms<Real> total_loss(std::span<const Var<Real>> fixed, std::span<const Var<Real>> moving,
                           const EncoderDistribution<Real>& q, std::span<const Var<Real>> velocities,
                           const LossConfig& cfg) {
  cfg.validate();
  const std::size_t n = cfg.scales.size();
  if (fixed.size() != n || moving.size() != n || velocities.size() != n)
    throw std::invalid_argument("total_loss: expected " + std::to_string(n) + " scales, got " +
                                std::to_string(fixed.size()) + "/" + std::to_string(moving.size()) + "/" +
                                std::to_string(velocities.size()));
  for (std::size_t i = 0; i < n; ++i) {
    const Shape& fs = fixed[i].shape();
    const Shape& vs = velocities[i].shape();
    if (fs != moving[i].shape() || vs.size() != 3 || fs.size() != 3 || vs[1] != fs[1] || vs[2] != fs[2])
      detail::shape_error("total_loss scale " + std::to_string(cfg.scales[i]), {fs, moving[i].shape(), vs});
  }
  LossTerms<Real> out;
  out.kl = kl_standard_normal(q);
  Var<Real> sim;
  for (std::size_t i = 0; i < n; ++i) {
    auto d = lcc_symmetric(fixed[i], moving[i], velocities[i], cfg);
    out.lcc.push_back(d);
    auto weighted = scale(d, Real(cfg.scale_weights[i]));
    sim = sim.valid() ? add(sim, weighted) : weighted;
  }
  out.total = sub(out.kl, scale(sim, Real(cfg.lambda)));
  return out;
}

}  // namespace dreg
