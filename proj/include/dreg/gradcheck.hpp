#pragma once

// Central finite-difference verification of taped gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dreg/autodiff.hpp"

namespace dreg {

struct GradCheckReport {
  double max_rel_error = 0;
  std::string worst;          // "param[index]" of the largest error
  std::size_t checked = 0;    // entries probed
  std::size_t kinks = 0;      // entries re-probed because the stencil straddled a kink
  bool finite = true;
  std::string nonfinite_at;   // first non-finite value, if any
  bool passed = false;
};

struct GradCheckOptions {
  double step = 1e-6;
  double tol = 1e-4;
  // Entries whose gradients are tiny relative to the largest one are judged
  // against floor_ratio * max|grad| instead of their own magnitude.
  double floor_ratio = 1e-3;
  std::size_t max_entries = 0;  // per parameter; 0 = all, otherwise an even stride
  // Piecewise-smooth losses (bilinear sampling, leaky ReLU) have kinks. When an
  // entry fails and its forward and backward differences disagree by more than
  // tol, the stencil crossed one; the entry is re-probed with step / 10.
  bool kink_retry = false;
};

/// f builds the scalar loss on the given tape, binding each parameter with
/// tape.param(). Parameter values are restored before returning.
template <typename Real>
GradCheckReport gradient_check(const std::function<Var<Real>(Tape<Real>&)>& f,
                               const std::vector<Parameter<Real>*>& params, const GradCheckOptions& opt = {}) {
  if (!(opt.step > 0)) throw std::invalid_argument("gradient_check: step must be > 0");
  GradCheckReport rep;
  auto fail = [&](const std::string& where) {
    rep.finite = false;
    rep.nonfinite_at = where;
    rep.passed = false;
    return rep;
  };
  for (auto* p : params) p->zero_grad();
  double base = 0;
  {
    Tape<Real> tape;
    auto loss = f(tape);
    base = double(loss.value()[0]);
    if (!std::isfinite(base)) return fail("loss at the base point");
    tape.backward(loss);
  }
  double gmax = 0;
  for (auto* p : params)
    for (std::size_t i = 0; i < p->grad.size(); ++i) {
      const double g = double(p->grad.data[i]);
      if (!std::isfinite(g)) return fail("analytic gradient " + p->name + "[" + std::to_string(i) + "]");
      gmax = std::max(gmax, std::abs(g));
    }
  const double floor = std::max(1e-12, opt.floor_ratio * gmax);
  auto eval = [&]() {
    Tape<Real> tape;
    return double(f(tape).value()[0]);
  };
  for (auto* p : params) {
    const std::size_t n = p->value.size();
    const std::size_t stride = opt.max_entries && n > opt.max_entries ? (n + opt.max_entries - 1) / opt.max_entries : 1;
    for (std::size_t i = 0; i < n; i += stride) {
      const Real orig = p->value.data[i];
      const double ana = double(p->grad.data[i]);
      const std::string where = p->name + "[" + std::to_string(i) + "]";
      auto probe = [&](double h, double& err, bool& kink) {
        p->value.data[i] = Real(double(orig) + h);
        const double up = eval();
        p->value.data[i] = Real(double(orig) - h);
        const double down = eval();
        p->value.data[i] = orig;
        if (!std::isfinite(up) || !std::isfinite(down)) return false;
        const double num = (up - down) / (2 * h);
        const double scale = std::max({std::abs(num), std::abs(ana), floor});
        err = std::abs(num - ana) / scale;
        kink = std::abs((up - base) / h - (base - down) / h) / scale > opt.tol;
        return true;
      };
      double err = 0;
      bool kink = false;
      if (!probe(opt.step, err, kink)) return fail("loss while probing " + where);
      if (opt.kink_retry && err > opt.tol && kink) {
        ++rep.kinks;
        if (!probe(opt.step / 10, err, kink)) return fail("loss while probing " + where);
      }
      ++rep.checked;
      if (err > rep.max_rel_error || rep.worst.empty()) {
        rep.max_rel_error = std::max(rep.max_rel_error, err);
        if (err >= rep.max_rel_error) rep.worst = where;
      }
    }
  }
  rep.passed = rep.max_rel_error <= opt.tol;
  return rep;
}

}  // namespace dreg
