#pragma once

// Registration quality metrics: overlap (DICE), 95th-percentile Hausdorff
// distance, intensity RMSE, smoothness of the Jacobian determinant, and the
// area-based ejection fraction surrogate.

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "dreg/diffeo.hpp"
#include "dreg/mask.hpp"

namespace dreg {

inline void require_same_grid(const BinaryMask& a, const BinaryMask& b, const char* what) {
  if (a.height != b.height || a.width != b.width)
    throw std::invalid_argument(std::string(what) + ": mask grids differ");
}

/// 2|A n B| / (|A| + |B|); 1 when both masks are empty.
inline double dice(const BinaryMask& a, const BinaryMask& b) {
  require_same_grid(a, b, "dice");
  std::size_t inter = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const bool x = a.data[i] != 0, y = b.data[i] != 0;
    na += x;
    nb += y;
    inter += x && y;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * double(inter) / double(na + nb);
}

/// Mask pixels with at least one 4-neighbour outside the mask (or the image).
inline BinaryMask mask_boundary(const BinaryMask& m) {
  BinaryMask b(m.height, m.width);
  for (std::size_t y = 0; y < m.height; ++y)
    for (std::size_t x = 0; x < m.width; ++x) {
      if (!m(y, x)) continue;
      const bool edge = x == 0 || y == 0 || x + 1 == m.width || y + 1 == m.height || !m(y, x - 1) ||
                        !m(y, x + 1) || !m(y - 1, x) || !m(y + 1, x);
      b.set(y, x, edge);
    }
  return b;
}

namespace detail {

// Exact 1-D squared distance transform (lower envelope of parabolas).
inline void edt_1d(const std::vector<double>& f, std::vector<double>& d) {
  const std::size_t n = f.size();
  std::vector<std::size_t> v(n);
  std::vector<double> z(n + 1);
  std::size_t k = 0;
  const double inf = std::numeric_limits<double>::infinity();
  std::size_t first = 0;
  while (first < n && f[first] == inf) ++first;
  if (first == n) {
    std::fill(d.begin(), d.end(), inf);
    return;
  }
  v[0] = first;
  z[0] = -inf;
  z[1] = inf;
  for (std::size_t q = first + 1; q < n; ++q) {
    if (f[q] == inf) continue;
    auto meet = [&](std::size_t p) {
      return ((f[q] + double(q) * double(q)) - (f[p] + double(p) * double(p))) / (2.0 * double(q) - 2.0 * double(p));
    };
    double s = meet(v[k]);
    while (s <= z[k]) {
      --k;
      s = meet(v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < double(q)) ++k;
    const double dq = double(q) - double(v[k]);
    d[q] = dq * dq + f[v[k]];
  }
}

// Euclidean distance (in pixels) from every pixel to the nearest set pixel.
inline std::vector<double> distance_transform(const BinaryMask& m) {
  const double inf = std::numeric_limits<double>::infinity();
  const std::size_t h = m.height, w = m.width;
  std::vector<double> g(h * w);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = m.data[i] ? 0.0 : inf;
  std::vector<double> f(std::max(h, w)), d(std::max(h, w));
  f.resize(h);
  d.resize(h);
  for (std::size_t x = 0; x < w; ++x) {
    for (std::size_t y = 0; y < h; ++y) f[y] = g[y * w + x];
    edt_1d(f, d);
    for (std::size_t y = 0; y < h; ++y) g[y * w + x] = d[y];
  }
  f.resize(w);
  d.resize(w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) f[x] = g[y * w + x];
    edt_1d(f, d);
    for (std::size_t x = 0; x < w; ++x) g[y * w + x] = std::sqrt(d[x]);
  }
  return g;
}

}  // namespace detail

/// Percentile (0..100) with linear interpolation between order statistics.
inline double percentile(std::vector<double> values, double pct) {
  if (values.empty()) throw std::invalid_argument("percentile of empty set");
  std::sort(values.begin(), values.end());
  const double pos = pct / 100.0 * double(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - double(lo)) * (values[hi] - values[lo]);
}

/// Symmetric 95th-percentile boundary Hausdorff distance, in physical units.
inline double hausdorff95(const BinaryMask& a, const BinaryMask& b, double spacing = 1.0) {
  require_same_grid(a, b, "hausdorff95");
  if (a.empty()) throw std::invalid_argument("hausdorff95: first mask is empty");
  if (b.empty()) throw std::invalid_argument("hausdorff95: second mask is empty");
  const BinaryMask ba = mask_boundary(a), bb = mask_boundary(b);
  auto directed = [](const BinaryMask& from, const BinaryMask& to) {
    const auto dt = detail::distance_transform(to);
    std::vector<double> d;
    for (std::size_t i = 0; i < from.data.size(); ++i)
      if (from.data[i]) d.push_back(dt[i]);
    return percentile(std::move(d), 95.0);
  };
  return spacing * std::max(directed(ba, bb), directed(bb, ba));
}

template <typename Real>
double rmse(const ScalarImage<Real>& f, const ScalarImage<Real>& g) {
  if (f.pixels.shape != g.pixels.shape) throw std::invalid_argument("rmse: image shapes differ");
  double s = 0;
  for (std::size_t i = 0; i < f.pixels.size(); ++i) {
    const double d = double(f.pixels.data[i]) - double(g.pixels.data[i]);
    s += d * d;
  }
  return std::sqrt(s / double(f.pixels.size()));
}

/// Mean Euclidean norm of the finite-difference gradient of det(J phi).
template <typename Real>
double grad_det_jac(const DeformationField<Real>& phi) {
  const ScalarImage<Real> det = jacobian_determinant(phi);
  const std::size_t h = det.height(), w = det.width();
  double total = 0;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double gx = x == 0       ? double(det(y, 1) - det(y, 0))
                        : x == w - 1 ? double(det(y, w - 1) - det(y, w - 2))
                                     : double(det(y, x + 1) - det(y, x - 1)) / 2;
      const double gy = y == 0       ? double(det(1, x) - det(0, x))
                        : y == h - 1 ? double(det(h - 1, x) - det(h - 2, x))
                                     : double(det(y + 1, x) - det(y - 1, x)) / 2;
      total += std::hypot(gx, gy);
    }
  return total / double(h * w);
}

/// (Area_ED - Area_ES) / Area_ED of the bloodpool.
inline double ejection_fraction(const BinaryMask& bp_ed, const BinaryMask& bp_es) {
  require_same_grid(bp_ed, bp_es, "ejection_fraction");
  const double a_ed = double(bp_ed.area());
  if (a_ed == 0) throw std::invalid_argument("ejection_fraction: empty ED bloodpool mask");
  return (a_ed - double(bp_es.area())) / a_ed;
}

struct StructureMasks {
  BinaryMask bloodpool;
  BinaryMask wall;
};

struct CaseReport {
  std::string id;
  double rmse = 0;
  double dice_bloodpool = 0, dice_wall = 0, dice_mean = 0;
  double hd95_bloodpool = 0, hd95_wall = 0, hd95_mean = 0;
  double grad_det_jac = 0;
  double ef = 0;  // ED->ES ejection fraction implied by the deformation

  friend bool operator==(const CaseReport&, const CaseReport&) = default;
};

struct CaseEvaluation {
  CaseReport registered;
  CaseReport baseline;  // identity deformation
  double ef_truth = 0;  // from the ED and ES reference masks
};

/// Warps ED masks by phi (nearest neighbour) and scores them against ES masks.
template <typename Real>
CaseReport score_deformation(const std::string& id, const ScalarImage<Real>& fixed, const ScalarImage<Real>& moving,
                             const StructureMasks& ed, const StructureMasks& es, const DeformationField<Real>& phi,
                             double spacing) {
  CaseReport r;
  r.id = id;
  r.rmse = rmse(fixed, warp(moving, phi));
  const BinaryMask bp = warp_nearest(ed.bloodpool, phi);
  const BinaryMask wall = warp_nearest(ed.wall, phi);
  r.dice_bloodpool = dice(bp, es.bloodpool);
  r.dice_wall = dice(wall, es.wall);
  r.dice_mean = 0.5 * (r.dice_bloodpool + r.dice_wall);
  r.hd95_bloodpool = hausdorff95(bp, es.bloodpool, spacing);
  r.hd95_wall = hausdorff95(wall, es.wall, spacing);
  r.hd95_mean = 0.5 * (r.hd95_bloodpool + r.hd95_wall);
  r.grad_det_jac = grad_det_jac(phi);
  r.ef = ejection_fraction(ed.bloodpool, bp);
  return r;
}

template <typename Real>
CaseEvaluation evaluate_case(const std::string& id, const ScalarImage<Real>& fixed, const ScalarImage<Real>& moving,
                             const StructureMasks& ed, const StructureMasks& es, const DeformationField<Real>& phi,
                             double spacing = 1.0) {
  CaseEvaluation ev;
  ev.registered = score_deformation(id, fixed, moving, ed, es, phi, spacing);
  ev.baseline = score_deformation(id, fixed, moving, ed, es,
                                  DeformationField<Real>::identity(fixed.height(), fixed.width()), spacing);
  ev.ef_truth = ejection_fraction(ed.bloodpool, es.bloodpool);
  return ev;
}

// ---------------------------------------------------------------------------
// Paired Wilcoxon signed-rank test
// ---------------------------------------------------------------------------

struct WilcoxonResult {
  std::size_t n = 0;  // non-zero differences
  double w_plus = 0;
  double z = 0;
  double p_value = 1;  // two-sided, normal approximation with tie correction
};

inline WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("wilcoxon: samples must be paired");
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) d.push_back(a[i] - b[i]);
  WilcoxonResult r;
  r.n = d.size();
  if (r.n == 0) return r;
  std::vector<std::size_t> order(r.n);
  for (std::size_t i = 0; i < r.n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return std::abs(d[i]) < std::abs(d[j]); });
  std::vector<double> rank(r.n);
  double tie_term = 0;
  for (std::size_t i = 0; i < r.n;) {
    std::size_t j = i;
    while (j + 1 < r.n && std::abs(d[order[j + 1]]) == std::abs(d[order[i]])) ++j;
    const double avg = 0.5 * double(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    const double t = double(j - i + 1);
    tie_term += t * t * t - t;
    i = j + 1;
  }
  for (std::size_t i = 0; i < r.n; ++i)
    if (d[i] > 0) r.w_plus += rank[i];
  const double n = double(r.n);
  const double mean = n * (n + 1) / 4;
  const double var = n * (n + 1) * (2 * n + 1) / 24 - tie_term / 48;
  if (var <= 0) return r;
  const double diff = r.w_plus - mean;
  const double cc = diff > 0 ? -0.5 : (diff < 0 ? 0.5 : 0.0);
  r.z = (diff + cc) / std::sqrt(var);
  r.p_value = std::min(1.0, std::erfc(std::abs(r.z) / std::sqrt(2.0)));
  return r;
}

}  // namespace dreg
