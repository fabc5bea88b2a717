#pragma once

// Synthetic short-axis "cardiac" phantom: a bright bloodpool inside a dark
// annular wall on a mid-grey background. The end-systolic frame is the
// end-diastolic geometry under a radial contraction that removes a fraction c
// of the bloodpool area, modulated by low-order angular harmonics (regional
// wall motion), preserves wall area along every ray, and is followed by a
// small rigid shift.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "dreg/diffeo.hpp"
#include "dreg/io.hpp"
#include "dreg/mask.hpp"

namespace dreg {

enum class PhantomClass { norm = 0, hyp = 1, dil = 2 };

inline const char* class_name(PhantomClass c) {
  switch (c) {
    case PhantomClass::norm: return "NORM";
    case PhantomClass::hyp: return "HYP";
    case PhantomClass::dil: return "DIL";
  }
  return "?";
}

inline PhantomClass parse_class(const std::string& s) {
  if (s == "NORM") return PhantomClass::norm;
  if (s == "HYP") return PhantomClass::hyp;
  if (s == "DIL") return PhantomClass::dil;
  throw std::invalid_argument("unknown phantom class '" + s + "'");
}

inline constexpr std::size_t kHarmonics = 4;

struct PhantomSpec {
  PhantomClass label = PhantomClass::norm;
  std::size_t extent = 64;
  double center_x = 31.5, center_y = 31.5;
  double outer_radius = 14.0;
  double wall_thickness = 4.0;
  double contraction = 0.5;  // fractional bloodpool area reduction ED -> ES
  std::array<double, 2 * kHarmonics> regional{};  // (cos k, sin k) coefficients, k = 1..4
  double shift_x = 0.0, shift_y = 0.0;           // ES translation, px
  double background = 0.45, wall = 0.15, bloodpool = 0.85;
  double noise_sd = 0.02;
  std::uint64_t seed = 0;

  double inner_radius() const { return outer_radius - wall_thickness; }

  /// Zero-mean angular modulation of the contraction.
  double modulation(double theta) const {
    double p = 0;
    for (std::size_t k = 0; k < kHarmonics; ++k)
      p += regional[2 * k] * std::cos(double(k + 1) * theta) + regional[2 * k + 1] * std::sin(double(k + 1) * theta);
    return p;
  }

  double max_modulation() const {
    double m = 0;
    for (int i = 0; i < 720; ++i) m = std::max(m, std::abs(modulation(2 * std::numbers::pi * i / 720)));
    return m;
  }

  /// ES radii of the bloodpool and outer wall boundaries along angle theta.
  std::pair<double, double> es_radii(double theta) const {
    const double ri = inner_radius();
    const double cut = contraction * (1 + modulation(theta));
    return {ri * std::sqrt(1 - cut), std::sqrt(outer_radius * outer_radius - cut * ri * ri)};
  }

  void validate() const {
    if (!(contraction >= 0 && contraction < 1)) throw std::invalid_argument("PhantomSpec: contraction must be in [0,1)");
    if (!(inner_radius() > 2)) throw std::invalid_argument("PhantomSpec: outer radius minus wall thickness must exceed 2 px");
    if (contraction * (1 + max_modulation()) >= 0.95)
      throw std::invalid_argument("PhantomSpec: regional contraction collapses the bloodpool");
    const double reach = outer_radius + std::hypot(shift_x, shift_y);
    const double hi = double(extent) - 1 - 4;
    if (center_x - reach < 4 || center_y - reach < 4 || center_x + reach > hi || center_y + reach > hi)
      throw std::invalid_argument("PhantomSpec: annulus violates the 4 px image margin");
  }
};

struct PhantomPair {
  ScalarImage<double> ed;  // moving
  ScalarImage<double> es;  // fixed
  BinaryMask ed_bloodpool, ed_wall, es_bloodpool, es_wall;
};

namespace detail {

inline double smooth_edge(double d) {
  // Smoothstep over one pixel centred on the boundary (d > 0 inside).
  const double t = std::clamp(d + 0.5, 0.0, 1.0);
  return t * t * (3 - 2 * t);
}

}  // namespace detail

/// For each ES pixel, the ED position it came from (the pullback a perfect
/// registration of ED onto ES recovers), as a displacement field.
inline DeformationField<double> ground_truth_deformation(const PhantomSpec& spec) {
  const std::size_t n = spec.extent;
  Tensor<double> u(Shape{2, n, n});
  const double ri = spec.inner_radius();
  const double ecx = spec.center_x + spec.shift_x, ecy = spec.center_y + spec.shift_y;
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double dx = double(x) - ecx, dy = double(y) - ecy;
      const double rho = std::hypot(dx, dy), theta = std::atan2(dy, dx);
      const double cut = spec.contraction * (1 + spec.modulation(theta));
      const double s = std::sqrt(1 - cut);
      const double r = rho <= ri * s ? rho / s : std::sqrt(rho * rho + cut * ri * ri);
      u.at(0, y, x) = spec.center_x + r * std::cos(theta) - double(x);
      u.at(1, y, x) = spec.center_y + r * std::sin(theta) - double(y);
    }
  return DeformationField<double>(std::move(u));
}

inline PhantomPair generate_pair(const PhantomSpec& spec) {
  spec.validate();
  const std::size_t n = spec.extent;
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> noise(0.0, spec.noise_sd);
  PhantomPair out{ScalarImage<double>(n, n), ScalarImage<double>(n, n), BinaryMask(n, n), BinaryMask(n, n),
                  BinaryMask(n, n), BinaryMask(n, n)};
  auto render = [&](bool systole, ScalarImage<double>& img, BinaryMask& bp, BinaryMask& wall) {
    const double cx = spec.center_x + (systole ? spec.shift_x : 0.0);
    const double cy = spec.center_y + (systole ? spec.shift_y : 0.0);
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        const double dx = double(x) - cx, dy = double(y) - cy;
        const double rho = std::hypot(dx, dy);
        double r_in = spec.inner_radius(), r_out = spec.outer_radius;
        if (systole) std::tie(r_in, r_out) = spec.es_radii(std::atan2(dy, dx));
        const double v = spec.background + (spec.wall - spec.background) * detail::smooth_edge(r_out - rho) +
                         (spec.bloodpool - spec.wall) * detail::smooth_edge(r_in - rho);
        img(y, x) = std::clamp(v + noise(rng), 0.0, 1.0);
        bp.set(y, x, rho < r_in);
        wall.set(y, x, rho >= r_in && rho < r_out);
      }
  };
  render(false, out.ed, out.ed_bloodpool, out.ed_wall);
  render(true, out.es, out.es_bloodpool, out.es_wall);
  return out;
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// Parameter ranges per class at a 64-pixel extent (radii scale linearly).
struct ClassRanges {
  double outer_lo, outer_hi;
  double thick_lo, thick_hi;  // fraction of outer radius
  double contraction_lo, contraction_hi;
};

inline ClassRanges class_ranges(PhantomClass c) {
  switch (c) {
    case PhantomClass::norm: return {13.0, 17.0, 0.25, 0.32, 0.45, 0.60};
    case PhantomClass::hyp: return {13.0, 17.0, 0.35, 0.45, 0.60, 0.75};
    case PhantomClass::dil: return {18.0, 22.0, 0.15, 0.22, 0.10, 0.25};
  }
  throw std::invalid_argument("unknown class");
}

inline PhantomSpec sample_spec(PhantomClass label, std::size_t extent, std::mt19937_64& rng) {
  const ClassRanges cr = class_ranges(label);
  const double k = double(extent) / 64.0;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto draw = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  PhantomSpec s;
  s.label = label;
  s.extent = extent;
  s.outer_radius = k * draw(cr.outer_lo, cr.outer_hi);
  s.wall_thickness = s.outer_radius * draw(cr.thick_lo, cr.thick_hi);
  s.contraction = draw(cr.contraction_lo, cr.contraction_hi);
  const double mid = (double(extent) - 1) / 2;
  // Centre jitter of up to 3 px (scaled), less if the largest annulus of the
  // class would otherwise break the margin on small images.
  const double slack = mid - 4 - k * (cr.outer_hi + 1.5 * std::sqrt(2.0));
  if (slack < 0)
    throw std::invalid_argument("sample_spec: extent " + std::to_string(extent) + " is too small for class " +
                                class_name(label));
  const double jitter = std::min(3.0 * k, slack);
  s.center_x = mid + draw(-jitter, jitter);
  s.center_y = mid + draw(-jitter, jitter);
  for (auto& a : s.regional) a = draw(-0.12, 0.12);
  const double limit = std::min(0.3, 0.9 / s.contraction - 1);
  const double m = s.max_modulation();
  if (m > limit)
    for (auto& a : s.regional) a *= limit / m;
  s.shift_x = k * draw(-1.5, 1.5);
  s.shift_y = k * draw(-1.5, 1.5);
  s.seed = rng();
  return s;
}

/// Mask-level EF within 0.015 of the contraction and wall area kept within 4%.
inline bool masks_match_spec(const PhantomPair& p, const PhantomSpec& s) {
  const double ed = double(p.ed_bloodpool.area()), es = double(p.es_bloodpool.area());
  const double wa = double(p.ed_wall.area()), wb = double(p.es_wall.area());
  return ed > 0 && std::abs((ed - es) / ed - s.contraction) <= 0.015 && std::abs(wa - wb) <= 0.04 * wa;
}

struct PhantomCase {
  std::string id;
  PhantomClass label = PhantomClass::norm;
  bool train = true;
  PhantomSpec spec;
  PhantomPair pair;
};

struct PhantomDataset {
  std::uint64_t seed = 0;
  std::size_t extent = 64;
  std::vector<PhantomCase> cases;

  std::vector<const PhantomCase*> split(bool train) const {
    std::vector<const PhantomCase*> out;
    for (const auto& c : cases)
      if (c.train == train) out.push_back(&c);
    return out;
  }
};

/// Number of training cases per class under the 70/30 split.
inline std::size_t train_count(std::size_t n_per_class) { return (7 * n_per_class + 5) / 10; }

/// train_per_class = 0 selects the 70/30 split; otherwise the first
/// train_per_class cases of each class are training cases.
inline PhantomDataset generate_dataset(std::size_t n_per_class, std::size_t extent, std::uint64_t seed,
                                       std::size_t train_per_class = 0) {
  if (n_per_class < 1) throw std::invalid_argument("generate_dataset: n_per_class must be >= 1");
  if (train_per_class >= n_per_class && train_per_class != 0)
    throw std::invalid_argument("generate_dataset: train_per_class must be below n_per_class");
  PhantomDataset ds;
  ds.seed = seed;
  ds.extent = extent;
  const std::size_t n_train = train_per_class ? train_per_class : train_count(n_per_class);
  for (PhantomClass label : {PhantomClass::norm, PhantomClass::hyp, PhantomClass::dil}) {
    for (std::size_t i = 0; i < n_per_class; ++i) {
      std::seed_seq seq{std::uint64_t(seed), std::uint64_t(seed >> 32), std::uint64_t(label), std::uint64_t(i)};
      std::mt19937_64 rng(seq);
      PhantomCase c;
      c.label = label;
      c.id = std::string(class_name(label)) + "_" + std::to_string(1000 + i).substr(1);
      c.train = i < n_train;
      // Pixelised masks can miss the analytic EF and wall area; redraw the
      // (rare) cases that fall outside tolerance.
      for (int attempt = 0;; ++attempt) {
        c.spec = sample_spec(label, extent, rng);
        c.pair = generate_pair(c.spec);
        if (masks_match_spec(c.pair, c.spec) || attempt == 63) break;
      }
      ds.cases.push_back(std::move(c));
    }
  }
  return ds;
}

// ---- manifest -------------------------------------------------------------

inline nlohmann::json spec_to_json(const PhantomSpec& s) {
  return {{"class", class_name(s.label)},
          {"extent", s.extent},
          {"center_x", s.center_x},
          {"center_y", s.center_y},
          {"outer_radius", s.outer_radius},
          {"wall_thickness", s.wall_thickness},
          {"contraction", s.contraction},
          {"regional", s.regional},
          {"shift_x", s.shift_x},
          {"shift_y", s.shift_y},
          {"background", s.background},
          {"wall", s.wall},
          {"bloodpool", s.bloodpool},
          {"noise_sd", s.noise_sd},
          {"seed", s.seed}};
}

inline PhantomSpec spec_from_json(const nlohmann::json& j) {
  PhantomSpec s;
  s.label = parse_class(j.at("class").get<std::string>());
  s.extent = j.at("extent").get<std::size_t>();
  s.center_x = j.at("center_x").get<double>();
  s.center_y = j.at("center_y").get<double>();
  s.outer_radius = j.at("outer_radius").get<double>();
  s.wall_thickness = j.at("wall_thickness").get<double>();
  s.contraction = j.at("contraction").get<double>();
  s.regional = j.at("regional").get<std::array<double, 2 * kHarmonics>>();
  s.shift_x = j.at("shift_x").get<double>();
  s.shift_y = j.at("shift_y").get<double>();
  s.background = j.at("background").get<double>();
  s.wall = j.at("wall").get<double>();
  s.bloodpool = j.at("bloodpool").get<double>();
  s.noise_sd = j.at("noise_sd").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

/// Writes every case as DRT1 tensors plus manifest.json; optional PGM previews.
inline void write_dataset(const PhantomDataset& ds, const std::filesystem::path& dir, bool pgm = false) {
  ensure_directory(dir / "cases");
  nlohmann::json cases = nlohmann::json::array();
  for (const auto& c : ds.cases) {
    const std::string base = "cases/" + c.id;
    const auto& p = c.pair;
    save_drt(dir / (base + "_ed.drt"), p.ed.pixels);
    save_drt(dir / (base + "_es.drt"), p.es.pixels);
    save_drt(dir / (base + "_ed_bloodpool.drt"), mask_to_tensor<float>(p.ed_bloodpool));
    save_drt(dir / (base + "_ed_wall.drt"), mask_to_tensor<float>(p.ed_wall));
    save_drt(dir / (base + "_es_bloodpool.drt"), mask_to_tensor<float>(p.es_bloodpool));
    save_drt(dir / (base + "_es_wall.drt"), mask_to_tensor<float>(p.es_wall));
    if (pgm) {
      write_pgm(dir / (base + "_ed.pgm"), p.ed.pixels, 0.0, 1.0);
      write_pgm(dir / (base + "_es.pgm"), p.es.pixels, 0.0, 1.0);
    }
    cases.push_back({{"id", c.id},
                     {"class", class_name(c.label)},
                     {"split", c.train ? "train" : "test"},
                     {"ed", base + "_ed.drt"},
                     {"es", base + "_es.drt"},
                     {"ed_bloodpool", base + "_ed_bloodpool.drt"},
                     {"ed_wall", base + "_ed_wall.drt"},
                     {"es_bloodpool", base + "_es_bloodpool.drt"},
                     {"es_wall", base + "_es_wall.drt"},
                     {"spec", spec_to_json(c.spec)}});
  }
  nlohmann::json manifest = {{"format", "dreg-phantom-manifest/1"},
                             {"seed", ds.seed},
                             {"extent", ds.extent},
                             {"cases", cases}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

/// Loads and validates a manifest: unique ids, every file present and parsable.
inline PhantomDataset load_dataset(const std::filesystem::path& manifest_path) {
  const auto dir = manifest_path.parent_path();
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(read_text(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("invalid manifest " + manifest_path.string() + ": " + e.what());
  }
  PhantomDataset ds;
  ds.seed = m.at("seed").get<std::uint64_t>();
  ds.extent = m.at("extent").get<std::size_t>();
  std::set<std::string> ids;
  for (const auto& jc : m.at("cases")) {
    PhantomCase c;
    c.id = jc.at("id").get<std::string>();
    if (!ids.insert(c.id).second) throw std::runtime_error("manifest: duplicate case id " + c.id);
    c.label = parse_class(jc.at("class").get<std::string>());
    c.train = jc.at("split").get<std::string>() == "train";
    c.spec = spec_from_json(jc.at("spec"));
    auto img = [&](const char* key) {
      return ScalarImage<double>(load_drt<double>((dir / jc.at(key).get<std::string>()).string()));
    };
    auto mask = [&](const char* key) { return mask_from_tensor(load_drt<float>((dir / jc.at(key).get<std::string>()).string())); };
    c.pair = {img("ed"), img("es"), mask("ed_bloodpool"), mask("ed_wall"), mask("es_bloodpool"), mask("es_wall")};
    ds.cases.push_back(std::move(c));
  }
  return ds;
}

}  // namespace dreg
