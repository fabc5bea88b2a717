#pragma once

// Stochastic training: augmentation, Adam with decoupled weight decay,
// checkpoints, and the epoch loop. Every random draw of global step t comes
// from a generator seeded by (seed, t), so a resumed run replays exactly the
// draws an uninterrupted run would have made.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "dreg/config.hpp"
#include "dreg/io.hpp"
#include "dreg/model.hpp"

namespace dreg {

struct AugmentRanges {
  bool enabled = true;
  double shift = 8.0;          // px, each axis
  double rotation_deg = 15.0;  // +-
  double scale_lo = 0.9, scale_hi = 1.1;
  double mirror_prob = 0.5;
};

struct TrainConfig {
  double learning_rate = 1.5e-4;
  std::size_t batch_size = 1;
  std::size_t epochs = 30;
  AugmentRanges augment;
  std::uint64_t seed = 0;
  std::size_t checkpoint_interval = 0;  // steps; 0 = only at the end
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

  void validate(std::size_t height, std::size_t width) const {
    if (!(learning_rate >= 0) || !std::isfinite(learning_rate))
      throw std::invalid_argument("TrainConfig: learning_rate must be finite and >= 0");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    const auto& a = augment;
    if (a.shift < 0 || 2 * a.shift >= double(std::min(height, width)))
      throw std::invalid_argument("TrainConfig: augmentation shift must be within the image bounds");
    if (a.rotation_deg < 0 || a.rotation_deg > 180) throw std::invalid_argument("TrainConfig: rotation out of range");
    if (!(a.scale_lo > 0 && a.scale_lo <= a.scale_hi)) throw std::invalid_argument("TrainConfig: bad scale range");
    if (a.mirror_prob < 0 || a.mirror_prob > 1) throw std::invalid_argument("TrainConfig: mirror_prob must be in [0,1]");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && adam_eps > 0))
      throw std::invalid_argument("TrainConfig: bad Adam hyperparameters");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"seed", c.seed},
          {"checkpoint_interval", c.checkpoint_interval},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"augment",
           {{"enabled", c.augment.enabled},
            {"shift", c.augment.shift},
            {"rotation_deg", c.augment.rotation_deg},
            {"scale_lo", c.augment.scale_lo},
            {"scale_hi", c.augment.scale_hi},
            {"mirror_prob", c.augment.mirror_prob}}}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c, const std::string& ctx = "train") {
  StrictReader r(j, ctx);
  r.get("learning_rate", c.learning_rate);
  r.get("batch_size", c.batch_size);
  r.get("epochs", c.epochs);
  r.get("seed", c.seed);
  r.get("checkpoint_interval", c.checkpoint_interval);
  r.get("beta1", c.beta1);
  r.get("beta2", c.beta2);
  r.get("adam_eps", c.adam_eps);
  r.object("augment", [&](const nlohmann::json& a, const std::string& actx) {
    StrictReader ra(a, actx);
    ra.get("enabled", c.augment.enabled);
    ra.get("shift", c.augment.shift);
    ra.get("rotation_deg", c.augment.rotation_deg);
    ra.get("scale_lo", c.augment.scale_lo);
    ra.get("scale_hi", c.augment.scale_hi);
    ra.get("mirror_prob", c.augment.mirror_prob);
    ra.finish();
  });
  r.finish();
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentDraw {
  double shift_x = 0, shift_y = 0;
  double rotation = 0;  // radians
  double scale = 1;
  bool mirror = false;
};

inline AugmentDraw draw_augmentation(const AugmentRanges& a, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto sym = [&](double r) { return r * (2 * unit(rng) - 1); };
  AugmentDraw d;
  d.shift_x = sym(a.shift);
  d.shift_y = sym(a.shift);
  d.rotation = sym(a.rotation_deg) * std::numbers::pi / 180;
  d.scale = a.scale_lo + (a.scale_hi - a.scale_lo) * unit(rng);
  d.mirror = unit(rng) < a.mirror_prob;
  return d;
}

/// Sampling grid of the transform: output pixel x reads the input at
/// c + S^-1 R^-1 (x - c - t), mirrored about the vertical centre line.
template <typename Real>
Tensor<Real> augmentation_grid(std::size_t h, std::size_t w, const AugmentDraw& d) {
  Tensor<Real> g(Shape{2, h, w});
  const double cx = (double(w) - 1) / 2, cy = (double(h) - 1) / 2;
  const double c = std::cos(d.rotation), s = std::sin(d.rotation);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double qx = double(x) - cx - d.shift_x, qy = double(y) - cy - d.shift_y;
      double px = (c * qx + s * qy) / d.scale;
      const double py = (-s * qx + c * qy) / d.scale;
      if (d.mirror) px = -px;
      g.at(0, y, x) = Real(cx + px);
      g.at(1, y, x) = Real(cy + py);
    }
  return g;
}

template <typename Real>
std::pair<ScalarImage<Real>, ScalarImage<Real>> augment(const ScalarImage<Real>& fixed, const ScalarImage<Real>& moving,
                                                        const AugmentDraw& d) {
  if (fixed.pixels.shape != moving.pixels.shape)
    detail::shape_error("augment", {fixed.pixels.shape, moving.pixels.shape});
  Tape<Real> tape;
  auto grid = tape.constant(augmentation_grid<Real>(fixed.height(), fixed.width(), d));
  return {ScalarImage<Real>(grid_sample(tape.constant(fixed.pixels), grid).value(), fixed.spacing),
          ScalarImage<Real>(grid_sample(tape.constant(moving.pixels), grid).value(), moving.spacing)};
}

template <typename Real>
std::pair<ScalarImage<Real>, ScalarImage<Real>> augment(const ScalarImage<Real>& fixed, const ScalarImage<Real>& moving,
                                                        const AugmentRanges& ranges, std::mt19937_64& rng) {
  return augment(fixed, moving, draw_augmentation(ranges, rng));
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

template <typename Real>
struct AdamState {
  std::uint64_t t = 0;
  std::vector<Tensor<Real>> m, v;  // parallel to ModelParams::list()

  static AdamState zeros(const ModelParams<Real>& params) {
    AdamState s;
    for (const auto& p : params.list()) {
      s.m.emplace_back(p.value.shape);
      s.v.emplace_back(p.value.shape);
    }
    return s;
  }

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

/// One Adam update from the accumulated gradients, followed by decoupled
/// decay w -= weight_decay * w on parameters flagged for decay. The decay is
/// not scaled by the learning rate.
template <typename Real>
void adam_update(ModelParams<Real>& params, AdamState<Real>& state, const TrainConfig& cfg, double weight_decay) {
  auto& list = params.list();
  if (state.m.size() != list.size()) throw std::invalid_argument("adam_update: optimizer state does not match model");
  ++state.t;
  const double bc1 = 1 - std::pow(cfg.beta1, double(state.t));
  const double bc2 = 1 - std::pow(cfg.beta2, double(state.t));
  const Real b1 = Real(cfg.beta1), b2 = Real(cfg.beta2);
  for (std::size_t k = 0; k < list.size(); ++k) {
    auto& p = list[k];
    auto& m = state.m[k].data;
    auto& v = state.v[k].data;
    const auto& g = p.grad.data;
    auto& w = p.value.data;
    const Real wd = p.decay ? Real(weight_decay) : Real(0);
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (1 - b1) * g[i];
      v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
      const double step = double(m[i]) / bc1 / (std::sqrt(double(v[i]) / bc2) + cfg.adam_eps);
      const Real old = w[i];
      w[i] = old - Real(cfg.learning_rate * step) - wd * old;
    }
  }
}

// ---------------------------------------------------------------------------
// Steps
// ---------------------------------------------------------------------------

template <typename Real>
struct TrainPair {
  ScalarImage<Real> fixed;   // ES
  ScalarImage<Real> moving;  // ED
};

struct StepRecord {
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  double total = 0, kl = 0;
  std::vector<double> lcc;
  double mean_abs_z = 0;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Generator for every draw of global step t (pair augmentation and epsilon).
inline std::mt19937_64 step_rng(std::uint64_t seed, std::uint64_t step) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(step), std::uint32_t(step >> 32),
                    0x5713u};
  return std::mt19937_64(seq);
}

/// Order in which epoch e visits the n training pairs.
inline std::vector<std::size_t> epoch_order(std::uint64_t seed, std::uint64_t epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(epoch), std::uint32_t(epoch >> 32),
                    0xe90cu};
  std::mt19937_64 rng(seq);
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  return order;
}

template <typename Real>
Tensor<Real> standard_normal(std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Tensor<Real> e(Shape{d});
  for (auto& v : e.data) v = Real(n01(rng));
  return e;
}

/// Forward/backward over a batch (one epsilon per pair) and one Adam update.
/// Throws NonFiniteLoss before touching the parameters if the loss is not
/// finite.
template <typename Real>
StepRecord train_step(RegistrationModel<Real>& model, AdamState<Real>& opt, std::span<const TrainPair<Real>> batch,
                      std::span<const Tensor<Real>> epsilons, const LossConfig& loss_cfg, const TrainConfig& cfg) {
  if (batch.empty() || batch.size() != epsilons.size())
    throw std::invalid_argument("train_step: need one epsilon per pair");
  auto& params = model.params();
  params.zero_grad();
  StepRecord rec;
  rec.lcc.assign(loss_cfg.scales.size(), 0.0);
  const Real seed = Real(1) / Real(batch.size());
  const double inv = 1.0 / double(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    Tape<Real> tape;
    Tensor<Real> z;
    auto terms = pair_loss(model, tape, batch[b].fixed, batch[b].moving, epsilons[b], loss_cfg, &z);
    const double total = double(terms.total.value()[0]);
    if (!std::isfinite(total)) throw NonFiniteLoss("non-finite loss " + fmt_double(total));
    tape.backward(terms.total, seed);
    rec.total += inv * total;
    rec.kl += inv * double(terms.kl.value()[0]);
    for (std::size_t s = 0; s < rec.lcc.size(); ++s) rec.lcc[s] += inv * double(terms.lcc[s].value()[0]);
    double az = 0;
    for (auto v : z.data) az += std::abs(double(v));
    rec.mean_abs_z += inv * az / double(z.size());
  }
  for (const auto& p : params.list())
    for (auto g : p.grad.data)
      if (!std::isfinite(double(g))) throw NonFiniteLoss("non-finite gradient in " + p.name);
  adam_update(params, opt, cfg, model.config().weight_decay);
  return rec;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr const char* kCheckpointFormat = "dreg-checkpoint/1";

template <typename Real>
struct Checkpoint {
  RegistrationModel<Real> model;
  AdamState<Real> optimizer;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  nlohmann::json extra;  // loss/train config and anything else the writer stored
};

namespace detail {

template <typename Real>
Tensor<Real> concat_flat(const std::vector<const Tensor<Real>*>& parts) {
  std::size_t n = 0;
  for (auto* p : parts) n += p->size();
  Tensor<Real> out(Shape{n});
  std::size_t off = 0;
  for (auto* p : parts) {
    std::copy(p->data.begin(), p->data.end(), out.data.begin() + std::ptrdiff_t(off));
    off += p->size();
  }
  return out;
}

}  // namespace detail

/// Writes checkpoint.json, params.drt and optimizer.drt (m then v) into dir.
template <typename Real>
void save_checkpoint(const std::filesystem::path& dir, const RegistrationModel<Real>& model,
                     const AdamState<Real>& opt, std::uint64_t step, std::uint64_t seed,
                     const nlohmann::json& extra = nlohmann::json::object()) {
  ensure_directory(dir);
  const auto& list = model.params().list();
  std::vector<const Tensor<Real>*> values, moments;
  nlohmann::json entries = nlohmann::json::array();
  const std::size_t width = sizeof(Real);
  const std::size_t header = 4 + 4 + 4 + 1;  // magic, rank, one extent, width code
  std::size_t off = 0;
  for (const auto& p : list) {
    values.push_back(&p.value);
    entries.push_back({{"name", p.name},
                       {"shape", p.value.shape},
                       {"offset", off},
                       {"byte_offset", header + off * width},
                       {"count", p.value.size()},
                       {"decay", p.decay}});
    off += p.value.size();
  }
  for (const auto& m : opt.m) moments.push_back(&m);
  for (const auto& v : opt.v) moments.push_back(&v);
  save_drt((dir / "params.drt").string(), detail::concat_flat(values));
  save_drt((dir / "optimizer.drt").string(), detail::concat_flat(moments));
  nlohmann::json manifest = {{"format", kCheckpointFormat},
                             {"precision", width == 8 ? "float64" : "float32"},
                             {"network", to_json(model.config())},
                             {"step", step},
                             {"seed", seed},
                             {"parameter_count", off},
                             {"params_blob", "params.drt"},
                             {"parameters", entries},
                             {"optimizer", {{"blob", "optimizer.drt"}, {"t", opt.t}, {"layout", "m then v"}}},
                             {"extra", extra}};
  write_text(dir / "checkpoint.json", manifest.dump(2) + "\n");
}

template <typename Real>
Checkpoint<Real> load_checkpoint(const std::filesystem::path& dir) {
  const auto path = dir / "checkpoint.json";
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("invalid checkpoint manifest " + path.string() + ": " + e.what());
  }
  if (m.value("format", "") != kCheckpointFormat)
    throw std::runtime_error(path.string() + ": not a " + std::string(kCheckpointFormat) + " manifest");
  NetworkConfig net;
  from_json(m.at("network"), net);
  Checkpoint<Real> ck{RegistrationModel<Real>(net, 0), {}, m.at("step").get<std::uint64_t>(),
                      m.at("seed").get<std::uint64_t>(), m.value("extra", nlohmann::json::object())};
  auto& list = ck.model.params().list();
  const auto entries = m.at("parameters");
  if (entries.size() != list.size())
    throw std::runtime_error(path.string() + ": parameter count does not match the network config");
  const auto flat = load_drt<Real>((dir / m.at("params_blob").get<std::string>()).string());
  const auto moments = load_drt<Real>((dir / m.at("optimizer").at("blob").get<std::string>()).string());
  const std::size_t total = m.at("parameter_count").get<std::size_t>();
  if (flat.size() != total || moments.size() != 2 * total)
    throw std::runtime_error(dir.string() + ": blob sizes do not match the manifest");
  ck.optimizer = AdamState<Real>::zeros(ck.model.params());
  ck.optimizer.t = m.at("optimizer").at("t").get<std::uint64_t>();
  for (std::size_t k = 0; k < list.size(); ++k) {
    const auto& e = entries[k];
    auto& p = list[k];
    if (e.at("name").get<std::string>() != p.name || e.at("shape").get<Shape>() != p.value.shape)
      throw std::runtime_error(path.string() + ": parameter " + std::to_string(k) + " is " +
                               e.at("name").get<std::string>() + " " + shape_str(e.at("shape").get<Shape>()) +
                               ", network expects " + p.name + " " + shape_str(p.value.shape));
    const std::size_t off = e.at("offset").get<std::size_t>(), n = p.value.size();
    if (off + n > total) throw std::runtime_error(path.string() + ": offset out of range for " + p.name);
    auto first = flat.data.begin() + std::ptrdiff_t(off);
    std::copy(first, first + std::ptrdiff_t(n), p.value.data.begin());
    auto mf = moments.data.begin() + std::ptrdiff_t(off);
    std::copy(mf, mf + std::ptrdiff_t(n), ck.optimizer.m[k].data.begin());
    auto vf = moments.data.begin() + std::ptrdiff_t(total + off);
    std::copy(vf, vf + std::ptrdiff_t(n), ck.optimizer.v[k].data.begin());
  }
  return ck;
}

// ---------------------------------------------------------------------------
// Loop
// ---------------------------------------------------------------------------

inline std::string metrics_header(std::size_t scales) {
  std::string h = "step,epoch,total,kl";
  for (std::size_t s = 1; s <= scales; ++s) h += ",lcc_s" + std::to_string(s);
  return h + ",mean_abs_z";
}

inline std::string metrics_row(const StepRecord& r) {
  std::string row = std::to_string(r.step) + "," + std::to_string(r.epoch) + "," + fmt_double(r.total) + "," +
                    fmt_double(r.kl);
  for (double l : r.lcc) row += "," + fmt_double(l);
  return row + "," + fmt_double(r.mean_abs_z);
}

struct TrainOptions {
  std::filesystem::path out_dir;  // checkpoints go to out_dir/checkpoint; empty = none
  std::uint64_t stop_step = 0;    // 0 = epochs * steps_per_epoch
  std::function<void(const StepRecord&)> on_step;
  nlohmann::json extra = nlohmann::json::object();
};

/// Runs global steps [start_step, stop) over `data` and returns their records.
/// On a non-finite loss the current state is dumped to out_dir/nonfinite
/// before the exception propagates.
template <typename Real>
std::vector<StepRecord> train(RegistrationModel<Real>& model, AdamState<Real>& opt,
                              const std::vector<TrainPair<Real>>& data, const LossConfig& loss_cfg,
                              const TrainConfig& cfg, std::uint64_t start_step, const TrainOptions& options = {}) {
  const auto& net = model.config();
  cfg.validate(net.height, net.width);
  loss_cfg.validate();
  if (loss_cfg.squaring_steps != net.squaring_steps)
    throw std::invalid_argument("train: loss and network squaring steps differ");
  if (data.empty()) throw std::invalid_argument("train: empty training set");
  const std::size_t n = data.size();
  const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::uint64_t stop = options.stop_step ? options.stop_step : cfg.epochs * per_epoch;
  std::vector<StepRecord> records;
  std::vector<std::size_t> order;
  std::uint64_t order_epoch = ~std::uint64_t(0);
  for (std::uint64_t t = start_step; t < stop; ++t) {
    const std::uint64_t epoch = t / per_epoch;
    if (epoch != order_epoch) {
      order = epoch_order(cfg.seed, epoch, n);
      order_epoch = epoch;
    }
    auto rng = step_rng(cfg.seed, t);
    std::vector<TrainPair<Real>> batch;
    std::vector<Tensor<Real>> eps;
    const std::size_t first = std::size_t(t % per_epoch) * cfg.batch_size;
    for (std::size_t b = first; b < std::min(n, first + cfg.batch_size); ++b) {
      const auto& pair = data[order[b]];
      if (cfg.augment.enabled) {
        auto [f, m] = augment(pair.fixed, pair.moving, cfg.augment, rng);
        batch.push_back({std::move(f), std::move(m)});
      } else {
        batch.push_back(pair);
      }
      eps.push_back(standard_normal<Real>(net.latent_dim, rng));
    }
    StepRecord rec;
    try {
      rec = train_step<Real>(model, opt, batch, eps, loss_cfg, cfg);
    } catch (const NonFiniteLoss& e) {
      if (!options.out_dir.empty()) {
        save_checkpoint(options.out_dir / "nonfinite", model, opt, t, cfg.seed, options.extra);
        throw NonFiniteLoss(std::string(e.what()) + " at step " + std::to_string(t) + "; state dumped to " +
                            (options.out_dir / "nonfinite").string());
      }
      throw NonFiniteLoss(std::string(e.what()) + " at step " + std::to_string(t));
    }
    rec.step = t;
    rec.epoch = epoch;
    if (options.on_step) options.on_step(rec);
    records.push_back(std::move(rec));
    const bool last = t + 1 == stop;
    if (!options.out_dir.empty() && (last || (cfg.checkpoint_interval && (t + 1) % cfg.checkpoint_interval == 0)))
      save_checkpoint(options.out_dir / "checkpoint", model, opt, t + 1, cfg.seed, options.extra);
  }
  return records;
}

}  // namespace dreg
