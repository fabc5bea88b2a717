#pragma once

// Conditional variational autoencoder for registration. The encoder maps a
// (fixed, moving) pair to a diagonal Gaussian over the latent code; the decoder
// maps a code plus the moving image to one stationary velocity field per
// scale, conditioned on a downsampled copy of the moving image at every stage.

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "dreg/autodiff.hpp"
#include "dreg/diffeo.hpp"
#include "dreg/objective.hpp"

namespace dreg {

struct NetworkConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t latent_dim = 32;
  int num_scales = 3;
  std::vector<std::size_t> encoder_channels{16, 32, 32, 4};
  std::vector<std::size_t> encoder_strides{2, 2, 2, 1};
  std::vector<std::size_t> decoder_channels{32, 32, 16};  // coarsest stage first
  std::size_t kernel_size = 3;
  double leaky_slope = 0.2;
  double velocity_cap = 4.0;
  double sigma_g = 3.0;                   // full-scale pixels
  std::size_t gaussian_kernel_size = 15;  // full scale
  int squaring_steps = 4;
  double weight_decay = 1e-4;

  std::size_t encoder_downsampling() const {
    std::size_t f = 1;
    for (auto s : encoder_strides) f *= s;
    return f;
  }

  /// Gaussian sigma at scale s (1 = full resolution), in that scale's pixels.
  double sigma_at(int s) const { return sigma_g / double(1 << (s - 1)); }
  std::size_t kernel_at(int s) const {
    const std::size_t radius = ((gaussian_kernel_size - 1) / 2) >> (s - 1);
    return 2 * radius + 1;
  }

  void validate() const {
    if (latent_dim < 1) throw std::invalid_argument("NetworkConfig: latent_dim must be >= 1");
    if (num_scales < 1) throw std::invalid_argument("NetworkConfig: num_scales must be >= 1");
    if (encoder_channels.size() != encoder_strides.size() || encoder_channels.empty())
      throw std::invalid_argument("NetworkConfig: encoder channels and strides must have equal nonzero length");
    if (decoder_channels.size() != std::size_t(num_scales))
      throw std::invalid_argument("NetworkConfig: one decoder width per scale required");
    if (kernel_size % 2 == 0) throw std::invalid_argument("NetworkConfig: kernel size must be odd");
    if (gaussian_kernel_size % 2 == 0) throw std::invalid_argument("NetworkConfig: gaussian kernel must be odd");
    if (sigma_g < 0) throw std::invalid_argument("NetworkConfig: sigma_g must be >= 0");
    if (!(velocity_cap > 0)) throw std::invalid_argument("NetworkConfig: velocity_cap must be > 0");
    if (squaring_steps < 0) throw std::invalid_argument("NetworkConfig: squaring_steps must be >= 0");
    const std::size_t dec = std::size_t(1) << num_scales;
    const std::size_t enc = encoder_downsampling();
    for (auto e : {height, width})
      if (e % dec || e % enc || e < 8)
        throw std::invalid_argument("NetworkConfig: image extent " + std::to_string(e) +
                                    " must be >= 8 and divisible by " + std::to_string(std::max(dec, enc)));
  }
};

/// Named trainable tensors in a fixed order.
template <typename Real>
class ModelParams {
 public:
  Parameter<Real>& add(std::string name, Tensor<Real> value, bool decay) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
    index_[name] = list_.size();
    list_.emplace_back(std::move(name), std::move(value), decay);
    return list_.back();
  }

  Parameter<Real>& operator[](const std::string& name) { return list_.at(lookup(name)); }
  const Parameter<Real>& operator[](const std::string& name) const { return list_.at(lookup(name)); }

  std::vector<Parameter<Real>>& list() { return list_; }
  const std::vector<Parameter<Real>>& list() const { return list_; }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : list_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : list_) p.zero_grad();
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
    return it->second;
  }

  std::vector<Parameter<Real>> list_;
  std::map<std::string, std::size_t> index_;
};

/// Mean and log-variance of q(z | F, M) as plain vectors.
template <typename Real>
struct LatentDistribution {
  Tensor<Real> mu;
  Tensor<Real> logvar;
};

template <typename Real>
struct ScaleOutput {
  int scale = 1;
  VectorField<Real> raw_velocity;       // network output before smoothing
  VectorField<Real> velocity;           // smoothed
  DeformationField<Real> deformation;   // exp(velocity)
  ScalarImage<Real> warped;             // moving o deformation
};

template <typename Real>
struct RegistrationResult {
  Tensor<Real> z;
  std::vector<ScaleOutput<Real>> scales;  // scale 1 (full resolution) first
};

/// Linear pyramid [M^1, M^2, ...] by repeated factor-2 averaging.
template <typename Real>
std::vector<Tensor<Real>> image_pyramid(const Tensor<Real>& image, int levels) {
  std::vector<Tensor<Real>> out{image};
  for (int s = 1; s < levels; ++s) {
    Tape<Real> tape;
    out.push_back(spatial_downsample(tape.constant(out.back())).value());
  }
  return out;
}

template <typename Real>
class RegistrationModel {
 public:
  RegistrationModel(NetworkConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build(seed);
  }

  const NetworkConfig& config() const { return cfg_; }
  ModelParams<Real>& params() { return params_; }
  const ModelParams<Real>& params() const { return params_; }

  // ---- taped forward passes ---------------------------------------------

  /// With `trainable`, parameters enter the tape as gradient leaves.
  EncoderDistribution<Real> encode(Tape<Real>& tape, const Var<Real>& fixed, const Var<Real>& moving,
                                   bool trainable) {
    check_image(fixed.shape(), "encode fixed");
    check_image(moving.shape(), "encode moving");
    const Real slope = Real(cfg_.leaky_slope);
    Var<Real> x = concat_channels({fixed, moving});
    for (std::size_t i = 0; i < cfg_.encoder_channels.size(); ++i) {
      const std::string p = "enc" + std::to_string(i);
      x = leaky_relu(conv2d(x, bind(tape, p + ".w", trainable), bind(tape, p + ".b", trainable),
                            cfg_.encoder_strides[i]),
                     slope);
    }
    auto flat = reshape(x, {x.size()});
    return {dense(flat, bind(tape, "mu.w", trainable), bind(tape, "mu.b", trainable)),
            dense(flat, bind(tape, "logvar.w", trainable), bind(tape, "logvar.b", trainable))};
  }

  struct DecodedVelocities {
    std::vector<Var<Real>> raw;       // scale 1 first
    std::vector<Var<Real>> smoothed;  // scale 1 first
  };

  /// moving_pyramid holds [M^1, ..., M^S] (scale 1 first).
  DecodedVelocities decode(Tape<Real>& tape, const Var<Real>& z, std::span<const Var<Real>> moving_pyramid,
                           bool trainable) {
    if (z.shape() != Shape{cfg_.latent_dim})
      detail::shape_error("decode", {z.shape(), Shape{cfg_.latent_dim}}, "latent size");
    if (moving_pyramid.size() != std::size_t(cfg_.num_scales))
      throw std::invalid_argument("decode: expected " + std::to_string(cfg_.num_scales) + " pyramid levels");
    const Real slope = Real(cfg_.leaky_slope);
    const auto [h0, w0] = bottleneck_grid();
    Var<Real> x = leaky_relu(dense(z, bind(tape, "dec_fc.w", trainable), bind(tape, "dec_fc.b", trainable)), slope);
    x = reshape(x, {cfg_.decoder_channels[0], h0, w0});
    DecodedVelocities out;
    out.raw.resize(std::size_t(cfg_.num_scales));
    out.smoothed.resize(std::size_t(cfg_.num_scales));
    for (int j = 0; j < cfg_.num_scales; ++j) {
      const int s = cfg_.num_scales - j;
      const std::string p = "dec" + std::to_string(j);
      x = leaky_relu(conv2d_transpose(x, bind(tape, p + ".up.w", trainable), bind(tape, p + ".up.b", trainable)),
                     slope);
      const Var<Real>& m = moving_pyramid[std::size_t(s - 1)];
      if (m.shape() != Shape{1, x.shape()[1], x.shape()[2]})
        detail::shape_error("decode scale " + std::to_string(s), {x.shape(), m.shape()});
      x = concat_channels({x, m});
      x = leaky_relu(conv2d(x, bind(tape, p + ".conv.w", trainable), bind(tape, p + ".conv.b", trainable)), slope);
      auto v = scale(tanh(conv2d(x, bind(tape, p + ".head.w", trainable), bind(tape, p + ".head.b", trainable))),
                     Real(cfg_.velocity_cap));
      out.raw[std::size_t(s - 1)] = v;
      out.smoothed[std::size_t(s - 1)] = gaussian_smooth(v, cfg_.sigma_at(s), cfg_.kernel_at(s));
    }
    return out;
  }

  // ---- plain inference ---------------------------------------------------

  LatentDistribution<Real> encode(const ScalarImage<Real>& fixed, const ScalarImage<Real>& moving) {
    Tape<Real> tape;
    auto q = encode(tape, tape.constant(fixed.pixels), tape.constant(moving.pixels), false);
    return {q.mu.value(), q.logvar.value()};
  }

  /// Decoder output for code z applied to moving image M; F plays no role.
  RegistrationResult<Real> decode(const Tensor<Real>& z, const ScalarImage<Real>& moving) {
    check_image(moving.pixels.shape, "decode moving");
    Tape<Real> tape;
    auto pyramid = image_pyramid(moving.pixels, cfg_.num_scales);
    std::vector<Var<Real>> levels;
    for (auto& t : pyramid) levels.push_back(tape.constant(t));
    auto dec = decode(tape, tape.constant(z), levels, false);
    RegistrationResult<Real> res;
    res.z = z;
    for (int s = 1; s <= cfg_.num_scales; ++s) {
      ScaleOutput<Real> so;
      so.scale = s;
      so.raw_velocity = VectorField<Real>(dec.raw[std::size_t(s - 1)].value(), s);
      so.velocity = VectorField<Real>(dec.smoothed[std::size_t(s - 1)].value(), s);
      so.deformation = DeformationField<Real>(exponentiate(dec.smoothed[std::size_t(s - 1)], cfg_.squaring_steps).value());
      so.warped = warp(ScalarImage<Real>(pyramid[std::size_t(s - 1)], moving.spacing * double(1 << (s - 1))),
                       so.deformation);
      res.scales.push_back(std::move(so));
    }
    return res;
  }

  /// Deterministic registration: z is the encoder mean.
  RegistrationResult<Real> register_pair(const ScalarImage<Real>& fixed, const ScalarImage<Real>& moving) {
    return decode(encode(fixed, moving).mu, moving);
  }

  RegistrationResult<Real> sample_deformation(const ScalarImage<Real>& moving, const Tensor<Real>& z) {
    return decode(z, moving);
  }

  std::pair<std::size_t, std::size_t> bottleneck_grid() const {
    const std::size_t f = std::size_t(1) << cfg_.num_scales;
    return {cfg_.height / f, cfg_.width / f};
  }

 private:
  Var<Real> bind(Tape<Real>& tape, const std::string& name, bool trainable) {
    auto& p = params_[name];
    return trainable ? tape.param(p) : tape.constant(p.value);
  }

  void check_image(const Shape& s, const char* what) const {
    if (s != Shape{1, cfg_.height, cfg_.width})
      detail::shape_error(what, {s, Shape{1, cfg_.height, cfg_.width}}, "image does not match network config");
  }

  void build(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const double gain = std::sqrt(6.0 / (1.0 + cfg_.leaky_slope * cfg_.leaky_slope));
    auto uniform = [&](Shape shape, std::size_t fan_in) {
      Tensor<Real> t(std::move(shape));
      std::uniform_real_distribution<double> dist(-gain / std::sqrt(double(fan_in)), gain / std::sqrt(double(fan_in)));
      for (auto& v : t.data) v = Real(dist(rng));
      return t;
    };
    const std::size_t k = cfg_.kernel_size;
    std::size_t in_ch = 2;
    for (std::size_t i = 0; i < cfg_.encoder_channels.size(); ++i) {
      const std::size_t oc = cfg_.encoder_channels[i];
      const std::string p = "enc" + std::to_string(i);
      params_.add(p + ".w", uniform({oc, in_ch, k, k}, in_ch * k * k), true);
      params_.add(p + ".b", Tensor<Real>({oc}), false);
      in_ch = oc;
    }
    const std::size_t f = cfg_.encoder_downsampling();
    const std::size_t flat = in_ch * (cfg_.height / f) * (cfg_.width / f);
    const std::size_t d = cfg_.latent_dim;
    params_.add("mu.w", uniform({d, flat}, flat), true);
    params_.add("mu.b", Tensor<Real>({d}), false);
    params_.add("logvar.w", uniform({d, flat}, flat), true);
    params_.add("logvar.b", Tensor<Real>({d}), false);

    const auto [h0, w0] = bottleneck_grid();
    const std::size_t c0 = cfg_.decoder_channels[0];
    params_.add("dec_fc.w", uniform({c0 * h0 * w0, d}, d), true);
    params_.add("dec_fc.b", Tensor<Real>({c0 * h0 * w0}), false);
    std::size_t prev = c0;
    for (int j = 0; j < cfg_.num_scales; ++j) {
      const std::size_t c = cfg_.decoder_channels[std::size_t(j)];
      const std::string p = "dec" + std::to_string(j);
      // A stride-2 transposed conv sees on average k*k/4 taps per output.
      params_.add(p + ".up.w", uniform({prev, c, k, k}, std::max<std::size_t>(1, prev * k * k / 4)), true);
      params_.add(p + ".up.b", Tensor<Real>({c}), false);
      params_.add(p + ".conv.w", uniform({c, c + 1, k, k}, (c + 1) * k * k), true);
      params_.add(p + ".conv.b", Tensor<Real>({c}), false);
      params_.add(p + ".head.w", Tensor<Real>({2, c, k, k}), true);
      params_.add(p + ".head.b", Tensor<Real>({2}), false);
      prev = c;
    }
  }

  NetworkConfig cfg_;
  ModelParams<Real> params_;
};

/// z = mu + exp(logvar / 2) * eps.
template <typename Real>
Var<Real> reparametrize(const EncoderDistribution<Real>& q, const Var<Real>& epsilon) {
  if (epsilon.shape() != q.mu.shape()) detail::shape_error("reparametrize", {q.mu.shape(), epsilon.shape()});
  return add(q.mu, mul(exp(scale(q.logvar, Real(0.5))), epsilon));
}

template <typename Real>
Tensor<Real> reparametrize(const LatentDistribution<Real>& q, const Tensor<Real>& epsilon) {
  Tape<Real> tape;
  return reparametrize(EncoderDistribution<Real>{tape.constant(q.mu), tape.constant(q.logvar)},
                       tape.constant(epsilon))
      .value();
}

/// Taped loss for one pair and one noise draw; the shared path of training
/// and gradient checks.
template <typename Real>
LossTerms<Real> pair_loss(RegistrationModel<Real>& model, Tape<Real>& tape, const ScalarImage<Real>& fixed,
                          const ScalarImage<Real>& moving, const Tensor<Real>& epsilon, const LossConfig& loss_cfg,
                          Tensor<Real>* z_out = nullptr) {
  const int levels = model.config().num_scales;
  auto fp = image_pyramid(fixed.pixels, levels);
  auto mp = image_pyramid(moving.pixels, levels);
  std::vector<Var<Real>> fv, mv;
  for (int s = 0; s < levels; ++s) {
    fv.push_back(tape.constant(fp[std::size_t(s)]));
    mv.push_back(tape.constant(mp[std::size_t(s)]));
  }
  auto q = model.encode(tape, fv[0], mv[0], true);
  auto z = reparametrize(q, tape.constant(epsilon));
  if (z_out) *z_out = z.value();
  auto dec = model.decode(tape, z, mv, true);
  // Loss scales are a subset of the decoded scales.
  std::vector<Var<Real>> fs, ms, vs;
  for (int s : loss_cfg.scales) {
    if (s < 1 || s > levels) throw std::invalid_argument("pair_loss: scale " + std::to_string(s) + " not decoded");
    fs.push_back(fv[std::size_t(s - 1)]);
    ms.push_back(mv[std::size_t(s - 1)]);
    vs.push_back(dec.smoothed[std::size_t(s - 1)]);
  }
  return total_loss<Real>(fs, ms, q, vs, loss_cfg);
}

}  // namespace dreg
