#pragma once

// Strict JSON (de)serialization of configuration structs. Missing keys keep
// their defaults; unknown keys are errors.

#include <set>
#include <stdexcept>
#include <string>

#include "json.hpp"

#include "dreg/model.hpp"
#include "dreg/objective.hpp"

namespace dreg {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Reads fields out of one JSON object and rejects whatever was not read.
class StrictReader {
 public:
  StrictReader(const nlohmann::json& j, std::string context) : j_(j), ctx_(std::move(context)) {
    if (!j_.is_object()) throw ConfigError(ctx_ + ": expected a JSON object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(ctx_ + "." + key + ": " + e.what());
    }
  }

  /// Nested object handled by a callback; the key is marked as known.
  template <typename Fn>
  void object(const std::string& key, Fn&& fn) {
    seen_.insert(key);
    if (j_.contains(key)) fn(j_.at(key), ctx_ + "." + key);
  }

  void finish() const {
    for (const auto& [key, _] : j_.items())
      if (!seen_.count(key)) throw ConfigError(ctx_ + ": unknown key '" + key + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string ctx_;
  std::set<std::string> seen_;
};

inline nlohmann::json to_json(const NetworkConfig& c) {
  return {{"height", c.height},
          {"width", c.width},
          {"latent_dim", c.latent_dim},
          {"num_scales", c.num_scales},
          {"encoder_channels", c.encoder_channels},
          {"encoder_strides", c.encoder_strides},
          {"decoder_channels", c.decoder_channels},
          {"kernel_size", c.kernel_size},
          {"leaky_slope", c.leaky_slope},
          {"velocity_cap", c.velocity_cap},
          {"sigma_g", c.sigma_g},
          {"gaussian_kernel_size", c.gaussian_kernel_size},
          {"squaring_steps", c.squaring_steps},
          {"weight_decay", c.weight_decay}};
}

inline void from_json(const nlohmann::json& j, NetworkConfig& c, const std::string& ctx = "network") {
  StrictReader r(j, ctx);
  r.get("height", c.height);
  r.get("width", c.width);
  r.get("latent_dim", c.latent_dim);
  r.get("num_scales", c.num_scales);
  r.get("encoder_channels", c.encoder_channels);
  r.get("encoder_strides", c.encoder_strides);
  r.get("decoder_channels", c.decoder_channels);
  r.get("kernel_size", c.kernel_size);
  r.get("leaky_slope", c.leaky_slope);
  r.get("velocity_cap", c.velocity_cap);
  r.get("sigma_g", c.sigma_g);
  r.get("gaussian_kernel_size", c.gaussian_kernel_size);
  r.get("squaring_steps", c.squaring_steps);
  r.get("weight_decay", c.weight_decay);
  r.finish();
}

inline nlohmann::json to_json(const LossConfig& c) {
  return {{"lambda", c.lambda},
          {"lcc_window", c.lcc_window},
          {"tau", c.tau},
          {"scales", c.scales},
          {"scale_weights", c.scale_weights},
          {"squaring_steps", c.squaring_steps}};
}

inline void from_json(const nlohmann::json& j, LossConfig& c, const std::string& ctx = "loss") {
  StrictReader r(j, ctx);
  r.get("lambda", c.lambda);
  r.get("lcc_window", c.lcc_window);
  r.get("tau", c.tau);
  r.get("scales", c.scales);
  r.get("scale_weights", c.scale_weights);
  r.get("squaring_steps", c.squaring_steps);
  r.finish();
}

}  // namespace dreg
