#include <gtest/gtest.h>

#include "dreg/config.hpp"
#include "dreg/trainer.hpp"

using namespace dreg;

TEST(Config, NetworkRoundTrip) {
  NetworkConfig c;
  c.latent_dim = 8;
  c.sigma_g = 0;
  c.decoder_channels = {4, 5, 6};
  NetworkConfig back;
  from_json(to_json(c), back);
  EXPECT_EQ(to_json(back), to_json(c));
}

TEST(Config, MissingKeysKeepDefaults) {
  NetworkConfig c;
  from_json(nlohmann::json{{"latent_dim", 16}}, c);
  EXPECT_EQ(c.latent_dim, 16u);
  EXPECT_EQ(c.num_scales, 3);
}

TEST(Config, UnknownKeysRejected) {
  NetworkConfig c;
  try {
    from_json(nlohmann::json{{"latent_dims", 16}}, c);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("latent_dims"), std::string::npos);
  }
  TrainConfig t;
  EXPECT_THROW(from_json(nlohmann::json{{"augment", {{"shfit", 2}}}}, t), ConfigError);
  LossConfig l;
  EXPECT_THROW(from_json(nlohmann::json{{"lambda", "big"}}, l), ConfigError);
  EXPECT_THROW(from_json(nlohmann::json::array(), l), ConfigError);
}

TEST(Config, TrainAndLossRoundTrip) {
  TrainConfig t;
  t.epochs = 3;
  t.augment.enabled = false;
  TrainConfig tb;
  from_json(to_json(t), tb);
  EXPECT_EQ(to_json(tb), to_json(t));
  LossConfig l;
  l.scales = {1};
  l.scale_weights = {2.0};
  LossConfig lb;
  from_json(to_json(l), lb);
  EXPECT_EQ(to_json(lb), to_json(l));
}
