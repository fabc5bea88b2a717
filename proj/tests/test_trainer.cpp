#include <gtest/gtest.h>

#include <cmath>

#include "dreg/phantom.hpp"
#include "dreg/trainer.hpp"
#include "support.hpp"

using namespace dreg;
using namespace dreg::testing;

namespace {

NetworkConfig small_net() {
  NetworkConfig c;
  c.height = c.width = 40;
  c.latent_dim = 4;
  c.encoder_channels = {4, 8, 8, 2};
  c.decoder_channels = {8, 8, 4};
  c.sigma_g = 1.5;
  c.gaussian_kernel_size = 7;
  return c;
}

std::vector<TrainPair<double>> small_pairs(std::size_t n_per_class) {
  auto ds = generate_dataset(n_per_class, 40, 3);
  std::vector<TrainPair<double>> out;
  for (const auto& c : ds.cases) out.push_back({c.pair.es, c.pair.ed});
  return out;
}

LossConfig small_loss() {
  LossConfig l;
  l.lcc_window = 5;
  return l;
}

}  // namespace

TEST(Augment, ZeroDrawLeavesPairUnchanged) {
  auto f = ScalarImage<double>(random_tensor({1, 16, 16}, 1)), m = ScalarImage<double>(random_tensor({1, 16, 16}, 2));
  auto [fa, ma] = augment(f, m, AugmentDraw{});
  EXPECT_EQ(fa.pixels, f.pixels);
  EXPECT_EQ(ma.pixels, m.pixels);
}

TEST(Augment, MirrorFlipsBothImagesOnSameAxis) {
  auto f = ScalarImage<double>(random_tensor({1, 8, 10}, 3)), m = ScalarImage<double>(random_tensor({1, 8, 10}, 4));
  AugmentDraw d;
  d.mirror = true;
  auto [fa, ma] = augment(f, m, d);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 10; ++x) {
      EXPECT_DOUBLE_EQ(fa(y, x), f(y, 9 - x));
      EXPECT_DOUBLE_EQ(ma(y, x), m(y, 9 - x));
    }
}

TEST(Augment, SameTransformForBothImages) {
  auto f = ScalarImage<double>(random_tensor({1, 16, 16}, 5));
  std::mt19937_64 rng(6);
  auto [fa, ma] = augment(f, f, AugmentRanges{}, rng);
  EXPECT_EQ(fa.pixels, ma.pixels);
}

TEST(Augment, SeededDrawsAreReproducible) {
  auto f = ScalarImage<double>(random_tensor({1, 16, 16}, 7)), m = ScalarImage<double>(random_tensor({1, 16, 16}, 8));
  std::mt19937_64 a(9), b(9);
  auto ra = augment(f, m, AugmentRanges{}, a);
  auto rb = augment(f, m, AugmentRanges{}, b);
  EXPECT_EQ(ra.first.pixels, rb.first.pixels);
  EXPECT_EQ(ra.second.pixels, rb.second.pixels);
}

TEST(Augment, DrawsStayInRange) {
  std::mt19937_64 rng(10);
  AugmentRanges r;
  for (int i = 0; i < 1000; ++i) {
    auto d = draw_augmentation(r, rng);
    EXPECT_LE(std::abs(d.shift_x), 8.0);
    EXPECT_LE(std::abs(d.rotation), 15.0 * std::numbers::pi / 180 + 1e-12);
    EXPECT_GE(d.scale, 0.9);
    EXPECT_LE(d.scale, 1.1);
  }
}

TEST(Adam, ZeroLearningRateOnlyDecays) {
  RegistrationModel<double> model(small_net(), 1);
  auto before = model.params().list();
  auto opt = AdamState<double>::zeros(model.params());
  for (auto& p : model.params().list())
    for (auto& g : p.grad.data) g = 0.3;
  TrainConfig cfg;
  cfg.learning_rate = 0;
  adam_update(model.params(), opt, cfg, 1e-4);
  for (std::size_t k = 0; k < before.size(); ++k) {
    const auto& p = model.params().list()[k];
    for (std::size_t i = 0; i < p.value.size(); ++i)
      EXPECT_EQ(p.value.data[i], before[k].value.data[i] - (p.decay ? 1e-4 * before[k].value.data[i] : 0.0));
  }
  auto snapshot = model.params().list();
  adam_update(model.params(), opt, cfg, 0.0);
  for (std::size_t k = 0; k < snapshot.size(); ++k) EXPECT_EQ(model.params().list()[k].value, snapshot[k].value);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  // With bias correction the first update is lr * g / (|g| + eps) per entry.
  ModelParams<double> params;
  params.add("w", Tensor<double>::vector({1.0, -2.0}), false);
  params["w"].grad = Tensor<double>::vector({0.5, -3.0});
  auto opt = AdamState<double>::zeros(params);
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  adam_update(params, opt, cfg, 0.0);
  EXPECT_NEAR(params["w"].value.data[0], 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-12);
  EXPECT_NEAR(params["w"].value.data[1], -2.0 + 0.1 * 3.0 / (3.0 + 1e-8), 1e-12);
  EXPECT_EQ(opt.t, 1u);
}

TEST(Training, LossDecreasesOnSmallSet) {
  RegistrationModel<double> model(small_net(), 2);
  auto opt = AdamState<double>::zeros(model.params());
  auto data = small_pairs(4);
  data.resize(10);
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.seed = 3;
  TrainOptions o;
  o.stop_step = 200;
  auto recs = train(model, opt, data, small_loss(), cfg, 0, o);
  ASSERT_EQ(recs.size(), 200u);
  double first = 0, last = 0;
  for (int i = 0; i < 20; ++i) {
    first += recs[std::size_t(i)].total;
    last += recs[recs.size() - 1 - std::size_t(i)].total;
  }
  EXPECT_LT(last, first);
}

TEST(Training, IdenticalSeedsGiveIdenticalCurves) {
  auto data = small_pairs(2);
  auto run = [&] {
    RegistrationModel<double> model(small_net(), 4);
    auto opt = AdamState<double>::zeros(model.params());
    TrainConfig cfg;
    cfg.seed = 5;
    TrainOptions o;
    o.stop_step = 8;
    std::vector<double> losses;
    for (const auto& r : train(model, opt, data, small_loss(), cfg, 0, o)) losses.push_back(r.total);
    return std::make_pair(losses, model.params().list().back().value);
  };
  EXPECT_EQ(run(), run());
}

TEST(Checkpoint, RoundTripIsExact) {
  RegistrationModel<double> model(small_net(), 6);
  auto opt = AdamState<double>::zeros(model.params());
  auto data = small_pairs(1);
  TrainConfig cfg;
  TrainOptions o;
  o.stop_step = 3;
  train(model, opt, data, small_loss(), cfg, 0, o);
  auto dir = scratch_dir("ckpt_roundtrip");
  save_checkpoint(dir, model, opt, 3, 17, {{"note", "x"}});
  auto ck = load_checkpoint<double>(dir);
  EXPECT_EQ(ck.step, 3u);
  EXPECT_EQ(ck.seed, 17u);
  EXPECT_EQ(ck.extra.at("note"), "x");
  EXPECT_EQ(ck.optimizer, opt);
  for (std::size_t k = 0; k < model.params().list().size(); ++k)
    EXPECT_EQ(ck.model.params().list()[k].value, model.params().list()[k].value);
  auto manifest = nlohmann::json::parse(read_text(dir / "checkpoint.json"));
  EXPECT_EQ(manifest.at("parameters")[1].at("byte_offset").get<std::size_t>(),
            13 + 8 * model.params().list()[0].value.size());
}

TEST(Checkpoint, ResumeReproducesUninterruptedRun) {
  auto data = small_pairs(2);
  TrainConfig cfg;
  cfg.seed = 8;
  cfg.learning_rate = 1e-3;
  RegistrationModel<double> full(small_net(), 9);
  auto opt_full = AdamState<double>::zeros(full.params());
  TrainOptions o;
  o.stop_step = 10;
  auto ref = train(full, opt_full, data, small_loss(), cfg, 0, o);

  RegistrationModel<double> part(small_net(), 9);
  auto opt_part = AdamState<double>::zeros(part.params());
  auto dir = scratch_dir("ckpt_resume");
  TrainOptions o1;
  o1.stop_step = 4;
  o1.out_dir = dir;
  train(part, opt_part, data, small_loss(), cfg, 0, o1);
  auto ck = load_checkpoint<double>(dir / "checkpoint");
  ASSERT_EQ(ck.step, 4u);
  auto rest = train(ck.model, ck.optimizer, data, small_loss(), cfg, ck.step, o);
  ASSERT_EQ(rest.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(rest[i].total, ref[4 + i].total) << i;
  EXPECT_EQ(ck.model.params().list()[3].value, full.params().list()[3].value);
}

TEST(Checkpoint, RejectsMismatchedManifest) {
  auto dir = scratch_dir("ckpt_bad");
  EXPECT_THROW(load_checkpoint<double>(dir), std::runtime_error);
  write_text(dir / "checkpoint.json", "{\"format\": \"other\"}");
  EXPECT_THROW(load_checkpoint<double>(dir), std::runtime_error);
}

TEST(Training, NonFiniteLossAbortsWithDump) {
  RegistrationModel<double> model(small_net(), 10);
  for (auto& v : model.params()["mu.b"].value.data) v = 1e300;
  auto opt = AdamState<double>::zeros(model.params());
  auto dir = scratch_dir("nonfinite");
  TrainOptions o;
  o.out_dir = dir;
  o.stop_step = 2;
  EXPECT_THROW(train(model, opt, small_pairs(1), small_loss(), TrainConfig{}, 0, o), NonFiniteLoss);
  EXPECT_TRUE(std::filesystem::exists(dir / "nonfinite" / "checkpoint.json"));
}

TEST(Training, MetricsHeader) {
  EXPECT_EQ(metrics_header(3), "step,epoch,total,kl,lcc_s1,lcc_s2,lcc_s3,mean_abs_z");
  StepRecord r;
  r.step = 2;
  r.lcc = {-0.5};
  EXPECT_EQ(metrics_row(r), "2,0,0,0,-0.5,0");
}

TEST(Training, EpochOrderIsPermutation) {
  auto o = epoch_order(1, 2, 50);
  std::vector<std::size_t> sorted = o;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(sorted[i], i);
  EXPECT_NE(o, epoch_order(1, 3, 50));
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.validate(64, 64);
  c.augment.shift = 40;
  EXPECT_THROW(c.validate(64, 64), std::invalid_argument);
  c = {};
  c.learning_rate = -1;
  EXPECT_THROW(c.validate(64, 64), std::invalid_argument);
}
