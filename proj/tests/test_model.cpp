#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dreg/model.hpp"
#include "support.hpp"

using namespace dreg;
using namespace dreg::testing;

namespace {

NetworkConfig tiny_config() {
  NetworkConfig c;
  c.height = c.width = 8;
  c.latent_dim = 3;
  c.encoder_channels = {2, 3, 2, 2};
  c.decoder_channels = {3, 2, 2};
  c.sigma_g = 1.0;
  c.gaussian_kernel_size = 5;
  c.squaring_steps = 2;
  return c;
}

ScalarImage<double> image(std::size_t n, std::uint64_t seed) {
  return ScalarImage<double>(random_tensor({1, n, n}, seed, 0.1, 0.9));
}

double min_det(const DeformationField<double>& phi) {
  double m = 1e300;
  for (double v : jacobian_determinant(phi).pixels.data) m = std::min(m, v);
  return m;
}

// Random nonzero velocity heads so the decoder output depends on z.
void perturb_heads(RegistrationModel<double>& model, std::uint64_t seed, double amp) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-amp, amp);
  for (auto& p : model.params().list())
    if (p.name.find(".head.w") != std::string::npos)
      for (auto& v : p.value.data) v = u(rng);
}

}  // namespace

TEST(Config, DefaultsAndValidation) {
  NetworkConfig c;
  EXPECT_EQ(c.latent_dim, 32u);
  EXPECT_EQ(c.encoder_strides, (std::vector<std::size_t>{2, 2, 2, 1}));
  EXPECT_EQ(c.squaring_steps, 4);
  EXPECT_DOUBLE_EQ(c.weight_decay, 1e-4);
  EXPECT_EQ(c.kernel_at(1), 15u);
  EXPECT_EQ(c.kernel_at(2), 7u);
  EXPECT_EQ(c.kernel_at(3), 3u);
  EXPECT_DOUBLE_EQ(c.sigma_at(3), 0.75);
  c.validate();
  auto bad = c;
  bad.latent_dim = 0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = c;
  bad.encoder_strides = {2, 2};
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = c;
  bad.height = 60;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Model, ParameterNamesAndZeroHeads) {
  RegistrationModel<double> m(NetworkConfig{}, 1);
  auto& p = m.params();
  EXPECT_EQ(p["mu.w"].value.shape, (Shape{32, 4 * 8 * 8}));
  EXPECT_EQ(p["dec2.head.w"].value.shape, (Shape{2, 16, 3, 3}));
  for (const auto& par : p.list()) {
    if (par.name.find(".b") != std::string::npos) {
      EXPECT_FALSE(par.decay) << par.name;
      EXPECT_EQ(max_abs(par.value), 0.0) << par.name;
    }
    if (par.name.find("head.w") != std::string::npos) {
      EXPECT_EQ(max_abs(par.value), 0.0);
    }
  }
  EXPECT_GT(p.count(), 100000u);
}

TEST(Model, EncodeShapesAndDeterminism) {
  RegistrationModel<double> m(NetworkConfig{}, 2);
  auto f = image(64, 1), mv = image(64, 2);
  auto q1 = m.encode(f, mv), q2 = m.encode(f, mv);
  EXPECT_EQ(q1.mu.shape, (Shape{32}));
  EXPECT_EQ(q1.logvar.shape, (Shape{32}));
  EXPECT_EQ(q1.mu, q2.mu);
  EXPECT_EQ(q1.logvar, q2.logvar);
  EXPECT_THROW(m.encode(image(32, 1), image(32, 2)), std::invalid_argument);
}

TEST(Model, InitialEncoderEnvelope) {
  RegistrationModel<double> m(NetworkConfig{}, 3);
  for (std::uint64_t s = 0; s < 100; ++s) {
    auto q = m.encode(image(64, 2 * s + 10), image(64, 2 * s + 11));
    EXPECT_LT(max_abs(q.mu), 10.0);
    EXPECT_LT(max_abs(q.logvar), 10.0);
  }
}

TEST(Model, ReparametrizeExamples) {
  LatentDistribution<double> q{Tensor<double>::vector({0.5, -1}), Tensor<double>::vector({0, 0})};
  EXPECT_EQ(reparametrize(q, Tensor<double>({2})), q.mu);
  auto z = reparametrize(q, Tensor<double>::vector({1, 0}));
  EXPECT_EQ(z.data, (std::vector<double>{1.5, -1}));
}

TEST(Model, ReparametrizeMonteCarloMoments) {
  LatentDistribution<double> q{Tensor<double>::vector({0.3, -2.0}), Tensor<double>::vector({0.4, -1.2})};
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n01(0, 1);
  const int n = 100000;
  double s[2] = {0, 0}, ss[2] = {0, 0}, cross = 0;
  for (int i = 0; i < n; ++i) {
    auto z = reparametrize(q, Tensor<double>::vector({n01(rng), n01(rng)}));
    for (int k = 0; k < 2; ++k) {
      s[k] += z.data[std::size_t(k)];
      ss[k] += z.data[std::size_t(k)] * z.data[std::size_t(k)];
    }
    cross += z.data[0] * z.data[1];
  }
  for (int k = 0; k < 2; ++k) {
    const double mean = s[k] / n, var = ss[k] / n - mean * mean;
    const double sd = std::exp(0.5 * q.logvar.data[std::size_t(k)]);
    EXPECT_NEAR(mean, q.mu.data[std::size_t(k)], 0.02 * sd);
    EXPECT_NEAR(var, std::exp(q.logvar.data[std::size_t(k)]), 0.02 * std::exp(q.logvar.data[std::size_t(k)]));
  }
  const double cov = cross / n - (s[0] / n) * (s[1] / n);
  EXPECT_LT(std::abs(cov), 0.02);
}

TEST(Model, DecodeShapesBoundsAndStructure) {
  RegistrationModel<double> m(NetworkConfig{}, 5);
  perturb_heads(m, 6, 0.5);
  auto mv = image(64, 3);
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n01(0, 1);
  Tensor<double> z({32});
  for (auto& v : z.data) v = n01(rng);
  auto r = m.decode(z, mv);
  ASSERT_EQ(r.scales.size(), 3u);
  for (std::size_t s = 0; s < 3; ++s) {
    const std::size_t n = 64 >> s;
    const auto& so = r.scales[s];
    EXPECT_EQ(so.scale, int(s + 1));
    EXPECT_EQ(so.velocity.components.shape, (Shape{2, n, n}));
    EXPECT_EQ(so.warped.pixels.shape, (Shape{1, n, n}));
    EXPECT_LE(max_abs(so.raw_velocity.components), 4.0);
    // phi^s = exp(v^s), M*^s = M^s o phi^s.
    EXPECT_EQ(so.deformation.displacement, exponentiate(so.velocity, 4).displacement);
    auto pyr = image_pyramid(mv.pixels, 3);
    EXPECT_EQ(so.warped.pixels, warp(ScalarImage<double>(pyr[s]), so.deformation).pixels);
  }
}

TEST(Model, RegisterEqualsDecodeOfMean) {
  RegistrationModel<double> m(NetworkConfig{}, 8);
  perturb_heads(m, 9, 0.5);
  auto f = image(64, 4), mv = image(64, 5);
  auto reg = m.register_pair(f, mv);
  auto smp = m.sample_deformation(mv, m.encode(f, mv).mu);
  EXPECT_EQ(reg.z, smp.z);
  for (std::size_t s = 0; s < 3; ++s) {
    EXPECT_EQ(reg.scales[s].deformation.displacement, smp.scales[s].deformation.displacement);
    EXPECT_EQ(reg.scales[s].warped.pixels, smp.scales[s].warped.pixels);
  }
}

TEST(Model, FreshModelIsIdentity) {
  RegistrationModel<double> m(NetworkConfig{}, 10);
  auto r = m.register_pair(image(64, 6), image(64, 7));
  EXPECT_EQ(max_abs(r.scales[0].deformation.displacement), 0.0);
}

TEST(Model, PriorSamplesAreDiffeomorphic) {
  RegistrationModel<double> m(NetworkConfig{}, 11);
  perturb_heads(m, 12, 0.3);
  auto mv = image(64, 8);
  std::mt19937_64 rng(13);
  std::normal_distribution<double> n01(0, 1);
  for (int i = 0; i < 20; ++i) {
    Tensor<double> z({32});
    for (auto& v : z.data) v = n01(rng);
    auto r = m.sample_deformation(mv, z);
    EXPECT_GT(min_det(r.scales[0].deformation), 0.0);
    EXPECT_TRUE(r.scales[0].deformation.displacement.all_finite());
  }
}

TEST(Model, ImagePyramidAverages) {
  auto img = random_tensor({1, 8, 8}, 14);
  auto p = image_pyramid(img, 3);
  ASSERT_EQ(p.size(), 3u);
  EXPECT_EQ(p[2].shape, (Shape{1, 2, 2}));
  double s = 0;
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) s += img.at(0, y, x);
  EXPECT_NEAR(p[2].at(0, 0, 0), s / 16, 1e-15);
}

TEST(Model, EndToEndGradientOnTinyNetwork) {
  RegistrationModel<double> m(tiny_config(), 15);
  perturb_heads(m, 16, 0.3);
  LossConfig lc;
  lc.lcc_window = 3;
  lc.squaring_steps = 2;
  lc.lambda = 5;
  Tensor<double> fi({1, 8, 8}), mi({1, 8, 8});
  auto a = smooth_field(8, 8, 1.5, 1.0, 18);
  for (std::size_t i = 0; i < 64; ++i) {
    fi.data[i] = 0.5 + 0.3 * a.data[i];
    mi.data[i] = 0.5 + 0.3 * a.data[64 + i];
  }
  const auto eps = random_tensor({3}, 19);
  std::vector<Parameter<double>*> ptrs;
  for (auto& p : m.params().list()) ptrs.push_back(&p);
  auto loss = [&](Tape<double>& t) {
    return pair_loss(m, t, ScalarImage<double>(fi), ScalarImage<double>(mi), eps, lc).total;
  };
  auto rep = gradient_check<double>(loss, ptrs, {.step = 1e-6, .tol = 1e-3, .max_entries = 12});
  EXPECT_TRUE(rep.passed) << rep.max_rel_error << " at " << rep.worst;
  EXPECT_GT(rep.checked, 100u);
}
