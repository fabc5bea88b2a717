#include <gtest/gtest.h>

#include <cmath>

#include "dreg/autodiff.hpp"
#include "dreg/gradcheck.hpp"
#include "support.hpp"

using namespace dreg;
using dreg::testing::check_inputs;
using dreg::testing::random_tensor;
using V = std::vector<Var<double>>;

namespace {

// Direct-loop convolution with zero padding k/2.
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b, std::size_t s) {
  const std::size_t co = w.dim(0), ci = w.dim(1), k = w.dim(2), h = x.dim(1), wd = x.dim(2);
  const std::ptrdiff_t p = std::ptrdiff_t(k / 2);
  const std::size_t oh = (h - 1) / s + 1, ow = (wd - 1) / s + 1;
  Tensor<double> out({co, oh, ow});
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        double acc = b.data[o];
        for (std::size_t c = 0; c < ci; ++c)
          for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < k; ++j) {
              const std::ptrdiff_t sy = std::ptrdiff_t(y * s + i) - p, sx = std::ptrdiff_t(xx * s + j) - p;
              if (sy < 0 || sx < 0 || sy >= std::ptrdiff_t(h) || sx >= std::ptrdiff_t(wd)) continue;
              acc += w.data[((o * ci + c) * k + i) * k + j] * x.at(c, std::size_t(sy), std::size_t(sx));
            }
        out.at(o, y, xx) = acc;
      }
  return out;
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

}  // namespace

TEST(Primitives, DenseIdentity) {
  Tape<double> t;
  Tensor<double> w({2, 2}, std::vector<double>{1, 0, 0, 1});
  auto y = dense(t.constant(Tensor<double>::vector({1, 2})), t.constant(w), t.constant(Tensor<double>({2})));
  EXPECT_EQ(y.value().data, (std::vector<double>{1, 2}));
}

TEST(Primitives, LeakyReluDefinition) {
  Tape<double> t;
  auto y = leaky_relu(t.constant(Tensor<double>::vector({-1.0, 2.0})), 0.2);
  EXPECT_DOUBLE_EQ(y.value()[0], -0.2);
  EXPECT_DOUBLE_EQ(y.value()[1], 2.0);
}

TEST(Primitives, IdentityConvolution) {
  Tape<double> t;
  auto img = random_tensor({1, 3, 3}, 1);
  auto y = conv2d(t.constant(img), t.constant(Tensor<double>({1, 1, 1, 1}, 1.0)), t.constant(Tensor<double>({1})));
  EXPECT_EQ(y.value(), img);
}

TEST(Primitives, ConvMatchesDirectLoop) {
  for (std::size_t stride : {1u, 2u}) {
    auto x = random_tensor({3, 7, 6}, 2), w = random_tensor({4, 3, 3, 3}, 3), b = random_tensor({4}, 4);
    Tape<double> t;
    auto y = conv2d(t.constant(x), t.constant(w), t.constant(b), stride);
    auto ref = naive_conv(x, w, b, stride);
    ASSERT_EQ(y.shape(), ref.shape);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.value().data[i], ref.data[i], 1e-12);
  }
}

TEST(Primitives, TransposedConvIsAdjointOfStridedConv) {
  auto w = random_tensor({3, 2, 3, 3}, 5);
  auto x = random_tensor({2, 8, 6}, 6), y = random_tensor({3, 4, 3}, 7);
  Tape<double> t;
  auto zero3 = t.constant(Tensor<double>({3})), zero2 = t.constant(Tensor<double>({2}));
  auto cx = conv2d(t.constant(x), t.constant(w), zero3, 2);
  auto ty = conv2d_transpose(t.constant(y), t.constant(w), zero2);
  EXPECT_EQ(ty.shape(), (Shape{2, 8, 6}));
  EXPECT_NEAR(dot(cx.value(), y), dot(x, ty.value()), 1e-11);
}

TEST(Primitives, MeanFilterCountsInBoundsPixels) {
  auto x = random_tensor({2, 5, 6}, 8);
  Tape<double> t;
  auto y = mean_filter(t.constant(x), 3);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::ptrdiff_t r = 0; r < 5; ++r)
      for (std::ptrdiff_t q = 0; q < 6; ++q) {
        double s = 0;
        int n = 0;
        for (std::ptrdiff_t dy = -1; dy <= 1; ++dy)
          for (std::ptrdiff_t dx = -1; dx <= 1; ++dx)
            if (r + dy >= 0 && r + dy < 5 && q + dx >= 0 && q + dx < 6) {
              s += x.at(c, std::size_t(r + dy), std::size_t(q + dx));
              ++n;
            }
        EXPECT_NEAR(y.value().at(c, std::size_t(r), std::size_t(q)), s / n, 1e-14);
      }
}

TEST(Primitives, MeanFilterGradientIsCountNormalizedBoxWeights) {
  // d/dx_j sum_i y_i = sum over windows containing j of 1/count(window).
  auto x = random_tensor({1, 4, 5}, 9);
  Tape<double> t;
  auto xv = t.variable(x);
  t.backward(reduce_sum(mean_filter(xv, 3)));
  auto count = [](std::ptrdiff_t r, std::ptrdiff_t q) {
    const auto span = [](std::ptrdiff_t i, std::ptrdiff_t n) { return double(std::min(i + 1, n - 1) - std::max(i - 1, std::ptrdiff_t(0)) + 1); };
    return span(r, 4) * span(q, 5);
  };
  for (std::ptrdiff_t r = 0; r < 4; ++r)
    for (std::ptrdiff_t q = 0; q < 5; ++q) {
      double g = 0;
      for (std::ptrdiff_t dy = -1; dy <= 1; ++dy)
        for (std::ptrdiff_t dx = -1; dx <= 1; ++dx)
          if (r + dy >= 0 && r + dy < 4 && q + dx >= 0 && q + dx < 5) g += 1.0 / count(r + dy, q + dx);
      EXPECT_NEAR(xv.grad().at(0, std::size_t(r), std::size_t(q)), g, 1e-13);
    }
  auto rep = check_inputs({x}, [](Tape<double>&, const V& v) { return reduce_sum(mean_filter(v[0], 3)); }, 1e-4, 1e-5);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
}

TEST(Primitives, DownsampleAveragesBlocks) {
  Tensor<double> x({1, 2, 4}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8});
  Tape<double> t;
  auto y = spatial_downsample(t.constant(x));
  EXPECT_EQ(y.value().data, (std::vector<double>{3.5, 5.5}));
}

TEST(Primitives, GridSampleBilinearAndClamped) {
  Tensor<double> img({1, 2, 2}, std::vector<double>{0, 1, 2, 3});
  Tensor<double> c({2, 1, 3}, std::vector<double>{0.25, -5, 1, 0.5, 0, 9});
  Tape<double> t;
  auto y = grid_sample(t.constant(img), t.constant(c));
  EXPECT_DOUBLE_EQ(y.value()[0], 0.25 + 2 * 0.5);  // (0.25, 0.5)
  EXPECT_DOUBLE_EQ(y.value()[1], 0.0);             // clamped to (0, 0)
  EXPECT_DOUBLE_EQ(y.value()[2], 3.0);             // clamped to (1, 1)
}

TEST(Backward, SumOfSquares) {
  Tape<double> t;
  auto x = t.variable(Tensor<double>::vector({1, -2, 3}));
  t.backward(reduce_sum(square(x)));
  EXPECT_EQ(x.grad().data, (std::vector<double>{2, -4, 6}));
}

TEST(Backward, ConstantLossLeavesGradientsZero) {
  Parameter<double> p("p", Tensor<double>::vector({1, 2}));
  Tape<double> t;
  t.param(p);
  auto c = reduce_sum(t.constant(Tensor<double>::vector({4, 5})));
  t.backward(c);
  EXPECT_EQ(p.grad, Tensor<double>({2}));
}

TEST(Backward, UnreachedParameterUnchanged) {
  Parameter<double> a("a", Tensor<double>::vector({1})), b("b", Tensor<double>::vector({2}));
  b.grad.data[0] = 7;
  Tape<double> t;
  auto va = t.param(a);
  t.param(b);
  t.backward(reduce_sum(square(va)));
  EXPECT_EQ(a.grad.data[0], 2);
  EXPECT_EQ(b.grad.data[0], 7);
}

TEST(Backward, RejectsNonScalarLoss) {
  Tape<double> t;
  auto x = t.variable(Tensor<double>::vector({1, 2}));
  EXPECT_THROW(t.backward(square(x)), std::invalid_argument);
}

TEST(Backward, SeedScalesGradientsExactly) {
  auto w = random_tensor({3, 4}, 10), x = random_tensor({4}, 11);
  auto run = [&](double seed) {
    Parameter<double> p("w", w);
    Tape<double> t;
    auto y = reduce_sum(tanh(dense(t.constant(x), t.param(p), t.constant(Tensor<double>({3})))));
    t.backward(y, seed);
    return p.grad;
  };
  auto g1 = run(1.0), g4 = run(4.0);
  for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_EQ(g4.data[i], 4.0 * g1.data[i]);
}

TEST(Backward, DeterministicAcrossRuns) {
  auto run = [] {
    Parameter<double> w("w", random_tensor({4, 2, 3, 3}, 12));
    Tape<double> t;
    auto y = conv2d(t.constant(random_tensor({2, 6, 6}, 13)), t.param(w), t.constant(Tensor<double>({4})), 2);
    t.backward(reduce_mean(tanh(y)));
    return std::make_pair(y.value(), w.grad);
  };
  EXPECT_EQ(run(), run());
}

TEST(Errors, ShapeMismatchNamesPrimitive) {
  Tape<double> t;
  auto a = t.constant(Tensor<double>({2, 3})), b = t.constant(Tensor<double>({3, 2}));
  try {
    add(a, b);
    FAIL();
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[3,2]"), std::string::npos);
  }
  EXPECT_THROW(conv2d(t.constant(Tensor<double>({2, 4, 4})), t.constant(Tensor<double>({1, 3, 3, 3})),
                      t.constant(Tensor<double>({1}))),
               std::invalid_argument);
  EXPECT_THROW(mean_filter(t.constant(Tensor<double>({1, 4, 4})), 4), std::invalid_argument);
}

TEST(Errors, ApplyPrimitiveArity) {
  Tape<double> t;
  std::vector<Var<double>> one{t.constant(Tensor<double>({2}))};
  EXPECT_THROW(apply_primitive<double>(Primitive::add, one), std::invalid_argument);
  auto y = apply_primitive<double>(Primitive::scale, one, {.factor = 3.0});
  EXPECT_EQ(y.shape(), (Shape{2}));
}

// Finite-difference sweep over the primitive set, 10 seeds each.
class PrimitiveGradient : public ::testing::TestWithParam<Primitive> {};

TEST_P(PrimitiveGradient, MatchesCentralDifferences) {
  const Primitive kind = GetParam();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::vector<Tensor<double>> in;
    PrimitiveAttrs attrs;
    switch (kind) {
      case Primitive::conv2d:
        in = {random_tensor({2, 6, 5}, seed), random_tensor({3, 2, 3, 3}, seed + 100), random_tensor({3}, seed + 200)};
        attrs.stride = 1 + seed % 2;
        break;
      case Primitive::conv2d_transpose:
        in = {random_tensor({2, 3, 4}, seed), random_tensor({2, 3, 3, 3}, seed + 100), random_tensor({3}, seed + 200)};
        break;
      case Primitive::dense:
        in = {random_tensor({5}, seed), random_tensor({3, 5}, seed + 100), random_tensor({3}, seed + 200)};
        break;
      case Primitive::concat_channels:
        in = {random_tensor({1, 3, 4}, seed), random_tensor({2, 3, 4}, seed + 100)};
        break;
      case Primitive::add:
      case Primitive::mul:
        in = {random_tensor({2, 3, 4}, seed), random_tensor({2, 3, 4}, seed + 100)};
        break;
      case Primitive::spatial_downsample:
        in = {random_tensor({2, 4, 6}, seed)};
        break;
      case Primitive::mean_filter:
        in = {random_tensor({2, 5, 7}, seed)};
        attrs.window = 3 + 2 * (seed % 2);
        break;
      default:
        in = {random_tensor({2, 3, 4}, seed)};
        attrs.factor = -1.7;
        attrs.slope = 0.2;
    }
    auto rep = check_inputs(
        in, [&](Tape<double>&, const V& v) { return apply_primitive<double>(kind, v, attrs); }, 1e-4, 1e-6, seed);
    EXPECT_TRUE(rep.passed) << primitive_name(kind) << " seed " << seed << " err " << rep.max_rel_error << " at "
                            << rep.worst;
  }
}

INSTANTIATE_TEST_SUITE_P(All, PrimitiveGradient,
                         ::testing::Values(Primitive::conv2d, Primitive::conv2d_transpose, Primitive::dense,
                                           Primitive::leaky_relu, Primitive::tanh, Primitive::concat_channels,
                                           Primitive::add, Primitive::mul, Primitive::scale,
                                           Primitive::spatial_downsample, Primitive::mean_filter,
                                           Primitive::reduce_mean, Primitive::reduce_sum),
                         [](const auto& info) { return std::string(primitive_name(info.param)); });

TEST(ElementwiseGradient, ExpSubDivSquare) {
  auto a = random_tensor({2, 3}, 21), b = random_tensor({2, 3}, 22, 0.5, 2.0);
  auto rep = check_inputs({a, b}, [](Tape<double>&, const V& v) {
    return div(sub(exp(v[0]), square(v[1])), add_scalar(v[1], 0.3));
  });
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
}

TEST(ElementwiseGradient, GridSampleBothInputs) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto img = random_tensor({2, 5, 6}, seed);
    auto coords = random_tensor({2, 4, 4}, seed + 50, 0.3, 3.7);
    auto rep = check_inputs({img, coords}, [](Tape<double>&, const V& v) { return grid_sample(v[0], v[1]); });
    EXPECT_TRUE(rep.passed) << seed << " " << rep.max_rel_error << " " << rep.worst;
  }
}

TEST(ElementwiseGradient, SeparableFilter) {
  auto x = random_tensor({2, 6, 5}, 31);
  auto rep = check_inputs({x}, [](Tape<double>&, const V& v) {
    return separable_filter(v[0], std::vector<double>{0.2, 0.5, 0.3, 0.1, 0.05});
  });
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
}

TEST(GradientCheck, TanhOfLinearMap) {
  Parameter<double> w("W", random_tensor({4, 4}, 41));
  const auto x = random_tensor({4}, 42);
  auto f = [&](Tape<double>& t) {
    return reduce_sum(tanh(dense(t.constant(x), t.param(w), t.constant(Tensor<double>({4})))));
  };
  auto rep = gradient_check<double>(f, {&w}, {.step = 1e-6, .tol = 1e-4});
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
  EXPECT_EQ(rep.checked, 16u);
}

TEST(GradientCheck, LinearFunctionHasNoError) {
  Parameter<double> x("x", random_tensor({7}, 43));
  auto rep = gradient_check<double>([&](Tape<double>& t) { return reduce_sum(t.param(x)); }, {&x});
  EXPECT_LT(rep.max_rel_error, 1e-9);
}

TEST(GradientCheck, ReportsNonFiniteLocation) {
  Parameter<double> x("x", Tensor<double>::vector({1.0, 800.0}));
  auto rep = gradient_check<double>([&](Tape<double>& t) { return reduce_sum(exp(t.param(x))); }, {&x});
  EXPECT_FALSE(rep.passed);
  EXPECT_FALSE(rep.finite);
  EXPECT_FALSE(rep.nonfinite_at.empty());
}
