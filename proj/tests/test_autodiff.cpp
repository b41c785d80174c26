#include <cmath>

#include <gtest/gtest.h>

#include "mmlg/autodiff.hpp"
#include "mmlg/grad_check.hpp"
#include "test_support.hpp"

namespace mmlg {
namespace {

using testing::primitive_grad_error;

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Graph<double> g;
  Tensor<double> eye({3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye(i, i) = 1;
  Tensor<double> b({3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  EXPECT_EQ(g.value(ad::matmul(g, g.constant(eye), g.constant(b))), b);
}

TEST(Matmul, ZeroAnnihilates) {
  Graph<double> g;
  Rng rng(1);
  auto out = g.value(ad::matmul(g, g.constant(Tensor<double>::zeros({2, 4})),
                                g.constant(uniform<double>({4, 3}, -5, 5, rng))));
  EXPECT_EQ(out, Tensor<double>::zeros({2, 3}));
}

TEST(Matmul, HandComputedProduct) {
  Graph<double> g;
  auto out = g.value(ad::matmul(g, g.constant(Tensor<double>({2, 2}, {1, 2, 3, 4})),
                                g.constant(Tensor<double>({2, 1}, {5, 6}))));
  EXPECT_EQ(out, Tensor<double>({2, 1}, {17, 39}));
}

TEST(Matmul, InnerDimensionMismatchThrows) {
  Graph<double> g;
  EXPECT_THROW(ad::matmul(g, g.constant(Tensor<double>::zeros({2, 3})), g.constant(Tensor<double>::zeros({2, 3}))),
               DimensionError);
}

TEST(Softmax, ZerosGiveUniformRow) {
  auto y = ad::softmax_rows(Tensor<double>::zeros({1, 4}));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(y[i], 0.25);
}

TEST(Softmax, ShiftInvariant) {
  Rng rng(3);
  auto x = uniform<double>({3, 5}, -4, 4, rng);
  auto shifted = x;
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 5; ++c) shifted(r, c) += 10.0 * double(r + 1);
  EXPECT_LT(max_abs_diff(ad::softmax_rows(x), ad::softmax_rows(shifted)), 1e-15);
}

TEST(Softmax, ClosedForm) {
  auto y = ad::softmax_rows(Tensor<double>({1, 2}, {0.0, std::log(3.0)}));
  EXPECT_NEAR(y[0], 0.25, 1e-15);
  EXPECT_NEAR(y[1], 0.75, 1e-15);
}

TEST(Softmax, RowsSumToOneForLargeInputs) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    auto y = ad::softmax_rows(uniform<float>({8, 16}, -100, 100, rng));
    for (std::size_t r = 0; r < 8; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 16; ++c) s += y(r, c);
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(CrossEntropy, UniformLogitsAgainstOneHot) {
  Tensor<double> eye({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye(i, i) = 1;
  EXPECT_NEAR(ad::cross_entropy_rows(Tensor<double>::zeros({4, 4}), eye), std::log(4.0), 1e-12);
}

TEST(CrossEntropy, SaturatedDiagonalIsZero) {
  Tensor<double> logits({4, 4}, -50.0), eye({4, 4});
  for (std::size_t i = 0; i < 4; ++i) {
    logits(i, i) = 50.0;
    eye(i, i) = 1;
  }
  EXPECT_LT(ad::cross_entropy_rows(logits, eye), 1e-20);
}

TEST(CrossEntropy, ClosedFormSoftTarget) {
  const double expected = 0.25 * std::log(4.0) + 0.75 * std::log(4.0 / 3.0);
  EXPECT_NEAR(ad::cross_entropy_rows(Tensor<double>({1, 2}, {0.0, std::log(3.0)}),
                                     Tensor<double>({1, 2}, {0.25, 0.75})),
              expected, 1e-12);
  EXPECT_NEAR(expected, 0.562335, 1e-6);
}

TEST(CrossEntropy, RejectsNonDistributionTargets) {
  EXPECT_THROW(ad::cross_entropy_rows(Tensor<double>::zeros({1, 2}), Tensor<double>({1, 2}, {0.5, 0.6})),
               ValidationError);
  EXPECT_THROW(ad::cross_entropy_rows(Tensor<double>::zeros({1, 2}), Tensor<double>({1, 2}, {1.5, -0.5})),
               ValidationError);
}

TEST(CrossEntropy, AgainstOwnSoftmaxEqualsEntropy) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    auto x = uniform<double>({5, 7}, -6, 6, rng);
    auto p = ad::softmax_rows(x);
    double entropy = 0;
    for (std::size_t i = 0; i < p.size(); ++i) entropy -= p[i] * std::log(p[i]);
    EXPECT_NEAR(ad::cross_entropy_rows(x, p), entropy / 5.0, 1e-10);
  }
}

TEST(LayerNorm, ConstantRowMapsToBeta) {
  Graph<double> g;
  auto y = g.value(ad::layer_norm(g, g.constant(Tensor<double>({2, 3}, 7.0)), g.constant(Tensor<double>({3}, 1.0)),
                                  g.constant(Tensor<double>({3}, 0.0))));
  EXPECT_EQ(y, Tensor<double>::zeros({2, 3}));
}

TEST(LayerNorm, ZeroGammaGivesBeta) {
  Graph<double> g;
  Rng rng(5);
  Tensor<double> beta({4}, {1, -2, 3, 0.5});
  auto y = g.value(ad::layer_norm(g, g.constant(uniform<double>({3, 4}, -3, 3, rng)),
                                  g.constant(Tensor<double>({4}, 0.0)), g.constant(beta)));
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(y(r, c), beta[c]);
}

TEST(LayerNorm, TwoElementClosedForm) {
  Graph<double> g;
  auto y = g.value(ad::layer_norm(g, g.constant(Tensor<double>({1, 2}, {1, 3})), g.constant(Tensor<double>({2}, 1.0)),
                                  g.constant(Tensor<double>({2}, 0.0)), 0.0));
  EXPECT_DOUBLE_EQ(y[0], -1.0);
  EXPECT_DOUBLE_EQ(y[1], 1.0);
}

TEST(LayerNorm, WidthMismatchThrows) {
  Graph<double> g;
  EXPECT_THROW(ad::layer_norm(g, g.constant(Tensor<double>::zeros({2, 3})), g.constant(Tensor<double>({4}, 1.0)),
                              g.constant(Tensor<double>({4}, 0.0))),
               DimensionError);
}

TEST(GradCheck, QuadraticIsExact) {
  Rng rng(11);
  ParamStore<double> store;
  auto& p = store.add("p", uniform<double>({5, 3}, -2, 2, rng));
  // sum p^2 = trace(p p^T)
  Tensor<double> eye({5, 5});
  for (std::size_t i = 0; i < 5; ++i) eye(i, i) = 1;
  auto sq = [&](Graph<double>& g) {
    Var x = g.param(p);
    return testing::weighted_total(g, ad::matmul(g, x, ad::transpose(g, x)), eye);
  };
  auto r = grad_check(sq, all_params(store), 1e-5);
  EXPECT_LT(r.max_rel_error, 1e-9);
  EXPECT_EQ(r.coords_checked, 15u);
}

TEST(GradCheck, NonFiniteLossThrows) {
  ParamStore<double> store;
  auto& p = store.add("p", Tensor<double>({1}, 1.0));
  auto bad = [&](Graph<double>& g) {
    return ad::scale(g, g.param(p), std::numeric_limits<double>::infinity());
  };
  EXPECT_THROW(grad_check(bad, all_params(store), 1e-6), NumericError);
}

// Reverse-mode gradients of every primitive against central differences over
// 20 random seeds.
class PrimitiveGradients : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(PrimitiveGradients, MatchFiniteDifferences) {
  const std::uint64_t seed = GetParam();
  using V = std::vector<Var>;
  auto check = [&](const char* name, const testing::Builder& b, std::vector<Shape> shapes) {
    const double err = primitive_grad_error(b, shapes, seed);
    EXPECT_LT(err, 1e-4) << name << " seed " << seed;
  };
  check("matmul", [](Graph<double>& g, const V& v) { return ad::matmul(g, v[0], v[1]); }, {{3, 4}, {4, 2}});
  check("transpose", [](Graph<double>& g, const V& v) { return ad::transpose(g, v[0]); }, {{3, 4}});
  check("add", [](Graph<double>& g, const V& v) { return ad::add(g, v[0], v[1]); }, {{3, 4}, {3, 4}});
  check("add_row", [](Graph<double>& g, const V& v) { return ad::add_row(g, v[0], v[1]); }, {{3, 4}, {4}});
  check("add_tiled", [](Graph<double>& g, const V& v) { return ad::add_tiled(g, v[0], v[1]); }, {{6, 4}, {3, 4}});
  check("scale", [](Graph<double>& g, const V& v) { return ad::scale(g, v[0], -1.7); }, {{3, 4}});
  check("mul_scalar", [](Graph<double>& g, const V& v) { return ad::mul_scalar(g, v[0], v[1]); }, {{3, 4}, {1}});
  check("weighted_sum",
        [](Graph<double>& g, const V& v) { return ad::weighted_sum(g, v[0], v[1], v[2], v[3]); },
        {{1}, {3, 4}, {1}, {3, 4}});
  check("select", [](Graph<double>& g, const V& v) { return ad::select(g, v[0], 2); }, {{5}});
  check("exp_clamp", [](Graph<double>& g, const V& v) { return ad::exp_clamp(g, ad::scale(g, v[0], 2.0), 0.1, 10.0); },
        {{1}});
  check("gelu", [](Graph<double>& g, const V& v) { return ad::gelu(g, ad::scale(g, v[0], 3.0)); }, {{3, 4}});
  check("layer_norm", [](Graph<double>& g, const V& v) { return ad::layer_norm(g, v[0], v[1], v[2]); },
        {{3, 6}, {6}, {6}});
  check("softmax_rows", [](Graph<double>& g, const V& v) { return ad::softmax_rows(g, ad::scale(g, v[0], 3.0)); },
        {{3, 5}});
  check("l2_normalize_rows", [](Graph<double>& g, const V& v) { return ad::l2_normalize_rows(g, v[0]); }, {{3, 5}});
  check("prepend_rows", [](Graph<double>& g, const V& v) { return ad::prepend_rows(g, v[0], v[1], 2); },
        {{6, 3}, {1, 3}});
  check("gather_rows", [](Graph<double>& g, const V& v) { return ad::gather_rows(g, v[0], {4, 0, 4}); }, {{5, 3}});
  check("embedding", [](Graph<double>& g, const V& v) { return ad::embedding(g, v[0], {1, 3, 1, 0}); }, {{4, 3}});
  check("attention_scores",
        [](Graph<double>& g, const V& v) { return ad::attention_scores(g, v[0], v[1], 2, 2); }, {{6, 4}, {6, 4}});
  check("attention_mix",
        [](Graph<double>& g, const V& v) { return ad::attention_mix(g, ad::softmax_rows(g, v[0]), v[1], 2, 2); },
        {{12, 3}, {6, 4}});
  check("cross_entropy_rows",
        [](Graph<double>& g, const V& v) {
          Tensor<double> t({2, 3}, {0.2, 0.3, 0.5, 0.0, 1.0, 0.0});
          return ad::cross_entropy_rows(g, ad::scale(g, v[0], 4.0), t);
        },
        {{2, 3}});
}

INSTANTIATE_TEST_SUITE_P(Seeds, PrimitiveGradients, ::testing::Range<std::uint64_t>(0, 20));

TEST(Graph, ForwardIsBitwiseDeterministic) {
  Rng rng(9);
  auto a = uniform<float>({17, 32}, -1, 1, rng);
  auto b = uniform<float>({32, 48}, -1, 1, rng);
  auto run = [&]() {
    Graph<float> g;
    Var y = ad::gelu(g, ad::matmul(g, g.constant(a), g.constant(b)));
    return g.value(ad::softmax_rows(g, y));
  };
  EXPECT_EQ(run(), run());
}

TEST(Graph, BackwardRequiresScalarRoot) {
  Graph<double> g;
  ParamStore<double> s;
  Var x = g.param(s.add("x", Tensor<double>({2, 2}, 1.0)));
  EXPECT_THROW(g.backward(x), DimensionError);
}

TEST(Graph, GradientsAccumulateIntoParameters) {
  ParamStore<double> s;
  auto& p = s.add("p", Tensor<double>({2}, {1.0, 2.0}));
  for (int rep = 0; rep < 2; ++rep) {
    Graph<double> g;
    g.backward(testing::weighted_total(g, g.param(p), Tensor<double>({2}, {3.0, 4.0})));
  }
  EXPECT_EQ(p.grad, Tensor<double>({2}, {6.0, 8.0}));
}

}  // namespace
}  // namespace mmlg
