#include <gtest/gtest.h>

#include <set>

#include "support.hpp"

using namespace fixed_dg;

TEST(Beta, MomentsMatchSymmetricBeta) {
  for (double alpha : {0.2, 1.0, 2.0}) {
    Rng rng(11);
    const int n = 200000;
    double s = 0, s2 = 0;
    for (int i = 0; i < n; ++i) {
      const double v = sample_beta({alpha, std::nullopt}, rng);
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
      s += v;
      s2 += v * v;
    }
    const double m = s / n, var = s2 / n - m * m;
    const double want_var = 1.0 / (4.0 * (2.0 * alpha + 1.0));
    EXPECT_NEAR(m, 0.5, 5 * std::sqrt(want_var / n)) << alpha;
    EXPECT_NEAR(var, want_var, 0.02 * want_var + 1e-4) << alpha;
  }
}

TEST(Beta, TruncationIsRespected) {
  Rng rng(2);
  for (int i = 0; i < 10000; ++i) {
    const double v = sample_beta({0.2, std::make_pair(0.5, 1.0)}, rng);
    ASSERT_GE(v, 0.5);
    ASSERT_LE(v, 1.0);
  }
}

TEST(Beta, RejectsBadParameters) {
  Rng rng(0);
  EXPECT_THROW(sample_beta({0.0, std::nullopt}, rng), ConfigError);
  EXPECT_THROW(sample_beta({-1.0, std::nullopt}, rng), ConfigError);
  EXPECT_THROW(sample_beta({1.0, std::make_pair(0.8, 0.2)}, rng), ConfigError);
}

TEST(Beta, AlphaOneIsUniform) {
  Rng rng(9);
  int below = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) below += sample_beta({1.0, std::nullopt}, rng) < 0.25;
  EXPECT_NEAR(static_cast<double>(below) / n, 0.25, 0.006);
}

TEST(PairShuffle, IsAPermutation) {
  Rng rng(4);
  for (std::size_t b : {1u, 2u, 7u, 64u}) {
    auto p = pair_shuffle(b, rng);
    std::set<std::size_t> s(p.begin(), p.end());
    EXPECT_EQ(s.size(), b);
    EXPECT_EQ(*s.rbegin(), b - 1);
  }
  EXPECT_THROW(pair_shuffle(0, rng), std::invalid_argument);
}

TEST(PairShuffle, UniformOverPositions) {
  Rng rng(8);
  std::vector<int> counts(4, 0);
  const int n = 40000;
  for (int i = 0; i < n; ++i) counts[pair_shuffle(4, rng)[0]]++;
  for (int c : counts) EXPECT_NEAR(c / static_cast<double>(n), 0.25, 0.01);
}

TEST(Mix, TensorsAndLabels) {
  Tensor a = Tensor::vector({0.0, 10.0}), b = Tensor::vector({1.0, 0.0});
  Tensor m = mix_tensors(a, b, 0.25);
  EXPECT_DOUBLE_EQ(m[0], 0.75);
  EXPECT_DOUBLE_EQ(m[1], 2.5);
  std::vector<double> yi{1, 0}, yj{0, 1};
  auto y = mix_labels(yi, yj, 0.3);
  EXPECT_DOUBLE_EQ(y[0], 0.3);
  EXPECT_DOUBLE_EQ(y[1], 0.7);
  EXPECT_THROW(mix_tensors(a, Tensor::vector({1.0}), 0.5), DimensionError);
  EXPECT_THROW(mix_labels(yi, yj, 1.5), std::invalid_argument);
}

TEST(Mix, PlanPairsRowWithPermutedRow) {
  Tensor x = Tensor::matrix(3, 1, {1, 2, 3});
  Tensor y = one_hot(std::vector<int>{0, 1, 1}, 2);
  MixPlan plan{0.5, {2, 0, 1}, MixSite::Input, 0};
  auto [xm, ym] = apply_mix_plan(x, y, plan);
  EXPECT_DOUBLE_EQ(xm.at(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(xm.at(1, 0), 1.5);
  EXPECT_DOUBLE_EQ(ym.at(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(ym.at(2, 1), 1.0);
  plan.perm = {0, 1};
  EXPECT_THROW(apply_mix_plan(x, y, plan), DimensionError);
}

TEST(Mix, GradientFlowsToBothOperands) {
  Graph g;
  Var x = g.input(Tensor::matrix(2, 1, {1, 2}));
  MixPlan plan{0.7, {1, 0}, MixSite::Input, 0};
  auto [xm, ym] = apply_mix_plan(x, one_hot(std::vector<int>{0, 1}, 2), plan);
  Gradients gr = g.backward(sum(xm));
  // row 0 = .7 x0 + .3 x1, row 1 = .7 x1 + .3 x0: each input row gets 1.0
  EXPECT_NEAR(gr.of(x)[0], 1.0, 1e-15);
  EXPECT_NEAR(gr.of(x)[1], 1.0, 1e-15);
}

TEST(Mix, PlanSamplingIsDeterministic) {
  Rng a(77), b(77);
  MixPlan p = make_mix_plan(16, 0.2, MixSite::Bottleneck, a);
  MixPlan q = make_mix_plan(16, 0.2, MixSite::Bottleneck, b);
  EXPECT_EQ(p.lambda, q.lambda);
  EXPECT_EQ(p.perm, q.perm);
}

TEST(Mix, AlgebraInvariantsHoldExactly) {
  Rng rng(2024);
  testsupport::MixAlgebraStats st;
  for (int i = 0; i < 2000; ++i) testsupport::mix_algebra_case(rng, st);
  EXPECT_EQ(st.failures, 0u) << st.first_failure << " worst " << st.worst;
  EXPECT_LE(st.worst, 1e-12);
}
