#include <gtest/gtest.h>

#include <numbers>

#include "fixed_dg/bounds.hpp"

using namespace fixed_dg;
using namespace fixed_dg::bounds;

namespace {

EmpiricalDist line(std::vector<double> pts, std::vector<int> labels = {}) {
  return EmpiricalDist::uniform(1, std::move(pts), std::move(labels));
}

}  // namespace

TEST(Empirical, Validation) {
  EXPECT_THROW(EmpiricalDist::uniform(1, {}), ConfigError);
  EmpiricalDist d = line({0.1, 0.2});
  d.weights = {0.7, 0.7};
  EXPECT_THROW(d.validate(), ConfigError);
  EXPECT_THROW(line({0.1, 0.2}, {0, 2}), ConfigError);
  EXPECT_THROW(line({0.1, 0.2}, {0}), DimensionError);
}

TEST(Empirical, MixtureWeights) {
  EmpiricalDist m = mixture({line({0.0}), line({1.0, 2.0})}, std::vector<double>{0.25, 0.75});
  m.validate();
  EXPECT_EQ(m.size(), 3u);
  EXPECT_DOUBLE_EQ(m.weights[2], 0.375);
  EXPECT_THROW(mixture({line({0.0}), line({1.0})}, std::vector<double>{0.5, 0.6}), ConfigError);
}

TEST(Divergence, SeparatedSetsReachTwo) {
  const HypothesisClass h = threshold_class(linspace(0.0, 1.0, 11));
  EmpiricalDist p = line({0.05, 0.15}), q = line({0.85, 0.95});
  EXPECT_DOUBLE_EQ(h_divergence(p, q, h), 2.0);
  EXPECT_DOUBLE_EQ(h_delta_h_divergence(p, q, h), 2.0);
  EXPECT_EQ(h_divergence(p, p, h), 0.0);
}

TEST(Divergence, HandComputedThresholdValues) {
  // thresholds at 0, .5, 1: P = {.2, .6}, Q = {.6, .7}
  const HypothesisClass h = threshold_class({0.0, 0.5, 1.0});
  EmpiricalDist p = line({0.2, 0.6}), q = line({0.6, 0.7});
  // masses P: 1, .5, 0; Q: 1, 1, 0 -> dH = 2 * .5
  EXPECT_DOUBLE_EQ(h_divergence(p, q, h), 1.0);
  // disagreement(h0,h1) P: .5, Q: 0; (h0,h2) P: 1, Q: 1; (h1,h2) P: .5, Q: 1
  EXPECT_DOUBLE_EQ(h_delta_h_divergence(p, q, h), 1.0);
}

TEST(Divergence, DeltaClassDominatesClass) {
  // For classes that contain both constant hypotheses, dH <= dHdH.
  Rng rng(1);
  const HypothesisClass h = threshold_class(linspace(-0.01, 1.01, 31));
  for (int i = 0; i < 20; ++i) {
    EmpiricalDist p = random_dist(1, 15, rng), q = random_dist(1, 15, rng);
    EXPECT_LE(h_divergence(p, q, h), h_delta_h_divergence(p, q, h) + kSlack);
  }
}

TEST(Divergence, DimensionMismatchThrows) {
  EXPECT_THROW(profile(line({0.1}), quadrant_class({0.0, 1.0})), DimensionError);
}

TEST(JointError, HandComputed) {
  const HypothesisClass h = threshold_class({0.0, 0.5, 1.0});
  EmpiricalDist p = line({0.2, 0.6}, {0, 1}), q = line({0.4, 0.8}, {1, 1});
  // errors P: .5, 0, .5; Q: 0, .5, 1 -> min sum .5
  EXPECT_DOUBLE_EQ(ideal_joint_error(p, q, h), 0.5);
  EXPECT_THROW(ideal_joint_error(p, line({0.1}), h), ConfigError);
}

TEST(DaBound, HoldsOnRandomInstances) {
  Rng rng(2);
  const HypothesisClass h = threshold_class(linspace(0.0, 1.0, 21));
  for (int i = 0; i < 30; ++i) {
    auto rep = check_da_bound(random_dist(1, 12, rng, true, 0.4), random_dist(1, 12, rng, true, 0.6), h);
    EXPECT_EQ(rep.violations, 0u);
    EXPECT_GE(rep.min_slack, -kSlack);
    EXPECT_EQ(rep.slack.size(), h.size());
  }
}

TEST(Coverage, SourcesAreInOAndMixtureIsInOprime) {
  Rng rng(3);
  const HypothesisClass h = quadrant_class(linspace(0.0, 1.0, 6));
  SourceConfig sc = random_sources(3, 8, rng, false);
  SourceSet set(sc.sources, sc.phi, h);
  for (const auto& s : sc.sources) {
    EXPECT_TRUE(set.in_O(profile(s, h)));
    EXPECT_TRUE(membership_O(s, sc.sources, sc.phi, h));
  }
  EXPECT_TRUE(set.in_Oprime(set.mix_profile));
  EXPECT_EQ(set.mixture_divergence(set.mix_profile), 0.0);
}

TEST(Coverage, FarCandidateIsOutside) {
  const HypothesisClass h = quadrant_class(linspace(0.0, 1.0, 6));
  std::vector<EmpiricalDist> src{EmpiricalDist::uniform(2, {0.1, 0.1, 0.2, 0.2}), EmpiricalDist::uniform(2, {0.15, 0.1, 0.2, 0.15})};
  std::vector<double> phi{0.5, 0.5};
  EmpiricalDist far = EmpiricalDist::uniform(2, {0.9, 0.9});
  EXPECT_FALSE(membership_O(far, src, phi, h));
  EXPECT_FALSE(membership_Oprime(far, src, phi, h));
}

TEST(Coverage, InclusionHasNoCounterexamples) {
  Rng rng(4);
  const HypothesisClass h = quadrant_class(linspace(0.0, 1.0, 6));
  for (int c = 0; c < 5; ++c) {
    SourceConfig sc = random_sources(3, 8, rng, false);
    auto rep = verify_inclusion(candidate_grid(sc, 50, rng, false), sc.sources, sc.phi, h);
    EXPECT_TRUE(rep.counterexamples.empty());
    EXPECT_LE(rep.in_O, rep.in_Oprime);
    EXPECT_GE(rep.min_triangle_slack, -kSlack);
    EXPECT_GE(rep.in_O, 3u);  // the sources themselves
  }
}

TEST(DgBound, HoldsForBothCoverageSets) {
  Rng rng(5);
  const HypothesisClass h = quadrant_class(linspace(0.0, 1.0, 6));
  for (Coverage cov : {Coverage::O, Coverage::Oprime}) {
    for (int c = 0; c < 5; ++c) {
      SourceConfig sc = random_sources(3, 8, rng, true);
      SourceSet set(sc.sources, sc.phi, h);
      auto rep = check_dg_bound(random_dist(2, 12, rng, true), set, candidate_grid(sc, 40, rng, true), h, cov);
      EXPECT_GT(rep.candidates_in_set, 0u);
      EXPECT_EQ(rep.violations, 0u);
      EXPECT_EQ(rep.checks, rep.candidates_in_set * h.size());
    }
  }
}

TEST(DgBound, NeedsLabels) {
  const HypothesisClass h = threshold_class({0.0, 0.5});
  SourceSet set({line({0.1}, {0}), line({0.9}, {1})}, {0.5, 0.5}, h);
  EXPECT_THROW(check_dg_bound(line({0.3}), set, {line({0.2}, {0})}, h, Coverage::O), ConfigError);
}

TEST(TruncatedBeta, ClosedFormMeans) {
  EXPECT_NEAR(truncated_beta_mean(1.0), 0.75, 1e-14);
  EXPECT_NEAR(truncated_beta_mean(2.0), 0.6875, 1e-14);
  EXPECT_NEAR(truncated_beta_mean(0.5), 0.5 + 1.0 / std::numbers::pi, 1e-12);
  EXPECT_GT(truncated_beta_mean(0.2), truncated_beta_mean(0.5));
  EXPECT_LT(truncated_beta_mean(50.0), 0.56);
  EXPECT_THROW(truncated_beta_mean(0.0), ConfigError);
}

TEST(Shrinkage, SinglePointIsExact) {
  Rng rng(6);
  Tensor x = Tensor::matrix(1, 2, {3.0, -1.0}), y = Tensor::matrix(1, 2, {0.0, 1.0});
  auto rep = mixup_shrinkage_check(x, y, 0.2, 10000, rng);
  EXPECT_EQ(rep.max_input_z, 0.0);
  EXPECT_EQ(rep.max_label_z, 0.0);
  EXPECT_EQ(rep.input_mean[0], 3.0);
  EXPECT_EQ(rep.label_rows_not_unit, 0u);
}

TEST(Shrinkage, ResidualsAreCentered) {
  Rng rng(7);
  std::normal_distribution<double> g;
  Tensor x(Shape{12, 2}), y(Shape{12, 3});
  for (std::size_t i = 0; i < 12; ++i) {
    x.at(i, 0) = g(rng);
    x.at(i, 1) = 5.0 + g(rng);
    y.at(i, i % 3) = 1.0;
  }
  for (double a : {0.2, 1.0, 2.0}) {
    auto rep = mixup_shrinkage_check(x, y, a, 20000, rng);
    EXPECT_TRUE(rep.passed()) << a << " " << rep.max_input_z << " " << rep.max_label_z;
    EXPECT_LT(rep.theta_mean_z, 4.0) << a;
    EXPECT_GE(rep.theta_mean, 0.5);
  }
}

TEST(Shrinkage, RequiresEnoughTrials) {
  Rng rng(0);
  EXPECT_THROW(mixup_shrinkage_check(Tensor(Shape{2, 1}), Tensor(Shape{2, 1}), 1.0, 100, rng), ConfigError);
  EXPECT_THROW(mixup_shrinkage_check(Tensor(Shape{2, 1}), Tensor(Shape{3, 1}), 1.0, 10000, rng), DimensionError);
}

TEST(MixupForms, AgreeInExpectation) {
  Rng rng(8);
  Tensor x = Tensor::matrix(4, 1, {-1.0, 0.0, 0.5, 2.0}), y = Tensor::matrix(4, 2, {1, 0, 1, 0, 0, 1, 0, 1});
  const Scorer h = [](std::span<const double> v) { return std::vector<double>{0.5 - 0.2 * v[0], 0.5 + 0.2 * v[0]}; };
  auto r = mixup_error_agreement(x, y, h, 0.4, 50000, rng);
  EXPECT_TRUE(r.agree()) << r.z;
  EXPECT_GT(r.all_pairs, 0.0);
}

TEST(Suites, SmallRunsPass) {
  EXPECT_TRUE(divergence_suite(1, 10).passed);
  EXPECT_TRUE(theorem1_suite(1, 10).passed);
  EXPECT_TRUE(inclusion_suite(1, 3, 40).passed);
  EXPECT_TRUE(dg_bound_suite(1, Coverage::O, 3, 40).passed);
  EXPECT_TRUE(dg_bound_suite(1, Coverage::Oprime, 3, 40).passed);
}

TEST(Suites, RecordCountsFailures) {
  SuiteResult s;
  s.name = "t";
  s.record("ok", 1.0, 1.0);
  s.record("bad", 1.1, 1.0);
  EXPECT_EQ(s.checks, 2u);
  EXPECT_EQ(s.failures, 1u);
  EXPECT_FALSE(s.passed);
  EXPECT_NEAR(s.rows[1].slack(), -0.1, 1e-15);
}
