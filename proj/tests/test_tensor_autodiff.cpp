#include <gtest/gtest.h>

#include "support.hpp"

using namespace fixed_dg;
using testsupport::random_tensor;

TEST(Tensor, ShapeAndIndexing) {
  Tensor t = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.at(1, 2), 6.0);
  EXPECT_EQ(t.row_size(), 3u);
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_THROW(t.item(), DimensionError);
  EXPECT_EQ(Tensor::scalar(3.5).item(), 3.5);
}

TEST(Tensor, ReshapeKeepsData) {
  Tensor t = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  Tensor r = t.reshaped({3, 2});
  EXPECT_EQ(r.at(2, 1), 6.0);
  EXPECT_THROW(t.reshaped({4, 2}), DimensionError);
}

TEST(Tensor, FiniteAndDiff) {
  Tensor a = Tensor::vector({1, 2, 3});
  Tensor b = Tensor::vector({1, 2.5, 3});
  EXPECT_DOUBLE_EQ(max_abs_diff(a, b), 0.5);
  EXPECT_TRUE(a.all_finite());
  b[1] = std::nan("");
  EXPECT_FALSE(b.all_finite());
}

TEST(Autodiff, MatmulValue) {
  Graph g;
  Var a = g.constant(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  Var b = g.constant(Tensor::matrix(2, 1, {5, 6}));
  Tensor c = matmul(a, b).value();
  EXPECT_EQ(c.at(0, 0), 17.0);
  EXPECT_EQ(c.at(1, 0), 39.0);
}

TEST(Autodiff, ShapeErrorsNameTheOp) {
  Graph g;
  Var a = g.constant(Tensor(Shape{2, 3}));
  Var b = g.constant(Tensor(Shape{2, 3}));
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos);
  }
  EXPECT_THROW(add(a, g.constant(Tensor(Shape{4}))), DimensionError);
}

TEST(Autodiff, MixingGraphsThrows) {
  Graph g1, g2;
  Var a = g1.constant(Tensor(Shape{1, 1}, 1.0));
  Var b = g2.constant(Tensor(Shape{1, 1}, 1.0));
  EXPECT_THROW(add(a, b), std::invalid_argument);
}

TEST(Autodiff, ReusedNodeAccumulates) {
  Graph g;
  Var x = g.input(Tensor::vector({2.0}));
  Var y = sum(mul(x, x));  // x^2 via two uses of the same node
  EXPECT_DOUBLE_EQ(g.backward(y).of(x)[0], 4.0);
}

TEST(Autodiff, UnreachedNodeHasZeroGradient) {
  Graph g;
  Var x = g.input(Tensor::vector({2.0, 3.0}));
  Var unused = g.input(Tensor::vector({1.0}));
  Gradients gr = g.backward(sum(x));
  EXPECT_FALSE(gr.reached(unused.id));
  EXPECT_EQ(gr.of(unused)[0], 0.0);
}

TEST(Autodiff, ConstantsGetNoGradient) {
  Graph g;
  Var c = g.constant(Tensor::vector({1.0, 2.0}));
  Var x = g.input(Tensor::vector({1.0, 1.0}));
  Gradients gr = g.backward(sum(mul(c, x)));
  EXPECT_FALSE(gr.reached(c.id));
  EXPECT_EQ(gr.of(x)[1], 2.0);
}

TEST(Autodiff, ParameterBindingIsShared) {
  Parameter p{"w", Tensor::vector({3.0}), true};
  Graph g;
  Var a = g.param(p);
  Var b = g.param(p);
  EXPECT_EQ(a.id, b.id);
  Gradients gr = g.backward(sum(add(a, b)));
  EXPECT_DOUBLE_EQ(gr.of(p)[0], 2.0);
}

TEST(Autodiff, BackwardNeedsScalar) {
  Graph g;
  Var x = g.input(Tensor::vector({1.0, 2.0}));
  EXPECT_THROW(g.backward(x), DimensionError);
}

TEST(Autodiff, GradReverseIsIdentityForward) {
  Graph g;
  Var x = g.input(Tensor::vector({1.0, -2.0}));
  Var r = grad_reverse(x, 0.5);
  EXPECT_EQ(r.value(), x.value());
  Gradients gr = g.backward(sum(r));
  EXPECT_DOUBLE_EQ(gr.of(x)[0], -0.5);
  Graph g0;
  Var x0 = g0.input(Tensor::vector({1.0}));
  EXPECT_DOUBLE_EQ(g0.backward(sum(grad_reverse(x0, 0.0))).of(x0)[0], 0.0);
}

TEST(Autodiff, ConvOutputLength) {
  EXPECT_EQ(conv1d_out_len(10, 3, {1, 0}), 8u);
  EXPECT_EQ(conv1d_out_len(10, 3, {2, 1}), 5u);
  EXPECT_EQ(conv1d_out_len(2, 3, {1, 0}), 0u);
}

TEST(Autodiff, ConvMatchesDirectSum) {
  Rng rng(7);
  Tensor x = random_tensor({1, 2, 6}, rng), w = random_tensor({1, 2, 3}, rng), b = Tensor::vector({0.25});
  Graph g;
  Tensor y = conv1d(g.constant(x), g.constant(w), g.constant(b), {2, 1}).value();
  ASSERT_EQ(y.shape(), (Shape{1, 1, 3}));
  for (std::size_t t = 0; t < 3; ++t) {
    double s = 0.25;
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t q = 0; q < 3; ++q) {
        const long pos = static_cast<long>(t * 2 + q) - 1;
        if (pos >= 0 && pos < 6) s += w[c * 3 + q] * x[c * 6 + static_cast<std::size_t>(pos)];
      }
    EXPECT_NEAR(y[t], s, 1e-15);
  }
}

TEST(Autodiff, SoftmaxCrossEntropyIsStable) {
  Graph g;
  Var l = g.input(Tensor::matrix(1, 2, {1000.0, -1000.0}));
  Tensor t = Tensor::matrix(1, 2, {1.0, 0.0});
  EXPECT_NEAR(softmax_cross_entropy(l, t).value().item(), 0.0, 1e-12);
  Var l2 = g.input(Tensor::matrix(1, 2, {0.0, 0.0}));
  EXPECT_NEAR(softmax_cross_entropy(l2, t).value().item(), std::log(2.0), 1e-15);
}

TEST(Autodiff, BatchNormTrainNormalizes) {
  Rng rng(3);
  Graph g;
  Tensor x = random_tensor({8, 2}, rng, -3, 5);
  BatchStats st;
  Tensor y = batch_norm_train(g.constant(x), g.constant(Tensor(Shape{2}, 1.0)), g.constant(Tensor(Shape{2})), 1e-12, &st).value();
  for (std::size_t c = 0; c < 2; ++c) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < 8; ++i) m += y.at(i, c) / 8;
    for (std::size_t i = 0; i < 8; ++i) v += (y.at(i, c) - m) * (y.at(i, c) - m) / 8;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-9);
  }
}

// Every op, 100 random instances each.
class OpGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
  const auto gens = testsupport::op_generators();
  const auto& ng = gens.at(GetParam());
  Rng rng(1234 + GetParam());
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) worst = std::max(worst, testsupport::grad_check(ng.gen(rng), rng));
  EXPECT_LT(worst, 1e-4) << ng.op;
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::Range<std::size_t>(0, testsupport::op_generators().size()),
                         [](const ::testing::TestParamInfo<std::size_t>& info) {
                           return testsupport::op_generators()[info.param].op;
                         });

TEST(GradCheck, FlagsAWrongGradient) {
  Rng rng(5);
  testsupport::GradCase c{"grad_reverse", {random_tensor({2, 2}, rng)},
                          [](Graph&, const std::vector<Var>& v) { return grad_reverse(v[0], 1.0); }};
  c.fd_sign = 1.0;  // claim identity backward; the true backward negates
  EXPECT_GT(testsupport::grad_check(c, rng), 1.0);
}
