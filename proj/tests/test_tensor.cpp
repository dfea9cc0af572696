#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "ptgcn/tensor.hpp"
#include "support/gradient_suite.hpp"

using namespace ptgcn;
using ptgcn::testkit::random_tensor;

TEST(Tensor, ShapeContract) {
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>(3)), ShapeError);
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_FALSE(t.has_grad());
}

TEST(Tensor, MatmulIdentityAndHandExample) {
  std::mt19937_64 rng(3);
  Tensor I({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor M = random_tensor({3, 4}, rng, -1, 1, false);
  Tensor P = matmul(I, M);
  for (std::size_t i = 0; i < M.size(); ++i)
    EXPECT_EQ(P[i], M[i]);
  Tensor r = matmul(Tensor({1, 2}, {1, 2}), Tensor({2, 1}, {3, 4}));
  EXPECT_EQ(r.shape(), (Shape{1, 1}));
  EXPECT_EQ(r[0], 11.0);
}

TEST(Tensor, MatmulShapeMismatch) {
  EXPECT_THROW(matmul(Tensor({2, 3}), Tensor({2, 3})), ShapeError);
  EXPECT_THROW(add(Tensor({2, 3}), Tensor({3, 2})), ShapeError);
  EXPECT_THROW(concat_lastdim({Tensor({2, 3}), Tensor({3, 3})}), ShapeError);
}

TEST(Tensor, MatmulGradientSumOutput) {
  std::mt19937_64 rng(11);
  Tensor a = random_tensor({4, 5}, rng), b = random_tensor({5, 2}, rng);
  auto r = testkit::gradcheck([=] { return sum(matmul(a, b)); }, {a, b});
  EXPECT_LE(r.max_rel_error, 1e-6) << r.worst;
}

TEST(Tensor, SoftmaxExamples) {
  Tensor u = softmax_rows(Tensor({1, 3}, {0, 0, 0}));
  for (int i = 0; i < 3; ++i)
    EXPECT_NEAR(u[i], 1.0 / 3.0, 1e-15);
  Tensor big = softmax_rows(Tensor({1, 3}, {1000, 0, 0}));
  EXPECT_NEAR(big[0], 1.0, 1e-12);
  EXPECT_NEAR(big[1], 0.0, 1e-12);
  EXPECT_TRUE(std::isfinite(big[2]));
}

TEST(Tensor, SoftmaxRowsNormalizedProperty) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t m = 1 + seed % 6, n = 1 + seed % 9;
    Tensor p = softmax_rows(random_tensor({m, n}, rng, -5, 5, false));
    for (std::size_t r = 0; r < m; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        double v = p[r * n + j];
        EXPECT_GT(v, 0.0);
        EXPECT_LE(v, 1.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Tensor, SoftmaxJacobian) {
  std::mt19937_64 rng(4);
  Tensor x = random_tensor({2, 4}, rng);
  auto r = testkit::gradcheck(
      [=] { return testkit::project(softmax_rows(x), 9); }, {x});
  EXPECT_LE(r.max_rel_error, 1e-5) << r.worst;
}

TEST(Tensor, ElementwiseExamples) {
  Tensor r = relu(Tensor({2}, {-1, 2}));
  EXPECT_EQ(r[0], 0.0);
  EXPECT_EQ(r[1], 2.0);
  Tensor m = max_reduce(Tensor({2, 2}, {1, 5, 3, 2}), 1);
  EXPECT_EQ(m.shape(), (Shape{2}));
  EXPECT_EQ(m[0], 5.0);
  EXPECT_EQ(m[1], 3.0);
  EXPECT_DOUBLE_EQ(sigmoid(Tensor({1}, {0.0}))[0], 0.5);
}

TEST(Tensor, SigmoidGradient) {
  std::mt19937_64 rng(8);
  Tensor x = random_tensor({3, 3}, rng);
  auto r = testkit::gradcheck(
      [=] { return testkit::project(sigmoid(x), 2); }, {x});
  EXPECT_LE(r.max_rel_error, 1e-6) << r.worst;
}

TEST(Tensor, MaxReduceTieGoesToFirstIndex) {
  Tensor x({3}, {2.0, 7.0, 7.0}, true);
  backward(sum(max_reduce(x, 0)));
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 1.0);
  EXPECT_EQ(x.grad()[2], 0.0);
}

TEST(Tensor, BackwardSumGivesOnes) {
  Tensor p({2, 3}, 0.3, true);
  backward(sum(p));
  for (double g : p.grad())
    EXPECT_EQ(g, 1.0);
}

TEST(Tensor, BackwardSquareGivesTwoP) {
  std::mt19937_64 rng(1);
  Tensor p = random_tensor({5}, rng);
  backward(sum(mul(p, p)));
  for (std::size_t i = 0; i < 5; ++i)
    EXPECT_DOUBLE_EQ(p.grad()[i], 2.0 * p[i]);
}

TEST(Tensor, BackwardRejectsNonScalar) {
  Tensor p({2}, 1.0, true);
  EXPECT_THROW(backward(p), ContractError);
}

TEST(Tensor, RepeatedBackwardAccumulatesIntoLeaves) {
  Tensor p({3}, 2.0, true);
  Tensor loss = sum(scale(p, 3.0));
  backward(loss);
  backward(loss);
  for (double g : p.grad())
    EXPECT_EQ(g, 6.0);
  p.zero_grad();
  backward(loss);
  for (double g : p.grad())
    EXPECT_EQ(g, 3.0);
}

TEST(Tensor, SharedConsumerSumsContributions) {
  Tensor x({1}, 3.0, true);
  // f = x*x + 2x  ->  df/dx = 2x + 2
  Tensor f = add(mul(x, x), scale(x, 2.0));
  backward(sum(f));
  EXPECT_DOUBLE_EQ(x.grad()[0], 8.0);
}

TEST(Tensor, NoGradGuardRecordsNothing) {
  Tensor x({2}, 1.0, true);
  {
    NoGradGuard g;
    Tensor y = scale(x, 2.0);
    EXPECT_TRUE(y.is_leaf());
    EXPECT_FALSE(y.requires_grad());
  }
  Tensor z = scale(x, 2.0);
  EXPECT_FALSE(z.is_leaf());
}

TEST(Tensor, BceClosedForms) {
  std::vector<unsigned char> y = {1, 0, 0, 1};
  Tensor half({2, 2}, 0.5);
  EXPECT_NEAR(bce_sum(half, y).item(), 4.0 * std::log(2.0), 1e-12);
  Tensor perfect({2, 2}, {1.0, 0.0, 0.0, 1.0});
  EXPECT_NEAR(bce_sum(perfect, y, 1e-7).item(), -4.0 * std::log(1.0 - 1e-7),
              1e-12);
}

TEST(Tensor, BceFromLogitsMatchesProbabilityForm) {
  std::vector<unsigned char> y = {1, 0, 1, 0, 1, 0};
  Tensor z({6}, {-3.0, -1.0, 0.0, 0.5, 2.0, 4.0});
  EXPECT_NEAR(bce_sum_logits(z, y).item(), bce_sum(sigmoid(z), y).item(),
              1e-12);
  // Saturated on both sides: the clamp caps each term at -log(eps).
  Tensor far({2}, {40.0, -40.0});
  std::vector<unsigned char> wrong = {0, 1};
  EXPECT_NEAR(bce_sum_logits(far, wrong).item(), -2.0 * std::log(1e-7), 1e-9);
}

TEST(Tensor, NllOfUniformIsLogClasses) {
  Tensor z({1, 4}, 0.0);
  EXPECT_NEAR(nll_sum(log_softmax_rows(z), {2}).item(), std::log(4.0), 1e-12);
}

class GradientSuite : public ::testing::TestWithParam<std::size_t> {};

TEST_P(GradientSuite, MatchesFiniteDifferences) {
  static const auto cases = testkit::gradient_cases();
  const auto &c = cases.at(GetParam());
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto r = c.run(seed);
    EXPECT_GT(r.entries, 0u);
    EXPECT_LE(r.max_rel_error, 1e-4)
        << c.name << " seed " << seed << ": " << r.worst;
  }
}

INSTANTIATE_TEST_SUITE_P(
    AllOps, GradientSuite,
    ::testing::Range<std::size_t>(0, testkit::gradient_cases().size()),
    [](const auto &info) { return testkit::gradient_cases()[info.param].name; });
