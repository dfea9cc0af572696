#include <cmath>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "ptgcn/prompt.hpp"
#include "support/gradcheck.hpp"

using namespace ptgcn;
using ptgcn::testkit::random_tensor;

namespace {

// Tensor handles own their storage, so the set may go out of scope.
PromptProjection projection(std::size_t d, std::uint64_t seed) {
  ParameterSet ps;
  std::mt19937_64 rng(seed);
  return PromptProjection::create(ps, d, rng);
}

} // namespace

TEST(Prompt, ScoreShapeAndNormalization) {
  std::mt19937_64 rng(1);
  EncoderOutput out{random_tensor({9, 8}, rng), random_tensor({6, 8}, rng)};
  auto P = attention_scores(out, projection(8, 2));
  EXPECT_EQ(P.P.shape(), (Shape{6, 9}));
  for (std::size_t r = 0; r < 6; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < 9; ++j) {
      EXPECT_GT(P.P[r * 9 + j], 0.0);
      s += P.P[r * 9 + j];
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Prompt, ZeroProjectionIsUniform) {
  std::mt19937_64 rng(1);
  auto proj = projection(4, 3);
  std::fill(proj.W.data().begin(), proj.W.data().end(), 0.0);
  EncoderOutput out{random_tensor({5, 4}, rng), random_tensor({6, 4}, rng)};
  const auto P = attention_scores(out, proj);
  for (double v : P.P.data())
    EXPECT_NEAR(v, 0.2, 1e-15);
}

TEST(Prompt, SingleWordRowsAreOne) {
  std::mt19937_64 rng(1);
  EncoderOutput out{random_tensor({1, 4}, rng), random_tensor({6, 4}, rng)};
  const auto P = attention_scores(out, projection(4, 3));
  for (double v : P.P.data())
    EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(Prompt, DimensionMismatchIsShapeError) {
  std::mt19937_64 rng(1);
  EncoderOutput out{random_tensor({3, 4}, rng), random_tensor({6, 5}, rng)};
  EXPECT_THROW(attention_scores(out, projection(4, 1)), ShapeError);
  EncoderOutput none{random_tensor({3, 4}, rng), Tensor()};
  EXPECT_THROW(attention_scores(none, projection(4, 1)), ContractError);
}

TEST(Prompt, SlotRowMapping) {
  PromptScores six{Tensor({6, 3}, 1.0 / 3)};
  EXPECT_EQ(six.aspect_row(Sentiment::Pos), 0u);
  EXPECT_EQ(six.opinion_row(Sentiment::Pos), 1u);
  EXPECT_EQ(six.aspect_row(Sentiment::Neg), 2u);
  EXPECT_EQ(six.opinion_row(Sentiment::Neu), 5u);
  PromptScores two{Tensor({2, 3}, 1.0 / 3)};
  for (auto s : kSentiments) {
    EXPECT_EQ(two.aspect_row(s), 0u);
    EXPECT_EQ(two.opinion_row(s), 1u);
  }
}

TEST(Prompt, PermutingWordsPermutesColumns) {
  std::mt19937_64 rng(5);
  const std::size_t n = 6, d = 8;
  Tensor H = random_tensor({n, d}, rng, -1, 1, false);
  Tensor tau = random_tensor({6, d}, rng, -1, 1, false);
  std::vector<std::size_t> perm = {3, 0, 5, 1, 4, 2};
  Tensor Hp = select_rows(H, perm);
  auto proj = projection(d, 6);
  auto P = attention_scores({H, tau}, proj);
  auto Pp = attention_scores({Hp, tau}, proj);
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t j = 0; j < n; ++j)
      EXPECT_NEAR(Pp.P[r * n + j], P.P[r * n + perm[j]], 1e-14);
}

TEST(Heatmap, ProductFormula) {
  // n = 2; pos aspect row = [0.64, 0.36], pos opinion row = [0.25, 0.75].
  PromptScores s{Tensor({6, 2}, {0.64, 0.36, 0.25, 0.75, 0.5, 0.5, 0.5, 0.5,
                                 0.5, 0.5, 0.5, 0.5})};
  auto m = heatmap(s, Sentiment::Pos);
  EXPECT_NEAR(m[0 * 2 + 0], 0.4, 1e-15);
  EXPECT_NEAR(m[1 * 2 + 1], std::sqrt(0.36 * 0.75), 1e-15);
}

TEST(Heatmap, UniformAndRankOneProperties) {
  PromptScores u{Tensor({6, 4}, 0.25)};
  for (double v : heatmap(u, Sentiment::Neu))
    EXPECT_DOUBLE_EQ(v, 0.25);

  std::mt19937_64 rng(2);
  PromptScores p{softmax_rows(random_tensor({6, 5}, rng, -2, 2, false))};
  for (auto ch : kSentiments) {
    auto m = heatmap(p, ch);
    const double *pa = p.P.data().data() + p.aspect_row(ch) * 5;
    const double *po = p.P.data().data() + p.opinion_row(ch) * 5;
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        double v = m[i * 5 + j];
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        EXPECT_NEAR(v * v, pa[i] * po[j], 1e-15);
      }
  }
}

TEST(Heatmap, CsvLayout) {
  Sentence s{"0", {"good", "a,b"}};
  std::vector<double> m = {0.1, 0.2, 0.3, 1.0 / 3.0};
  std::ostringstream out;
  write_heatmap_csv(out, s, m);
  EXPECT_EQ(out.str(), ",good,\"a,b\"\n"
                       "good,0.100000,0.200000\n"
                       "\"a,b\",0.300000,0.333333\n");
}
