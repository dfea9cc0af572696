#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "ptgcn/train.hpp"
#include "support/gradient_suite.hpp"

using namespace ptgcn;
using ptgcn::testkit::random_tensor;
using ptgcn::testkit::tiny_model_config;
using ptgcn::testkit::tiny_split;

namespace {

std::vector<double> random_scores(std::size_t n, std::mt19937_64 &rng) {
  std::vector<double> v(n * n);
  for (auto &x : v)
    x = std::uniform_real_distribution<double>(0.01, 0.99)(rng);
  return v;
}

} // namespace

TEST(EntityLoss, ClosedForms) {
  Sentence s{"0", {"a", "b", "c"}};
  auto gold = build_gold_tables(s, {{{0, 1}, {2, 2}, Sentiment::Pos}});
  Tensor half({3, 3}, 0.5);
  auto [Ls, Le] = entity_loss({half, half, {}, {}}, gold);
  EXPECT_NEAR(Ls.item(), 9.0 * std::log(2.0), 1e-12);
  EXPECT_NEAR(Le.item(), 9.0 * std::log(2.0), 1e-12);

  std::vector<double> ps(9), pe(9);
  for (std::size_t i = 0; i < 9; ++i) {
    ps[i] = gold.start[i] ? 1.0 : 0.0;
    pe[i] = gold.end[i] ? 1.0 : 0.0;
  }
  auto [Ls2, Le2] = entity_loss({Tensor({3, 3}, ps), Tensor({3, 3}, pe), {}, {}}, gold);
  EXPECT_NEAR(Ls2.item(), -9.0 * std::log(1.0 - kProbEps), 1e-12);
  EXPECT_LT(Le2.item(), 1e-5);
  EXPECT_THROW(entity_loss({Tensor({2, 2}, 0.5), Tensor({2, 2}, 0.5), {}, {}}, gold),
               ShapeError);
}

TEST(EntityLoss, LogitPathMatchesProbabilities) {
  Sentence s{"0", {"a", "b", "c"}};
  auto gold = build_gold_tables(s, {{{0, 1}, {2, 2}, Sentiment::Pos}});
  std::vector<double> z = {-2.0, 1.5, 0.3, 4.0, -0.7, 0.0, 2.2, -3.1, 0.9};
  Tensor zs({3, 3}, z), ze({3, 3}, z);
  auto [a1, b1] = entity_loss({sigmoid(zs), sigmoid(ze), zs, ze}, gold);
  auto [a2, b2] = entity_loss({sigmoid(zs), sigmoid(ze), {}, {}}, gold);
  EXPECT_NEAR(a1.item(), a2.item(), 1e-12);
  EXPECT_NEAR(b1.item(), b2.item(), 1e-12);
}

TEST(SampleRegions, EmptyWithoutGoldOrCandidates) {
  std::mt19937_64 rng(1);
  Sentence s{"0", {"a", "b", "c"}};
  auto gold = build_gold_tables(s, {});
  auto SS = random_scores(3, rng), SE = random_scores(3, rng);
  SamplingConfig cfg{0.3, false, 0};
  EXPECT_TRUE(sample_regions(gold, SS, SE, cfg).empty());
  ParameterSet ps;
  RegionClassifier head(ps, 2, rng);
  EXPECT_EQ(sentiment_loss({}, Tensor({3, 3, 2}), head).item(), 0.0);
}

TEST(SampleRegions, GoldOnly) {
  std::mt19937_64 rng(2);
  Sentence s{"0", {"a", "b", "c", "d"}};
  auto gold = build_gold_tables(s, {{{1, 1}, {3, 3}, Sentiment::Neu}});
  auto SS = random_scores(4, rng), SE = random_scores(4, rng);
  auto r = sample_regions(gold, SS, SE, {0.3, false, 0});
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0].region, (Region{1, 3, 1, 3}));
  EXPECT_EQ(r[0].label, 3u);
}

TEST(SampleRegions, NegativeCapKeepsTopByScoreProduct) {
  std::mt19937_64 rng(3);
  const std::size_t n = 5;
  Sentence s{"0", std::vector<std::string>(n, "w")};
  auto gold = build_gold_tables(s, {{{0, 1}, {2, 2}, Sentiment::Pos}});
  auto SS = random_scores(n, rng), SE = random_scores(n, rng);
  SamplingConfig cfg{1.0, true, 8};
  auto r = sample_regions(gold, SS, SE, cfg);

  // Oracle: every valid rectangle, gold removed, sorted by product.
  std::vector<std::pair<double, Region>> all;
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t c = a; c < n; ++c)
        for (std::size_t d = b; d < n; ++d) {
          Region reg{a, b, c, d};
          if (reg == Region{0, 2, 1, 2})
            continue;
          all.emplace_back(SS[a * n + b] * SE[c * n + d], reg);
        }
  ASSERT_GE(all.size(), 20u);
  std::sort(all.begin(), all.end(),
            [](const auto &x, const auto &y) { return x.first > y.first; });
  ASSERT_EQ(r.size(), 1u + 8u);
  EXPECT_EQ(r[0].label, 1u);
  for (std::size_t q = 0; q < 8; ++q) {
    EXPECT_EQ(r[1 + q].region, all[q].second);
    EXPECT_EQ(r[1 + q].label, 0u);
  }
}

TEST(SentimentLoss, UniformSoftmaxIsLogFour) {
  std::mt19937_64 rng(4);
  ParameterSet ps;
  RegionClassifier head(ps, 3, rng);
  std::fill(head.W.data().begin(), head.W.data().end(), 0.0);
  Tensor Cp = random_tensor({2, 2, 3}, rng, -1, 1, false);
  Tensor L2 = sentiment_loss({{{0, 0, 1, 1}, 2}}, Cp, head);
  EXPECT_NEAR(L2.item(), std::log(4.0), 1e-12);
}

TEST(CombineLosses, Arithmetic) {
  auto p = combine_losses(Tensor::scalar(1), Tensor::scalar(1), Tensor::scalar(2),
                          0.5);
  EXPECT_DOUBLE_EQ(p.L1.item(), 2.0);
  EXPECT_DOUBLE_EQ(p.L.item(), 2.0);
  auto q = combine_losses(Tensor::scalar(0.3), Tensor::scalar(0.4),
                          Tensor::scalar(9.0), 1.0);
  EXPECT_DOUBLE_EQ(q.L.item(), q.L1.item());
}

TEST(SentenceLoss, PartsAreConsistentAndNonNegative) {
  auto split = tiny_split();
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    PtGcnModel model(tiny_model_config(seed), model_vocabulary(split));
    for (const auto &s : split.sentences) {
      TrainConfig tc;
      tc.alpha = 0.3;
      auto p = sentence_loss(model, s, split.annotation(s.id).tables, tc);
      for (const auto *t : {&p.Ls, &p.Le, &p.L1, &p.L2, &p.L})
        EXPECT_GE(t->item(), 0.0);
      EXPECT_DOUBLE_EQ(p.L1.item(), p.Ls.item() + p.Le.item());
      EXPECT_NEAR(p.L.item(), 0.3 * p.L1.item() + 0.7 * p.L2.item(), 1e-12);
    }
  }
}

TEST(Optimizer, ZeroLearningRateLeavesParametersUnchanged) {
  auto split = tiny_split();
  PtGcnModel model(tiny_model_config(1), model_vocabulary(split));
  auto before = model.parameters().snapshot();
  TrainConfig tc;
  tc.lr = 0.0;
  for (auto kind : {OptimizerKind::Adam, OptimizerKind::Sgd}) {
    Optimizer opt(kind, 0.0);
    train_step(model, split, {0, 1}, opt, tc);
    EXPECT_EQ(model.parameters().snapshot(), before);
  }
}

TEST(Optimizer, UpdateRules) {
  ParameterSet ps;
  Tensor w = ps.add("w", {2});
  w.data()[0] = 1.0;
  w.data()[1] = -1.0;
  w.grad()[0] = 0.5;
  w.grad()[1] = -2.0;
  Optimizer sgd(OptimizerKind::Sgd, 0.1);
  sgd.step(ps);
  EXPECT_DOUBLE_EQ(w[0], 1.0 - 0.05);
  EXPECT_DOUBLE_EQ(w[1], -1.0 + 0.2);

  // First Adam step moves each weight by lr * g / (|g| + eps).
  w.data()[0] = 1.0;
  w.data()[1] = -1.0;
  Optimizer adam(OptimizerKind::Adam, 0.01);
  adam.step(ps);
  EXPECT_NEAR(w[0], 1.0 - 0.01 * 0.5 / (0.5 + 1e-8), 1e-15);
  EXPECT_NEAR(w[1], -1.0 + 0.01 * 2.0 / (2.0 + 1e-8), 1e-15);
}

TEST(Optimizer, FrozenParametersAreSkipped) {
  ParameterSet ps;
  Tensor w = ps.add("w", {1}, false);
  w.grad()[0] = 1.0;
  Optimizer sgd(OptimizerKind::Sgd, 0.5);
  sgd.step(ps);
  EXPECT_EQ(w[0], 0.0);
}

TEST(TrainStep, NonFiniteLossNamesSentence) {
  auto split = tiny_split();
  PtGcnModel model(tiny_model_config(1), model_vocabulary(split));
  auto &p = model.parameters().all();
  for (auto &param : p)
    if (param.name == "detect.start.b")
      param.tensor.data()[0] = std::numeric_limits<double>::quiet_NaN();
  Optimizer opt(OptimizerKind::Adam, 1e-3);
  try {
    train_step(model, split, {1}, opt, TrainConfig{});
    FAIL() << "expected NonFiniteLossError";
  } catch (const NonFiniteLossError &e) {
    EXPECT_EQ(e.sentence_id, "1");
    EXPECT_NE(std::string(e.what()).find("'1'"), std::string::npos);
  }
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.epochs = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.alpha = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c.alpha = 1.0;
  EXPECT_NO_THROW(c.validate());
  c.alpha = 1.1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.batch = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Fit, SelectsFirstBestEpoch) {
  EXPECT_EQ(select_best_epoch({0.1, 0.4, 0.4, 0.3}), 2u);
  EXPECT_EQ(select_best_epoch({0.0}), 1u);
  EXPECT_THROW(select_best_epoch({}), ContractError);
}

TEST(Fit, ErrorsOnBadConfig) {
  auto split = tiny_split();
  PtGcnModel model(tiny_model_config(1), model_vocabulary(split));
  TrainConfig tc;
  tc.epochs = 0;
  EXPECT_THROW(fit(model, split, split, tc), ConfigError);
  tc.epochs = 1;
  EXPECT_THROW(fit(model, split, DatasetSplit{}, tc), ConfigError);
}

TEST(Fit, ReproducibleAndRestoresBest) {
  auto split = tiny_split();
  TrainConfig tc;
  tc.epochs = 6;
  tc.batch = 1;
  tc.lr = 3e-3;
  std::vector<double> l1, l2;
  for (auto *traj : {&l1, &l2}) {
    PtGcnModel model(tiny_model_config(2), model_vocabulary(split));
    auto r = fit(model, split, split, tc);
    for (const auto &e : r.history)
      traj->push_back(e.train.L);
    ASSERT_EQ(r.history.size(), 6u);
    std::vector<double> f1;
    for (const auto &e : r.history)
      f1.push_back(e.dev.f1);
    EXPECT_EQ(r.best_epoch, select_best_epoch(f1));
    EXPECT_EQ(triplet_metrics(model.predict_split(split), gold_sets(split)).f1,
              r.best_f1);
  }
  EXPECT_EQ(l1, l2);
}

TEST(Fit, WritesCheckpointAndManifest) {
  auto split = tiny_split();
  auto dir = std::filesystem::temp_directory_path() / "ptgcn_fit_manifest";
  std::filesystem::remove_all(dir);
  PtGcnModel model(tiny_model_config(3), model_vocabulary(split));
  TrainConfig tc;
  tc.epochs = 2;
  FitOptions fo;
  fo.out_dir = dir;
  fo.manifest_extra["note"] = "unit";
  fit(model, split, split, tc, fo);
  ASSERT_TRUE(std::filesystem::exists(dir / "checkpoint.ptgc"));
  std::ifstream in(dir / "manifest.json");
  auto m = nlohmann::json::parse(in);
  EXPECT_EQ(m["note"], "unit");
  EXPECT_EQ(m["template_text"], kDefaultTemplate);
  EXPECT_EQ(m["epochs"].size(), 2u);
  EXPECT_EQ(m["model"]["dim"], 8);
  EXPECT_EQ(m["train"]["alpha"], 0.5);
  EXPECT_TRUE(m["epochs"][0]["dev"].contains("f1"));
  EXPECT_TRUE(m["epochs"][0]["train_loss"].contains("L2"));
  EXPECT_EQ(m["parameter_count"], model.parameters().scalar_count());

  PtGcnModel reloaded(tiny_model_config(99), model_vocabulary(split));
  reloaded.parameters().load((dir / "checkpoint.ptgc").string());
  EXPECT_EQ(reloaded.parameters().snapshot(), model.parameters().snapshot());
  std::filesystem::remove_all(dir);
}

TEST(Model, AblationWiring) {
  auto split = tiny_split();
  auto vocab = model_vocabulary(split);
  PtGcnModel full(tiny_model_config(1, TemplateMode::Full), vocab);
  PtGcnModel nosenti(tiny_model_config(1, TemplateMode::NoSenti), vocab);
  PtGcnModel single(tiny_model_config(1, TemplateMode::Single), vocab);
  PtGcnModel none(tiny_model_config(1, TemplateMode::None), vocab);
  EXPECT_EQ(full.channels().size(), 3u);
  EXPECT_EQ(nosenti.channels().size(), 3u);
  EXPECT_EQ(single.channels().size(), 1u);
  EXPECT_EQ(none.channels().size(), 0u);
  EXPECT_EQ(full.heads().width(), 24u);
  EXPECT_EQ(single.heads().width(), 8u);
  EXPECT_EQ(none.heads().width(), 8u);
  EXPECT_LT(none.parameters().scalar_count(), single.parameters().scalar_count());
  EXPECT_LT(single.parameters().scalar_count(), full.parameters().scalar_count());
  EXPECT_EQ(none.parameters().find("prompt.W"), nullptr);

  const auto &s = split.sentences[0];
  NoGradGuard g;
  auto fn = none.forward(s);
  EXPECT_FALSE(fn.prompt.has_value());
  EXPECT_EQ(fn.Cp.shape(), fn.C.shape());
  auto ff = full.forward(s);
  EXPECT_EQ(ff.prompt->P.shape(), (Shape{6, s.size()}));
  EXPECT_EQ(ff.Cp.shape(), (Shape{s.size(), s.size(), 24}));
  EXPECT_EQ(single.forward(s).prompt->P.shape(), (Shape{2, s.size()}));
}

TEST(Model, FrozenModeUsesStore) {
  auto split = tiny_split();
  ModelConfig mc = tiny_model_config(1);
  mc.encoder = EncoderMode::Frozen;
  PtGcnModel model(mc);
  EXPECT_EQ(model.tiny_encoder(), nullptr);
  EXPECT_THROW(model.forward(split.sentences[0]), ConfigError);
  EmbeddingStore store;
  std::mt19937_64 rng(1);
  for (const auto &s : split.sentences) {
    EmbeddingStore::Record r;
    r.n = s.size();
    r.d = 8;
    for (std::size_t i = 0; i < r.n * 8; ++i)
      r.H.push_back(std::uniform_real_distribution<float>(-1, 1)(rng));
    for (std::size_t i = 0; i < 6 * 8; ++i)
      r.tau.push_back(std::uniform_real_distribution<float>(-1, 1)(rng));
    store.insert(s.id, r);
  }
  model.set_embeddings(&store);
  TrainConfig tc;
  tc.epochs = 2;
  auto res = fit(model, split, split, tc);
  EXPECT_EQ(res.history.size(), 2u);
  for (const auto &p : model.parameters().all())
    EXPECT_EQ(p.name.rfind("encoder.", 0), std::string::npos);
}
