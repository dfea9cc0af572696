#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ptgcn/corpus.hpp"
#include "ptgcn/decoder.hpp"
#include "ptgcn/eval.hpp"
#include "ptgcn/model.hpp"
#include "ptgcn/tensor.hpp"

namespace ptgcn {

enum class OptimizerKind { Adam, Sgd };

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch = 4;
  /// 3e-4 for Adam; 1e-3 suits plain SGD on the tiny encoder.
  double lr = 3e-4;
  double alpha = 0.5;
  std::size_t max_negatives = 24;
  OptimizerKind optimizer = OptimizerKind::Adam;
  std::uint64_t seed = 1;
  /// Stop once dev F1 reaches this value; 0 runs every epoch.
  double target_f1 = 0.0;

  void validate() const {
    if (epochs == 0)
      throw ConfigError("epochs must be positive");
    if (batch == 0)
      throw ConfigError("batch size must be positive");
    if (!(alpha > 0.0 && alpha <= 1.0))
      throw ConfigError("alpha must lie in (0, 1]");
    if (!(lr >= 0.0) || !std::isfinite(lr))
      throw ConfigError("learning rate must be a non-negative number");
  }
};

/// L1 = Ls + Le and L = alpha L1 + (1 - alpha) L2, all scalar tensors.
struct LossParts {
  Tensor Ls, Le, L1, L2, L;
  double alpha = 0.5;
};

/// Plain numbers for logging, summed over a batch or epoch.
struct LossValues {
  double Ls = 0, Le = 0, L1 = 0, L2 = 0, L = 0;

  LossValues &operator+=(const LossParts &p) {
    Ls += p.Ls.item();
    Le += p.Le.item();
    L1 += p.L1.item();
    L2 += p.L2.item();
    L += p.L.item();
    return *this;
  }
  LossValues &operator+=(const LossValues &o) {
    Ls += o.Ls;
    Le += o.Le;
    L1 += o.L1;
    L2 += o.L2;
    L += o.L;
    return *this;
  }
};

inline constexpr double kProbEps = 1e-7;

/// Summed cell-wise binary cross-entropy of both vertex tables.
inline std::pair<Tensor, Tensor> entity_loss(const ScoreTables &scores,
                                             const GoldTables &gold) {
  if (scores.SS.size() != gold.n * gold.n || scores.SE.size() != gold.n * gold.n)
    throw ShapeError("entity_loss: score tables do not match the gold size");
  auto term = [](const Tensor &probs, const Tensor &logits,
                 const std::vector<unsigned char> &target) {
    return logits.defined() ? bce_sum_logits(logits, target, kProbEps)
                            : bce_sum(probs, target, kProbEps);
  };
  return {term(scores.SS, scores.ZS, gold.start),
          term(scores.SE, scores.ZE, gold.end)};
}

struct LabeledRegion {
  Region region;
  std::size_t label = 0; // 0 Padding, else Sentiment value
  bool operator==(const LabeledRegion &) const = default;
};

struct SamplingConfig {
  double k = 0.3;
  bool topk_literal = false;
  std::size_t max_negatives = 24;
};

/// Gold regions with their sentiment, then detector regions that are not
/// gold, labeled Padding and capped by descending vertex-score product.
inline std::vector<LabeledRegion>
sample_regions(const GoldTables &gold, std::span<const double> SS,
               std::span<const double> SE, const SamplingConfig &cfg) {
  const std::size_t n = gold.n;
  std::vector<LabeledRegion> out;
  std::set<Region> gold_set;
  for (const auto &g : gold.regions)
    if (gold_set.insert(g.region).second)
      out.push_back({g.region, static_cast<std::size_t>(g.sentiment)});

  auto starts = topk_candidates(SS, n, cfg.k, cfg.topk_literal);
  auto ends = topk_candidates(SE, n, cfg.k, cfg.topk_literal);
  std::vector<std::pair<double, Region>> negatives;
  for (const auto &r : candidate_regions(starts, ends))
    if (!gold_set.count(r))
      negatives.emplace_back(SS[r.a * n + r.b] * SE[r.c * n + r.d], r);
  std::stable_sort(negatives.begin(), negatives.end(),
                   [](const auto &x, const auto &y) { return x.first > y.first; });
  if (negatives.size() > cfg.max_negatives)
    negatives.resize(cfg.max_negatives);
  for (const auto &[score, r] : negatives)
    out.push_back({r, 0});
  return out;
}

/// Summed 4-way cross-entropy over the regions; zero for an empty list.
inline Tensor sentiment_loss(const std::vector<LabeledRegion> &regions,
                             const Tensor &Cp, const RegionClassifier &head) {
  if (regions.empty())
    return Tensor::scalar(0.0);
  std::vector<Region> rs;
  std::vector<std::size_t> labels;
  for (const auto &r : regions) {
    rs.push_back(r.region);
    labels.push_back(r.label);
  }
  return nll_sum(log_softmax_rows(head.logits(Cp, rs)), labels);
}

inline LossParts combine_losses(Tensor Ls, Tensor Le, Tensor L2, double alpha) {
  LossParts p;
  p.alpha = alpha;
  p.Ls = std::move(Ls);
  p.Le = std::move(Le);
  p.L2 = std::move(L2);
  p.L1 = add(p.Ls, p.Le);
  p.L = alpha == 1.0 ? scale(p.L1, 1.0)
                     : add(scale(p.L1, alpha), scale(p.L2, 1.0 - alpha));
  return p;
}

inline LossParts sentence_loss(const PtGcnModel &model, const Sentence &s,
                               const GoldTables &gold, const TrainConfig &cfg) {
  Forward f = model.forward(s);
  auto [Ls, Le] = entity_loss(f.scores, gold);
  SamplingConfig sc{model.config().k, model.config().topk_literal,
                    cfg.max_negatives};
  auto regions = sample_regions(gold, f.scores.SS.data(), f.scores.SE.data(), sc);
  Tensor L2 = sentiment_loss(regions, f.Cp, model.classifier());
  return combine_losses(std::move(Ls), std::move(Le), std::move(L2), cfg.alpha);
}

/// Adaptive-moment update (0.9 / 0.999, eps 1e-8) or plain gradient descent.
class Optimizer {
public:
  Optimizer(OptimizerKind kind, double lr) : kind_(kind), lr_(lr) {}

  void step(ParameterSet &params) {
    auto &all = params.all();
    if (m_.empty()) {
      for (const auto &p : all) {
        m_.emplace_back(p.tensor.size(), 0.0);
        v_.emplace_back(p.tensor.size(), 0.0);
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, double(t_));
    const double c2 = 1.0 - std::pow(kBeta2, double(t_));
    for (std::size_t k = 0; k < all.size(); ++k) {
      auto &p = all[k];
      if (!p.trainable || !p.tensor.has_grad())
        continue;
      auto w = p.tensor.data();
      auto g = p.tensor.grad();
      if (kind_ == OptimizerKind::Sgd) {
        for (std::size_t i = 0; i < w.size(); ++i)
          w[i] -= lr_ * g[i];
        continue;
      }
      auto &m = m_[k];
      auto &v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * g[i];
        v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * g[i] * g[i];
        w[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + kEps);
      }
    }
  }

private:
  static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  OptimizerKind kind_;
  double lr_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// One optimization step over a batch: accumulate gradients of every
/// sentence loss, update, zero gradients.
inline LossValues train_step(PtGcnModel &model, const DatasetSplit &split,
                             const std::vector<std::size_t> &batch,
                             Optimizer &opt, const TrainConfig &cfg) {
  LossValues total;
  for (auto idx : batch) {
    const auto &s = split.sentences[idx];
    LossParts parts = sentence_loss(model, s, split.annotation(s.id).tables, cfg);
    if (!std::isfinite(parts.L.item()))
      throw NonFiniteLossError(s.id);
    backward(parts.L);
    total += parts;
  }
  opt.step(model.parameters());
  model.parameters().zero_grad();
  return total;
}

struct EpochRecord {
  std::size_t epoch = 0; // 1-based
  LossValues train;
  MetricReport dev;
  double seconds = 0.0;
};

struct FitResult {
  std::size_t best_epoch = 0;
  double best_f1 = -1.0;
  std::vector<EpochRecord> history;
  std::vector<std::vector<double>> best_parameters;
};

struct FitOptions {
  /// When set, checkpoint.ptgc and manifest.json are written here.
  std::optional<std::filesystem::path> out_dir;
  /// Extra manifest fields (resolved config echo, dataset hashes, ...).
  nlohmann::json manifest_extra = nlohmann::json::object();
  std::function<void(const EpochRecord &)> on_epoch;
};

inline nlohmann::json to_json(const LossValues &v) {
  return {{"Ls", v.Ls}, {"Le", v.Le}, {"L1", v.L1}, {"L2", v.L2}, {"L", v.L}};
}

inline nlohmann::json to_json(const TrainConfig &c) {
  return {{"epochs", c.epochs},
          {"batch", c.batch},
          {"lr", c.lr},
          {"alpha", c.alpha},
          {"max_negatives", c.max_negatives},
          {"optimizer", c.optimizer == OptimizerKind::Adam ? "adam" : "sgd"},
          {"seed", c.seed},
          {"target_f1", c.target_f1}};
}

inline nlohmann::json to_json(const ModelConfig &c) {
  return {{"encoder", c.encoder == EncoderMode::Tiny ? "tiny" : "frozen"},
          {"template", template_mode_name(c.template_mode)},
          {"dim", c.dim},
          {"tensor_width", c.tensor_width},
          {"gcn_layers", c.gcn_layers},
          {"encoder_layers", c.encoder_layers},
          {"encoder_heads", c.encoder_heads},
          {"encoder_ffn", c.encoder_ffn},
          {"swap_axes", c.swap_axes},
          {"topk_literal", c.topk_literal},
          {"k", c.k},
          {"seed", c.seed}};
}

/// Trains with per-epoch dev evaluation and keeps the parameters of the
/// first epoch attaining the best dev triplet F1. The model ends up holding
/// those parameters.
inline FitResult fit(PtGcnModel &model, const DatasetSplit &train,
                     const DatasetSplit &dev, const TrainConfig &cfg,
                     const FitOptions &opts = {}) {
  cfg.validate();
  if (dev.size() == 0)
    throw ConfigError("dev split is empty");
  if (train.size() == 0)
    throw ConfigError("train split is empty");

  Optimizer opt(cfg.optimizer, cfg.lr);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  const auto dev_gold = gold_sets(dev);

  FitResult result;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng() % i]);
    EpochRecord rec;
    rec.epoch = epoch;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch) {
      std::vector<std::size_t> batch(
          order.begin() + static_cast<std::ptrdiff_t>(b),
          order.begin() +
              static_cast<std::ptrdiff_t>(std::min(order.size(), b + cfg.batch)));
      rec.train += train_step(model, train, batch, opt, cfg);
    }
    rec.dev = triplet_metrics(model.predict_split(dev), dev_gold);
    rec.seconds = std::chrono::duration<double>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
    if (rec.dev.f1 > result.best_f1) {
      result.best_f1 = rec.dev.f1;
      result.best_epoch = epoch;
      result.best_parameters = model.parameters().snapshot();
    }
    result.history.push_back(rec);
    if (opts.on_epoch)
      opts.on_epoch(rec);
    if (cfg.target_f1 > 0.0 && rec.dev.f1 >= cfg.target_f1)
      break;
  }
  model.parameters().restore(result.best_parameters);

  if (opts.out_dir) {
    std::filesystem::create_directories(*opts.out_dir);
    model.parameters().save((*opts.out_dir / "checkpoint.ptgc").string());
    nlohmann::json m = opts.manifest_extra;
    m["model"] = to_json(model.config());
    m["train"] = to_json(cfg);
    m["template_text"] = model.prompt_template().text;
    m["parameter_count"] = model.parameters().scalar_count();
    m["selected_epoch"] = result.best_epoch;
    m["selected_dev_f1"] = result.best_f1;
    auto &traj = m["epochs"] = nlohmann::json::array();
    for (const auto &r : result.history)
      traj.push_back({{"epoch", r.epoch},
                      {"train_loss", to_json(r.train)},
                      {"dev", to_json(r.dev)},
                      {"seconds", r.seconds}});
    std::ofstream((*opts.out_dir / "manifest.json").string()) << m.dump(2)
                                                              << '\n';
  }
  return result;
}

/// First index of the maximum, the epoch-selection rule of `fit`.
inline std::size_t select_best_epoch(const std::vector<double> &dev_f1) {
  if (dev_f1.empty())
    throw ContractError("no epochs to select from");
  return static_cast<std::size_t>(
             std::max_element(dev_f1.begin(), dev_f1.end()) - dev_f1.begin()) +
         1;
}

} // namespace ptgcn
