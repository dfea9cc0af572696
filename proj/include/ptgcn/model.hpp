#pragma once

#include <chrono>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "ptgcn/corpus.hpp"
#include "ptgcn/decoder.hpp"
#include "ptgcn/encoder.hpp"
#include "ptgcn/grid.hpp"
#include "ptgcn/parameters.hpp"
#include "ptgcn/prompt.hpp"

namespace ptgcn {

enum class EncoderMode { Tiny, Frozen };

struct ModelConfig {
  EncoderMode encoder = EncoderMode::Tiny;
  TemplateMode template_mode = TemplateMode::Full;
  std::string template_text = kDefaultTemplate;
  std::size_t dim = 64;
  std::size_t tensor_width = 32;
  std::size_t gcn_layers = 2;
  std::size_t encoder_layers = 2;
  std::size_t encoder_heads = 4;
  std::size_t encoder_ffn = 128;
  std::size_t max_positions = 160;
  bool swap_axes = false;
  bool topk_literal = false;
  double k = 0.3;
  std::uint64_t seed = 1;

  void validate() const {
    if (dim == 0 || tensor_width == 0)
      throw ConfigError("dim and tensor width must be positive");
    if (template_mode != TemplateMode::None && gcn_layers == 0)
      throw ConfigError("GCN layer count must be at least 1");
    if (!(k > 0.0 && k <= 1.0))
      throw ConfigError("k must lie in (0, 1]");
  }
};

/// Training-split words plus every template word, so that all template
/// modes share one vocabulary.
inline Vocabulary model_vocabulary(const DatasetSplit &train) {
  auto tokens = PromptTemplate::make(TemplateMode::Full).tokens;
  auto single = PromptTemplate::make(TemplateMode::Single).tokens;
  tokens.insert(tokens.end(), single.begin(), single.end());
  return Vocabulary::build(train, tokens);
}

/// Everything one forward pass produces; P is absent in None mode.
struct Forward {
  EncoderOutput encoded;
  std::optional<PromptScores> prompt;
  Tensor C;
  Tensor Cp;
  ScoreTables scores;
};

class PtGcnModel {
public:
  /// `vocab` is required in tiny mode and ignored in frozen mode.
  PtGcnModel(ModelConfig cfg, const Vocabulary &vocab = {})
      : cfg_(std::move(cfg)),
        template_(PromptTemplate::make(cfg_.template_mode, cfg_.template_text)) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    const std::size_t d = cfg_.dim;
    if (cfg_.encoder == EncoderMode::Tiny) {
      EncoderConfig ec;
      ec.dim = d;
      ec.layers = cfg_.encoder_layers;
      ec.heads = cfg_.encoder_heads;
      ec.ffn_dim = cfg_.encoder_ffn;
      ec.max_positions = cfg_.max_positions;
      encoder_.emplace(ec, vocab, params_, rng);
    }
    if (cfg_.template_mode != TemplateMode::None)
      projection_ = PromptProjection::create(params_, d, rng);
    table_.emplace(params_, d, cfg_.tensor_width, rng);
    switch (cfg_.template_mode) {
    case TemplateMode::Full:
    case TemplateMode::NoSenti:
      for (const char *name : {"pos", "neg", "neu"})
        channels_.emplace_back(params_, name, d, cfg_.gcn_layers, rng);
      break;
    case TemplateMode::Single:
      channels_.emplace_back(params_, "single", d, cfg_.gcn_layers, rng);
      break;
    case TemplateMode::None:
      break;
    }
    const std::size_t width = channels_.size() == 3 ? 3 * d : d;
    heads_.emplace(params_, width, rng);
    classifier_.emplace(params_, width, rng);
  }

  PtGcnModel(const PtGcnModel &) = delete;
  PtGcnModel &operator=(const PtGcnModel &) = delete;

  const ModelConfig &config() const { return cfg_; }
  const PromptTemplate &prompt_template() const { return template_; }
  ParameterSet &parameters() { return params_; }
  const ParameterSet &parameters() const { return params_; }
  const DetectionHeads &heads() const { return *heads_; }
  const RegionClassifier &classifier() const { return *classifier_; }
  const RelationTable &table() const { return *table_; }
  const std::vector<GcnChannel> &channels() const { return channels_; }
  const TinyEncoder *tiny_encoder() const {
    return encoder_ ? &*encoder_ : nullptr;
  }

  /// Frozen mode reads states from this store; it must outlive the calls.
  void set_embeddings(const EmbeddingStore *store) { store_ = store; }

  EncoderOutput encode(const Sentence &s) const {
    if (encoder_)
      return encoder_->encode(s, template_);
    if (!store_)
      throw ConfigError("frozen encoder mode needs an embedding store");
    return encode_frozen(s, *store_, cfg_.dim, template_.slot_count());
  }

  Forward forward(const Sentence &s) const {
    Forward f;
    f.encoded = encode(s);
    f.C = table_->build(f.encoded.H);
    if (channels_.empty()) {
      f.Cp = f.C;
    } else {
      f.prompt = attention_scores(f.encoded, *projection_);
      if (channels_.size() == 1) {
        f.Cp = channels_[0].forward(
            f.C, edge_weights(*f.prompt, Sentiment::Pos, cfg_.swap_axes));
      } else {
        std::vector<Tensor> outs;
        for (std::size_t c = 0; c < 3; ++c)
          outs.push_back(channels_[c].forward(
              f.C, edge_weights(*f.prompt, kSentiments[c], cfg_.swap_axes)));
        f.Cp = fuse_channels(outs[0], outs[1], outs[2]);
      }
    }
    f.scores = heads_->detect(f.Cp);
    return f;
  }

  std::vector<Triplet> decode(const Forward &f) const {
    auto starts = topk_candidates(f.scores.SS, cfg_.k, cfg_.topk_literal);
    auto ends = topk_candidates(f.scores.SE, cfg_.k, cfg_.topk_literal);
    return classify_regions(f.Cp, starts, ends, *classifier_);
  }

  std::vector<Triplet> predict(const Sentence &s) const {
    NoGradGuard no_grad;
    return decode(forward(s));
  }

  std::map<std::string, std::vector<Triplet>>
  predict_split(const DatasetSplit &split, double *mean_ms = nullptr) const {
    std::map<std::string, std::vector<Triplet>> out;
    auto t0 = std::chrono::steady_clock::now();
    for (const auto &s : split.sentences)
      out[s.id] = predict(s);
    if (mean_ms && !split.sentences.empty())
      *mean_ms = std::chrono::duration<double, std::milli>(
                     std::chrono::steady_clock::now() - t0)
                     .count() /
                 double(split.size());
    return out;
  }

  void set_k(double k) {
    if (!(k > 0.0 && k <= 1.0))
      throw ConfigError("k must lie in (0, 1]");
    cfg_.k = k;
  }

private:
  ModelConfig cfg_;
  PromptTemplate template_;
  ParameterSet params_;
  std::optional<TinyEncoder> encoder_;
  const EmbeddingStore *store_ = nullptr;
  std::optional<PromptProjection> projection_;
  std::optional<RelationTable> table_;
  std::vector<GcnChannel> channels_;
  std::optional<DetectionHeads> heads_;
  std::optional<RegionClassifier> classifier_;
};

} // namespace ptgcn
