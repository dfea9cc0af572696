#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ptgcn/corpus.hpp"
#include "ptgcn/parameters.hpp"
#include "ptgcn/tensor.hpp"

namespace ptgcn {

/// H is n x d word states; tau holds one row per template mask slot, ordered
/// [pos_a, pos_o, neg_a, neg_o, neu_a, neu_o] (two rows in single-slot mode,
/// undefined when no template is used).
struct EncoderOutput {
  Tensor H;
  Tensor tau;
};

enum class TemplateMode { Full, NoSenti, Single, None };

inline std::string_view template_mode_name(TemplateMode m) {
  switch (m) {
  case TemplateMode::Full:
    return "full";
  case TemplateMode::NoSenti:
    return "no-senti";
  case TemplateMode::Single:
    return "single";
  case TemplateMode::None:
    return "none";
  }
  return "?";
}

inline std::optional<TemplateMode> parse_template_mode(std::string_view s) {
  if (s == "full")
    return TemplateMode::Full;
  if (s == "no-senti")
    return TemplateMode::NoSenti;
  if (s == "single")
    return TemplateMode::Single;
  if (s == "none")
    return TemplateMode::None;
  return std::nullopt;
}

inline constexpr const char *kDefaultTemplate =
    "aspect is [MASK] , opinion is [MASK] , sentiment is positive . "
    "aspect is [MASK] , opinion is [MASK] , sentiment is negative . "
    "aspect is [MASK] , opinion is [MASK] , sentiment is neutral .";

inline constexpr const char *kSingleTemplate =
    "aspect [MASK] , opinion [MASK] .";

inline constexpr const char *kMaskMarker = "[MASK]";

struct PromptTemplate {
  TemplateMode mode = TemplateMode::Full;
  std::string text;
  std::vector<std::string> tokens;
  std::vector<std::size_t> slots; // indices into tokens

  std::size_t slot_count() const { return slots.size(); }

  /// `full_text` overrides the full template; no-senti derives from it by
  /// dropping the three polarity words.
  static PromptTemplate make(TemplateMode mode,
                             const std::string &full_text = kDefaultTemplate) {
    PromptTemplate t;
    t.mode = mode;
    std::string src;
    std::size_t want = 0;
    switch (mode) {
    case TemplateMode::Full:
      src = full_text;
      want = 6;
      break;
    case TemplateMode::NoSenti:
      src = full_text;
      want = 6;
      break;
    case TemplateMode::Single:
      src = kSingleTemplate;
      want = 2;
      break;
    case TemplateMode::None:
      return t;
    }
    std::istringstream in(src);
    for (std::string w; in >> w;) {
      if (mode == TemplateMode::NoSenti &&
          (w == "positive" || w == "negative" || w == "neutral"))
        continue;
      if (w == kMaskMarker)
        t.slots.push_back(t.tokens.size());
      t.tokens.push_back(std::move(w));
    }
    for (std::size_t i = 0; i < t.tokens.size(); ++i)
      t.text += (i ? " " : "") + t.tokens[i];
    if (t.slots.size() != want)
      throw ConfigError("template '" + t.text + "' has " +
                        std::to_string(t.slots.size()) + " mask slots, mode " +
                        std::string(template_mode_name(mode)) + " needs " +
                        std::to_string(want));
    return t;
  }
};

inline std::string lowercase(std::string s) {
  for (auto &c : s)
    c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

class Vocabulary {
public:
  static constexpr std::size_t kPad = 0, kUnk = 1, kMask = 2, kSep = 3;

  Vocabulary() : words_{"<pad>", "<unk>", "<mask>", "<sep>"} { reindex(); }

  /// Specials, then the sorted lowercase words of `split` and `extra`.
  static Vocabulary build(const DatasetSplit &split,
                          const std::vector<std::string> &extra = {}) {
    std::set<std::string> all;
    for (const auto &s : split.sentences)
      for (const auto &w : s.words)
        all.insert(lowercase(w));
    for (const auto &w : extra)
      if (w != kMaskMarker)
        all.insert(lowercase(w));
    Vocabulary v;
    for (const auto &w : all)
      if (!v.index_.count(w))
        v.words_.push_back(w);
    v.reindex();
    return v;
  }

  std::size_t size() const { return words_.size(); }
  std::size_t id(const std::string &word) const {
    if (word == kMaskMarker)
      return kMask;
    auto it = index_.find(lowercase(word));
    return it == index_.end() ? kUnk : it->second;
  }
  const std::string &word(std::size_t id) const { return words_.at(id); }

private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < words_.size(); ++i)
      index_[words_[i]] = i;
  }
  std::vector<std::string> words_;
  std::map<std::string, std::size_t> index_;
};

struct EncoderConfig {
  std::size_t dim = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ffn_dim = 128;
  std::size_t max_positions = 160;
};

/// Small post-norm transformer over [sentence | <sep> | template].
class TinyEncoder {
public:
  template <class Rng>
  TinyEncoder(const EncoderConfig &cfg, const Vocabulary &vocab,
              ParameterSet &params, Rng &rng)
      : cfg_(cfg), vocab_(vocab) {
    if (cfg.dim % cfg.heads != 0)
      throw ConfigError("encoder dim must be divisible by heads");
    const std::size_t d = cfg.dim;
    tok_ = params.add_normal("encoder.tok_emb", {vocab.size(), d}, 0.1, rng);
    pos_ = params.add_normal("encoder.pos_emb", {cfg.max_positions, d}, 0.1,
                             rng);
    seg_ = params.add_normal("encoder.seg_emb", {2, d}, 0.1, rng);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      auto p = "encoder.layer" + std::to_string(l) + ".";
      Layer L;
      L.wq = params.add_xavier(p + "wq", {d, d}, d, d, rng);
      L.wk = params.add_xavier(p + "wk", {d, d}, d, d, rng);
      L.wv = params.add_xavier(p + "wv", {d, d}, d, d, rng);
      L.wo = params.add_xavier(p + "wo", {d, d}, d, d, rng);
      L.bo = params.add(p + "bo", {d});
      L.ln1_g = params.add(p + "ln1_g", {d});
      L.ln1_b = params.add(p + "ln1_b", {d});
      L.w1 = params.add_xavier(p + "ffn_w1", {cfg.ffn_dim, d}, d, cfg.ffn_dim,
                               rng);
      L.b1 = params.add(p + "ffn_b1", {cfg.ffn_dim});
      L.w2 = params.add_xavier(p + "ffn_w2", {d, cfg.ffn_dim}, cfg.ffn_dim, d,
                               rng);
      L.b2 = params.add(p + "ffn_b2", {d});
      L.ln2_g = params.add(p + "ln2_g", {d});
      L.ln2_b = params.add(p + "ln2_b", {d});
      std::fill(L.ln1_g.data().begin(), L.ln1_g.data().end(), 1.0);
      std::fill(L.ln2_g.data().begin(), L.ln2_g.data().end(), 1.0);
      layers_.push_back(std::move(L));
    }
  }

  const EncoderConfig &config() const { return cfg_; }
  const Vocabulary &vocabulary() const { return vocab_; }

  EncoderOutput encode(const Sentence &s, const PromptTemplate &tmpl) const {
    const std::size_t n = s.size();
    std::vector<std::size_t> ids, segs;
    for (const auto &w : s.words) {
      ids.push_back(vocab_.id(w));
      segs.push_back(0);
    }
    std::vector<std::size_t> slot_rows;
    if (!tmpl.tokens.empty()) {
      ids.push_back(Vocabulary::kSep);
      segs.push_back(1);
      for (std::size_t k = 0; k < tmpl.tokens.size(); ++k) {
        ids.push_back(vocab_.id(tmpl.tokens[k]));
        segs.push_back(1);
      }
      for (auto slot : tmpl.slots)
        slot_rows.push_back(n + 1 + slot);
    }
    const std::size_t len = ids.size();
    if (len > cfg_.max_positions)
      throw ValidationError("sentence '" + s.id + "' plus template exceeds " +
                            std::to_string(cfg_.max_positions) + " positions");
    std::vector<std::size_t> positions(len);
    for (std::size_t i = 0; i < len; ++i)
      positions[i] = i;

    Tensor x = add(add(select_rows(tok_, ids), select_rows(pos_, positions)),
                   select_rows(seg_, segs));
    for (const auto &L : layers_)
      x = layer(x, L);

    std::vector<std::size_t> word_rows(n);
    for (std::size_t i = 0; i < n; ++i)
      word_rows[i] = i;
    EncoderOutput out;
    out.H = select_rows(x, word_rows);
    if (!slot_rows.empty())
      out.tau = select_rows(x, slot_rows);
    return out;
  }

private:
  struct Layer {
    Tensor wq, wk, wv, wo, bo, ln1_g, ln1_b, w1, b1, w2, b2, ln2_g, ln2_b;
  };

  Tensor layer(const Tensor &x, const Layer &L) const {
    const std::size_t dh = cfg_.dim / cfg_.heads;
    Tensor q = matmul_nt(x, L.wq), k = matmul_nt(x, L.wk),
           v = matmul_nt(x, L.wv);
    std::vector<Tensor> heads;
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
      Tensor qh = slice_lastdim(q, h * dh, dh);
      Tensor kh = slice_lastdim(k, h * dh, dh);
      Tensor vh = slice_lastdim(v, h * dh, dh);
      Tensor att = softmax_rows(scale(matmul_nt(qh, kh), 1.0 / std::sqrt(double(dh))));
      heads.push_back(matmul(att, vh));
    }
    Tensor attn = add_bias(matmul_nt(concat_lastdim(heads), L.wo), L.bo);
    Tensor y = layer_norm(add(x, attn), L.ln1_g, L.ln1_b);
    Tensor ff = add_bias(
        matmul_nt(relu(add_bias(matmul_nt(y, L.w1), L.b1)), L.w2), L.b2);
    return layer_norm(add(y, ff), L.ln2_g, L.ln2_b);
  }

  EncoderConfig cfg_;
  Vocabulary vocab_;
  Tensor tok_, pos_, seg_;
  std::vector<Layer> layers_;
};

/// Frozen per-sentence encoder states, file format PTGE0001:
///   "PTGE0001" then per record until EOF: u32 id length, id bytes,
///   u32 n, u32 d, n*d f32 (H), 6*d f32 (tau); little-endian.
class EmbeddingStore {
public:
  struct Record {
    std::size_t n = 0, d = 0;
    std::vector<double> H;
    std::vector<double> tau;
  };

  static constexpr std::size_t kSlots = 6;

  void insert(const std::string &id, Record r) {
    if (r.H.size() != r.n * r.d || r.tau.size() != kSlots * r.d)
      throw ValidationError("embedding record '" + id + "' has wrong sizes");
    records_[id] = std::move(r);
  }

  const Record *find(const std::string &id) const {
    auto it = records_.find(id);
    return it == records_.end() ? nullptr : &it->second;
  }
  std::size_t size() const { return records_.size(); }
  const std::map<std::string, Record> &records() const { return records_; }

  static EmbeddingStore load(std::istream &in) {
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, "PTGE0001", 8) != 0)
      throw ValidationError("not a PTGE0001 embedding store");
    EmbeddingStore store;
    while (in.peek() != std::char_traits<char>::eof()) {
      auto len = get_u32(in);
      std::string id(len, '\0');
      in.read(id.data(), len);
      Record r;
      r.n = get_u32(in);
      r.d = get_u32(in);
      if (!in || r.n == 0 || r.d == 0)
        throw ValidationError("truncated or empty embedding record");
      r.H = get_floats(in, r.n * r.d);
      r.tau = get_floats(in, kSlots * r.d);
      if (!in)
        throw ValidationError("truncated embedding record '" + id + "'");
      store.insert(id, std::move(r));
    }
    return store;
  }

  static EmbeddingStore load(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
      throw LookupError("cannot open embedding store '" + path + "'");
    return load(in);
  }

  void save(std::ostream &out) const {
    out.write("PTGE0001", 8);
    for (const auto &[id, r] : records_) {
      put_u32(out, static_cast<std::uint32_t>(id.size()));
      out.write(id.data(), static_cast<std::streamsize>(id.size()));
      put_u32(out, static_cast<std::uint32_t>(r.n));
      put_u32(out, static_cast<std::uint32_t>(r.d));
      put_floats(out, r.H);
      put_floats(out, r.tau);
    }
  }

  void save(const std::string &path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out)
      throw Error("cannot write embedding store '" + path + "'");
    save(out);
  }

private:
  static std::uint32_t get_u32(std::istream &in) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char *>(&v), 4);
    return v;
  }
  static void put_u32(std::ostream &out, std::uint32_t v) {
    out.write(reinterpret_cast<const char *>(&v), 4);
  }
  static std::vector<double> get_floats(std::istream &in, std::size_t count) {
    std::vector<float> f(count);
    in.read(reinterpret_cast<char *>(f.data()),
            static_cast<std::streamsize>(count * sizeof(float)));
    return {f.begin(), f.end()};
  }
  static void put_floats(std::ostream &out, const std::vector<double> &v) {
    std::vector<float> f(v.begin(), v.end());
    out.write(reinterpret_cast<const char *>(f.data()),
              static_cast<std::streamsize>(f.size() * sizeof(float)));
  }

  std::map<std::string, Record> records_;
};

/// Stored states as non-trainable leaves. `slots` selects how many leading
/// tau rows to expose (6, 2, or 0).
inline EncoderOutput encode_frozen(const Sentence &s,
                                   const EmbeddingStore &store,
                                   std::size_t expected_dim,
                                   std::size_t slots = 6) {
  const auto *r = store.find(s.id);
  if (!r)
    throw LookupError("sentence '" + s.id + "' not in embedding store");
  if (r->n != s.size())
    throw ValidationError("embedding store has n=" + std::to_string(r->n) +
                          " for sentence '" + s.id + "' of " +
                          std::to_string(s.size()) + " words");
  if (r->d != expected_dim)
    throw ValidationError("embedding store has d=" + std::to_string(r->d) +
                          ", model expects " + std::to_string(expected_dim));
  EncoderOutput out;
  out.H = Tensor({r->n, r->d}, r->H);
  if (slots > 0)
    out.tau = Tensor({slots, r->d},
                     std::vector<double>(r->tau.begin(),
                                         r->tau.begin() + slots * r->d));
  return out;
}

} // namespace ptgcn
