#pragma once

// Span-annotated triplet corpus: one sentence per line,
//   <words separated by spaces>####[([i, ...], [j, ...], 'POS'), ...]
// Sentence ids are the 0-based record index within the file.

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "ptgcn/errors.hpp"

namespace ptgcn {

enum class Sentiment { Pos = 1, Neg = 2, Neu = 3 };

inline constexpr Sentiment kSentiments[] = {Sentiment::Pos, Sentiment::Neg,
                                            Sentiment::Neu};

inline std::string_view sentiment_tag(Sentiment s) {
  switch (s) {
  case Sentiment::Pos:
    return "POS";
  case Sentiment::Neg:
    return "NEG";
  case Sentiment::Neu:
    return "NEU";
  }
  return "?";
}

inline std::optional<Sentiment> parse_sentiment_tag(std::string_view tag) {
  if (tag == "POS")
    return Sentiment::Pos;
  if (tag == "NEG")
    return Sentiment::Neg;
  if (tag == "NEU")
    return Sentiment::Neu;
  return std::nullopt;
}

/// Inclusive word-index range.
struct Span {
  std::size_t start = 0;
  std::size_t end = 0;

  std::size_t length() const { return end - start + 1; }
  auto operator<=>(const Span &) const = default;
};

struct Triplet {
  Span aspect;
  Span opinion;
  Sentiment sentiment = Sentiment::Pos;

  auto operator<=>(const Triplet &) const = default;
};

struct Sentence {
  std::string id;
  std::vector<std::string> words;

  std::size_t size() const { return words.size(); }
  bool operator==(const Sentence &) const = default;
};

/// Rectangle in the relation table: rows index aspect words, columns opinion
/// words. (a, b) is the upper-left vertex, (c, d) the lower-right one.
struct Region {
  std::size_t a = 0, b = 0, c = 0, d = 0;

  auto operator<=>(const Region &) const = default;
};

inline Region region_of(const Triplet &t) {
  return {t.aspect.start, t.opinion.start, t.aspect.end, t.opinion.end};
}

inline Triplet triplet_of(const Region &r, Sentiment s) {
  return {{r.a, r.c}, {r.b, r.d}, s};
}

struct GoldRegion {
  Region region;
  Sentiment sentiment;
  bool operator==(const GoldRegion &) const = default;
};

/// Binary vertex tables; row-major n*n.
struct GoldTables {
  std::size_t n = 0;
  std::vector<unsigned char> start;
  std::vector<unsigned char> end;
  std::vector<GoldRegion> regions;

  unsigned char start_at(std::size_t i, std::size_t j) const {
    return start[i * n + j];
  }
  unsigned char end_at(std::size_t i, std::size_t j) const {
    return end[i * n + j];
  }
};

struct Annotation {
  std::vector<Triplet> triplets;
  GoldTables tables;
};

struct DatasetSplit {
  std::vector<Sentence> sentences;
  std::map<std::string, Annotation> gold;

  std::size_t size() const { return sentences.size(); }
  const Annotation &annotation(const std::string &id) const {
    auto it = gold.find(id);
    if (it == gold.end())
      throw LookupError("no gold entry for sentence '" + id + "'");
    return it->second;
  }
  const Sentence *find(const std::string &id) const {
    for (const auto &s : sentences)
      if (s.id == id)
        return &s;
    return nullptr;
  }
};

struct CorpusOptions {
  // Tables are O(n^2 d) in memory.
  std::size_t max_words = 100;
};

inline GoldTables build_gold_tables(const Sentence &s,
                                    const std::vector<Triplet> &ts) {
  GoldTables g;
  g.n = s.size();
  g.start.assign(g.n * g.n, 0);
  g.end.assign(g.n * g.n, 0);
  for (const auto &t : ts) {
    g.start[t.aspect.start * g.n + t.opinion.start] = 1;
    g.end[t.aspect.end * g.n + t.opinion.end] = 1;
    g.regions.push_back({region_of(t), t.sentiment});
  }
  return g;
}

namespace detail {

class TripletListParser {
public:
  TripletListParser(std::string_view text, std::size_t line)
      : text_(text), line_(line) {}

  std::vector<std::tuple<std::vector<long>, std::vector<long>, std::string>>
  parse() {
    std::vector<std::tuple<std::vector<long>, std::vector<long>, std::string>>
        out;
    expect('[');
    if (peek() == ']') {
      ++pos_;
      finish();
      return out;
    }
    for (;;) {
      expect('(');
      auto aspect = index_list();
      expect(',');
      auto opinion = index_list();
      expect(',');
      auto tag = quoted();
      expect(')');
      out.emplace_back(std::move(aspect), std::move(opinion), std::move(tag));
      char c = peek();
      ++pos_;
      if (c == ']')
        break;
      if (c != ',')
        fail("expected ',' or ']' in triplet list");
    }
    finish();
    return out;
  }

private:
  void skip_ws() {
    while (pos_ < text_.size() &&
           std::isspace(static_cast<unsigned char>(text_[pos_])))
      ++pos_;
  }
  char peek() {
    skip_ws();
    return pos_ < text_.size() ? text_[pos_] : '\0';
  }
  void expect(char c) {
    if (peek() != c)
      fail(std::string("expected '") + c + "'");
    ++pos_;
  }
  void finish() {
    if (peek() != '\0')
      fail("trailing characters after triplet list");
  }
  [[noreturn]] void fail(const std::string &msg) {
    throw ParseError(line_, msg + " at column " + std::to_string(pos_));
  }

  std::vector<long> index_list() {
    std::vector<long> v;
    expect('[');
    if (peek() == ']') {
      ++pos_;
      return v;
    }
    for (;;) {
      skip_ws();
      std::size_t begin = pos_;
      if (pos_ < text_.size() && text_[pos_] == '-')
        ++pos_;
      while (pos_ < text_.size() &&
             std::isdigit(static_cast<unsigned char>(text_[pos_])))
        ++pos_;
      if (pos_ == begin)
        fail("expected integer index");
      v.push_back(std::stol(std::string(text_.substr(begin, pos_ - begin))));
      char c = peek();
      ++pos_;
      if (c == ']')
        return v;
      if (c != ',')
        fail("expected ',' or ']' in index list");
    }
  }

  std::string quoted() {
    char q = peek();
    if (q != '\'' && q != '"')
      fail("expected quoted sentiment tag");
    ++pos_;
    auto close = text_.find(q, pos_);
    if (close == std::string_view::npos)
      fail("unterminated sentiment tag");
    std::string tag(text_.substr(pos_, close - pos_));
    pos_ = close + 1;
    return tag;
  }

  std::string_view text_;
  std::size_t line_;
  std::size_t pos_ = 0;
};

inline Span to_span(const std::vector<long> &idx, std::size_t n,
                    std::size_t line) {
  if (idx.empty())
    throw ValidationError("line " + std::to_string(line) + ": empty span");
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || static_cast<std::size_t>(idx[k]) >= n)
      throw ValidationError("line " + std::to_string(line) + ": index " +
                            std::to_string(idx[k]) + " out of range for n=" +
                            std::to_string(n));
    if (k > 0 && idx[k] != idx[k - 1] + 1)
      throw ValidationError("line " + std::to_string(line) +
                            ": span indices are not contiguous ascending");
  }
  return {static_cast<std::size_t>(idx.front()),
          static_cast<std::size_t>(idx.back())};
}

} // namespace detail

/// Parses one corpus line. `line` is used only for error messages.
inline std::pair<Sentence, std::vector<Triplet>>
parse_line(std::string_view text, std::string id, std::size_t line = 0,
           const CorpusOptions &opts = {}) {
  auto sep = text.find("####");
  if (sep == std::string_view::npos)
    throw ParseError(line, "missing '####' separator");

  Sentence s;
  s.id = std::move(id);
  std::istringstream words{std::string(text.substr(0, sep))};
  for (std::string w; words >> w;)
    s.words.push_back(std::move(w));
  if (s.words.empty())
    throw ParseError(line, "empty sentence");
  if (s.words.size() > opts.max_words)
    throw ValidationError("line " + std::to_string(line) + ": sentence has " +
                          std::to_string(s.words.size()) +
                          " words, cap is " + std::to_string(opts.max_words));

  std::vector<Triplet> ts;
  auto raw = detail::TripletListParser(text.substr(sep + 4), line).parse();
  for (auto &[a, o, tag] : raw) {
    auto sentiment = parse_sentiment_tag(tag);
    if (!sentiment)
      throw ValidationError("line " + std::to_string(line) +
                            ": unknown sentiment tag '" + tag + "'");
    ts.push_back({detail::to_span(a, s.size(), line),
                  detail::to_span(o, s.size(), line), *sentiment});
  }
  return {std::move(s), std::move(ts)};
}

inline DatasetSplit parse_split(std::istream &in,
                                const CorpusOptions &opts = {}) {
  DatasetSplit split;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (!text.empty() && text.back() == '\r')
      text.pop_back();
    if (text.find_first_not_of(" \t") == std::string::npos)
      continue;
    auto id = std::to_string(split.sentences.size());
    auto [s, ts] = parse_line(text, id, line, opts);
    auto tables = build_gold_tables(s, ts);
    split.gold.emplace(id, Annotation{std::move(ts), std::move(tables)});
    split.sentences.push_back(std::move(s));
  }
  return split;
}

inline DatasetSplit parse_split(const std::string &path,
                                const CorpusOptions &opts = {}) {
  std::ifstream in(path);
  if (!in)
    throw LookupError("cannot open dataset file '" + path + "'");
  return parse_split(in, opts);
}

inline std::string format_triplets(const std::vector<Triplet> &ts) {
  std::string out = "[";
  auto indices = [](const Span &sp) {
    std::string r = "[";
    for (std::size_t i = sp.start; i <= sp.end; ++i) {
      if (i != sp.start)
        r += ", ";
      r += std::to_string(i);
    }
    return r + "]";
  };
  for (std::size_t k = 0; k < ts.size(); ++k) {
    if (k)
      out += ", ";
    out += "(" + indices(ts[k].aspect) + ", " + indices(ts[k].opinion) +
           ", '" + std::string(sentiment_tag(ts[k].sentiment)) + "')";
  }
  return out + "]";
}

inline std::string format_line(const Sentence &s,
                               const std::vector<Triplet> &ts) {
  std::string out;
  for (std::size_t i = 0; i < s.words.size(); ++i) {
    if (i)
      out += ' ';
    out += s.words[i];
  }
  return out + "####" + format_triplets(ts);
}

/// First `count` sentences of a seeded permutation, gold entries included.
template <class Rng>
DatasetSplit sample_split(const DatasetSplit &src, std::size_t count,
                          Rng &rng) {
  std::vector<std::size_t> order(src.size());
  for (std::size_t i = 0; i < order.size(); ++i)
    order[i] = i;
  for (std::size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[rng() % i]);
  order.resize(std::min(count, order.size()));
  std::sort(order.begin(), order.end());
  DatasetSplit out;
  for (auto i : order) {
    const auto &s = src.sentences[i];
    out.sentences.push_back(s);
    out.gold.emplace(s.id, src.annotation(s.id));
  }
  return out;
}

} // namespace ptgcn
