#pragma once

#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "ptgcn/corpus.hpp"
#include "ptgcn/encoder.hpp"
#include "ptgcn/parameters.hpp"
#include "ptgcn/tensor.hpp"

namespace ptgcn {

/// One slot row per mask slot, each a distribution over the n words.
struct PromptScores {
  Tensor P;

  std::size_t words() const { return P.dim(1); }
  std::size_t rows() const { return P.dim(0); }

  /// Row of P holding the aspect slot of `s`; single-slot scores reuse row 0.
  std::size_t aspect_row(Sentiment s) const {
    return rows() == 2 ? 0 : 2 * (static_cast<std::size_t>(s) - 1);
  }
  std::size_t opinion_row(Sentiment s) const { return aspect_row(s) + 1; }
};

/// The single d x d bilinear map shared by every slot row.
struct PromptProjection {
  Tensor W;

  static PromptProjection create(ParameterSet &params, std::size_t d,
                                 std::mt19937_64 &rng) {
    return {params.add_xavier("prompt.W", {d, d}, d, d, rng)};
  }
};

/// P = softmax_rows(tau W H^T).
inline PromptScores attention_scores(const EncoderOutput &out,
                                     const PromptProjection &proj) {
  if (!out.tau.defined())
    throw ContractError("attention_scores: encoder output has no slot rows");
  const std::size_t d = out.H.dim(1);
  if (out.tau.dim(1) != d || proj.W.dim(0) != d || proj.W.dim(1) != d)
    throw ShapeError("attention_scores: hidden sizes disagree (H " +
                     shape_str(out.H.shape()) + ", tau " +
                     shape_str(out.tau.shape()) + ", W " +
                     shape_str(proj.W.shape()) + ")");
  return {softmax_rows(matmul_nt(matmul(out.tau, proj.W), out.H))};
}

/// n x n row-major map of sqrt(p_a[i] * p_o[j]); rows follow the aspect axis.
inline std::vector<double> heatmap(const PromptScores &scores,
                                   Sentiment channel) {
  const std::size_t n = scores.words();
  const double *pa = scores.P.data().data() + scores.aspect_row(channel) * n;
  const double *po = scores.P.data().data() + scores.opinion_row(channel) * n;
  std::vector<double> m(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      m[i * n + j] = std::sqrt(pa[i] * po[j]);
  return m;
}

/// Header row carries the opinion-axis words, first column the aspect-axis
/// words; cells have six decimals.
inline void write_heatmap_csv(std::ostream &out, const Sentence &s,
                              const std::vector<double> &m) {
  const std::size_t n = s.size();
  auto quote = [](const std::string &w) {
    if (w.find_first_of(",\"") == std::string::npos)
      return w;
    std::string q = "\"";
    for (char c : w)
      q += c == '"' ? std::string("\"\"") : std::string(1, c);
    return q + "\"";
  };
  for (std::size_t j = 0; j < n; ++j)
    out << ',' << quote(s.words[j]);
  out << '\n';
  char buf[32];
  for (std::size_t i = 0; i < n; ++i) {
    out << quote(s.words[i]);
    for (std::size_t j = 0; j < n; ++j) {
      std::snprintf(buf, sizeof buf, "%.6f", m[i * n + j]);
      out << ',' << buf;
    }
    out << '\n';
  }
}

} // namespace ptgcn
