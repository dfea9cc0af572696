#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <utility>
#include <vector>

#include "ptgcn/corpus.hpp"
#include "ptgcn/parameters.hpp"
#include "ptgcn/tensor.hpp"

namespace ptgcn {

/// Upper-left (start) and lower-right (end) vertex scores, n x n in (0, 1).
struct ScoreTables {
  Tensor SS;
  Tensor SE;
  // Pre-sigmoid values; left empty when tables are built from probabilities.
  Tensor ZS;
  Tensor ZE;
};

using Cell = std::pair<std::size_t, std::size_t>;

/// Two parallel affine heads over C' followed by a sigmoid.
class DetectionHeads {
public:
  template <class Rng>
  DetectionHeads(ParameterSet &params, std::size_t width, Rng &rng)
      : width_(width) {
    start_w = params.add_xavier("detect.start.w", {1, width}, width, 1, rng);
    start_b = params.add("detect.start.b", {1});
    end_w = params.add_xavier("detect.end.w", {1, width}, width, 1, rng);
    end_b = params.add("detect.end.b", {1});
  }

  std::size_t width() const { return width_; }

  ScoreTables detect(const Tensor &Cp) const {
    if (Cp.rank() != 3 || Cp.dim(2) != width_)
      throw ShapeError("detect: C' must be n x n x " + std::to_string(width_) +
                       ", got " + shape_str(Cp.shape()));
    const std::size_t n = Cp.dim(0);
    Tensor flat = reshape(Cp, {n * n, width_});
    auto logits = [&](const Tensor &w, const Tensor &b) {
      return reshape(add_bias(matmul_nt(flat, w), b), {n, n});
    };
    Tensor zs = logits(start_w, start_b), ze = logits(end_w, end_b);
    return {sigmoid(zs), sigmoid(ze), zs, ze};
  }

  Tensor start_w, start_b, end_w, end_b;

private:
  std::size_t width_;
};

/// Number of candidates kept from an n x n table. The default reading keeps
/// ceil(k n) cells; `literal` keeps ceil(k n^2).
inline std::size_t topk_count(std::size_t n, double k, bool literal = false) {
  if (!(k > 0.0 && k <= 1.0))
    throw ContractError("top-k threshold must lie in (0, 1]");
  double base = literal ? double(n) * double(n) : double(n);
  // The epsilon keeps products like 0.3 * 10 from rounding up to 4.
  auto m = static_cast<std::size_t>(std::ceil(k * base - 1e-9));
  return std::clamp<std::size_t>(m, 1, n * n);
}

/// Positions of the m best scores, best first, ties by (i, j) ascending.
inline std::vector<Cell> topk_candidates(std::span<const double> scores,
                                         std::size_t n, double k,
                                         bool literal = false) {
  if (scores.size() != n * n)
    throw ShapeError("topk_candidates: score table is not n x n");
  const std::size_t m = topk_count(n, k, literal);
  std::vector<std::size_t> idx(n * n);
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(m),
                    idx.end(), [&](std::size_t x, std::size_t y) {
                      if (scores[x] != scores[y])
                        return scores[x] > scores[y];
                      return x < y;
                    });
  std::vector<Cell> out;
  for (std::size_t r = 0; r < m; ++r)
    out.emplace_back(idx[r] / n, idx[r] % n);
  return out;
}

inline std::vector<Cell> topk_candidates(const Tensor &S, double k,
                                         bool literal = false) {
  return topk_candidates(S.data(), S.dim(0), k, literal);
}

/// Valid rectangles (a <= c, b <= d) in start-order x end-order, first
/// occurrence kept.
inline std::vector<Region> candidate_regions(const std::vector<Cell> &starts,
                                             const std::vector<Cell> &ends) {
  std::vector<Region> out;
  std::set<Region> seen;
  for (const auto &[a, b] : starts)
    for (const auto &[c, d] : ends)
      if (a <= c && b <= d) {
        Region r{a, b, c, d};
        if (seen.insert(r).second)
          out.push_back(r);
      }
  return out;
}

/// Rows [C'_ab ; C'_cd ; max over C'_{a:c, b:d}] for each region, m x 3w.
inline Tensor region_features(const Tensor &Cp,
                              const std::vector<Region> &regions) {
  if (Cp.rank() != 3 || Cp.dim(0) != Cp.dim(1))
    throw ShapeError("region_features: C' must be n x n x w");
  if (regions.empty())
    throw ContractError("region_features: no regions");
  const std::size_t n = Cp.dim(0), w = Cp.dim(2);
  for (const auto &r : regions)
    if (r.a > r.c || r.b > r.d || r.c >= n || r.d >= n)
      throw ContractError("region_features: invalid region");
  const std::size_t m = regions.size();
  const double *c = Cp.data().data();
  std::vector<double> out(m * 3 * w);
  // Flat source index of each output entry.
  auto src = std::make_shared<std::vector<std::size_t>>(m * 3 * w);
  for (std::size_t q = 0; q < m; ++q) {
    const auto &r = regions[q];
    double *o = out.data() + q * 3 * w;
    std::size_t *s = src->data() + q * 3 * w;
    for (std::size_t e = 0; e < w; ++e) {
      s[e] = (r.a * n + r.b) * w + e;
      s[w + e] = (r.c * n + r.d) * w + e;
      std::size_t best = s[e];
      for (std::size_t i = r.a; i <= r.c; ++i)
        for (std::size_t j = r.b; j <= r.d; ++j) {
          std::size_t at = (i * n + j) * w + e;
          if (c[at] > c[best])
            best = at;
        }
      s[2 * w + e] = best;
    }
    for (std::size_t e = 0; e < 3 * w; ++e)
      o[e] = c[s[e]];
  }
  return detail::make_result({m, 3 * w}, std::move(out), {Cp},
                             [src](detail::TensorImpl &self) {
                               if (double *g = detail::input_grad(self, 0))
                                 for (std::size_t k = 0; k < src->size(); ++k)
                                   g[(*src)[k]] += self.grad[k];
                             });
}

inline constexpr std::size_t kRegionClasses = 4; // Padding, Pos, Neg, Neu

class RegionClassifier {
public:
  template <class Rng>
  RegionClassifier(ParameterSet &params, std::size_t width, Rng &rng)
      : width_(width) {
    W = params.add_xavier("classify.W", {kRegionClasses, 3 * width}, 3 * width,
                          kRegionClasses, rng);
    b = params.add("classify.b", {kRegionClasses});
  }

  std::size_t width() const { return width_; }

  /// Unnormalized class scores, m x 4.
  Tensor logits(const Tensor &Cp, const std::vector<Region> &regions) const {
    return add_bias(matmul_nt(region_features(Cp, regions), W), b);
  }

  Tensor W, b;

private:
  std::size_t width_;
};

/// Classifies every valid start/end pairing and drops Padding. Argmax ties
/// resolve to the lower class index.
inline std::vector<Triplet> classify_regions(const Tensor &Cp,
                                             const std::vector<Cell> &starts,
                                             const std::vector<Cell> &ends,
                                             const RegionClassifier &head) {
  auto regions = candidate_regions(starts, ends);
  if (regions.empty())
    return {};
  NoGradGuard no_grad;
  Tensor z = softmax_rows(head.logits(Cp, regions));
  std::vector<Triplet> out;
  for (std::size_t q = 0; q < regions.size(); ++q) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < kRegionClasses; ++k)
      if (z[q * kRegionClasses + k] > z[q * kRegionClasses + best])
        best = k;
    if (best != 0)
      out.push_back(triplet_of(regions[q], static_cast<Sentiment>(best)));
  }
  return out;
}

} // namespace ptgcn
