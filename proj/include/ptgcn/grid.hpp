#pragma once

// Relation table C (n x n x d), its reading as a four-neighbour grid graph
// with prompt-derived arc weights, and the per-sentiment grid GCN.

#include <algorithm>
#include <random>
#include <string>
#include <vector>

#include "ptgcn/corpus.hpp"
#include "ptgcn/parameters.hpp"
#include "ptgcn/prompt.hpp"
#include "ptgcn/tensor.hpp"

namespace ptgcn {

/// Broadcasts H[n x d] to n x n x d: axis 0 gives out[i][j] = h_i, axis 1
/// gives out[i][j] = h_j.
inline Tensor pair_broadcast(const Tensor &H, std::size_t axis) {
  const std::size_t n = H.dim(0), d = H.dim(1);
  std::vector<double> out(n * n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      std::size_t src = axis == 0 ? i : j;
      std::copy_n(H.data().data() + src * d, d, out.data() + (i * n + j) * d);
    }
  return detail::make_result(
      {n, n, d}, std::move(out), {H}, [n, d, axis](detail::TensorImpl &self) {
        double *g = detail::input_grad(self, 0);
        if (!g)
          return;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            std::size_t src = axis == 0 ? i : j;
            for (std::size_t e = 0; e < d; ++e)
              g[src * d + e] += self.grad[(i * n + j) * d + e];
          }
      });
}

/// out[i][j] = element-wise max of h_min(i,j) .. h_max(i,j). The gradient
/// goes to the lowest index attaining the max.
inline Tensor span_max_pool(const Tensor &H) {
  const std::size_t n = H.dim(0), d = H.dim(1);
  std::vector<double> out(n * n * d);
  auto arg = std::make_shared<std::vector<std::size_t>>(n * n * d);
  const double *h = H.data().data();
  for (std::size_t lo = 0; lo < n; ++lo) {
    std::vector<double> best(h + lo * d, h + (lo + 1) * d);
    std::vector<std::size_t> at(d, lo);
    for (std::size_t hi = lo; hi < n; ++hi) {
      for (std::size_t e = 0; e < d; ++e)
        if (h[hi * d + e] > best[e]) {
          best[e] = h[hi * d + e];
          at[e] = hi;
        }
      for (std::size_t e = 0; e < d; ++e) {
        out[(lo * n + hi) * d + e] = out[(hi * n + lo) * d + e] = best[e];
        (*arg)[(lo * n + hi) * d + e] = (*arg)[(hi * n + lo) * d + e] = at[e];
      }
    }
  }
  return detail::make_result({n, n, d}, std::move(out), {H},
                             [d, arg](detail::TensorImpl &self) {
                               double *g = detail::input_grad(self, 0);
                               if (!g)
                                 return;
                               for (std::size_t k = 0; k < arg->size(); ++k)
                                 g[(*arg)[k] * d + k % d] += self.grad[k];
                             });
}

/// out[i][j][k] = h_i^T W1[:, k, :] h_j for W1 of shape d x t x d.
inline Tensor bilinear_table(const Tensor &H, const Tensor &W1) {
  const std::size_t n = H.dim(0), d = H.dim(1);
  if (W1.rank() != 3 || W1.dim(0) != d || W1.dim(2) != d)
    throw ShapeError("bilinear_table: W1 must be d x t x d, got " +
                     shape_str(W1.shape()));
  const std::size_t t = W1.dim(1);
  // U[i][k][e] = sum_f h_i[f] W1[f][k][e]
  auto U = std::make_shared<std::vector<double>>(n * t * d);
  detail::mmap(U->data(), n, t * d).noalias() =
      detail::cmap(H.data().data(), n, d) *
      detail::cmap(W1.data().data(), d, t * d);
  // V[(i,k)][j] = sum_e U[i][k][e] h_j[e]
  std::vector<double> V(n * t * n);
  detail::mmap(V.data(), n * t, n).noalias() =
      detail::cmap(U->data(), n * t, d) *
      detail::cmap(H.data().data(), n, d).transpose();
  std::vector<double> out(n * n * t);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < t; ++k)
      for (std::size_t j = 0; j < n; ++j)
        out[(i * n + j) * t + k] = V[(i * t + k) * n + j];
  return detail::make_result(
      {n, n, t}, std::move(out), {H, W1},
      [n, d, t, U](detail::TensorImpl &self) {
        const double *h = self.inputs[0]->data.data();
        const double *w = self.inputs[1]->data.data();
        double *gH = detail::input_grad(self, 0);
        double *gW = detail::input_grad(self, 1);
        std::vector<double> gV(n * t * n);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j)
            for (std::size_t k = 0; k < t; ++k)
              gV[(i * t + k) * n + j] = self.grad[(i * n + j) * t + k];
        auto GV = detail::cmap(gV.data(), n * t, n);
        // dU = dV H ;  dH (as right operand) += dV^T U
        std::vector<double> gU(n * t * d);
        detail::mmap(gU.data(), n * t, d).noalias() =
            GV * detail::cmap(h, n, d);
        if (gH)
          detail::mmap(gH, n, d).noalias() +=
              GV.transpose() * detail::cmap(U->data(), n * t, d);
        auto GU = detail::cmap(gU.data(), n, t * d);
        if (gH)
          detail::mmap(gH, n, d).noalias() +=
              GU * detail::cmap(w, d, t * d).transpose();
        if (gW)
          detail::mmap(gW, d, t * d).noalias() +=
              detail::cmap(h, n, d).transpose() * GU;
      });
}

/// Relation table builder: c_ij = relu(W2 [h_i ; h_j ; pool(h_i:j) ; h_i^T W1 h_j]).
class RelationTable {
public:
  template <class Rng>
  RelationTable(ParameterSet &params, std::size_t d, std::size_t t, Rng &rng)
      : d_(d), t_(t) {
    W1 = params.add_normal("table.W1", {d, t, d}, 1.0 / double(d), rng);
    W2 = params.add_xavier("table.W2", {d, 3 * d + t}, 3 * d + t, d, rng);
  }

  std::size_t feature_width() const { return 3 * d_ + t_; }

  /// Pair features h_ij flattened to n^2 x (3d + t).
  Tensor pair_features(const Tensor &H) const {
    const std::size_t n = H.dim(0);
    Tensor feats = concat_lastdim({pair_broadcast(H, 0), pair_broadcast(H, 1),
                                   span_max_pool(H), bilinear_table(H, W1)});
    return reshape(feats, {n * n, feature_width()});
  }

  Tensor build(const Tensor &H) const {
    if (H.rank() != 2 || H.dim(1) != d_)
      throw ShapeError("RelationTable::build: expected n x " +
                       std::to_string(d_) + ", got " + shape_str(H.shape()));
    const std::size_t n = H.dim(0);
    return reshape(relu(matmul_nt(pair_features(H), W2)), {n, n, d_});
  }

  Tensor W1, W2;

private:
  std::size_t d_, t_;
};

/// Outgoing arc weights of one sentiment graph. Node (i, j) sends
/// horizontal[j] to (i, j +/- 1) and vertical[i] to (i +/- 1, j).
struct EdgeWeights {
  Tensor horizontal;
  Tensor vertical;
};

enum class ArcDirection { Left, Right, Up, Down };

/// Literal reading: horizontal arcs carry the aspect-slot score of column j,
/// vertical arcs the opinion-slot score of row i. `swap_axes` exchanges the
/// roles (opinion score of column j, aspect score of row i).
inline EdgeWeights edge_weights(const PromptScores &scores, Sentiment channel,
                                bool swap_axes = false) {
  const std::size_t n = scores.words();
  auto row = [&](std::size_t r) {
    return reshape(select_rows(scores.P, {r}), {n});
  };
  Tensor a = row(scores.aspect_row(channel));
  Tensor o = row(scores.opinion_row(channel));
  return swap_axes ? EdgeWeights{o, a} : EdgeWeights{a, o};
}

/// Weight on the arc leaving (i, j) in `dir`, or nullopt past the border.
inline std::optional<double> outgoing_weight(const EdgeWeights &w,
                                             std::size_t i, std::size_t j,
                                             ArcDirection dir) {
  const std::size_t n = w.horizontal.size();
  switch (dir) {
  case ArcDirection::Left:
    if (j == 0)
      return std::nullopt;
    return w.horizontal[j];
  case ArcDirection::Right:
    if (j + 1 >= n)
      return std::nullopt;
    return w.horizontal[j];
  case ArcDirection::Up:
    if (i == 0)
      return std::nullopt;
    return w.vertical[i];
  case ArcDirection::Down:
    if (i + 1 >= n)
      return std::nullopt;
    return w.vertical[i];
  }
  return std::nullopt;
}

/// out_ij = g_ij + sum over in-neighbours k of r_k->ij g_k, where r_k->ij is
/// k's outgoing weight toward (i, j). Border nodes have fewer neighbours.
inline Tensor grid_aggregate(const Tensor &G, const Tensor &wh,
                             const Tensor &wv) {
  if (G.rank() != 3 || G.dim(0) != G.dim(1))
    throw ShapeError("grid_aggregate: G must be n x n x d, got " +
                     shape_str(G.shape()));
  const std::size_t n = G.dim(0), d = G.dim(2);
  if (wh.size() != n || wv.size() != n)
    throw ShapeError("grid_aggregate: arc weights must have n entries");
  const double *g = G.data().data();
  std::vector<double> out(g, g + n * n * d);
  auto axpy = [d](double *y, double a, const double *x) {
    for (std::size_t e = 0; e < d; ++e)
      y[e] += a * x[e];
  };
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double *o = out.data() + (i * n + j) * d;
      if (j > 0)
        axpy(o, wh[j - 1], g + (i * n + j - 1) * d);
      if (j + 1 < n)
        axpy(o, wh[j + 1], g + (i * n + j + 1) * d);
      if (i > 0)
        axpy(o, wv[i - 1], g + ((i - 1) * n + j) * d);
      if (i + 1 < n)
        axpy(o, wv[i + 1], g + ((i + 1) * n + j) * d);
    }
  return detail::make_result(
      {n, n, d}, std::move(out), {G, wh, wv}, [n, d](detail::TensorImpl &self) {
        const double *g = self.inputs[0]->data.data();
        const double *h = self.inputs[1]->data.data();
        const double *v = self.inputs[2]->data.data();
        double *gG = detail::input_grad(self, 0);
        double *gh = detail::input_grad(self, 1);
        double *gv = detail::input_grad(self, 2);
        auto visit = [&](const double *go, std::size_t src, double w,
                         double *gw) {
          if (gG)
            for (std::size_t e = 0; e < d; ++e)
              gG[src * d + e] += w * go[e];
          if (gw) {
            double s = 0.0;
            for (std::size_t e = 0; e < d; ++e)
              s += go[e] * g[src * d + e];
            *gw += s;
          }
        };
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const double *go = self.grad.data() + (i * n + j) * d;
            if (gG)
              for (std::size_t e = 0; e < d; ++e)
                gG[(i * n + j) * d + e] += go[e];
            if (j > 0)
              visit(go, i * n + j - 1, h[j - 1], gh ? gh + j - 1 : nullptr);
            if (j + 1 < n)
              visit(go, i * n + j + 1, h[j + 1], gh ? gh + j + 1 : nullptr);
            if (i > 0)
              visit(go, (i - 1) * n + j, v[i - 1], gv ? gv + i - 1 : nullptr);
            if (i + 1 < n)
              visit(go, (i + 1) * n + j, v[i + 1], gv ? gv + i + 1 : nullptr);
          }
      });
}

/// L grid-convolution layers g <- relu(W_g^l aggregate(g)) followed by an
/// affine d -> d output layer.
class GcnChannel {
public:
  template <class Rng>
  GcnChannel(ParameterSet &params, const std::string &name, std::size_t d,
             std::size_t layers, Rng &rng)
      : d_(d) {
    if (layers == 0)
      throw ConfigError("GCN needs at least one layer");
    for (std::size_t l = 0; l < layers; ++l)
      layer_weights.push_back(params.add_xavier(
          "gcn." + name + ".layer" + std::to_string(l) + ".W", {d, d}, d, d,
          rng));
    out_weight =
        params.add_xavier("gcn." + name + ".out.W", {d, d}, d, d, rng);
    out_bias = params.add("gcn." + name + ".out.b", {d});
  }

  Tensor forward(const Tensor &C, const EdgeWeights &w) const {
    const std::size_t n = C.dim(0);
    Tensor g = C;
    for (const auto &W : layer_weights) {
      Tensor agg = reshape(grid_aggregate(g, w.horizontal, w.vertical),
                           {n * n, d_});
      g = reshape(relu(matmul_nt(agg, W)), {n, n, d_});
    }
    Tensor flat = reshape(g, {n * n, d_});
    return reshape(add_bias(matmul_nt(flat, out_weight), out_bias), {n, n, d_});
  }

  std::vector<Tensor> layer_weights;
  Tensor out_weight, out_bias;

private:
  std::size_t d_;
};

/// C' = [pos | neg | neu] along the feature axis.
inline Tensor fuse_channels(const Tensor &pos, const Tensor &neg,
                            const Tensor &neu) {
  if (pos.shape() != neg.shape() || pos.shape() != neu.shape())
    throw ShapeError("fuse_channels: channel shapes differ");
  return concat_lastdim({pos, neg, neu});
}

} // namespace ptgcn
