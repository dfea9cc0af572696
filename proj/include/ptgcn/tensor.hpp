#pragma once

// Dense row-major float64 tensors with tape-free reverse-mode autodiff.
// Every op result keeps shared handles to its inputs plus a closure that
// pushes the result's gradient into them; `backward` walks that DAG.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "ptgcn/errors.hpp"

namespace ptgcn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape &s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape &s) {
  std::string r = "[";
  for (std::size_t i = 0; i < s.size(); ++i)
    r += (i ? "," : "") + std::to_string(s[i]);
  return r + "]";
}

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(TensorImpl &)> backward;

  std::vector<double> &ensure_grad() {
    if (grad.size() != data.size())
      grad.assign(data.size(), 0.0);
    return grad;
  }
};

inline bool &grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

} // namespace detail

/// Disables graph recording in the current thread while alive.
class NoGradGuard {
public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard &) = delete;
  NoGradGuard &operator=(const NoGradGuard &) = delete;

private:
  bool prev_;
};

class Tensor {
public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
      : impl_(std::make_shared<detail::TensorImpl>()) {
    for (auto e : shape)
      if (e == 0)
        throw ShapeError("zero extent in shape " + shape_str(shape));
    impl_->data.assign(shape_size(shape), fill);
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
  }
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : impl_(std::make_shared<detail::TensorImpl>()) {
    if (shape_size(shape) != data.size())
      throw ShapeError("data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor(Shape{1}, v, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape &shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t size() const { return impl_->data.size(); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double &operator[](std::size_t i) { return impl_->data[i]; }
  double item() const {
    if (size() != 1)
      throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  bool has_grad() const { return impl_->grad.size() == impl_->data.size(); }
  std::span<double> grad() { return impl_->ensure_grad(); }
  std::span<const double> grad() const { return impl_->ensure_grad(); }
  void zero_grad() {
    if (has_grad())
      std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }
  bool is_leaf() const { return !impl_->backward; }

  /// Value copy with no graph history.
  Tensor detach() const { return Tensor(shape(), impl_->data, false); }

  detail::TensorImpl *impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl> &handle() const { return impl_; }

private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

using BackwardFn = std::function<void(TensorImpl &)>;

inline Tensor make_result(Shape shape, std::vector<double> data,
                          std::initializer_list<Tensor> inputs,
                          BackwardFn fn) {
  Tensor out(std::move(shape), std::move(data));
  if (!grad_mode())
    return out;
  bool any = false;
  for (const auto &t : inputs)
    any = any || t.requires_grad();
  if (!any)
    return out;
  auto *impl = out.impl();
  impl->requires_grad = true;
  for (const auto &t : inputs)
    impl->inputs.push_back(t.handle());
  impl->backward = std::move(fn);
  return out;
}

inline Tensor make_result(Shape shape, std::vector<double> data,
                          const std::vector<Tensor> &inputs, BackwardFn fn) {
  Tensor out(std::move(shape), std::move(data));
  if (!grad_mode())
    return out;
  bool any = false;
  for (const auto &t : inputs)
    any = any || t.requires_grad();
  if (!any)
    return out;
  auto *impl = out.impl();
  impl->requires_grad = true;
  for (const auto &t : inputs)
    impl->inputs.push_back(t.handle());
  impl->backward = std::move(fn);
  return out;
}

/// Gradient buffer of input `k`, or nullptr if it does not need one.
inline double *input_grad(TensorImpl &self, std::size_t k) {
  auto &in = *self.inputs[k];
  if (!in.requires_grad)
    return nullptr;
  return in.ensure_grad().data();
}

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

inline ConstMatMap cmap(const double *p, std::size_t r, std::size_t c) {
  return ConstMatMap(p, static_cast<Eigen::Index>(r),
                     static_cast<Eigen::Index>(c));
}
inline MatMap mmap(double *p, std::size_t r, std::size_t c) {
  return MatMap(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

inline void require_same_shape(const Tensor &a, const Tensor &b,
                               const char *op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()) + " differ");
}

} // namespace detail

/// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
/// Interior adjoints are reset on each call; leaf gradients accumulate.
inline void backward(const Tensor &loss) {
  if (loss.size() != 1)
    throw ContractError("backward() needs a scalar, got shape " +
                        shape_str(loss.shape()));
  using detail::TensorImpl;
  std::vector<TensorImpl *> order;
  std::unordered_set<TensorImpl *> seen;
  std::vector<std::pair<TensorImpl *, std::size_t>> stack{{loss.impl(), 0}};
  seen.insert(loss.impl());
  while (!stack.empty()) {
    auto &[node, next] = stack.back();
    if (next < node->inputs.size()) {
      auto *child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second)
        stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (auto *node : order)
    if (node->backward)
      node->grad.assign(node->data.size(), 0.0);
  loss.impl()->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward)
      (*it)->backward(**it);
}

// ---------------------------------------------------------------- algebra

/// Matrix product over the last two axes; leading axes must agree.
inline Tensor matmul(const Tensor &a, const Tensor &b) {
  if (a.rank() < 2 || a.rank() != b.rank())
    throw ShapeError("matmul: ranks " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const std::size_t r = a.rank();
  for (std::size_t i = 0; i + 2 < r; ++i)
    if (a.dim(i) != b.dim(i))
      throw ShapeError("matmul: batch extents differ");
  const std::size_t p = a.dim(r - 2), q = a.dim(r - 1), m = b.dim(r - 1);
  if (b.dim(r - 2) != q)
    throw ShapeError("matmul: inner extents " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const std::size_t batch = a.size() / (p * q);
  Shape shape = a.shape();
  shape[r - 1] = m;
  std::vector<double> out(batch * p * m);
  for (std::size_t k = 0; k < batch; ++k)
    detail::mmap(out.data() + k * p * m, p, m).noalias() =
        detail::cmap(a.data().data() + k * p * q, p, q) *
        detail::cmap(b.data().data() + k * q * m, q, m);
  return detail::make_result(
      std::move(shape), std::move(out), {a, b},
      [batch, p, q, m](detail::TensorImpl &self) {
        const double *A = self.inputs[0]->data.data();
        const double *B = self.inputs[1]->data.data();
        double *gA = detail::input_grad(self, 0);
        double *gB = detail::input_grad(self, 1);
        for (std::size_t k = 0; k < batch; ++k) {
          auto G = detail::cmap(self.grad.data() + k * p * m, p, m);
          if (gA)
            detail::mmap(gA + k * p * q, p, q).noalias() +=
                G * detail::cmap(B + k * q * m, q, m).transpose();
          if (gB)
            detail::mmap(gB + k * q * m, q, m).noalias() +=
                detail::cmap(A + k * p * q, p, q).transpose() * G;
        }
      });
}

/// a[p x q] * b[m x q]^T, the affine-layer form with weights stored out x in.
inline Tensor matmul_nt(const Tensor &a, const Tensor &b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
    throw ShapeError("matmul_nt: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + "^T");
  const std::size_t p = a.dim(0), q = a.dim(1), m = b.dim(0);
  std::vector<double> out(p * m);
  detail::mmap(out.data(), p, m).noalias() =
      detail::cmap(a.data().data(), p, q) *
      detail::cmap(b.data().data(), m, q).transpose();
  return detail::make_result(
      {p, m}, std::move(out), {a, b}, [p, q, m](detail::TensorImpl &self) {
        auto G = detail::cmap(self.grad.data(), p, m);
        if (double *gA = detail::input_grad(self, 0))
          detail::mmap(gA, p, q).noalias() +=
              G * detail::cmap(self.inputs[1]->data.data(), m, q);
        if (double *gB = detail::input_grad(self, 1))
          detail::mmap(gB, m, q).noalias() +=
              G.transpose() * detail::cmap(self.inputs[0]->data.data(), p, q);
      });
}

inline Tensor transpose(const Tensor &a) {
  if (a.rank() != 2)
    throw ShapeError("transpose: needs rank 2, got " + shape_str(a.shape()));
  const std::size_t p = a.dim(0), q = a.dim(1);
  std::vector<double> out(p * q);
  detail::mmap(out.data(), q, p) = detail::cmap(a.data().data(), p, q).transpose();
  return detail::make_result({q, p}, std::move(out), {a},
                             [p, q](detail::TensorImpl &self) {
                               if (double *g = detail::input_grad(self, 0))
                                 detail::mmap(g, p, q) +=
                                     detail::cmap(self.grad.data(), q, p)
                                         .transpose();
                             });
}

/// Same data, new shape.
inline Tensor reshape(const Tensor &a, Shape shape) {
  if (shape_size(shape) != a.size())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " +
                     shape_str(shape));
  std::vector<double> out(a.data().begin(), a.data().end());
  return detail::make_result(std::move(shape), std::move(out), {a},
                             [](detail::TensorImpl &self) {
                               if (double *g = detail::input_grad(self, 0))
                                 for (std::size_t i = 0; i < self.grad.size(); ++i)
                                   g[i] += self.grad[i];
                             });
}

inline Tensor add(const Tensor &a, const Tensor &b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a[i] + b[i];
  return detail::make_result(a.shape(), std::move(out), {a, b},
                             [](detail::TensorImpl &self) {
                               for (std::size_t k = 0; k < 2; ++k)
                                 if (double *g = detail::input_grad(self, k))
                                   for (std::size_t i = 0; i < self.grad.size(); ++i)
                                     g[i] += self.grad[i];
                             });
}

inline Tensor mul(const Tensor &a, const Tensor &b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a[i] * b[i];
  return detail::make_result(
      a.shape(), std::move(out), {a, b}, [](detail::TensorImpl &self) {
        const auto &A = self.inputs[0]->data;
        const auto &B = self.inputs[1]->data;
        if (double *g = detail::input_grad(self, 0))
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            g[i] += self.grad[i] * B[i];
        if (double *g = detail::input_grad(self, 1))
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            g[i] += self.grad[i] * A[i];
      });
}

inline Tensor scale(const Tensor &a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a[i] * c;
  return detail::make_result(a.shape(), std::move(out), {a},
                             [c](detail::TensorImpl &self) {
                               if (double *g = detail::input_grad(self, 0))
                                 for (std::size_t i = 0; i < self.grad.size(); ++i)
                                   g[i] += c * self.grad[i];
                             });
}

/// x[..., m] + bias[m] broadcast over the leading axes.
inline Tensor add_bias(const Tensor &x, const Tensor &bias) {
  const std::size_t m = x.shape().back();
  if (bias.rank() != 1 || bias.dim(0) != m)
    throw ShapeError("add_bias: " + shape_str(x.shape()) + " + " +
                     shape_str(bias.shape()));
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] += bias[i % m];
  return detail::make_result(x.shape(), std::move(out), {x, bias},
                             [m](detail::TensorImpl &self) {
                               if (double *g = detail::input_grad(self, 0))
                                 for (std::size_t i = 0; i < self.grad.size(); ++i)
                                   g[i] += self.grad[i];
                               if (double *g = detail::input_grad(self, 1))
                                 for (std::size_t i = 0; i < self.grad.size(); ++i)
                                   g[i % m] += self.grad[i];
                             });
}

inline Tensor sum(const Tensor &a) {
  double s = 0.0;
  for (double v : a.data())
    s += v;
  return detail::make_result({1}, {s}, {a}, [](detail::TensorImpl &self) {
    if (double *g = detail::input_grad(self, 0)) {
      const std::size_t n = self.inputs[0]->data.size();
      for (std::size_t i = 0; i < n; ++i)
        g[i] += self.grad[0];
    }
  });
}

// ------------------------------------------------------------ activations

inline Tensor relu(const Tensor &a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a[i] > 0.0 ? a[i] : 0.0;
  return detail::make_result(a.shape(), std::move(out), {a},
                             [](detail::TensorImpl &self) {
                               if (double *g = detail::input_grad(self, 0))
                                 for (std::size_t i = 0; i < self.grad.size(); ++i)
                                   if (self.data[i] > 0.0)
                                     g[i] += self.grad[i];
                             });
}

inline Tensor sigmoid(const Tensor &a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-a[i]))
                         : std::exp(a[i]) / (1.0 + std::exp(a[i]));
  return detail::make_result(a.shape(), std::move(out), {a},
                             [](detail::TensorImpl &self) {
                               if (double *g = detail::input_grad(self, 0))
                                 for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                   double y = self.data[i];
                                   g[i] += self.grad[i] * y * (1.0 - y);
                                 }
                             });
}

/// Max-shifted softmax over the last axis.
inline Tensor softmax_rows(const Tensor &x) {
  const std::size_t m = x.shape().back();
  const std::size_t rows = x.size() / m;
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double *in = x.data().data() + r * m;
    double *o = out.data() + r * m;
    double mx = *std::max_element(in, in + m);
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j)
      z += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < m; ++j)
      o[j] /= z;
  }
  return detail::make_result(
      x.shape(), std::move(out), {x}, [rows, m](detail::TensorImpl &self) {
        double *g = detail::input_grad(self, 0);
        if (!g)
          return;
        for (std::size_t r = 0; r < rows; ++r) {
          const double *y = self.data.data() + r * m;
          const double *gy = self.grad.data() + r * m;
          double dot = 0.0;
          for (std::size_t j = 0; j < m; ++j)
            dot += y[j] * gy[j];
          for (std::size_t j = 0; j < m; ++j)
            g[r * m + j] += y[j] * (gy[j] - dot);
        }
      });
}

inline Tensor log_softmax_rows(const Tensor &x) {
  const std::size_t m = x.shape().back();
  const std::size_t rows = x.size() / m;
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double *in = x.data().data() + r * m;
    double mx = *std::max_element(in, in + m);
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j)
      z += std::exp(in[j] - mx);
    double lz = mx + std::log(z);
    for (std::size_t j = 0; j < m; ++j)
      out[r * m + j] = in[j] - lz;
  }
  return detail::make_result(
      x.shape(), std::move(out), {x}, [rows, m](detail::TensorImpl &self) {
        double *g = detail::input_grad(self, 0);
        if (!g)
          return;
        for (std::size_t r = 0; r < rows; ++r) {
          const double *y = self.data.data() + r * m;
          const double *gy = self.grad.data() + r * m;
          double gs = 0.0;
          for (std::size_t j = 0; j < m; ++j)
            gs += gy[j];
          for (std::size_t j = 0; j < m; ++j)
            g[r * m + j] += gy[j] - std::exp(y[j]) * gs;
        }
      });
}

/// Normalizes the last axis, then applies gain and bias.
inline Tensor layer_norm(const Tensor &x, const Tensor &gain,
                         const Tensor &bias, double eps = 1e-5) {
  const std::size_t m = x.shape().back();
  if (gain.size() != m || bias.size() != m)
    throw ShapeError("layer_norm: gain/bias width mismatch");
  const std::size_t rows = x.size() / m;
  std::vector<double> out(x.size());
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double *in = x.data().data() + r * m;
    double mean = 0.0, var = 0.0;
    for (std::size_t j = 0; j < m; ++j)
      mean += in[j];
    mean /= double(m);
    for (std::size_t j = 0; j < m; ++j)
      var += (in[j] - mean) * (in[j] - mean);
    var /= double(m);
    double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < m; ++j) {
      double h = (in[j] - mean) * is;
      (*xhat)[r * m + j] = h;
      out[r * m + j] = h * gain[j] + bias[j];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [rows, m, xhat, inv_std](detail::TensorImpl &self) {
        const auto &gamma = self.inputs[1]->data;
        double *gx = detail::input_grad(self, 0);
        double *gg = detail::input_grad(self, 1);
        double *gb = detail::input_grad(self, 2);
        for (std::size_t r = 0; r < rows; ++r) {
          const double *gy = self.grad.data() + r * m;
          const double *h = xhat->data() + r * m;
          double s1 = 0.0, s2 = 0.0;
          for (std::size_t j = 0; j < m; ++j) {
            double gh = gy[j] * gamma[j];
            s1 += gh;
            s2 += gh * h[j];
            if (gg)
              gg[j] += gy[j] * h[j];
            if (gb)
              gb[j] += gy[j];
          }
          if (gx)
            for (std::size_t j = 0; j < m; ++j) {
              double gh = gy[j] * gamma[j];
              gx[r * m + j] += (*inv_std)[r] *
                               (gh - s1 / double(m) - h[j] * s2 / double(m));
            }
        }
      });
}

// ------------------------------------------------------------- structure

/// Concatenation along the last axis; all other extents must agree.
inline Tensor concat_lastdim(const std::vector<Tensor> &parts) {
  if (parts.empty())
    throw ShapeError("concat_lastdim: no inputs");
  Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto &p : parts) {
    if (Shape(p.shape().begin(), p.shape().end() - 1) != lead)
      throw ShapeError("concat_lastdim: leading shapes differ: " +
                       shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    widths.push_back(p.shape().back());
    total += p.shape().back();
  }
  const std::size_t rows = shape_size(lead);
  std::vector<double> out(rows * total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(parts[k].data().data() + r * widths[k], widths[k],
                  out.data() + r * total + off);
    off += widths[k];
  }
  Shape shape = lead;
  shape.push_back(total);
  return detail::make_result(
      std::move(shape), std::move(out), parts,
      [rows, total, widths](detail::TensorImpl &self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
          if (double *g = detail::input_grad(self, k))
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t j = 0; j < widths[k]; ++j)
                g[r * widths[k] + j] += self.grad[r * total + off + j];
          off += widths[k];
        }
      });
}

/// Columns [start, start + len) of the last axis.
inline Tensor slice_lastdim(const Tensor &x, std::size_t start,
                            std::size_t len) {
  const std::size_t m = x.shape().back();
  if (len == 0 || start + len > m)
    throw ShapeError("slice_lastdim: range out of bounds");
  const std::size_t rows = x.size() / m;
  std::vector<double> out(rows * len);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(x.data().data() + r * m + start, len, out.data() + r * len);
  Shape shape = x.shape();
  shape.back() = len;
  return detail::make_result(std::move(shape), std::move(out), {x},
                             [rows, m, start, len](detail::TensorImpl &self) {
                               if (double *g = detail::input_grad(self, 0))
                                 for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t j = 0; j < len; ++j)
                                     g[r * m + start + j] += self.grad[r * len + j];
                             });
}

/// Gathers sub-tensors along axis 0 (embedding lookup, row selection).
inline Tensor select_rows(const Tensor &x, std::vector<std::size_t> rows) {
  const std::size_t width = x.size() / x.dim(0);
  for (auto r : rows)
    if (r >= x.dim(0))
      throw ShapeError("select_rows: index " + std::to_string(r) +
                       " out of range");
  if (rows.empty())
    throw ShapeError("select_rows: empty selection");
  std::vector<double> out(rows.size() * width);
  for (std::size_t k = 0; k < rows.size(); ++k)
    std::copy_n(x.data().data() + rows[k] * width, width,
                out.data() + k * width);
  Shape shape = x.shape();
  shape[0] = rows.size();
  return detail::make_result(
      std::move(shape), std::move(out), {x},
      [rows = std::move(rows), width](detail::TensorImpl &self) {
        if (double *g = detail::input_grad(self, 0))
          for (std::size_t k = 0; k < rows.size(); ++k)
            for (std::size_t j = 0; j < width; ++j)
              g[rows[k] * width + j] += self.grad[k * width + j];
      });
}

/// Max over one axis; the gradient goes to the first maximal element.
inline Tensor max_reduce(const Tensor &x, std::size_t axis) {
  if (axis >= x.rank())
    throw ShapeError("max_reduce: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i)
    outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i)
    inner *= x.dim(i);
  const std::size_t len = x.dim(axis);
  std::vector<double> out(outer * inner);
  auto arg = std::make_shared<std::vector<std::size_t>>(outer * inner);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      std::size_t best = o * len * inner + i;
      for (std::size_t k = 1; k < len; ++k) {
        std::size_t idx = (o * len + k) * inner + i;
        if (x[idx] > x[best])
          best = idx;
      }
      out[o * inner + i] = x[best];
      (*arg)[o * inner + i] = best;
    }
  Shape shape;
  for (std::size_t i = 0; i < x.rank(); ++i)
    if (i != axis)
      shape.push_back(x.dim(i));
  if (shape.empty())
    shape.push_back(1);
  return detail::make_result(std::move(shape), std::move(out), {x},
                             [arg](detail::TensorImpl &self) {
                               if (double *g = detail::input_grad(self, 0))
                                 for (std::size_t k = 0; k < arg->size(); ++k)
                                   g[(*arg)[k]] += self.grad[k];
                             });
}

// ----------------------------------------------------------------- losses

/// Summed binary cross-entropy of probabilities against 0/1 targets, with
/// probabilities clamped into [eps, 1 - eps]. Clamped cells pass no gradient.
inline Tensor bce_sum(const Tensor &probs, std::span<const unsigned char> target,
                      double eps = 1e-7) {
  if (target.size() != probs.size())
    throw ShapeError("bce_sum: target length mismatch");
  std::vector<unsigned char> y(target.begin(), target.end());
  double loss = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    double s = std::clamp(probs[i], eps, 1.0 - eps);
    loss -= y[i] ? std::log(s) : std::log(1.0 - s);
  }
  return detail::make_result(
      {1}, {loss}, {probs}, [y = std::move(y), eps](detail::TensorImpl &self) {
        double *g = detail::input_grad(self, 0);
        if (!g)
          return;
        const auto &p = self.inputs[0]->data;
        for (std::size_t i = 0; i < p.size(); ++i) {
          if (p[i] < eps || p[i] > 1.0 - eps)
            continue;
          g[i] += self.grad[0] * (y[i] ? -1.0 / p[i] : 1.0 / (1.0 - p[i]));
        }
      });
}

/// bce_sum(sigmoid(z), target, eps) evaluated from the logits. The
/// complement 1 - p is taken as sigmoid(-z), which keeps saturated cells
/// accurate; same clamping rule.
inline Tensor bce_sum_logits(const Tensor &logits,
                             std::span<const unsigned char> target,
                             double eps = 1e-7) {
  if (target.size() != logits.size())
    throw ShapeError("bce_sum_logits: target length mismatch");
  auto sig = [](double z) {
    return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  };
  std::vector<unsigned char> y(target.begin(), target.end());
  std::vector<double> p(logits.size()), q(logits.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = sig(logits[i]);
    q[i] = sig(-logits[i]);
    const double lo = std::clamp(p[i], eps, 1.0 - eps);
    const double hi = std::clamp(q[i], eps, 1.0 - eps);
    loss -= y[i] ? std::log(lo) : std::log(hi);
  }
  return detail::make_result(
      {1}, {loss}, {logits},
      [y = std::move(y), p = std::move(p), q = std::move(q),
       eps](detail::TensorImpl &self) {
        double *g = detail::input_grad(self, 0);
        if (!g)
          return;
        for (std::size_t i = 0; i < p.size(); ++i) {
          if (p[i] < eps || q[i] < eps)
            continue;
          g[i] += self.grad[0] * (y[i] ? -q[i] : p[i]);
        }
      });
}

/// Summed negative log-likelihood: -sum_r logp[r, target[r]].
inline Tensor nll_sum(const Tensor &log_probs,
                      const std::vector<std::size_t> &target) {
  if (log_probs.rank() != 2 || log_probs.dim(0) != target.size())
    throw ShapeError("nll_sum: needs [m x classes] with m targets");
  const std::size_t c = log_probs.dim(1);
  double loss = 0.0;
  for (std::size_t r = 0; r < target.size(); ++r) {
    if (target[r] >= c)
      throw ShapeError("nll_sum: class index out of range");
    loss -= log_probs[r * c + target[r]];
  }
  return detail::make_result({1}, {loss}, {log_probs},
                             [target, c](detail::TensorImpl &self) {
                               if (double *g = detail::input_grad(self, 0))
                                 for (std::size_t r = 0; r < target.size(); ++r)
                                   g[r * c + target[r]] -= self.grad[0];
                             });
}

} // namespace ptgcn
