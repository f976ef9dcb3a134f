#include "irt/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "irt/errors.hpp"

namespace irt::ops {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

using NodePtr = std::shared_ptr<Node>;

// Gradient buffer of an input, or nullptr if it does not take gradients.
double* grad_of(const NodePtr& n) {
  return (n && n->requires_grad) ? n->ensure_grad().data() : nullptr;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    fail(ErrorCode::kDimension, std::string(op) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
  }
}

std::size_t last_dim(const Tensor& x, const char* op) {
  if (x.rank() == 0) fail(ErrorCode::kDimension, std::string(op) + ": scalar input");
  return x.shape().back();
}

template <typename F, typename DF>
Tensor unary(const Tensor& x, F f, DF df, const char* name) {
  std::vector<double> y(x.numel());
  auto xv = x.values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
  NodePtr xn = x.shared_node();
  return detail::make_result(
      x.shape(), std::move(y), {&x},
      [xn, df](Node& out) {
        double* gx = grad_of(xn);
        if (!gx) return;
        for (std::size_t i = 0; i < out.value.size(); ++i) {
          gx[i] += out.grad[i] * df(xn->value[i], out.value[i]);
        }
      },
      name);
}

// Fixed summation order; Eigen's vectorized reductions vary with buffer
// alignment, which would break bitwise reruns.
void add_column_sums(const double* m, std::size_t rows, std::size_t cols, double* out) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c] += m[r * cols + c];
  }
}

}  // namespace

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.rank() != 2) fail(ErrorCode::kDimension, "affine: weight must be 2-D");
  const std::size_t in = w.dim(0);
  const std::size_t out_dim = w.dim(1);
  if (last_dim(x, "affine") != in) {
    fail(ErrorCode::kDimension, "affine: input " + shape_str(x.shape()) +
                                    " incompatible with weight " +
                                    shape_str(w.shape()));
  }
  if (b.defined() && (b.rank() != 1 || b.dim(0) != out_dim)) {
    fail(ErrorCode::kDimension, "affine: bias " + shape_str(b.shape()) +
                                    " does not match output width " +
                                    std::to_string(out_dim));
  }
  const std::size_t rows = x.numel() / in;
  Shape shape = x.shape();
  shape.back() = out_dim;
  std::vector<double> y(rows * out_dim);
  {
    ConstMap X(x.values().data(), rows, in);
    ConstMap W(w.values().data(), in, out_dim);
    MutMap Y(y.data(), rows, out_dim);
    Y.noalias() = X * W;
    if (b.defined()) {
      Eigen::Map<const Eigen::RowVectorXd> B(b.values().data(), out_dim);
      Y.rowwise() += B;
    }
  }
  NodePtr xn = x.shared_node(), wn = w.shared_node(), bn = b.shared_node();
  return detail::make_result(
      std::move(shape), std::move(y), {&x, &w, &b},
      [xn, wn, bn, rows, in, out_dim](Node& out) {
        ConstMap dY(out.grad.data(), rows, out_dim);
        if (double* gx = grad_of(xn)) {
          MutMap dX(gx, rows, in);
          dX.noalias() += dY * ConstMap(wn->value.data(), in, out_dim).transpose();
        }
        if (double* gw = grad_of(wn)) {
          MutMap dW(gw, in, out_dim);
          dW.noalias() += ConstMap(xn->value.data(), rows, in).transpose() * dY;
        }
        if (double* gb = grad_of(bn)) {
          add_column_sums(out.grad.data(), rows, out_dim, gb);
        }
      },
      "affine");
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
  NodePtr an = a.shared_node(), bn = b.shared_node();
  return detail::make_result(
      a.shape(), std::move(y), {&a, &b},
      [an, bn](Node& out) {
        double* ga = grad_of(an);
        double* gb = grad_of(bn);
        for (std::size_t i = 0; i < out.grad.size(); ++i) {
          if (ga) ga[i] += out.grad[i];
          if (gb) gb[i] += out.grad[i];
        }
      },
      "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] - b[i];
  NodePtr an = a.shared_node(), bn = b.shared_node();
  return detail::make_result(
      a.shape(), std::move(y), {&a, &b},
      [an, bn](Node& out) {
        double* ga = grad_of(an);
        double* gb = grad_of(bn);
        for (std::size_t i = 0; i < out.grad.size(); ++i) {
          if (ga) ga[i] += out.grad[i];
          if (gb) gb[i] -= out.grad[i];
        }
      },
      "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[i];
  NodePtr an = a.shared_node(), bn = b.shared_node();
  return detail::make_result(
      a.shape(), std::move(y), {&a, &b},
      [an, bn](Node& out) {
        double* ga = grad_of(an);
        double* gb = grad_of(bn);
        for (std::size_t i = 0; i < out.grad.size(); ++i) {
          if (ga) ga[i] += out.grad[i] * bn->value[i];
          if (gb) gb[i] += out.grad[i] * an->value[i];
        }
      },
      "mul");
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double x) { return s * x; },
               [s](double, double) { return s; }, "scale");
}

Tensor relu(const Tensor& x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
               [](double v, double) { return v > 0.0 ? 1.0 : 0.0; }, "relu");
}

Tensor softplus(const Tensor& x) {
  return unary(
      x,
      [](double v) { return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
      [](double v, double) { return 1.0 / (1.0 + std::exp(-v)); }, "softplus");
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); }, "sigmoid");
}

Tensor exp(const Tensor& x) {
  return unary(x, [](double v) { return std::exp(v); },
               [](double, double y) { return y; }, "exp");
}

Tensor log(const Tensor& x) {
  for (double v : x.values()) {
    if (!(v > 0.0)) fail(ErrorCode::kDomain, "log: non-positive input");
  }
  return unary(x, [](double v) { return std::log(v); },
               [](double v, double) { return 1.0 / v; }, "log");
}

Tensor square(const Tensor& x) {
  return unary(x, [](double v) { return v * v; },
               [](double v, double) { return 2.0 * v; }, "square");
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  NodePtr xn = x.shared_node();
  return detail::make_result(
      {}, {s}, {&x},
      [xn](Node& out) {
        double* gx = grad_of(xn);
        if (!gx) return;
        for (std::size_t i = 0; i < xn->value.size(); ++i) gx[i] += out.grad[0];
      },
      "sum");
}

Tensor sum_last(const Tensor& x) {
  const std::size_t n = last_dim(x, "sum_last");
  const std::size_t rows = x.numel() / n;
  std::vector<double> y(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) y[r] += x[r * n + j];
  }
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  NodePtr xn = x.shared_node();
  return detail::make_result(
      std::move(shape), std::move(y), {&x},
      [xn, n, rows](Node& out) {
        double* gx = grad_of(xn);
        if (!gx) return;
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += out.grad[r];
        }
      },
      "sum_last");
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) fail(ErrorCode::kDimension, "softmax: axis out of range");
  const std::size_t n = x.dim(axis);
  if (n == 0) fail(ErrorCode::kDimension, "softmax: empty axis");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  std::vector<double> y(x.numel());
  auto xv = x.values();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double m = xv[base];
      for (std::size_t j = 1; j < n; ++j) m = std::max(m, xv[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(xv[base + j * inner] - m);
        y[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < n; ++j) y[base + j * inner] /= z;
    }
  }
  NodePtr xn = x.shared_node();
  return detail::make_result(
      x.shape(), std::move(y), {&x},
      [xn, n, outer, inner](Node& out) {
        double* gx = grad_of(xn);
        if (!gx) return;
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              dot += out.grad[base + j * inner] * out.value[base + j * inner];
            }
            for (std::size_t j = 0; j < n; ++j) {
              const std::size_t idx = base + j * inner;
              gx[idx] += out.value[idx] * (out.grad[idx] - dot);
            }
          }
        }
      },
      "softmax");
}

Tensor log_softmax_last(const Tensor& x) {
  const std::size_t n = last_dim(x, "log_softmax_last");
  const std::size_t rows = x.numel() / n;
  std::vector<double> y(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.values().data() + r * n;
    const double m = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - m);
    const double lse = m + std::log(z);
    for (std::size_t j = 0; j < n; ++j) y[r * n + j] = row[j] - lse;
  }
  NodePtr xn = x.shared_node();
  return detail::make_result(
      x.shape(), std::move(y), {&x},
      [xn, n, rows](Node& out) {
        double* gx = grad_of(xn);
        if (!gx) return;
        for (std::size_t r = 0; r < rows; ++r) {
          double gsum = 0.0;
          for (std::size_t j = 0; j < n; ++j) gsum += out.grad[r * n + j];
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t i = r * n + j;
            gx[i] += out.grad[i] - std::exp(out.value[i]) * gsum;
          }
        }
      },
      "log_softmax");
}

Tensor concat_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) fail(ErrorCode::kDimension, "concat_last: no inputs");
  const Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const std::size_t w = last_dim(p, "concat_last");
    if (Shape(p.shape().begin(), p.shape().end() - 1) != lead) {
      fail(ErrorCode::kDimension, "concat_last: leading shapes differ " +
                                      shape_str(parts[0].shape()) + " vs " +
                                      shape_str(p.shape()));
    }
    widths.push_back(w);
    total += w;
  }
  const std::size_t rows = shape_numel(lead);
  std::vector<double> y(rows * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const double* src = parts[k].values().data();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy(src + r * widths[k], src + (r + 1) * widths[k],
                y.begin() + r * total + offset);
    }
    offset += widths[k];
  }
  Shape shape = lead;
  shape.push_back(total);
  std::vector<NodePtr> nodes;
  for (const auto& p : parts) nodes.push_back(p.shared_node());
  return detail::make_result(
      std::move(shape), std::move(y), parts,
      [nodes, widths, rows, total](Node& out) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < nodes.size(); ++k) {
          if (double* g = grad_of(nodes[k])) {
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t j = 0; j < widths[k]; ++j) {
                g[r * widths[k] + j] += out.grad[r * total + off + j];
              }
            }
          }
          off += widths[k];
        }
      },
      "concat_last");
}

Tensor slice_last(const Tensor& x, std::size_t begin, std::size_t end) {
  const std::size_t n = last_dim(x, "slice_last");
  if (begin >= end || end > n) {
    fail(ErrorCode::kDimension, "slice_last: bad range [" + std::to_string(begin) +
                                    "," + std::to_string(end) + ") of " +
                                    std::to_string(n));
  }
  const std::size_t rows = x.numel() / n;
  const std::size_t w = end - begin;
  std::vector<double> y(rows * w);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < w; ++j) y[r * w + j] = x[r * n + begin + j];
  }
  Shape shape = x.shape();
  shape.back() = w;
  NodePtr xn = x.shared_node();
  return detail::make_result(
      std::move(shape), std::move(y), {&x},
      [xn, rows, n, w, begin](Node& out) {
        double* gx = grad_of(xn);
        if (!gx) return;
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < w; ++j) gx[r * n + begin + j] += out.grad[r * w + j];
        }
      },
      "slice_last");
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    fail(ErrorCode::kDimension, "reshape: " + shape_str(x.shape()) + " -> " +
                                    shape_str(shape));
  }
  std::vector<double> y(x.values().begin(), x.values().end());
  NodePtr xn = x.shared_node();
  return detail::make_result(
      std::move(shape), std::move(y), {&x},
      [xn](Node& out) {
        double* gx = grad_of(xn);
        if (!gx) return;
        for (std::size_t i = 0; i < out.grad.size(); ++i) gx[i] += out.grad[i];
      },
      "reshape");
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) fail(ErrorCode::kDimension, "concat_rows: no inputs");
  const std::size_t f = last_dim(parts[0], "concat_rows");
  std::vector<double> y;
  std::vector<NodePtr> nodes;
  for (const auto& p : parts) {
    if (last_dim(p, "concat_rows") != f) fail(ErrorCode::kDimension, "concat_rows: width mismatch");
    y.insert(y.end(), p.values().begin(), p.values().end());
    nodes.push_back(p.shared_node());
  }
  const std::size_t rows = y.size() / f;
  return detail::make_result(
      {rows, f}, std::move(y), parts,
      [nodes](Node& out) {
        std::size_t offset = 0;
        for (const auto& n : nodes) {
          if (double* g = grad_of(n)) {
            for (std::size_t i = 0; i < n->value.size(); ++i) g[i] += out.grad[offset + i];
          }
          offset += n->value.size();
        }
      },
      "concat_rows");
}

Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
  const std::size_t f = last_dim(x, "gather_rows");
  const std::size_t nrows = x.numel() / f;
  std::vector<double> y(rows.size() * f);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= nrows) {
      fail(ErrorCode::kDomain, "gather_rows: row " + std::to_string(rows[i]) +
                                   " out of " + std::to_string(nrows));
    }
    std::copy_n(x.values().data() + rows[i] * f, f, y.begin() + i * f);
  }
  NodePtr xn = x.shared_node();
  return detail::make_result(
      {rows.size(), f}, std::move(y), {&x},
      [xn, rows, f](Node& out) {
        double* gx = grad_of(xn);
        if (!gx) return;
        for (std::size_t i = 0; i < rows.size(); ++i) {
          for (std::size_t j = 0; j < f; ++j) gx[rows[i] * f + j] += out.grad[i * f + j];
        }
      },
      "gather_rows");
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  const std::size_t n = last_dim(x, "layer_norm");
  if (gain.numel() != n || bias.numel() != n) {
    fail(ErrorCode::kDimension, "layer_norm: gain/bias width mismatch");
  }
  const std::size_t rows = x.numel() / n;
  std::vector<double> y(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.values().data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t i = r * n + j;
      xhat[i] = (row[j] - mu) * inv_std[r];
      y[i] = xhat[i] * gain[j] + bias[j];
    }
  }
  NodePtr xn = x.shared_node(), gn = gain.shared_node(), bn = bias.shared_node();
  return detail::make_result(
      x.shape(), std::move(y), {&x, &gain, &bias},
      [xn, gn, bn, n, rows, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](Node& out) {
        double* gx = grad_of(xn);
        double* gg = grad_of(gn);
        double* gb = grad_of(bn);
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t i = r * n + j;
            const double d = out.grad[i] * gn->value[j];
            mean_d += d;
            mean_dx += d * xhat[i];
            if (gg) gg[j] += out.grad[i] * xhat[i];
            if (gb) gb[j] += out.grad[i];
          }
          if (!gx) continue;
          mean_d *= inv_n;
          mean_dx *= inv_n;
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t i = r * n + j;
            const double d = out.grad[i] * gn->value[j];
            gx[i] += inv_std[r] * (d - mean_d - xhat[i] * mean_dx);
          }
        }
      },
      "layer_norm");
}

namespace {

struct AttentionDims {
  std::size_t groups, tokens, width, heads, head_width;
};

AttentionDims attention_dims(const Tensor& q, const Tensor& k, const Tensor* v,
                             std::size_t heads) {
  if (q.rank() != 3) fail(ErrorCode::kDimension, "attention: q must be [G,T,d]");
  if (k.shape() != q.shape() || (v && v->shape() != q.shape())) {
    fail(ErrorCode::kDimension, "attention: q/k/v shapes differ");
  }
  const std::size_t d = q.dim(2);
  if (heads == 0 || d % heads != 0) {
    fail(ErrorCode::kDimension, "attention: width " + std::to_string(d) +
                                    " not divisible by " + std::to_string(heads) +
                                    " heads");
  }
  if (q.dim(1) == 0) fail(ErrorCode::kDimension, "attention: no tokens");
  return {q.dim(0), q.dim(1), d, heads, d / heads};
}

// probs: [G, H, T, T]
void compute_probabilities(const AttentionDims& a, const double* q,
                           const double* k, std::vector<double>& probs) {
  const double s = 1.0 / std::sqrt(static_cast<double>(a.head_width));
  const std::size_t T = a.tokens;
  probs.assign(a.groups * a.heads * T * T, 0.0);
  for (std::size_t g = 0; g < a.groups; ++g) {
    for (std::size_t h = 0; h < a.heads; ++h) {
      double* p = probs.data() + ((g * a.heads + h) * T) * T;
      for (std::size_t i = 0; i < T; ++i) {
        const double* qi = q + (g * T + i) * a.width + h * a.head_width;
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < T; ++j) {
          const double* kj = k + (g * T + j) * a.width + h * a.head_width;
          double dot = 0.0;
          for (std::size_t c = 0; c < a.head_width; ++c) dot += qi[c] * kj[c];
          p[i * T + j] = dot * s;
          m = std::max(m, p[i * T + j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < T; ++j) {
          p[i * T + j] = std::exp(p[i * T + j] - m);
          z += p[i * T + j];
        }
        for (std::size_t j = 0; j < T; ++j) p[i * T + j] /= z;
      }
    }
  }
}

}  // namespace

std::vector<double> attention_probabilities(const Tensor& q, const Tensor& k,
                                            std::size_t heads) {
  const AttentionDims a = attention_dims(q, k, nullptr, heads);
  std::vector<double> probs;
  compute_probabilities(a, q.values().data(), k.values().data(), probs);
  return probs;
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            std::size_t heads) {
  const AttentionDims a = attention_dims(q, k, &v, heads);
  std::vector<double> probs;
  compute_probabilities(a, q.values().data(), k.values().data(), probs);
  const std::size_t T = a.tokens;
  std::vector<double> y(q.numel(), 0.0);
  for (std::size_t g = 0; g < a.groups; ++g) {
    for (std::size_t h = 0; h < a.heads; ++h) {
      const double* p = probs.data() + ((g * a.heads + h) * T) * T;
      for (std::size_t i = 0; i < T; ++i) {
        double* yi = y.data() + (g * T + i) * a.width + h * a.head_width;
        for (std::size_t j = 0; j < T; ++j) {
          const double* vj = v.values().data() + (g * T + j) * a.width + h * a.head_width;
          for (std::size_t c = 0; c < a.head_width; ++c) yi[c] += p[i * T + j] * vj[c];
        }
      }
    }
  }
  NodePtr qn = q.shared_node(), kn = k.shared_node(), vn = v.shared_node();
  return detail::make_result(
      q.shape(), std::move(y), {&q, &k, &v},
      [qn, kn, vn, a, probs = std::move(probs)](Node& out) {
        double* gq = grad_of(qn);
        double* gk = grad_of(kn);
        double* gv = grad_of(vn);
        const std::size_t T = a.tokens;
        const double s = 1.0 / std::sqrt(static_cast<double>(a.head_width));
        std::vector<double> dp(T * T);
        for (std::size_t g = 0; g < a.groups; ++g) {
          for (std::size_t h = 0; h < a.heads; ++h) {
            const double* p = probs.data() + ((g * a.heads + h) * T) * T;
            auto off = [&](std::size_t t) { return (g * T + t) * a.width + h * a.head_width; };
            // dP = dO V^T, dV = P^T dO
            for (std::size_t i = 0; i < T; ++i) {
              const double* go = out.grad.data() + off(i);
              for (std::size_t j = 0; j < T; ++j) {
                const double* vj = vn->value.data() + off(j);
                double dot = 0.0;
                for (std::size_t c = 0; c < a.head_width; ++c) dot += go[c] * vj[c];
                dp[i * T + j] = dot;
                if (gv) {
                  double* gvj = gv + off(j);
                  for (std::size_t c = 0; c < a.head_width; ++c) gvj[c] += p[i * T + j] * go[c];
                }
              }
            }
            if (!gq && !gk) continue;
            // dS = P * (dP - rowsum(dP * P)), scaled into dQ and dK.
            for (std::size_t i = 0; i < T; ++i) {
              double row = 0.0;
              for (std::size_t j = 0; j < T; ++j) row += dp[i * T + j] * p[i * T + j];
              for (std::size_t j = 0; j < T; ++j) {
                const double ds = p[i * T + j] * (dp[i * T + j] - row) * s;
                if (ds == 0.0) continue;
                const double* qi = qn->value.data() + off(i);
                const double* kj = kn->value.data() + off(j);
                if (gq) {
                  double* gqi = gq + off(i);
                  for (std::size_t c = 0; c < a.head_width; ++c) gqi[c] += ds * kj[c];
                }
                if (gk) {
                  double* gkj = gk + off(j);
                  for (std::size_t c = 0; c < a.head_width; ++c) gkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      },
      "multi_head_attention");
}

Tensor conv3x3_same(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 3) fail(ErrorCode::kDimension, "conv3x3_same: input must be [H,W,C]");
  const std::size_t H = x.dim(0), W = x.dim(1), C = x.dim(2);
  if (w.rank() != 4 || w.dim(0) != 3 || w.dim(1) != 3 || w.dim(2) != C) {
    fail(ErrorCode::kDimension, "conv3x3_same: weight " + shape_str(w.shape()) +
                                    " incompatible with input " + shape_str(x.shape()));
  }
  const std::size_t O = w.dim(3);
  if (!b.defined() || b.numel() != O) fail(ErrorCode::kDimension, "conv3x3_same: bias width");
  const std::size_t K = 9 * C;
  // im2col: one row per output pixel, columns ordered (ky, kx, c) to match w.
  std::vector<double> cols(H * W * K, 0.0);
  const double* xv = x.values().data();
  for (std::size_t r = 0; r < H; ++r) {
    for (std::size_t c = 0; c < W; ++c) {
      double* row = cols.data() + (r * W + c) * K;
      for (int ky = 0; ky < 3; ++ky) {
        const long rr = static_cast<long>(r) + ky - 1;
        if (rr < 0 || rr >= static_cast<long>(H)) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const long cc = static_cast<long>(c) + kx - 1;
          if (cc < 0 || cc >= static_cast<long>(W)) continue;
          std::copy_n(xv + (rr * W + cc) * C, C, row + (ky * 3 + kx) * C);
        }
      }
    }
  }
  std::vector<double> y(H * W * O);
  {
    MutMap Y(y.data(), H * W, O);
    Y.noalias() = ConstMap(cols.data(), H * W, K) * ConstMap(w.values().data(), K, O);
    Y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.values().data(), O);
  }
  NodePtr xn = x.shared_node(), wn = w.shared_node(), bn = b.shared_node();
  return detail::make_result(
      {H, W, O}, std::move(y), {&x, &w, &b},
      [xn, wn, bn, H, W, C, O, K, cols = std::move(cols)](Node& out) {
        ConstMap dY(out.grad.data(), H * W, O);
        if (double* gw = grad_of(wn)) {
          MutMap(gw, K, O).noalias() += ConstMap(cols.data(), H * W, K).transpose() * dY;
        }
        if (double* gb = grad_of(bn)) {
          add_column_sums(out.grad.data(), dY.rows(), O, gb);
        }
        if (double* gx = grad_of(xn)) {
          RowMat dcols = dY * ConstMap(wn->value.data(), K, O).transpose();
          for (std::size_t r = 0; r < H; ++r) {
            for (std::size_t c = 0; c < W; ++c) {
              const double* row = dcols.data() + (r * W + c) * K;
              for (int ky = 0; ky < 3; ++ky) {
                const long rr = static_cast<long>(r) + ky - 1;
                if (rr < 0 || rr >= static_cast<long>(H)) continue;
                for (int kx = 0; kx < 3; ++kx) {
                  const long cc = static_cast<long>(c) + kx - 1;
                  if (cc < 0 || cc >= static_cast<long>(W)) continue;
                  double* dst = gx + (rr * W + cc) * C;
                  const double* src = row + (ky * 3 + kx) * C;
                  for (std::size_t ch = 0; ch < C; ++ch) dst[ch] += src[ch];
                }
              }
            }
          }
        }
      },
      "conv3x3_same");
}

Tensor positional_encode(const Tensor& x, std::size_t num_freqs,
                         bool include_input) {
  const std::size_t D = last_dim(x, "positional_encode");
  const std::size_t rows = x.numel() / D;
  const std::size_t per_dim = (include_input ? 1 : 0) + 2 * num_freqs;
  const std::size_t out_w = D * per_dim;
  std::vector<double> y(rows * out_w);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t d = 0; d < D; ++d) {
      const double v = x[r * D + d];
      double* dst = y.data() + r * out_w + d * per_dim;
      std::size_t o = 0;
      if (include_input) dst[o++] = v;
      double freq = std::numbers::pi;
      for (std::size_t k = 0; k < num_freqs; ++k, freq *= 2.0) {
        dst[o++] = std::sin(freq * v);
        dst[o++] = std::cos(freq * v);
      }
    }
  }
  Shape shape = x.shape();
  shape.back() = out_w;
  NodePtr xn = x.shared_node();
  return detail::make_result(
      std::move(shape), std::move(y), {&x},
      [xn, D, rows, per_dim, out_w, num_freqs, include_input](Node& out) {
        double* gx = grad_of(xn);
        if (!gx) return;
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t d = 0; d < D; ++d) {
            const double* g = out.grad.data() + r * out_w + d * per_dim;
            const double* val = out.value.data() + r * out_w + d * per_dim;
            std::size_t o = 0;
            double acc = 0.0;
            if (include_input) acc += g[o++];
            double freq = std::numbers::pi;
            for (std::size_t k = 0; k < num_freqs; ++k, freq *= 2.0) {
              // d sin = freq cos, d cos = -freq sin
              acc += g[o] * freq * val[o + 1];
              acc -= g[o + 1] * freq * val[o];
              o += 2;
            }
            gx[r * D + d] += acc;
          }
        }
      },
      "positional_encode");
}

VolumeRenderResult volume_render(const Tensor& sigma, const Tensor& attr,
                                 const std::vector<double>& deltas) {
  if (sigma.rank() != 2 || attr.rank() != 3 || attr.dim(0) != sigma.dim(0) ||
      attr.dim(1) != sigma.dim(1) || deltas.size() != sigma.numel()) {
    fail(ErrorCode::kDimension, "volume_render: sigma " + shape_str(sigma.shape()) +
                                    ", attr " + shape_str(attr.shape()) +
                                    ", deltas " + std::to_string(deltas.size()));
  }
  const std::size_t B = sigma.dim(0), N = sigma.dim(1), C = attr.dim(2);
  for (std::size_t i = 0; i < sigma.numel(); ++i) {
    if (sigma[i] < 0.0) fail(ErrorCode::kContract, "volume_render: negative density");
    if (!(deltas[i] > 0.0)) fail(ErrorCode::kContract, "volume_render: non-positive interval");
  }
  VolumeRenderResult res;
  res.weights.assign(B * N, 0.0);
  res.residual.assign(B, 1.0);
  // trans[b*(N+1)+i] = T_i; T_N is the residual transmittance.
  std::vector<double> trans(B * (N + 1));
  std::vector<double> y(B * C, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    double depth = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      const double od = deltas[b * N + i] * sigma[b * N + i];
      const double t = std::exp(-depth);
      trans[b * (N + 1) + i] = t;
      const double w = t * -std::expm1(-od);
      res.weights[b * N + i] = w;
      for (std::size_t c = 0; c < C; ++c) y[b * C + c] += w * attr[(b * N + i) * C + c];
      depth += od;
    }
    trans[b * (N + 1) + N] = std::exp(-depth);
    res.residual[b] = trans[b * (N + 1) + N];
  }
  NodePtr sn = sigma.shared_node(), an = attr.shared_node();
  res.value = detail::make_result(
      {B, C}, std::move(y), {&sigma, &attr},
      [sn, an, deltas, B, N, C, weights = res.weights,
       trans = std::move(trans)](Node& out) {
        double* gs = grad_of(sn);
        double* ga = grad_of(an);
        for (std::size_t b = 0; b < B; ++b) {
          const double* g = out.grad.data() + b * C;
          double tail = 0.0;  // sum_{j>i} w_j (g . a_j)
          for (std::size_t ii = N; ii-- > 0;) {
            const double* a = an->value.data() + (b * N + ii) * C;
            double ga_dot = 0.0;
            for (std::size_t c = 0; c < C; ++c) ga_dot += g[c] * a[c];
            const double w = weights[b * N + ii];
            if (ga) {
              double* dst = ga + (b * N + ii) * C;
              for (std::size_t c = 0; c < C; ++c) dst[c] += w * g[c];
            }
            if (gs) {
              gs[b * N + ii] += deltas[b * N + ii] * (trans[b * (N + 1) + ii + 1] * ga_dot - tail);
            }
            tail += w * ga_dot;
          }
        }
      },
      "volume_render");
  return res;
}

Tensor squared_error_sum(const Tensor& pred, const Tensor& target) {
  require_same_shape(pred, target, "squared_error_sum");
  return sum(square(sub(pred, target)));
}

Tensor cross_entropy_sum(const Tensor& logits, const Tensor& target_onehot) {
  require_same_shape(logits, target_onehot, "cross_entropy_sum");
  const std::size_t n = last_dim(logits, "cross_entropy_sum");
  const std::size_t rows = logits.numel() / n;
  for (std::size_t r = 0; r < rows; ++r) {
    int ones = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const double t = target_onehot[r * n + j];
      if (t == 1.0) {
        ++ones;
      } else if (t != 0.0) {
        ones = -1;
        break;
      }
    }
    if (ones != 1) {
      fail(ErrorCode::kContract, "cross_entropy_sum: target row " +
                                     std::to_string(r) + " is not one-hot");
    }
  }
  return scale(sum(mul(target_onehot, log_softmax_last(logits))), -1.0);
}

}  // namespace irt::ops
