#pragma once

// Differentiable operators. Every op treats its input as row-major and
// checks shapes explicitly; there is no implicit broadcasting.

#include <cstddef>
#include <vector>

#include "irt/tensor.hpp"

namespace irt::ops {

// x: [..., I], W: [I, O], b: [O] or undefined. Leading dims of x are
// flattened into rows; the result keeps them and replaces I with O.
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

Tensor relu(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor square(const Tensor& x);

// Sum of all elements -> scalar.
Tensor sum(const Tensor& x);
// Sum over the last axis.
Tensor sum_last(const Tensor& x);

// Numerically stable softmax along `axis` (max subtraction).
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax_last(const Tensor& x);

Tensor concat_last(const std::vector<Tensor>& parts);
Tensor slice_last(const Tensor& x, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& x, Shape shape);
// Stacks the rows (last-axis vectors) of every part -> [sum R_i, F].
Tensor concat_rows(const std::vector<Tensor>& parts);
// x: [R, F] (or any tensor viewed as rows of its last axis).
Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows);

// Normalizes over the last axis, then applies per-feature gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

// q, k, v: [G, T, d]. Each of the `heads` slices of width d/heads attends
// over the T tokens of its group. Scores are scaled by 1/sqrt(d/heads).
// Output heads are concatenated back to [G, T, d].
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            std::size_t heads);
// Attention probabilities [G, heads, T, T], values only.
std::vector<double> attention_probabilities(const Tensor& q, const Tensor& k,
                                            std::size_t heads);

// x: [H, W, C], w: [3, 3, C, O], b: [O]. Stride 1, zero padding 1.
Tensor conv3x3_same(const Tensor& x, const Tensor& w, const Tensor& b);

// Appends sin(2^k pi x), cos(2^k pi x), k < num_freqs, per input dim,
// after x itself when include_input. x: [..., D].
Tensor positional_encode(const Tensor& x, std::size_t num_freqs,
                         bool include_input);

struct VolumeRenderResult {
  Tensor value;                  // [B, C]
  std::vector<double> weights;   // [B, N]
  std::vector<double> residual;  // [B] transmittance past the last sample
};

// Discrete volume rendering: out = sum_i T_i (1 - exp(-delta_i sigma_i)) a_i
// with T_i = exp(-sum_{j<i} delta_j sigma_j).
// sigma: [B, N], attr: [B, N, C], deltas: [B, N] (values only).
VolumeRenderResult volume_render(const Tensor& sigma, const Tensor& attr,
                                 const std::vector<double>& deltas);

// Sum over rays of squared color error.
Tensor squared_error_sum(const Tensor& pred, const Tensor& target);
// -sum_r sum_l onehot_rl * log softmax(logits)_rl. Target must be one-hot.
Tensor cross_entropy_sum(const Tensor& logits, const Tensor& target_onehot);

}  // namespace irt::ops
