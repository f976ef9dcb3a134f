#include "irt/ray_transformer.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "irt/errors.hpp"

namespace irt {

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::kB: return "B";
    case Variant::kRT: return "RT";
    case Variant::kRTT: return "RTT";
    case Variant::kRTC: return "RTC";
    case Variant::kRTTC: return "RTTC";
  }
  return "?";
}

Variant parse_variant(const std::string& name) {
  for (Variant v : kAllVariants) {
    if (variant_name(v) == name) return v;
  }
  fail(ErrorCode::kUsage, "unknown variant '" + name + "' (expected B, RT, RTT, RTC or RTTC)");
}

void to_json(nlohmann::json& j, const RayTransformerConfig& c) {
  j = {{"k", c.k},           {"model_dim", c.model_dim}, {"heads", c.heads},
       {"layers", c.layers}, {"mlp_ratio", c.mlp_ratio}, {"semantic_dim", c.semantic_dim}};
}

void from_json(const nlohmann::json& j, RayTransformerConfig& c) {
  RayTransformerConfig d;
  c.k = j.value("k", d.k);
  c.model_dim = j.value("model_dim", d.model_dim);
  c.heads = j.value("heads", d.heads);
  c.layers = j.value("layers", d.layers);
  c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
  c.semantic_dim = j.value("semantic_dim", d.semantic_dim);
}

Selection select_valid(const Tensor& sigma, const Tensor& feats,
                       const std::vector<double>& deltas, std::size_t k) {
  if (sigma.rank() != 2 || feats.rank() != 3 || feats.dim(0) != sigma.dim(0) ||
      feats.dim(1) != sigma.dim(1) || deltas.size() != sigma.numel()) {
    fail(ErrorCode::kDimension, "select_valid: expected sigma [B,N], feats [B,N,F], deltas [B,N]");
  }
  const std::size_t B = sigma.dim(0), N = sigma.dim(1), F = feats.dim(2);
  if (k < 1 || k > N) {
    fail(ErrorCode::kContract, "select_valid: need 1 <= k <= N, got k=" + std::to_string(k));
  }
  Selection sel;
  sel.index.resize(B * k);
  sel.deltas.resize(B * k);
  std::vector<std::size_t> order(N);
  std::vector<std::size_t> rows(B * k);
  for (std::size_t b = 0; b < B; ++b) {
    std::iota(order.begin(), order.end(), 0);
    const double* s = sigma.values().data() + b * N;
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [s](std::size_t x, std::size_t y) { return s[x] > s[y] || (s[x] == s[y] && x < y); });
    std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    for (std::size_t j = 0; j < k; ++j) {
      sel.index[b * k + j] = order[j];
      sel.deltas[b * k + j] = deltas[b * N + order[j]];
      rows[b * k + j] = b * N + order[j];
    }
  }
  sel.feats = ops::reshape(ops::gather_rows(feats, rows), {B, k, F});
  sel.sigma = ops::reshape(ops::gather_rows(ops::reshape(sigma, {B * N, 1}), rows), {B, k});
  return sel;
}

namespace {

std::string layer_prefix(std::size_t l) { return kRtPrefix + "l" + std::to_string(l) + "/"; }

}  // namespace

void init_ray_transformer(ParamStore& store, const RayTransformerConfig& c,
                          std::size_t feature_dim, std::size_t cnn_dim, std::size_t num_classes,
                          std::uint64_t seed) {
  if (c.heads == 0 || c.model_dim % c.heads != 0) {
    fail(ErrorCode::kConfiguration, "ray transformer: model_dim must be divisible by heads");
  }
  std::mt19937_64 rng(seed);
  const std::size_t d = c.model_dim, h = c.mlp_ratio * c.model_dim;
  auto linear = [&](const std::string& name, std::size_t in, std::size_t out) {
    store.set(name + "/W", glorot_uniform(in, out, rng));
    store.set(name + "/b", filled({out}, 0.0));
  };
  auto norm = [&](const std::string& name) {
    store.set(name + "/g", filled({d}, 1.0));
    store.set(name + "/b", filled({d}, 0.0));
  };
  linear(kRtPrefix + "in", feature_dim, d);
  linear(kRtPrefix + "tok", cnn_dim, d);
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string p = layer_prefix(l);
    norm(p + "ln1");
    linear(p + "q", d, d);
    linear(p + "k", d, d);
    linear(p + "v", d, d);
    linear(p + "o", d, d);
    norm(p + "ln2");
    linear(p + "mlp1", d, h);
    linear(p + "mlp2", h, d);
  }
  norm(kRtPrefix + "ln_f");
  linear(kRtPrefix + "out", d, c.semantic_dim);
  store.set(kSegPrefix + "Ws", glorot_uniform(c.semantic_dim, num_classes, rng));
  store.set(kSegPrefix + "Wc", glorot_uniform(cnn_dim, num_classes, rng));
  store.set(kSegPrefix + "b", filled({num_classes}, 0.0));
}

Tensor msa_layer(const ParamFn& p, std::size_t layer, const Tensor& x, std::size_t heads) {
  const std::string n = layer_prefix(layer);
  auto lin = [&](const Tensor& t, const std::string& name) {
    return ops::affine(t, p(n + name + "/W"), p(n + name + "/b"));
  };
  const Tensor a = ops::layer_norm(x, p(n + "ln1/g"), p(n + "ln1/b"));
  const Tensor att = ops::multi_head_attention(lin(a, "q"), lin(a, "k"), lin(a, "v"), heads);
  const Tensor x1 = ops::add(x, lin(att, "o"));
  const Tensor m = ops::layer_norm(x1, p(n + "ln2/g"), p(n + "ln2/b"));
  return ops::add(x1, lin(ops::relu(lin(m, "mlp1")), "mlp2"));
}

Tensor ray_transform(const ParamFn& p, const RayTransformerConfig& c, const Tensor& sel_feats,
                     const Tensor& cnn_token, Variant variant) {
  if (sel_feats.rank() != 3) fail(ErrorCode::kDimension, "ray_transform: sel_feats must be [B,k,F]");
  if (uses_texture_token(variant) != cnn_token.defined()) {
    fail(ErrorCode::kContract, "ray_transform: variant " + variant_name(variant) +
                                   (cnn_token.defined() ? " takes no" : " requires a") +
                                   " texture token");
  }
  const std::size_t B = sel_feats.dim(0), k = sel_feats.dim(1), d = c.model_dim;
  const Tensor x = ops::affine(sel_feats, p(kRtPrefix + "in/W"), p(kRtPrefix + "in/b"));
  if (!uses_attention(variant)) {
    return ops::affine(ops::relu(x), p(kRtPrefix + "out/W"), p(kRtPrefix + "out/b"));
  }
  Tensor tokens = x;
  std::size_t T = k;
  if (cnn_token.defined()) {
    if (cnn_token.rank() != 2 || cnn_token.dim(0) != B) {
      fail(ErrorCode::kDimension, "ray_transform: cnn_token must be [B,Fc]");
    }
    const Tensor tok = ops::affine(cnn_token, p(kRtPrefix + "tok/W"), p(kRtPrefix + "tok/b"));
    // Rows 0..B*k-1 are point tokens, B*k+b is ray b's texture token.
    std::vector<std::size_t> order;
    order.reserve(B * (k + 1));
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t i = 0; i < k; ++i) order.push_back(b * k + i);
      order.push_back(B * k + b);
    }
    T = k + 1;
    tokens = ops::reshape(ops::gather_rows(ops::concat_rows({x, tok}), order), {B, T, d});
  }
  for (std::size_t l = 0; l < c.layers; ++l) tokens = msa_layer(p, l, tokens, c.heads);
  tokens = ops::layer_norm(tokens, p(kRtPrefix + "ln_f/g"), p(kRtPrefix + "ln_f/b"));
  if (T != k) {
    std::vector<std::size_t> keep;
    keep.reserve(B * k);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t i = 0; i < k; ++i) keep.push_back(b * T + i);
    }
    tokens = ops::reshape(ops::gather_rows(tokens, keep), {B, k, d});
  }
  return ops::affine(tokens, p(kRtPrefix + "out/W"), p(kRtPrefix + "out/b"));
}

Tensor fuse_and_classify(const ParamFn& p, const Tensor& rendered, const Tensor& cnn_feat,
                         Variant variant) {
  if (uses_texture_concat(variant) != cnn_feat.defined()) {
    fail(ErrorCode::kContract, "fuse_and_classify: variant " + variant_name(variant) +
                                   (cnn_feat.defined() ? " takes no" : " requires") +
                                   " texture features");
  }
  // concat(S, C) @ [Ws; Wc] + b, written blockwise.
  Tensor logits = ops::affine(rendered, p(kSegPrefix + "Ws"), p(kSegPrefix + "b"));
  if (cnn_feat.defined()) {
    logits = ops::add(logits, ops::affine(cnn_feat, p(kSegPrefix + "Wc"), Tensor()));
  }
  return logits;
}

Tensor seg_loss(const Tensor& logits, const Tensor& cnn_logits, const Tensor& target) {
  Tensor loss = ops::cross_entropy_sum(logits, target);
  if (cnn_logits.defined()) loss = ops::add(loss, ops::cross_entropy_sum(cnn_logits, target));
  return loss;
}

Tensor one_hot(const std::vector<int>& labels, std::size_t num_classes) {
  std::vector<double> v(labels.size() * num_classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      fail(ErrorCode::kPalette, "label " + std::to_string(labels[i]) + " outside the palette");
    }
    v[i * num_classes + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return Tensor::constant({labels.size(), num_classes}, std::move(v));
}

}  // namespace irt
