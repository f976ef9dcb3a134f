#pragma once

// Stage-2 semantic head: density-based point selection, self-attention over
// the selected point features of each ray, semantic volume rendering, fusion
// with texture features and the segmentation losses.

#include <cstdint>
#include <json.hpp>
#include <string>
#include <vector>

#include "irt/ops.hpp"
#include "irt/params.hpp"

namespace irt {

enum class Variant { kB, kRT, kRTT, kRTC, kRTTC };

inline constexpr Variant kAllVariants[] = {Variant::kB, Variant::kRT, Variant::kRTT,
                                           Variant::kRTC, Variant::kRTTC};

std::string variant_name(Variant v);
// Throws kUsage for unknown names.
Variant parse_variant(const std::string& name);

// CNN feature appended as an extra attention token.
inline bool uses_texture_token(Variant v) { return v == Variant::kRTT || v == Variant::kRTTC; }
// CNN feature concatenated after semantic rendering.
inline bool uses_texture_concat(Variant v) { return v == Variant::kRTC || v == Variant::kRTTC; }
inline bool uses_cnn(Variant v) { return uses_texture_token(v) || uses_texture_concat(v); }
inline bool uses_attention(Variant v) { return v != Variant::kB; }

struct RayTransformerConfig {
  std::size_t k = 10;  // valid points per ray
  std::size_t model_dim = 64;
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t mlp_ratio = 2;
  std::size_t semantic_dim = 32;
};

void to_json(nlohmann::json& j, const RayTransformerConfig& c);
void from_json(const nlohmann::json& j, RayTransformerConfig& c);

inline const std::string kRtPrefix = "rt/";
inline const std::string kSegPrefix = "seg/";

struct Selection {
  Tensor feats;                // [B, k, F]
  Tensor sigma;                // [B, k]
  std::vector<double> deltas;  // [B, k], each selected sample keeps its own interval
  std::vector<std::size_t> index;  // [B, k] sample indices, increasing per ray
};

// Top-k density per ray, ties to the lower sample index, emitted in depth
// order. Gradients reach the selected features only.
Selection select_valid(const Tensor& sigma, const Tensor& feats,
                       const std::vector<double>& deltas, std::size_t k);

// Shapes of every stage-2 head parameter for the given sizes.
void init_ray_transformer(ParamStore& store, const RayTransformerConfig& config,
                          std::size_t feature_dim, std::size_t cnn_dim, std::size_t num_classes,
                          std::uint64_t seed);

// One pre-norm layer: x + MSA(LN(x)), then x + MLP(LN(x)). tokens: [B, T, d].
Tensor msa_layer(const ParamFn& params, std::size_t layer, const Tensor& tokens,
                 std::size_t heads);

// sel_feats: [B, k, F]; cnn_token: [B, Fc] for RTT/RTTC, undefined otherwise.
// Returns per-point semantic features [B, k, S].
Tensor ray_transform(const ParamFn& params, const RayTransformerConfig& config,
                     const Tensor& sel_feats, const Tensor& cnn_token, Variant variant);

// Semantic volume rendering over the selected points only -> [B, S].
inline Tensor render_semantic(const Tensor& point_semantics, const Tensor& sel_sigma,
                              const std::vector<double>& sel_deltas) {
  return ops::volume_render(sel_sigma, point_semantics, sel_deltas).value;
}

// cnn_feat: [B, Fc] for RTC/RTTC, undefined otherwise. -> [B, L].
Tensor fuse_and_classify(const ParamFn& params, const Tensor& rendered_semantics,
                         const Tensor& cnn_feat, Variant variant);

// Cross-entropy of the fused logits plus, when defined, of the CNN-path logits.
Tensor seg_loss(const Tensor& logits, const Tensor& cnn_logits, const Tensor& target_onehot);

Tensor one_hot(const std::vector<int>& labels, std::size_t num_classes);

}  // namespace irt
