#include "irt/texture_cnn.hpp"

#include <random>

#include "irt/errors.hpp"
#include "irt/ops.hpp"

namespace irt {

void to_json(nlohmann::json& j, const CnnConfig& c) {
  j = {{"hidden_channels", c.hidden_channels},
       {"feature_channels", c.feature_channels},
       {"stages", c.stages}};
}

void from_json(const nlohmann::json& j, CnnConfig& c) {
  CnnConfig d;
  c.hidden_channels = j.value("hidden_channels", d.hidden_channels);
  c.feature_channels = j.value("feature_channels", d.feature_channels);
  c.stages = j.value("stages", d.stages);
}

namespace {

std::string stage_prefix(std::size_t s) { return kCnnPrefix + "c" + std::to_string(s) + "/"; }

}  // namespace

void init_texture_cnn(ParamStore& store, const CnnConfig& c, std::size_t num_classes,
                      std::uint64_t seed) {
  if (c.stages == 0) fail(ErrorCode::kConfiguration, "cnn: need at least one stage");
  std::mt19937_64 rng(seed);
  for (std::size_t s = 0; s < c.stages; ++s) {
    const std::size_t in = s == 0 ? 3 : c.hidden_channels;
    const std::size_t out = s + 1 == c.stages ? c.feature_channels : c.hidden_channels;
    // Glorot over the full 3x3 fan, stored as [3, 3, in, out].
    const Tensor w = glorot_uniform(9 * in, out, rng);
    store.set(stage_prefix(s) + "W", Tensor::constant({3, 3, in, out},
                                                      {w.values().begin(), w.values().end()}));
    store.set(stage_prefix(s) + "b", filled({out}, 0.0));
  }
  store.set(kCnnPrefix + "cls/W", glorot_uniform(c.feature_channels, num_classes, rng));
  store.set(kCnnPrefix + "cls/b", filled({num_classes}, 0.0));
}

Tensor cnn_forward(const ParamFn& p, const CnnConfig& c, const Tensor& image) {
  if (image.rank() != 3 || image.dim(2) != 3) {
    fail(ErrorCode::kDimension, "cnn_forward: image must be [H,W,3], got " +
                                    shape_str(image.shape()));
  }
  Tensor x = image;
  for (std::size_t s = 0; s < c.stages; ++s) {
    x = ops::conv3x3_same(x, p(stage_prefix(s) + "W"), p(stage_prefix(s) + "b"));
    if (s + 1 < c.stages) x = ops::relu(x);
  }
  return x;
}

Tensor gather_ray_features(const Tensor& feat_map, const std::vector<PixelIndex>& pixels) {
  if (feat_map.rank() != 3) fail(ErrorCode::kDimension, "gather_ray_features: map must be [H,W,C]");
  const int h = static_cast<int>(feat_map.dim(0)), w = static_cast<int>(feat_map.dim(1));
  std::vector<std::size_t> rows(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const auto [col, row] = pixels[i];
    if (col < 0 || row < 0 || col >= w || row >= h) {
      fail(ErrorCode::kDomain, "gather_ray_features: pixel (" + std::to_string(col) + ", " +
                                   std::to_string(row) + ") outside " + std::to_string(w) + "x" +
                                   std::to_string(h));
    }
    rows[i] = static_cast<std::size_t>(row) * static_cast<std::size_t>(w) +
              static_cast<std::size_t>(col);
  }
  return ops::gather_rows(feat_map, rows);
}

Tensor cnn_classify(const ParamFn& p, const Tensor& features) {
  return ops::affine(features, p(kCnnPrefix + "cls/W"), p(kCnnPrefix + "cls/b"));
}

}  // namespace irt
