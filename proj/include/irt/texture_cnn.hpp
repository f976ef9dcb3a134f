#pragma once

// Full-resolution convolutional texture extractor over an RGB image, the
// per-ray feature gather and the auxiliary CNN classifier head.

#include <cstdint>
#include <json.hpp>
#include <string>
#include <utility>
#include <vector>

#include "irt/params.hpp"

namespace irt {

struct CnnConfig {
  std::size_t hidden_channels = 32;
  std::size_t feature_channels = 32;  // Fc
  std::size_t stages = 4;             // 3x3 convolutions, stride 1, zero padding
};

void to_json(nlohmann::json& j, const CnnConfig& c);
void from_json(const nlohmann::json& j, CnnConfig& c);

inline const std::string kCnnPrefix = "cnn/";

void init_texture_cnn(ParamStore& store, const CnnConfig& config, std::size_t num_classes,
                      std::uint64_t seed);

// image: [H, W, 3] in [0, 1] -> [H, W, Fc]. ReLU follows every stage but the last.
Tensor cnn_forward(const ParamFn& params, const CnnConfig& config, const Tensor& image);

struct PixelIndex {
  int col = 0;
  int row = 0;
};

// Exact per-pixel gather from [H, W, Fc] -> [B, Fc]. Throws kDomain out of bounds.
Tensor gather_ray_features(const Tensor& feat_map, const std::vector<PixelIndex>& pixels);

// Auxiliary classifier on gathered CNN features -> [B, L].
Tensor cnn_classify(const ParamFn& params, const Tensor& features);

}  // namespace irt
