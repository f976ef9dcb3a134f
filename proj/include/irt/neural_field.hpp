#pragma once

// Color field: positional encoding, spatial trunk (density + point feature),
// direction head (color), volume rendering and the photometric loss.

#include <Eigen/Core>
#include <cstdint>
#include <json.hpp>
#include <string>
#include <vector>

#include "irt/ops.hpp"
#include "irt/params.hpp"

namespace irt {

struct PositionalEncoding {
  std::size_t num_freqs_pos = 10;
  std::size_t num_freqs_dir = 4;
  bool include_input = true;

  std::size_t encoded_dim(std::size_t in_dim, std::size_t num_freqs) const {
    return in_dim * ((include_input ? 1 : 0) + 2 * num_freqs);
  }
  Tensor encode(const Tensor& x, std::size_t num_freqs) const {
    return ops::positional_encode(x, num_freqs, include_input);
  }
};

struct FieldConfig {
  PositionalEncoding encoding;
  std::size_t trunk_depth = 6;
  std::size_t trunk_width = 128;
  std::size_t skip_layer = 3;  // encoded input is re-injected before this layer
  std::size_t feature_dim = 128;
  std::size_t dir_width = 64;
  double density_bias = 0.0;  // initial pre-activation bias of the density head
};

void to_json(nlohmann::json& j, const FieldConfig& c);
void from_json(const nlohmann::json& j, FieldConfig& c);

inline const std::string kTrunkPrefix = "field/phi_s/";
inline const std::string kDirectionPrefix = "field/phi_d/";

// Which sub-networks receive gradients.
struct FieldFreeze {
  bool trunk = false;
  bool direction = false;
  std::vector<std::string> trainable_prefixes() const;
};

// Maps the scene bounding box onto [-1, 1]^3.
struct SceneNormalization {
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d half_extent = Eigen::Vector3d::Ones();

  static SceneNormalization from_bounds(const Eigen::Vector3d& lo, const Eigen::Vector3d& hi);
  // positions: flat [..., 3] world coordinates.
  std::vector<double> apply(const std::vector<double>& positions) const;
};

struct FieldOutput {
  Tensor sigma;  // [B, N], >= 0
  Tensor color;  // [B, N, 3] in (0, 1); undefined when not requested
  Tensor feat;   // [B, N, F] trunk feature consumed by the ray transformer
};

class NeuralField {
 public:
  explicit NeuralField(FieldConfig config) : config_(std::move(config)) {}

  const FieldConfig& config() const { return config_; }

  // Adds freshly initialized field parameters to `store`.
  void init(ParamStore& store, std::uint64_t seed) const;

  // positions: [B, N, 3] normalized coordinates; dirs: [B, 3] unit vectors.
  // Color is computed only when dirs is defined.
  FieldOutput forward(const ParamFn& params, const Tensor& positions,
                      const Tensor& dirs) const;

 private:
  FieldConfig config_;
};

// Volume rendering of any per-sample attribute (color, semantics).
inline ops::VolumeRenderResult render_ray(const Tensor& sigma, const Tensor& attr,
                                          const std::vector<double>& deltas) {
  return ops::volume_render(sigma, attr, deltas);
}

// Sum over rays of squared color error.
inline Tensor rgb_loss(const Tensor& pred, const Tensor& target) {
  return ops::squared_error_sum(pred, target);
}

}  // namespace irt
