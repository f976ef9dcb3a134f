#include "irt/neural_field.hpp"

#include <random>

#include "irt/errors.hpp"

namespace irt {

void to_json(nlohmann::json& j, const FieldConfig& c) {
  j = {{"num_freqs_pos", c.encoding.num_freqs_pos},
       {"num_freqs_dir", c.encoding.num_freqs_dir},
       {"include_input", c.encoding.include_input},
       {"trunk_depth", c.trunk_depth},
       {"trunk_width", c.trunk_width},
       {"skip_layer", c.skip_layer},
       {"feature_dim", c.feature_dim},
       {"dir_width", c.dir_width},
       {"density_bias", c.density_bias}};
}

void from_json(const nlohmann::json& j, FieldConfig& c) {
  FieldConfig d;
  c.encoding.num_freqs_pos = j.value("num_freqs_pos", d.encoding.num_freqs_pos);
  c.encoding.num_freqs_dir = j.value("num_freqs_dir", d.encoding.num_freqs_dir);
  c.encoding.include_input = j.value("include_input", d.encoding.include_input);
  c.trunk_depth = j.value("trunk_depth", d.trunk_depth);
  c.trunk_width = j.value("trunk_width", d.trunk_width);
  c.skip_layer = j.value("skip_layer", d.skip_layer);
  c.feature_dim = j.value("feature_dim", d.feature_dim);
  c.dir_width = j.value("dir_width", d.dir_width);
  c.density_bias = j.value("density_bias", d.density_bias);
}

std::vector<std::string> FieldFreeze::trainable_prefixes() const {
  std::vector<std::string> out;
  if (!trunk) out.push_back(kTrunkPrefix);
  if (!direction) out.push_back(kDirectionPrefix);
  return out;
}

SceneNormalization SceneNormalization::from_bounds(const Eigen::Vector3d& lo,
                                                   const Eigen::Vector3d& hi) {
  SceneNormalization n;
  n.center = 0.5 * (lo + hi);
  n.half_extent = 0.5 * (hi - lo);
  return n;
}

std::vector<double> SceneNormalization::apply(const std::vector<double>& positions) const {
  std::vector<double> out(positions.size());
  for (std::size_t i = 0; i < positions.size(); i += 3) {
    for (int k = 0; k < 3; ++k) out[i + k] = (positions[i + k] - center[k]) / half_extent[k];
  }
  return out;
}

namespace {

std::string layer_name(std::size_t i) { return kTrunkPrefix + "l" + std::to_string(i) + "/"; }

}  // namespace

void NeuralField::init(ParamStore& store, std::uint64_t seed) const {
  const auto& c = config_;
  if (c.trunk_depth == 0) fail(ErrorCode::kConfiguration, "field: trunk_depth must be >= 1");
  std::mt19937_64 rng(seed);
  const std::size_t pe_pos = c.encoding.encoded_dim(3, c.encoding.num_freqs_pos);
  const std::size_t pe_dir = c.encoding.encoded_dim(3, c.encoding.num_freqs_dir);
  for (std::size_t i = 0; i < c.trunk_depth; ++i) {
    std::size_t in = i == 0 ? pe_pos : c.trunk_width;
    if (i == c.skip_layer && i > 0) in += pe_pos;
    store.set(layer_name(i) + "W", glorot_uniform(in, c.trunk_width, rng));
    store.set(layer_name(i) + "b", filled({c.trunk_width}, 0.0));
  }
  store.set(kTrunkPrefix + "sigma/W", glorot_uniform(c.trunk_width, 1, rng));
  store.set(kTrunkPrefix + "sigma/b", filled({1}, c.density_bias));
  store.set(kTrunkPrefix + "feat/W", glorot_uniform(c.trunk_width, c.feature_dim, rng));
  store.set(kTrunkPrefix + "feat/b", filled({c.feature_dim}, 0.0));
  store.set(kDirectionPrefix + "l0/W", glorot_uniform(c.feature_dim + pe_dir, c.dir_width, rng));
  store.set(kDirectionPrefix + "l0/b", filled({c.dir_width}, 0.0));
  store.set(kDirectionPrefix + "rgb/W", glorot_uniform(c.dir_width, 3, rng));
  store.set(kDirectionPrefix + "rgb/b", filled({3}, 0.0));
}

FieldOutput NeuralField::forward(const ParamFn& p, const Tensor& positions,
                                 const Tensor& dirs) const {
  const auto& c = config_;
  if (positions.rank() != 3 || positions.dim(2) != 3) {
    fail(ErrorCode::kDimension, "field: positions must be [B,N,3], got " +
                                    shape_str(positions.shape()));
  }
  const std::size_t B = positions.dim(0), N = positions.dim(1);
  std::size_t layer = 0;
  try {
    const Tensor pe = c.encoding.encode(positions, c.encoding.num_freqs_pos);
    Tensor h = pe;
    for (layer = 0; layer < c.trunk_depth; ++layer) {
      if (layer == c.skip_layer && layer > 0) h = ops::concat_last({h, pe});
      h = ops::relu(ops::affine(h, p(layer_name(layer) + "W"), p(layer_name(layer) + "b")));
    }
    FieldOutput out;
    out.sigma = ops::reshape(
        ops::softplus(ops::affine(h, p(kTrunkPrefix + "sigma/W"), p(kTrunkPrefix + "sigma/b"))),
        {B, N});
    ++layer;
    out.feat = ops::affine(h, p(kTrunkPrefix + "feat/W"), p(kTrunkPrefix + "feat/b"));
    ++layer;
    if (dirs.defined()) {
      if (dirs.rank() != 2 || dirs.dim(0) != B || dirs.dim(1) != 3) {
        fail(ErrorCode::kDimension, "field: dirs must be [B,3]");
      }
      std::vector<double> expanded(B * N * 3);
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t i = 0; i < N; ++i) {
          for (int k = 0; k < 3; ++k) expanded[(b * N + i) * 3 + k] = dirs[b * 3 + k];
        }
      }
      const Tensor dir_pe = c.encoding.encode(Tensor::constant({B, N, 3}, std::move(expanded)),
                                              c.encoding.num_freqs_dir);
      Tensor hd = ops::relu(ops::affine(ops::concat_last({out.feat, dir_pe}),
                                        p(kDirectionPrefix + "l0/W"), p(kDirectionPrefix + "l0/b")));
      ++layer;
      out.color = ops::sigmoid(
          ops::affine(hd, p(kDirectionPrefix + "rgb/W"), p(kDirectionPrefix + "rgb/b")));
    }
    return out;
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kNumeric) throw;
    fail(ErrorCode::kNumeric, std::string(e.what()) + " in field layer " + std::to_string(layer));
  }
}

}  // namespace irt
