#pragma once

// Two-stage training: color field over all training views, then the
// semantic branch (ray transformer, texture CNN, seg head) over the labeled
// views with the spatial trunk frozen. Also full-frame rendering and
// held-out evaluation shared by the trainer and the CLI.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "irt/checkpoint.hpp"
#include "irt/dataset.hpp"
#include "irt/metrics.hpp"
#include "irt/neural_field.hpp"
#include "irt/ray_transformer.hpp"
#include "irt/texture_cnn.hpp"

namespace irt {

struct ModelConfig {
  FieldConfig field;
  RayTransformerConfig rt;
  CnnConfig cnn;
  std::size_t num_coarse = 64;
  std::size_t num_fine = 128;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct TrainConfig {
  std::int64_t iterations_1 = 20000;
  std::int64_t iterations_2 = 5000;
  std::size_t batch_rays = 1024;
  AdamConfig adam_1;
  AdamConfig adam_2;
  Variant variant = Variant::kRTTC;
  std::uint64_t seed = 0;
  std::int64_t checkpoint_every = 0;  // 0 disables periodic checkpoints
  std::int64_t eval_every = 1000;     // 0 disables periodic evaluation
  std::size_t eval_views = 4;
  std::int64_t log_every = 100;
  std::size_t workers = 1;

  // Throws kConfiguration on negative iterations or an empty batch.
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);
// Missing keys keep their defaults. Throws kIo / kConfiguration.
RunConfig load_run_config(const std::filesystem::path& path);
// Reduced network and sampling sizes for the micro-town scene.
RunConfig micro_town_config();

inline constexpr char kColorStage[] = "color";
inline constexpr char kSegStage[] = "seg";

struct StepRecord {
  std::int64_t step = 0;
  double loss = 0.0;    // per ray, summed over the supervised terms
  double metric = 0.0;  // batch PSNR (color) or batch mIoU (seg)
};

struct EvalRecord {
  std::int64_t step = 0;
  double metric = 0.0;  // held-out PSNR (color) or mIoU (seg)
};

struct TrainOptions {
  std::filesystem::path out_dir;       // periodic checkpoints go to out_dir/ckpt
  std::ostream* log = nullptr;         // `step loss metric` lines
  const Checkpoint* resume = nullptr;  // continue from this checkpoint
};

struct StageOutcome {
  Checkpoint checkpoint;
  std::vector<StepRecord> steps;  // every step
  std::vector<EvalRecord> evals;
};

// Fresh parameters for one stage, derived from the seed only.
ParamStore init_color_params(const ModelConfig& model, std::uint64_t seed);
ParamStore init_seg_params(const ModelConfig& model, std::size_t num_classes,
                           std::uint64_t seed);

StageOutcome train_color(const Dataset& data, const RunConfig& config,
                         const TrainOptions& options = {});

// `color` must be a color (or seg) checkpoint whose bounds match the
// manifest. Throws kCheckpoint on incompatibility, kConfiguration when the
// model config disagrees with the checkpoint or a resume point was trained
// with another variant.
StageOutcome train_seg(const Dataset& data, const Checkpoint& color, const RunConfig& config,
                       const TrainOptions& options = {});

enum class RenderMode { kRgb, kSemantic, kDepth };
RenderMode parse_render_mode(const std::string& name);

struct RenderedFrame {
  int width = 0;
  int height = 0;
  std::vector<double> rgb;    // [H, W, 3]
  std::vector<double> depth;  // [H, W] expected termination depth
  std::vector<int> labels;    // [H, W], semantic mode only
  std::vector<double> logits; // [H, W, L], semantic mode only
  std::size_t num_classes = 0;
};

class Renderer {
 public:
  Renderer(const Checkpoint& checkpoint, const DatasetManifest& manifest);

  bool has_semantics() const { return has_semantics_; }
  Variant variant() const { return variant_; }

  // `texture` is the CNN input for semantic mode; without one the frame's own
  // rendered color is used. Throws kCapability for semantic mode on a
  // color-only checkpoint.
  RenderedFrame render(const Camera& camera, RenderMode mode,
                       const Image* texture = nullptr) const;

 private:
  ModelConfig model_;
  ParamStore params_;
  SceneNormalization norm_;
  double near_ = 0.0;
  double far_ = 1.0;
  std::size_t num_classes_ = 0;
  bool has_semantics_ = false;
  Variant variant_ = Variant::kB;
};

// Held-out views in manifest order, at most `limit` of them (0 = all).
std::vector<std::size_t> heldout_views(const DatasetManifest& manifest, std::size_t limit = 0);

// Mean PSNR of color renders against the stored images.
double heldout_psnr(const Dataset& data, const Checkpoint& checkpoint, std::size_t limit = 0);

// Confusion of semantic renders against evaluation labels; the stored view
// image is the CNN input.
ConfusionMatrix heldout_confusion(const Dataset& data, const Checkpoint& checkpoint,
                                  std::size_t limit = 0);

}  // namespace irt
