#pragma once

// On-disk dataset: a JSON manifest (`scene.manifest`) of posed views, 8-bit
// binary PPM images and 8-bit PGM class-id label rasters, plus the ray
// sampler feeding both training stages.

#include <Eigen/Core>
#include <filesystem>
#include <json.hpp>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "irt/geometry.hpp"
#include "irt/scene_oracle.hpp"
#include "irt/texture_cnn.hpp"

namespace irt {

inline constexpr char kManifestName[] = "scene.manifest";
inline constexpr int kManifestVersion = 1;

// Views whose camera drifted from orthonormal by less than this are repaired.
inline constexpr double kRotationRepairTolerance = 1e-6;

struct PaletteEntry {
  int id = 0;
  std::string name;
  std::array<int, 3> rgb = {0, 0, 0};
};

enum class Split { kTrain, kHoldout };

struct ViewRecord {
  std::string image;                      // relative to the dataset root
  std::optional<std::string> label;       // sparse training label (M of N views)
  std::optional<std::string> eval_label;  // evaluation-only ground truth
  Split split = Split::kTrain;
  Camera camera;
};

struct DatasetManifest {
  std::string scene;
  double near = 0.1;
  double far = 10.0;
  Eigen::Vector3d bounds_min = -Eigen::Vector3d::Ones();
  Eigen::Vector3d bounds_max = Eigen::Vector3d::Ones();
  std::vector<PaletteEntry> palette;
  int background_class = 0;
  std::vector<ViewRecord> views;

  std::size_t num_classes() const { return palette.size(); }
  std::vector<std::size_t> views_in(Split split) const;
  std::vector<std::size_t> labeled_views() const;
};

nlohmann::json manifest_to_json(const DatasetManifest& m);
// Throws kSchema on missing or mistyped fields.
DatasetManifest manifest_from_json(const nlohmann::json& j);

// Checks everything that does not need file contents: palette density,
// rotations (repairing small drift in place), bounds, intrinsics.
void validate_manifest_fields(DatasetManifest& m);

void write_manifest(const DatasetManifest& m, const std::filesystem::path& path);
// Loads and fully validates, including label rasters against the palette.
DatasetManifest load_manifest(const std::filesystem::path& path);

struct Image {
  int width = 0;
  int height = 0;
  std::vector<double> rgb;  // [H, W, 3] in [0, 1]
};

struct LabelMap {
  int width = 0;
  int height = 0;
  std::vector<int> ids;  // [H, W]
};

void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const LabelMap& labels);
LabelMap read_pgm(const std::filesystem::path& path);

struct Dataset {
  std::filesystem::path root;
  DatasetManifest manifest;
  std::vector<Image> images;
  std::vector<std::optional<LabelMap>> labels;
  std::vector<std::optional<LabelMap>> eval_labels;

  Ray pixel_ray(std::size_t view, int col, int row) const;
};

Dataset load_dataset(const std::filesystem::path& root);

// Renders every rig camera with the closed-form renderer and writes a full
// dataset under `root`: images for all views, training labels for the
// rig's labeled views, evaluation labels for every view.
DatasetManifest make_scene_dataset(const SceneOracle& scene, const CameraRig& rig,
                                   const std::filesystem::path& root);

enum class TrainStage { kColor, kSeg };

struct RayBatch {
  std::vector<Ray> rays;
  std::vector<double> rgb;  // [B, 3]
  std::vector<int> labels;  // [B], seg stage only
  std::vector<PixelIndex> pixels;
  std::vector<std::size_t> views;
};

// Color stage: uniform over every pixel of every training-split view.
// Seg stage: uniform over the pixels of the labeled views only.
class RaySampler {
 public:
  RaySampler(const Dataset& data, TrainStage stage);
  RayBatch next(std::size_t batch, std::mt19937_64& rng) const;
  const std::vector<std::size_t>& source_views() const { return views_; }

 private:
  const Dataset& data_;
  TrainStage stage_;
  std::vector<std::size_t> views_;
  std::vector<std::size_t> offsets_;  // prefix sums of pixel counts
};

}  // namespace irt
