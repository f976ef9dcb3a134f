#include "irt/dataset.hpp"

#include <gtest/gtest.h>
#include <unistd.h>

#include <cmath>
#include <fstream>

#include "irt/errors.hpp"

namespace irt {
namespace {

namespace fs = std::filesystem;

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::kUsage;  // "no error" marker for these tests
}

class DatasetTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / ("irt_dataset_" + std::to_string(::getpid()));
    MicroTownOptions o;
    o.width = o.height = 16;
    const SceneOracle s = micro_town();
    make_scene_dataset(s, micro_town_rig(s, o), root_);
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  // Copies the dataset and applies `edit` to its manifest JSON.
  fs::path variant(const std::string& name, const std::function<void(nlohmann::json&)>& edit) {
    const fs::path dir = root_.string() + "_" + name;
    fs::remove_all(dir);
    fs::copy(root_, dir, fs::copy_options::recursive);
    nlohmann::json j = nlohmann::json::parse(std::ifstream(dir / kManifestName));
    edit(j);
    std::ofstream(dir / kManifestName) << j.dump(2);
    cleanup_.push_back(dir);
    return dir;
  }
  void TearDown() override {
    for (const auto& d : cleanup_) fs::remove_all(d);
  }

  static fs::path root_;
  std::vector<fs::path> cleanup_;
};

fs::path DatasetTest::root_;

TEST_F(DatasetTest, MicroTownLoads) {
  const Dataset d = load_dataset(root_);
  EXPECT_EQ(d.manifest.views.size(), 12u);
  EXPECT_EQ(d.manifest.labeled_views().size(), 2u);
  EXPECT_EQ(d.manifest.views_in(Split::kTrain).size(), 8u);
  EXPECT_EQ(d.manifest.num_classes(), 5u);
  EXPECT_EQ(load_manifest(root_ / kManifestName).views.size(), 12u);
}

TEST_F(DatasetTest, RoundTripIsBitExact) {
  const Dataset d = load_dataset(root_);
  const DatasetManifest back = manifest_from_json(manifest_to_json(d.manifest));
  EXPECT_EQ(manifest_to_json(back), manifest_to_json(d.manifest));
  for (std::size_t i = 0; i < back.views.size(); ++i) {
    const Camera& a = back.views[i].camera;
    const Camera& b = d.manifest.views[i].camera;
    EXPECT_EQ(a.R, b.R);
    EXPECT_EQ(a.t, b.t);
    EXPECT_EQ(a.f, b.f);
    EXPECT_EQ(a.u0, b.u0);
  }
  EXPECT_EQ(back.near, d.manifest.near);
  EXPECT_EQ(back.bounds_min, d.manifest.bounds_min);
}

TEST_F(DatasetTest, LabelsDecodeToPaletteIds) {
  const Dataset d = load_dataset(root_);
  const SceneOracle s = micro_town();
  MicroTownOptions o;
  o.width = o.height = 16;
  const CameraRig rig = micro_town_rig(s, o);
  for (std::size_t v : d.manifest.labeled_views()) {
    const RenderedView ref = reference_render(s, rig.train[v], d.manifest.near, d.manifest.far);
    EXPECT_EQ(d.labels[v]->ids, ref.labels);
  }
}

TEST_F(DatasetTest, ReflectionIsRotationError) {
  const fs::path dir = variant("reflect", [](nlohmann::json& j) {
    for (auto& x : j["views"][3]["camera"]["R"][0]) x = -x.get<double>();
  });
  EXPECT_EQ(code_of([&] { load_dataset(dir); }), ErrorCode::kRotation);
}

TEST_F(DatasetTest, SmallDriftIsRepairedLargeDriftRejected) {
  const fs::path small = variant("drift_small", [](nlohmann::json& j) {
    j["views"][0]["camera"]["R"][0][1] = j["views"][0]["camera"]["R"][0][1].get<double>() + 2e-7;
  });
  const Dataset d = load_dataset(small);
  EXPECT_LT(orthonormality_error(d.manifest.views[0].camera.R), 1e-12);
  const fs::path large = variant("drift_large", [](nlohmann::json& j) {
    j["views"][0]["camera"]["R"][0][1] = j["views"][0]["camera"]["R"][0][1].get<double>() + 1e-3;
  });
  EXPECT_EQ(code_of([&] { load_dataset(large); }), ErrorCode::kRotation);
}

TEST_F(DatasetTest, DistinctErrorCodes) {
  EXPECT_EQ(code_of([&] { load_dataset(root_ / "nowhere"); }), ErrorCode::kIo);
  const fs::path schema = variant("schema", [](nlohmann::json& j) { j.erase("views"); });
  EXPECT_EQ(code_of([&] { load_dataset(schema); }), ErrorCode::kSchema);
  const fs::path mistyped = variant("mistyped", [](nlohmann::json& j) { j["bounds"]["near"] = "x"; });
  EXPECT_EQ(code_of([&] { load_dataset(mistyped); }), ErrorCode::kSchema);
  const fs::path gap = variant("gap", [](nlohmann::json& j) { j["palette"][2]["id"] = 7; });
  EXPECT_EQ(code_of([&] { load_dataset(gap); }), ErrorCode::kPalette);
  // Shrinking the palette leaves label ids without a class.
  const fs::path stray = variant("stray", [](nlohmann::json& j) {
    j["palette"].erase(4);
  });
  EXPECT_EQ(code_of([&] { load_dataset(stray); }), ErrorCode::kPalette);
  const fs::path missing = variant("missing", [](nlohmann::json& j) {
    j["views"][1]["image"] = "images/none.ppm";
  });
  EXPECT_EQ(code_of([&] { load_dataset(missing); }), ErrorCode::kIo);
}

TEST(ManifestTest, LargeSceneConfigurationValidates) {
  // 100 views of 512x512, 3 of them labeled, 20 classes.
  DatasetManifest m;
  m.scene = "sys1";
  m.near = 0.5;
  m.far = 50.0;
  m.bounds_min = {-20, -20, -1};
  m.bounds_max = {20, 20, 10};
  for (int c = 0; c < 20; ++c) m.palette.push_back({c, "class" + std::to_string(c), {c, c, c}});
  for (int v = 0; v < 100; ++v) {
    ViewRecord r;
    r.image = "images/" + std::to_string(v) + ".ppm";
    const double a = 0.0628 * v;
    r.camera = Camera::look_at({30 * std::cos(a), 30 * std::sin(a), 15}, {0, 0, 0}, {0, 0, 1},
                               600.0, 512, 512);
    if (v % 40 == 0) r.label = "labels/" + std::to_string(v) + ".pgm";
    m.views.push_back(r);
  }
  DatasetManifest parsed = manifest_from_json(manifest_to_json(m));
  EXPECT_NO_THROW(validate_manifest_fields(parsed));
  EXPECT_EQ(parsed.labeled_views().size(), 3u);
  EXPECT_EQ(parsed.num_classes(), 20u);
}

TEST(RasterTest, PpmAndPgmRoundTrip) {
  const fs::path dir = fs::temp_directory_path() / ("irt_raster_" + std::to_string(::getpid()));
  Image img{3, 2, {}};
  for (int i = 0; i < 18; ++i) img.rgb.push_back(i / 17.0);
  write_ppm(dir / "a.ppm", img);
  const Image back = read_ppm(dir / "a.ppm");
  ASSERT_EQ(back.rgb.size(), img.rgb.size());
  for (std::size_t i = 0; i < img.rgb.size(); ++i) EXPECT_NEAR(back.rgb[i], img.rgb[i], 0.5 / 255);
  const LabelMap l{3, 2, {0, 1, 2, 3, 4, 254}};
  write_pgm(dir / "a.pgm", l);
  EXPECT_EQ(read_pgm(dir / "a.pgm").ids, l.ids);
  EXPECT_EQ(code_of([&] { read_pgm(dir / "a.ppm"); }), ErrorCode::kIo);
  fs::remove_all(dir);
}

// In-memory dataset of `n` train views, 8x8 each, with view 0 labeled when
// `labeled` is set.
Dataset synthetic(int n, bool labeled) {
  Dataset d;
  d.manifest.palette = {{0, "a", {0, 0, 0}}, {1, "b", {1, 1, 1}}};
  d.manifest.near = 1.0;
  d.manifest.far = 5.0;
  for (int v = 0; v < n; ++v) {
    ViewRecord r;
    const double a = 6.283185307179586 * v / n;
    r.camera = Camera::look_at({3 * std::cos(a), 3 * std::sin(a), 1}, {0, 0, 0}, {0, 0, 1}, 8, 8, 8);
    if (labeled && v == 0) r.label = "x";
    d.manifest.views.push_back(r);
    d.images.push_back({8, 8, std::vector<double>(192, 0.5)});
    d.labels.push_back(labeled && v == 0 ? std::optional<LabelMap>(LabelMap{8, 8, std::vector<int>(64, 1)})
                                         : std::nullopt);
    d.eval_labels.push_back(std::nullopt);
  }
  return d;
}

TEST(RaySamplerTest, ViewHistogramIsUniform) {
  const Dataset d = synthetic(12, false);
  const RaySampler s(d, TrainStage::kColor);
  std::mt19937_64 rng(3);
  std::vector<double> counts(12, 0.0);
  for (int b = 0; b < 100; ++b) {
    for (std::size_t v : s.next(1024, rng).views) counts[v] += 1.0;
  }
  const double n = 102400.0, p = 1.0 / 12.0;
  const double sd = std::sqrt(n * p * (1 - p));
  for (double c : counts) EXPECT_LE(std::abs(c - n * p), 3 * sd);
}

TEST(RaySamplerTest, RaysRoundTripToTheirPixels) {
  const Dataset d = synthetic(4, false);
  const RaySampler s(d, TrainStage::kColor);
  std::mt19937_64 rng(4);
  const RayBatch b = s.next(500, rng);
  for (std::size_t i = 0; i < b.rays.size(); ++i) {
    const Eigen::Vector3d p = b.rays[i].origin + 2.5 * b.rays[i].direction;
    const PixelProjection px = world_to_pixel(d.manifest.views[b.views[i]].camera, p);
    EXPECT_NEAR(px.u, b.pixels[i].col + 0.5, 1e-6);
    EXPECT_NEAR(px.v, b.pixels[i].row + 0.5, 1e-6);
  }
}

TEST_F(DatasetTest, SegStageOnlyUsesLabeledViews) {
  const Dataset d = load_dataset(root_);
  const RaySampler s(d, TrainStage::kSeg);
  std::mt19937_64 rng(5);
  const auto labeled = d.manifest.labeled_views();
  const RayBatch b = s.next(4000, rng);
  for (std::size_t i = 0; i < b.views.size(); ++i) {
    ASSERT_NE(std::find(labeled.begin(), labeled.end(), b.views[i]), labeled.end());
    const auto& l = *d.labels[b.views[i]];
    EXPECT_EQ(b.labels[i], l.ids[static_cast<std::size_t>(b.pixels[i].row * l.width + b.pixels[i].col)]);
  }
}

TEST(RaySamplerTest, SegWithoutLabelsIsConfigurationError) {
  const Dataset d = synthetic(3, false);
  EXPECT_EQ(code_of([&] { RaySampler(d, TrainStage::kSeg); }), ErrorCode::kConfiguration);
  const Dataset l = synthetic(3, true);
  std::mt19937_64 rng(6);
  const RayBatch b = RaySampler(l, TrainStage::kSeg).next(50, rng);
  for (std::size_t v : b.views) EXPECT_EQ(v, 0u);
}

}  // namespace
}  // namespace irt
