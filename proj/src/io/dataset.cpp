#include "irt/dataset.hpp"

#include <Eigen/LU>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "irt/errors.hpp"

namespace irt {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<std::size_t> DatasetManifest::views_in(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < views.size(); ++i) {
    if (views[i].split == split) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> DatasetManifest::labeled_views() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < views.size(); ++i) {
    if (views[i].label) out.push_back(i);
  }
  return out;
}

namespace {

json camera_to_json(const Camera& c) {
  json r = json::array();
  for (int i = 0; i < 3; ++i) r.push_back({c.R(i, 0), c.R(i, 1), c.R(i, 2)});
  return {{"f", c.f},   {"dx", c.dx}, {"dy", c.dy}, {"u0", c.u0},
          {"v0", c.v0}, {"R", r},     {"t", {c.t.x(), c.t.y(), c.t.z()}},
          {"width", c.width}, {"height", c.height}};
}

Camera camera_from_json(const json& j) {
  Camera c;
  c.f = j.at("f").get<double>();
  c.dx = j.at("dx").get<double>();
  c.dy = j.at("dy").get<double>();
  c.u0 = j.at("u0").get<double>();
  c.v0 = j.at("v0").get<double>();
  c.width = j.at("width").get<int>();
  c.height = j.at("height").get<int>();
  const json& r = j.at("R");
  const json& t = j.at("t");
  if (r.size() != 3 || t.size() != 3) fail(ErrorCode::kSchema, "manifest: R must be 3x3, t 3-vector");
  for (int i = 0; i < 3; ++i) {
    if (r.at(i).size() != 3) fail(ErrorCode::kSchema, "manifest: R must be 3x3");
    for (int k = 0; k < 3; ++k) c.R(i, k) = r.at(i).at(k).get<double>();
    c.t[i] = t.at(i).get<double>();
  }
  return c;
}

json vec3(const Eigen::Vector3d& v) { return {v.x(), v.y(), v.z()}; }

Eigen::Vector3d vec3_from(const json& j) {
  if (j.size() != 3) fail(ErrorCode::kSchema, "manifest: expected a 3-vector");
  return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()};
}

}  // namespace

json manifest_to_json(const DatasetManifest& m) {
  json palette = json::array();
  for (const auto& p : m.palette) palette.push_back({{"id", p.id}, {"name", p.name}, {"rgb", p.rgb}});
  json views = json::array();
  for (const auto& v : m.views) {
    json jv = {{"image", v.image},
               {"split", v.split == Split::kTrain ? "train" : "holdout"},
               {"camera", camera_to_json(v.camera)}};
    if (v.label) jv["label"] = *v.label;
    if (v.eval_label) jv["eval_label"] = *v.eval_label;
    views.push_back(std::move(jv));
  }
  return {{"version", kManifestVersion},
          {"scene", m.scene},
          {"bounds",
           {{"near", m.near}, {"far", m.far}, {"min", vec3(m.bounds_min)}, {"max", vec3(m.bounds_max)}}},
          {"palette", palette},
          {"background_class", m.background_class},
          {"views", views}};
}

DatasetManifest manifest_from_json(const json& j) {
  try {
    if (j.at("version").get<int>() != kManifestVersion) {
      fail(ErrorCode::kSchema, "manifest: unsupported version " + j.at("version").dump());
    }
    DatasetManifest m;
    m.scene = j.at("scene").get<std::string>();
    const json& b = j.at("bounds");
    m.near = b.at("near").get<double>();
    m.far = b.at("far").get<double>();
    m.bounds_min = vec3_from(b.at("min"));
    m.bounds_max = vec3_from(b.at("max"));
    for (const auto& p : j.at("palette")) {
      PaletteEntry e;
      e.id = p.at("id").get<int>();
      e.name = p.at("name").get<std::string>();
      e.rgb = p.at("rgb").get<std::array<int, 3>>();
      m.palette.push_back(e);
    }
    m.background_class = j.at("background_class").get<int>();
    for (const auto& jv : j.at("views")) {
      ViewRecord v;
      v.image = jv.at("image").get<std::string>();
      const std::string split = jv.at("split").get<std::string>();
      if (split != "train" && split != "holdout") {
        fail(ErrorCode::kSchema, "manifest: split must be train or holdout, got " + split);
      }
      v.split = split == "train" ? Split::kTrain : Split::kHoldout;
      if (jv.contains("label")) v.label = jv.at("label").get<std::string>();
      if (jv.contains("eval_label")) v.eval_label = jv.at("eval_label").get<std::string>();
      v.camera = camera_from_json(jv.at("camera"));
      m.views.push_back(std::move(v));
    }
    return m;
  } catch (const json::exception& e) {
    fail(ErrorCode::kSchema, std::string("manifest: ") + e.what());
  }
}

void validate_manifest_fields(DatasetManifest& m) {
  if (!(m.near > 0.0 && m.far > m.near)) fail(ErrorCode::kSchema, "manifest: need 0 < near < far");
  if (!(m.bounds_max.array() > m.bounds_min.array()).all()) {
    fail(ErrorCode::kSchema, "manifest: empty bounding box");
  }
  if (m.palette.empty() || m.palette.size() > 255) {
    fail(ErrorCode::kPalette, "manifest: palette must have 1..255 classes");
  }
  for (std::size_t i = 0; i < m.palette.size(); ++i) {
    if (m.palette[i].id != static_cast<int>(i)) {
      fail(ErrorCode::kPalette, "manifest: palette ids must be 0..L-1 in order; entry " +
                                    std::to_string(i) + " has id " +
                                    std::to_string(m.palette[i].id));
    }
  }
  if (m.background_class < 0 || m.background_class >= static_cast<int>(m.palette.size())) {
    fail(ErrorCode::kPalette, "manifest: background class outside the palette");
  }
  if (m.views.empty()) fail(ErrorCode::kSchema, "manifest: no views");
  if (m.views_in(Split::kTrain).empty()) fail(ErrorCode::kSchema, "manifest: no training views");
  for (std::size_t i = 0; i < m.views.size(); ++i) {
    ViewRecord& v = m.views[i];
    if (v.label && v.split != Split::kTrain) {
      fail(ErrorCode::kSchema, "manifest: view " + std::to_string(i) +
                                   " is held out but carries a training label");
    }
    Eigen::Matrix3d& r = v.camera.R;
    const double err = orthonormality_error(r);
    if (!std::isfinite(err) || r.determinant() < 0.0 || err > kRotationRepairTolerance) {
      fail(ErrorCode::kRotation, "manifest: view " + std::to_string(i) +
                                     " rotation is not a proper rotation (orthonormality error " +
                                     std::to_string(err) + ", det " +
                                     std::to_string(r.determinant()) + ")");
    }
    if (err > 1e-12) r = orthonormalize(r);
    v.camera.validate();
  }
}

void write_manifest(const DatasetManifest& m, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) fail(ErrorCode::kIo, "cannot write " + path.string());
  f << manifest_to_json(m).dump(2) << "\n";
}

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorCode::kIo, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// Netpbm header: magic, width, height, maxval, with '#' comments.
struct PnmHeader {
  int width = 0, height = 0, maxval = 0;
  std::size_t data_offset = 0;
};

PnmHeader parse_pnm(const std::string& bytes, const char* magic, const fs::path& path) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(start, pos - start);
  };
  if (token() != magic) fail(ErrorCode::kIo, path.string() + ": expected " + magic + " raster");
  PnmHeader h;
  try {
    h.width = std::stoi(token());
    h.height = std::stoi(token());
    h.maxval = std::stoi(token());
  } catch (const std::exception&) {
    fail(ErrorCode::kIo, path.string() + ": malformed header");
  }
  if (h.width <= 0 || h.height <= 0 || h.maxval != 255) {
    fail(ErrorCode::kIo, path.string() + ": unsupported raster header");
  }
  h.data_offset = pos + 1;  // single whitespace byte after maxval
  return h;
}

void write_bytes(const fs::path& path, const std::string& header, const std::vector<unsigned char>& data) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(ErrorCode::kIo, "cannot write " + path.string());
  f << header;
  f.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
}

}  // namespace

void write_ppm(const fs::path& path, const Image& image) {
  std::vector<unsigned char> data(image.rgb.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    data[i] = static_cast<unsigned char>(std::lround(std::clamp(image.rgb[i], 0.0, 1.0) * 255.0));
  }
  write_bytes(path, "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n",
              data);
}

Image read_ppm(const fs::path& path) {
  const std::string bytes = read_file(path);
  const PnmHeader h = parse_pnm(bytes, "P6", path);
  const std::size_t n = static_cast<std::size_t>(h.width) * h.height * 3;
  if (bytes.size() < h.data_offset + n) fail(ErrorCode::kIo, path.string() + ": truncated raster");
  Image img;
  img.width = h.width;
  img.height = h.height;
  img.rgb.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    img.rgb[i] = static_cast<unsigned char>(bytes[h.data_offset + i]) / 255.0;
  }
  return img;
}

void write_pgm(const fs::path& path, const LabelMap& labels) {
  std::vector<unsigned char> data(labels.ids.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (labels.ids[i] < 0 || labels.ids[i] > 255) fail(ErrorCode::kPalette, "label id outside 0..255");
    data[i] = static_cast<unsigned char>(labels.ids[i]);
  }
  write_bytes(path, "P5\n" + std::to_string(labels.width) + " " + std::to_string(labels.height) + "\n255\n",
              data);
}

LabelMap read_pgm(const fs::path& path) {
  const std::string bytes = read_file(path);
  const PnmHeader h = parse_pnm(bytes, "P5", path);
  const std::size_t n = static_cast<std::size_t>(h.width) * h.height;
  if (bytes.size() < h.data_offset + n) fail(ErrorCode::kIo, path.string() + ": truncated raster");
  LabelMap l;
  l.width = h.width;
  l.height = h.height;
  l.ids.resize(n);
  for (std::size_t i = 0; i < n; ++i) l.ids[i] = static_cast<unsigned char>(bytes[h.data_offset + i]);
  return l;
}

namespace {

void check_labels(const LabelMap& l, const Camera& cam, std::size_t palette, const std::string& what) {
  if (l.width != cam.width || l.height != cam.height) {
    fail(ErrorCode::kSchema, what + ": label raster " + std::to_string(l.width) + "x" +
                                 std::to_string(l.height) + " does not match its image");
  }
  for (int id : l.ids) {
    if (id >= static_cast<int>(palette)) {
      fail(ErrorCode::kPalette, what + ": class id " + std::to_string(id) + " not in the palette");
    }
  }
}

DatasetManifest parse_manifest_file(const fs::path& path) {
  const std::string text = read_file(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::kSchema, path.string() + ": " + e.what());
  }
  DatasetManifest m = manifest_from_json(j);
  validate_manifest_fields(m);
  return m;
}

}  // namespace

DatasetManifest load_manifest(const fs::path& path) {
  return load_dataset(path.parent_path()).manifest;
}

Dataset load_dataset(const fs::path& root) {
  Dataset d;
  d.root = root;
  d.manifest = parse_manifest_file(root / kManifestName);
  const auto& m = d.manifest;
  for (std::size_t i = 0; i < m.views.size(); ++i) {
    const ViewRecord& v = m.views[i];
    const std::string what = "view " + std::to_string(i);
    Image img = read_ppm(root / v.image);
    if (img.width != v.camera.width || img.height != v.camera.height) {
      fail(ErrorCode::kSchema, what + ": image size does not match the camera");
    }
    d.images.push_back(std::move(img));
    auto load_label = [&](const std::optional<std::string>& p) -> std::optional<LabelMap> {
      if (!p) return std::nullopt;
      LabelMap l = read_pgm(root / *p);
      check_labels(l, v.camera, m.num_classes(), what);
      return l;
    };
    d.labels.push_back(load_label(v.label));
    d.eval_labels.push_back(load_label(v.eval_label));
  }
  return d;
}

Ray Dataset::pixel_ray(std::size_t view, int col, int row) const {
  return pixel_center_ray(manifest.views[view].camera, col, row, manifest.near, manifest.far);
}

DatasetManifest make_scene_dataset(const SceneOracle& scene, const CameraRig& rig,
                                   const fs::path& root) {
  scene.validate();
  DatasetManifest m;
  m.scene = scene.name;
  m.bounds_min = scene.bounds_min;
  m.bounds_max = scene.bounds_max;
  m.background_class = scene.background_class;
  for (std::size_t c = 0; c < scene.classes.size(); ++c) {
    PaletteEntry e;
    e.id = static_cast<int>(c);
    e.name = scene.classes[c].name;
    for (int k = 0; k < 3; ++k) {
      e.rgb[static_cast<std::size_t>(k)] =
          static_cast<int>(std::lround(std::clamp(scene.classes[c].display_rgb[k], 0.0, 1.0) * 255));
    }
    m.palette.push_back(e);
  }
  std::vector<std::pair<Camera, Split>> cams;
  for (const auto& c : rig.train) cams.emplace_back(c, Split::kTrain);
  for (const auto& c : rig.holdout) cams.emplace_back(c, Split::kHoldout);
  m.near = std::numeric_limits<double>::infinity();
  m.far = 0.0;
  for (const auto& [cam, split] : cams) {
    double n, f;
    scene_near_far(scene, cam.center(), n, f);
    m.near = std::min(m.near, n);
    m.far = std::max(m.far, f);
  }
  for (std::size_t i = 0; i < cams.size(); ++i) {
    const auto& [cam, split] = cams[i];
    char stem[32];
    std::snprintf(stem, sizeof(stem), "%04zu", i);
    const RenderedView r = reference_render(scene, cam, m.near, m.far);
    ViewRecord v;
    v.camera = cam;
    v.split = split;
    v.image = std::string("images/") + stem + ".ppm";
    write_ppm(root / v.image, {cam.width, cam.height, r.rgb});
    const LabelMap labels{cam.width, cam.height, r.labels};
    v.eval_label = std::string("gt/") + stem + ".pgm";
    write_pgm(root / *v.eval_label, labels);
    const bool labeled = split == Split::kTrain &&
                         std::find(rig.labeled.begin(), rig.labeled.end(), static_cast<int>(i)) !=
                             rig.labeled.end();
    if (labeled) {
      v.label = std::string("labels/") + stem + ".pgm";
      write_pgm(root / *v.label, labels);
    }
    m.views.push_back(std::move(v));
  }
  write_manifest(m, root / kManifestName);
  return m;
}

RaySampler::RaySampler(const Dataset& data, TrainStage stage) : data_(data), stage_(stage) {
  views_ = stage == TrainStage::kColor ? data.manifest.views_in(Split::kTrain)
                                       : data.manifest.labeled_views();
  if (views_.empty()) {
    fail(ErrorCode::kConfiguration, stage == TrainStage::kSeg
                                        ? "segmentation stage needs at least one labeled view (M = 0)"
                                        : "color stage needs at least one training view");
  }
  offsets_.push_back(0);
  for (std::size_t v : views_) {
    const Camera& c = data.manifest.views[v].camera;
    offsets_.push_back(offsets_.back() + static_cast<std::size_t>(c.width) * c.height);
  }
}

RayBatch RaySampler::next(std::size_t batch, std::mt19937_64& rng) const {
  std::uniform_int_distribution<std::size_t> pick(0, offsets_.back() - 1);
  RayBatch out;
  out.rays.reserve(batch);
  out.rgb.reserve(batch * 3);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t flat = pick(rng);
    const std::size_t slot = static_cast<std::size_t>(
        std::upper_bound(offsets_.begin(), offsets_.end(), flat) - offsets_.begin() - 1);
    const std::size_t view = views_[slot];
    const std::size_t local = flat - offsets_[slot];
    const int width = data_.manifest.views[view].camera.width;
    const int col = static_cast<int>(local % static_cast<std::size_t>(width));
    const int row = static_cast<int>(local / static_cast<std::size_t>(width));
    out.rays.push_back(data_.pixel_ray(view, col, row));
    for (int k = 0; k < 3; ++k) out.rgb.push_back(data_.images[view].rgb[local * 3 + k]);
    if (stage_ == TrainStage::kSeg) out.labels.push_back(data_.labels[view]->ids[local]);
    out.pixels.push_back({col, row});
    out.views.push_back(view);
  }
  return out;
}

}  // namespace irt
