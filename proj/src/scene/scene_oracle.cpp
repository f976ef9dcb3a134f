#include "irt/scene_oracle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "irt/errors.hpp"

namespace irt {
namespace {

// World -> box-local rotation (inverse yaw).
Eigen::Vector3d unyaw(const Eigen::Vector3d& v, double yaw) {
  const double c = std::cos(yaw), s = std::sin(yaw);
  return {c * v.x() + s * v.y(), -s * v.x() + c * v.y(), v.z()};
}

}  // namespace

bool Primitive::contains(const Eigen::Vector3d& p) const {
  if (shape == ShapeKind::kSphere) return (p - center).squaredNorm() <= radius * radius;
  const Eigen::Vector3d local = unyaw(p - center, yaw);
  return (local.cwiseAbs().array() <= half_size.array()).all();
}

bool Primitive::intersect(const Ray& ray, double& t0, double& t1) const {
  if (shape == ShapeKind::kSphere) {
    const Eigen::Vector3d oc = ray.origin - center;
    const double b = oc.dot(ray.direction);
    const double c = oc.squaredNorm() - radius * radius;
    const double disc = b * b - c;
    if (disc <= 0.0) return false;
    const double s = std::sqrt(disc);
    t0 = -b - s;
    t1 = -b + s;
    return true;
  }
  const Eigen::Vector3d o = unyaw(ray.origin - center, yaw);
  const Eigen::Vector3d d = unyaw(ray.direction, yaw);
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();
  for (int k = 0; k < 3; ++k) {
    if (std::abs(d[k]) < 1e-300) {
      if (std::abs(o[k]) > half_size[k]) return false;
      continue;
    }
    double a = (-half_size[k] - o[k]) / d[k];
    double b = (half_size[k] - o[k]) / d[k];
    if (a > b) std::swap(a, b);
    lo = std::max(lo, a);
    hi = std::min(hi, b);
  }
  if (!(hi > lo)) return false;
  t0 = lo;
  t1 = hi;
  return true;
}

void SceneOracle::validate() const {
  if (classes.empty()) fail(ErrorCode::kContract, "scene: no classes");
  const int n = static_cast<int>(classes.size());
  if (background_class < 0 || background_class >= n) {
    fail(ErrorCode::kContract, "scene: background class outside palette");
  }
  for (const auto& p : primitives) {
    if (p.class_id < 0 || p.class_id >= n) {
      fail(ErrorCode::kContract, "scene: primitive class id outside [0, L)");
    }
    const bool degenerate = p.shape == ShapeKind::kSphere ? !(p.radius > 0.0)
                                                         : !(p.half_size.minCoeff() > 0.0);
    if (degenerate) fail(ErrorCode::kContract, "scene: degenerate primitive");
    if (!(p.density > 0.0)) fail(ErrorCode::kContract, "scene: primitive density must be positive");
  }
  if (!(bounds_max.array() > bounds_min.array()).all()) {
    fail(ErrorCode::kContract, "scene: empty bounds");
  }
}

PointQuery query(const SceneOracle& scene, const Eigen::Vector3d& p) {
  for (const auto& prim : scene.primitives) {
    if (prim.contains(p)) return {prim.density, prim.rgb, prim.class_id};
  }
  return {0.0, scene.background_rgb, scene.background_class};
}

std::vector<Interval> ray_intervals(const SceneOracle& scene, const Ray& ray) {
  const std::size_t np = scene.primitives.size();
  std::vector<double> t0(np), t1(np);
  std::vector<bool> hit(np, false);
  std::vector<double> cuts = {ray.near, ray.far};
  for (std::size_t i = 0; i < np; ++i) {
    if (!scene.primitives[i].intersect(ray, t0[i], t1[i])) continue;
    t0[i] = std::max(t0[i], ray.near);
    t1[i] = std::min(t1[i], ray.far);
    if (t1[i] <= t0[i]) continue;
    hit[i] = true;
    cuts.push_back(t0[i]);
    cuts.push_back(t1[i]);
  }
  std::sort(cuts.begin(), cuts.end());
  cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
  std::vector<Interval> out;
  for (std::size_t c = 0; c + 1 < cuts.size(); ++c) {
    const double a = cuts[c], b = cuts[c + 1];
    const double mid = 0.5 * (a + b);
    int owner = -1;
    for (std::size_t i = 0; i < np; ++i) {
      if (hit[i] && mid >= t0[i] && mid <= t1[i]) {
        owner = static_cast<int>(i);
        break;
      }
    }
    if (owner < 0) continue;
    if (!out.empty() && out.back().primitive == owner && out.back().t1 == a) {
      out.back().t1 = b;
    } else {
      out.push_back({a, b, owner});
    }
  }
  return out;
}

PixelTruth reference_render_ray(const SceneOracle& scene, const Ray& ray) {
  PixelTruth px;
  double trans = 1.0;
  double best_weight = -1.0;
  int best_class = scene.background_class;
  for (const auto& iv : ray_intervals(scene, ray)) {
    const Primitive& prim = scene.primitives[static_cast<std::size_t>(iv.primitive)];
    const double sigma = prim.density;
    const double od = sigma * (iv.t1 - iv.t0);
    const double absorb = -std::expm1(-od);
    const double w = trans * absorb;
    px.rgb += w * prim.rgb;
    // Expected termination depth inside a constant-density segment.
    px.depth += trans * ((iv.t0 + 1.0 / sigma) - std::exp(-od) * (iv.t1 + 1.0 / sigma));
    if (w > best_weight) {
      best_weight = w;
      best_class = prim.class_id;
    }
    trans *= std::exp(-od);
  }
  px.rgb += trans * scene.background_rgb;
  px.opacity = 1.0 - trans;
  px.label = px.opacity >= kLabelOpacityThreshold ? best_class : scene.background_class;
  return px;
}

RenderedView reference_render(const SceneOracle& scene, const Camera& cam, double near,
                              double far) {
  cam.validate();
  RenderedView view;
  view.width = cam.width;
  view.height = cam.height;
  const std::size_t n = static_cast<std::size_t>(cam.width) * cam.height;
  view.rgb.resize(n * 3);
  view.labels.resize(n);
  view.depth.resize(n);
  for (int row = 0; row < cam.height; ++row) {
    for (int col = 0; col < cam.width; ++col) {
      const std::size_t i = static_cast<std::size_t>(row) * cam.width + col;
      const PixelTruth px = reference_render_ray(scene, pixel_center_ray(cam, col, row, near, far));
      for (int k = 0; k < 3; ++k) view.rgb[i * 3 + k] = px.rgb[k];
      view.labels[i] = px.label;
      view.depth[i] = px.depth;
    }
  }
  return view;
}

void scene_near_far(const SceneOracle& scene, const Eigen::Vector3d& eye, double& near,
                    double& far) {
  const Eigen::Vector3d c = 0.5 * (scene.bounds_min + scene.bounds_max);
  const double r = 1.1 * 0.5 * (scene.bounds_max - scene.bounds_min).norm();
  const double d = (eye - c).norm();
  near = std::max(0.05, d - r);
  far = d + r;
}

SceneOracle micro_town() {
  SceneOracle s;
  s.name = "micro-town";
  s.classes = {{"background", {0.0, 0.0, 0.0}},
               {"road", {0.5, 0.25, 0.5}},
               {"building", {0.27, 0.27, 0.27}},
               {"tree", {0.42, 0.56, 0.14}},
               {"vehicle", {0.0, 0.0, 0.56}}};
  s.background_class = 0;
  s.background_rgb = Eigen::Vector3d::Zero();
  const double sigma = 25.0;
  auto box = [&](Eigen::Vector3d c, Eigen::Vector3d h, double yaw, Eigen::Vector3d rgb,
                 int cls) {
    Primitive p;
    p.shape = ShapeKind::kBox;
    p.center = c;
    p.half_size = h;
    p.yaw = yaw;
    p.rgb = rgb;
    p.class_id = cls;
    p.density = sigma;
    s.primitives.push_back(p);
  };
  box({-1.1, -0.9, 0.6}, {0.5, 0.6, 0.6}, 0.0, {0.80, 0.55, 0.35}, 2);
  box({1.0, -0.8, 0.45}, {0.55, 0.45, 0.45}, 0.3, {0.72, 0.50, 0.32}, 2);
  box({0.2, 1.2, 0.8}, {0.45, 0.4, 0.8}, -0.2, {0.85, 0.62, 0.40}, 2);
  Primitive tree;
  tree.shape = ShapeKind::kSphere;
  tree.center = {-1.0, 1.0, 0.5};
  tree.radius = 0.45;
  tree.rgb = {0.15, 0.60, 0.20};
  tree.class_id = 3;
  tree.density = sigma;
  s.primitives.push_back(tree);
  box({0.7, 0.2, 0.14}, {0.45, 0.2, 0.14}, 0.5, {0.20, 0.30, 0.90}, 4);
  box({0.0, 0.0, -0.15}, {2.2, 2.2, 0.15}, 0.0, {0.45, 0.45, 0.48}, 1);
  s.bounds_min = {-2.2, -2.2, -0.3};
  s.bounds_max = {2.2, 2.2, 1.6};
  return s;
}

CameraRig micro_town_rig(const SceneOracle& scene, const MicroTownOptions& o) {
  const Eigen::Vector3d target(0.0, 0.0, 0.3);
  const double elev = o.elevation_deg * std::numbers::pi / 180.0;
  const double f = 1.1 * o.width;
  auto orbit = [&](double azimuth) {
    const Eigen::Vector3d eye = target + o.orbit_radius * Eigen::Vector3d(
                                                              std::cos(elev) * std::cos(azimuth),
                                                              std::cos(elev) * std::sin(azimuth),
                                                              std::sin(elev));
    return Camera::look_at(eye, target, Eigen::Vector3d::UnitZ(), f, o.width, o.height);
  };
  (void)scene;
  CameraRig rig;
  for (int i = 0; i < o.num_train; ++i) {
    rig.train.push_back(orbit(2.0 * std::numbers::pi * i / o.num_train));
  }
  for (int i = 0; i < o.num_holdout; ++i) {
    // Held-out views sit between training views.
    const double a = 2.0 * std::numbers::pi * i / o.num_holdout + std::numbers::pi / o.num_train;
    rig.holdout.push_back(orbit(a));
  }
  rig.labeled = o.labeled;
  return rig;
}

}  // namespace irt
