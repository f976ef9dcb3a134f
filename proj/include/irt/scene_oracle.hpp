#pragma once

// Procedural scenes made of constant-density boxes and spheres, with a
// closed-form volume renderer used as ground truth for the learned pipeline.

#include <Eigen/Core>
#include <string>
#include <vector>

#include "irt/geometry.hpp"

namespace irt {

enum class ShapeKind { kBox, kSphere };

struct Primitive {
  ShapeKind shape = ShapeKind::kBox;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d half_size = Eigen::Vector3d::Ones();  // box only
  double radius = 1.0;                                   // sphere only
  double yaw = 0.0;  // box rotation about +z, radians
  Eigen::Vector3d rgb = Eigen::Vector3d::Zero();
  int class_id = 0;
  double density = 1.0;

  bool contains(const Eigen::Vector3d& p) const;
  // Entry/exit ray parameters; false if the ray misses.
  bool intersect(const Ray& ray, double& t0, double& t1) const;
};

struct ClassInfo {
  std::string name;
  Eigen::Vector3d display_rgb = Eigen::Vector3d::Zero();
};

struct SceneOracle {
  std::string name;
  std::vector<Primitive> primitives;
  std::vector<ClassInfo> classes;
  int background_class = 0;
  Eigen::Vector3d background_rgb = Eigen::Vector3d::Zero();
  Eigen::Vector3d bounds_min = -Eigen::Vector3d::Ones();
  Eigen::Vector3d bounds_max = Eigen::Vector3d::Ones();

  void validate() const;
  std::size_t num_classes() const { return classes.size(); }
};

struct PointQuery {
  double sigma = 0.0;
  Eigen::Vector3d rgb = Eigen::Vector3d::Zero();
  int class_id = 0;
};

// First-listed primitive containing p wins; background outside all.
PointQuery query(const SceneOracle& scene, const Eigen::Vector3d& p);

struct Interval {
  double t0 = 0.0;
  double t1 = 0.0;
  int primitive = -1;
};

// Partition of [near, far] along the ray into constant-density pieces,
// in depth order. Empty space is omitted.
std::vector<Interval> ray_intervals(const SceneOracle& scene, const Ray& ray);

struct PixelTruth {
  Eigen::Vector3d rgb = Eigen::Vector3d::Zero();
  int label = 0;
  double depth = 0.0;    // expected termination depth (unnormalized)
  double opacity = 0.0;  // 1 - residual transmittance
};

// Opacity below this makes a pixel background in reference labels.
inline constexpr double kLabelOpacityThreshold = 0.5;

PixelTruth reference_render_ray(const SceneOracle& scene, const Ray& ray);

struct RenderedView {
  int width = 0;
  int height = 0;
  std::vector<double> rgb;  // [H, W, 3]
  std::vector<int> labels;  // [H, W]
  std::vector<double> depth;
};

RenderedView reference_render(const SceneOracle& scene, const Camera& cam, double near,
                              double far);

// Near/far that enclose the scene's bounding sphere (+10%) from `eye`.
void scene_near_far(const SceneOracle& scene, const Eigen::Vector3d& eye, double& near,
                    double& far);

struct CameraRig {
  std::vector<Camera> train;
  std::vector<Camera> holdout;
  std::vector<int> labeled;  // indices into train
};

struct MicroTownOptions {
  int width = 40;
  int height = 40;
  int num_train = 8;
  int num_holdout = 4;
  std::vector<int> labeled = {0, 4};
  double orbit_radius = 6.0;
  double elevation_deg = 30.0;
};

// Ground slab (road), three buildings, one tree, one vehicle; class 0 is
// background. Cameras orbit the scene at a fixed elevation.
SceneOracle micro_town();
CameraRig micro_town_rig(const SceneOracle& scene, const MicroTownOptions& options);

}  // namespace irt
