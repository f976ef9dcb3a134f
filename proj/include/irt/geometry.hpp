#pragma once

// Pinhole camera, pixel/image/camera/world conversions, ray generation and
// the coarse/fine sampling of points along rays.
//
// Conventions: camera x points right, y down, z along the optical axis.
// R and t map world to camera coordinates: p_c = R p_w + t. A pixel (u, v)
// relates to image-plane coordinates by u = x / dx + u0, v = y / dy + v0, and
// the image plane to camera space by x = f x_c / z_c, y = f y_c / z_c.
// Integer pixel (col, row) is sampled through its center (col + 0.5, row + 0.5).

#include <Eigen/Core>
#include <cstddef>
#include <random>
#include <vector>

namespace irt {

struct Camera {
  double f = 1.0;
  double dx = 1.0;
  double dy = 1.0;
  double u0 = 0.0;
  double v0 = 0.0;
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
  Eigen::Vector3d t = Eigen::Vector3d::Zero();
  int width = 1;
  int height = 1;

  // Throws kRotation for a non-orthonormal or reflected R, kDomain for bad
  // intrinsics.
  void validate() const;
  Eigen::Vector3d center() const { return -R.transpose() * t; }

  // Camera at `eye` looking at `target`; `up` fixes the roll.
  static Camera look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target,
                        const Eigen::Vector3d& up, double f, int width, int height);
};

struct Ray {
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();
  Eigen::Vector3d direction = Eigen::Vector3d::UnitZ();
  double near = 0.0;
  double far = 1.0;
  double theta = 0.0;  // azimuth of direction, atan2(d_y, d_x)
  double beta = 0.0;   // elevation of direction, asin(d_z)
};

struct PixelProjection {
  double u = 0.0;
  double v = 0.0;
  double depth = 0.0;  // z_c
};

Ray pixel_to_camera_ray(const Camera& cam, double u, double v, double near = 0.1,
                        double far = 10.0);
Ray pixel_center_ray(const Camera& cam, int col, int row, double near, double far);
PixelProjection world_to_pixel(const Camera& cam, const Eigen::Vector3d& p);

// Nearest orthonormal matrix with det +1 (polar decomposition via SVD).
Eigen::Matrix3d orthonormalize(const Eigen::Matrix3d& r);
// Max abs entry of R^T R - I.
double orthonormality_error(const Eigen::Matrix3d& r);

enum class SampleStage { kCoarse, kFine };

// Per-ray ordered samples. Arrays are row-major [rays, samples_per_ray].
struct RaySampleBatch {
  std::size_t num_rays = 0;
  std::size_t samples_per_ray = 0;
  SampleStage stage = SampleStage::kCoarse;
  std::vector<double> depths;
  std::vector<double> deltas;
  std::vector<double> positions;  // [rays, samples, 3] world coordinates
  std::vector<std::size_t> ray_index;

  double depth(std::size_t ray, std::size_t i) const {
    return depths[ray * samples_per_ray + i];
  }
};

// Stratified samples: bin i covers near + [i, i+1) * (far - near) / n. With
// jitter one uniform draw per bin, otherwise bin centers. The last interval
// width equals the bin width.
RaySampleBatch sample_coarse(const std::vector<Ray>& rays, std::size_t n, bool jitter,
                             std::mt19937_64& rng);

inline constexpr double kPdfFloor = 1e-5;

// Inverse-CDF draws from the piecewise-constant density over the coarse bins
// proportional to weights + kPdfFloor. `deterministic` replaces the uniform
// draws by evenly spaced quantiles (i + 0.5) / n.
RaySampleBatch sample_fine(const std::vector<Ray>& rays, const RaySampleBatch& coarse,
                           const std::vector<double>& coarse_weights, std::size_t n,
                           std::mt19937_64& rng, bool deterministic = false);

}  // namespace irt
