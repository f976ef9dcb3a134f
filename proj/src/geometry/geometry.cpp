#include "irt/geometry.hpp"

#include <Eigen/Geometry>
#include <Eigen/LU>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <string>

#include "irt/errors.hpp"

namespace irt {

double orthonormality_error(const Eigen::Matrix3d& r) {
  return (r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
}

Eigen::Matrix3d orthonormalize(const Eigen::Matrix3d& r) {
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(r, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d out = svd.matrixU() * svd.matrixV().transpose();
  if (out.determinant() < 0.0) {
    Eigen::Matrix3d u = svd.matrixU();
    u.col(2) *= -1.0;
    out = u * svd.matrixV().transpose();
  }
  return out;
}

void Camera::validate() const {
  if (!(f > 0.0) || !(dx > 0.0) || !(dy > 0.0)) {
    fail(ErrorCode::kDomain, "camera: focal length and pixel pitch must be positive");
  }
  if (width <= 0 || height <= 0) fail(ErrorCode::kDomain, "camera: empty image");
  if (!(u0 >= 0.0 && u0 < width && v0 >= 0.0 && v0 < height)) {
    fail(ErrorCode::kDomain, "camera: principal point outside the image");
  }
  if (!R.allFinite() || !t.allFinite()) fail(ErrorCode::kDomain, "camera: non-finite pose");
  if (orthonormality_error(R) > 1e-9 || R.determinant() < 0.0) {
    fail(ErrorCode::kRotation, "camera: rotation is not orthonormal with det +1 (error " +
                                   std::to_string(orthonormality_error(R)) + ", det " +
                                   std::to_string(R.determinant()) + ")");
  }
}

Camera Camera::look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target,
                       const Eigen::Vector3d& up, double f, int width, int height) {
  const Eigen::Vector3d forward = (target - eye).normalized();
  const Eigen::Vector3d right = forward.cross(up).normalized();
  const Eigen::Vector3d down = forward.cross(right);
  Camera cam;
  cam.f = f;
  cam.width = width;
  cam.height = height;
  cam.u0 = 0.5 * width;
  cam.v0 = 0.5 * height;
  cam.R.row(0) = right.transpose();
  cam.R.row(1) = down.transpose();
  cam.R.row(2) = forward.transpose();
  cam.t = -cam.R * eye;
  return cam;
}

Ray pixel_to_camera_ray(const Camera& cam, double u, double v, double near, double far) {
  if (!(u >= 0.0 && u < cam.width && v >= 0.0 && v < cam.height)) {
    fail(ErrorCode::kDomain, "pixel (" + std::to_string(u) + ", " + std::to_string(v) +
                                 ") outside " + std::to_string(cam.width) + "x" +
                                 std::to_string(cam.height));
  }
  if (!(near > 0.0 && near < far)) fail(ErrorCode::kDomain, "ray: need 0 < near < far");
  // pixel -> image plane -> camera direction at unit depth -> world.
  const double x = (u - cam.u0) * cam.dx;
  const double y = (v - cam.v0) * cam.dy;
  const Eigen::Vector3d dir_cam(x / cam.f, y / cam.f, 1.0);
  Ray ray;
  ray.origin = cam.center();
  ray.direction = (cam.R.transpose() * dir_cam).normalized();
  ray.near = near;
  ray.far = far;
  ray.theta = std::atan2(ray.direction.y(), ray.direction.x());
  ray.beta = std::asin(std::clamp(ray.direction.z(), -1.0, 1.0));
  return ray;
}

Ray pixel_center_ray(const Camera& cam, int col, int row, double near, double far) {
  return pixel_to_camera_ray(cam, col + 0.5, row + 0.5, near, far);
}

PixelProjection world_to_pixel(const Camera& cam, const Eigen::Vector3d& p) {
  const Eigen::Vector3d pc = cam.R * p + cam.t;
  if (!(pc.z() > 0.0)) fail(ErrorCode::kDomain, "point is behind the camera");
  const double x = cam.f * pc.x() / pc.z();
  const double y = cam.f * pc.y() / pc.z();
  return {x / cam.dx + cam.u0, y / cam.dy + cam.v0, pc.z()};
}

namespace {

void fill_positions(const std::vector<Ray>& rays, RaySampleBatch& batch) {
  const std::size_t n = batch.samples_per_ray;
  batch.positions.resize(batch.num_rays * n * 3);
  batch.ray_index.resize(batch.num_rays);
  for (std::size_t r = 0; r < batch.num_rays; ++r) {
    batch.ray_index[r] = r;
    for (std::size_t i = 0; i < n; ++i) {
      const Eigen::Vector3d p = rays[r].origin + batch.depths[r * n + i] * rays[r].direction;
      for (int k = 0; k < 3; ++k) batch.positions[(r * n + i) * 3 + k] = p[k];
    }
  }
}

}  // namespace

RaySampleBatch sample_coarse(const std::vector<Ray>& rays, std::size_t n, bool jitter,
                             std::mt19937_64& rng) {
  if (n < 2) fail(ErrorCode::kContract, "sample_coarse: need at least 2 samples");
  RaySampleBatch batch;
  batch.num_rays = rays.size();
  batch.samples_per_ray = n;
  batch.stage = SampleStage::kCoarse;
  batch.depths.resize(rays.size() * n);
  batch.deltas.resize(rays.size() * n);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (std::size_t r = 0; r < rays.size(); ++r) {
    const double near = rays[r].near, far = rays[r].far;
    const double width = (far - near) / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double offset = jitter ? uni(rng) : 0.5;
      batch.depths[r * n + i] = near + (static_cast<double>(i) + offset) * width;
    }
    for (std::size_t i = 0; i + 1 < n; ++i) {
      batch.deltas[r * n + i] = batch.depths[r * n + i + 1] - batch.depths[r * n + i];
    }
    batch.deltas[r * n + n - 1] = width;
  }
  fill_positions(rays, batch);
  return batch;
}

RaySampleBatch sample_fine(const std::vector<Ray>& rays, const RaySampleBatch& coarse,
                           const std::vector<double>& coarse_weights, std::size_t n,
                           std::mt19937_64& rng, bool deterministic) {
  const std::size_t nc = coarse.samples_per_ray;
  if (coarse.num_rays != rays.size() || coarse_weights.size() != rays.size() * nc) {
    fail(ErrorCode::kDimension, "sample_fine: weights do not match the coarse batch");
  }
  if (n < 1) fail(ErrorCode::kContract, "sample_fine: need at least 1 sample");
  RaySampleBatch batch;
  batch.num_rays = rays.size();
  batch.samples_per_ray = n;
  batch.stage = SampleStage::kFine;
  batch.depths.resize(rays.size() * n);
  batch.deltas.resize(rays.size() * n);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::vector<double> cdf(nc + 1);
  std::vector<double> u(n);
  for (std::size_t r = 0; r < rays.size(); ++r) {
    const double near = rays[r].near, far = rays[r].far;
    const double width = (far - near) / static_cast<double>(nc);
    cdf[0] = 0.0;
    for (std::size_t i = 0; i < nc; ++i) {
      const double w = coarse_weights[r * nc + i];
      if (w < 0.0) fail(ErrorCode::kContract, "sample_fine: negative weight");
      cdf[i + 1] = cdf[i] + w + kPdfFloor;
    }
    for (auto& c : cdf) c /= cdf[nc];
    for (std::size_t j = 0; j < n; ++j) {
      u[j] = deterministic ? (static_cast<double>(j) + 0.5) / static_cast<double>(n)
                           : uni(rng);
    }
    std::sort(u.begin(), u.end());
    for (std::size_t j = 0; j < n; ++j) {
      // Bin k with cdf[k] <= u < cdf[k+1], then linear inside the bin.
      const auto it = std::upper_bound(cdf.begin(), cdf.end(), u[j]);
      std::size_t k = static_cast<std::size_t>(std::distance(cdf.begin(), it));
      k = std::clamp<std::size_t>(k, 1, nc) - 1;
      const double span = cdf[k + 1] - cdf[k];
      const double frac = span > 0.0 ? (u[j] - cdf[k]) / span : 0.5;
      batch.depths[r * n + j] =
          near + (static_cast<double>(k) + std::clamp(frac, 0.0, 1.0)) * width;
    }
    double* d = batch.depths.data() + r * n;
    for (std::size_t j = 1; j < n; ++j) {
      if (d[j] <= d[j - 1]) d[j] = std::nextafter(d[j - 1], far);
    }
    for (std::size_t j = 0; j + 1 < n; ++j) batch.deltas[r * n + j] = d[j + 1] - d[j];
    batch.deltas[r * n + n - 1] = (far - near) / static_cast<double>(n);
  }
  fill_positions(rays, batch);
  return batch;
}

}  // namespace irt
