#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "rayf/common.hpp"
#include "rayf/rng.hpp"

namespace rayf {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;  // [translation; rotation]

// Rigid camera-to-world transform. `rotation` columns are the camera axes in
// world coordinates, `translation` is the camera center.
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static Pose identity() { return {}; }

  Pose inverse() const {
    Pose inv;
    inv.rotation = rotation.transpose();
    inv.translation = -(rotation.transpose() * translation);
    return inv;
  }

  Pose operator*(const Pose& rhs) const {
    Pose out;
    out.rotation = rotation * rhs.rotation;
    out.translation = rotation * rhs.translation + translation;
    return out;
  }

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

  double orthonormality_defect() const {
    return (rotation.transpose() * rotation - Mat3::Identity())
        .cwiseAbs()
        .maxCoeff();
  }

  // Nearest rotation by polar projection, used when composition drift
  // exceeds the 1e-9 budget.
  void reorthonormalize() {
    Eigen::JacobiSVD<Mat3> svd(rotation,
                               Eigen::ComputeFullU | Eigen::ComputeFullV);
    rotation = svd.matrixU() * svd.matrixV().transpose();
    if (rotation.determinant() < 0.0) {
      Mat3 u = svd.matrixU();
      u.col(2) *= -1.0;
      rotation = u * svd.matrixV().transpose();
    }
  }
};

inline Mat3 skew(const Vec3& w) {
  Mat3 m;
  m << 0.0, -w.z(), w.y(), w.z(), 0.0, -w.x(), -w.y(), w.x(), 0.0;
  return m;
}

inline Mat3 so3_exp(const Vec3& w) {
  const double theta = w.norm();
  const Mat3 K = skew(w);
  if (theta < 1e-10) {
    return Mat3::Identity() + K + 0.5 * (K * K);
  }
  const double a = std::sin(theta) / theta;
  const double b = (1.0 - std::cos(theta)) / (theta * theta);
  return Mat3::Identity() + a * K + b * (K * K);
}

inline Pose se3_exp(const Vec6& xi) {
  const Vec3 rho = xi.head<3>();
  const Vec3 w = xi.tail<3>();
  const double theta = w.norm();
  const Mat3 K = skew(w);

  Pose out;
  out.rotation = so3_exp(w);
  Mat3 V;
  if (theta < 1e-10) {
    V = Mat3::Identity() + 0.5 * K + (1.0 / 6.0) * (K * K);
  } else {
    const double t2 = theta * theta;
    V = Mat3::Identity() + ((1.0 - std::cos(theta)) / t2) * K +
        ((theta - std::sin(theta)) / (t2 * theta)) * (K * K);
  }
  out.translation = V * rho;
  return out;
}

inline Vec6 se3_log(const Pose& pose) {
  const Mat3& R = pose.rotation;
  const double cos_theta =
      std::clamp((R.trace() - 1.0) * 0.5, -1.0, 1.0);
  const double theta = std::acos(cos_theta);
  if (theta >= M_PI - 1e-6)
    throw geometry_error("se3_log: rotation at the principal branch cut");

  Vec3 w;
  Mat3 V_inv;
  if (theta < 1e-10) {
    const Mat3 A = 0.5 * (R - R.transpose());
    w = Vec3(A(2, 1), A(0, 2), A(1, 0));
    const Mat3 K = skew(w);
    V_inv = Mat3::Identity() - 0.5 * K + (1.0 / 12.0) * (K * K);
  } else {
    const double s = theta / (2.0 * std::sin(theta));
    const Mat3 A = s * (R - R.transpose());
    w = Vec3(A(2, 1), A(0, 2), A(1, 0));
    const Mat3 K = skew(w);
    const double half = 0.5 * theta;
    const double cot_half = std::cos(half) / std::sin(half);
    const double coeff = (1.0 - half * cot_half) / (theta * theta);
    V_inv = Mat3::Identity() - 0.5 * K + coeff * (K * K);
  }

  Vec6 xi;
  xi.head<3>() = V_inv * pose.translation;
  xi.tail<3>() = w;
  return xi;
}

// Per-frame virtual pose on the geodesic between the two boundary poses.
// The fraction is (i-1)/(n-1), 1-indexed, so i=1 gives the first boundary
// pose and i=n the last one exactly.
inline Pose interpolate_pose(const Pose& first, const Pose& last, int i,
                             int n) {
  require(n >= 2, "interpolate_pose: need at least two frames");
  require(i >= 1 && i <= n, "interpolate_pose: frame index out of range");
  const double alpha = double(i - 1) / double(n - 1);
  const Vec6 delta = se3_log(first.inverse() * last);
  return first * se3_exp((alpha * delta).eval());
}

struct CameraIntrinsics {
  double focal = 40.0;       // pixels
  double cx = 15.5, cy = 15.5;
  int width = 32, height = 32;

  void validate() const {
    require_config(focal > 0.0, "intrinsics: focal must be positive");
    require_config(width > 0 && height > 0, "intrinsics: empty image");
    require_config(cx >= 0.0 && cx <= width - 1 && cy >= 0.0 &&
                       cy <= height - 1,
                   "intrinsics: principal point outside image");
  }
};

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();
  double t_near = 0.5, t_far = 4.0;
};

struct PixelCoord {
  int row = 0, col = 0;
};

// Pinhole back-projection. Camera looks along +z; pixel (row, col) maps to
// the ray through ((col-cx)/f, (row-cy)/f, 1) in the camera frame.
inline std::vector<Ray> generate_rays(const Pose& pose,
                                      const CameraIntrinsics& intr,
                                      const std::vector<PixelCoord>& pixels,
                                      double t_near = 0.5,
                                      double t_far = 4.0) {
  require(t_near < t_far, "generate_rays: t_near must precede t_far");
  std::vector<Ray> rays;
  rays.reserve(pixels.size());
  for (const auto& px : pixels) {
    if (px.row < 0 || px.row >= intr.height || px.col < 0 ||
        px.col >= intr.width)
      throw geometry_error("generate_rays: pixel outside image bounds");
    Vec3 dir_cam((px.col - intr.cx) / intr.focal,
                 (px.row - intr.cy) / intr.focal, 1.0);
    Ray ray;
    ray.origin = pose.translation;
    ray.direction = (pose.rotation * dir_cam).normalized();
    ray.t_near = t_near;
    ray.t_far = t_far;
    rays.push_back(ray);
  }
  return rays;
}

// A set of window top-left corners plus the shared window geometry. For
// inference tiles, `owned` marks which pixels of each window this tile is
// responsible for writing (edge tiles clamp inward and overlap, but every
// image pixel is owned exactly once, by the first covering window in scan
// order).
struct WindowGrid {
  int win_h = 8, win_w = 8;
  int image_h = 0, image_w = 0;
  std::vector<PixelCoord> corners;
  std::vector<std::vector<std::uint8_t>> owned;  // per window, win_h*win_w

  int pixels_per_window() const { return win_h * win_w; }

  std::vector<PixelCoord> window_pixels(std::size_t window_index) const {
    const auto& c = corners.at(window_index);
    std::vector<PixelCoord> out;
    out.reserve(std::size_t(win_h) * win_w);
    for (int r = 0; r < win_h; ++r)
      for (int col = 0; col < win_w; ++col)
        out.push_back({c.row + r, c.col + col});
    return out;
  }
};

// Training-time sampler: B windows with uniformly random top-left corners,
// overlap permitted, never crossing the image boundary.
inline WindowGrid sample_patches_train(std::uint64_t seed, int image_h,
                                       int image_w, int win_h, int win_w,
                                       int count) {
  require_config(win_h >= 1 && win_w >= 1, "window must be non-empty");
  require_config(win_h <= image_h && win_w <= image_w,
                 "window larger than image");
  require_config(count >= 1, "need at least one window");
  WindowGrid grid;
  grid.win_h = win_h;
  grid.win_w = win_w;
  grid.image_h = image_h;
  grid.image_w = image_w;
  Rng rng(seed);
  const std::uint64_t rows = std::uint64_t(image_h - win_h + 1);
  const std::uint64_t cols = std::uint64_t(image_w - win_w + 1);
  for (int b = 0; b < count; ++b) {
    const int r = int(rng.uniform_int(rows));
    const int c = int(rng.uniform_int(cols));
    grid.corners.push_back({r, c});
  }
  return grid;
}

// Inference tiling: non-overlapping where the window divides the image;
// edge windows clamp inward and own only the pixels no earlier window wrote.
inline WindowGrid tile_patches_inference(int image_h, int image_w, int win_h,
                                         int win_w) {
  require_config(win_h >= 1 && win_w >= 1, "window must be non-empty");
  require_config(win_h <= image_h && win_w <= image_w,
                 "window larger than image");
  WindowGrid grid;
  grid.win_h = win_h;
  grid.win_w = win_w;
  grid.image_h = image_h;
  grid.image_w = image_w;

  std::vector<int> row_starts, col_starts;
  for (int r = 0; r < image_h; r += win_h)
    row_starts.push_back(std::min(r, image_h - win_h));
  for (int c = 0; c < image_w; c += win_w)
    col_starts.push_back(std::min(c, image_w - win_w));

  std::vector<std::uint8_t> taken(std::size_t(image_h) * image_w, 0);
  for (int r : row_starts) {
    for (int c : col_starts) {
      grid.corners.push_back({r, c});
      std::vector<std::uint8_t> own(std::size_t(win_h) * win_w, 0);
      for (int i = 0; i < win_h; ++i) {
        for (int j = 0; j < win_w; ++j) {
          auto& t = taken[std::size_t(r + i) * image_w + (c + j)];
          if (!t) {
            t = 1;
            own[std::size_t(i) * win_w + j] = 1;
          }
        }
      }
      grid.owned.push_back(std::move(own));
    }
  }
  return grid;
}

struct RaySamples {
  std::vector<Vec3> positions;  // L points
  std::vector<double> depths;   // strictly increasing in [t_near, t_far]
  std::vector<double> deltas;   // t_{j+1} - t_j, final = t_far - t_L
};

// Single stratified (or midpoint) pass along the ray; no hierarchical
// importance resampling.
inline void sample_along_ray(const Ray& ray, int l_samples, bool stratified,
                             Rng& rng, RaySamples& out) {
  require(l_samples >= 1, "sample_along_ray: need at least one sample");
  const int L = l_samples;
  out.positions.resize(std::size_t(L));
  out.depths.resize(std::size_t(L));
  out.deltas.resize(std::size_t(L));
  const double bin = (ray.t_far - ray.t_near) / double(L);
  for (int j = 0; j < L; ++j) {
    const double u = stratified ? rng.uniform() : 0.5;
    out.depths[std::size_t(j)] = ray.t_near + (double(j) + u) * bin;
  }
  for (int j = 0; j < L; ++j) {
    out.deltas[std::size_t(j)] =
        (j + 1 < L ? out.depths[std::size_t(j) + 1] : ray.t_far) -
        out.depths[std::size_t(j)];
    out.positions[std::size_t(j)] =
        ray.origin + out.depths[std::size_t(j)] * ray.direction;
  }
}

inline RaySamples sample_along_ray(const Ray& ray, int l_samples,
                                   bool stratified, std::uint64_t seed) {
  Rng rng(seed);
  RaySamples out;
  sample_along_ray(ray, l_samples, stratified, rng, out);
  return out;
}

}  // namespace rayf
