#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "rayf/common.hpp"
#include "rayf/geometry.hpp"
#include "rayf/renderer.hpp"
#include "rayf/rng.hpp"
#include "rayf/tensor.hpp"

namespace rayf {

// MaskStack: (N, H, W) binary modulation weights, one mono mask shared by all
// color channels. FrameStack: (N, H, W, 3) radiance in [0, 1].
// Measurement: (H, W, 3), the masked sum over frames plus optional noise.
using MaskStack = Array;
using FrameStack = Array;

struct Measurement {
  Array values;  // (H, W, 3)
  double noise_sigma = 0.0;
};

// i.i.d. Bernoulli masks with coverage repair: any pixel dark in every frame
// gets one randomly chosen frame forced to 1.
inline MaskStack generate_masks(std::uint64_t seed, int n_frames, int h, int w,
                                double density) {
  require_config(n_frames >= 1, "generate_masks: need at least one frame");
  require_config(h >= 1 && w >= 1, "generate_masks: empty mask");
  require_config(density > 0.0 && density < 1.0,
                 "generate_masks: density must be in (0, 1)");
  MaskStack masks({std::size_t(n_frames), std::size_t(h), std::size_t(w)});
  Rng rng(derive_seed(seed, 0x6d61736bull));  // "mask"
  for (int i = 0; i < n_frames; ++i)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        masks(std::size_t(i), std::size_t(y), std::size_t(x)) =
            rng.uniform() < density ? 1.0 : 0.0;
  // coverage repair, row-major pixel order
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double cover = 0.0;
      for (int i = 0; i < n_frames; ++i)
        cover += masks(std::size_t(i), std::size_t(y), std::size_t(x));
      if (cover == 0.0) {
        const auto pick = rng.uniform_int(std::uint64_t(n_frames));
        masks(std::size_t(pick), std::size_t(y), std::size_t(x)) = 1.0;
      }
    }
  }
  return masks;
}

// Y = sum_i X_i (.) M_i + Z, Z ~ N(0, sigma^2) drawn deterministically.
inline Measurement compress(const FrameStack& frames, const MaskStack& masks,
                            double noise_sigma, std::uint64_t seed) {
  require_shape(frames.rank() == 4 && frames.dim(3) == 3,
                "compress: frames must be (N, H, W, 3)");
  require_shape(masks.rank() == 3, "compress: masks must be (N, H, W)");
  require_shape(frames.dim(0) == masks.dim(0) &&
                    frames.dim(1) == masks.dim(1) &&
                    frames.dim(2) == masks.dim(2),
                "compress: frames and masks shape mismatch");
  const std::size_t n = frames.dim(0), h = frames.dim(1), w = frames.dim(2);
  Measurement out;
  out.noise_sigma = noise_sigma;
  out.values = Array({h, w, 3});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double m = masks(i, y, x);
        for (std::size_t c = 0; c < 3; ++c)
          out.values(y, x, c) += m * frames(i, y, x, c);
      }
  if (noise_sigma > 0.0) {
    Rng rng(derive_seed(seed, 0x6e6f697365ull));  // "noise"
    for (std::size_t k = 0; k < out.values.numel(); ++k)
      out.values[k] += noise_sigma * rng.normal();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Analytic ground-truth scene: sum of Gaussian blobs.
// ---------------------------------------------------------------------------

struct Blob {
  Vec3 center = Vec3::Zero();
  double radius = 0.3;
  double peak_density = 5.0;
  std::array<double, 3> rgb = {0.5, 0.5, 0.5};
};

struct SceneSpec {
  std::vector<Blob> blobs;
  std::array<double, 3> background_rgb = {0.0, 0.0, 0.0};
  Pose pose_start, pose_end;

  void validate() const {
    require_config(!blobs.empty(), "scene: need at least one blob");
    for (const auto& b : blobs) {
      require_config(b.radius > 0.0, "scene: blob radius must be positive");
      require_config(b.peak_density >= 0.0,
                     "scene: blob peak density must be non-negative");
    }
  }
};

// sigma(x) = sum_k p_k exp(-|x - c_k|^2 / (2 r_k^2)); colors are blended by
// the same per-blob weights.
inline double scene_density(const SceneSpec& scene, const Vec3& p) {
  double sigma = 0.0;
  for (const auto& b : scene.blobs) {
    const double d2 = (p - b.center).squaredNorm();
    sigma += b.peak_density * std::exp(-d2 / (2.0 * b.radius * b.radius));
  }
  return sigma;
}

inline std::array<double, 3> scene_color(const SceneSpec& scene,
                                         const Vec3& p) {
  double wsum = 0.0;
  std::array<double, 3> rgb = {0.0, 0.0, 0.0};
  for (const auto& b : scene.blobs) {
    const double d2 = (p - b.center).squaredNorm();
    const double w =
        b.peak_density * std::exp(-d2 / (2.0 * b.radius * b.radius));
    wsum += w;
    for (int c = 0; c < 3; ++c) rgb[std::size_t(c)] += w * b.rgb[std::size_t(c)];
  }
  if (wsum <= 1e-300) return scene.background_rgb;
  for (auto& v : rgb) v /= wsum;
  return rgb;
}

// Oracle frames: analytic fields composited at `oversample` midpoint samples
// per ray, background added under the residual transmittance, clamped to
// [0, 1]. Frame i is rendered at the interpolated pose.
inline FrameStack render_ground_truth(const SceneSpec& scene,
                                      const CameraIntrinsics& intr,
                                      int n_frames, int oversample,
                                      double t_near = 0.5,
                                      double t_far = 4.0) {
  require_config(n_frames >= 1, "render_ground_truth: need frames");
  require_config(oversample >= 4, "render_ground_truth: oversample too small");
  intr.validate();

  FrameStack frames({std::size_t(n_frames), std::size_t(intr.height),
                     std::size_t(intr.width), 3});
  std::vector<double> sigma(static_cast<std::size_t>(oversample));
  std::vector<std::array<double, 3>> color(static_cast<std::size_t>(oversample));
  std::vector<double> deltas(static_cast<std::size_t>(oversample));

  for (int i = 1; i <= n_frames; ++i) {
    const Pose pose = n_frames == 1
                          ? scene.pose_start
                          : interpolate_pose(scene.pose_start, scene.pose_end,
                                             i, n_frames);
    for (int row = 0; row < intr.height; ++row) {
      for (int col = 0; col < intr.width; ++col) {
        const auto rays =
            generate_rays(pose, intr, {{row, col}}, t_near, t_far);
        const Ray& ray = rays[0];
        const double bin = (t_far - t_near) / double(oversample);
        for (int j = 0; j < oversample; ++j) {
          const double t = t_near + (double(j) + 0.5) * bin;
          const Vec3 p = ray.origin + t * ray.direction;
          sigma[std::size_t(j)] = scene_density(scene, p);
          color[std::size_t(j)] = scene_color(scene, p);
          deltas[std::size_t(j)] =
              (j + 1 < oversample ? bin : t_far - t);
        }
        const RenderOutput out = composite(sigma, color, deltas);
        const double residual = 1.0 - out.opacity;
        for (int c = 0; c < 3; ++c) {
          const double v =
              out.rgb[c] + residual * scene.background_rgb[std::size_t(c)];
          frames(std::size_t(i - 1), std::size_t(row), std::size_t(col),
                 std::size_t(c)) = std::clamp(v, 0.0, 1.0);
        }
      }
    }
  }
  return frames;
}

}  // namespace rayf
