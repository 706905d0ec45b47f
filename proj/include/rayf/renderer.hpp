#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "rayf/common.hpp"
#include "rayf/geometry.hpp"
#include "rayf/network.hpp"
#include "rayf/tensor.hpp"

namespace rayf {

struct Aabb {
  Vec3 lo = Vec3(-2.0, -2.0, -2.0);
  Vec3 hi = Vec3(2.0, 2.0, 2.0);

  void validate() const {
    require_config((hi - lo).minCoeff() > 0.0, "aabb: empty extent");
  }
};

struct RenderOutput {
  Eigen::Vector3d rgb = Eigen::Vector3d::Zero();
  std::vector<double> weights;
  double opacity = 0.0;
};

// Discrete volumetric compositing along one ray:
//   alpha_j = 1 - exp(-sigma_j * delta_j)
//   T_j     = prod_{k<j} (1 - alpha_k)
//   w_j     = T_j * alpha_j
//   rgb     = sum_j w_j * c_j          (black background, no extra term)
inline RenderOutput composite(const std::vector<double>& sigma,
                              const std::vector<std::array<double, 3>>& color,
                              const std::vector<double>& deltas) {
  require_shape(sigma.size() == color.size() && sigma.size() == deltas.size(),
                "composite: length mismatch");
  RenderOutput out;
  out.weights.resize(sigma.size());
  double transmittance = 1.0;
  for (std::size_t j = 0; j < sigma.size(); ++j) {
    require(sigma[j] >= 0.0, "composite: negative density");
    require(deltas[j] > 0.0, "composite: non-positive delta");
    const double alpha = 1.0 - std::exp(-sigma[j] * deltas[j]);
    const double w = transmittance * alpha;
    out.weights[j] = w;
    for (int c = 0; c < 3; ++c) out.rgb[c] += w * color[j][std::size_t(c)];
    out.opacity += w;
    transmittance *= 1.0 - alpha;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batched compositing over one window (P rays of L contiguous samples).
// ---------------------------------------------------------------------------

template <typename S>
struct CompositeCache {
  Vec<S> weights;        // per token
  Vec<S> trans_after;    // T_{j+1}, per token
};

template <typename S>
void composite_patch(const Vec<S>& sigma, const Mat<S>& rgb,
                     const Vec<S>& deltas, int rays, int l_samples,
                     Mat<S>& patch_rgb, CompositeCache<S>* cache) {
  const Eigen::Index tokens = sigma.size();
  require_shape(tokens == Eigen::Index(rays) * l_samples,
                "composite_patch: token count mismatch");
  patch_rgb.setZero(rays, 3);
  if (cache) {
    cache->weights.resize(tokens);
    cache->trans_after.resize(tokens);
  }
  for (int r = 0; r < rays; ++r) {
    S transmittance = S(1);
    for (int j = 0; j < l_samples; ++j) {
      const Eigen::Index t = Eigen::Index(r) * l_samples + j;
      const S alpha = S(1) - std::exp(-sigma(t) * deltas(t));
      const S w = transmittance * alpha;
      patch_rgb(r, 0) += w * rgb(t, 0);
      patch_rgb(r, 1) += w * rgb(t, 1);
      patch_rgb(r, 2) += w * rgb(t, 2);
      transmittance *= S(1) - alpha;
      if (cache) {
        cache->weights(t) = w;
        cache->trans_after(t) = transmittance;
      }
    }
  }
}

// Analytic gradients of the compositing recurrence:
//   d rgb / d c_j   = w_j
//   d L / d sigma_j = delta_j * (T_{j+1} * s_j - sum_{k>j} w_k s_k),
// with s_j the dot of the upstream pixel gradient and c_j.
template <typename S>
void composite_patch_backward(const CompositeCache<S>& cache,
                              const Vec<S>& sigma, const Mat<S>& rgb,
                              const Vec<S>& deltas, int rays, int l_samples,
                              const Mat<S>& d_patch_rgb, Vec<S>& d_sigma,
                              Mat<S>& d_rgb) {
  const Eigen::Index tokens = sigma.size();
  d_sigma.resize(tokens);
  d_rgb.resize(tokens, 3);
  for (int r = 0; r < rays; ++r) {
    const S gx = d_patch_rgb(r, 0), gy = d_patch_rgb(r, 1),
            gz = d_patch_rgb(r, 2);
    S suffix = S(0);  // sum over k > j of w_k * s_k
    for (int j = l_samples - 1; j >= 0; --j) {
      const Eigen::Index t = Eigen::Index(r) * l_samples + j;
      const S w = cache.weights(t);
      d_rgb(t, 0) = w * gx;
      d_rgb(t, 1) = w * gy;
      d_rgb(t, 2) = w * gz;
      const S s = gx * rgb(t, 0) + gy * rgb(t, 1) + gz * rgb(t, 2);
      d_sigma(t) = deltas(t) * (cache.trans_after(t) * s - suffix);
      suffix += w * s;
    }
  }
}

// ---------------------------------------------------------------------------
// Patch rendering shared by training and inference
// ---------------------------------------------------------------------------

struct SamplingConfig {
  double t_near = 0.5, t_far = 4.0;
  int l_samples = 32;
  Aabb aabb;
};

template <typename S>
struct PatchRender {
  Mat<S> positions;  // tokens x 3 in the unit cube
  Mat<S> dirs;       // rays x 3
  Vec<S> deltas;     // tokens
  NetOutput<S> net_out;
  NetCache<S> net_cache;
  CompositeCache<S> comp_cache;
  Mat<S> patch_rgb;  // rays x 3
};

// Renders the pixels of one window at one pose. Stratified jitter is drawn
// from `rng`; with stratified=false sampling is deterministic midpoints.
template <typename S>
void render_patch(const NetworkParams<S>& params,
                  const std::vector<Ray>& rays, const SamplingConfig& sampling,
                  bool stratified, Rng& rng, PatchRender<S>& out,
                  bool with_cache) {
  const int P = int(rays.size());
  const int L = params.cfg.l_samples;
  const Eigen::Index tokens = Eigen::Index(P) * L;
  out.positions.resize(tokens, 3);
  out.dirs.resize(P, 3);
  out.deltas.resize(tokens);

  const Vec3 extent = sampling.aabb.hi - sampling.aabb.lo;
  RaySamples samples;
  for (int r = 0; r < P; ++r) {
    Ray ray = rays[std::size_t(r)];
    ray.t_near = sampling.t_near;
    ray.t_far = sampling.t_far;
    sample_along_ray(ray, L, stratified, rng, samples);
    for (int j = 0; j < L; ++j) {
      const Eigen::Index t = Eigen::Index(r) * L + j;
      const Vec3 unit =
          (samples.positions[std::size_t(j)] - sampling.aabb.lo)
              .cwiseQuotient(extent);
      out.positions(t, 0) = S(unit.x());
      out.positions(t, 1) = S(unit.y());
      out.positions(t, 2) = S(unit.z());
      out.deltas(t) = S(samples.deltas[std::size_t(j)]);
    }
    out.dirs(r, 0) = S(ray.direction.x());
    out.dirs(r, 1) = S(ray.direction.y());
    out.dirs(r, 2) = S(ray.direction.z());
  }

  net_forward<S>(params, out.positions, out.dirs, out.net_out,
                 with_cache ? &out.net_cache : nullptr);
  composite_patch<S>(out.net_out.sigma, out.net_out.rgb, out.deltas, P, L,
                     out.patch_rgb, with_cache ? &out.comp_cache : nullptr);
}

// Full-frame inference: non-overlapping tiling, every owned pixel written
// exactly once, deterministic midpoint sampling.
template <typename S>
Array render_frame(const NetworkParams<S>& params, const Pose& pose,
                   const CameraIntrinsics& intr,
                   const SamplingConfig& sampling, const WindowGrid& tiling) {
  require_config(tiling.win_h == params.cfg.win_h &&
                     tiling.win_w == params.cfg.win_w,
                 "render_frame: tiling window must match network window");
  require_config(sampling.l_samples == params.cfg.l_samples,
                 "render_frame: sampling and network L must agree");
  Array image({std::size_t(intr.height), std::size_t(intr.width), 3});
  const int n_tiles = int(tiling.corners.size());

#pragma omp parallel for schedule(static)
  for (int tile = 0; tile < n_tiles; ++tile) {
    const auto pixels = tiling.window_pixels(std::size_t(tile));
    const auto rays = generate_rays(pose, intr, pixels, sampling.t_near,
                                    sampling.t_far);
    Rng rng(0);  // unused in midpoint mode
    PatchRender<S> render;
    render_patch<S>(params, rays, sampling, /*stratified=*/false, rng, render,
                    /*with_cache=*/false);
    const auto& owned = tiling.owned.at(std::size_t(tile));
    for (std::size_t p = 0; p < pixels.size(); ++p) {
      if (!owned[p]) continue;
      for (int c = 0; c < 3; ++c)
        image(std::size_t(pixels[p].row), std::size_t(pixels[p].col),
              std::size_t(c)) = double(render.patch_rgb(Eigen::Index(p), c));
    }
  }
  return image;
}

}  // namespace rayf
