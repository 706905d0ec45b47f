#pragma once

#include <Eigen/Dense>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <vector>

#include "rayf/common.hpp"
#include "rayf/rng.hpp"

namespace rayf {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

struct HashGridConfig {
  int n_levels = 8;
  int base_resolution = 16;
  double per_level_scale = 1.5;
  int features_per_level = 2;
  int table_size_log2 = 14;

  int feature_width() const { return n_levels * features_per_level; }
  std::size_t table_size() const { return std::size_t(1) << table_size_log2; }
  int resolution(int level) const {
    return int(std::floor(base_resolution *
                          std::pow(per_level_scale, double(level))));
  }
  void validate() const {
    require_config(n_levels >= 1 && features_per_level >= 1 &&
                       base_resolution >= 1,
                   "hash grid: counts must be positive");
    require_config(per_level_scale > 1.0,
                   "hash grid: per_level_scale must exceed 1");
    require_config(table_size_log2 >= 1 && table_size_log2 <= 24,
                   "hash grid: table_size_log2 out of range");
  }
};

// Per-level trainable feature tables, (table_size x features_per_level) each.
template <typename S>
struct HashGridParams {
  std::vector<Mat<S>> levels;

  static HashGridParams zeros(const HashGridConfig& cfg) {
    HashGridParams p;
    p.levels.assign(std::size_t(cfg.n_levels),
                    Mat<S>::Zero(Eigen::Index(cfg.table_size()),
                                 cfg.features_per_level));
    return p;
  }

  static HashGridParams init(const HashGridConfig& cfg, Rng& rng) {
    HashGridParams p = zeros(cfg);
    for (auto& t : p.levels)
      for (Eigen::Index i = 0; i < t.size(); ++i)
        t.data()[i] = S((rng.uniform() * 2.0 - 1.0) * 1e-4);
    return p;
  }
};

inline std::uint32_t spatial_hash(std::uint32_t x, std::uint32_t y,
                                  std::uint32_t z, std::uint32_t mask) {
  // Primes 1, 2654435761, 805459861.
  return (x ^ (y * 2654435761u) ^ (z * 805459861u)) & mask;
}

// Per-point interpolation footprint, kept so the backward pass scatters to
// exactly the corners the forward pass read.
template <typename S>
struct HashEncodeCache {
  int n_levels = 0;
  int n_points = 0;
  // [point][level][corner] flattened: 8 corner slots per (point, level).
  std::vector<std::uint32_t> corner_index;
  std::vector<S> corner_weight;
};

// Encode a batch of points in [0,1]^3 (clamped) into concatenated per-level
// trilinear features. `points` is (n x 3); output is (n x C_p).
template <typename S>
void hash_encode(const Mat<S>& points, const HashGridParams<S>& params,
                 const HashGridConfig& cfg, Mat<S>& features,
                 HashEncodeCache<S>* cache = nullptr) {
  const int n = int(points.rows());
  const int F = cfg.features_per_level;
  features.resize(n, cfg.feature_width());
  if (cache) {
    cache->n_levels = cfg.n_levels;
    cache->n_points = n;
    cache->corner_index.assign(std::size_t(n) * cfg.n_levels * 8, 0);
    cache->corner_weight.assign(std::size_t(n) * cfg.n_levels * 8, S(0));
  }
  const std::uint32_t mask = std::uint32_t(cfg.table_size() - 1);

  for (int level = 0; level < cfg.n_levels; ++level) {
    const int res = cfg.resolution(level);
    const Mat<S>& table = params.levels[std::size_t(level)];
    for (int i = 0; i < n; ++i) {
      double c[3], frac[3];
      std::uint32_t i0[3];
      for (int d = 0; d < 3; ++d) {
        double p = std::clamp(double(points(i, d)), 0.0, 1.0) * res;
        double f = std::floor(p);
        if (f > res - 1) f = res - 1;  // p == 1 lands on the last cell
        i0[d] = std::uint32_t(f);
        frac[d] = p - f;
        c[d] = 1.0 - frac[d];
      }
      for (int f = 0; f < F; ++f) features(i, level * F + f) = S(0);
      for (int corner = 0; corner < 8; ++corner) {
        const std::uint32_t dx = corner & 1u, dy = (corner >> 1) & 1u,
                            dz = (corner >> 2) & 1u;
        const double w = (dx ? frac[0] : c[0]) * (dy ? frac[1] : c[1]) *
                         (dz ? frac[2] : c[2]);
        const std::uint32_t idx =
            spatial_hash(i0[0] + dx, i0[1] + dy, i0[2] + dz, mask);
        for (int f = 0; f < F; ++f)
          features(i, level * F + f) += S(w) * table(idx, f);
        if (cache) {
          const std::size_t slot =
              (std::size_t(i) * cfg.n_levels + level) * 8 + corner;
          cache->corner_index[slot] = idx;
          cache->corner_weight[slot] = S(w);
        }
      }
    }
  }
}

// Scatter-add upstream feature gradients into per-level table gradients.
template <typename S>
void hash_encode_backward(const HashEncodeCache<S>& cache,
                          const Mat<S>& upstream, const HashGridConfig& cfg,
                          HashGridParams<S>& table_grads) {
  const int F = cfg.features_per_level;
  for (int level = 0; level < cfg.n_levels; ++level) {
    Mat<S>& grad = table_grads.levels[std::size_t(level)];
    for (int i = 0; i < cache.n_points; ++i) {
      for (int corner = 0; corner < 8; ++corner) {
        const std::size_t slot =
            (std::size_t(i) * cfg.n_levels + level) * 8 + corner;
        const S w = cache.corner_weight[slot];
        if (w == S(0)) continue;
        const std::uint32_t idx = cache.corner_index[slot];
        for (int f = 0; f < F; ++f)
          grad(idx, f) += w * upstream(i, level * F + f);
      }
    }
  }
}

struct SHConfig {
  int max_degree = 3;
  int feature_width() const { return (max_degree + 1) * (max_degree + 1); }
  void validate() const {
    require_config(max_degree >= 0 && max_degree <= 3,
                   "sh: max_degree must be in [0, 3]");
  }
};

inline std::atomic<std::uint64_t>& sh_normalization_warnings() {
  static std::atomic<std::uint64_t> count{0};
  return count;
}

// Real spherical harmonics basis through degree 3, hard-coded polynomials.
// Non-unit directions are normalized (and counted) rather than rejected.
template <typename S>
void sh_encode_one(S dx, S dy, S dz, const SHConfig& cfg, S* out) {
  double x = double(dx), y = double(dy), z = double(dz);
  const double norm = std::sqrt(x * x + y * y + z * z);
  if (std::abs(norm - 1.0) > 1e-6) {
    sh_normalization_warnings().fetch_add(1, std::memory_order_relaxed);
    require(norm > 0.0, "sh_encode: zero direction");
  }
  x /= norm;
  y /= norm;
  z /= norm;

  int k = 0;
  out[k++] = S(0.28209479177387814);
  if (cfg.max_degree >= 1) {
    out[k++] = S(0.4886025119029199 * y);
    out[k++] = S(0.4886025119029199 * z);
    out[k++] = S(0.4886025119029199 * x);
  }
  if (cfg.max_degree >= 2) {
    out[k++] = S(1.0925484305920792 * x * y);
    out[k++] = S(1.0925484305920792 * y * z);
    out[k++] = S(0.31539156525252005 * (3.0 * z * z - 1.0));
    out[k++] = S(1.0925484305920792 * x * z);
    out[k++] = S(0.5462742152960396 * (x * x - y * y));
  }
  if (cfg.max_degree >= 3) {
    out[k++] = S(0.5900435899266435 * y * (3.0 * x * x - y * y));
    out[k++] = S(2.890611442640554 * x * y * z);
    out[k++] = S(0.4570457994644658 * y * (5.0 * z * z - 1.0));
    out[k++] = S(0.3731763325901154 * z * (5.0 * z * z - 3.0));
    out[k++] = S(0.4570457994644658 * x * (5.0 * z * z - 1.0));
    out[k++] = S(1.445305721320277 * z * (x * x - y * y));
    out[k++] = S(0.5900435899266435 * x * (x * x - 3.0 * y * y));
  }
}

// `dirs` is (n x 3); output (n x C_d).
template <typename S>
void sh_encode(const Mat<S>& dirs, const SHConfig& cfg, Mat<S>& features) {
  const int n = int(dirs.rows());
  features.resize(n, cfg.feature_width());
  std::vector<S> row(static_cast<std::size_t>(cfg.feature_width()));
  for (int i = 0; i < n; ++i) {
    sh_encode_one(dirs(i, 0), dirs(i, 1), dirs(i, 2), cfg, row.data());
    for (int j = 0; j < cfg.feature_width(); ++j) features(i, j) = row[j];
  }
}

}  // namespace rayf
