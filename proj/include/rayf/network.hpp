#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "rayf/common.hpp"
#include "rayf/encoding.hpp"
#include "rayf/rng.hpp"

namespace rayf {

struct I2RConfig {
  int channels = 32;        // C
  int heads_per_path = 2;
  int n_blocks = 2;
  int l_samples = 32;       // L
  int win_h = 8, win_w = 8;
  int geo_dim = 15;
  bool no_intra = false;    // ablation: intra path passes V through unmixed
  bool no_inter = false;    // ablation: inter path passes V through unmixed

  int pixels_per_window() const { return win_h * win_w; }
  void validate() const {
    require_config(channels >= 2 && channels % 2 == 0,
                   "i2r: channel count must be even");
    require_config(heads_per_path >= 1 &&
                       (channels / 2) % heads_per_path == 0,
                   "i2r: half channels must divide into heads");
    require_config(n_blocks >= 1, "i2r: need at least one block");
    require_config(l_samples >= 1 && win_h >= 1 && win_w >= 1,
                   "i2r: empty sample geometry");
    require_config(geo_dim >= 1, "i2r: geo_dim must be positive");
  }
};

// ---------------------------------------------------------------------------
// Canonical layout. Point features live in (tokens x C) matrices where
// token = (w * P + p) * L + j for window w, pixel-in-window p, depth j.
// Intra-ray groups gather the L depths of one ray; inter-ray groups gather
// the P rays of one window at one shared depth.
// ---------------------------------------------------------------------------

inline std::pair<Eigen::Index, Eigen::Index> intra_coords(int w, int p, int j,
                                                          int P, int L) {
  (void)L;
  return {Eigen::Index(w) * P + p, Eigen::Index(j)};
}

inline std::pair<Eigen::Index, Eigen::Index> inter_coords(int w, int p, int j,
                                                          int P, int L) {
  (void)P;
  return {Eigen::Index(w) * L + j, Eigen::Index(p)};
}

// Channel half-split (first C/2 vs last C/2 columns). Views, zero copies.
template <typename S>
std::pair<Eigen::Ref<const Mat<S>>, Eigen::Ref<const Mat<S>>> half_split(
    const Mat<S>& x) {
  require(x.cols() % 2 == 0, "half_split: odd channel count");
  const Eigen::Index h = x.cols() / 2;
  return {x.leftCols(h), x.rightCols(h)};
}

// Reference regroupings used by tests and oracles. The production path keeps
// intra groups as contiguous row blocks and handles inter groups via a
// gather/scatter permutation.
template <typename S>
std::vector<Mat<S>> regroup_intra(const Mat<S>& half, int B, int P, int L) {
  require(half.rows() == Eigen::Index(B) * P * L,
          "regroup_intra: non-canonical layout");
  std::vector<Mat<S>> groups(static_cast<std::size_t>(B) * P);
  for (int w = 0; w < B; ++w)
    for (int p = 0; p < P; ++p)
      groups[std::size_t(w) * P + p] =
          half.middleRows(Eigen::Index(w * P + p) * L, L);
  return groups;
}

template <typename S>
std::vector<Mat<S>> regroup_inter(const Mat<S>& half, int B, int P, int L) {
  require(half.rows() == Eigen::Index(B) * P * L,
          "regroup_inter: non-canonical layout");
  std::vector<Mat<S>> groups(std::size_t(B) * L,
                             Mat<S>(P, half.cols()));
  for (int w = 0; w < B; ++w)
    for (int p = 0; p < P; ++p)
      for (int j = 0; j < L; ++j)
        groups[std::size_t(w) * L + j].row(p) =
            half.row(Eigen::Index(w * P + p) * L + j);
  return groups;
}

template <typename S>
Mat<S> regroup_intra_inverse(const std::vector<Mat<S>>& groups, int B, int P,
                             int L) {
  Mat<S> half(Eigen::Index(B) * P * L, groups.at(0).cols());
  for (int w = 0; w < B; ++w)
    for (int p = 0; p < P; ++p)
      half.middleRows(Eigen::Index(w * P + p) * L, L) =
          groups[std::size_t(w) * P + p];
  return half;
}

template <typename S>
Mat<S> regroup_inter_inverse(const std::vector<Mat<S>>& groups, int B, int P,
                             int L) {
  Mat<S> half(Eigen::Index(B) * P * L, groups.at(0).cols());
  for (int w = 0; w < B; ++w)
    for (int p = 0; p < P; ++p)
      for (int j = 0; j < L; ++j)
        half.row(Eigen::Index(w * P + p) * L + j) =
            groups[std::size_t(w) * L + j].row(p);
  return half;
}

// ---------------------------------------------------------------------------
// Grouped multi-head self-attention on contiguous row blocks.
// ---------------------------------------------------------------------------

template <typename S>
struct MsaCache {
  // Softmax matrices, token rows by (group_size * heads) columns.
  Mat<S> attn;
  int group_size = 0, heads = 0;
};

// Q, K, V hold n_groups consecutive blocks of `group_size` token rows; K rows
// identical within a group attend uniformly. Softmax rows are max-shifted.
template <typename S>
void msa_contiguous(const Mat<S>& Q, const Mat<S>& K, const Mat<S>& V,
                    int group_size, int heads, Mat<S>& out,
                    MsaCache<S>* cache, const char* path_name) {
  const Eigen::Index tokens = Q.rows();
  const Eigen::Index c = Q.cols();
  require(tokens % group_size == 0, "msa: tokens not divisible into groups");
  require(c % heads == 0, "msa: channels not divisible into heads");
  const Eigen::Index n_groups = tokens / group_size;
  const Eigen::Index ch = c / heads;
  const S inv_sqrt = S(1.0 / std::sqrt(double(ch)));

  out.resize(tokens, c);
  if (cache) {
    cache->attn.resize(tokens, Eigen::Index(group_size) * heads);
    cache->group_size = group_size;
    cache->heads = heads;
  }

  Mat<S> logits(group_size, group_size);
  for (Eigen::Index g = 0; g < n_groups; ++g) {
    const Eigen::Index r0 = g * group_size;
    for (int h = 0; h < heads; ++h) {
      const Eigen::Index c0 = h * ch;
      auto q = Q.block(r0, c0, group_size, ch);
      auto k = K.block(r0, c0, group_size, ch);
      auto v = V.block(r0, c0, group_size, ch);
      logits.noalias() = q * k.transpose();
      logits *= inv_sqrt;
      if (!logits.allFinite())
        throw numeric_error(std::string("msa: non-finite logits in ") +
                            path_name + " group " + std::to_string(g));
      for (Eigen::Index r = 0; r < group_size; ++r) {
        auto row = logits.row(r);
        row = (row.array() - row.maxCoeff()).exp();
        row /= row.sum();
      }
      out.block(r0, c0, group_size, ch).noalias() = logits * v;
      if (cache)
        cache->attn.block(r0, Eigen::Index(h) * group_size, group_size,
                          group_size) = logits;
    }
  }
}

template <typename S>
void msa_contiguous_backward(const Mat<S>& Q, const Mat<S>& K, const Mat<S>& V,
                             const MsaCache<S>& cache, const Mat<S>& d_out,
                             Mat<S>& dQ, Mat<S>& dK, Mat<S>& dV) {
  const Eigen::Index tokens = Q.rows();
  const Eigen::Index c = Q.cols();
  const int group_size = cache.group_size;
  const int heads = cache.heads;
  const Eigen::Index n_groups = tokens / group_size;
  const Eigen::Index ch = c / heads;
  const S inv_sqrt = S(1.0 / std::sqrt(double(ch)));

  dQ.resize(tokens, c);
  dK.resize(tokens, c);
  dV.resize(tokens, c);

  Mat<S> dA(group_size, group_size), dlog(group_size, group_size);
  for (Eigen::Index g = 0; g < n_groups; ++g) {
    const Eigen::Index r0 = g * group_size;
    for (int h = 0; h < heads; ++h) {
      const Eigen::Index c0 = h * ch;
      auto q = Q.block(r0, c0, group_size, ch);
      auto k = K.block(r0, c0, group_size, ch);
      auto v = V.block(r0, c0, group_size, ch);
      auto attn = cache.attn.block(r0, Eigen::Index(h) * group_size,
                                   group_size, group_size);
      auto dy = d_out.block(r0, c0, group_size, ch);

      dA.noalias() = dy * v.transpose();
      dV.block(r0, c0, group_size, ch).noalias() = attn.transpose() * dy;
      // softmax backward per row
      dlog = attn.cwiseProduct(dA);
      Vec<S> row_dot = dlog.rowwise().sum();
      dlog.noalias() = attn.cwiseProduct(dA.colwise() - row_dot);
      dQ.block(r0, c0, group_size, ch).noalias() = dlog * k * inv_sqrt;
      dK.block(r0, c0, group_size, ch).noalias() =
          dlog.transpose() * q * inv_sqrt;
    }
  }
}

// Reference entry point matching the per-group view of the operation; used
// by tests against loop oracles.
template <typename S>
std::vector<Mat<S>> msa_groups(const std::vector<Mat<S>>& Q,
                               const std::vector<Mat<S>>& K,
                               const std::vector<Mat<S>>& V, int heads) {
  require(!Q.empty() && Q.size() == K.size() && K.size() == V.size(),
          "msa_groups: group count mismatch");
  const int group_size = int(Q[0].rows());
  const Eigen::Index c = Q[0].cols();
  Mat<S> qc(Eigen::Index(Q.size()) * group_size, c), kc = qc, vc = qc;
  for (std::size_t g = 0; g < Q.size(); ++g) {
    qc.middleRows(Eigen::Index(g) * group_size, group_size) = Q[g];
    kc.middleRows(Eigen::Index(g) * group_size, group_size) = K[g];
    vc.middleRows(Eigen::Index(g) * group_size, group_size) = V[g];
  }
  Mat<S> out;
  msa_contiguous<S>(qc, kc, vc, group_size, heads, out, nullptr, "groups");
  std::vector<Mat<S>> result(Q.size());
  for (std::size_t g = 0; g < Q.size(); ++g)
    result[g] = out.middleRows(Eigen::Index(g) * group_size, group_size);
  return result;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <typename S>
struct LinearParam {
  Mat<S> W;  // (in x out)
  Vec<S> b;  // (out)

  static LinearParam zeros(int in, int out) {
    return {Mat<S>::Zero(in, out), Vec<S>::Zero(out)};
  }
  static LinearParam init(int in, int out, Rng& rng) {
    LinearParam p = zeros(in, out);
    const double a = std::sqrt(6.0 / double(in + out));
    for (Eigen::Index i = 0; i < p.W.size(); ++i)
      p.W.data()[i] = S((rng.uniform() * 2.0 - 1.0) * a);
    return p;
  }
};

template <typename S>
struct BlockParams {
  LinearParam<S> q, k, v, o;
  Vec<S> ln1_g, ln1_b, ln2_g, ln2_b;
  LinearParam<S> ffn1, ffn2;
};

template <typename S>
struct NetworkParams {
  HashGridConfig grid_cfg;
  SHConfig sh_cfg;
  I2RConfig cfg;

  HashGridParams<S> grid;
  LinearParam<S> proj_in;
  std::vector<BlockParams<S>> blocks;
  LinearParam<S> density;        // C -> 1 + geo_dim
  LinearParam<S> color_hidden;   // geo_dim + C_d -> C
  LinearParam<S> color_out;      // C -> 3
  Vec<S> pose_first = Vec<S>::Zero(6), pose_last = Vec<S>::Zero(6);

  static NetworkParams shaped(const I2RConfig& cfg,
                              const HashGridConfig& grid_cfg,
                              const SHConfig& sh_cfg) {
    cfg.validate();
    grid_cfg.validate();
    sh_cfg.validate();
    NetworkParams p;
    p.cfg = cfg;
    p.grid_cfg = grid_cfg;
    p.sh_cfg = sh_cfg;
    const int C = cfg.channels;
    p.grid = HashGridParams<S>::zeros(grid_cfg);
    p.proj_in = LinearParam<S>::zeros(grid_cfg.feature_width(), C);
    p.blocks.resize(std::size_t(cfg.n_blocks));
    for (auto& b : p.blocks) {
      b.q = b.k = b.v = b.o = LinearParam<S>::zeros(C, C);
      b.ln1_g = b.ln2_g = Vec<S>::Zero(C);
      b.ln1_b = b.ln2_b = Vec<S>::Zero(C);
      b.ffn1 = LinearParam<S>::zeros(C, 2 * C);
      b.ffn2 = LinearParam<S>::zeros(2 * C, C);
    }
    p.density = LinearParam<S>::zeros(C, 1 + cfg.geo_dim);
    p.color_hidden = LinearParam<S>::zeros(
        cfg.geo_dim + sh_cfg.feature_width(), C);
    p.color_out = LinearParam<S>::zeros(C, 3);
    return p;
  }

  static NetworkParams init(const I2RConfig& cfg,
                            const HashGridConfig& grid_cfg,
                            const SHConfig& sh_cfg, std::uint64_t seed) {
    NetworkParams p = shaped(cfg, grid_cfg, sh_cfg);
    Rng rng(seed);
    p.grid = HashGridParams<S>::init(grid_cfg, rng);
    const int C = cfg.channels;
    p.proj_in = LinearParam<S>::init(grid_cfg.feature_width(), C, rng);
    for (auto& b : p.blocks) {
      b.q = LinearParam<S>::init(C, C, rng);
      b.k = LinearParam<S>::init(C, C, rng);
      b.v = LinearParam<S>::init(C, C, rng);
      b.o = LinearParam<S>::init(C, C, rng);
      b.ln1_g.setOnes();
      b.ln2_g.setOnes();
      b.ffn1 = LinearParam<S>::init(C, 2 * C, rng);
      b.ffn2 = LinearParam<S>::init(2 * C, C, rng);
    }
    p.density = LinearParam<S>::init(C, 1 + cfg.geo_dim, rng);
    p.color_hidden =
        LinearParam<S>::init(cfg.geo_dim + sh_cfg.feature_width(), C, rng);
    p.color_out = LinearParam<S>::init(C, 3, rng);
    return p;
  }
};

// Visit every trainable tensor of one or more parameter mirrors in a fixed
// order. The callable sees (name, tensor&...) and must accept both matrix
// and vector tensors.
template <typename F, typename P0, typename... Ps>
void visit_params(F&& f, P0& p0, Ps&... ps) {
  for (std::size_t l = 0; l < p0.grid.levels.size(); ++l)
    f("grid.l" + std::to_string(l), p0.grid.levels[l], ps.grid.levels[l]...);
  f("proj_in.W", p0.proj_in.W, ps.proj_in.W...);
  f("proj_in.b", p0.proj_in.b, ps.proj_in.b...);
  for (std::size_t i = 0; i < p0.blocks.size(); ++i) {
    const std::string base = "block" + std::to_string(i) + ".";
    f(base + "ln1.g", p0.blocks[i].ln1_g, ps.blocks[i].ln1_g...);
    f(base + "ln1.b", p0.blocks[i].ln1_b, ps.blocks[i].ln1_b...);
    f(base + "q.W", p0.blocks[i].q.W, ps.blocks[i].q.W...);
    f(base + "q.b", p0.blocks[i].q.b, ps.blocks[i].q.b...);
    f(base + "k.W", p0.blocks[i].k.W, ps.blocks[i].k.W...);
    f(base + "k.b", p0.blocks[i].k.b, ps.blocks[i].k.b...);
    f(base + "v.W", p0.blocks[i].v.W, ps.blocks[i].v.W...);
    f(base + "v.b", p0.blocks[i].v.b, ps.blocks[i].v.b...);
    f(base + "o.W", p0.blocks[i].o.W, ps.blocks[i].o.W...);
    f(base + "o.b", p0.blocks[i].o.b, ps.blocks[i].o.b...);
    f(base + "ln2.g", p0.blocks[i].ln2_g, ps.blocks[i].ln2_g...);
    f(base + "ln2.b", p0.blocks[i].ln2_b, ps.blocks[i].ln2_b...);
    f(base + "ffn1.W", p0.blocks[i].ffn1.W, ps.blocks[i].ffn1.W...);
    f(base + "ffn1.b", p0.blocks[i].ffn1.b, ps.blocks[i].ffn1.b...);
    f(base + "ffn2.W", p0.blocks[i].ffn2.W, ps.blocks[i].ffn2.W...);
    f(base + "ffn2.b", p0.blocks[i].ffn2.b, ps.blocks[i].ffn2.b...);
  }
  f("density.W", p0.density.W, ps.density.W...);
  f("density.b", p0.density.b, ps.density.b...);
  f("color_hidden.W", p0.color_hidden.W, ps.color_hidden.W...);
  f("color_hidden.b", p0.color_hidden.b, ps.color_hidden.b...);
  f("color_out.W", p0.color_out.W, ps.color_out.W...);
  f("color_out.b", p0.color_out.b, ps.color_out.b...);
  f("pose.first", p0.pose_first, ps.pose_first...);
  f("pose.last", p0.pose_last, ps.pose_last...);
}

template <typename S>
std::size_t parameter_census(const NetworkParams<S>& params) {
  std::size_t count = 0;
  visit_params([&](const std::string&, const auto& t) { count += t.size(); },
               params);
  return count;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename S>
S sigmoid(S x) {
  if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
  const S e = std::exp(x);
  return e / (S(1) + e);
}

template <typename S>
S softplus(S x) {
  return std::log1p(std::exp(-std::abs(x))) + std::max(x, S(0));
}

template <typename S>
S gelu(S x) {
  return S(0.5) * x * (S(1) + S(std::erf(double(x) * M_SQRT1_2)));
}

template <typename S>
S gelu_grad(S x) {
  const double xd = double(x);
  const double phi = std::exp(-0.5 * xd * xd) / std::sqrt(2.0 * M_PI);
  return S(0.5 * (1.0 + std::erf(xd * M_SQRT1_2)) + xd * phi);
}

// ---------------------------------------------------------------------------
// Layer normalization over channels (per token row)
// ---------------------------------------------------------------------------

template <typename S>
struct LnCache {
  Mat<S> xhat;
  Vec<S> rstd;
};

template <typename S>
void layer_norm(const Mat<S>& x, const Vec<S>& g, const Vec<S>& b, Mat<S>& y,
                LnCache<S>* cache) {
  const Eigen::Index n = x.rows(), C = x.cols();
  const S eps = S(1e-6);
  y.resize(n, C);
  if (cache) {
    cache->xhat.resize(n, C);
    cache->rstd.resize(n);
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    const S mean = x.row(i).mean();
    const S var = (x.row(i).array() - mean).square().mean();
    const S rstd = S(1) / std::sqrt(var + eps);
    for (Eigen::Index c = 0; c < C; ++c) {
      const S xhat = (x(i, c) - mean) * rstd;
      y(i, c) = xhat * g(c) + b(c);
      if (cache) cache->xhat(i, c) = xhat;
    }
    if (cache) cache->rstd(i) = rstd;
  }
}

template <typename S>
void layer_norm_backward(const LnCache<S>& cache, const Vec<S>& g,
                         const Mat<S>& dy, Mat<S>& dx, Vec<S>& dg, Vec<S>& db) {
  const Eigen::Index n = dy.rows(), C = dy.cols();
  dx.resize(n, C);
  for (Eigen::Index i = 0; i < n; ++i) {
    S sum_dxh = S(0), sum_dxh_xhat = S(0);
    for (Eigen::Index c = 0; c < C; ++c) {
      const S dxh = dy(i, c) * g(c);
      sum_dxh += dxh;
      sum_dxh_xhat += dxh * cache.xhat(i, c);
      dg(c) += dy(i, c) * cache.xhat(i, c);
      db(c) += dy(i, c);
    }
    const S inv_c = S(1) / S(C);
    for (Eigen::Index c = 0; c < C; ++c) {
      const S dxh = dy(i, c) * g(c);
      dx(i, c) = cache.rstd(i) *
                 (dxh - inv_c * sum_dxh - cache.xhat(i, c) * inv_c * sum_dxh_xhat);
    }
  }
}

// ---------------------------------------------------------------------------
// I2R-MSA and transformer block
// ---------------------------------------------------------------------------

template <typename S>
struct I2rCache {
  Mat<S> x_in;          // input to the projections
  Mat<S> q, k, v;       // full-width projections
  Mat<S> qg, kg, vg;    // inter halves gathered into contiguous groups
  Mat<S> concat;        // both paths after inverse regroup, pre output proj
  MsaCache<S> intra, inter;
};

// Gather rows of the inter half into depth-contiguous groups; `fwd` selects
// gather vs scatter. Group (w, j) holds the P rays of window w at depth j.
template <typename S, bool kGather>
void inter_permute(const Eigen::Ref<const Mat<S>>& src, Mat<S>& dst, int B,
                   int P, int L) {
  dst.resize(src.rows(), src.cols());
  for (int w = 0; w < B; ++w) {
    const Eigen::Index base = Eigen::Index(w) * P * L;
    for (int p = 0; p < P; ++p)
      for (int j = 0; j < L; ++j) {
        const Eigen::Index tok = base + Eigen::Index(p) * L + j;
        const Eigen::Index grouped = base + Eigen::Index(j) * P + p;
        if constexpr (kGather)
          dst.row(grouped) = src.row(tok);
        else
          dst.row(tok) = src.row(grouped);
      }
  }
}

// Dual-path attention: project, half-split, attend intra (depth) and inter
// (window) groups, concatenate, project out. Shape preserving.
template <typename S>
void i2r_msa(const Mat<S>& x, const BlockParams<S>& bp, const I2RConfig& cfg,
             Mat<S>& out, I2rCache<S>* cache) {
  const int P = cfg.pixels_per_window();
  const int L = cfg.l_samples;
  const Eigen::Index tokens = x.rows();
  const int C = cfg.channels;
  require(x.cols() == C, "i2r_msa: channel mismatch");
  require(tokens % (Eigen::Index(P) * L) == 0,
          "i2r_msa: non-canonical layout");
  const int B = int(tokens / (Eigen::Index(P) * L));
  const Eigen::Index half = C / 2;

  Mat<S> q = (x * bp.q.W).rowwise() + bp.q.b.transpose();
  Mat<S> k = (x * bp.k.W).rowwise() + bp.k.b.transpose();
  Mat<S> v = (x * bp.v.W).rowwise() + bp.v.b.transpose();

  Mat<S> concat(tokens, C);

  // Intra path (first half): groups are contiguous L-row blocks already.
  if (cfg.no_intra) {
    concat.leftCols(half) = v.leftCols(half);
  } else {
    Mat<S> ya;
    msa_contiguous<S>(q.leftCols(half), k.leftCols(half), v.leftCols(half), L,
                      cfg.heads_per_path, ya, cache ? &cache->intra : nullptr,
                      "intra");
    concat.leftCols(half) = ya;
  }

  // Inter path (second half): permute depth-major, attend, permute back.
  Mat<S> qg, kg, vg, yg;
  if (cfg.no_inter) {
    concat.rightCols(half) = v.rightCols(half);
  } else {
    inter_permute<S, true>(q.rightCols(half), qg, B, P, L);
    inter_permute<S, true>(k.rightCols(half), kg, B, P, L);
    inter_permute<S, true>(v.rightCols(half), vg, B, P, L);
    Mat<S> yb;
    msa_contiguous<S>(qg, kg, vg, P, cfg.heads_per_path, yb,
                      cache ? &cache->inter : nullptr, "inter");
    Mat<S> yb_tokens;
    inter_permute<S, false>(yb, yb_tokens, B, P, L);
    concat.rightCols(half) = yb_tokens;
  }

  out.noalias() = concat * bp.o.W;
  out.rowwise() += bp.o.b.transpose();

  if (cache) {
    cache->x_in = x;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->qg = std::move(qg);
    cache->kg = std::move(kg);
    cache->vg = std::move(vg);
    cache->concat = std::move(concat);
  }
}

template <typename S>
void i2r_msa_backward(const I2rCache<S>& cache, const BlockParams<S>& bp,
                      const I2RConfig& cfg, const Mat<S>& d_out,
                      BlockParams<S>& grads, Mat<S>& dx) {
  const int P = cfg.pixels_per_window();
  const int L = cfg.l_samples;
  const Eigen::Index tokens = d_out.rows();
  const int B = int(tokens / (Eigen::Index(P) * L));
  const Eigen::Index half = cfg.channels / 2;

  grads.o.W.noalias() += cache.concat.transpose() * d_out;
  grads.o.b += d_out.colwise().sum().transpose();
  Mat<S> d_concat = d_out * bp.o.W.transpose();

  Mat<S> dq = Mat<S>::Zero(tokens, cfg.channels);
  Mat<S> dk = Mat<S>::Zero(tokens, cfg.channels);
  Mat<S> dv = Mat<S>::Zero(tokens, cfg.channels);

  if (cfg.no_intra) {
    dv.leftCols(half) = d_concat.leftCols(half);
  } else {
    Mat<S> dqa, dka, dva;
    msa_contiguous_backward<S>(cache.q.leftCols(half), cache.k.leftCols(half),
                               cache.v.leftCols(half), cache.intra,
                               d_concat.leftCols(half), dqa, dka, dva);
    dq.leftCols(half) = dqa;
    dk.leftCols(half) = dka;
    dv.leftCols(half) = dva;
  }

  if (cfg.no_inter) {
    dv.rightCols(half) = d_concat.rightCols(half);
  } else {
    Mat<S> dyg;
    inter_permute<S, true>(d_concat.rightCols(half), dyg, B, P, L);
    Mat<S> dqg, dkg, dvg;
    msa_contiguous_backward<S>(cache.qg, cache.kg, cache.vg, cache.inter, dyg,
                               dqg, dkg, dvg);
    Mat<S> tmp;
    inter_permute<S, false>(dqg, tmp, B, P, L);
    dq.rightCols(half) = tmp;
    inter_permute<S, false>(dkg, tmp, B, P, L);
    dk.rightCols(half) = tmp;
    inter_permute<S, false>(dvg, tmp, B, P, L);
    dv.rightCols(half) = tmp;
  }

  grads.q.W.noalias() += cache.x_in.transpose() * dq;
  grads.q.b += dq.colwise().sum().transpose();
  grads.k.W.noalias() += cache.x_in.transpose() * dk;
  grads.k.b += dk.colwise().sum().transpose();
  grads.v.W.noalias() += cache.x_in.transpose() * dv;
  grads.v.b += dv.colwise().sum().transpose();

  dx.noalias() = dq * bp.q.W.transpose();
  dx.noalias() += dk * bp.k.W.transpose();
  dx.noalias() += dv * bp.v.W.transpose();
}

template <typename S>
struct BlockCache {
  LnCache<S> ln1, ln2;
  Mat<S> ln1_out, ln2_out;
  I2rCache<S> attn;
  Mat<S> x1;        // after attention residual
  Mat<S> ffn_pre;   // ffn1 output before activation
  Mat<S> ffn_act;
};

// Pre-norm residual block: x + i2r_msa(norm(x)), then x + ffn(norm(x)).
template <typename S>
void block_forward(const Mat<S>& x, const BlockParams<S>& bp,
                   const I2RConfig& cfg, Mat<S>& out, BlockCache<S>* cache) {
  Mat<S> ln1_out;
  layer_norm<S>(x, bp.ln1_g, bp.ln1_b, ln1_out, cache ? &cache->ln1 : nullptr);
  Mat<S> attn_out;
  i2r_msa<S>(ln1_out, bp, cfg, attn_out, cache ? &cache->attn : nullptr);
  Mat<S> x1 = x + attn_out;

  Mat<S> ln2_out;
  layer_norm<S>(x1, bp.ln2_g, bp.ln2_b, ln2_out,
                cache ? &cache->ln2 : nullptr);
  Mat<S> pre = (ln2_out * bp.ffn1.W).rowwise() + bp.ffn1.b.transpose();
  Mat<S> act = pre.unaryExpr([](S t) { return gelu(t); });
  out.noalias() = act * bp.ffn2.W;
  out.rowwise() += bp.ffn2.b.transpose();
  out += x1;

  if (cache) {
    cache->ln1_out = std::move(ln1_out);
    cache->ln2_out = std::move(ln2_out);
    cache->x1 = std::move(x1);
    cache->ffn_pre = std::move(pre);
    cache->ffn_act = std::move(act);
  }
}

template <typename S>
void block_backward(const BlockCache<S>& cache, const BlockParams<S>& bp,
                    const I2RConfig& cfg, const Mat<S>& d_out,
                    BlockParams<S>& grads, Mat<S>& dx) {
  // FFN sub-layer
  grads.ffn2.W.noalias() += cache.ffn_act.transpose() * d_out;
  grads.ffn2.b += d_out.colwise().sum().transpose();
  Mat<S> d_act = d_out * bp.ffn2.W.transpose();
  Mat<S> d_pre =
      d_act.cwiseProduct(cache.ffn_pre.unaryExpr([](S t) { return gelu_grad(t); }));
  grads.ffn1.W.noalias() += cache.ln2_out.transpose() * d_pre;
  grads.ffn1.b += d_pre.colwise().sum().transpose();
  Mat<S> d_ln2_out = d_pre * bp.ffn1.W.transpose();

  Mat<S> d_x1;
  layer_norm_backward<S>(cache.ln2, bp.ln2_g, d_ln2_out, d_x1, grads.ln2_g,
                         grads.ln2_b);
  d_x1 += d_out;  // residual

  // Attention sub-layer
  Mat<S> d_ln1_out;
  i2r_msa_backward<S>(cache.attn, bp, cfg, d_x1, grads, d_ln1_out);
  layer_norm_backward<S>(cache.ln1, bp.ln1_g, d_ln1_out, dx, grads.ln1_g,
                         grads.ln1_b);
  dx += d_x1;  // residual
}

// ---------------------------------------------------------------------------
// Full network forward/backward
// ---------------------------------------------------------------------------

template <typename S>
struct NetCache {
  HashEncodeCache<S> hash;
  Mat<S> hash_features;
  Mat<S> x0;
  std::vector<BlockCache<S>> blocks;
  Mat<S> x_final;
  Vec<S> sigma_logit;
  Mat<S> color_in;      // [geo | sh] per token
  Mat<S> hidden_pre;
  Mat<S> hidden_act;
  Mat<S> rgb;           // cached for sigmoid backward
  Eigen::Index tokens = 0;
};

template <typename S>
struct NetOutput {
  Vec<S> sigma;  // tokens, non-negative
  Mat<S> rgb;    // tokens x 3, in (0, 1)
};

// positions: (tokens x 3) already normalized to the unit cube; dirs: one unit
// direction per ray (tokens = rays * L), shared by the ray's L samples.
template <typename S>
void net_forward(const NetworkParams<S>& params, const Mat<S>& positions,
                 const Mat<S>& dirs, NetOutput<S>& out, NetCache<S>* cache) {
  const I2RConfig& cfg = params.cfg;
  const Eigen::Index tokens = positions.rows();
  const int L = cfg.l_samples;
  require(tokens % L == 0, "net_forward: tokens not divisible by L");
  const Eigen::Index rays = tokens / L;
  require(dirs.rows() == rays, "net_forward: one direction per ray expected");

  Mat<S> hash_features;
  hash_encode<S>(positions, params.grid, params.grid_cfg, hash_features,
                 cache ? &cache->hash : nullptr);

  Mat<S> x = (hash_features * params.proj_in.W).rowwise() +
             params.proj_in.b.transpose();
  if (cache) {
    cache->tokens = tokens;
    cache->hash_features = hash_features;
    cache->x0 = x;
    cache->blocks.resize(std::size_t(cfg.n_blocks));
  }

  for (int i = 0; i < cfg.n_blocks; ++i) {
    Mat<S> next;
    block_forward<S>(x, params.blocks[std::size_t(i)], cfg, next,
                     cache ? &cache->blocks[std::size_t(i)] : nullptr);
    x = std::move(next);
  }

  Mat<S> density_out =
      (x * params.density.W).rowwise() + params.density.b.transpose();
  out.sigma.resize(tokens);
  for (Eigen::Index t = 0; t < tokens; ++t)
    out.sigma(t) = softplus(density_out(t, 0));

  Mat<S> sh;
  sh_encode<S>(dirs, params.sh_cfg, sh);

  const int geo = cfg.geo_dim;
  const int cd = params.sh_cfg.feature_width();
  Mat<S> color_in(tokens, geo + cd);
  color_in.leftCols(geo) = density_out.rightCols(geo);
  for (Eigen::Index r = 0; r < rays; ++r)
    color_in.block(r * L, geo, L, cd).rowwise() = sh.row(r);

  Mat<S> hidden_pre = (color_in * params.color_hidden.W).rowwise() +
                      params.color_hidden.b.transpose();
  Mat<S> hidden_act = hidden_pre.unaryExpr([](S t) { return gelu(t); });
  Mat<S> rgb_logit =
      (hidden_act * params.color_out.W).rowwise() +
      params.color_out.b.transpose();
  out.rgb = rgb_logit.unaryExpr([](S t) { return sigmoid(t); });

  if (cache) {
    cache->x_final = std::move(x);
    cache->sigma_logit = density_out.col(0);
    cache->color_in = std::move(color_in);
    cache->hidden_pre = std::move(hidden_pre);
    cache->hidden_act = std::move(hidden_act);
    cache->rgb = out.rgb;
  }
}

// Accumulates parameter gradients; upstream is (d_sigma, d_rgb).
template <typename S>
void net_backward(const NetworkParams<S>& params, const NetCache<S>& cache,
                  const Vec<S>& d_sigma, const Mat<S>& d_rgb,
                  NetworkParams<S>& grads) {
  const I2RConfig& cfg = params.cfg;
  const Eigen::Index tokens = cache.tokens;
  const int geo = cfg.geo_dim;

  // Color head
  Mat<S> d_rgb_logit =
      d_rgb.cwiseProduct(cache.rgb.cwiseProduct(Mat<S>::Ones(tokens, 3) - cache.rgb));
  grads.color_out.W.noalias() += cache.hidden_act.transpose() * d_rgb_logit;
  grads.color_out.b += d_rgb_logit.colwise().sum().transpose();
  Mat<S> d_hidden_act = d_rgb_logit * params.color_out.W.transpose();
  Mat<S> d_hidden_pre = d_hidden_act.cwiseProduct(
      cache.hidden_pre.unaryExpr([](S t) { return gelu_grad(t); }));
  grads.color_hidden.W.noalias() += cache.color_in.transpose() * d_hidden_pre;
  grads.color_hidden.b += d_hidden_pre.colwise().sum().transpose();
  Mat<S> d_color_in = d_hidden_pre * params.color_hidden.W.transpose();
  // Direction features receive no gradient (poses are optimized by finite
  // differences); only the geo slice flows back.

  // Density head
  Mat<S> d_density_out(tokens, 1 + geo);
  for (Eigen::Index t = 0; t < tokens; ++t)
    d_density_out(t, 0) = d_sigma(t) * sigmoid(cache.sigma_logit(t));
  d_density_out.rightCols(geo) = d_color_in.leftCols(geo);
  grads.density.W.noalias() += cache.x_final.transpose() * d_density_out;
  grads.density.b += d_density_out.colwise().sum().transpose();
  Mat<S> dx = d_density_out * params.density.W.transpose();

  for (int i = cfg.n_blocks - 1; i >= 0; --i) {
    Mat<S> dx_prev;
    block_backward<S>(cache.blocks[std::size_t(i)],
                      params.blocks[std::size_t(i)], cfg, dx,
                      grads.blocks[std::size_t(i)], dx_prev);
    dx = std::move(dx_prev);
  }

  grads.proj_in.W.noalias() += cache.hash_features.transpose() * dx;
  grads.proj_in.b += dx.colwise().sum().transpose();
  Mat<S> d_hash = dx * params.proj_in.W.transpose();
  hash_encode_backward<S>(cache.hash, d_hash, params.grid_cfg, grads.grid);
}

}  // namespace rayf
