#pragma once

#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "rayf/io.hpp"
#include "rayf/metrics.hpp"
#include "rayf/network.hpp"
#include "rayf/renderer.hpp"
#include "rayf/sci.hpp"

namespace rayf {

struct TrainConfig {
  int iterations = 5000;
  int batch_windows = 16;
  double lr_hash = 1e-2;
  double lr_net = 1e-3;
  double lr_pose = 1e-4;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::uint64_t seed = 0;
  double lambda_tv = 1e-3;
  double pose_perturbation = 0.01;  // se(3) noise applied to the boundary poses
  double pose_fd_step = 1e-3;
  int pose_fd_windows = 2;   // batch prefix used for the pose loss estimate
  int pose_fd_every = 10;    // finite-difference pose update period
  bool optimize_poses = true;
  bool no_patch = false;     // ablation: independent random rays, TV off
  int eval_every = 250;
  int checkpoint_every = 1000;

  void validate() const {
    require_config(iterations >= 0, "train: negative iteration count");
    require_config(batch_windows >= 1, "train: need at least one window");
    require_config(lr_hash > 0 && lr_net > 0 && lr_pose > 0,
                   "train: learning rates must be positive");
    require_config(lambda_tv >= 0 && std::isfinite(lambda_tv),
                   "train: lambda_tv must be finite and non-negative");
    require_config(pose_fd_step > 0, "train: pose_fd_step must be positive");
    require_config(pose_fd_windows >= 1 && pose_fd_every >= 1,
                   "train: pose fd schedule must be positive");
  }
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Y'(r) = sum_i M(r, i) * C(r, i), per pixel and channel of one window.
template <typename S>
Mat<S> synthesize_patch_measurement(const std::vector<Mat<S>>& frame_patches,
                                    const Mat<S>& mask_patch) {
  require_shape(!frame_patches.empty(), "synthesize: no frames");
  const Eigen::Index P = frame_patches[0].rows();
  require_shape(mask_patch.rows() == Eigen::Index(frame_patches.size()) &&
                    mask_patch.cols() == P,
                "synthesize: mask patch shape mismatch");
  Mat<S> y = Mat<S>::Zero(P, 3);
  for (std::size_t i = 0; i < frame_patches.size(); ++i) {
    require_shape(frame_patches[i].rows() == P && frame_patches[i].cols() == 3,
                  "synthesize: frame patch shape mismatch");
    y += (frame_patches[i].array().colwise() *
          mask_patch.row(Eigen::Index(i)).transpose().array())
             .matrix();
  }
  return y;
}

// Sum of squared differences within each patch, averaged over patches.
template <typename S>
S measurement_loss(const std::vector<Mat<S>>& observed,
                   const std::vector<Mat<S>>& synthesized) {
  require_shape(observed.size() == synthesized.size() && !observed.empty(),
                "measurement_loss: batch mismatch");
  S total = S(0);
  for (std::size_t i = 0; i < observed.size(); ++i) {
    require_shape(observed[i].rows() == synthesized[i].rows() &&
                      observed[i].cols() == synthesized[i].cols(),
                  "measurement_loss: patch shape mismatch");
    total += (observed[i] - synthesized[i]).squaredNorm();
  }
  return total / S(observed.size());
}

// Anisotropic L1 total variation of one rendered patch, summed over channels.
// Pixels are row-major within the (win_h x win_w) window.
template <typename S>
S tv_loss(const Mat<S>& patch, int win_h, int win_w) {
  require_shape(patch.rows() == Eigen::Index(win_h) * win_w,
                "tv_loss: patch does not match window");
  S total = S(0);
  for (int ch = 0; ch < 3; ++ch) {
    for (int r = 0; r < win_h; ++r)
      for (int c = 0; c + 1 < win_w; ++c) {
        const Eigen::Index p = Eigen::Index(r) * win_w + c;
        total += std::abs(patch(p + 1, ch) - patch(p, ch));
      }
    for (int r = 0; r + 1 < win_h; ++r)
      for (int c = 0; c < win_w; ++c) {
        const Eigen::Index p = Eigen::Index(r) * win_w + c;
        total += std::abs(patch(p + win_w, ch) - patch(p, ch));
      }
  }
  return total;
}

// Subgradient of tv_loss, scaled by `scale`, accumulated into d_patch.
template <typename S>
void tv_loss_backward(const Mat<S>& patch, int win_h, int win_w, S scale,
                      Mat<S>& d_patch) {
  auto sign = [](S x) { return x > S(0) ? S(1) : (x < S(0) ? S(-1) : S(0)); };
  for (int ch = 0; ch < 3; ++ch) {
    for (int r = 0; r < win_h; ++r)
      for (int c = 0; c + 1 < win_w; ++c) {
        const Eigen::Index p = Eigen::Index(r) * win_w + c;
        const S s = sign(patch(p + 1, ch) - patch(p, ch)) * scale;
        d_patch(p + 1, ch) += s;
        d_patch(p, ch) -= s;
      }
    for (int r = 0; r + 1 < win_h; ++r)
      for (int c = 0; c < win_w; ++c) {
        const Eigen::Index p = Eigen::Index(r) * win_w + c;
        const S s = sign(patch(p + win_w, ch) - patch(p, ch)) * scale;
        d_patch(p + win_w, ch) += s;
        d_patch(p, ch) -= s;
      }
  }
}

// ---------------------------------------------------------------------------
// Optimizer: adaptive moments with bias correction, deterministic.
// ---------------------------------------------------------------------------

template <typename S>
struct AdamState {
  NetworkParams<S> m, v;
  long step = 0;

  static AdamState like(const NetworkParams<S>& params) {
    AdamState st;
    st.m = NetworkParams<S>::shaped(params.cfg, params.grid_cfg, params.sh_cfg);
    st.v = NetworkParams<S>::shaped(params.cfg, params.grid_cfg, params.sh_cfg);
    return st;
  }
};

template <typename S>
void adam_step(NetworkParams<S>& params, const NetworkParams<S>& grads,
               AdamState<S>& state, const TrainConfig& cfg) {
  ++state.step;
  const S b1 = S(cfg.beta1), b2 = S(cfg.beta2);
  const S bc1 = S(1) - S(std::pow(cfg.beta1, double(state.step)));
  const S bc2 = S(1) - S(std::pow(cfg.beta2, double(state.step)));
  visit_params(
      [&](const std::string& name, auto& p, const auto& g, auto& m, auto& v) {
        S lr = S(cfg.lr_net);
        if (name.rfind("grid.", 0) == 0) lr = S(cfg.lr_hash);
        if (name.rfind("pose.", 0) == 0) lr = S(cfg.lr_pose);
        m = b1 * m + (S(1) - b1) * g;
        v = (b2 * v.array() + (S(1) - b2) * g.array().square()).matrix();
        auto mhat = m.array() / bc1;
        auto vhat = v.array() / bc2;
        p.array() -= lr * mhat / (vhat.sqrt() + S(cfg.eps));
      },
      params, const_cast<NetworkParams<S>&>(grads), state.m, state.v);
}

// Central finite differences on the two pose 6-vectors.
template <typename LossFn>
std::pair<Vec6, Vec6> pose_gradients(LossFn&& loss, const Vec6& xi_first,
                                     const Vec6& xi_last, double h) {
  Vec6 g_first = Vec6::Zero(), g_last = Vec6::Zero();
  for (int d = 0; d < 6; ++d) {
    Vec6 plus = xi_first, minus = xi_first;
    plus(d) += h;
    minus(d) -= h;
    g_first(d) = (loss(plus, xi_last) - loss(minus, xi_last)) / (2.0 * h);
  }
  for (int d = 0; d < 6; ++d) {
    Vec6 plus = xi_last, minus = xi_last;
    plus(d) += h;
    minus(d) -= h;
    g_last(d) = (loss(xi_first, plus) - loss(xi_first, minus)) / (2.0 * h);
  }
  return {g_first, g_last};
}

// ---------------------------------------------------------------------------
// Dataset and checkpoints
// ---------------------------------------------------------------------------

struct SciDataset {
  MaskStack masks;          // (N, H, W)
  Measurement measurement;  // (H, W, 3)
  FrameStack gt;            // (N, H, W, 3)
  Pose traj_first, traj_last;
  CameraIntrinsics intr;

  int n_frames() const { return int(masks.dim(0)); }
};

template <typename S>
std::vector<NamedTensor> params_to_checkpoint(const NetworkParams<S>& params,
                                              const Pose& base_first,
                                              const Pose& base_last) {
  std::vector<NamedTensor> out;
  visit_params(
      [&](const std::string& name, const auto& t) {
        NamedTensor nt;
        nt.name = name;
        if (t.cols() == 1)
          nt.values = NdArray<float>({std::size_t(t.rows())});
        else
          nt.values =
              NdArray<float>({std::size_t(t.rows()), std::size_t(t.cols())});
        for (Eigen::Index i = 0; i < t.size(); ++i)
          nt.values[std::size_t(i)] = float(t.data()[i]);
        out.push_back(std::move(nt));
      },
      params);
  // Boundary poses are stored as se(3) logs so the reconstruction stays
  // exactly orthonormal.
  for (const auto& [name, pose] :
       {std::pair<const char*, const Pose&>{"base_pose.first", base_first},
        {"base_pose.last", base_last}}) {
    const Vec6 xi = se3_log(pose);
    NamedTensor nt;
    nt.name = name;
    nt.values = NdArray<float>({6});
    for (int i = 0; i < 6; ++i) nt.values[std::size_t(i)] = float(xi(i));
    out.push_back(std::move(nt));
  }
  return out;
}

template <typename S>
void params_from_checkpoint(const std::vector<NamedTensor>& tensors,
                            NetworkParams<S>& params, Pose& base_first,
                            Pose& base_last) {
  auto find = [&](const std::string& name) -> const NamedTensor& {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw error("checkpoint: missing tensor " + name);
  };
  visit_params(
      [&](const std::string& name, auto& t) {
        const auto& nt = find(name);
        require_shape(std::size_t(t.size()) == nt.values.numel(),
                      "checkpoint: size mismatch for " + name);
        for (Eigen::Index i = 0; i < t.size(); ++i)
          t.data()[i] = S(nt.values[std::size_t(i)]);
      },
      params);
  for (const auto& [name, pose] :
       {std::pair<const char*, Pose*>{"base_pose.first", &base_first},
        {"base_pose.last", &base_last}}) {
    const auto& nt = find(name);
    Vec6 xi;
    for (int i = 0; i < 6; ++i) xi(i) = double(nt.values[std::size_t(i)]);
    *pose = se3_exp(xi);
  }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

template <typename S>
struct TrainResult {
  NetworkParams<S> params;
  Pose base_first, base_last;
  double final_loss = 0.0;
  double final_frame_psnr = 0.0;
};

template <typename S>
Pose effective_pose(const Pose& base, const Vec<S>& xi) {
  Vec6 x;
  for (int i = 0; i < 6; ++i) x(i) = double(xi(i));
  return base * se3_exp(x);
}

namespace detail {

template <typename S>
struct WindowBatch {
  std::vector<std::vector<PixelCoord>> pixels;  // per window
  bool tv_applies = true;
};

template <typename S>
WindowBatch<S> draw_batch(const TrainConfig& cfg, const CameraIntrinsics& intr,
                          int win_h, int win_w, std::uint64_t iter_seed) {
  WindowBatch<S> batch;
  const int P = win_h * win_w;
  if (cfg.no_patch) {
    // Random independent rays grouped into pseudo-windows; no spatial
    // adjacency, so the TV term does not apply.
    batch.tv_applies = false;
    Rng rng(iter_seed);
    for (int w = 0; w < cfg.batch_windows; ++w) {
      std::vector<PixelCoord> px(static_cast<std::size_t>(P));
      for (auto& p : px) {
        p.row = int(rng.uniform_int(std::uint64_t(intr.height)));
        p.col = int(rng.uniform_int(std::uint64_t(intr.width)));
      }
      batch.pixels.push_back(std::move(px));
    }
  } else {
    const WindowGrid grid = sample_patches_train(
        iter_seed, intr.height, intr.width, win_h, win_w, cfg.batch_windows);
    for (std::size_t w = 0; w < grid.corners.size(); ++w)
      batch.pixels.push_back(grid.window_pixels(w));
  }
  return batch;
}

}  // namespace detail

// Joint optimization of the radiance field and the two boundary poses from a
// single compressed measurement. Deterministic given the seed; the log gets
// one `iter loss mse tv psnr` line per iteration.
template <typename S>
TrainResult<S> train(const I2RConfig& net_cfg, const HashGridConfig& grid_cfg,
                     const SHConfig& sh_cfg, const SamplingConfig& sampling,
                     const TrainConfig& cfg, const SciDataset& dataset,
                     std::ostream* log,
                     const std::string& checkpoint_dir = "") {
  cfg.validate();
  net_cfg.validate();
  dataset.intr.validate();
  const int N = dataset.n_frames();
  const int P = net_cfg.pixels_per_window();
  const int B = cfg.batch_windows;
  require_config(net_cfg.l_samples == sampling.l_samples,
                 "train: sampling and network L must agree");

  TrainResult<S> result;
  result.params =
      NetworkParams<S>::init(net_cfg, grid_cfg, sh_cfg,
                             derive_seed(cfg.seed, 0x696e6974ull));  // "init"

  // Boundary poses: dataset trajectory perturbed by se(3) noise; the two
  // trainable 6-vectors correct the perturbation.
  {
    Rng rng(derive_seed(cfg.seed, 0x706f7365ull));  // "pose"
    Vec6 e1, e2;
    for (int i = 0; i < 6; ++i) e1(i) = cfg.pose_perturbation * rng.normal();
    for (int i = 0; i < 6; ++i) e2(i) = cfg.pose_perturbation * rng.normal();
    result.base_first = dataset.traj_first * se3_exp(e1);
    result.base_last = dataset.traj_last * se3_exp(e2);
  }

  AdamState<S> adam = AdamState<S>::like(result.params);
  NetworkParams<S> grads = NetworkParams<S>::shaped(net_cfg, grid_cfg, sh_cfg);
  std::vector<NetworkParams<S>> window_grads(
      std::size_t(B), NetworkParams<S>::shaped(net_cfg, grid_cfg, sh_cfg));

  // Renders the N frame patches of one window at the given poses. Seeds are
  // tied to (iteration, window slot, frame), so pose finite differences see
  // exactly the same stratified samples as the main pass.
  auto render_window = [&](const std::vector<Pose>& poses,
                           const std::vector<PixelCoord>& pixels, int iter,
                           int slot, bool with_cache,
                           std::vector<PatchRender<S>>& renders) {
    renders.resize(std::size_t(N));
    for (int i = 0; i < N; ++i) {
      const auto rays = generate_rays(poses[std::size_t(i)], dataset.intr,
                                      pixels, sampling.t_near, sampling.t_far);
      Rng rng(derive_seed(cfg.seed, 0x73747261ull,  // "stra"
                          std::uint64_t(iter),
                          std::uint64_t(slot) * std::uint64_t(N) +
                              std::uint64_t(i)));
      render_patch<S>(result.params, rays, sampling, /*stratified=*/true, rng,
                      renders[std::size_t(i)], with_cache);
    }
  };

  auto mask_patch_of = [&](const std::vector<PixelCoord>& pixels) {
    Mat<S> m(N, Eigen::Index(pixels.size()));
    for (int i = 0; i < N; ++i)
      for (std::size_t p = 0; p < pixels.size(); ++p)
        m(i, Eigen::Index(p)) =
            S(dataset.masks(std::size_t(i), std::size_t(pixels[p].row),
                            std::size_t(pixels[p].col)));
    return m;
  };

  auto measurement_patch_of = [&](const std::vector<PixelCoord>& pixels) {
    Mat<S> y(Eigen::Index(pixels.size()), 3);
    for (std::size_t p = 0; p < pixels.size(); ++p)
      for (int c = 0; c < 3; ++c)
        y(Eigen::Index(p), c) =
            S(dataset.measurement.values(std::size_t(pixels[p].row),
                                         std::size_t(pixels[p].col),
                                         std::size_t(c)));
    return y;
  };

  // Loss of a window given its rendered frame patches. Returns (mse, tv).
  auto window_loss = [&](const std::vector<PatchRender<S>>& renders,
                         const Mat<S>& mask_patch, const Mat<S>& y_patch,
                         bool tv_applies) {
    std::vector<Mat<S>> frame_patches(static_cast<std::size_t>(N));
    for (int i = 0; i < N; ++i)
      frame_patches[std::size_t(i)] = renders[std::size_t(i)].patch_rgb;
    const Mat<S> synth =
        synthesize_patch_measurement<S>(frame_patches, mask_patch);
    const S mse = (synth - y_patch).squaredNorm();
    S tv = S(0);
    if (tv_applies && cfg.lambda_tv > 0) {
      for (int i = 0; i < N; ++i)
        tv += tv_loss<S>(frame_patches[std::size_t(i)], net_cfg.win_h,
                         net_cfg.win_w);
      tv /= S(N);
    }
    return std::pair<S, S>(mse, tv);
  };

  auto frame_psnr_now = [&]() {
    const Pose ef = effective_pose(result.base_first, result.params.pose_first);
    const Pose el = effective_pose(result.base_last, result.params.pose_last);
    const WindowGrid tiling = tile_patches_inference(
        dataset.intr.height, dataset.intr.width, net_cfg.win_h, net_cfg.win_w);
    double total = 0.0;
    for (int i = 1; i <= N; ++i) {
      const Pose pose = N == 1 ? ef : interpolate_pose(ef, el, i, N);
      const Array frame =
          render_frame<S>(result.params, pose, dataset.intr, sampling, tiling);
      Array gt_frame({std::size_t(dataset.intr.height),
                      std::size_t(dataset.intr.width), 3});
      const std::size_t stride = gt_frame.numel();
      for (std::size_t k = 0; k < stride; ++k)
        gt_frame[k] = dataset.gt[std::size_t(i - 1) * stride + k];
      total += psnr(frame, gt_frame);
    }
    return total / double(N);
  };

  auto save_checkpoint = [&](const std::string& name) {
    if (checkpoint_dir.empty()) return;
    write_rayf_checkpoint(
        checkpoint_dir + "/" + name,
        params_to_checkpoint(result.params, result.base_first,
                             result.base_last));
  };

  double last_loss = 0.0;
  for (int iter = 0; iter < cfg.iterations; ++iter) {
    const auto batch = detail::draw_batch<S>(
        cfg, dataset.intr, net_cfg.win_h, net_cfg.win_w,
        derive_seed(cfg.seed, 0x77696e73ull, std::uint64_t(iter)));  // "wins"

    const Pose ef = effective_pose(result.base_first, result.params.pose_first);
    const Pose el = effective_pose(result.base_last, result.params.pose_last);
    std::vector<Pose> poses(static_cast<std::size_t>(N));
    for (int i = 1; i <= N; ++i)
      poses[std::size_t(i - 1)] = N == 1 ? ef : interpolate_pose(ef, el, i, N);

    double mse_total = 0.0, tv_total = 0.0;
    bool failed = false;
    std::string failure;

#pragma omp parallel for schedule(static) reduction(+ : mse_total, tv_total)
    for (int w = 0; w < B; ++w) {
      if (failed) continue;
      try {
        const auto& pixels = batch.pixels[std::size_t(w)];
        std::vector<PatchRender<S>> renders;
        render_window(poses, pixels, iter, w, /*with_cache=*/true, renders);
        const Mat<S> mask_patch = mask_patch_of(pixels);
        const Mat<S> y_patch = measurement_patch_of(pixels);

        std::vector<Mat<S>> frame_patches(static_cast<std::size_t>(N));
        for (int i = 0; i < N; ++i)
          frame_patches[std::size_t(i)] = renders[std::size_t(i)].patch_rgb;
        const Mat<S> synth =
            synthesize_patch_measurement<S>(frame_patches, mask_patch);
        const Mat<S> resid = synth - y_patch;
        const double mse_w = double(resid.squaredNorm());
        double tv_w = 0.0;

        NetworkParams<S>& wg = window_grads[std::size_t(w)];
        visit_params([](const std::string&, auto& t) { t.setZero(); }, wg);

        const S inv_b = S(1) / S(B);
        for (int i = 0; i < N; ++i) {
          PatchRender<S>& r = renders[std::size_t(i)];
          // d loss / d C_i = (2/B) resid * M_i + (lambda/(B N)) dTV
          Mat<S> d_patch =
              (resid.array() * S(2) * inv_b).colwise() *
              mask_patch.row(i).transpose().array();
          if (batch.tv_applies && cfg.lambda_tv > 0) {
            tv_w += double(tv_loss<S>(r.patch_rgb, net_cfg.win_h,
                                      net_cfg.win_w));
            tv_loss_backward<S>(r.patch_rgb, net_cfg.win_h, net_cfg.win_w,
                                S(cfg.lambda_tv) * inv_b / S(N), d_patch);
          }
          Vec<S> d_sigma;
          Mat<S> d_rgb;
          composite_patch_backward<S>(r.comp_cache, r.net_out.sigma,
                                      r.net_out.rgb, r.deltas, P,
                                      net_cfg.l_samples, d_patch, d_sigma,
                                      d_rgb);
          net_backward<S>(result.params, r.net_cache, d_sigma, d_rgb, wg);
        }
        mse_total += mse_w;
        tv_total += tv_w / double(N);
      } catch (const std::exception& e) {
#pragma omp critical
        {
          failed = true;
          failure = e.what();
        }
      }
    }
    if (failed) throw numeric_error("train: iteration " +
                                    std::to_string(iter) + ": " + failure);

    mse_total /= double(B);
    tv_total /= double(B);
    const double loss = mse_total + cfg.lambda_tv * tv_total;
    if (!std::isfinite(loss)) {
      std::ostringstream os;
      os << "train: non-finite loss at iteration " << iter
         << " (mse=" << mse_total << ", tv=" << tv_total << "); windows:";
      for (const auto& px : batch.pixels)
        os << " (" << px[0].row << "," << px[0].col << ")";
      throw numeric_error(os.str());
    }
    last_loss = loss;

    // merge window gradients in slot order
    visit_params([](const std::string&, auto& t) { t.setZero(); }, grads);
    for (int w = 0; w < B; ++w)
      visit_params([](const std::string&, auto& g, const auto& wg) { g += wg; },
                   grads, window_grads[std::size_t(w)]);

    // pose gradients by central finite differences on a batch prefix
    if (cfg.optimize_poses && iter % cfg.pose_fd_every == 0) {
      const int sub = std::min(cfg.pose_fd_windows, B);
      auto fd_loss = [&](const Vec6& xi_f, const Vec6& xi_l) {
        const Pose pf = result.base_first * se3_exp(xi_f);
        const Pose pl = result.base_last * se3_exp(xi_l);
        std::vector<Pose> fd_poses(static_cast<std::size_t>(N));
        for (int i = 1; i <= N; ++i)
          fd_poses[std::size_t(i - 1)] =
              N == 1 ? pf : interpolate_pose(pf, pl, i, N);
        double total = 0.0;
        for (int w = 0; w < sub; ++w) {
          std::vector<PatchRender<S>> renders;
          render_window(fd_poses, batch.pixels[std::size_t(w)], iter, w,
                        /*with_cache=*/false, renders);
          const auto [mse, tv] =
              window_loss(renders, mask_patch_of(batch.pixels[std::size_t(w)]),
                          measurement_patch_of(batch.pixels[std::size_t(w)]),
                          batch.tv_applies);
          total += double(mse) + cfg.lambda_tv * double(tv);
        }
        return total / double(sub);
      };
      Vec6 xi_f, xi_l;
      for (int i = 0; i < 6; ++i) {
        xi_f(i) = double(result.params.pose_first(i));
        xi_l(i) = double(result.params.pose_last(i));
      }
      const auto [gf, gl] = pose_gradients(fd_loss, xi_f, xi_l,
                                           cfg.pose_fd_step);
      for (int i = 0; i < 6; ++i) {
        grads.pose_first(i) = S(gf(i));
        grads.pose_last(i) = S(gl(i));
      }
    }

    adam_step(result.params, grads, adam, cfg);

    if (log) {
      std::ostringstream line;
      line << iter << ' ' << std::scientific << std::setprecision(9) << loss
           << ' ' << mse_total << ' ' << tv_total << ' ';
      if (cfg.eval_every > 0 && (iter + 1) % cfg.eval_every == 0) {
        line << std::fixed << std::setprecision(4) << frame_psnr_now();
      } else {
        line << '-';
      }
      (*log) << line.str() << '\n';
    }
    if (cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 &&
        (iter + 1) < cfg.iterations) {
      std::ostringstream name;
      name << "checkpoint_" << std::setw(5) << std::setfill('0') << (iter + 1)
           << ".rayf";
      save_checkpoint(name.str());
    }
  }

  result.final_loss = last_loss;
  result.final_frame_psnr = frame_psnr_now();
  save_checkpoint("checkpoint.rayf");
  return result;
}

}  // namespace rayf
