#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>

#include "rayf/config.hpp"
#include "rayf/gradcheck.hpp"
#include "rayf/io.hpp"
#include "rayf/metrics.hpp"
#include "rayf/training.hpp"

namespace rayf {

namespace fs = std::filesystem;

inline std::string frame_name(int index, const char* ext) {
  std::ostringstream os;
  os << "frame_" << std::setw(3) << std::setfill('0') << index << "." << ext;
  return os.str();
}

// Build the acquisition triple (masks, ground-truth frames, measurement)
// from the configured scene.
inline SciDataset simulate_dataset(const RunConfig& cfg) {
  SciDataset ds;
  ds.intr = cfg.camera;
  ds.traj_first = cfg.scene.pose_start;
  ds.traj_last = cfg.scene.pose_end;
  ds.masks = generate_masks(cfg.seed, cfg.sci.n_frames, cfg.camera.height,
                            cfg.camera.width, cfg.sci.mask_density);
  ds.gt = render_ground_truth(cfg.scene, cfg.camera, cfg.sci.n_frames,
                              cfg.sci.oversample, cfg.sampling.t_near,
                              cfg.sampling.t_far);
  ds.measurement =
      compress(ds.gt, ds.masks, cfg.sci.noise_sigma, cfg.seed);
  return ds;
}

inline void save_dataset(const std::string& dir, const SciDataset& ds,
                         const RunConfig& cfg) {
  fs::create_directories(dir);
  fs::create_directories(dir + "/gt");
  write_rayf_tensor(dir + "/masks.rayf", ds.masks);
  write_rayf_tensor(dir + "/measurement.rayf", ds.measurement.values);
  write_rayf_tensor(dir + "/gt.rayf", ds.gt);
  std::vector<std::array<double, 12>> poses(2);
  auto pack = [](const Pose& p, std::array<double, 12>& out) {
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) out[std::size_t(r * 3 + c)] = p.rotation(r, c);
    for (int i = 0; i < 3; ++i) out[std::size_t(9 + i)] = p.translation(i);
  };
  pack(ds.traj_first, poses[0]);
  pack(ds.traj_last, poses[1]);
  write_rayf_poses(dir + "/poses.rayf", poses);

  const std::size_t n = ds.gt.dim(0), h = ds.gt.dim(1), w = ds.gt.dim(2);
  for (std::size_t i = 0; i < n; ++i) {
    Array frame({h, w, 3});
    for (std::size_t k = 0; k < frame.numel(); ++k)
      frame[k] = ds.gt[i * frame.numel() + k];
    write_ppm(dir + "/gt/" + frame_name(int(i), "ppm"), frame);
  }
  std::ofstream os(dir + "/config.json");
  os << config_to_json(cfg).dump(2) << "\n";
}

inline SciDataset load_dataset(const std::string& dir, const RunConfig& cfg) {
  SciDataset ds;
  ds.intr = cfg.camera;
  ds.masks = read_rayf_tensor(dir + "/masks.rayf");
  ds.measurement.values = read_rayf_tensor(dir + "/measurement.rayf");
  ds.measurement.noise_sigma = cfg.sci.noise_sigma;
  ds.gt = read_rayf_tensor(dir + "/gt.rayf");
  const auto poses = read_rayf_poses(dir + "/poses.rayf");
  require_shape(poses.size() == 2, "dataset: expected two boundary poses");
  auto unpack = [](const std::array<double, 12>& in) {
    Pose p;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) p.rotation(r, c) = in[std::size_t(r * 3 + c)];
    for (int i = 0; i < 3; ++i) p.translation(i) = in[std::size_t(9 + i)];
    require(p.orthonormality_defect() < 1e-9,
            "dataset: non-orthonormal pose rotation");
    return p;
  };
  ds.traj_first = unpack(poses[0]);
  ds.traj_last = unpack(poses[1]);
  require_shape(int(ds.masks.dim(1)) == cfg.camera.height &&
                    int(ds.masks.dim(2)) == cfg.camera.width,
                "dataset: mask shape does not match configured camera");
  return ds;
}

// Render all N frames from trained parameters via non-overlapping tiling.
template <typename S>
FrameStack render_all_frames(const NetworkParams<S>& params,
                             const Pose& base_first, const Pose& base_last,
                             const CameraIntrinsics& intr,
                             const SamplingConfig& sampling, int n_frames) {
  const Pose first = effective_pose(base_first, params.pose_first);
  const Pose last = effective_pose(base_last, params.pose_last);
  const WindowGrid tiling = tile_patches_inference(
      intr.height, intr.width, params.cfg.win_h, params.cfg.win_w);
  FrameStack frames({std::size_t(n_frames), std::size_t(intr.height),
                     std::size_t(intr.width), 3});
  for (int i = 1; i <= n_frames; ++i) {
    const Pose pose =
        n_frames == 1 ? first : interpolate_pose(first, last, i, n_frames);
    const Array frame = render_frame<S>(params, pose, intr, sampling, tiling);
    const std::size_t stride = frame.numel();
    for (std::size_t k = 0; k < stride; ++k)
      frames[std::size_t(i - 1) * stride + k] = frame[k];
  }
  return frames;
}

// Measurement-domain PSNR: frames are pushed through the noiseless forward
// model and compared to the captured measurement, both scaled by 1/N so the
// dynamic range is [0, 1].
inline double measurement_psnr(const FrameStack& frames,
                               const MaskStack& masks,
                               const Measurement& captured) {
  const Measurement synth = compress(frames, masks, 0.0, 0);
  const double n = double(masks.dim(0));
  Array a = synth.values, b = captured.values;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    a[i] /= n;
    b[i] /= n;
  }
  return psnr(a, b);
}

inline void save_frames(const std::string& dir, const FrameStack& frames) {
  fs::create_directories(dir);
  const std::size_t n = frames.dim(0), h = frames.dim(1), w = frames.dim(2);
  for (std::size_t i = 0; i < n; ++i) {
    Array frame({h, w, 3});
    for (std::size_t k = 0; k < frame.numel(); ++k)
      frame[k] = frames[i * frame.numel() + k];
    write_ppm(dir + "/" + frame_name(int(i), "ppm"), frame);
    write_rayf_tensor(dir + "/" + frame_name(int(i), "rayf"), frame);
  }
}

// End-to-end run (simulate if needed, train, render, evaluate), shared by the
// CLI and the acceptance suite. Returns the trained result plus metrics.
struct RunSummary {
  double final_loss = 0.0;
  double frame_psnr = 0.0;
  double frame_ssim = 0.0;
  double meas_psnr = 0.0;
};

template <typename S>
RunSummary run_training(const RunConfig& cfg, const SciDataset& ds,
                        const std::string& out_dir) {
  std::ofstream log;
  std::string checkpoint_dir;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    log.open(out_dir + "/train.log");
    checkpoint_dir = out_dir;
  }
  TrainResult<S> result =
      train<S>(cfg.network, cfg.hash, cfg.sh, cfg.sampling, cfg.training, ds,
               out_dir.empty() ? nullptr : &log, checkpoint_dir);

  const FrameStack recon =
      render_all_frames<S>(result.params, result.base_first, result.base_last,
                           ds.intr, cfg.sampling, ds.n_frames());
  RunSummary summary;
  summary.final_loss = result.final_loss;
  summary.meas_psnr = measurement_psnr(recon, ds.masks, ds.measurement);
  const MetricReport report = evaluate_frames(recon, ds.gt);
  summary.frame_psnr = report.mean_psnr();
  summary.frame_ssim = report.mean_ssim();
  if (!out_dir.empty()) {
    save_frames(out_dir + "/recon", recon);
    std::ofstream csv(out_dir + "/metrics.csv");
    csv << report.to_csv();
  }
  return summary;
}

inline RunSummary run_training_dispatch(const RunConfig& cfg,
                                        const SciDataset& ds,
                                        const std::string& out_dir) {
  if (cfg.precision == "f64") return run_training<double>(cfg, ds, out_dir);
  return run_training<float>(cfg, ds, out_dir);
}

}  // namespace rayf
