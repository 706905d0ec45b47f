#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#ifdef _OPENMP
#include <omp.h>
#endif

#include "rayf/config.hpp"
#include "rayf/pipeline.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitVerification = 4;

void setup_threads() {
#ifdef _OPENMP
  if (const char* env = std::getenv("RAYF_THREADS")) {
    const int cap = std::atoi(env);
    if (cap >= 1) omp_set_num_threads(std::min(cap, omp_get_max_threads()));
  }
#endif
}

struct Overrides {
  std::string config_path;
  std::uint64_t seed = 0;
  int iters = 0;
  int patch = 0;
  double lambda_tv = 0.0;
  bool no_inter = false, no_intra = false, no_patch = false;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* iters_opt = nullptr;
  CLI::Option* patch_opt = nullptr;
  CLI::Option* lambda_tv_opt = nullptr;

  bool seed_set() const { return seed_opt && seed_opt->count() > 0; }
  bool iters_set() const { return iters_opt && iters_opt->count() > 0; }
  bool patch_set() const { return patch_opt && patch_opt->count() > 0; }
  bool lambda_tv_set() const {
    return lambda_tv_opt && lambda_tv_opt->count() > 0;
  }
};

void add_common_flags(CLI::App* cmd, Overrides& ov) {
  cmd->add_option("--config", ov.config_path, "JSON config file");
  ov.seed_opt = cmd->add_option("--seed", ov.seed, "base seed");
  ov.iters_opt = cmd->add_option("--iters", ov.iters, "training iterations");
  ov.patch_opt = cmd->add_option("--patch", ov.patch, "square window size");
  ov.lambda_tv_opt =
      cmd->add_option("--lambda-tv", ov.lambda_tv, "TV regularization weight");
  cmd->add_flag("--no-inter", ov.no_inter, "disable inter-ray attention");
  cmd->add_flag("--no-intra", ov.no_intra, "disable intra-ray attention");
  cmd->add_flag("--no-patch", ov.no_patch,
                "random ray sampling instead of windows (disables TV)");
}

rayf::RunConfig resolve_config(const Overrides& ov) {
  rayf::RunConfig cfg = ov.config_path.empty()
                            ? rayf::RunConfig::defaults()
                            : rayf::load_config(ov.config_path);
  if (ov.seed_set()) {
    cfg.seed = ov.seed;
    cfg.training.seed = ov.seed;
  }
  if (ov.iters_set()) cfg.training.iterations = ov.iters;
  if (ov.patch_set()) {
    cfg.network.win_h = ov.patch;
    cfg.network.win_w = ov.patch;
  }
  if (ov.lambda_tv_set()) cfg.training.lambda_tv = ov.lambda_tv;
  if (ov.no_inter) cfg.network.no_inter = true;
  if (ov.no_intra) cfg.network.no_intra = true;
  if (ov.no_patch) cfg.training.no_patch = true;
  cfg.resolve_and_validate();
  return cfg;
}

void echo_config(const rayf::RunConfig& cfg, const std::string& out_dir) {
  rayf::fs::create_directories(out_dir);
  std::ofstream os(out_dir + "/config.json");
  os << rayf::config_to_json(cfg).dump(2) << "\n";
}

int cmd_simulate(const Overrides& ov, const std::string& out_dir) {
  const rayf::RunConfig cfg = resolve_config(ov);
  const rayf::SciDataset ds = rayf::simulate_dataset(cfg);
  rayf::save_dataset(out_dir, ds, cfg);
  std::cout << "simulate: wrote " << cfg.sci.n_frames << " frames at "
            << cfg.camera.width << "x" << cfg.camera.height << " to "
            << out_dir << "\n";
  return 0;
}

int cmd_train(const Overrides& ov, const std::string& data_dir,
              const std::string& out_dir_flag) {
  const rayf::RunConfig cfg = resolve_config(ov);
  const std::string out_dir = out_dir_flag.empty() ? data_dir : out_dir_flag;
  const rayf::SciDataset ds = rayf::load_dataset(data_dir, cfg);
  echo_config(cfg, out_dir);
  const rayf::RunSummary summary = rayf::run_training_dispatch(cfg, ds, out_dir);
  std::cout << std::fixed << std::setprecision(4)
            << "train: final loss " << std::scientific << summary.final_loss
            << std::fixed << ", frame psnr " << summary.frame_psnr
            << " dB, frame ssim " << summary.frame_ssim
            << ", measurement psnr " << summary.meas_psnr << " dB\n";
  return 0;
}

template <typename S>
void render_from_checkpoint(const rayf::RunConfig& cfg,
                            const std::string& checkpoint,
                            const std::vector<int>& frames,
                            const std::string& out_dir) {
  rayf::NetworkParams<S> params =
      rayf::NetworkParams<S>::shaped(cfg.network, cfg.hash, cfg.sh);
  rayf::Pose base_first, base_last;
  rayf::params_from_checkpoint(rayf::read_rayf_checkpoint(checkpoint), params,
                               base_first, base_last);
  const rayf::Pose first =
      rayf::effective_pose(base_first, params.pose_first);
  const rayf::Pose last = rayf::effective_pose(base_last, params.pose_last);
  const rayf::WindowGrid tiling = rayf::tile_patches_inference(
      cfg.camera.height, cfg.camera.width, cfg.network.win_h,
      cfg.network.win_w);
  rayf::fs::create_directories(out_dir);
  const int n = cfg.sci.n_frames;
  for (int index : frames) {
    if (index < 1 || index > n)
      throw rayf::config_error("render: frame index out of range");
    const rayf::Pose pose =
        n == 1 ? first : rayf::interpolate_pose(first, last, index, n);
    const rayf::Array frame =
        rayf::render_frame<S>(params, pose, cfg.camera, cfg.sampling, tiling);
    rayf::write_ppm(out_dir + "/" + rayf::frame_name(index - 1, "ppm"), frame);
    rayf::write_rayf_tensor(
        out_dir + "/" + rayf::frame_name(index - 1, "rayf"), frame);
  }
}

int cmd_render(const Overrides& ov, const std::string& checkpoint,
               std::vector<int> frames, const std::string& out_dir) {
  const rayf::RunConfig cfg = resolve_config(ov);
  if (frames.empty())
    for (int i = 1; i <= cfg.sci.n_frames; ++i) frames.push_back(i);
  if (cfg.precision == "f64")
    render_from_checkpoint<double>(cfg, checkpoint, frames, out_dir);
  else
    render_from_checkpoint<float>(cfg, checkpoint, frames, out_dir);
  std::cout << "render: wrote " << frames.size() << " frames to " << out_dir
            << "\n";
  return 0;
}

rayf::Array load_frame_any(const std::string& dir, int index) {
  const std::string rayf_path =
      dir + "/" + rayf::frame_name(index, "rayf");
  if (rayf::fs::exists(rayf_path)) return rayf::read_rayf_tensor(rayf_path);
  const std::string ppm_path = dir + "/" + rayf::frame_name(index, "ppm");
  if (rayf::fs::exists(ppm_path)) return rayf::read_ppm(ppm_path);
  throw rayf::error("eval: no frame " + std::to_string(index) + " in " + dir);
}

int cmd_eval(const std::string& recon_dir, const std::string& gt_dir,
             const std::string& csv_out) {
  rayf::MetricReport report;
  for (int i = 0;; ++i) {
    const bool has =
        rayf::fs::exists(recon_dir + "/" + rayf::frame_name(i, "rayf")) ||
        rayf::fs::exists(recon_dir + "/" + rayf::frame_name(i, "ppm"));
    if (!has) break;
    const rayf::Array a = load_frame_any(recon_dir, i);
    const rayf::Array b = load_frame_any(gt_dir, i);
    report.frame_psnr.push_back(rayf::psnr(a, b));
    report.frame_ssim.push_back(rayf::ssim(a, b));
  }
  if (report.frame_psnr.empty())
    throw rayf::error("eval: no frames found in " + recon_dir);
  report.print_table(std::cout);
  if (!csv_out.empty()) {
    std::ofstream os(csv_out);
    os << report.to_csv();
  }
  return 0;
}

int cmd_gradcheck(const Overrides& ov) {
  const std::uint64_t seed = ov.seed_set() ? ov.seed : 0;
  const auto rows = rayf::gradcheck_all(seed);
  bool all_pass = true;
  std::cout << std::left << std::setw(28) << "tensor" << std::right
            << std::setw(10) << "checked" << std::setw(14) << "max_rel_err"
            << "  status\n";
  for (const auto& row : rows) {
    all_pass = all_pass && row.pass;
    std::cout << std::left << std::setw(28) << row.name << std::right
              << std::setw(10) << row.checked << std::setw(14)
              << std::scientific << std::setprecision(3) << row.max_rel_err
              << "  " << (row.pass ? "pass" : "FAIL") << "\n";
  }
  std::cout << (all_pass ? "gradcheck: all suites pass\n"
                         : "gradcheck: FAILURES\n");
  return all_pass ? 0 : kExitVerification;
}

}  // namespace

int main(int argc, char** argv) {
  setup_threads();
  CLI::App app{"RayFormer video snapshot compressive imaging toolkit"};
  app.require_subcommand(1);

  Overrides ov;
  std::string out_dir = "out", data_dir, checkpoint, recon_dir, gt_dir,
              csv_out;
  std::vector<int> frames;

  auto* simulate = app.add_subcommand(
      "simulate", "generate masks, ground truth and measurement");
  add_common_flags(simulate, ov);
  simulate->add_option("--out", out_dir, "output directory");

  auto* train =
      app.add_subcommand("train", "optimize scene and poses from a dataset");
  add_common_flags(train, ov);
  train->add_option("--data", data_dir, "dataset directory")->required();
  std::string train_out;
  train->add_option("--out", train_out,
                    "output directory (defaults to the dataset directory)");

  auto* render =
      app.add_subcommand("render", "render frames from a checkpoint");
  add_common_flags(render, ov);
  render->add_option("--checkpoint", checkpoint, "checkpoint file")
      ->required();
  render->add_option("--frames", frames, "1-based frame indices");
  render->add_option("--out", out_dir, "output directory");

  auto* eval = app.add_subcommand("eval", "PSNR/SSIM of frames vs ground truth");
  eval->add_option("--recon", recon_dir, "reconstructed frames directory")
      ->required();
  eval->add_option("--gt", gt_dir, "ground-truth frames directory")
      ->required();
  eval->add_option("--csv", csv_out, "also write CSV report here");

  auto* gradcheck = app.add_subcommand(
      "gradcheck", "run every finite-difference verification suite");
  add_common_flags(gradcheck, ov);

  CLI11_PARSE(app, argc, argv);

  try {
    if (simulate->parsed()) return cmd_simulate(ov, out_dir);
    if (train->parsed()) return cmd_train(ov, data_dir, train_out);
    if (render->parsed()) return cmd_render(ov, checkpoint, frames, out_dir);
    if (eval->parsed()) return cmd_eval(recon_dir, gt_dir, csv_out);
    if (gradcheck->parsed()) return cmd_gradcheck(ov);
  } catch (const rayf::config_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const rayf::error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
  return 0;
}
