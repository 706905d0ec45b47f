#pragma once

#include <array>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "rayf/common.hpp"
#include "rayf/geometry.hpp"
#include "rayf/network.hpp"
#include "rayf/renderer.hpp"
#include "rayf/sci.hpp"
#include "rayf/training.hpp"

namespace rayf {

using Json = nlohmann::json;

struct SciConfig {
  int n_frames = 4;
  double mask_density = 0.5;
  double noise_sigma = 0.0;
  int oversample = 1024;

  void validate(int l_samples) const {
    require_config(n_frames >= 1, "sci: n_frames must be positive");
    require_config(mask_density > 0.0 && mask_density < 1.0,
                   "sci: mask_density must be in (0, 1)");
    require_config(noise_sigma >= 0.0, "sci: noise_sigma must be >= 0");
    require_config(oversample >= 4 * l_samples,
                   "sci: oversample must be at least 4x the training "
                   "samples per ray");
  }
};

// The union of all module configs, parsed from one JSON file plus flag
// overrides. Unknown keys are rejected; the resolved config is echoed into
// the output directory.
struct RunConfig {
  std::uint64_t seed = 0;
  CameraIntrinsics camera;
  SciConfig sci;
  SceneSpec scene;
  SamplingConfig sampling;
  I2RConfig network;
  HashGridConfig hash;
  SHConfig sh;
  TrainConfig training;
  std::string precision = "f32";

  static RunConfig defaults() {
    RunConfig cfg;
    cfg.scene.blobs = {
        {Vec3(-0.35, 0.10, 0.10), 0.28, 6.0, {0.90, 0.25, 0.20}},
        {Vec3(0.30, -0.15, -0.20), 0.33, 5.0, {0.20, 0.80, 0.30}},
        {Vec3(0.05, 0.28, 0.35), 0.25, 7.0, {0.25, 0.35, 0.90}},
    };
    cfg.scene.background_rgb = {0.0, 0.0, 0.0};
    cfg.scene.pose_start = make_pose({0, 0, 0}, {0, 0, -2.2});
    cfg.scene.pose_end = make_pose({0, 0.04, 0}, {0.15, 0.05, -2.2});
    return cfg;
  }

  static Pose make_pose(const Vec3& rotvec, const Vec3& translation) {
    Pose p;
    p.rotation = so3_exp(rotvec);
    p.translation = translation;
    return p;
  }

  void resolve_and_validate() {
    network.l_samples = sampling.l_samples;
    camera.validate();
    network.validate();
    hash.validate();
    sh.validate();
    training.validate();
    scene.validate();
    sampling.aabb.validate();
    sci.validate(sampling.l_samples);
    require_config(sampling.t_near < sampling.t_far,
                   "sampling: t_near must precede t_far");
    require_config(sampling.l_samples >= 1, "sampling: need samples");
    require_config(network.win_h <= camera.height &&
                       network.win_w <= camera.width,
                   "network: window larger than image");
    require_config(precision == "f32" || precision == "f64",
                   "precision must be f32 or f64");
  }
};

namespace detail {

inline void check_keys(const Json& j, const std::string& path,
                       const std::set<std::string>& allowed) {
  if (!j.is_object())
    throw config_error("config: expected object at " + path);
  for (const auto& [key, _] : j.items())
    if (!allowed.count(key))
      throw config_error("config: unknown key '" + key + "' in " + path);
}

inline Vec3 vec3_of(const Json& j, const std::string& path) {
  if (!j.is_array() || j.size() != 3)
    throw config_error("config: " + path + " must be a 3-element array");
  return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

inline std::array<double, 3> arr3_of(const Json& j, const std::string& path) {
  const Vec3 v = vec3_of(j, path);
  return {v.x(), v.y(), v.z()};
}

inline Pose pose_of(const Json& j, const std::string& path) {
  check_keys(j, path, {"rotvec", "translation"});
  Vec3 rotvec = Vec3::Zero(), translation = Vec3::Zero();
  if (j.contains("rotvec")) rotvec = vec3_of(j["rotvec"], path + ".rotvec");
  if (j.contains("translation"))
    translation = vec3_of(j["translation"], path + ".translation");
  return RunConfig::make_pose(rotvec, translation);
}

template <typename T>
void get_to_if(const Json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

}  // namespace detail

inline RunConfig parse_config(const Json& j) {
  RunConfig cfg = RunConfig::defaults();
  detail::check_keys(j, "root",
                     {"seed", "camera", "sci", "scene", "sampling", "network",
                      "training", "ablation", "precision"});
  detail::get_to_if(j, "seed", cfg.seed);
  detail::get_to_if(j, "precision", cfg.precision);

  if (j.contains("camera")) {
    const Json& c = j["camera"];
    detail::check_keys(c, "camera", {"width", "height", "focal", "cx", "cy"});
    detail::get_to_if(c, "width", cfg.camera.width);
    detail::get_to_if(c, "height", cfg.camera.height);
    detail::get_to_if(c, "focal", cfg.camera.focal);
    if (c.contains("cx"))
      cfg.camera.cx = c["cx"].get<double>();
    else
      cfg.camera.cx = (cfg.camera.width - 1) / 2.0;
    if (c.contains("cy"))
      cfg.camera.cy = c["cy"].get<double>();
    else
      cfg.camera.cy = (cfg.camera.height - 1) / 2.0;
  }
  if (j.contains("sci")) {
    const Json& s = j["sci"];
    detail::check_keys(s, "sci",
                       {"n_frames", "mask_density", "noise_sigma",
                        "oversample"});
    detail::get_to_if(s, "n_frames", cfg.sci.n_frames);
    detail::get_to_if(s, "mask_density", cfg.sci.mask_density);
    detail::get_to_if(s, "noise_sigma", cfg.sci.noise_sigma);
    detail::get_to_if(s, "oversample", cfg.sci.oversample);
  }
  if (j.contains("scene")) {
    const Json& s = j["scene"];
    detail::check_keys(s, "scene",
                       {"background", "blobs", "pose_start", "pose_end"});
    if (s.contains("background"))
      cfg.scene.background_rgb =
          detail::arr3_of(s["background"], "scene.background");
    if (s.contains("blobs")) {
      cfg.scene.blobs.clear();
      int k = 0;
      for (const auto& bj : s["blobs"]) {
        const std::string path = "scene.blobs[" + std::to_string(k++) + "]";
        detail::check_keys(bj, path,
                           {"center", "radius", "peak_density", "rgb"});
        Blob b;
        if (bj.contains("center"))
          b.center = detail::vec3_of(bj["center"], path + ".center");
        detail::get_to_if(bj, "radius", b.radius);
        detail::get_to_if(bj, "peak_density", b.peak_density);
        if (bj.contains("rgb")) b.rgb = detail::arr3_of(bj["rgb"], path + ".rgb");
        cfg.scene.blobs.push_back(b);
      }
    }
    if (s.contains("pose_start"))
      cfg.scene.pose_start = detail::pose_of(s["pose_start"],
                                             "scene.pose_start");
    if (s.contains("pose_end"))
      cfg.scene.pose_end = detail::pose_of(s["pose_end"], "scene.pose_end");
  }
  if (j.contains("sampling")) {
    const Json& s = j["sampling"];
    detail::check_keys(s, "sampling",
                       {"t_near", "t_far", "l_samples", "aabb_min",
                        "aabb_max"});
    detail::get_to_if(s, "t_near", cfg.sampling.t_near);
    detail::get_to_if(s, "t_far", cfg.sampling.t_far);
    detail::get_to_if(s, "l_samples", cfg.sampling.l_samples);
    if (s.contains("aabb_min"))
      cfg.sampling.aabb.lo = detail::vec3_of(s["aabb_min"],
                                             "sampling.aabb_min");
    if (s.contains("aabb_max"))
      cfg.sampling.aabb.hi = detail::vec3_of(s["aabb_max"],
                                             "sampling.aabb_max");
  }
  if (j.contains("network")) {
    const Json& n = j["network"];
    detail::check_keys(n, "network",
                       {"channels", "heads_per_path", "n_blocks", "geo_dim",
                        "window", "sh_degree", "hash"});
    detail::get_to_if(n, "channels", cfg.network.channels);
    detail::get_to_if(n, "heads_per_path", cfg.network.heads_per_path);
    detail::get_to_if(n, "n_blocks", cfg.network.n_blocks);
    detail::get_to_if(n, "geo_dim", cfg.network.geo_dim);
    if (n.contains("window")) {
      const Json& w = n["window"];
      if (!w.is_array() || w.size() != 2)
        throw config_error("config: network.window must be [h, w]");
      cfg.network.win_h = w[0].get<int>();
      cfg.network.win_w = w[1].get<int>();
    }
    detail::get_to_if(n, "sh_degree", cfg.sh.max_degree);
    if (n.contains("hash")) {
      const Json& h = n["hash"];
      detail::check_keys(h, "network.hash",
                         {"n_levels", "base_resolution", "per_level_scale",
                          "features_per_level", "table_size_log2"});
      detail::get_to_if(h, "n_levels", cfg.hash.n_levels);
      detail::get_to_if(h, "base_resolution", cfg.hash.base_resolution);
      detail::get_to_if(h, "per_level_scale", cfg.hash.per_level_scale);
      detail::get_to_if(h, "features_per_level", cfg.hash.features_per_level);
      detail::get_to_if(h, "table_size_log2", cfg.hash.table_size_log2);
    }
  }
  if (j.contains("training")) {
    const Json& t = j["training"];
    detail::check_keys(
        t, "training",
        {"iterations", "batch_windows", "lr_hash", "lr_net", "lr_pose",
         "beta1", "beta2", "eps", "lambda_tv", "pose_perturbation",
         "pose_fd_step", "pose_fd_windows", "pose_fd_every", "optimize_poses",
         "eval_every", "checkpoint_every"});
    detail::get_to_if(t, "iterations", cfg.training.iterations);
    detail::get_to_if(t, "batch_windows", cfg.training.batch_windows);
    detail::get_to_if(t, "lr_hash", cfg.training.lr_hash);
    detail::get_to_if(t, "lr_net", cfg.training.lr_net);
    detail::get_to_if(t, "lr_pose", cfg.training.lr_pose);
    detail::get_to_if(t, "beta1", cfg.training.beta1);
    detail::get_to_if(t, "beta2", cfg.training.beta2);
    detail::get_to_if(t, "eps", cfg.training.eps);
    detail::get_to_if(t, "lambda_tv", cfg.training.lambda_tv);
    detail::get_to_if(t, "pose_perturbation", cfg.training.pose_perturbation);
    detail::get_to_if(t, "pose_fd_step", cfg.training.pose_fd_step);
    detail::get_to_if(t, "pose_fd_windows", cfg.training.pose_fd_windows);
    detail::get_to_if(t, "pose_fd_every", cfg.training.pose_fd_every);
    detail::get_to_if(t, "optimize_poses", cfg.training.optimize_poses);
    detail::get_to_if(t, "eval_every", cfg.training.eval_every);
    detail::get_to_if(t, "checkpoint_every", cfg.training.checkpoint_every);
  }
  if (j.contains("ablation")) {
    const Json& a = j["ablation"];
    detail::check_keys(a, "ablation", {"no_inter", "no_intra", "no_patch"});
    detail::get_to_if(a, "no_inter", cfg.network.no_inter);
    detail::get_to_if(a, "no_intra", cfg.network.no_intra);
    detail::get_to_if(a, "no_patch", cfg.training.no_patch);
  }
  cfg.training.seed = cfg.seed;
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw config_error("cannot open config file: " + path);
  Json j;
  try {
    is >> j;
  } catch (const Json::exception& e) {
    throw config_error("config parse error in " + path + ": " + e.what());
  }
  return parse_config(j);
}

inline Json config_to_json(const RunConfig& cfg) {
  auto vec3 = [](const Vec3& v) { return Json::array({v.x(), v.y(), v.z()}); };
  auto arr3 = [](const std::array<double, 3>& v) {
    return Json::array({v[0], v[1], v[2]});
  };
  auto pose = [&](const Pose& p) {
    Vec3 rotvec = Vec3::Zero();
    const double cos_theta =
        std::clamp((p.rotation.trace() - 1.0) * 0.5, -1.0, 1.0);
    const double theta = std::acos(cos_theta);
    if (theta > 1e-12) {
      const Mat3 a = (theta / (2.0 * std::sin(theta))) *
                     (p.rotation - p.rotation.transpose());
      rotvec = Vec3(a(2, 1), a(0, 2), a(1, 0));
    }
    return Json{{"rotvec", vec3(rotvec)}, {"translation", vec3(p.translation)}};
  };

  Json blobs = Json::array();
  for (const auto& b : cfg.scene.blobs)
    blobs.push_back({{"center", vec3(b.center)},
                     {"radius", b.radius},
                     {"peak_density", b.peak_density},
                     {"rgb", arr3(b.rgb)}});

  return Json{
      {"seed", cfg.seed},
      {"precision", cfg.precision},
      {"camera",
       {{"width", cfg.camera.width},
        {"height", cfg.camera.height},
        {"focal", cfg.camera.focal},
        {"cx", cfg.camera.cx},
        {"cy", cfg.camera.cy}}},
      {"sci",
       {{"n_frames", cfg.sci.n_frames},
        {"mask_density", cfg.sci.mask_density},
        {"noise_sigma", cfg.sci.noise_sigma},
        {"oversample", cfg.sci.oversample}}},
      {"scene",
       {{"background", arr3(cfg.scene.background_rgb)},
        {"blobs", blobs},
        {"pose_start", pose(cfg.scene.pose_start)},
        {"pose_end", pose(cfg.scene.pose_end)}}},
      {"sampling",
       {{"t_near", cfg.sampling.t_near},
        {"t_far", cfg.sampling.t_far},
        {"l_samples", cfg.sampling.l_samples},
        {"aabb_min", vec3(cfg.sampling.aabb.lo)},
        {"aabb_max", vec3(cfg.sampling.aabb.hi)}}},
      {"network",
       {{"channels", cfg.network.channels},
        {"heads_per_path", cfg.network.heads_per_path},
        {"n_blocks", cfg.network.n_blocks},
        {"geo_dim", cfg.network.geo_dim},
        {"window", Json::array({cfg.network.win_h, cfg.network.win_w})},
        {"sh_degree", cfg.sh.max_degree},
        {"hash",
         {{"n_levels", cfg.hash.n_levels},
          {"base_resolution", cfg.hash.base_resolution},
          {"per_level_scale", cfg.hash.per_level_scale},
          {"features_per_level", cfg.hash.features_per_level},
          {"table_size_log2", cfg.hash.table_size_log2}}}}},
      {"training",
       {{"iterations", cfg.training.iterations},
        {"batch_windows", cfg.training.batch_windows},
        {"lr_hash", cfg.training.lr_hash},
        {"lr_net", cfg.training.lr_net},
        {"lr_pose", cfg.training.lr_pose},
        {"beta1", cfg.training.beta1},
        {"beta2", cfg.training.beta2},
        {"eps", cfg.training.eps},
        {"lambda_tv", cfg.training.lambda_tv},
        {"pose_perturbation", cfg.training.pose_perturbation},
        {"pose_fd_step", cfg.training.pose_fd_step},
        {"pose_fd_windows", cfg.training.pose_fd_windows},
        {"pose_fd_every", cfg.training.pose_fd_every},
        {"optimize_poses", cfg.training.optimize_poses},
        {"eval_every", cfg.training.eval_every},
        {"checkpoint_every", cfg.training.checkpoint_every}}},
      {"ablation",
       {{"no_inter", cfg.network.no_inter},
        {"no_intra", cfg.network.no_intra},
        {"no_patch", cfg.training.no_patch}}}};
}

}  // namespace rayf
