#pragma once

// File-based pipeline stages behind the command-line driver. Stages talk to
// each other only through artifacts in the output directory; each stage
// stamps what it wrote and what it read (with content hashes) so a consumer
// can refuse inputs that changed since their producer ran.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "ctsr/common.hpp"
#include "ctsr/ddnm.hpp"
#include "ctsr/field.hpp"
#include "ctsr/projector.hpp"
#include "ctsr/trainer.hpp"
#include "ctsr/volume.hpp"

namespace ctsr {

// ---------------------------------------------------------------------------
// Run configuration

struct VolumeSection {
  std::array<int, 3> dims{64, 64, 64};
  std::array<real, 2> clip{0, 1};  // intensity window; volumes are clamped to it
  std::string path;                // optional existing volume; empty = synthesize
};

struct DegradationSection {
  int factor = 4;
  real sigma = 1.0;  // smoothing before downsampling
};

struct DdnmSection {
  std::string denoiser = "shrinkage";  // shrinkage | oracle | external
  std::string denoiser_path;           // binary for the external denoiser
  // where the LR observations come from: "gt" pools the ground-truth projections
  // (simulated low-res measurements of the object), "lr" projects the
  // cubic-upsampled LR volume instead (no measurement beyond the LR volume)
  std::string y_source = "gt";
  real tau_thr = 7;
  real sigma_y = 0;
  uint64_t seed = 0;
  std::vector<int> candidates{1000, 500, 300, 100};
  std::string pas_norm = "total";  // total | rms
  real signal_std = 0.5;
  real blur_px = 1.5;
  int ddim_steps = 50;
};

struct TrainerSection {
  TrainConfig cfg;
  int n_init = 10000;
  real init_density_thresh = 0.02;
  real init_scale = 0.15;
  std::string activation = "leaky_relu";  // leaky_relu | softplus
  int max_count = 500000;
  std::string source = "sr";  // projections to reconstruct from: sr | gt
};

struct RunConfig {
  VolumeSection volume;
  GeometryConfig geometry;
  DegradationSection degradation;
  DdnmSection ddnm;
  TrainerSection trainer;
  std::string out = "out";
};

namespace pipeline_detail {

inline void reject_unknown(const nlohmann::json& j, const std::string& section,
                           std::initializer_list<const char*> allowed) {
  CTSR_CHECK(j.is_object(), "config section \"" + section + "\" must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* a : allowed)
      if (it.key() == a) {
        known = true;
        break;
      }
    CTSR_CHECK(known, "unknown key \"" + it.key() + "\" in config section \"" + section + "\"");
  }
}

template <typename T>
void get_if(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) {
    try {
      j.at(key).get_to(out);
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument("bad value for config key \"" + std::string(key) +
                                  "\": " + e.what());
    }
  }
}

}  // namespace pipeline_detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  using pipeline_detail::get_if;
  using pipeline_detail::reject_unknown;
  reject_unknown(j, "(top level)", {"volume", "geometry", "degradation", "ddnm", "trainer", "out"});
  RunConfig rc;

  if (j.contains("volume")) {
    const auto& v = j.at("volume");
    reject_unknown(v, "volume", {"dims", "clip", "path"});
    get_if(v, "dims", rc.volume.dims);
    get_if(v, "clip", rc.volume.clip);
    get_if(v, "path", rc.volume.path);
  }
  if (j.contains("geometry")) {
    const auto& g = j.at("geometry");
    reject_unknown(g, "geometry",
                   {"dso", "dsd", "detector", "spacing", "n_angles", "angle_start_deg",
                    "angle_end_deg", "extent"});
    get_if(g, "dso", rc.geometry.dso);
    get_if(g, "dsd", rc.geometry.dsd);
    get_if(g, "detector", rc.geometry.detector_dims);
    get_if(g, "spacing", rc.geometry.detector_spacing);
    get_if(g, "n_angles", rc.geometry.n_angles);
    if (g.contains("angle_start_deg"))
      rc.geometry.angle_start = g.at("angle_start_deg").get<real>() * kPi / 180;
    if (g.contains("angle_end_deg"))
      rc.geometry.angle_end = g.at("angle_end_deg").get<real>() * kPi / 180;
    if (g.contains("extent")) {
      auto e = g.at("extent").get<std::array<real, 3>>();
      rc.geometry.volume_extent = {e[0], e[1], e[2]};
    }
  }
  if (j.contains("degradation")) {
    const auto& d = j.at("degradation");
    reject_unknown(d, "degradation", {"factor", "sigma"});
    get_if(d, "factor", rc.degradation.factor);
    get_if(d, "sigma", rc.degradation.sigma);
  }
  if (j.contains("ddnm")) {
    const auto& d = j.at("ddnm");
    reject_unknown(d, "ddnm",
                   {"denoiser", "denoiser_path", "y_source", "tau_thr", "sigma_y", "seed",
                    "candidates", "pas_norm", "signal_std", "blur_px", "ddim_steps"});
    get_if(d, "denoiser", rc.ddnm.denoiser);
    get_if(d, "denoiser_path", rc.ddnm.denoiser_path);
    get_if(d, "y_source", rc.ddnm.y_source);
    get_if(d, "tau_thr", rc.ddnm.tau_thr);
    get_if(d, "sigma_y", rc.ddnm.sigma_y);
    get_if(d, "seed", rc.ddnm.seed);
    get_if(d, "candidates", rc.ddnm.candidates);
    get_if(d, "pas_norm", rc.ddnm.pas_norm);
    get_if(d, "signal_std", rc.ddnm.signal_std);
    get_if(d, "blur_px", rc.ddnm.blur_px);
    get_if(d, "ddim_steps", rc.ddnm.ddim_steps);
  }
  if (j.contains("trainer")) {
    const auto& t = j.at("trainer");
    reject_unknown(t, "trainer",
                   {"iterations",      "lambda1",     "lambda2",
                    "lr_position",     "lr_density",  "lr_scale",
                    "lr_rotation",     "lr_final_factor", "densify_from",
                    "densify_until",   "densify_interval", "grad_threshold",
                    "prune_band",      "gamma",       "seed",
                    "tv_crop",         "log_interval", "checkpoint_interval",
                    "project_step",    "n_init",      "init_density_thresh",
                    "init_scale",      "activation",  "max_count",
                    "source"});
    TrainConfig& c = rc.trainer.cfg;
    get_if(t, "iterations", c.iterations);
    get_if(t, "lambda1", c.lambda1);
    get_if(t, "lambda2", c.lambda2);
    get_if(t, "lr_position", c.lr_position);
    get_if(t, "lr_density", c.lr_density);
    get_if(t, "lr_scale", c.lr_scale);
    get_if(t, "lr_rotation", c.lr_rotation);
    get_if(t, "lr_final_factor", c.lr_final_factor);
    get_if(t, "densify_from", c.densify_from);
    get_if(t, "densify_until", c.densify_until);
    get_if(t, "densify_interval", c.densify_interval);
    get_if(t, "grad_threshold", c.grad_threshold);
    get_if(t, "prune_band", c.prune_band);
    get_if(t, "gamma", c.gamma);
    get_if(t, "seed", c.seed);
    get_if(t, "tv_crop", c.tv_crop);
    get_if(t, "log_interval", c.log_interval);
    get_if(t, "checkpoint_interval", c.checkpoint_interval);
    get_if(t, "project_step", c.project_step);
    get_if(t, "n_init", rc.trainer.n_init);
    get_if(t, "init_density_thresh", rc.trainer.init_density_thresh);
    get_if(t, "init_scale", rc.trainer.init_scale);
    get_if(t, "activation", rc.trainer.activation);
    get_if(t, "max_count", rc.trainer.max_count);
    get_if(t, "source", rc.trainer.source);
  }
  get_if(j, "out", rc.out);
  return rc;
}

inline nlohmann::json run_config_json(const RunConfig& rc) {
  nlohmann::json j;
  j["volume"] = {{"dims", rc.volume.dims}, {"clip", rc.volume.clip}, {"path", rc.volume.path}};
  j["geometry"] = rc.geometry;
  j["degradation"] = {{"factor", rc.degradation.factor}, {"sigma", rc.degradation.sigma}};
  j["ddnm"] = {{"denoiser", rc.ddnm.denoiser},
               {"denoiser_path", rc.ddnm.denoiser_path},
               {"y_source", rc.ddnm.y_source},
               {"tau_thr", rc.ddnm.tau_thr},
               {"sigma_y", rc.ddnm.sigma_y},
               {"seed", rc.ddnm.seed},
               {"candidates", rc.ddnm.candidates},
               {"pas_norm", rc.ddnm.pas_norm},
               {"signal_std", rc.ddnm.signal_std},
               {"blur_px", rc.ddnm.blur_px},
               {"ddim_steps", rc.ddnm.ddim_steps}};
  const TrainConfig& c = rc.trainer.cfg;
  j["trainer"] = {{"iterations", c.iterations},
                  {"lambda1", c.lambda1},
                  {"lambda2", c.lambda2},
                  {"lr_position", c.lr_position},
                  {"lr_density", c.lr_density},
                  {"lr_scale", c.lr_scale},
                  {"lr_rotation", c.lr_rotation},
                  {"lr_final_factor", c.lr_final_factor},
                  {"densify_from", c.densify_from},
                  {"densify_until", c.densify_until},
                  {"densify_interval", c.densify_interval},
                  {"grad_threshold", c.grad_threshold},
                  {"prune_band", c.prune_band},
                  {"gamma", c.gamma},
                  {"seed", c.seed},
                  {"tv_crop", c.tv_crop},
                  {"log_interval", c.log_interval},
                  {"checkpoint_interval", c.checkpoint_interval},
                  {"project_step", c.project_step},
                  {"n_init", rc.trainer.n_init},
                  {"init_density_thresh", rc.trainer.init_density_thresh},
                  {"init_scale", rc.trainer.init_scale},
                  {"activation", rc.trainer.activation},
                  {"max_count", rc.trainer.max_count},
                  {"source", rc.trainer.source}};
  j["out"] = rc.out;
  return j;
}

inline void validate_run_config(const RunConfig& rc) {
  CTSR_CHECK(!rc.out.empty(), "output directory must be set");
  for (int d : rc.volume.dims) CTSR_CHECK(d > 0, "volume dims must be positive");
  CTSR_CHECK(rc.volume.clip[0] < rc.volume.clip[1], "clip window must be increasing");
  int f = rc.degradation.factor;
  CTSR_CHECK(f == 2 || f == 4 || f == 8, "degradation factor must be 2, 4 or 8");
  CTSR_CHECK(rc.degradation.sigma >= 0, "degradation sigma must be >= 0");
  for (int d : rc.volume.dims) CTSR_CHECK(d % f == 0, "volume dims must be divisible by the factor");
  for (int d : rc.geometry.detector_dims)
    CTSR_CHECK(d % f == 0, "detector dims must be divisible by the factor");
  make_geometry(rc.geometry);  // full geometry validation, including detector coverage

  const DdnmSection& dd = rc.ddnm;
  CTSR_CHECK(dd.denoiser == "shrinkage" || dd.denoiser == "oracle" || dd.denoiser == "external",
             "denoiser must be shrinkage, oracle or external");
  CTSR_CHECK(dd.denoiser != "external" || !dd.denoiser_path.empty(),
             "the external denoiser needs denoiser_path");
  CTSR_CHECK(dd.y_source == "gt" || dd.y_source == "lr", "y_source must be gt or lr");
  CTSR_CHECK(dd.denoiser != "oracle" || dd.y_source == "gt",
             "the oracle denoiser needs ground-truth observations (y_source gt)");
  CTSR_CHECK(dd.tau_thr > 0, "tau_thr must be positive");
  CTSR_CHECK(dd.sigma_y >= 0, "sigma_y must be >= 0");
  CTSR_CHECK(!dd.candidates.empty(), "candidates must not be empty");
  for (int t : dd.candidates) CTSR_CHECK(t >= 1 && t <= 1000, "candidates must lie in [1, 1000]");
  CTSR_CHECK(dd.pas_norm == "total" || dd.pas_norm == "rms", "pas_norm must be total or rms");
  CTSR_CHECK(dd.signal_std > 0 && dd.blur_px >= 0, "shrinkage parameters out of range");
  CTSR_CHECK(dd.ddim_steps >= 1 && dd.ddim_steps <= 1000, "ddim_steps must lie in [1, 1000]");

  const TrainerSection& tr = rc.trainer;
  validate(tr.cfg);
  CTSR_CHECK(tr.n_init >= 1, "n_init must be >= 1");
  CTSR_CHECK(tr.max_count >= tr.n_init, "max_count must admit the initial field");
  CTSR_CHECK(tr.init_density_thresh >= 0, "init_density_thresh must be >= 0");
  CTSR_CHECK(tr.init_scale > 0, "init_scale must be positive");
  CTSR_CHECK(tr.activation == "leaky_relu" || tr.activation == "softplus",
             "activation must be leaky_relu or softplus");
  CTSR_CHECK(tr.source == "sr" || tr.source == "gt", "trainer source must be sr or gt");
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  CTSR_CHECK(f.good(), "cannot open config: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("malformed config " + path + ": " + e.what());
  }
  RunConfig rc = parse_run_config(j);
  validate_run_config(rc);
  return rc;
}

// ---------------------------------------------------------------------------
// Artifact layout and freshness stamps

struct OutPaths {
  std::string root;
  std::string gt() const { return root + "/gt.f32raw"; }
  std::string lr() const { return root + "/lr.f32raw"; }
  std::string proj_gt() const { return root + "/proj_gt"; }
  std::string proj_lr() const { return root + "/proj_lr"; }
  std::string proj_sr() const { return root + "/proj_sr"; }
  std::string field() const { return root + "/field.gsf"; }
  std::string sr() const { return root + "/sr.f32raw"; }
  std::string metrics() const { return root + "/metrics.json"; }
  std::string resolved() const { return root + "/config.resolved.json"; }
  std::string train_log() const { return root + "/train.log"; }
  std::string stamp(const std::string& stage) const {
    return root + "/" + stage + ".stamp.json";
  }
};

namespace pipeline_detail {

inline std::string join_path(const std::string& root, const std::string& rel) {
  return rel.size() && rel[0] == '/' ? rel : root + "/" + rel;
}

inline uint64_t hash_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  CTSR_CHECK(f.good(), "missing artifact: " + path);
  auto n = size_t(f.tellg());
  f.seekg(0);
  std::string buf(n, '\0');
  f.read(buf.data(), std::streamsize(n));
  CTSR_RUNTIME_CHECK(f.good(), "short read hashing " + path);
  return fnv1a64(buf.data(), n);
}

inline void write_stamp(const OutPaths& p, const std::string& stage,
                        const std::vector<std::string>& inputs,
                        const std::vector<std::string>& outputs) {
  nlohmann::json j;
  j["stage"] = stage;
  nlohmann::json in = nlohmann::json::object(), out = nlohmann::json::object();
  for (const std::string& rel : inputs) in[rel] = hash_hex(hash_file(join_path(p.root, rel)));
  for (const std::string& rel : outputs) out[rel] = hash_hex(hash_file(join_path(p.root, rel)));
  j["inputs"] = in;
  j["outputs"] = out;
  std::ofstream f(p.stamp(stage));
  CTSR_RUNTIME_CHECK(f.good(), "cannot open for write: " + p.stamp(stage));
  f << j.dump(2) << "\n";
}

// every file the stage read or wrote must still hash to what the stamp says
inline void require_fresh(const OutPaths& p, const std::string& stage) {
  std::ifstream f(p.stamp(stage));
  CTSR_CHECK(f.good(), "missing output of stage \"" + stage + "\": run it first");
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("malformed stamp for stage \"" + stage + "\": " + e.what());
  }
  for (const char* part : {"inputs", "outputs"})
    for (auto it = j.at(part).begin(); it != j.at(part).end(); ++it) {
      std::string cur = hash_hex(hash_file(join_path(p.root, it.key())));
      CTSR_CHECK(cur == it.value().get<std::string>(),
                 "stale artifact " + it.key() + " (hash mismatch; re-run `" + stage + "`)");
    }
}

inline void require_chain(const OutPaths& p, const std::vector<std::string>& stages) {
  for (const std::string& s : stages) require_fresh(p, s);
}

inline std::vector<std::string> proj_file_list(const std::string& dir_rel, int n_angles) {
  std::vector<std::string> files{dir_rel + "/manifest.json"};
  for (int i = 0; i < n_angles; ++i) files.push_back(dir_rel + "/" + angle_file_name(i));
  return files;
}

inline void write_resolved(const RunConfig& rc, const OutPaths& p) {
  std::ofstream f(p.resolved());
  CTSR_RUNTIME_CHECK(f.good(), "cannot open for write: " + p.resolved());
  f << run_config_json(rc).dump(2) << "\n";
}

inline real projection_step(const RunConfig& rc) {
  if (rc.trainer.cfg.project_step > 0) return rc.trainer.cfg.project_step;
  return rc.geometry.volume_extent.x / rc.volume.dims[0];  // half an HR voxel
}

inline GeometryConfig lr_geometry_config(const RunConfig& rc) {
  GeometryConfig cfg = rc.geometry;
  int f = rc.degradation.factor;
  cfg.detector_dims = {cfg.detector_dims[0] / f, cfg.detector_dims[1] / f};
  cfg.detector_spacing = {cfg.detector_spacing[0] * f, cfg.detector_spacing[1] * f};
  return cfg;
}

}  // namespace pipeline_detail

// ---------------------------------------------------------------------------
// Stage commands

inline void cmd_phantom(const RunConfig& rc) {
  validate_run_config(rc);
  OutPaths p{rc.out};
  std::filesystem::create_directories(rc.out);
  pipeline_detail::write_resolved(rc, p);

  VoxelVolume gt;
  std::vector<std::string> inputs;
  if (!rc.volume.path.empty()) {
    gt = read_volume(rc.volume.path);
    CTSR_CHECK(gt.dims == rc.volume.dims, "input volume dims do not match the config");
    inputs = {rc.volume.path, sidecar_path(rc.volume.path)};
  } else {
    gt = make_phantom(shepp_logan_ellipsoids(), rc.volume.dims);
  }
  gt.intensity_range = rc.volume.clip;
  clamp_to_range(gt);
  write_volume(gt, p.gt());
  pipeline_detail::write_stamp(p, "phantom", inputs, {"gt.f32raw", "gt.json"});
}

inline void cmd_degrade(const RunConfig& rc) {
  validate_run_config(rc);
  OutPaths p{rc.out};
  std::filesystem::create_directories(rc.out);
  pipeline_detail::write_resolved(rc, p);
  pipeline_detail::require_chain(p, {"phantom"});

  VoxelVolume gt = read_volume(p.gt());
  VoxelVolume lr = degrade(gt, rc.degradation.factor, rc.degradation.sigma);
  write_volume(lr, p.lr());
  pipeline_detail::write_stamp(p, "degrade", {"gt.f32raw", "gt.json"},
                               {"lr.f32raw", "lr.json"});
}

inline void cmd_project(const RunConfig& rc) {
  validate_run_config(rc);
  OutPaths p{rc.out};
  std::filesystem::create_directories(rc.out);
  pipeline_detail::write_resolved(rc, p);
  pipeline_detail::require_chain(p, {"phantom", "degrade"});

  VoxelVolume gt = read_volume(p.gt());
  VoxelVolume lr = read_volume(p.lr());
  VoxelVolume lr_up = resample_cubic(lr, rc.degradation.factor);
  real step = pipeline_detail::projection_step(rc);

  ScannerGeometry hr_geom = make_geometry(rc.geometry);
  ScannerGeometry lr_geom = make_geometry(pipeline_detail::lr_geometry_config(rc));
  ProjectionSet set_gt = project_all(gt, hr_geom, step);
  ProjectionSet set_lr = project_all(lr_up, lr_geom, step);
  write_projection_set(set_gt, p.proj_gt());
  write_projection_set(set_lr, p.proj_lr());

  std::vector<std::string> outputs =
      pipeline_detail::proj_file_list("proj_gt", rc.geometry.n_angles);
  for (const std::string& s : pipeline_detail::proj_file_list("proj_lr", rc.geometry.n_angles))
    outputs.push_back(s);
  pipeline_detail::write_stamp(p, "project",
                               {"gt.f32raw", "gt.json", "lr.f32raw", "lr.json"}, outputs);
}

inline void cmd_sr2d(const RunConfig& rc) {
  validate_run_config(rc);
  OutPaths p{rc.out};
  std::filesystem::create_directories(rc.out);
  pipeline_detail::write_resolved(rc, p);
  pipeline_detail::require_chain(p, {"phantom", "degrade", "project"});

  int f = rc.degradation.factor;
  NoiseSchedule schedule = make_noise_schedule(1000, 1e-4, 0.02, rc.ddnm.ddim_steps);
  for (int t : rc.ddnm.candidates)
    CTSR_CHECK(t <= schedule.T, "PAS candidate exceeds the schedule");
  PasConfig pas;
  pas.tau_thr = rc.ddnm.tau_thr;
  pas.candidates = rc.ddnm.candidates;
  pas.seed = rc.ddnm.seed;
  pas.norm = rc.ddnm.pas_norm == "rms" ? PasConfig::Norm::Rms : PasConfig::Norm::Total;
  DegradationOp op =
      make_degradation(f, {rc.geometry.detector_dims[0], rc.geometry.detector_dims[1]});

  ProjectionSet hr;
  std::vector<std::string> inputs;
  if (rc.ddnm.denoiser == "oracle") {
    // observations are pooled clean projections; the sampler then returns
    // them exactly, so downstream consumes ground-truth-quality projections
    ProjectionSet gt_set = read_projection_set(p.proj_gt());
    hr.geometry = gt_set.geometry;
    int n = int(gt_set.projections.size());
    hr.projections.resize(size_t(n));
    hr.t_start.assign(size_t(n), 0);
    hr.pas_delta.assign(size_t(n), 0);
    hr.pas_fallback.assign(size_t(n), 0);
    for (int i = 0; i < n; ++i) {
      try {
        const Projection& clean = gt_set.projections[size_t(i)];
        CTSR_CHECK(clean.dims[0] == op.hr_dims[0] && clean.dims[1] == op.hr_dims[1],
                   "clean projection does not match the degradation operator");
        Projection y = apply_A(clean, op);
        OracleDenoiser den(clean);
        SrOutcome one =
            sr_one(y, op, den, pas, schedule, rc.ddnm.sigma_y, rc.ddnm.seed ^ uint64_t(i));
        one.image.angle_index = clean.angle_index;
        hr.projections[size_t(i)] = std::move(one.image);
        hr.t_start[size_t(i)] = one.choice.t_start;
        hr.pas_delta[size_t(i)] = one.choice.delta;
        hr.pas_fallback[size_t(i)] = one.choice.fallback ? 1 : 0;
      } catch (const std::exception& e) {
        std::ostringstream msg;
        msg << "projection SR failed at angle " << i << ": " << e.what();
        throw std::runtime_error(msg.str());
      }
    }
    inputs = pipeline_detail::proj_file_list("proj_gt", rc.geometry.n_angles);
  } else {
    ProjectionSet lr_set;
    if (rc.ddnm.y_source == "gt") {
      // simulated measurements: the ground-truth projections pooled down to
      // the low-res detector
      ProjectionSet gt_set = read_projection_set(p.proj_gt());
      lr_set.geometry = make_geometry(pipeline_detail::lr_geometry_config(rc));
      lr_set.projections.reserve(gt_set.projections.size());
      for (const Projection& clean : gt_set.projections) {
        CTSR_CHECK(clean.dims[0] == op.hr_dims[0] && clean.dims[1] == op.hr_dims[1],
                   "clean projection does not match the degradation operator");
        Projection y = apply_A(clean, op);
        y.angle_index = clean.angle_index;
        lr_set.projections.push_back(std::move(y));
      }
      inputs = pipeline_detail::proj_file_list("proj_gt", rc.geometry.n_angles);
    } else {
      lr_set = read_projection_set(p.proj_lr());
      inputs = pipeline_detail::proj_file_list("proj_lr", rc.geometry.n_angles);
    }
    std::unique_ptr<Denoiser> den;
    if (rc.ddnm.denoiser == "external")
      den = std::make_unique<ExternalDenoiser>(rc.ddnm.denoiser_path);
    else
      den = std::make_unique<ShrinkageDenoiser>(schedule, rc.ddnm.signal_std, rc.ddnm.blur_px);
    hr = sr_projection_set(lr_set, op, *den, pas, schedule, rc.ddnm.sigma_y);
  }
  write_projection_set(hr, p.proj_sr());
  pipeline_detail::write_stamp(p, "sr2d", inputs,
                               pipeline_detail::proj_file_list("proj_sr", rc.geometry.n_angles));
}

inline void cmd_reconstruct(const RunConfig& rc) {
  validate_run_config(rc);
  OutPaths p{rc.out};
  std::filesystem::create_directories(rc.out);
  pipeline_detail::write_resolved(rc, p);
  bool from_sr = rc.trainer.source == "sr";
  std::vector<std::string> chain = {"phantom", "degrade", "project"};
  if (from_sr) chain.push_back("sr2d");
  pipeline_detail::require_chain(p, chain);

  ProjectionSet targets = read_projection_set(from_sr ? p.proj_sr() : p.proj_gt());
  CTSR_CHECK(targets.geometry.cfg.detector_dims == rc.geometry.detector_dims,
             "projection geometry does not match the config");
  VoxelVolume lr = read_volume(p.lr());
  VoxelVolume lr_up = resample_cubic(lr, rc.degradation.factor);
  CTSR_CHECK(lr_up.dims == rc.volume.dims, "upsampled LR volume does not match the config dims");
  ResidualTargets rt = ResidualTargets::make(targets, std::move(lr_up),
                                             rc.trainer.cfg.project_step);

  Activation act = rc.trainer.activation == "softplus" ? Activation::Softplus
                                                       : Activation::LeakyRelu;
  GaussianField field = init_from_volume(rt.lr_volume_up, rc.trainer.n_init,
                                         rc.trainer.init_density_thresh, rc.trainer.init_scale,
                                         true, rc.trainer.cfg.seed, rc.trainer.cfg.gamma, act);
  field.max_count = rc.trainer.max_count;
  TrainResult result = train(field, rt, targets.geometry, rc.trainer.cfg);

  write_field(field, p.field());
  write_volume(result.volume, p.sr());
  std::ofstream log(p.train_log());
  CTSR_RUNTIME_CHECK(log.good(), "cannot open for write: " + p.train_log());
  for (const std::string& line : result.log) log << line << "\n";
  log << "final loss=" << result.final_loss << " count=" << result.final_count
      << " split=" << result.control_totals.split << " cloned=" << result.control_totals.cloned
      << " pruned=" << result.control_totals.pruned << "\n";
  log.close();

  std::vector<std::string> inputs = {"lr.f32raw", "lr.json"};
  for (const std::string& s : pipeline_detail::proj_file_list(from_sr ? "proj_sr" : "proj_gt",
                                                              rc.geometry.n_angles))
    inputs.push_back(s);
  pipeline_detail::write_stamp(p, "reconstruct", inputs,
                               {"field.gsf", "sr.f32raw", "sr.json", "train.log"});
}

struct EvalRow {
  std::string method;
  real psnr_db = 0;
  real ssim_val = 0;
};

inline std::vector<EvalRow> evaluate_volumes(const VoxelVolume& gt, const VoxelVolume& lr,
                                             const VoxelVolume& ours, int factor) {
  VoxelVolume tri = resample_trilinear(lr, factor);
  VoxelVolume cub = resample_cubic(lr, factor);
  CTSR_CHECK(tri.dims == gt.dims && ours.dims == gt.dims, "evaluation volumes must share dims");
  real peak = gt.intensity_range[1] - gt.intensity_range[0];
  auto row = [&](const char* name, const VoxelVolume& v) {
    return EvalRow{name, psnr_grid(gt.data.data(), v.data.data(), gt.size(), peak),
                   ssim_grid(gt.data.data(), v.data.data(), gt.dims, 11, peak)};
  };
  return {row("trilinear", tri), row("cubic", cub), row("ours", ours)};
}

inline void cmd_evaluate(const RunConfig& rc) {
  validate_run_config(rc);
  OutPaths p{rc.out};
  std::filesystem::create_directories(rc.out);
  pipeline_detail::write_resolved(rc, p);
  std::vector<std::string> chain = {"phantom", "degrade", "project"};
  if (rc.trainer.source == "sr") chain.push_back("sr2d");
  chain.push_back("reconstruct");
  pipeline_detail::require_chain(p, chain);

  VoxelVolume gt = read_volume(p.gt());
  VoxelVolume lr = read_volume(p.lr());
  VoxelVolume ours = read_volume(p.sr());
  std::vector<EvalRow> rows = evaluate_volumes(gt, lr, ours, rc.degradation.factor);

  nlohmann::json j;
  j["factor"] = rc.degradation.factor;
  j["rows"] = nlohmann::json::array();
  for (const EvalRow& r : rows)
    j["rows"].push_back({{"method", r.method}, {"psnr_db", r.psnr_db}, {"ssim", r.ssim_val}});
  std::ofstream mf(p.metrics());
  CTSR_RUNTIME_CHECK(mf.good(), "cannot open for write: " + p.metrics());
  mf << j.dump(2) << "\n";
  mf.close();

  std::ostringstream table;
  table << "method      psnr_db    ssim\n";
  for (const EvalRow& r : rows) {
    char line[80];
    std::snprintf(line, sizeof line, "%-10s %8.4f  %.6f\n", r.method.c_str(),
                  double(r.psnr_db), double(r.ssim_val));
    table << line;
  }
  std::cout << table.str();

  pipeline_detail::write_stamp(
      p, "evaluate", {"gt.f32raw", "gt.json", "lr.f32raw", "lr.json", "sr.f32raw", "sr.json"},
      {"metrics.json"});
}

}  // namespace ctsr
