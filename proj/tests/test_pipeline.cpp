#include "ctsr/pipeline.hpp"

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace fs = std::filesystem;

namespace ctsr {
namespace {

std::string temp_out(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("ctsr_pipe_" + name);
  fs::remove_all(p);
  return p.string();
}

RunConfig tiny_config(const std::string& out) {
  RunConfig rc;
  rc.volume.dims = {16, 16, 16};
  rc.geometry.detector_dims = {16, 16};
  rc.geometry.detector_spacing = {4.9 / 16, 4.9 / 16};
  rc.geometry.n_angles = 4;
  rc.degradation.factor = 2;
  rc.degradation.sigma = 0.8;
  rc.ddnm.candidates = {100, 50};
  rc.ddnm.ddim_steps = 10;
  rc.trainer.cfg.iterations = 20;
  rc.trainer.cfg.densify_from = 5;
  rc.trainer.cfg.densify_until = 20;
  rc.trainer.cfg.densify_interval = 5;
  rc.trainer.cfg.log_interval = 10;
  rc.trainer.cfg.tv_crop = 8;
  rc.trainer.n_init = 200;
  rc.out = out;
  return rc;
}

void run_through_project(const RunConfig& rc) {
  cmd_phantom(rc);
  cmd_degrade(rc);
  cmd_project(rc);
}

void run_all(const RunConfig& rc) {
  run_through_project(rc);
  cmd_sr2d(rc);
  cmd_reconstruct(rc);
  cmd_evaluate(rc);
}

std::map<std::string, std::string> snapshot(const std::string& root) {
  std::map<std::string, std::string> m;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) {
      std::ifstream f(e.path(), std::ios::binary);
      std::stringstream ss;
      ss << f.rdbuf();
      m[fs::relative(e.path(), root).string()] = ss.str();
    }
  return m;
}

std::string file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  EXPECT_TRUE(f.good()) << path;
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------

TEST(RunConfigJson, DefaultsRoundTripThroughJson) {
  RunConfig rc;
  nlohmann::json j = run_config_json(rc);
  RunConfig back = parse_run_config(j);
  EXPECT_EQ(run_config_json(back).dump(2), j.dump(2));
}

TEST(RunConfigJson, UnknownKeysAreRejectedEverywhere) {
  nlohmann::json base = run_config_json(RunConfig{});
  {
    nlohmann::json j = base;
    j["bogus"] = 1;
    EXPECT_THROW(parse_run_config(j), std::invalid_argument);
  }
  for (const char* section : {"volume", "geometry", "degradation", "ddnm", "trainer"}) {
    nlohmann::json j = base;
    j[section]["bogus"] = 1;
    try {
      parse_run_config(j);
      FAIL() << "unknown key accepted in section " << section;
    } catch (const std::invalid_argument& e) {
      EXPECT_NE(std::string(e.what()).find("unknown key"), std::string::npos);
    }
  }
}

TEST(RunConfigJson, PartialSectionsKeepDefaults) {
  nlohmann::json j = {{"trainer", {{"iterations", 7}, {"densify_from", 1},
                                   {"densify_until", 7}}},
                      {"out", "somewhere"}};
  RunConfig rc = parse_run_config(j);
  EXPECT_EQ(rc.trainer.cfg.iterations, 7);
  EXPECT_DOUBLE_EQ(rc.trainer.cfg.lambda1, 0.5);
  EXPECT_EQ(rc.degradation.factor, 4);
  EXPECT_EQ(rc.out, "somewhere");
}

TEST(RunConfigJson, ValidationCatchesBadValues) {
  auto broken = [](auto mutate) {
    RunConfig rc = tiny_config("unused");
    mutate(rc);
    EXPECT_THROW(validate_run_config(rc), std::invalid_argument);
  };
  broken([](RunConfig& rc) { rc.degradation.factor = 3; });
  broken([](RunConfig& rc) { rc.ddnm.denoiser = "bogus"; });
  broken([](RunConfig& rc) { rc.ddnm.denoiser = "external"; });  // no path
  broken([](RunConfig& rc) { rc.geometry.detector_dims = {15, 16}; });
  broken([](RunConfig& rc) { rc.trainer.n_init = 0; });
  broken([](RunConfig& rc) { rc.trainer.source = "both"; });
  broken([](RunConfig& rc) { rc.volume.clip = {1, 0}; });
  broken([](RunConfig& rc) { rc.ddnm.candidates = {2000}; });
  broken([](RunConfig& rc) { rc.out.clear(); });
}

// ---------------------------------------------------------------------------

TEST(PipelineStages, ArtifactsAndStampsAppear) {
  RunConfig rc = tiny_config(temp_out("stages"));
  run_through_project(rc);
  OutPaths p{rc.out};
  EXPECT_TRUE(fs::exists(p.gt()));
  EXPECT_TRUE(fs::exists(p.lr()));
  EXPECT_TRUE(fs::exists(p.resolved()));
  for (const char* s : {"phantom", "degrade", "project"}) EXPECT_TRUE(fs::exists(p.stamp(s)));

  VoxelVolume gt = read_volume(p.gt());
  EXPECT_EQ(gt.dims, rc.volume.dims);
  VoxelVolume lr = read_volume(p.lr());
  EXPECT_EQ(lr.dims[0], 8);
  ProjectionSet set_lr = read_projection_set(p.proj_lr());
  EXPECT_EQ(int(set_lr.projections.size()), 4);
  EXPECT_EQ(set_lr.projections[0].dims[0], 8);
  ProjectionSet set_gt = read_projection_set(p.proj_gt());
  EXPECT_EQ(set_gt.projections[0].dims[0], 16);
}

TEST(PipelineStages, MissingUpstreamIsRefused) {
  RunConfig rc = tiny_config(temp_out("missing"));
  try {
    cmd_degrade(rc);
    FAIL() << "expected a validation error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("run it first"), std::string::npos);
  }
}

TEST(PipelineStages, StaleInputsAreDetected) {
  RunConfig rc = tiny_config(temp_out("stale"));
  run_through_project(rc);
  OutPaths p{rc.out};
  // sneak a different LR volume in behind the stamps
  VoxelVolume lr = read_volume(p.lr());
  for (real& v : lr.data) v *= 1.1;
  write_volume(lr, p.lr());
  try {
    cmd_sr2d(rc);
    FAIL() << "expected a stale-input error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("stale"), std::string::npos);
  }
}

TEST(PipelineStages, EvaluateSaturatesOnIdenticalVolumes) {
  VoxelVolume gt = make_phantom(shepp_logan_ellipsoids(), {16, 16, 16});
  VoxelVolume lr = degrade(gt, 2, 0.8);
  std::vector<EvalRow> rows = evaluate_volumes(gt, lr, gt, 2);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[2].method, "ours");
  EXPECT_DOUBLE_EQ(rows[2].psnr_db, 100.0);
  EXPECT_DOUBLE_EQ(rows[2].ssim_val, 1.0);
  EXPECT_LT(rows[0].psnr_db, 100.0);
}

// ---------------------------------------------------------------------------

TEST(FullPipeline, TinyRunWritesAllArtifacts) {
  RunConfig rc = tiny_config(temp_out("full"));
  run_all(rc);
  OutPaths p{rc.out};

  std::ifstream mf(p.metrics());
  ASSERT_TRUE(mf.good());
  nlohmann::json metrics;
  mf >> metrics;
  ASSERT_EQ(metrics.at("rows").size(), 3u);
  for (const auto& row : metrics.at("rows")) {
    EXPECT_TRUE(std::isfinite(row.at("psnr_db").get<real>()));
    EXPECT_TRUE(std::isfinite(row.at("ssim").get<real>()));
  }

  GaussianField f = read_field(p.field());
  EXPECT_GT(f.count(), 0);
  VoxelVolume sr = read_volume(p.sr());
  EXPECT_EQ(sr.dims, rc.volume.dims);
  EXPECT_FALSE(file_bytes(p.train_log()).empty());

  ProjectionSet sr_set = read_projection_set(p.proj_sr());
  ASSERT_EQ(sr_set.t_start.size(), 4u);
  for (int t : sr_set.t_start) EXPECT_GE(t, 1);
}

TEST(FullPipeline, ReRunIsByteIdentical) {
  RunConfig rc = tiny_config(temp_out("rerun"));
  run_all(rc);
  std::map<std::string, std::string> first = snapshot(rc.out);
  run_all(rc);
  std::map<std::string, std::string> second = snapshot(rc.out);
  ASSERT_EQ(first.size(), second.size());
  for (const auto& [path, bytes] : first) {
    ASSERT_TRUE(second.count(path)) << path;
    EXPECT_EQ(bytes, second.at(path)) << "file changed across reruns: " << path;
  }
}

TEST(FullPipeline, OracleSr2dReproducesTheCleanProjectionsByteForByte) {
  RunConfig rc = tiny_config(temp_out("oracle"));
  rc.ddnm.denoiser = "oracle";
  run_through_project(rc);
  cmd_sr2d(rc);
  OutPaths p{rc.out};
  for (int i = 0; i < rc.geometry.n_angles; ++i) {
    std::string name = angle_file_name(i);
    EXPECT_EQ(file_bytes(p.proj_gt() + "/" + name), file_bytes(p.proj_sr() + "/" + name))
        << name;
  }
}

TEST(FullPipeline, ReconstructsFromGroundTruthProjectionsWithoutSr2d) {
  RunConfig rc = tiny_config(temp_out("gtsource"));
  rc.trainer.source = "gt";
  run_through_project(rc);
  cmd_reconstruct(rc);
  cmd_evaluate(rc);
  OutPaths p{rc.out};
  EXPECT_TRUE(fs::exists(p.metrics()));
  EXPECT_FALSE(fs::exists(p.stamp("sr2d")));
}

TEST(FullPipeline, ExternalDenoiserRunsThroughTheProcessBoundary) {
  RunConfig rc = tiny_config(temp_out("external"));
  rc.ddnm.denoiser = "external";
  rc.ddnm.denoiser_path = IDENTITY_DENOISER_PATH;
  run_through_project(rc);
  cmd_sr2d(rc);
  ProjectionSet sr_set = read_projection_set(OutPaths{rc.out}.proj_sr());
  ASSERT_EQ(sr_set.projections.size(), 4u);
  for (const Projection& pr : sr_set.projections)
    for (real v : pr.data) ASSERT_TRUE(std::isfinite(v));
}

// The sr2d stamp must name the projections the observations actually came
// from: the pooled ground-truth set by default, the LR reprojections when
// y_source is "lr".
TEST(FullPipeline, ObservationSourceIsRecordedInTheStamp) {
  auto stamp_inputs = [](const RunConfig& rc) {
    std::ifstream f(OutPaths{rc.out}.stamp("sr2d"));
    nlohmann::json j;
    f >> j;
    return j.at("inputs");
  };

  RunConfig gt_rc = tiny_config(temp_out("ysrc_gt"));
  ASSERT_EQ(gt_rc.ddnm.y_source, "gt");
  run_through_project(gt_rc);
  cmd_sr2d(gt_rc);
  nlohmann::json gt_in = stamp_inputs(gt_rc);
  EXPECT_TRUE(gt_in.contains("proj_gt/" + angle_file_name(0)));
  EXPECT_FALSE(gt_in.contains("proj_lr/" + angle_file_name(0)));

  RunConfig lr_rc = tiny_config(temp_out("ysrc_lr"));
  lr_rc.ddnm.y_source = "lr";
  run_through_project(lr_rc);
  cmd_sr2d(lr_rc);
  nlohmann::json lr_in = stamp_inputs(lr_rc);
  EXPECT_TRUE(lr_in.contains("proj_lr/" + angle_file_name(0)));
  EXPECT_FALSE(lr_in.contains("proj_gt/" + angle_file_name(0)));

  // the two observation sets genuinely differ, so the SR outputs must too
  std::string name = angle_file_name(0);
  EXPECT_NE(file_bytes(OutPaths{gt_rc.out}.proj_sr() + "/" + name),
            file_bytes(OutPaths{lr_rc.out}.proj_sr() + "/" + name));
}

TEST(FullPipeline, OracleDenoiserRequiresGroundTruthObservations) {
  RunConfig rc = tiny_config(temp_out("oraclelr"));
  rc.ddnm.denoiser = "oracle";
  rc.ddnm.y_source = "lr";
  EXPECT_THROW(validate_run_config(rc), std::invalid_argument);
}

// ---------------------------------------------------------------------------

int run_cli(const std::string& args) {
  std::string cmd = std::string("\"") + CTSR_CLI_PATH + "\" " + args + " > /dev/null 2>&1";
  int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(CliBinary, ExitCodesFollowTheContract) {
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli(""), 2);                                   // missing subcommand
  EXPECT_EQ(run_cli("phantom"), 2);                            // missing --config
  EXPECT_EQ(run_cli("phantom --config /nonexistent.json"), 2); // missing file

  std::string out = temp_out("cli");
  fs::create_directories(out);
  std::string cfg_path = out + "/run.json";
  RunConfig rc = tiny_config(out);
  {
    std::ofstream f(cfg_path);
    f << run_config_json(rc).dump(2) << "\n";
  }
  EXPECT_EQ(run_cli("phantom --config \"" + cfg_path + "\""), 0);
  EXPECT_TRUE(fs::exists(out + "/gt.f32raw"));
  // consuming a stage that never ran is a validation failure
  EXPECT_EQ(run_cli("sr2d --config \"" + cfg_path + "\""), 2);

  nlohmann::json bad = run_config_json(rc);
  bad["ddnm"]["mystery"] = true;
  std::string bad_path = out + "/bad.json";
  {
    std::ofstream f(bad_path);
    f << bad.dump(2) << "\n";
  }
  EXPECT_EQ(run_cli("degrade --config \"" + bad_path + "\""), 2);
}

TEST(CliBinary, SeedAndOutOverridesApply) {
  std::string out = temp_out("cliover");
  fs::create_directories(out);
  RunConfig rc = tiny_config(out + "/ignored");
  std::string cfg_path = out + "/run.json";
  {
    std::ofstream f(cfg_path);
    f << run_config_json(rc).dump(2) << "\n";
  }
  std::string redirected = out + "/real";
  EXPECT_EQ(run_cli("phantom --config \"" + cfg_path + "\" --out \"" + redirected +
                    "\" --seed 99"),
            0);
  EXPECT_TRUE(fs::exists(redirected + "/gt.f32raw"));
  EXPECT_FALSE(fs::exists(out + "/ignored"));
  std::ifstream res(redirected + "/config.resolved.json");
  nlohmann::json j;
  res >> j;
  EXPECT_EQ(j.at("trainer").at("seed").get<uint64_t>(), 99u);
  EXPECT_EQ(j.at("ddnm").at("seed").get<uint64_t>(), 99u);
}

}  // namespace
}  // namespace ctsr
