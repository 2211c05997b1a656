#pragma once

// Projection images and on-disk projection sets. A set on disk is a directory
// with one `angle_%03d.f32raw` per angle plus `manifest.json` (geometry +
// hash, dims, angle list in degrees, optional per-angle diffusion start data).

#include <filesystem>
#include <fstream>

#include "ctsr/geometry.hpp"
#include "ctsr/volume.hpp"

namespace ctsr {

struct Projection {
  std::array<int, 2> dims{0, 0};  // (u, v); data[u + dims[0]*v]
  int angle_index = 0;
  std::vector<real> data;

  size_t index(int u, int v) const { return size_t(u) + size_t(dims[0]) * size_t(v); }
  real& at(int u, int v) { return data[index(u, v)]; }
  real at(int u, int v) const { return data[index(u, v)]; }
  size_t size() const { return size_t(dims[0]) * size_t(dims[1]); }

  static Projection zeros(std::array<int, 2> dims, int angle_index = 0) {
    CTSR_CHECK(dims[0] > 0 && dims[1] > 0, "projection dims must be positive");
    Projection p;
    p.dims = dims;
    p.angle_index = angle_index;
    p.data.assign(size_t(dims[0]) * dims[1], 0);
    return p;
  }
};

struct ProjectionSet {
  ScannerGeometry geometry;
  std::vector<Projection> projections;
  // Per-angle diffusion metadata, populated by the 2D SR stage.
  std::vector<int> t_start;
  std::vector<real> pas_delta;
  std::vector<uint8_t> pas_fallback;
};

inline real psnr(const Projection& a, const Projection& b, real peak = 1, real cap_db = 100) {
  CTSR_CHECK(a.dims == b.dims, "psnr: projection dims mismatch");
  return psnr_grid(a.data.data(), b.data.data(), a.size(), peak, cap_db);
}

inline real ssim(const Projection& a, const Projection& b, int window = 11, real peak = 1) {
  CTSR_CHECK(a.dims == b.dims, "ssim: projection dims mismatch");
  return ssim_grid(a.data.data(), b.data.data(), {a.dims[0], a.dims[1], 1}, window, peak);
}

inline real max_abs_diff(const Projection& a, const Projection& b) {
  CTSR_CHECK(a.dims == b.dims, "max_abs_diff: dims mismatch");
  real m = 0;
  for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

// Additive Gaussian detector noise (used to exercise the noise-aware DDNM+ path).
inline Projection add_noise(const Projection& p, real sigma, uint64_t seed) {
  CTSR_CHECK(sigma >= 0, "noise sigma must be >= 0");
  Projection out = p;
  if (sigma == 0) return out;
  Rng rng(seed);
  for (real& v : out.data) v += sigma * rng.normal();
  return out;
}

// ---------------------------------------------------------------------------
// File I/O

inline void write_projection_payload(const Projection& p, const std::string& path) {
  std::vector<float> buf(p.data.size());
  for (size_t i = 0; i < buf.size(); ++i) buf[i] = float(p.data[i]);
  std::ofstream f(path, std::ios::binary);
  CTSR_RUNTIME_CHECK(f.good(), "cannot open for write: " + path);
  f.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size() * 4));
  CTSR_RUNTIME_CHECK(f.good(), "short write: " + path);
}

inline Projection read_projection_payload(const std::string& path, std::array<int, 2> dims,
                                          int angle_index) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  CTSR_CHECK(f.good(), "missing projection payload: " + path);
  auto bytes = size_t(f.tellg());
  Projection p = Projection::zeros(dims, angle_index);
  CTSR_CHECK(bytes == p.size() * 4, "payload length mismatch for " + path);
  f.seekg(0);
  std::vector<float> buf(p.size());
  f.read(reinterpret_cast<char*>(buf.data()), std::streamsize(bytes));
  CTSR_RUNTIME_CHECK(f.good(), "short read: " + path);
  for (size_t i = 0; i < buf.size(); ++i) p.data[i] = buf[i];
  return p;
}

inline std::string angle_file_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "angle_%03d.f32raw", i);
  return buf;
}

inline void write_projection_set(const ProjectionSet& set, const std::string& dir) {
  CTSR_CHECK(int(set.projections.size()) == set.geometry.cfg.n_angles,
             "projection set must hold one projection per angle");
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["geometry"] = set.geometry.cfg;
  manifest["geometry_hash"] = hash_hex(geometry_hash(set.geometry.cfg));
  manifest["dims"] = set.projections.empty() ? std::array<int, 2>{0, 0} : set.projections[0].dims;
  std::vector<real> deg;
  std::vector<std::string> files;
  for (int i = 0; i < set.geometry.cfg.n_angles; ++i) {
    deg.push_back(set.geometry.angles[i] * 180 / kPi);
    files.push_back(angle_file_name(i));
    CTSR_CHECK(set.projections[i].dims == set.projections[0].dims,
               "projection set dims must be uniform");
    write_projection_payload(set.projections[i], dir + "/" + files.back());
  }
  manifest["angles_deg"] = deg;
  manifest["files"] = files;
  if (!set.t_start.empty()) {
    manifest["t_start"] = set.t_start;
    manifest["pas_delta"] = set.pas_delta;
    manifest["pas_fallback"] = std::vector<int>(set.pas_fallback.begin(), set.pas_fallback.end());
  }
  std::ofstream mf(dir + "/manifest.json");
  CTSR_RUNTIME_CHECK(mf.good(), "cannot open for write: " + dir + "/manifest.json");
  mf << manifest.dump(2) << "\n";
}

inline ProjectionSet read_projection_set(const std::string& dir) {
  std::ifstream mf(dir + "/manifest.json");
  CTSR_CHECK(mf.good(), "missing projection manifest: " + dir + "/manifest.json");
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("malformed manifest in " + dir + ": " + e.what());
  }
  ProjectionSet set;
  try {
    GeometryConfig cfg = manifest.at("geometry").get<GeometryConfig>();
    set.geometry = make_geometry(cfg);
    CTSR_CHECK(manifest.at("geometry_hash").get<std::string>() ==
                   hash_hex(geometry_hash(cfg)),
               "geometry hash mismatch in " + dir);
    auto dims = manifest.at("dims").get<std::array<int, 2>>();
    auto files = manifest.at("files").get<std::vector<std::string>>();
    CTSR_CHECK(int(files.size()) == cfg.n_angles, "manifest file list length mismatch");
    set.projections.reserve(files.size());
    for (int i = 0; i < int(files.size()); ++i)
      set.projections.push_back(read_projection_payload(dir + "/" + files[i], dims, i));
    if (manifest.contains("t_start")) {
      manifest.at("t_start").get_to(set.t_start);
      manifest.at("pas_delta").get_to(set.pas_delta);
      auto fb = manifest.at("pas_fallback").get<std::vector<int>>();
      set.pas_fallback.assign(fb.begin(), fb.end());
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("bad manifest in " + dir + ": " + e.what());
  }
  return set;
}

}  // namespace ctsr
