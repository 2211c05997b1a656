#pragma once

// Circular cone-beam scanner geometry. Fixed convention: right-handed world
// frame, rotation about z, angle 0 puts the source at (-dso, 0, 0) with the
// detector u axis along +y and v along +z. Parallel-beam behaviour is the
// degenerate large-dso/dsd configuration.

#include <cstdio>

#include "ctsr/common.hpp"
#include "json.hpp"

namespace ctsr {

struct GeometryConfig {
  real dso = 4.0;  // source-to-origin distance
  real dsd = 6.0;  // source-to-detector distance
  std::array<int, 2> detector_dims{128, 128};
  std::array<real, 2> detector_spacing{0.05, 0.05};
  int n_angles = 100;
  real angle_start = 0;        // radians
  real angle_end = kPi;        // radians; angles live on [start, end)
  Vec3 volume_extent{1, 1, 1};  // half-extents of the reconstruction cube
};

inline void to_json(nlohmann::json& j, const GeometryConfig& g) {
  j = nlohmann::json{{"dso", g.dso},
                     {"dsd", g.dsd},
                     {"detector", g.detector_dims},
                     {"spacing", g.detector_spacing},
                     {"n_angles", g.n_angles},
                     {"angle_start_deg", g.angle_start * 180 / kPi},
                     {"angle_end_deg", g.angle_end * 180 / kPi},
                     {"extent", std::array<real, 3>{g.volume_extent.x, g.volume_extent.y,
                                                    g.volume_extent.z}}};
}

inline void from_json(const nlohmann::json& j, GeometryConfig& g) {
  j.at("dso").get_to(g.dso);
  j.at("dsd").get_to(g.dsd);
  j.at("detector").get_to(g.detector_dims);
  j.at("spacing").get_to(g.detector_spacing);
  j.at("n_angles").get_to(g.n_angles);
  g.angle_start = j.at("angle_start_deg").get<real>() * kPi / 180;
  g.angle_end = j.at("angle_end_deg").get<real>() * kPi / 180;
  auto e = j.at("extent").get<std::array<real, 3>>();
  g.volume_extent = {e[0], e[1], e[2]};
}

struct DetectorFrame {
  Vec3 source;
  Vec3 u_axis, v_axis, w_axis;  // w points from source toward the detector
  Vec3 detector_center;
};

struct Ray {
  Vec3 origin;
  Vec3 direction;  // unit
  real t_near = 1, t_far = 0;  // t_near > t_far when the volume is missed

  bool hits() const { return t_near <= t_far; }
};

struct ScannerGeometry {
  GeometryConfig cfg;
  std::vector<real> angles;
  std::vector<DetectorFrame> frames;
  real fx, fy;  // focal lengths in pixels (dsd / spacing)
  real cu, cv;  // principal point (pixel grid center)
};

inline uint64_t geometry_hash(const GeometryConfig& g) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%.17g|%.17g|%d|%d|%.17g|%.17g|%d|%.17g|%.17g|%.17g|%.17g|%.17g",
                g.dso, g.dsd, g.detector_dims[0], g.detector_dims[1], g.detector_spacing[0],
                g.detector_spacing[1], g.n_angles, g.angle_start, g.angle_end, g.volume_extent.x,
                g.volume_extent.y, g.volume_extent.z);
  return fnv1a64(buf, std::strlen(buf));
}

inline Vec3 pixel_world(const ScannerGeometry& geom, int angle_index, real u, real v) {
  const DetectorFrame& f = geom.frames[angle_index];
  real du = geom.cfg.detector_spacing[0], dv = geom.cfg.detector_spacing[1];
  return f.detector_center + ((u - geom.cu) * du) * f.u_axis + ((v - geom.cv) * dv) * f.v_axis;
}

// World point expressed in the per-angle camera frame (x along u, y along v,
// z along the source-to-detector axis).
inline Vec3 camera_coords(const ScannerGeometry& geom, int angle_index, Vec3 p) {
  const DetectorFrame& f = geom.frames[angle_index];
  Vec3 d = p - f.source;
  return {dot(d, f.u_axis), dot(d, f.v_axis), dot(d, f.w_axis)};
}

inline ScannerGeometry make_geometry(const GeometryConfig& cfg) {
  CTSR_CHECK(cfg.dso > 0, "dso must be positive");
  CTSR_CHECK(cfg.dso < cfg.dsd, "dso must be smaller than dsd");
  CTSR_CHECK(cfg.n_angles >= 1, "n_angles must be >= 1");
  CTSR_CHECK(cfg.detector_dims[0] > 0 && cfg.detector_dims[1] > 0, "detector dims must be positive");
  CTSR_CHECK(cfg.detector_spacing[0] > 0 && cfg.detector_spacing[1] > 0,
             "detector spacing must be positive");
  CTSR_CHECK(cfg.volume_extent.x > 0 && cfg.volume_extent.y > 0 && cfg.volume_extent.z > 0,
             "volume extent must be positive");
  CTSR_CHECK(cfg.dso > norm(cfg.volume_extent), "source must lie outside the reconstruction cube");

  ScannerGeometry g;
  g.cfg = cfg;
  g.fx = cfg.dsd / cfg.detector_spacing[0];
  g.fy = cfg.dsd / cfg.detector_spacing[1];
  g.cu = (cfg.detector_dims[0] - 1) / real(2);
  g.cv = (cfg.detector_dims[1] - 1) / real(2);
  g.angles.resize(cfg.n_angles);
  g.frames.resize(cfg.n_angles);
  real step = (cfg.angle_end - cfg.angle_start) / cfg.n_angles;
  for (int i = 0; i < cfg.n_angles; ++i) {
    real a = cfg.angle_start + i * step;
    g.angles[i] = a;
    real c = std::cos(a), s = std::sin(a);
    DetectorFrame f;
    f.source = {-cfg.dso * c, -cfg.dso * s, 0};
    f.w_axis = {c, s, 0};
    f.u_axis = {-s, c, 0};
    f.v_axis = {0, 0, 1};
    f.detector_center = f.source + cfg.dsd * f.w_axis;
    g.frames[i] = f;
  }

  // The detector must cover the projected footprint of the cube at every
  // angle: check all 8 corners.
  for (int i = 0; i < cfg.n_angles; ++i) {
    for (int corner = 0; corner < 8; ++corner) {
      Vec3 p = {(corner & 1 ? 1 : -1) * cfg.volume_extent.x,
                (corner & 2 ? 1 : -1) * cfg.volume_extent.y,
                (corner & 4 ? 1 : -1) * cfg.volume_extent.z};
      Vec3 t = camera_coords(g, i, p);
      CTSR_CHECK(t.z > 0, "volume corner behind the source");
      real u = g.fx * t.x / t.z + g.cu;
      real v = g.fy * t.y / t.z + g.cv;
      CTSR_CHECK(u >= -0.5 && u <= cfg.detector_dims[0] - 0.5 && v >= -0.5 &&
                     v <= cfg.detector_dims[1] - 0.5,
                 "detector too small for the volume footprint");
    }
  }
  return g;
}

// Degenerate near-parallel configuration: source pushed far away with
// magnification 2, so rays through the detector grid are parallel to within
// ~extent/dso and sample an isocenter grid with spacing iso_spacing.
inline GeometryConfig parallel_like_config(std::array<int, 2> detector_dims, real iso_spacing,
                                           int n_angles, real angle_start, real angle_end,
                                           Vec3 extent) {
  GeometryConfig cfg;
  cfg.dso = 1e6 * std::max({extent.x, extent.y, extent.z, real(1)});
  cfg.dsd = 2 * cfg.dso;
  cfg.detector_dims = detector_dims;
  cfg.detector_spacing = {2 * iso_spacing, 2 * iso_spacing};
  cfg.n_angles = n_angles;
  cfg.angle_start = angle_start;
  cfg.angle_end = angle_end;
  cfg.volume_extent = extent;
  return cfg;
}

inline Ray ray_for_pixel(const ScannerGeometry& geom, int angle_index, int u, int v) {
  CTSR_CHECK(angle_index >= 0 && angle_index < geom.cfg.n_angles, "angle index out of range");
  CTSR_CHECK(u >= 0 && u < geom.cfg.detector_dims[0] && v >= 0 && v < geom.cfg.detector_dims[1],
             "pixel index out of range");
  Ray r;
  r.origin = geom.frames[angle_index].source;
  r.direction = normalized(pixel_world(geom, angle_index, u, v) - r.origin);

  // slab intersection with the cube [-extent, extent]
  real tn = -1e300, tf = 1e300;
  const Vec3 ext = geom.cfg.volume_extent;
  for (int a = 0; a < 3; ++a) {
    real o = r.origin[a], d = r.direction[a], e = ext[a];
    if (std::abs(d) < 1e-15) {
      if (o < -e || o > e) {
        r.t_near = 1;
        r.t_far = 0;
        return r;
      }
      continue;
    }
    real t1 = (-e - o) / d, t2 = (e - o) / d;
    if (t1 > t2) std::swap(t1, t2);
    tn = std::max(tn, t1);
    tf = std::min(tf, t2);
  }
  r.t_near = std::max(tn, real(0));
  r.t_far = tf;
  return r;
}

}  // namespace ctsr
