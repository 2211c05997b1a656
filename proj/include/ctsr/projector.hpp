#pragma once

// Voxel-grid forward projector: fixed-step trapezoidal ray marching with
// trilinear sampling. Outputs are raw line integrals; no Beer-Lambert
// exponentiation is applied anywhere in the pipeline.

#include "ctsr/projection.hpp"

namespace ctsr {

// Trilinear sample at a world-space point; the volume spans the cube
// [-extent, extent] with voxel centers at half-integer offsets. Coordinates
// are clamped, which replicates edge voxels.
inline real sample_trilinear(const VoxelVolume& vol, Vec3 extent, Vec3 p) {
  real cx = (p.x + extent.x) / (2 * extent.x) * vol.dims[0] - real(0.5);
  real cy = (p.y + extent.y) / (2 * extent.y) * vol.dims[1] - real(0.5);
  real cz = (p.z + extent.z) / (2 * extent.z) * vol.dims[2] - real(0.5);
  cx = std::clamp(cx, real(0), real(vol.dims[0] - 1));
  cy = std::clamp(cy, real(0), real(vol.dims[1] - 1));
  cz = std::clamp(cz, real(0), real(vol.dims[2] - 1));
  int x0 = std::min(int(cx), vol.dims[0] - 2 < 0 ? 0 : vol.dims[0] - 2);
  int y0 = std::min(int(cy), vol.dims[1] - 2 < 0 ? 0 : vol.dims[1] - 2);
  int z0 = std::min(int(cz), vol.dims[2] - 2 < 0 ? 0 : vol.dims[2] - 2);
  int x1 = std::min(x0 + 1, vol.dims[0] - 1);
  int y1 = std::min(y0 + 1, vol.dims[1] - 1);
  int z1 = std::min(z0 + 1, vol.dims[2] - 1);
  real tx = cx - x0, ty = cy - y0, tz = cz - z0;
  real c00 = vol.at(x0, y0, z0) * (1 - tx) + vol.at(x1, y0, z0) * tx;
  real c10 = vol.at(x0, y1, z0) * (1 - tx) + vol.at(x1, y1, z0) * tx;
  real c01 = vol.at(x0, y0, z1) * (1 - tx) + vol.at(x1, y0, z1) * tx;
  real c11 = vol.at(x0, y1, z1) * (1 - tx) + vol.at(x1, y1, z1) * tx;
  real c0 = c00 * (1 - ty) + c10 * ty;
  real c1 = c01 * (1 - ty) + c11 * ty;
  return c0 * (1 - tz) + c1 * tz;
}

inline Projection forward_project(const VoxelVolume& vol, const ScannerGeometry& geom,
                                  int angle_index, real step) {
  CTSR_CHECK(step > 0, "projector step must be positive");
  CTSR_CHECK(angle_index >= 0 && angle_index < geom.cfg.n_angles, "angle index out of range");
  Projection proj = Projection::zeros(geom.cfg.detector_dims, angle_index);
  const Vec3 ext = geom.cfg.volume_extent;
#pragma omp parallel for schedule(static)
  for (int v = 0; v < proj.dims[1]; ++v) {
    for (int u = 0; u < proj.dims[0]; ++u) {
      Ray ray = ray_for_pixel(geom, angle_index, u, v);
      if (!ray.hits()) continue;
      real span = ray.t_far - ray.t_near;
      int n = std::max(1, int(std::ceil(span / step)));
      real h = span / n;
      real acc = real(0.5) * (sample_trilinear(vol, ext, ray.origin + ray.t_near * ray.direction) +
                              sample_trilinear(vol, ext, ray.origin + ray.t_far * ray.direction));
      for (int k = 1; k < n; ++k)
        acc += sample_trilinear(vol, ext, ray.origin + (ray.t_near + k * h) * ray.direction);
      proj.at(u, v) = h * acc;
    }
  }
  return proj;
}

inline ProjectionSet project_all(const VoxelVolume& vol, const ScannerGeometry& geom, real step) {
  ProjectionSet set;
  set.geometry = geom;
  set.projections.resize(geom.cfg.n_angles);
  for (int i = 0; i < geom.cfg.n_angles; ++i) set.projections[i] = forward_project(vol, geom, i, step);
  return set;
}

}  // namespace ctsr
