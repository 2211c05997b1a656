#pragma once

// Dense voxel volumes: Shepp-Logan style phantoms, blur+Lanczos degradation,
// tricubic/trilinear upsampling, PSNR/SSIM, window normalization and raw
// float32 file I/O with a JSON sidecar.

#include <algorithm>
#include <bit>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <utility>

#include "ctsr/common.hpp"
#include "json.hpp"

namespace ctsr {

static_assert(std::endian::native == std::endian::little,
              "volume files are little-endian; big-endian hosts unsupported");

struct VoxelVolume {
  std::array<int, 3> dims{0, 0, 0};
  std::array<real, 3> spacing{1, 1, 1};
  std::array<real, 2> intensity_range{0, 1};
  std::vector<real> data;  // x fastest: data[x + dims[0]*(y + dims[1]*z)]

  size_t index(int x, int y, int z) const {
    return size_t(x) + size_t(dims[0]) * (size_t(y) + size_t(dims[1]) * size_t(z));
  }
  real& at(int x, int y, int z) { return data[index(x, y, z)]; }
  real at(int x, int y, int z) const { return data[index(x, y, z)]; }
  size_t size() const { return size_t(dims[0]) * size_t(dims[1]) * size_t(dims[2]); }

  static VoxelVolume zeros(std::array<int, 3> dims, std::array<real, 3> spacing = {1, 1, 1}) {
    CTSR_CHECK(dims[0] > 0 && dims[1] > 0 && dims[2] > 0, "volume dims must be positive");
    VoxelVolume v;
    v.dims = dims;
    v.spacing = spacing;
    v.data.assign(size_t(dims[0]) * dims[1] * dims[2], 0);
    return v;
  }
};

// ---------------------------------------------------------------------------
// Phantom

struct EllipsoidSpec {
  Vec3 center;         // in [-1,1]^3 normalized volume coordinates
  Vec3 semi_axes;      // same units
  Vec3 euler;          // rotation R = Rz(e.z) * Ry(e.y) * Rx(e.x)
  real density_delta;  // additive contribution inside the ellipsoid
};

inline Mat3 euler_to_rot(Vec3 e) {
  real cx = std::cos(e.x), sx = std::sin(e.x);
  real cy = std::cos(e.y), sy = std::sin(e.y);
  real cz = std::cos(e.z), sz = std::sin(e.z);
  Mat3 rx, ry, rz;
  rx(1, 1) = cx; rx(1, 2) = -sx; rx(2, 1) = sx; rx(2, 2) = cx;
  ry(0, 0) = cy; ry(0, 2) = sy;  ry(2, 0) = -sy; ry(2, 2) = cy;
  rz(0, 0) = cz; rz(0, 1) = -sz; rz(1, 0) = sz;  rz(1, 1) = cz;
  return mul(rz, mul(ry, rx));
}

// Ten-ellipsoid head phantom (classic 3D Shepp-Logan geometry, densities
// rescaled so the summed volume stays inside [0,1]).
inline std::vector<EllipsoidSpec> shepp_logan_ellipsoids() {
  const real p2 = 2 * kPi / 5, p3 = 3 * kPi / 5, ph = kPi / 2;
  return {
      {{0, 0, 0}, {0.69, 0.92, 0.9}, {0, 0, 0}, 1.0},
      {{0, 0, 0}, {0.6624, 0.874, 0.88}, {0, 0, 0}, -0.8},
      {{-0.22, 0, -0.25}, {0.41, 0.16, 0.21}, {0, 0, p3}, -0.2},
      {{0.22, 0, -0.25}, {0.31, 0.11, 0.22}, {0, 0, p2}, -0.2},
      {{0, 0.35, -0.25}, {0.21, 0.25, 0.5}, {0, 0, 0}, 0.2},
      {{0, 0.1, -0.25}, {0.046, 0.046, 0.046}, {0, 0, 0}, 0.2},
      {{-0.08, -0.65, -0.25}, {0.046, 0.023, 0.02}, {0, 0, 0}, 0.1},
      {{0.06, -0.65, -0.25}, {0.046, 0.023, 0.02}, {0, 0, ph}, 0.1},
      {{0.06, -0.105, 0.625}, {0.056, 0.04, 0.1}, {0, 0, ph}, 0.2},
      {{0, 0.1, 0.625}, {0.056, 0.056, 0.1}, {0, 0, 0}, -0.2},
  };
}

// Evaluates ellipsoid deltas at voxel centers mapped to [-1,1]^3 and clips
// the sum to [0,1].
inline VoxelVolume make_phantom(const std::vector<EllipsoidSpec>& specs,
                                std::array<int, 3> dims) {
  VoxelVolume vol = VoxelVolume::zeros(dims, {real(2) / dims[0], real(2) / dims[1], real(2) / dims[2]});
  vol.intensity_range = {0, 1};
  struct Prepared {
    Mat3 rt;
    Vec3 center, inv_axes;
    real delta;
  };
  std::vector<Prepared> prep;
  prep.reserve(specs.size());
  for (const auto& s : specs) {
    CTSR_CHECK(s.semi_axes.x > 0 && s.semi_axes.y > 0 && s.semi_axes.z > 0,
               "ellipsoid semi-axes must be positive");
    prep.push_back({transposed(euler_to_rot(s.euler)), s.center,
                    {1 / s.semi_axes.x, 1 / s.semi_axes.y, 1 / s.semi_axes.z}, s.density_delta});
  }
#pragma omp parallel for schedule(static)
  for (int z = 0; z < dims[2]; ++z) {
    for (int y = 0; y < dims[1]; ++y)
      for (int x = 0; x < dims[0]; ++x) {
        Vec3 u = {(x + real(0.5)) / dims[0] * 2 - 1, (y + real(0.5)) / dims[1] * 2 - 1,
                  (z + real(0.5)) / dims[2] * 2 - 1};
        real v = 0;
        for (const auto& p : prep) {
          Vec3 q = mul(p.rt, u - p.center);
          real r2 = q.x * q.x * p.inv_axes.x * p.inv_axes.x +
                    q.y * q.y * p.inv_axes.y * p.inv_axes.y +
                    q.z * q.z * p.inv_axes.z * p.inv_axes.z;
          if (r2 <= 1) v += p.delta;
        }
        vol.at(x, y, z) = std::clamp(v, real(0), real(1));
      }
  }
  return vol;
}

// ---------------------------------------------------------------------------
// Separable axis operators
//
// Each resampling/filtering op is expressed as a sparse row operator applied
// along one axis at a time: out[k] = sum_j w_{kj} * in[idx_{kj}].

using AxisRows = std::vector<std::vector<std::pair<int, real>>>;

inline std::vector<real> apply_axis_rows(const std::vector<real>& src, std::array<int, 3> dims,
                                         int axis, const AxisRows& rows,
                                         std::array<int, 3>& out_dims) {
  int n_out = int(rows.size());
  out_dims = dims;
  out_dims[axis] = n_out;
  std::vector<real> dst(size_t(out_dims[0]) * out_dims[1] * out_dims[2]);
  size_t stride[3] = {1, size_t(dims[0]), size_t(dims[0]) * size_t(dims[1])};
  size_t ostride[3] = {1, size_t(out_dims[0]), size_t(out_dims[0]) * size_t(out_dims[1])};
  int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
#pragma omp parallel for schedule(static) collapse(2)
  for (int i2 = 0; i2 < dims[a2]; ++i2)
    for (int i1 = 0; i1 < dims[a1]; ++i1) {
      size_t base = i1 * stride[a1] + i2 * stride[a2];
      size_t obase = i1 * ostride[a1] + i2 * ostride[a2];
      for (int k = 0; k < n_out; ++k) {
        real acc = 0;
        for (auto [idx, w] : rows[k]) acc += w * src[base + size_t(idx) * stride[axis]];
        dst[obase + size_t(k) * ostride[axis]] = acc;
      }
    }
  return dst;
}

// Normalized Gaussian taps, edge samples replicated via index clamping.
inline AxisRows gaussian_blur_rows(int n, real sigma) {
  int r = std::max(1, int(std::ceil(3 * sigma)));
  std::vector<real> g(2 * r + 1);
  real sum = 0;
  for (int j = -r; j <= r; ++j) sum += g[j + r] = std::exp(-real(j * j) / (2 * sigma * sigma));
  for (real& w : g) w /= sum;
  AxisRows rows(n);
  for (int k = 0; k < n; ++k) {
    rows[k].reserve(g.size());
    for (int j = -r; j <= r; ++j) rows[k].push_back({std::clamp(k + j, 0, n - 1), g[j + r]});
  }
  return rows;
}

inline real lanczos3(real t) {
  t = std::abs(t);
  if (t < 1e-12) return 1;
  if (t >= 3) return 0;
  real pt = kPi * t;
  return 3 * std::sin(pt) * std::sin(pt / 3) / (pt * pt);
}

// Decimation by an integer factor; output sample k sits at input coordinate
// (k+0.5)*factor - 0.5. Anti-aliasing comes from the Gaussian pre-smooth, so
// the Lanczos kernel is applied unscaled as a pure interpolator. Weights are
// renormalized so constants are preserved.
inline AxisRows lanczos_decimate_rows(int n_in, int factor) {
  int n_out = n_in / factor;
  AxisRows rows(n_out);
  for (int k = 0; k < n_out; ++k) {
    real xc = (k + real(0.5)) * factor - real(0.5);
    int lo = int(std::ceil(xc - 3));
    int hi = int(std::floor(xc + 3));
    real sum = 0;
    for (int i = lo; i <= hi; ++i) {
      real w = lanczos3(xc - i);
      if (w == 0) continue;
      sum += w;
      rows[k].push_back({std::clamp(i, 0, n_in - 1), w});
    }
    for (auto& [idx, w] : rows[k]) w /= sum;
  }
  return rows;
}

inline std::array<real, 4> catmull_rom_weights(real t) {
  real t2 = t * t, t3 = t2 * t;
  return {-real(0.5) * t3 + t2 - real(0.5) * t, real(1.5) * t3 - real(2.5) * t2 + 1,
          -real(1.5) * t3 + 2 * t2 + real(0.5) * t, real(0.5) * t3 - real(0.5) * t2};
}

// Upsampling rows at half-pixel-aligned centers: output j maps to input
// coordinate (j+0.5)/factor - 0.5, taps clamped at the borders.
inline AxisRows cubic_upsample_rows(int n_in, int factor) {
  AxisRows rows(size_t(n_in) * factor);
  for (int j = 0; j < n_in * factor; ++j) {
    real src = (j + real(0.5)) / factor - real(0.5);
    int i0 = int(std::floor(src));
    real t = src - i0;
    auto w = catmull_rom_weights(t);
    for (int m = 0; m < 4; ++m) rows[j].push_back({std::clamp(i0 - 1 + m, 0, n_in - 1), w[m]});
  }
  return rows;
}

inline AxisRows linear_upsample_rows(int n_in, int factor) {
  AxisRows rows(size_t(n_in) * factor);
  for (int j = 0; j < n_in * factor; ++j) {
    real src = (j + real(0.5)) / factor - real(0.5);
    int i0 = int(std::floor(src));
    real t = src - i0;
    rows[j].push_back({std::clamp(i0, 0, n_in - 1), 1 - t});
    rows[j].push_back({std::clamp(i0 + 1, 0, n_in - 1), t});
  }
  return rows;
}

inline void clamp_to_range(VoxelVolume& v) {
  for (real& x : v.data) x = std::clamp(x, v.intensity_range[0], v.intensity_range[1]);
}

// Gaussian pre-smoothing followed by Lanczos-3 decimation along each axis.
// smooth_sigma <= 0 skips the blur; sigma is in input-voxel units.
inline VoxelVolume degrade(const VoxelVolume& vol, int factor, real smooth_sigma) {
  CTSR_CHECK(factor == 2 || factor == 4 || factor == 8, "degrade factor must be 2, 4 or 8");
  for (int a = 0; a < 3; ++a)
    CTSR_CHECK(vol.dims[a] % factor == 0, "degrade needs dims divisible by factor");
  std::array<int, 3> dims = vol.dims;
  std::vector<real> cur = vol.data;
  if (smooth_sigma > 0) {
    for (int a = 0; a < 3; ++a) {
      std::array<int, 3> nd;
      cur = apply_axis_rows(cur, dims, a, gaussian_blur_rows(dims[a], smooth_sigma), nd);
      dims = nd;
    }
  }
  for (int a = 0; a < 3; ++a) {
    std::array<int, 3> nd;
    cur = apply_axis_rows(cur, dims, a, lanczos_decimate_rows(dims[a], factor), nd);
    dims = nd;
  }
  VoxelVolume out;
  out.dims = dims;
  out.spacing = {vol.spacing[0] * factor, vol.spacing[1] * factor, vol.spacing[2] * factor};
  out.intensity_range = vol.intensity_range;
  out.data = std::move(cur);
  clamp_to_range(out);
  return out;
}

inline VoxelVolume upsample_with(const VoxelVolume& vol, int factor,
                                 AxisRows (*rows_fn)(int, int)) {
  CTSR_CHECK(factor >= 1, "upsample factor must be >= 1");
  std::array<int, 3> dims = vol.dims;
  std::vector<real> cur = vol.data;
  for (int a = 0; a < 3; ++a) {
    std::array<int, 3> nd;
    cur = apply_axis_rows(cur, dims, a, rows_fn(dims[a], factor), nd);
    dims = nd;
  }
  VoxelVolume out;
  out.dims = dims;
  out.spacing = {vol.spacing[0] / factor, vol.spacing[1] / factor, vol.spacing[2] / factor};
  out.intensity_range = vol.intensity_range;
  out.data = std::move(cur);
  return out;
}

// Tricubic Catmull-Rom upsampling; overshoot is clipped back to the declared
// intensity range.
inline VoxelVolume resample_cubic(const VoxelVolume& vol, int factor) {
  VoxelVolume out = upsample_with(vol, factor, cubic_upsample_rows);
  clamp_to_range(out);
  return out;
}

inline VoxelVolume resample_trilinear(const VoxelVolume& vol, int factor) {
  return upsample_with(vol, factor, linear_upsample_rows);
}

// ---------------------------------------------------------------------------
// Metrics

inline real psnr_grid(const real* a, const real* b, size_t n, real peak = 1, real cap_db = 100) {
  CTSR_CHECK(n > 0, "psnr needs non-empty inputs");
  real mse = 0;
  for (size_t i = 0; i < n; ++i) {
    real d = a[i] - b[i];
    mse += d * d;
  }
  mse /= real(n);
  if (mse <= 0) return cap_db;
  return std::min(cap_db, 10 * std::log10(peak * peak / mse));
}

// Gaussian-window taps for local SSIM statistics; windows are truncated at
// the borders and renormalized over the valid taps (factorizes per axis).
inline AxisRows ssim_window_rows(int n, int window, real sigma) {
  int r = window / 2;
  std::vector<real> g(2 * r + 1);
  for (int j = -r; j <= r; ++j) g[j + r] = std::exp(-real(j * j) / (2 * sigma * sigma));
  AxisRows rows(n);
  for (int k = 0; k < n; ++k) {
    real sum = 0;
    for (int j = -r; j <= r; ++j) {
      int i = k + j;
      if (i < 0 || i >= n) continue;
      sum += g[j + r];
      rows[k].push_back({i, g[j + r]});
    }
    for (auto& [idx, w] : rows[k]) w /= sum;
  }
  return rows;
}

inline real ssim_grid(const real* a, const real* b, std::array<int, 3> dims, int window = 11,
                      real peak = 1, real window_sigma = 1.5) {
  size_t n = size_t(dims[0]) * dims[1] * dims[2];
  CTSR_CHECK(n > 0, "ssim needs non-empty inputs");
  std::vector<real> fa(a, a + n), fb(b, b + n), faa(n), fbb(n), fab(n);
  for (size_t i = 0; i < n; ++i) {
    faa[i] = a[i] * a[i];
    fbb[i] = b[i] * b[i];
    fab[i] = a[i] * b[i];
  }
  std::array<int, 3> d = dims;
  for (int axis = 0; axis < 3; ++axis) {
    if (dims[axis] == 1) continue;
    AxisRows rows = ssim_window_rows(dims[axis], window, window_sigma);
    std::array<int, 3> nd;
    fa = apply_axis_rows(fa, d, axis, rows, nd);
    fb = apply_axis_rows(fb, d, axis, rows, nd);
    faa = apply_axis_rows(faa, d, axis, rows, nd);
    fbb = apply_axis_rows(fbb, d, axis, rows, nd);
    fab = apply_axis_rows(fab, d, axis, rows, nd);
  }
  const real c1 = (real(0.01) * peak) * (real(0.01) * peak);
  const real c2 = (real(0.03) * peak) * (real(0.03) * peak);
  real acc = 0;
  for (size_t i = 0; i < n; ++i) {
    real mu_a = fa[i], mu_b = fb[i];
    real va = faa[i] - mu_a * mu_a, vb = fbb[i] - mu_b * mu_b, cov = fab[i] - mu_a * mu_b;
    acc += ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
           ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
  }
  return acc / real(n);
}

inline real psnr(const VoxelVolume& a, const VoxelVolume& b, real peak = 1, real cap_db = 100) {
  CTSR_CHECK(a.dims == b.dims, "psnr: volume dims mismatch");
  return psnr_grid(a.data.data(), b.data.data(), a.size(), peak, cap_db);
}

inline real ssim(const VoxelVolume& a, const VoxelVolume& b, int window = 11, real peak = 1) {
  CTSR_CHECK(a.dims == b.dims, "ssim: volume dims mismatch");
  return ssim_grid(a.data.data(), b.data.data(), a.dims, window, peak);
}

// Maps [lo, hi] to [0, 1] with clamping (CT window normalization).
inline VoxelVolume clip_normalize(const VoxelVolume& vol, real lo, real hi) {
  CTSR_CHECK(hi > lo, "clip_normalize needs hi > lo");
  VoxelVolume out = vol;
  real inv = 1 / (hi - lo);
  for (real& v : out.data) v = (std::clamp(v, lo, hi) - lo) * inv;
  out.intensity_range = {0, 1};
  return out;
}

// ---------------------------------------------------------------------------
// File I/O
//
// A volume on disk is `<name>.f32raw` (little-endian float32, x fastest) plus
// `<name>.json` holding dims, spacing, intensity_range and the axis order tag.

inline std::string sidecar_path(const std::string& payload_path) {
  CTSR_CHECK(payload_path.size() > 7 &&
                 payload_path.substr(payload_path.size() - 7) == ".f32raw",
             "volume payload path must end in .f32raw");
  return payload_path.substr(0, payload_path.size() - 7) + ".json";
}

inline void write_volume(const VoxelVolume& vol, const std::string& path) {
  CTSR_CHECK(vol.size() == vol.data.size(), "volume data size does not match dims");
  std::vector<float> buf(vol.data.size());
  for (size_t i = 0; i < buf.size(); ++i) buf[i] = float(vol.data[i]);
  std::ofstream f(path, std::ios::binary);
  CTSR_RUNTIME_CHECK(f.good(), "cannot open for write: " + path);
  f.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size() * 4));
  CTSR_RUNTIME_CHECK(f.good(), "short write: " + path);
  f.close();

  nlohmann::json side;
  side["dims"] = vol.dims;
  side["spacing"] = vol.spacing;
  side["intensity_range"] = vol.intensity_range;
  side["axis_order"] = "xyz-x-fastest";
  std::ofstream sf(sidecar_path(path));
  CTSR_RUNTIME_CHECK(sf.good(), "cannot open for write: " + sidecar_path(path));
  sf << side.dump(2) << "\n";
}

inline VoxelVolume read_volume(const std::string& path) {
  std::ifstream sf(sidecar_path(path));
  CTSR_CHECK(sf.good(), "missing volume sidecar: " + sidecar_path(path));
  nlohmann::json side;
  try {
    sf >> side;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("malformed volume sidecar " + sidecar_path(path) + ": " + e.what());
  }
  VoxelVolume vol;
  try {
    vol.dims = side.at("dims").get<std::array<int, 3>>();
    vol.spacing = side.at("spacing").get<std::array<real, 3>>();
    vol.intensity_range = side.at("intensity_range").get<std::array<real, 2>>();
    CTSR_CHECK(side.at("axis_order").get<std::string>() == "xyz-x-fastest",
               "unsupported axis_order in " + sidecar_path(path));
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("bad volume sidecar " + sidecar_path(path) + ": " + e.what());
  }
  CTSR_CHECK(vol.dims[0] > 0 && vol.dims[1] > 0 && vol.dims[2] > 0,
             "bad dims in " + sidecar_path(path));

  std::ifstream f(path, std::ios::binary | std::ios::ate);
  CTSR_CHECK(f.good(), "missing volume payload: " + path);
  auto bytes = size_t(f.tellg());
  CTSR_CHECK(bytes == vol.size() * 4, "payload length mismatch for " + path);
  f.seekg(0);
  std::vector<float> buf(vol.size());
  f.read(reinterpret_cast<char*>(buf.data()), std::streamsize(bytes));
  CTSR_RUNTIME_CHECK(f.good(), "short read: " + path);
  vol.data.resize(buf.size());
  for (size_t i = 0; i < buf.size(); ++i) vol.data[i] = buf[i];
  return vol;
}

}  // namespace ctsr
