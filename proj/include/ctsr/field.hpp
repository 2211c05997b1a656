#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "ctsr/common.hpp"
#include "ctsr/volume.hpp"
#include "json.hpp"

namespace ctsr {

// --- density activations -------------------------------------------------

enum class Activation { LeakyRelu, Softplus };

inline real activate_density(real raw, real gamma) { return raw >= 0 ? raw : gamma * raw; }

inline real inverse_activate(real rho, real gamma) { return rho >= 0 ? rho : rho / gamma; }

inline real activate_density_softplus(real raw) {
  // ln(1 + e^raw) without overflow for large raw
  return raw > 0 ? raw + std::log1p(std::exp(-raw)) : std::log1p(std::exp(raw));
}

inline real inverse_activate_softplus(real rho) {
  CTSR_CHECK(rho > 0, "softplus inverse needs a positive density");
  // ln(e^rho - 1), stable on both tails
  return rho > 20 ? rho + std::log(-std::expm1(-rho)) : std::log(std::expm1(rho));
}

inline real activation_apply(Activation kind, real raw, real gamma) {
  return kind == Activation::LeakyRelu ? activate_density(raw, gamma)
                                       : activate_density_softplus(raw);
}

inline real activation_invert(Activation kind, real rho, real gamma) {
  return kind == Activation::LeakyRelu ? inverse_activate(rho, gamma)
                                       : inverse_activate_softplus(rho);
}

// d(activated)/d(raw); the leaky kink at 0 takes the right-hand slope.
inline real activation_slope(Activation kind, real raw, real gamma) {
  if (kind == Activation::LeakyRelu) return raw >= 0 ? real(1) : gamma;
  return raw > 0 ? real(1) / (real(1) + std::exp(-raw)) : std::exp(raw) / (real(1) + std::exp(raw));
}

// --- primitives -----------------------------------------------------------

struct Gaussian3D {
  Vec3 position{0, 0, 0};
  Vec3 log_scale{0, 0, 0};  // per-axis std = exp(log_scale), world units
  Quat rotation{1, 0, 0, 0};
  real raw_density = 0;  // pre-activation
};

struct GaussianField {
  std::vector<Gaussian3D> gaussians;
  real gamma = 0.09;
  int max_count = 500000;
  Activation activation = Activation::LeakyRelu;
  Vec3 extent{1, 1, 1};  // world half-extents of the reconstruction cube

  int count() const { return int(gaussians.size()); }
};

struct GaussianGrad {
  Vec3 position{0, 0, 0};
  Vec3 log_scale{0, 0, 0};
  Vec4 rotation{0, 0, 0, 0};
  real raw_density = 0;
};

inline Mat3 covariance_of(const Gaussian3D& g) {
  Mat3 r = quat_to_rot(g.rotation);
  Vec3 s2 = {std::exp(2 * g.log_scale.x), std::exp(2 * g.log_scale.y),
             std::exp(2 * g.log_scale.z)};
  Mat3 c;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b)
      c(a, b) = r(a, 0) * s2.x * r(b, 0) + r(a, 1) * s2.y * r(b, 1) + r(a, 2) * s2.z * r(b, 2);
  return c;
}

// Evaluation cutoff radius in Mahalanobis sigmas. Anything farther is
// skipped; at 4.5 sigma the dropped contribution per Gaussian is below
// rho * e^{-10.1} ~ 4e-5, comfortably inside the point-query contract.
inline constexpr real kCutoffSigma = 4.5;

// Cached per-Gaussian quantities for evaluation. The cutoff ellipsoid is
// enclosed in an axis-aligned box so far-away points can be rejected without
// forming the quadratic form; the box never rejects a point inside the
// cutoff radius.
struct GaussianEval {
  Vec3 p;
  Mat3 rot;        // body-to-world
  Vec3 inv_s2;     // 1/scale^2 per body axis
  real rho;        // activated density
  real slope;      // d rho / d raw
  Vec3 bbox_half;  // cutoff-radius axis-aligned half widths
};

inline GaussianEval make_eval(const Gaussian3D& g, Activation kind, real gamma) {
  GaussianEval e;
  e.p = g.position;
  e.rot = quat_to_rot(g.rotation);
  Vec3 s = {std::exp(g.log_scale.x), std::exp(g.log_scale.y), std::exp(g.log_scale.z)};
  e.inv_s2 = {1 / (s.x * s.x), 1 / (s.y * s.y), 1 / (s.z * s.z)};
  e.rho = activation_apply(kind, g.raw_density, gamma);
  e.slope = activation_slope(kind, g.raw_density, gamma);
  for (int a = 0; a < 3; ++a) {
    real var = e.rot(a, 0) * e.rot(a, 0) * s.x * s.x + e.rot(a, 1) * e.rot(a, 1) * s.y * s.y +
               e.rot(a, 2) * e.rot(a, 2) * s.z * s.z;
    e.bbox_half[a] = kCutoffSigma * std::sqrt(var);
  }
  return e;
}

inline std::vector<GaussianEval> make_evals(const GaussianField& f) {
  std::vector<GaussianEval> evals(f.gaussians.size());
  for (size_t i = 0; i < f.gaussians.size(); ++i)
    evals[i] = make_eval(f.gaussians[i], f.activation, f.gamma);
  return evals;
}

// Contribution of one Gaussian at x, or 0 past the cutoff radius.
inline real eval_contribution(const GaussianEval& e, Vec3 x) {
  Vec3 d = x - e.p;
  if (std::abs(d.x) > e.bbox_half.x || std::abs(d.y) > e.bbox_half.y ||
      std::abs(d.z) > e.bbox_half.z)
    return 0;
  Vec3 y = mul_t(e.rot, d);  // body frame
  real q = y.x * y.x * e.inv_s2.x + y.y * y.y * e.inv_s2.y + y.z * y.z * e.inv_s2.z;
  if (q > kCutoffSigma * kCutoffSigma) return 0;
  return e.rho * std::exp(real(-0.5) * q);
}

inline real query_density(const std::vector<GaussianEval>& evals, Vec3 x) {
  real acc = 0;
  for (const GaussianEval& e : evals) acc += eval_contribution(e, x);
  return acc;
}

inline real query_density(const GaussianField& f, Vec3 x) {
  return query_density(make_evals(f), x);
}

// Gradient of eval_contribution wrt the source Gaussian's parameters,
// scaled by the incoming adjoint. Shares the cutoff with the forward pass
// so the optimized function is exactly the differentiated one.
inline void accumulate_contribution_grad(const Gaussian3D& g, const GaussianEval& e, Vec3 x,
                                         real adj, GaussianGrad& out) {
  Vec3 d = x - e.p;
  if (std::abs(d.x) > e.bbox_half.x || std::abs(d.y) > e.bbox_half.y ||
      std::abs(d.z) > e.bbox_half.z)
    return;
  Vec3 y = mul_t(e.rot, d);
  real q = y.x * y.x * e.inv_s2.x + y.y * y.y * e.inv_s2.y + y.z * y.z * e.inv_s2.z;
  if (q > kCutoffSigma * kCutoffSigma) return;
  real w = std::exp(real(-0.5) * q);
  real common = adj * e.rho * w;

  out.raw_density += adj * w * e.slope;

  // d q / d p = -2 Sigma^{-1} d ; contribution grad = rho w (Sigma^{-1} d)
  Vec3 ys = {y.x * e.inv_s2.x, y.y * e.inv_s2.y, y.z * e.inv_s2.z};
  Vec3 sid = mul(e.rot, ys);  // Sigma^{-1} d in world frame
  out.position += common * sid;

  // d q / d log s_j = -2 y_j^2 / s_j^2
  out.log_scale += common * Vec3{y.x * y.x * e.inv_s2.x, y.y * y.y * e.inv_s2.y,
                                 y.z * y.z * e.inv_s2.z};

  // d q / d R_{aj} = 2 y_j d_a / s_j^2, chained through dR/d(quat) and
  // projected onto the unit sphere's tangent (renormalization chain).
  auto jac = quat_rot_jacobian(normalized(g.rotation));
  Vec4 gq{0, 0, 0, 0};
  for (int c = 0; c < 4; ++c) {
    real acc = 0;
    for (int a = 0; a < 3; ++a)
      for (int j = 0; j < 3; ++j) acc += ys[j] * d[a] * jac[c](a, j);
    gq[c] = -common * acc;
  }
  Quat u = normalized(g.rotation);
  real radial = gq[0] * u.w + gq[1] * u.x + gq[2] * u.y + gq[3] * u.z;
  gq[0] -= radial * u.w;
  gq[1] -= radial * u.x;
  gq[2] -= radial * u.y;
  gq[3] -= radial * u.z;
  out.rotation += gq;
}

// --- initialization -------------------------------------------------------

namespace detail {

// Mean nearest-neighbor distance via a uniform cell grid.
inline real mean_nn_distance(const std::vector<Vec3>& pts, Vec3 extent) {
  size_t n = pts.size();
  if (n < 2) return (extent.x + extent.y + extent.z) / 3 * real(0.1);
  real volume = 8 * extent.x * extent.y * extent.z;
  real h = std::cbrt(volume / real(n));
  int gx = std::max(1, int(std::ceil(2 * extent.x / h)));
  int gy = std::max(1, int(std::ceil(2 * extent.y / h)));
  int gz = std::max(1, int(std::ceil(2 * extent.z / h)));
  auto cell_of = [&](Vec3 p) {
    int cx = std::clamp(int((p.x + extent.x) / h), 0, gx - 1);
    int cy = std::clamp(int((p.y + extent.y) / h), 0, gy - 1);
    int cz = std::clamp(int((p.z + extent.z) / h), 0, gz - 1);
    return std::array<int, 3>{cx, cy, cz};
  };
  std::vector<std::vector<int>> cells(size_t(gx) * gy * gz);
  for (size_t i = 0; i < n; ++i) {
    auto c = cell_of(pts[i]);
    cells[c[0] + gx * (c[1] + size_t(gy) * c[2])].push_back(int(i));
  }
  int max_ring = std::max({gx, gy, gz});
  real total = 0;
  for (size_t i = 0; i < n; ++i) {
    auto c = cell_of(pts[i]);
    real best = std::numeric_limits<real>::infinity();
    for (int r = 0; r <= max_ring; ++r) {
      if (r > 0 && best < std::numeric_limits<real>::infinity() && real(r - 1) * h > best) break;
      for (int dz = -r; dz <= r; ++dz)
        for (int dy = -r; dy <= r; ++dy)
          for (int dx = -r; dx <= r; ++dx) {
            if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != r) continue;
            int cx = c[0] + dx, cy = c[1] + dy, cz = c[2] + dz;
            if (cx < 0 || cy < 0 || cz < 0 || cx >= gx || cy >= gy || cz >= gz) continue;
            for (int j : cells[cx + gx * (cy + size_t(gy) * cz)]) {
              if (size_t(j) == i) continue;
              real d = norm(pts[j] - pts[i]);
              best = std::min(best, d);
            }
          }
    }
    total += best;
  }
  return total / real(n);
}

}  // namespace detail

// Seeds Gaussians at voxel centers of sufficiently dense voxels. In residual
// mode the raw density starts at a small epsilon instead of the inverted
// voxel value, so the field initially renders to (almost) nothing.
inline GaussianField init_from_volume(const VoxelVolume& vol, int n_init, real density_thresh,
                                      real scale_term, bool residual_mode, uint64_t seed = 1234,
                                      real gamma = 0.09,
                                      Activation activation = Activation::LeakyRelu) {
  CTSR_CHECK(n_init >= 1, "need at least one Gaussian");
  CTSR_CHECK(gamma > 0 && gamma < 1, "gamma must lie in (0,1)");
  Vec3 extent = {vol.dims[0] * vol.spacing[0] / 2, vol.dims[1] * vol.spacing[1] / 2,
                 vol.dims[2] * vol.spacing[2] / 2};

  std::vector<int64_t> eligible;
  for (int64_t i = 0; i < int64_t(vol.data.size()); ++i)
    if (vol.data[size_t(i)] >= density_thresh) eligible.push_back(i);
  CTSR_CHECK(!eligible.empty(), "no voxels reach the density threshold");

  Rng rng(seed);
  std::vector<int64_t> picks;
  picks.reserve(size_t(n_init));
  if (size_t(n_init) <= eligible.size()) {
    // partial Fisher-Yates: first n_init entries become the sample
    for (int k = 0; k < n_init; ++k) {
      int j = k + rng.uniform_int(int(eligible.size()) - k);
      std::swap(eligible[size_t(k)], eligible[size_t(j)]);
      picks.push_back(eligible[size_t(k)]);
    }
  } else {
    std::cerr << "init_from_volume: requested " << n_init << " Gaussians but only "
              << eligible.size() << " voxels qualify; sampling with replacement\n";
    for (int k = 0; k < n_init; ++k) picks.push_back(eligible[size_t(rng.uniform_int(int(eligible.size())))]);
  }

  GaussianField field;
  field.gamma = gamma;
  field.activation = activation;
  field.extent = extent;
  field.gaussians.reserve(picks.size());

  std::vector<Vec3> centers;
  centers.reserve(picks.size());
  for (int64_t lin : picks) {
    int i = int(lin % vol.dims[0]);
    int j = int((lin / vol.dims[0]) % vol.dims[1]);
    int k = int(lin / (int64_t(vol.dims[0]) * vol.dims[1]));
    centers.push_back({(i + real(0.5)) * vol.spacing[0] - extent.x,
                       (j + real(0.5)) * vol.spacing[1] - extent.y,
                       (k + real(0.5)) * vol.spacing[2] - extent.z});
  }
  real nn = detail::mean_nn_distance(centers, extent);
  real iso_scale = std::max(scale_term * nn, real(1e-4));
  real ls = std::log(iso_scale);

  for (size_t k = 0; k < picks.size(); ++k) {
    Gaussian3D g;
    g.position = centers[k];
    g.log_scale = {ls, ls, ls};
    g.rotation = {1, 0, 0, 0};
    if (residual_mode) {
      // epsilon is the activated density, so softplus mode also starts near zero
      g.raw_density = activation_invert(activation, real(1e-4), gamma);
    } else {
      real v = vol.data[size_t(picks[k])];
      if (activation == Activation::Softplus) v = std::max(v, real(1e-12));
      g.raw_density = activation_invert(activation, v, gamma);
    }
    field.gaussians.push_back(g);
  }
  return field;
}

// --- voxelization ----------------------------------------------------------

// World center of global voxel (i,j,k) for a grid of the given spacing that
// fills the field's reconstruction cube.
inline Vec3 voxel_center(const GaussianField& f, Vec3 spacing, int i, int j, int k) {
  return {(i + real(0.5)) * spacing.x - f.extent.x, (j + real(0.5)) * spacing.y - f.extent.y,
          (k + real(0.5)) * spacing.z - f.extent.z};
}

inline void check_crop(const GaussianField& f, const std::array<int, 3>& origin,
                       const std::array<int, 3>& dims, Vec3 spacing) {
  for (int a = 0; a < 3; ++a) {
    CTSR_CHECK(dims[a] >= 1, "crop dims must be positive");
    CTSR_CHECK(origin[a] >= 0, "crop starts outside the volume");
    real top = (origin[a] + dims[a]) * spacing[a];
    CTSR_CHECK(top <= 2 * f.extent[a] * (1 + real(1e-9)), "crop extends past the volume");
  }
}

// Sum of Gaussian contributions at every voxel center of the crop. The loop
// is Gaussian-major, restricted to each one's 3-sigma box, so per-voxel
// addition order is ascending Gaussian index — identical to query_density.
inline VoxelVolume voxelize(const GaussianField& f, std::array<int, 3> origin,
                            std::array<int, 3> dims, Vec3 spacing) {
  check_crop(f, origin, dims, spacing);
  VoxelVolume out = VoxelVolume::zeros(dims, {spacing.x, spacing.y, spacing.z});
  std::vector<GaussianEval> evals = make_evals(f);
  for (const GaussianEval& e : evals) {
    int lo[3], hi[3];
    bool empty = false;
    for (int a = 0; a < 3; ++a) {
      // padded by one voxel so the cutoff inside eval_contribution is the
      // only inclusion test that matters
      real c0 = (e.p[a] - e.bbox_half[a] + f.extent[a]) / spacing[a] - real(0.5);
      real c1 = (e.p[a] + e.bbox_half[a] + f.extent[a]) / spacing[a] - real(0.5);
      lo[a] = std::max(origin[a], int(std::ceil(c0)) - 1);
      hi[a] = std::min(origin[a] + dims[a] - 1, int(std::floor(c1)) + 1);
      if (lo[a] > hi[a]) empty = true;
    }
    if (empty) continue;
    for (int k = lo[2]; k <= hi[2]; ++k)
      for (int j = lo[1]; j <= hi[1]; ++j)
        for (int i = lo[0]; i <= hi[0]; ++i) {
          Vec3 x = voxel_center(f, spacing, i, j, k);
          out.at(i - origin[0], j - origin[1], k - origin[2]) += eval_contribution(e, x);
        }
  }
  return out;
}

// Adjoint of voxelize: scatters dL/dvoxel back to per-Gaussian gradients.
inline std::vector<GaussianGrad> voxelize_backward(const GaussianField& f,
                                                   std::array<int, 3> origin,
                                                   std::array<int, 3> dims, Vec3 spacing,
                                                   const VoxelVolume& dL_dvox) {
  check_crop(f, origin, dims, spacing);
  CTSR_CHECK(dL_dvox.dims == dims, "adjoint volume dims mismatch");
  std::vector<GaussianEval> evals = make_evals(f);
  std::vector<GaussianGrad> grads(f.gaussians.size());
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic, 16)
#endif
  for (int gi = 0; gi < int(f.gaussians.size()); ++gi) {
    const GaussianEval& e = evals[size_t(gi)];
    int lo[3], hi[3];
    bool empty = false;
    for (int a = 0; a < 3; ++a) {
      real c0 = (e.p[a] - e.bbox_half[a] + f.extent[a]) / spacing[a] - real(0.5);
      real c1 = (e.p[a] + e.bbox_half[a] + f.extent[a]) / spacing[a] - real(0.5);
      lo[a] = std::max(origin[a], int(std::ceil(c0)) - 1);
      hi[a] = std::min(origin[a] + dims[a] - 1, int(std::floor(c1)) + 1);
      if (lo[a] > hi[a]) empty = true;
    }
    if (empty) continue;
    for (int k = lo[2]; k <= hi[2]; ++k)
      for (int j = lo[1]; j <= hi[1]; ++j)
        for (int i = lo[0]; i <= hi[0]; ++i) {
          real adj = dL_dvox.at(i - origin[0], j - origin[1], k - origin[2]);
          if (adj == 0) continue;
          Vec3 x = voxel_center(f, spacing, i, j, k);
          accumulate_contribution_grad(f.gaussians[size_t(gi)], e, x, adj, grads[size_t(gi)]);
        }
  }
  return grads;
}

// --- checkpoint I/O ---------------------------------------------------------
//
// One JSON header line, then count * 11 little-endian float32 values per
// Gaussian: position(3), log_scale(3), quaternion wxyz(4), raw_density(1).

inline void write_field(const GaussianField& f, const std::string& path) {
  nlohmann::json header = {
      {"count", f.count()},
      {"gamma", f.gamma},
      {"activation", f.activation == Activation::LeakyRelu ? "leaky_relu" : "softplus"},
      {"max_count", f.max_count},
      {"extent", {f.extent.x, f.extent.y, f.extent.z}},
  };
  std::ofstream out(path, std::ios::binary);
  CTSR_RUNTIME_CHECK(out.good(), "cannot open field checkpoint for writing: " + path);
  out << header.dump() << "\n";
  std::vector<float> rec(11);
  for (const Gaussian3D& g : f.gaussians) {
    rec[0] = float(g.position.x);
    rec[1] = float(g.position.y);
    rec[2] = float(g.position.z);
    rec[3] = float(g.log_scale.x);
    rec[4] = float(g.log_scale.y);
    rec[5] = float(g.log_scale.z);
    rec[6] = float(g.rotation.w);
    rec[7] = float(g.rotation.x);
    rec[8] = float(g.rotation.y);
    rec[9] = float(g.rotation.z);
    rec[10] = float(g.raw_density);
    out.write(reinterpret_cast<const char*>(rec.data()), std::streamsize(rec.size() * 4));
  }
  CTSR_RUNTIME_CHECK(out.good(), "field checkpoint write failed: " + path);
}

inline GaussianField read_field(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  CTSR_RUNTIME_CHECK(in.good(), "cannot open field checkpoint: " + path);
  std::string line;
  std::getline(in, line);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("bad field checkpoint header: " + std::string(e.what()));
  }
  GaussianField f;
  int count = header.at("count").get<int>();
  CTSR_CHECK(count >= 0, "negative Gaussian count in checkpoint");
  f.gamma = header.at("gamma").get<real>();
  f.max_count = header.at("max_count").get<int>();
  std::string act = header.at("activation").get<std::string>();
  CTSR_CHECK(act == "leaky_relu" || act == "softplus", "unknown activation in checkpoint");
  f.activation = act == "leaky_relu" ? Activation::LeakyRelu : Activation::Softplus;
  auto ext = header.at("extent").get<std::array<real, 3>>();
  f.extent = {ext[0], ext[1], ext[2]};
  f.gaussians.resize(size_t(count));
  std::vector<float> rec(11);
  for (Gaussian3D& g : f.gaussians) {
    in.read(reinterpret_cast<char*>(rec.data()), std::streamsize(rec.size() * 4));
    CTSR_RUNTIME_CHECK(in.gcount() == std::streamsize(rec.size() * 4),
                       "field checkpoint truncated: " + path);
    g.position = {rec[0], rec[1], rec[2]};
    g.log_scale = {rec[3], rec[4], rec[5]};
    g.rotation = {rec[6], rec[7], rec[8], rec[9]};
    g.raw_density = rec[10];
  }
  return f;
}

}  // namespace ctsr
