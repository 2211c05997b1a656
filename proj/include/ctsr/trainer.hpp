#pragma once

// Residual-field optimization: L1 + DSSIM reconstruction loss on rendered
// projections, TV on composite volume crops, Adam with exponential lr decay,
// and adaptive split/clone/prune control of the Gaussian count.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "ctsr/common.hpp"
#include "ctsr/field.hpp"
#include "ctsr/geometry.hpp"
#include "ctsr/projection.hpp"
#include "ctsr/projector.hpp"
#include "ctsr/rasterizer.hpp"
#include "ctsr/volume.hpp"

namespace ctsr {

struct TrainConfig {
  int iterations = 5000;
  real lambda1 = 0.5;   // DSSIM weight
  real lambda2 = 0.05;  // TV weight
  real lr_position = 0.0002;
  real lr_density = 0.001;
  real lr_scale = 0.005;
  real lr_rotation = 0.001;
  real lr_final_factor = 0.1;  // lr(end) = lr_final_factor * lr(0)
  int densify_from = 500;
  int densify_until = 5000;
  int densify_interval = 100;
  real grad_threshold = 0.00005;  // mean screen-space positional gradient
  real prune_band = 0.00001;      // raw densities in (-band, band) are dropped
  real gamma = 0.09;
  uint64_t seed = 1234;
  int tv_crop = 32;
  int log_interval = 100;
  int checkpoint_interval = 1000;
  real project_step = 0;  // reprojection step; 0 = half the HR voxel spacing
};

inline void validate(const TrainConfig& c) {
  CTSR_CHECK(c.iterations >= 0, "iterations must be >= 0");
  CTSR_CHECK(c.lambda1 >= 0 && c.lambda2 >= 0, "loss weights must be >= 0");
  CTSR_CHECK(c.lr_position > 0 && c.lr_density > 0 && c.lr_scale > 0 && c.lr_rotation > 0,
             "learning rates must be positive");
  CTSR_CHECK(c.lr_final_factor > 0, "lr_final_factor must be positive");
  CTSR_CHECK(c.densify_from < c.densify_until, "densify window must be non-empty");
  // a zero-iteration run is a degenerate no-op; the window check is vacuous
  if (c.iterations > 0)
    CTSR_CHECK(c.densify_until <= c.iterations, "densify window must end within the run");
  CTSR_CHECK(c.densify_interval > 0, "densify interval must be positive");
  CTSR_CHECK(c.grad_threshold > 0 && c.prune_band > 0, "control thresholds must be positive");
  CTSR_CHECK(c.tv_crop >= 2, "tv crop must be at least 2 voxels");
}

// ---------------------------------------------------------------------------
// Residual targets

struct ResidualTargets {
  ProjectionSet y;         // targets, reconstituted as y_hat + lr_proj
  ProjectionSet lr_proj;   // reprojection of the upsampled LR volume
  ProjectionSet y_hat;     // residual ground truth
  VoxelVolume lr_volume_up;

  // Reprojects the upsampled LR volume and forms the residual targets.
  // y is reconstituted from the computed residual so that
  // y_hat + lr_proj == y holds bit-for-bit (a - b + b is not an identity
  // in floating point, so storing the original targets would break it).
  static ResidualTargets make(const ProjectionSet& targets, VoxelVolume lr_up, real step = 0) {
    const ScannerGeometry& geom = targets.geometry;
    CTSR_CHECK(int(targets.projections.size()) == geom.cfg.n_angles,
               "target projection count does not match the geometry");
    if (step <= 0) {
      real w = 2 * geom.cfg.volume_extent.x / std::max(1, lr_up.dims[0]);
      step = w / 2;
    }
    ResidualTargets t;
    t.lr_proj = project_all(lr_up, geom, step);
    t.y = targets;
    t.y_hat = targets;
    for (size_t i = 0; i < targets.projections.size(); ++i) {
      const Projection& g = targets.projections[i];
      const Projection& p = t.lr_proj.projections[i];
      CTSR_CHECK(g.dims == p.dims, "target/reprojection dims mismatch");
      Projection& h = t.y_hat.projections[i];
      Projection& r = t.y.projections[i];
      for (size_t k = 0; k < g.data.size(); ++k) {
        h.data[k] = g.data[k] - p.data[k];
        r.data[k] = h.data[k] + p.data[k];
      }
    }
    t.lr_volume_up = std::move(lr_up);
    return t;
  }
};

inline Projection compose_prediction(const Projection& x_hat, const Projection& lr_proj) {
  CTSR_CHECK(x_hat.dims == lr_proj.dims, "prediction/reprojection dims mismatch");
  Projection x = x_hat;
  for (size_t i = 0; i < x.data.size(); ++i) x.data[i] += lr_proj.data[i];
  return x;
}

// ---------------------------------------------------------------------------
// Losses

namespace train_detail {

inline AxisRows transpose_rows(const AxisRows& rows, int n_in) {
  AxisRows t(static_cast<size_t>(n_in));
  for (int k = 0; k < int(rows.size()); ++k)
    for (auto [i, w] : rows[k]) t[size_t(i)].push_back({k, w});
  return t;
}

// Mean SSIM over a 2D image pair plus its gradient with respect to the
// second image, differentiating the same truncated-window statistics the
// metric uses.
inline real ssim_value_grad(const Projection& a, const Projection& b, std::vector<real>& grad,
                            int window = 11, real peak = 1, real window_sigma = 1.5) {
  std::array<int, 3> dims = {a.dims[0], a.dims[1], 1};
  size_t n = a.data.size();
  std::vector<real> fa = a.data, fb = b.data, faa(n), fbb(n), fab(n);
  for (size_t i = 0; i < n; ++i) {
    faa[i] = a.data[i] * a.data[i];
    fbb[i] = b.data[i] * b.data[i];
    fab[i] = a.data[i] * b.data[i];
  }
  std::array<int, 3> d = dims, nd;
  std::array<AxisRows, 2> rows;
  for (int axis = 0; axis < 2; ++axis) {
    if (dims[size_t(axis)] == 1) continue;
    rows[size_t(axis)] = ssim_window_rows(dims[size_t(axis)], window, window_sigma);
    fa = apply_axis_rows(fa, d, axis, rows[size_t(axis)], nd);
    fb = apply_axis_rows(fb, d, axis, rows[size_t(axis)], nd);
    faa = apply_axis_rows(faa, d, axis, rows[size_t(axis)], nd);
    fbb = apply_axis_rows(fbb, d, axis, rows[size_t(axis)], nd);
    fab = apply_axis_rows(fab, d, axis, rows[size_t(axis)], nd);
  }

  const real c1 = (real(0.01) * peak) * (real(0.01) * peak);
  const real c2 = (real(0.03) * peak) * (real(0.03) * peak);
  // per-pixel partials w.r.t. the smoothed fields mu_b, (W b^2), (W ab)
  std::vector<real> p_mu(n), p_bb(n), p_ab(n);
  real acc = 0;
  for (size_t i = 0; i < n; ++i) {
    real mu_a = fa[i], mu_b = fb[i];
    real va = faa[i] - mu_a * mu_a, vb = fbb[i] - mu_b * mu_b, cov = fab[i] - mu_a * mu_b;
    real n1 = 2 * mu_a * mu_b + c1, n2 = 2 * cov + c2;
    real d1 = mu_a * mu_a + mu_b * mu_b + c1, d2 = va + vb + c2;
    real s = (n1 * n2) / (d1 * d2);
    acc += s;
    real inv = 1 / (d1 * d2 * real(n));
    p_ab[i] = 2 * n1 * inv;
    p_bb[i] = -n1 * n2 * inv / d2;
    p_mu[i] = (2 * mu_a * n2 - 2 * mu_b * n1 * n2 / d1 - 2 * mu_a * n1 + 2 * mu_b * n1 * n2 / d2) *
              inv;
  }
  // adjoint of the separable smoothing, then the product rules for b^2, ab
  for (int axis = 0; axis < 2; ++axis) {
    if (dims[size_t(axis)] == 1) continue;
    AxisRows tr = transpose_rows(rows[size_t(axis)], dims[size_t(axis)]);
    p_mu = apply_axis_rows(p_mu, d, axis, tr, nd);
    p_bb = apply_axis_rows(p_bb, d, axis, tr, nd);
    p_ab = apply_axis_rows(p_ab, d, axis, tr, nd);
  }
  grad.assign(n, 0);
  for (size_t i = 0; i < n; ++i)
    grad[i] = p_mu[i] + 2 * b.data[i] * p_bb[i] + a.data[i] * p_ab[i];
  return acc / real(n);
}

}  // namespace train_detail

struct ReconLoss {
  real total = 0, l1 = 0, l_res = 0, dssim = 0;
  Projection grad;  // dL/d(residual prediction), using dx/dx_hat = 1
};

// L1(y, x) + L1(y_hat, x_hat) + lambda1 * DSSIM(y, x). The two L1 terms are
// algebraically identical when x = x_hat + lr_proj; both are kept so the
// loss reads as documented (an effective 2x L1 weight).
inline ReconLoss loss_recon(const Projection& y, const Projection& x, const Projection& y_hat,
                            const Projection& x_hat, real lambda1) {
  CTSR_CHECK(y.dims == x.dims && y.dims == y_hat.dims && y.dims == x_hat.dims,
             "loss_recon dims mismatch");
  size_t n = y.data.size();
  CTSR_CHECK(n > 0, "loss_recon needs non-empty projections");
  ReconLoss out;
  out.grad = Projection::zeros(y.dims, x_hat.angle_index);
  real inv_n = 1 / real(n);
  for (size_t i = 0; i < n; ++i) {
    real d = x.data[i] - y.data[i];
    out.l1 += std::abs(d);
    out.grad.data[i] += (d > 0 ? inv_n : d < 0 ? -inv_n : 0);
    real r = x_hat.data[i] - y_hat.data[i];
    out.l_res += std::abs(r);
    out.grad.data[i] += (r > 0 ? inv_n : r < 0 ? -inv_n : 0);
  }
  out.l1 *= inv_n;
  out.l_res *= inv_n;
  if (lambda1 != 0) {
    std::vector<real> dssim_dx;
    real s = train_detail::ssim_value_grad(y, x, dssim_dx);
    out.dssim = (1 - s) / 2;
    for (size_t i = 0; i < n; ++i) out.grad.data[i] += lambda1 * real(-0.5) * dssim_dx[i];
  }
  out.total = out.l1 + out.l_res + lambda1 * out.dssim;
  return out;
}

struct TvLoss {
  real value = 0;
  VoxelVolume grad;
};

// Anisotropic total variation: mean over the three axes of the mean absolute
// forward difference along that axis (index-space differences).
inline TvLoss loss_tv(const VoxelVolume& v) {
  CTSR_CHECK(v.dims[0] >= 2 && v.dims[1] >= 2 && v.dims[2] >= 2,
             "tv needs at least 2 voxels per axis");
  TvLoss out;
  out.grad = VoxelVolume::zeros(v.dims, v.spacing);
  size_t stride[3] = {1, size_t(v.dims[0]), size_t(v.dims[0]) * size_t(v.dims[1])};
  for (int axis = 0; axis < 3; ++axis) {
    std::array<int, 3> m = v.dims;
    m[size_t(axis)] -= 1;
    real inv_cnt = 1 / (real(3) * real(m[0]) * real(m[1]) * real(m[2]));
    real axis_sum = 0;
    for (int z = 0; z < m[2]; ++z)
      for (int yy = 0; yy < m[1]; ++yy)
        for (int xx = 0; xx < m[0]; ++xx) {
          size_t i = size_t(xx) + stride[1] * size_t(yy) + stride[2] * size_t(z);
          real diff = v.data[i + stride[size_t(axis)]] - v.data[i];
          axis_sum += std::abs(diff);
          real s = diff > 0 ? inv_cnt : diff < 0 ? -inv_cnt : 0;
          out.grad.data[i + stride[size_t(axis)]] += s;
          out.grad.data[i] -= s;
        }
    out.value += axis_sum * inv_cnt;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamMoments {
  Vec3 m_pos{}, v_pos{}, m_ls{}, v_ls{};
  Vec4 m_rot{}, v_rot{};
  real m_raw = 0, v_raw = 0;
};

struct AdamState {
  std::vector<AdamMoments> moments;
  long step = 0;
  real beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

inline real lr_at(real lr0, const TrainConfig& cfg, int iter) {
  return lr0 * std::pow(cfg.lr_final_factor, real(iter) / real(std::max(1, cfg.iterations)));
}

inline void adam_step(GaussianField& f, const std::vector<GaussianGrad>& grads, AdamState& st,
                      const TrainConfig& cfg, int iter) {
  CTSR_CHECK(grads.size() == f.gaussians.size(), "gradient/parameter count mismatch");
  if (st.moments.size() != f.gaussians.size()) st.moments.resize(f.gaussians.size());
  for (size_t i = 0; i < grads.size(); ++i) {
    const GaussianGrad& g = grads[i];
    bool ok = std::isfinite(g.raw_density);
    for (int a = 0; a < 3; ++a)
      ok = ok && std::isfinite(g.position[a]) && std::isfinite(g.log_scale[a]);
    for (int c = 0; c < 4; ++c) ok = ok && std::isfinite(g.rotation[c]);
    if (!ok) {
      std::ostringstream msg;
      msg << "non-finite gradient at iteration " << iter << " gaussian " << i;
      throw std::runtime_error(msg.str());
    }
  }

  st.step += 1;
  real bc1 = 1 - std::pow(st.beta1, real(st.step));
  real bc2 = 1 - std::pow(st.beta2, real(st.step));
  real lr_pos = lr_at(cfg.lr_position, cfg, iter);
  real lr_dens = lr_at(cfg.lr_density, cfg, iter);
  real lr_scale = lr_at(cfg.lr_scale, cfg, iter);
  real lr_rot = lr_at(cfg.lr_rotation, cfg, iter);
  real ls_lo = std::log(real(1e-4));
  real ls_hi = std::log(std::max({f.extent.x, f.extent.y, f.extent.z}));

  auto update = [&](real& p, real g, real& m, real& v, real lr) {
    m = st.beta1 * m + (1 - st.beta1) * g;
    v = st.beta2 * v + (1 - st.beta2) * g * g;
    real u = lr * (m / bc1) / (std::sqrt(v / bc2) + st.eps);
    p -= u;
    return u != 0;
  };

  for (size_t i = 0; i < f.gaussians.size(); ++i) {
    Gaussian3D& g = f.gaussians[i];
    const GaussianGrad& gr = grads[i];
    AdamMoments& mo = st.moments[i];
    for (int a = 0; a < 3; ++a) {
      update(g.position[a], gr.position[a], mo.m_pos[a], mo.v_pos[a], lr_pos);
      if (update(g.log_scale[a], gr.log_scale[a], mo.m_ls[a], mo.v_ls[a], lr_scale))
        g.log_scale[a] = std::clamp(g.log_scale[a], ls_lo, ls_hi);
    }
    bool rot_moved = false;
    for (int c = 0; c < 4; ++c)
      rot_moved |= update(g.rotation[c], gr.rotation[c], mo.m_rot[c], mo.v_rot[c], lr_rot);
    if (rot_moved) g.rotation = normalized(g.rotation);
    update(g.raw_density, gr.raw_density, mo.m_raw, mo.v_raw, lr_dens);
  }
}

// ---------------------------------------------------------------------------
// Adaptive control

struct DensifyStats {
  std::vector<real> grad_sum;   // accumulated screen-space gradient norms
  std::vector<Vec3> pos_grad;   // accumulated world-space position gradients
  std::vector<int> seen;

  void reset(size_t n) {
    grad_sum.assign(n, 0);
    pos_grad.assign(n, Vec3{});
    seen.assign(n, 0);
  }
  void accumulate(const std::vector<real>& screen, const std::vector<GaussianGrad>& grads) {
    CTSR_CHECK(screen.size() == grad_sum.size() && grads.size() == grad_sum.size(),
               "densify stats size mismatch");
    for (size_t i = 0; i < screen.size(); ++i) {
      grad_sum[i] += screen[i];
      pos_grad[i] = pos_grad[i] + grads[i].position;
      seen[i] += 1;
    }
  }
};

struct DensifyReport {
  int split = 0, cloned = 0, pruned = 0;
};

// Splits or clones Gaussians whose mean screen-space positional gradient
// exceeds the threshold (largest first, admission stops at max_count), then
// prunes raw densities inside the open band. Adam moments follow: children
// and clones copy their source, pruned entries drop theirs.
inline DensifyReport densify_and_prune(GaussianField& f, DensifyStats& stats, AdamState& st,
                                       const TrainConfig& cfg) {
  size_t n = f.gaussians.size();
  CTSR_CHECK(stats.grad_sum.size() == n, "densify stats out of date");
  if (st.moments.size() != n) st.moments.resize(n);
  DensifyReport report;

  struct Cand {
    size_t index;
    real mean;
  };
  std::vector<Cand> cands;
  for (size_t i = 0; i < n; ++i) {
    real mean = stats.grad_sum[i] / std::max(1, stats.seen[i]);
    if (mean > cfg.grad_threshold) cands.push_back({i, mean});
  }
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.mean != b.mean) return a.mean > b.mean;
    return a.index < b.index;
  });
  size_t budget = f.max_count > int(n) ? size_t(f.max_count - int(n)) : 0;
  if (cands.size() > budget) cands.resize(budget);

  // wider than 1% of the volume width splits in two; smaller ones clone
  real ext = std::max({f.extent.x, f.extent.y, f.extent.z});
  real split_width = real(0.01) * 2 * ext;
  std::vector<uint8_t> split_flag(n, 0);
  std::vector<size_t> clones;
  for (const Cand& c : cands) {
    const Gaussian3D& g = f.gaussians[c.index];
    real smax = std::exp(std::max({g.log_scale[0], g.log_scale[1], g.log_scale[2]}));
    if (smax > split_width) {
      split_flag[c.index] = 1;
      ++report.split;
    } else {
      clones.push_back(c.index);
      ++report.cloned;
    }
  }

  std::vector<Gaussian3D> out;
  std::vector<AdamMoments> mout;
  out.reserve(n + cands.size());
  mout.reserve(n + cands.size());
  const real shrink = std::log(real(1.6));
  for (size_t i = 0; i < n; ++i) {
    const Gaussian3D& g = f.gaussians[i];
    if (!split_flag[i]) {
      out.push_back(g);
      mout.push_back(st.moments[i]);
      continue;
    }
    int dom = 0;
    for (int a = 1; a < 3; ++a)
      if (g.log_scale[a] > g.log_scale[size_t(dom)]) dom = a;
    Mat3 r = quat_to_rot(g.rotation);
    Vec3 dir = {r(0, dom), r(1, dom), r(2, dom)};
    real sd = std::exp(g.log_scale[size_t(dom)]);
    for (real side : {real(-0.5), real(0.5)}) {
      Gaussian3D child = g;
      child.position = g.position + (side * sd) * dir;
      for (int a = 0; a < 3; ++a) child.log_scale[a] -= shrink;
      out.push_back(child);
      mout.push_back(st.moments[i]);
    }
  }
  for (size_t i : clones) {
    const Gaussian3D& g = f.gaussians[i];
    Gaussian3D copy = g;
    // nudge the copy opposite the accumulated position gradient
    Vec3 dir = stats.pos_grad[i];
    real len = std::sqrt(dot(dir, dir));
    if (len > 0) {
      real smin = std::exp(std::min({g.log_scale[0], g.log_scale[1], g.log_scale[2]}));
      copy.position = g.position - (real(0.5) * smin / len) * dir;
    }
    out.push_back(copy);
    mout.push_back(st.moments[i]);
  }

  std::vector<Gaussian3D> kept;
  std::vector<AdamMoments> mkept;
  kept.reserve(out.size());
  mkept.reserve(out.size());
  for (size_t i = 0; i < out.size(); ++i) {
    real raw = out[i].raw_density;
    if (raw > -cfg.prune_band && raw < cfg.prune_band) {
      ++report.pruned;
      continue;
    }
    kept.push_back(out[i]);
    mkept.push_back(mout[i]);
  }

  f.gaussians = std::move(kept);
  st.moments = std::move(mkept);
  stats.reset(f.gaussians.size());
  return report;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainResult {
  VoxelVolume volume;  // composed reconstruction, clipped to the value range
  std::vector<std::string> log;
  real final_loss = 0;
  int final_count = 0;
  DensifyReport control_totals;
};

inline TrainResult train(GaussianField& f, const ResidualTargets& targets,
                         const ScannerGeometry& geom, const TrainConfig& cfg,
                         const std::string& checkpoint_dir = "") {
  validate(cfg);
  CTSR_CHECK(int(targets.y.projections.size()) == geom.cfg.n_angles &&
                 targets.y_hat.projections.size() == targets.y.projections.size() &&
                 targets.lr_proj.projections.size() == targets.y.projections.size(),
             "residual targets do not match the geometry");
  const VoxelVolume& lr_up = targets.lr_volume_up;
  CTSR_CHECK(lr_up.size() > 0, "residual targets carry no upsampled LR volume");
  for (int a = 0; a < 3; ++a) {
    real ext = a == 0 ? f.extent.x : a == 1 ? f.extent.y : f.extent.z;
    real want = 2 * ext / lr_up.dims[size_t(a)];
    CTSR_CHECK(std::abs(lr_up.spacing[size_t(a)] - want) <= 1e-9 * std::max<real>(1, want),
               "upsampled LR volume grid does not cover the field extent");
  }
  Vec3 spacing = {lr_up.spacing[0], lr_up.spacing[1], lr_up.spacing[2]};

  // Residual densities start around 1e-4, far below the usual 1/255 alpha
  // floor; rendering with a skip threshold would silence every splat and
  // all of their gradients, so the trainer renders unthresholded.
  RasterizeOptions ropt;
  ropt.alpha_skip = 0;

  AdamState st;
  st.moments.resize(f.gaussians.size());
  DensifyStats stats;
  stats.reset(f.gaussians.size());
  Rng rng(cfg.seed);

  TrainResult result;
  std::array<int, 3> crop_dims = {std::min(cfg.tv_crop, lr_up.dims[0]),
                                  std::min(cfg.tv_crop, lr_up.dims[1]),
                                  std::min(cfg.tv_crop, lr_up.dims[2])};

  real last_total = 0;
  for (int it = 1; it <= cfg.iterations; ++it) {
    int angle = rng.uniform_int(geom.cfg.n_angles);
    std::array<int, 3> origin;
    for (int a = 0; a < 3; ++a)
      origin[size_t(a)] = rng.uniform_int(lr_up.dims[size_t(a)] - crop_dims[size_t(a)] + 1);

    Projection x_hat = render(f, geom, angle, ropt);
    Projection x = compose_prediction(x_hat, targets.lr_proj.projections[size_t(angle)]);
    ReconLoss rl = loss_recon(targets.y.projections[size_t(angle)], x,
                              targets.y_hat.projections[size_t(angle)], x_hat, cfg.lambda1);

    VoxelVolume crop = voxelize(f, origin, crop_dims, spacing);
    for (int z = 0; z < crop_dims[2]; ++z)
      for (int yy = 0; yy < crop_dims[1]; ++yy)
        for (int xx = 0; xx < crop_dims[0]; ++xx)
          crop.at(xx, yy, z) += lr_up.at(origin[0] + xx, origin[1] + yy, origin[2] + z);
    TvLoss tv = loss_tv(crop);

    real total = rl.total + cfg.lambda2 * tv.value;
    if (!std::isfinite(total)) {
      std::ostringstream msg;
      msg << "non-finite loss at iteration " << it << " (recon " << rl.total << ", tv "
          << tv.value << ")";
      throw std::runtime_error(msg.str());
    }
    last_total = total;

    RenderGrads rg = render_backward(f, geom, angle, rl.grad, ropt);
    for (real& v : tv.grad.data) v *= cfg.lambda2;
    std::vector<GaussianGrad> vg = voxelize_backward(f, origin, crop_dims, spacing, tv.grad);
    for (size_t i = 0; i < rg.grads.size(); ++i) {
      GaussianGrad& g = rg.grads[i];
      const GaussianGrad& h = vg[i];
      g.position = g.position + h.position;
      g.log_scale = g.log_scale + h.log_scale;
      for (int c = 0; c < 4; ++c) g.rotation[c] += h.rotation[c];
      g.raw_density += h.raw_density;
    }

    stats.accumulate(rg.screen_grad, rg.grads);
    adam_step(f, rg.grads, st, cfg, it);

    if (it >= cfg.densify_from && it <= cfg.densify_until && it % cfg.densify_interval == 0) {
      DensifyReport rep = densify_and_prune(f, stats, st, cfg);
      result.control_totals.split += rep.split;
      result.control_totals.cloned += rep.cloned;
      result.control_totals.pruned += rep.pruned;
    }

    if (it % cfg.log_interval == 0 || it == cfg.iterations) {
      std::ostringstream line;
      line << "iter=" << it << " total=" << total << " l1=" << rl.l1 << " lres=" << rl.l_res
           << " dssim=" << rl.dssim << " tv=" << tv.value << " count=" << f.count()
           << " lr_pos=" << lr_at(cfg.lr_position, cfg, it)
           << " lr_dens=" << lr_at(cfg.lr_density, cfg, it)
           << " lr_scale=" << lr_at(cfg.lr_scale, cfg, it)
           << " lr_rot=" << lr_at(cfg.lr_rotation, cfg, it);
      result.log.push_back(line.str());
    }
    if (!checkpoint_dir.empty() && cfg.checkpoint_interval > 0 &&
        it % cfg.checkpoint_interval == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "/ckpt_%06d.gsf", it);
      write_field(f, checkpoint_dir + name);
    }
  }

  VoxelVolume full = voxelize(f, {0, 0, 0}, lr_up.dims, spacing);
  full.intensity_range = lr_up.intensity_range;
  for (size_t i = 0; i < full.data.size(); ++i) full.data[i] += lr_up.data[i];
  clamp_to_range(full);
  result.volume = std::move(full);
  result.final_loss = last_total;
  result.final_count = f.count();
  return result;
}

}  // namespace ctsr
