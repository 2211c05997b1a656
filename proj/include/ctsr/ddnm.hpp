#pragma once

// Zero-shot projection super-resolution: DDIM sampling with null-space data
// consistency against a mean-pooling degradation, adaptive start-step
// selection, and pluggable denoisers (analytic oracles or a child process).

#include <fcntl.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ctsr/common.hpp"
#include "ctsr/projection.hpp"
#include "ctsr/volume.hpp"

namespace ctsr {

// ---------------------------------------------------------------------------
// Noise schedule

struct NoiseSchedule {
  int T = 1000;
  std::vector<real> betas;           // betas[t-1], t in [1, T]
  std::vector<real> alphas_cumprod;  // abar[t-1]
  int ddim_steps = 50;
  real ddim_eta = 0;

  // t = 0 is the clean endpoint with abar = 1 exactly
  real alpha_bar(int t) const {
    CTSR_CHECK(t >= 0 && t <= T, "schedule time out of range");
    return t == 0 ? real(1) : alphas_cumprod[size_t(t - 1)];
  }
};

inline NoiseSchedule make_noise_schedule(int T = 1000, real beta_start = 1e-4,
                                         real beta_end = 0.02, int ddim_steps = 50) {
  CTSR_CHECK(T >= 2, "schedule needs at least two steps");
  CTSR_CHECK(beta_start > 0 && beta_start <= beta_end && beta_end < 1,
             "betas must satisfy 0 < start <= end < 1");
  CTSR_CHECK(ddim_steps >= 1 && ddim_steps <= T, "ddim_steps must lie in [1, T]");
  NoiseSchedule s;
  s.T = T;
  s.ddim_steps = ddim_steps;
  s.betas.resize(size_t(T));
  s.alphas_cumprod.resize(size_t(T));
  real prod = 1;
  for (int i = 0; i < T; ++i) {
    s.betas[size_t(i)] = beta_start + (beta_end - beta_start) * real(i) / real(T - 1);
    prod *= 1 - s.betas[size_t(i)];
    s.alphas_cumprod[size_t(i)] = prod;
    CTSR_CHECK(prod > 0 && prod <= 1, "alpha_bar left (0,1]");
    if (i > 0)
      CTSR_CHECK(s.alphas_cumprod[size_t(i)] < s.alphas_cumprod[size_t(i - 1)],
                 "alpha_bar must decrease strictly");
  }
  return s;
}

// evenly spaced sampling times {T/steps, 2T/steps, ..., T}
inline std::vector<int> ddim_time_grid(const NoiseSchedule& s) {
  std::vector<int> grid;
  grid.reserve(size_t(s.ddim_steps));
  for (int i = 1; i <= s.ddim_steps; ++i) {
    int t = int(std::llround(real(i) * s.T / s.ddim_steps));
    t = std::clamp(t, 1, s.T);
    if (grid.empty() || t > grid.back()) grid.push_back(t);
  }
  return grid;
}

// ---------------------------------------------------------------------------
// Degradation operator: non-overlapping mean pooling and its exact
// pseudo-inverse (block replication)

struct DegradationOp {
  int factor = 4;
  std::array<int, 2> hr_dims{0, 0};
};

namespace ddnm_detail {

// pairwise reduction: sums of equal values are exact for power-of-two counts,
// which makes A(A_pinv(y)) == y bitwise for the factors in use
inline real pairwise_sum(std::vector<real>& buf) {
  size_t n = buf.size();
  while (n > 1) {
    size_t half = n / 2;
    for (size_t i = 0; i < half; ++i) buf[i] = buf[2 * i] + buf[2 * i + 1];
    if (n % 2) buf[half] = buf[n - 1];
    n = half + (n % 2);
  }
  return buf[0];
}

}  // namespace ddnm_detail

inline Projection apply_A(const Projection& x, const DegradationOp& op) {
  CTSR_CHECK(x.dims[0] == op.hr_dims[0] && x.dims[1] == op.hr_dims[1],
             "apply_A input is not HR-sized");
  int f = op.factor;
  Projection y = Projection::zeros({op.hr_dims[0] / f, op.hr_dims[1] / f}, x.angle_index);
  std::vector<real> block(size_t(f) * size_t(f));
  real inv = 1 / real(f * f);
  for (int v = 0; v < y.dims[1]; ++v)
    for (int u = 0; u < y.dims[0]; ++u) {
      size_t k = 0;
      for (int j = 0; j < f; ++j)
        for (int i = 0; i < f; ++i) block[k++] = x.at(u * f + i, v * f + j);
      y.at(u, v) = ddnm_detail::pairwise_sum(block) * inv;
    }
  return y;
}

inline Projection apply_A_pinv(const Projection& y, const DegradationOp& op) {
  int f = op.factor;
  CTSR_CHECK(y.dims[0] * f == op.hr_dims[0] && y.dims[1] * f == op.hr_dims[1],
             "apply_A_pinv input is not LR-sized");
  Projection x = Projection::zeros(op.hr_dims, y.angle_index);
  for (int v = 0; v < y.dims[1]; ++v)
    for (int u = 0; u < y.dims[0]; ++u) {
      real val = y.at(u, v);
      for (int j = 0; j < f; ++j)
        for (int i = 0; i < f; ++i) x.at(u * f + i, v * f + j) = val;
    }
  return x;
}

inline DegradationOp make_degradation(int factor, std::array<int, 2> hr_dims) {
  CTSR_CHECK(factor >= 1, "degradation factor must be >= 1");
  CTSR_CHECK(hr_dims[0] > 0 && hr_dims[1] > 0, "degradation dims must be positive");
  CTSR_CHECK(hr_dims[0] % factor == 0 && hr_dims[1] % factor == 0,
             "HR dims must be divisible by the factor");
  DegradationOp op{factor, hr_dims};
  // probe the pseudo-inverse identity A(A_pinv(y)) = y at construction
  Rng rng(0x5eed);
  Projection probe = Projection::zeros({hr_dims[0] / factor, hr_dims[1] / factor});
  for (real& v : probe.data) v = rng.uniform(-1, 1);
  Projection round = apply_A(apply_A_pinv(probe, op), op);
  for (size_t i = 0; i < probe.data.size(); ++i)
    CTSR_CHECK(std::abs(round.data[i] - probe.data[i]) <= 1e-12,
               "pooling pseudo-inverse probe failed");
  return op;
}

// ---------------------------------------------------------------------------
// Null-space data consistency

// A_pinv(y) + (I - A_pinv A) x0t, arranged so the correction cancels bitwise
// when y == A(x0t)
inline Projection ddnm_project(const Projection& x0t, const Projection& y,
                               const DegradationOp& op) {
  Projection ax = apply_A(x0t, op);
  CTSR_CHECK(y.dims == ax.dims, "ddnm_project: y is not LR-sized");
  Projection up_y = apply_A_pinv(y, op);
  Projection up_ax = apply_A_pinv(ax, op);
  Projection out = x0t;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += up_y.data[i] - up_ax.data[i];
  return out;
}

// Scaled correction for noisy observations. sigma_t is the noise level of
// the diffusion state at step t, sqrt(1 - abar_t); the operator's singular
// scale is 1 for mean pooling with this pseudo-inverse. At sigma_y = 0 the
// unscaled projection is returned through the identical code path.
inline Projection ddnm_plus_project(const Projection& x0t, const Projection& y,
                                    const DegradationOp& op, real sigma_y, int t,
                                    const NoiseSchedule& schedule) {
  CTSR_CHECK(sigma_y >= 0, "sigma_y must be >= 0");
  if (sigma_y == 0) return ddnm_project(x0t, y, op);
  real ab = schedule.alpha_bar(t);
  real sigma_t = std::sqrt(1 - ab);
  real a_t = std::sqrt(ab);
  real scale = std::min(real(1), sigma_t / (a_t * sigma_y));
  Projection ax = apply_A(x0t, op);
  CTSR_CHECK(y.dims == ax.dims, "ddnm_plus_project: y is not LR-sized");
  Projection up_y = apply_A_pinv(y, op);
  Projection up_ax = apply_A_pinv(ax, op);
  Projection out = x0t;
  for (size_t i = 0; i < out.data.size(); ++i)
    out.data[i] += scale * (up_y.data[i] - up_ax.data[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Denoisers

class Denoiser {
 public:
  virtual ~Denoiser() = default;
  // given the noisy state x_t at time t, predict the clean image x_{0|t}
  virtual Projection denoise(const Projection& x_t, int t) = 0;
};

// Returns a fixed clean image regardless of the state: the idealized prior.
class OracleDenoiser : public Denoiser {
 public:
  explicit OracleDenoiser(Projection clean) : clean_(std::move(clean)) {}
  Projection denoise(const Projection& x_t, int) override {
    CTSR_CHECK(x_t.dims == clean_.dims, "oracle denoiser dims mismatch");
    return clean_;
  }

 private:
  Projection clean_;
};

// Rescales the state to an unbiased estimate, blurs it, and shrinks toward
// the image mean by the Wiener factor s^2 / (s^2 + sigma_rel^2).
class ShrinkageDenoiser : public Denoiser {
 public:
  ShrinkageDenoiser(NoiseSchedule schedule, real signal_std = 0.5, real blur_px = 1.5)
      : schedule_(std::move(schedule)), signal_std_(signal_std), blur_px_(blur_px) {
    CTSR_CHECK(signal_std_ > 0, "signal std must be positive");
  }

  Projection denoise(const Projection& x_t, int t) override {
    real ab = schedule_.alpha_bar(t);
    real sqrt_ab = std::sqrt(ab);
    Projection est = x_t;
    for (real& v : est.data) v /= sqrt_ab;
    if (blur_px_ > 0) {
      std::array<int, 3> d = {x_t.dims[0], x_t.dims[1], 1}, nd;
      std::vector<real> buf = est.data;
      for (int axis = 0; axis < 2; ++axis)
        buf = apply_axis_rows(buf, d, axis, gaussian_blur_rows(d[size_t(axis)], blur_px_), nd);
      est.data = std::move(buf);
    }
    real mean = 0;
    for (real v : est.data) mean += v;
    mean /= real(est.data.size());
    real rel_var = (1 - ab) / ab;
    real w = signal_std_ * signal_std_ / (signal_std_ * signal_std_ + rel_var);
    for (real& v : est.data) v = mean + w * (v - mean);
    return est;
  }

 private:
  NoiseSchedule schedule_;
  real signal_std_;
  real blur_px_;
};

// Child-process denoiser speaking length-implied little-endian frames:
// request int32 t, int32 width, int32 height, then width*height float32;
// response width*height float32.
class ExternalDenoiser : public Denoiser {
 public:
  explicit ExternalDenoiser(std::string path) : path_(std::move(path)) {
    CTSR_CHECK(::access(path_.c_str(), X_OK) == 0,
               "external denoiser binary not found or not executable");
  }
  ExternalDenoiser(const ExternalDenoiser&) = delete;
  ExternalDenoiser& operator=(const ExternalDenoiser&) = delete;

  ~ExternalDenoiser() override {
    if (to_child_ >= 0) ::close(to_child_);
    if (from_child_ >= 0) ::close(from_child_);
    if (pid_ > 0) ::waitpid(pid_, nullptr, 0);
  }

  Projection denoise(const Projection& x_t, int t) override {
    if (pid_ < 0) spawn();
    int32_t header[3] = {int32_t(t), int32_t(x_t.dims[0]), int32_t(x_t.dims[1])};
    std::vector<float> payload(x_t.data.size());
    for (size_t i = 0; i < payload.size(); ++i) payload[i] = float(x_t.data[i]);
    write_all(header, sizeof header);
    write_all(payload.data(), payload.size() * sizeof(float));
    std::vector<float> reply(payload.size());
    read_all(reply.data(), reply.size() * sizeof(float));
    Projection out = Projection::zeros(x_t.dims, x_t.angle_index);
    for (size_t i = 0; i < reply.size(); ++i) out.data[i] = real(reply[i]);
    return out;
  }

 private:
  void spawn() {
    int to_pipe[2], from_pipe[2];
    CTSR_CHECK(::pipe(to_pipe) == 0 && ::pipe(from_pipe) == 0,
               "failed to create denoiser pipes");
    pid_ = ::fork();
    CTSR_CHECK(pid_ >= 0, "failed to fork denoiser process");
    if (pid_ == 0) {
      ::dup2(to_pipe[0], STDIN_FILENO);
      ::dup2(from_pipe[1], STDOUT_FILENO);
      ::close(to_pipe[0]);
      ::close(to_pipe[1]);
      ::close(from_pipe[0]);
      ::close(from_pipe[1]);
      ::execl(path_.c_str(), path_.c_str(), (char*)nullptr);
      ::_exit(127);
    }
    ::close(to_pipe[0]);
    ::close(from_pipe[1]);
    to_child_ = to_pipe[1];
    from_child_ = from_pipe[0];
  }

  void write_all(const void* buf, size_t n) {
    const char* p = static_cast<const char*>(buf);
    while (n > 0) {
      ssize_t k = ::write(to_child_, p, n);
      if (k <= 0) throw std::runtime_error("external denoiser pipe write failed");
      p += k;
      n -= size_t(k);
    }
  }
  void read_all(void* buf, size_t n) {
    char* p = static_cast<char*>(buf);
    while (n > 0) {
      ssize_t k = ::read(from_child_, p, n);
      if (k <= 0) throw std::runtime_error("external denoiser closed the stream mid-frame");
      p += k;
      n -= size_t(k);
    }
  }

  std::string path_;
  pid_t pid_ = -1;
  int to_child_ = -1;
  int from_child_ = -1;
};

// ---------------------------------------------------------------------------
// Sampling

inline Projection bilinear_upsample(const Projection& p, int factor) {
  CTSR_CHECK(factor >= 1, "upsample factor must be >= 1");
  std::array<int, 3> d = {p.dims[0], p.dims[1], 1}, nd;
  std::vector<real> buf = p.data;
  for (int axis = 0; axis < 2; ++axis) {
    buf = apply_axis_rows(buf, d, axis, linear_upsample_rows(d[size_t(axis)], factor), nd);
    d = nd;
  }
  Projection out = Projection::zeros({d[0], d[1]}, p.angle_index);
  out.data = std::move(buf);
  return out;
}

// x_t = z * sqrt(1 - abar_t) + y_up * sqrt(abar_t), z standard normal
inline Projection pas_init(const Projection& y_up, int t, const NoiseSchedule& schedule,
                           uint64_t seed) {
  CTSR_CHECK(t >= 1 && t <= schedule.T, "pas_init time out of range");
  real ab = schedule.alpha_bar(t);
  real s_noise = std::sqrt(1 - ab), s_signal = std::sqrt(ab);
  Rng rng(seed);
  Projection x = Projection::zeros(y_up.dims, y_up.angle_index);
  for (size_t i = 0; i < x.data.size(); ++i)
    x.data[i] = rng.normal() * s_noise + y_up.data[i] * s_signal;
  return x;
}

struct PasConfig {
  real tau_thr = 7;  // 7 for 4x, 11 for 8x
  std::vector<int> candidates = {1000, 500, 300, 100};
  uint64_t seed = 0;
  enum class Norm { Total, Rms } norm = Norm::Total;
};

struct PasChoice {
  int t_start = 0;
  real delta = 0;
  bool fallback = false;
};

// L2 deviation of the data-consistent estimate from the upsampled input for
// every candidate start step; one shared noise draw across candidates.
inline std::vector<std::pair<int, real>> pas_deltas(const Projection& y, const DegradationOp& op,
                                                    Denoiser& denoiser, const PasConfig& pas,
                                                    const NoiseSchedule& schedule) {
  CTSR_CHECK(!pas.candidates.empty(), "PAS needs at least one candidate step");
  CTSR_CHECK(pas.tau_thr > 0, "tau threshold must be positive");
  Projection y_up = bilinear_upsample(y, op.factor);
  std::vector<std::pair<int, real>> out;
  out.reserve(pas.candidates.size());
  for (int t : pas.candidates) {
    CTSR_CHECK(t >= 1 && t <= schedule.T, "PAS candidate out of range");
    Projection x_t = pas_init(y_up, t, schedule, pas.seed);
    Projection x0 = denoiser.denoise(x_t, t);
    Projection xhat = ddnm_project(x0, y, op);
    real sq = 0;
    for (size_t i = 0; i < xhat.data.size(); ++i) {
      real d = xhat.data[i] - y_up.data[i];
      sq += d * d;
    }
    real delta = std::sqrt(pas.norm == PasConfig::Norm::Rms ? sq / real(xhat.data.size()) : sq);
    out.push_back({t, delta});
  }
  return out;
}

// largest candidate whose deviation stays under the threshold; if none
// qualifies, the smallest candidate with the fallback flag raised
inline PasChoice pas_pick(const std::vector<std::pair<int, real>>& deltas, real tau) {
  CTSR_CHECK(!deltas.empty(), "PAS needs at least one candidate step");
  PasChoice best;
  bool found = false;
  int smallest_t = deltas.front().first;
  real smallest_delta = deltas.front().second;
  for (auto [t, d] : deltas) {
    if (t < smallest_t) {
      smallest_t = t;
      smallest_delta = d;
    }
    if (d <= tau && (!found || t > best.t_start)) {
      best.t_start = t;
      best.delta = d;
      found = true;
    }
  }
  if (!found) {
    best.t_start = smallest_t;
    best.delta = smallest_delta;
    best.fallback = true;
  }
  return best;
}

inline PasChoice pas_select_tstart(const Projection& y, const DegradationOp& op,
                                   Denoiser& denoiser, const PasConfig& pas,
                                   const NoiseSchedule& schedule) {
  return pas_pick(pas_deltas(y, op, denoiser, pas, schedule), pas.tau_thr);
}

// DDIM trajectory with per-step data consistency, eta = 0. Starts at t_start
// from the noised bilinear upsample, ends at the clean endpoint (abar = 1),
// and clips the output to non-negative line integrals. The unclipped result
// (which satisfies A x = y exactly at sigma_y = 0) is available through
// pre_clip.
inline Projection ddim_ddnm_sample(const Projection& y, const DegradationOp& op,
                                   Denoiser& denoiser, const NoiseSchedule& schedule,
                                   real sigma_y, int t_start, uint64_t seed,
                                   Projection* pre_clip = nullptr) {
  CTSR_CHECK(t_start >= 1 && t_start <= schedule.T, "t_start out of range");
  CTSR_CHECK(schedule.ddim_eta == 0, "only deterministic (eta = 0) sampling is implemented");
  Projection y_up = bilinear_upsample(y, op.factor);
  Projection x = pas_init(y_up, t_start, schedule, seed);

  std::vector<int> times;
  times.push_back(t_start);
  std::vector<int> grid = ddim_time_grid(schedule);
  for (auto it = grid.rbegin(); it != grid.rend(); ++it)
    if (*it < t_start) times.push_back(*it);
  times.push_back(0);

  for (size_t k = 0; k + 1 < times.size(); ++k) {
    int t = times[k], t_next = times[k + 1];
    Projection x0 = denoiser.denoise(x, t);
    CTSR_CHECK(x0.dims == x.dims, "denoiser changed the image dims");
    for (real v : x0.data)
      if (!std::isfinite(v)) {
        std::ostringstream msg;
        msg << "denoiser produced a non-finite value at t=" << t;
        throw std::runtime_error(msg.str());
      }
    Projection xhat = sigma_y > 0 ? ddnm_plus_project(x0, y, op, sigma_y, t, schedule)
                                  : ddnm_project(x0, y, op);
    real ab_t = schedule.alpha_bar(t), ab_n = schedule.alpha_bar(t_next);
    real c_signal = std::sqrt(ab_n), c_noise = std::sqrt(1 - ab_n);
    real a_t = std::sqrt(ab_t), s_t = std::sqrt(1 - ab_t);
    for (size_t i = 0; i < x.data.size(); ++i) {
      real eps = (x.data[i] - a_t * xhat.data[i]) / s_t;
      x.data[i] = c_signal * xhat.data[i] + c_noise * eps;
      if (!std::isfinite(x.data[i])) {
        std::ostringstream msg;
        msg << "non-finite sample state stepping from t=" << t << " to t=" << t_next;
        throw std::runtime_error(msg.str());
      }
    }
  }
  if (pre_clip) *pre_clip = x;
  for (real& v : x.data) v = std::max<real>(v, 0);
  return x;
}

// ---------------------------------------------------------------------------
// Set-level driver

struct SrOutcome {
  Projection image;
  PasChoice choice;
};

inline SrOutcome sr_one(const Projection& y, const DegradationOp& op, Denoiser& denoiser,
                        const PasConfig& pas, const NoiseSchedule& schedule, real sigma_y,
                        uint64_t seed) {
  PasConfig pc = pas;
  pc.seed = seed;
  SrOutcome out;
  out.choice = pas_select_tstart(y, op, denoiser, pc, schedule);
  out.image = ddim_ddnm_sample(y, op, denoiser, schedule, sigma_y, out.choice.t_start, seed);
  return out;
}

// Upsamples every projection of an LR set; the result carries the enlarged
// detector geometry and the per-angle start-step records.
inline ProjectionSet sr_projection_set(const ProjectionSet& lr_set, const DegradationOp& op,
                                       Denoiser& denoiser, const PasConfig& pas,
                                       const NoiseSchedule& schedule, real sigma_y) {
  const GeometryConfig& lr_cfg = lr_set.geometry.cfg;
  CTSR_CHECK(lr_cfg.detector_dims[0] * op.factor == op.hr_dims[0] &&
                 lr_cfg.detector_dims[1] * op.factor == op.hr_dims[1],
             "degradation operator does not match the LR detector");
  GeometryConfig hr_cfg = lr_cfg;
  hr_cfg.detector_dims = op.hr_dims;
  hr_cfg.detector_spacing = {lr_cfg.detector_spacing[0] / op.factor,
                             lr_cfg.detector_spacing[1] / op.factor};

  ProjectionSet out;
  out.geometry = make_geometry(hr_cfg);
  int n = int(lr_set.projections.size());
  out.projections.resize(size_t(n));
  out.t_start.assign(size_t(n), 0);
  out.pas_delta.assign(size_t(n), 0);
  out.pas_fallback.assign(size_t(n), 0);
  for (int i = 0; i < n; ++i) {
    try {
      uint64_t seed_i = pas.seed ^ uint64_t(i);
      SrOutcome one = sr_one(lr_set.projections[size_t(i)], op, denoiser, pas, schedule,
                             sigma_y, seed_i);
      one.image.angle_index = lr_set.projections[size_t(i)].angle_index;
      out.projections[size_t(i)] = std::move(one.image);
      out.t_start[size_t(i)] = one.choice.t_start;
      out.pas_delta[size_t(i)] = one.choice.delta;
      out.pas_fallback[size_t(i)] = one.choice.fallback ? 1 : 0;
    } catch (const std::exception& e) {
      std::ostringstream msg;
      msg << "projection SR failed at angle " << i << ": " << e.what();
      throw std::runtime_error(msg.str());
    }
  }
  return out;
}

}  // namespace ctsr
