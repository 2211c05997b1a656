#pragma once

// Shared basics: scalar type, small vector/matrix helpers, deterministic RNG,
// FNV-1a hashing and error macros used across the library.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace ctsr {

using real = double;

constexpr real kPi = 3.14159265358979323846;

// Validation failures (bad arguments, malformed files/configs) throw
// invalid_argument; unrecoverable runtime conditions throw runtime_error.
// The CLI maps them to exit codes 2 and 1 respectively.
#define CTSR_CHECK(cond, msg)                                  \
  do {                                                         \
    if (!(cond)) throw std::invalid_argument(std::string(msg)); \
  } while (0)

#define CTSR_RUNTIME_CHECK(cond, msg)                        \
  do {                                                       \
    if (!(cond)) throw std::runtime_error(std::string(msg)); \
  } while (0)

struct Vec2 {
  real x = 0, y = 0;
};

inline Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
inline Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
inline Vec2 operator*(real s, Vec2 a) { return {s * a.x, s * a.y}; }
inline real norm(Vec2 a) { return std::sqrt(a.x * a.x + a.y * a.y); }

struct Vec3 {
  real x = 0, y = 0, z = 0;

  real& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
  real operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
};

inline Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
inline Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
inline Vec3 operator*(real s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }
inline Vec3& operator+=(Vec3& a, Vec3 b) { a = a + b; return a; }
inline real dot(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline real norm(Vec3 a) { return std::sqrt(dot(a, a)); }
inline Vec3 normalized(Vec3 a) {
  real n = norm(a);
  return n > 0 ? (real(1) / n) * a : a;
}
inline Vec3 cross(Vec3 a, Vec3 b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}

struct Vec4 {
  real w = 0, x = 0, y = 0, z = 0;

  real& operator[](int i) { return i == 0 ? w : (i == 1 ? x : (i == 2 ? y : z)); }
  real operator[](int i) const { return i == 0 ? w : (i == 1 ? x : (i == 2 ? y : z)); }
};

inline Vec4 operator+(Vec4 a, Vec4 b) { return {a.w + b.w, a.x + b.x, a.y + b.y, a.z + b.z}; }
inline Vec4 operator*(real s, Vec4 a) { return {s * a.w, s * a.x, s * a.y, s * a.z}; }
inline Vec4& operator+=(Vec4& a, Vec4 b) { a = a + b; return a; }

// Row-major 3x3.
struct Mat3 {
  real m[9] = {1, 0, 0, 0, 1, 0, 0, 0, 1};

  real& operator()(int r, int c) { return m[3 * r + c]; }
  real operator()(int r, int c) const { return m[3 * r + c]; }

  static Mat3 zero() {
    Mat3 a;
    for (real& v : a.m) v = 0;
    return a;
  }
};

inline Vec3 mul(const Mat3& a, Vec3 v) {
  return {a(0, 0) * v.x + a(0, 1) * v.y + a(0, 2) * v.z,
          a(1, 0) * v.x + a(1, 1) * v.y + a(1, 2) * v.z,
          a(2, 0) * v.x + a(2, 1) * v.y + a(2, 2) * v.z};
}

inline Vec3 mul_t(const Mat3& a, Vec3 v) {  // transpose(a) * v
  return {a(0, 0) * v.x + a(1, 0) * v.y + a(2, 0) * v.z,
          a(0, 1) * v.x + a(1, 1) * v.y + a(2, 1) * v.z,
          a(0, 2) * v.x + a(1, 2) * v.y + a(2, 2) * v.z};
}

inline Mat3 mul(const Mat3& a, const Mat3& b) {
  Mat3 c = Mat3::zero();
  for (int r = 0; r < 3; ++r)
    for (int k = 0; k < 3; ++k)
      for (int col = 0; col < 3; ++col) c(r, col) += a(r, k) * b(k, col);
  return c;
}

inline Mat3 transposed(const Mat3& a) {
  Mat3 t;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) t(r, c) = a(c, r);
  return t;
}

// Unit quaternion (w, x, y, z) to rotation matrix.
struct Quat {
  real w = 1, x = 0, y = 0, z = 0;

  real& operator[](int i) { return i == 0 ? w : (i == 1 ? x : (i == 2 ? y : z)); }
  real operator[](int i) const { return i == 0 ? w : (i == 1 ? x : (i == 2 ? y : z)); }
};

inline real norm(Quat q) { return std::sqrt(q.w * q.w + q.x * q.x + q.y * q.y + q.z * q.z); }

inline Quat normalized(Quat q) {
  real n = norm(q);
  CTSR_RUNTIME_CHECK(n > 0, "quaternion norm is zero");
  return {q.w / n, q.x / n, q.y / n, q.z / n};
}

inline Mat3 quat_to_rot(Quat q) {
  Quat u = normalized(q);
  real w = u.w, x = u.x, y = u.y, z = u.z;
  Mat3 r;
  r(0, 0) = 1 - 2 * (y * y + z * z);
  r(0, 1) = 2 * (x * y - w * z);
  r(0, 2) = 2 * (x * z + w * y);
  r(1, 0) = 2 * (x * y + w * z);
  r(1, 1) = 1 - 2 * (x * x + z * z);
  r(1, 2) = 2 * (y * z - w * x);
  r(2, 0) = 2 * (x * z - w * y);
  r(2, 1) = 2 * (y * z + w * x);
  r(2, 2) = 1 - 2 * (x * x + y * y);
  return r;
}

// dR/d(unit quaternion components); caller chains through the normalization
// Jacobian (I - u u^T)/|q| to get derivatives wrt the stored quaternion.
inline std::array<Mat3, 4> quat_rot_jacobian(Quat u) {
  real w = u.w, x = u.x, y = u.y, z = u.z;
  std::array<Mat3, 4> d;
  d[0].m[0] = 0;      d[0].m[1] = -2 * z; d[0].m[2] = 2 * y;
  d[0].m[3] = 2 * z;  d[0].m[4] = 0;      d[0].m[5] = -2 * x;
  d[0].m[6] = -2 * y; d[0].m[7] = 2 * x;  d[0].m[8] = 0;

  d[1].m[0] = 0;      d[1].m[1] = 2 * y;  d[1].m[2] = 2 * z;
  d[1].m[3] = 2 * y;  d[1].m[4] = -4 * x; d[1].m[5] = -2 * w;
  d[1].m[6] = 2 * z;  d[1].m[7] = 2 * w;  d[1].m[8] = -4 * x;

  d[2].m[0] = -4 * y; d[2].m[1] = 2 * x;  d[2].m[2] = 2 * w;
  d[2].m[3] = 2 * x;  d[2].m[4] = 0;      d[2].m[5] = 2 * z;
  d[2].m[6] = -2 * w; d[2].m[7] = 2 * z;  d[2].m[8] = -4 * y;

  d[3].m[0] = -4 * z; d[3].m[1] = -2 * w; d[3].m[2] = 2 * x;
  d[3].m[3] = 2 * w;  d[3].m[4] = -4 * z; d[3].m[5] = 2 * y;
  d[3].m[6] = 2 * x;  d[3].m[7] = 2 * y;  d[3].m[8] = 0;
  return d;
}

// Deterministic RNG. Both the engine and the uniform/normal draws are
// implemented here instead of <random> distributions so that streams are
// bit-identical across standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(split_seed(seed)) {}

  uint64_t next_u64() {
    // xorshift* step on a 64-bit state; period and quality are plenty for
    // sampling positions/noise and keep the header self-contained.
    uint64_t x = state_;
    x ^= x >> 12;
    x ^= x << 25;
    x ^= x >> 27;
    state_ = x;
    return x * 0x2545F4914F6CDD1DULL;
  }

  // Uniform in [0, 1).
  real uniform() { return real(next_u64() >> 11) * 0x1.0p-53; }

  real uniform(real lo, real hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  int uniform_int(int n) {
    CTSR_CHECK(n > 0, "uniform_int needs n > 0");
    return int(next_u64() % uint64_t(n));
  }

  // Standard normal via Box-Muller; one spare value is cached.
  real normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    real u1 = uniform(), u2 = uniform();
    while (u1 <= 0) u1 = uniform();
    real r = std::sqrt(-2 * std::log(u1));
    real a = 2 * kPi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

 private:
  static uint64_t split_seed(uint64_t s) {
    // splitmix64 scramble so that small seeds give well-mixed states
    uint64_t z = s + 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    z = z ^ (z >> 31);
    return z ? z : 0x853C49E6748FEA9BULL;
  }

  uint64_t state_;
  bool has_spare_ = false;
  real spare_ = 0;
};

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xCBF29CE484222325ULL) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

inline std::string hash_hex(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace ctsr
