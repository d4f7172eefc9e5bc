#pragma once

// Shared scalar utilities: counter-based RNG, deterministic reductions,
// execution-mode switch for the OpenMP kernels.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace pi3d {

template <typename T>
concept scalar = std::floating_point<T>;

// ---------------------------------------------------------------------------
// Execution mode. Kernels run their loops under `omp parallel if(...)`, so
// serial and parallel execution share one code path and produce bitwise
// identical results for any thread count.

enum class exec_mode { serial, parallel };

inline exec_mode& exec_mode_ref() {
  static exec_mode mode = exec_mode::parallel;
  return mode;
}
inline void set_exec_mode(exec_mode m) { exec_mode_ref() = m; }
inline bool run_parallel() {
#if defined(_OPENMP)
  return exec_mode_ref() == exec_mode::parallel;
#else
  return false;
#endif
}

// Fixed chunk count for order-independent reductions. Partial sums are
// computed per chunk (in index order) and combined in chunk order, so the
// result does not depend on how many threads executed the chunks.
inline constexpr int kReduceChunks = 64;

// ---------------------------------------------------------------------------
// Counter-based RNG. Every random draw is a pure function of (seed, indices),
// which keeps data generation and training independent of thread count and
// iteration order.

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t hash_mix(uint64_t a, uint64_t b) {
  return splitmix64(a ^ (splitmix64(b) + 0x9e3779b97f4a7c15ull));
}
inline uint64_t hash_mix(uint64_t a, uint64_t b, uint64_t c) {
  return hash_mix(hash_mix(a, b), c);
}
inline uint64_t hash_mix(uint64_t a, uint64_t b, uint64_t c, uint64_t d) {
  return hash_mix(hash_mix(a, b, c), d);
}

// Uniform in [0, 1).
inline double u01(uint64_t h) {
  return double(h >> 11) * 0x1.0p-53;
}

// Standard normal via Box-Muller on two decorrelated hashes.
inline double normal01(uint64_t h) {
  double u1 = u01(splitmix64(h ^ 0x5bf0363546e17f1dull));
  double u2 = u01(splitmix64(h ^ 0xd6e8feb86659fd93ull));
  if (u1 <= 0) u1 = 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

// Small sequential stream on top of the counter hash.
struct rng_stream {
  uint64_t state = 0;
  uint64_t counter = 0;

  explicit rng_stream(uint64_t seed) : state(splitmix64(seed)) {}
  rng_stream(uint64_t seed, uint64_t stream) : state(hash_mix(seed, stream)) {}

  uint64_t next_u64() { return hash_mix(state, counter++); }
  double next_u01() { return u01(next_u64()); }
  double next_normal() { return normal01(next_u64()); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_u01(); }
  int64_t uniform_int(int64_t lo, int64_t hi) {  // inclusive bounds
    return lo + int64_t(next_u64() % uint64_t(hi - lo + 1));
  }
};

// ---------------------------------------------------------------------------
// Deterministic sum over an index range: per-chunk partials in index order,
// combined in chunk order. Identical for any thread count.

template <scalar T, typename F>
T deterministic_sum(int64_t n, F&& term) {
  if (n <= 0) return T(0);
  T partial[kReduceChunks] = {};
  const int64_t chunk = (n + kReduceChunks - 1) / kReduceChunks;
#pragma omp parallel for schedule(static) if (run_parallel())
  for (int c = 0; c < kReduceChunks; ++c) {
    const int64_t lo = int64_t(c) * chunk;
    const int64_t hi = std::min(n, lo + chunk);
    T acc = 0;
    for (int64_t i = lo; i < hi; ++i) acc += term(i);
    partial[c] = acc;
  }
  T total = 0;
  for (int c = 0; c < kReduceChunks; ++c) total += partial[c];
  return total;
}

// ---------------------------------------------------------------------------
// Tiny 3-vector used by the geometry code (double precision throughout the
// oracle; templated consumers convert at the boundary).

struct vec3 {
  double x = 0, y = 0, z = 0;

  vec3() = default;
  vec3(double x_, double y_, double z_) : x(x_), y(y_), z(z_) {}

  vec3 operator+(const vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  vec3 operator-(const vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  vec3 operator-() const { return {-x, -y, -z}; }
  double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
};

inline double dot(const vec3& a, const vec3& b) {
  return a.x * b.x + a.y * b.y + a.z * b.z;
}
inline vec3 cross(const vec3& a, const vec3& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(const vec3& a) { return std::sqrt(dot(a, a)); }
inline vec3 normalize(const vec3& a) {
  double n = norm(a);
  return n > 0 ? a * (1.0 / n) : a;
}

struct vec3f {
  float r = 0, g = 0, b = 0;
};

template <typename T>
T clamp(T v, T lo, T hi) {
  return v < lo ? lo : (v > hi ? hi : v);
}

// ---------------------------------------------------------------------------

inline void check(bool ok, const std::string& msg) {
  if (!ok) throw std::runtime_error(msg);
}

}  // namespace pi3d
