#pragma once

// Variance-preserving cosine noise schedule and the v-parameterization
// algebra: z_t = alpha_t x0 + sigma_t eps, v = alpha_t eps - sigma_t x0,
// Min-SNR loss weights, the uniform-stride sampling sub-schedule, and the
// ancestral (small-variance) DDPM transition coefficients.

#include <cmath>
#include <vector>

#include "common.h"

namespace pi3d {

template <scalar T>
struct noise_schedule {
  int T_steps = 0;
  std::vector<T> alpha_v, sigma_v;  // index t-1 for t in [1, T]

  T alpha(int t) const {
    check(t >= 1 && t <= T_steps, "timestep out of range");
    return alpha_v[t - 1];
  }
  T sigma(int t) const {
    check(t >= 1 && t <= T_steps, "timestep out of range");
    return sigma_v[t - 1];
  }
  T snr(int t) const {
    T a = alpha(t), s = sigma(t);
    return (a * a) / (s * s);
  }
};

template <scalar T>
noise_schedule<T> make_schedule(int steps) {
  check(steps >= 2, "schedule needs at least 2 steps");
  noise_schedule<T> sch;
  sch.T_steps = steps;
  sch.alpha_v.resize(steps);
  sch.sigma_v.resize(steps);
  const double s = 0.008;
  auto f = [&](double u) {
    double c = std::cos((u + s) / (1 + s) * (3.14159265358979323846 / 2));
    return c * c;
  };
  const double f0 = f(0.0);
  for (int t = 1; t <= steps; ++t) {
    double abar = f(double(t) / steps) / f0;
    abar = std::min(1.0 - 1e-8, std::max(1e-8, abar));
    sch.alpha_v[t - 1] = T(std::sqrt(abar));
    sch.sigma_v[t - 1] = T(std::sqrt(1.0 - abar));
  }
  return sch;
}

// ---------------------------------------------------------------------------
// Scalar v-parameterization identities

template <scalar T>
T noised_of(T x0, T eps, T a, T s) {
  return a * x0 + s * eps;
}

template <scalar T>
T v_of(T x0, T eps, T a, T s) {
  return a * eps - s * x0;
}

template <scalar T>
T x0_of(T z, T v, T a, T s) {
  return a * z - s * v;
}

template <scalar T>
T eps_of(T z, T v, T a, T s) {
  return s * z + a * v;
}

// ---------------------------------------------------------------------------
// Vector wrappers over a schedule timestep

template <scalar T>
std::vector<T> add_noise(const std::vector<T>& x0, const std::vector<T>& eps,
                         int t, const noise_schedule<T>& sch) {
  check(x0.size() == eps.size(), "shape mismatch in add_noise");
  T a = sch.alpha(t), s = sch.sigma(t);
  std::vector<T> z(x0.size());
  for (size_t i = 0; i < z.size(); ++i) z[i] = noised_of(x0[i], eps[i], a, s);
  return z;
}

template <scalar T>
std::vector<T> v_target(const std::vector<T>& x0, const std::vector<T>& eps,
                        int t, const noise_schedule<T>& sch) {
  check(x0.size() == eps.size(), "shape mismatch in v_target");
  T a = sch.alpha(t), s = sch.sigma(t);
  std::vector<T> v(x0.size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = v_of(x0[i], eps[i], a, s);
  return v;
}

// Min-SNR weight in v-space: min(snr, gamma) / (snr + 1).
template <scalar T>
T loss_weight(int t, const noise_schedule<T>& sch, T gamma) {
  check(gamma > T(0), "gamma must be positive");
  T snr = sch.snr(t);
  return std::min(snr, gamma) / (snr + T(1));
}

// Classifier-free guidance combination; s = 1 is bitwise the conditional
// branch (the interpolation form would round).
template <scalar T>
T cfg_combine(T v_uncond, T v_cond, T s) {
  if (s == T(1)) return v_cond;
  if (s == T(0)) return v_uncond;
  return v_uncond + s * (v_cond - v_uncond);
}

// Descending uniform-stride sub-schedule from T to 1 inclusive.
inline std::vector<int> sample_timesteps(int steps, int T_steps) {
  check(steps >= 1 && steps <= T_steps, "steps must lie in [1, T]");
  std::vector<int> ts(steps);
  if (steps == 1) {
    ts[0] = T_steps;
    return ts;
  }
  for (int i = 0; i < steps; ++i) {
    double u = double(steps - 1 - i) / double(steps - 1);
    ts[i] = int(std::lround(1.0 + (T_steps - 1) * u));
  }
  for (int i = 1; i < steps; ++i) check(ts[i] < ts[i - 1], "stride collision");
  return ts;
}

// Ancestral transition t -> s (s < t) with the lower-bound posterior
// variance. mean = c_z * z_t + c_x0 * x0_hat, then add noise_std * eps.
template <scalar T>
struct ddpm_coeffs {
  T c_z, c_x0, noise_std;
};

template <scalar T>
ddpm_coeffs<T> ddpm_transition(int t, int s, const noise_schedule<T>& sch) {
  check(s >= 1 && s < t, "transition needs s < t");
  T a_t = sch.alpha(t), a_s = sch.alpha(s);
  T s2_t = sch.sigma(t) * sch.sigma(t);
  T s2_s = sch.sigma(s) * sch.sigma(s);
  T a_ts = a_t / a_s;                 // alpha of the t|s bridge
  T s2_ts = s2_t - a_ts * a_ts * s2_s;  // bridge variance
  ddpm_coeffs<T> c;
  c.c_z = a_ts * s2_s / s2_t;
  c.c_x0 = a_s * s2_ts / s2_t;
  c.noise_std = std::sqrt(std::max(T(0), s2_ts * s2_s / s2_t));
  return c;
}

}  // namespace pi3d
