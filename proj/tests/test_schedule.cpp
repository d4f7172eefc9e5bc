#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "pi3d/schedule.h"

using namespace pi3d;

TEST_CASE("schedule satisfies the variance-preserving invariants") {
  auto sch = make_schedule<double>(1000);
  CHECK(sch.T_steps == 1000);
  for (int t = 1; t <= 1000; ++t) {
    double a = sch.alpha(t), s = sch.sigma(t);
    CHECK(std::abs(a * a + s * s - 1.0) < 1e-12);
    CHECK(a > 0.0);
    CHECK(s > 0.0);
    if (t > 1) {
      CHECK(a < sch.alpha(t - 1));
      CHECK(s > sch.sigma(t - 1));
      CHECK(sch.snr(t) < sch.snr(t - 1));
    }
  }
  CHECK(sch.alpha(1) > 0.999);
  CHECK(sch.sigma(1000) > 0.999);
  CHECK_THROWS(sch.alpha(0));
  CHECK_THROWS(sch.alpha(1001));
  CHECK_THROWS(make_schedule<double>(1));
}

TEST_CASE("v-parameterization frozen values") {
  // alpha = 0.8, sigma = 0.6 arithmetic examples
  CHECK(noised_of(1.0, 0.0, 0.8, 0.6) == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(v_of(1.0, 0.0, 0.8, 0.6) == doctest::Approx(-0.6).epsilon(1e-12));
  double z = noised_of(1.0, 0.0, 0.8, 0.6);
  double v = v_of(1.0, 0.0, 0.8, 0.6);
  CHECK(x0_of(z, v, 0.8, 0.6) == doctest::Approx(1.0).epsilon(1e-12));
  double snr = (0.8 * 0.8) / (0.6 * 0.6);
  CHECK(snr == doctest::Approx(16.0 / 9.0).epsilon(1e-12));
  CHECK(std::min(snr, 5.0) / (snr + 1) == doctest::Approx(0.64).epsilon(1e-4));
  // sigma = 0 start: v equals the noise
  CHECK(v_of(0.3, 0.7, 1.0, 0.0) == doctest::Approx(0.7).epsilon(1e-12));
}

TEST_CASE("reconstruction identities hold on random tensors at every level") {
  auto sch = make_schedule<double>(1000);
  rng_stream rng(41);
  for (int rep = 0; rep < 1000; ++rep) {
    int t = int(rng.uniform_int(1, 1000));
    std::vector<double> x0(8), eps(8);
    for (auto& x : x0) x = rng.uniform(-1.0, 1.0);
    for (auto& e : eps) e = rng.next_normal();
    auto z = add_noise(x0, eps, t, sch);
    auto v = v_target(x0, eps, t, sch);
    double a = sch.alpha(t), s = sch.sigma(t);
    for (size_t i = 0; i < x0.size(); ++i) {
      CHECK(std::abs(x0_of(z[i], v[i], a, s) - x0[i]) < 1e-12);
      CHECK(std::abs(eps_of(z[i], v[i], a, s) - eps[i]) < 1e-12);
    }
  }
}

TEST_CASE("min-snr weight properties") {
  auto sch = make_schedule<double>(1000);
  CHECK(loss_weight(1000, sch, 5.0) < 1e-6);  // snr -> 0
  // high-snr region: w = gamma/(snr+1), decreasing in snr
  for (int t = 2; t <= 40; ++t) {
    if (sch.snr(t) >= 5.0 && sch.snr(t - 1) >= 5.0)
      CHECK(loss_weight(t, sch, 5.0) > loss_weight(t - 1, sch, 5.0));
  }
  for (int t = 1; t <= 1000; t += 13) {
    double w = loss_weight(t, sch, 5.0);
    CHECK(w >= 0.0);
    CHECK(w <= 1.0);
  }
  CHECK_THROWS(loss_weight(1, sch, 0.0));
}

TEST_CASE("cfg combination") {
  CHECK(cfg_combine(0.1, 0.2, 5.0) == doctest::Approx(0.6).epsilon(1e-12));
  // s = 1 is bitwise the conditional branch
  rng_stream rng(43);
  for (int i = 0; i < 1000; ++i) {
    double u = rng.next_normal(), c = rng.next_normal();
    CHECK(cfg_combine(u, c, 1.0) == c);
    CHECK(cfg_combine(u, c, 0.0) == u);
  }
}

TEST_CASE("uniform-stride sub-schedule") {
  auto ts = sample_timesteps(50, 1000);
  REQUIRE(ts.size() == 50);
  CHECK(ts.front() == 1000);
  CHECK(ts.back() == 1);
  for (size_t i = 1; i < ts.size(); ++i) CHECK(ts[i] < ts[i - 1]);
  // full-length stride is the identity sequence
  auto all = sample_timesteps(10, 10);
  for (int i = 0; i < 10; ++i) CHECK(all[i] == 10 - i);
  CHECK_THROWS(sample_timesteps(11, 10));
}

TEST_CASE("ancestral transition preserves the marginal variance") {
  auto sch = make_schedule<double>(1000);
  rng_stream rng(47);
  for (int rep = 0; rep < 200; ++rep) {
    int t = int(rng.uniform_int(2, 1000));
    int s = int(rng.uniform_int(1, t - 1));
    auto c = ddpm_transition(t, s, sch);
    double a_t = sch.alpha(t), a_s = sch.alpha(s);
    double s_t = sch.sigma(t), s_s = sch.sigma(s);
    // plugging z_t = a_t x0 + s_t eps into the mean: x0 coefficient is a_s
    double x0_coeff = c.c_z * a_t + c.c_x0;
    CHECK(x0_coeff == doctest::Approx(a_s).epsilon(1e-10));
    // total noise variance matches sigma_s^2
    double eps_coeff = c.c_z * s_t;
    double var = eps_coeff * eps_coeff + c.noise_std * c.noise_std;
    CHECK(var == doctest::Approx(s_s * s_s).epsilon(1e-10));
    CHECK(c.noise_std >= 0.0);
  }
  CHECK_THROWS(ddpm_transition(5, 5, sch));
}
