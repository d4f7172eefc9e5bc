#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "pi3d/volrend.h"

using namespace pi3d;

namespace {

const double kMaskTarget = 1.0 - std::exp(-2.0);  // constant slab, sigma = 2

template <scalar T>
struct unit_upstream {
  T c[3] = {0, 0, 0};
  T m = 0, d = 0;
  void operator()(int, const T*, T, T, T* dc, T& dm, T& dd) const {
    dc[0] = c[0];
    dc[1] = c[1];
    dc[2] = c[2];
    dm = m;
    dd = d;
  }
};

// forward scalar-of-interest for finite differencing
double forward_scalar(const triplane_grid<double>& tp,
                      const decoder_params<double>& dec,
                      const std::vector<render_ray_t<double>>& rays,
                      const sampling_config& cfg, int which) {
  render_workspace<double> ws;
  auto out = render_rays(tp, dec, rays, cfg, ws);
  if (which < 3) return out.color[which];
  if (which == 3) return out.mask[0];
  return out.depth[0];
}

render_ray_t<double> interior_ray(uint64_t seed) {
  rng_stream rng(seed);
  for (int attempt = 0; attempt < 100; ++attempt) {
    camera_pose cam = sample_camera(rng);
    int i = int(rng.uniform_int(24, 40));
    int j = int(rng.uniform_int(24, 40));
    auto ray = make_ray<double>(cam, 64, 64, i, j, seed);
    if (ray.valid) return ray;
  }
  throw std::runtime_error("no valid interior ray found");
}

}  // namespace

TEST_CASE("slab intersection from an orthographic camera") {
  camera_pose cam;
  cam.projection = camera_pose::projection_kind::orthographic;
  cam.position = {0, 0, 1.5};
  auto ray = make_ray<double>(cam, 65, 65, 32, 32, 0);  // exact center pixel
  REQUIRE(ray.valid);
  CHECK(ray.origin.x == doctest::Approx(0).epsilon(1e-14));
  CHECK(ray.origin.y == doctest::Approx(0).epsilon(1e-14));
  CHECK(ray.dir.z == doctest::Approx(-1).epsilon(1e-15));
  CHECK(ray.t_near == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(ray.t_far == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("perspective center ray and narrow-fov corner miss") {
  camera_pose cam = orbit_camera(0.7, 0.3);
  auto center = make_ray<double>(cam, 65, 65, 32, 32, 0);
  REQUIRE(center.valid);
  vec3 to_target = normalize(cam.look_at - cam.position);
  CHECK(dot(center.dir, to_target) == doctest::Approx(1.0).epsilon(1e-12));

  camera_pose narrow = orbit_camera(0.0, 0.0, 30.0);
  narrow.fov_y = 0.5;  // box subtends ~0.033 rad from 30 units away
  auto corner = make_ray<double>(narrow, 64, 64, 0, 0, 0);
  CHECK(!corner.valid);
}

TEST_CASE("empty field renders to zero") {
  auto vacuum = [](const vec3&, double, double* rgb, double& sigma) {
    rgb[0] = rgb[1] = rgb[2] = 0.9;  // color must not leak without density
    sigma = 0;
  };
  render_ray_t<double> ray;
  ray.origin = {0, 0, 1.5};
  ray.dir = {0, 0, -1};
  ray.t_near = 1;
  ray.t_far = 2;
  ray.valid = true;
  double color[3], mask, depth;
  std::vector<double> weights(16);
  sampling_config cfg;
  cfg.n_samples = 16;
  render_ray_field(vacuum, ray, cfg, color, mask, depth, weights.data());
  CHECK(color[0] == 0.0);
  CHECK(mask == 0.0);
  CHECK(depth == 0.0);
  for (double w : weights) CHECK(w == 0.0);
}

TEST_CASE("constant slab transmittance at N = 1000") {
  auto slab = [](const vec3&, double, double* rgb, double& sigma) {
    rgb[0] = rgb[1] = rgb[2] = 1.0;
    sigma = 2.0;
  };
  render_ray_t<double> ray;
  ray.origin = {0, 0, 1.5};
  ray.dir = {0, 0, -1};
  ray.t_near = 1;
  ray.t_far = 2;
  ray.valid = true;
  sampling_config cfg;
  cfg.n_samples = 1000;
  double color[3], mask, depth;
  render_ray_field(slab, ray, cfg, color, mask, depth);
  CHECK(std::abs(mask - kMaskTarget) < 1e-3);
  CHECK(color[0] == doctest::Approx(mask).epsilon(1e-12));
}

TEST_CASE("opaque wall pins depth and scales color by mask") {
  const double wall = 0.7;
  auto medium = [&](const vec3&, double t, double* rgb, double& sigma) {
    rgb[0] = 0.3;
    rgb[1] = 0.6;
    rgb[2] = 0.9;
    sigma = t < wall ? 0.0 : 1e4;
  };
  render_ray_t<double> ray;
  ray.origin = {0, 0, 0};
  ray.dir = {0, 0, 1};
  ray.t_near = 0;
  ray.t_far = 1;
  ray.valid = true;
  sampling_config cfg;
  cfg.n_samples = 64;
  const double delta = 1.0 / 64;
  double color[3], mask, depth;
  render_ray_field(medium, ray, cfg, color, mask, depth);
  CHECK(mask == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(std::abs(depth - wall) <= 2 * delta);
  CHECK(color[1] == doctest::Approx(0.6 * mask).epsilon(1e-9));
}

TEST_CASE("midpoint quadrature converges on a smooth field") {
  auto smooth = [](const vec3&, double t, double* rgb, double& sigma) {
    rgb[0] = rgb[1] = rgb[2] = 1.0;
    sigma = 2.0 + std::sin(2.0 * 3.14159265358979323846 * (t - 1.0));
  };
  render_ray_t<double> ray;
  ray.origin = {0, 0, 1.5};
  ray.dir = {0, 0, -1};
  ray.t_near = 1;
  ray.t_far = 2;
  ray.valid = true;
  double color[3], mask256, mask512, depth;
  sampling_config cfg;
  cfg.n_samples = 256;
  render_ray_field(smooth, ray, cfg, color, mask256, depth);
  cfg.n_samples = 512;
  render_ray_field(smooth, ray, cfg, color, mask512, depth);
  double err256 = std::abs(mask256 - kMaskTarget);
  double err512 = std::abs(mask512 - kMaskTarget);
  CHECK(err512 > 0);
  CHECK(err256 / err512 >= 1.8);
}

TEST_CASE("weight sum equals mask and the telescoping identity holds") {
  triplane_grid<double> tp = random_triplane<double>(16, 16, 31, 0.5);
  decoder_params<double> dec = init_decoder<double>(32);
  rng_stream rng(33);
  std::vector<render_ray_t<double>> rays;
  for (int k = 0; k < 40; ++k) {
    camera_pose cam = sample_camera(rng);
    rays.push_back(make_ray<double>(cam, 64, 64,
                                    double(rng.uniform_int(0, 63)),
                                    double(rng.uniform_int(0, 63)), k));
  }
  sampling_config cfg;
  cfg.n_samples = 64;
  render_workspace<double> ws;
  auto out = render_rays(tp, dec, rays, cfg, ws);
  for (int r = 0; r < out.n_rays; ++r) {
    double wsum = 0;
    for (int i = 0; i < out.n_samples; ++i)
      wsum += out.weights[size_t(r) * out.n_samples + i];
    CHECK(std::abs(wsum - out.mask[r]) <= 1e-12);
    CHECK(out.mask[r] >= 0.0);
    CHECK(out.mask[r] < 1.0);
    if (!rays[r].valid) continue;
    // recompute sigma sum through the forward sampler to test telescoping
    double delta = (rays[r].t_far - rays[r].t_near) / out.n_samples;
    double ssum = 0;
    for (int i = 0; i < out.n_samples; ++i) {
      double t = rays[r].t_near +
                 delta * (i + sample_offset(cfg, rays[r].ray_id, i));
      vec3 pos = rays[r].origin + rays[r].dir * t;
      double feat[kFeatDim], rgb[3], sigma;
      sample_features(tp, pos.x, pos.y, pos.z, feat);
      decode_point(dec, feat, rgb, sigma);
      ssum += sigma;
    }
    CHECK(out.mask[r] ==
          doctest::Approx(1.0 - std::exp(-delta * ssum)).epsilon(1e-12));
  }
}

TEST_CASE("renderer gradients match central finite differences") {
  triplane_grid<double> tp = random_triplane<double>(16, 16, 41, 0.5);
  decoder_params<double> dec = init_decoder<double>(42);
  sampling_config cfg;
  cfg.n_samples = 64;
  rng_stream pick(43);
  const double h = 1e-6;
  int tested = 0;
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<render_ray_t<double>> rays{interior_ray(500 + rep)};
    int which = int(pick.uniform_int(0, 4));  // color ch, mask, or depth
    unit_upstream<double> up;
    if (which < 3)
      up.c[which] = 1;
    else if (which == 3)
      up.m = 1;
    else
      up.d = 1;
    triplane_grid<double> d_tp(tp.C, tp.H, tp.W);
    decoder_params<double> d_dec;
    render_workspace<double> ws;
    render_rays_fused(tp, dec, rays, cfg, up, &d_tp, &d_dec, ws);

    std::vector<size_t> support;
    for (size_t i = 0; i < d_tp.data.size(); ++i)
      if (d_tp.data[i] != 0.0) support.push_back(i);
    REQUIRE(!support.empty());
    for (int probe = 0; probe < 3; ++probe) {
      size_t idx = probe == 0
                       ? size_t(pick.uniform_int(0, int64_t(tp.data.size()) - 1))
                       : support[size_t(pick.uniform_int(
                             0, int64_t(support.size()) - 1))];
      double keep = tp.data[idx];
      tp.data[idx] = keep + h;
      double upv = forward_scalar(tp, dec, rays, cfg, which);
      tp.data[idx] = keep - h;
      double dnv = forward_scalar(tp, dec, rays, cfg, which);
      tp.data[idx] = keep;
      double fd = (upv - dnv) / (2 * h);
      if (std::abs(fd) < 1e-12 && std::abs(d_tp.data[idx]) < 1e-12) continue;
      CHECK(d_tp.data[idx] == doctest::Approx(fd).epsilon(1e-4));
      ++tested;
    }
    for (int probe = 0; probe < 2; ++probe) {
      int idx = int(pick.uniform_int(0, decoder_params<double>::kTotal - 1));
      double keep = dec.data[idx];
      dec.data[idx] = keep + h;
      double upv = forward_scalar(tp, dec, rays, cfg, which);
      dec.data[idx] = keep - h;
      double dnv = forward_scalar(tp, dec, rays, cfg, which);
      dec.data[idx] = keep;
      double fd = (upv - dnv) / (2 * h);
      if (std::abs(fd) < 1e-12 && std::abs(d_dec.data[idx]) < 1e-12) continue;
      CHECK(d_dec.data[idx] == doctest::Approx(fd).epsilon(1e-4));
      ++tested;
    }
  }
  CHECK(tested >= 70);
}

TEST_CASE("zero upstream gradients give exactly zero parameter gradients") {
  triplane_grid<double> tp = random_triplane<double>(16, 16, 51, 0.5);
  decoder_params<double> dec = init_decoder<double>(52);
  std::vector<render_ray_t<double>> rays{interior_ray(53)};
  sampling_config cfg;
  cfg.n_samples = 32;
  unit_upstream<double> up;  // all zeros
  triplane_grid<double> d_tp(tp.C, tp.H, tp.W);
  decoder_params<double> d_dec;
  render_workspace<double> ws;
  render_rays_fused(tp, dec, rays, cfg, up, &d_tp, &d_dec, ws);
  for (double g : d_tp.data) CHECK(g == 0.0);
  for (double g : d_dec.data) CHECK(g == 0.0);
}

TEST_CASE("texels never sampled receive exactly zero gradient") {
  triplane_grid<double> tp = random_triplane<double>(64, 64, 61, 0.5);
  decoder_params<double> dec = init_decoder<double>(62);
  // one ray straight down the z axis: xy-plane support stays near (31.5,31.5)
  render_ray_t<double> ray;
  ray.origin = {0, 0, 1.5};
  ray.dir = {0, 0, -1};
  ray.t_near = 1;
  ray.t_far = 2;
  ray.valid = true;
  std::vector<render_ray_t<double>> rays{ray};
  sampling_config cfg;
  cfg.n_samples = 64;
  unit_upstream<double> up;
  up.m = 1;
  triplane_grid<double> d_tp(tp.C, tp.H, tp.W);
  decoder_params<double> d_dec;
  render_workspace<double> ws;
  render_rays_fused(tp, dec, rays, cfg, up, &d_tp, &d_dec, ws);
  bool any = false;
  for (double g : d_tp.data) any |= (g != 0.0);
  CHECK(any);
  for (int c = 0; c < 6; ++c) {
    CHECK(d_tp.at(0, c, 0, 0) == 0.0);    // xy far corner
    CHECK(d_tp.at(0, c, 63, 63) == 0.0);  // xy far corner
    CHECK(d_tp.at(0, c, 31, 2) == 0.0);   // on-row but far column
  }
}

TEST_CASE("a near-zero density field renders black") {
  triplane_grid<float> tp(6, 16, 16);
  decoder_params<float> dec;
  dec.b4()[3] = -60.0f;  // softplus(-60) ~ 9e-27
  sampling_config cfg;
  cfg.n_samples = 32;
  render_workspace<float> ws;
  auto view = render_view(tp, dec, orbit_camera(0.5, 0.2), 24, 24, cfg, ws);
  for (float v : view.mask.data) CHECK(std::abs(v) < 1e-12f);
  for (float v : view.rgb.data) CHECK(std::abs(v) < 1e-12f);
}

TEST_CASE("rendering is deterministic and thread-count invariant") {
  triplane_grid<float> tp = random_triplane<float>(32, 32, 71, 0.5f);
  decoder_params<float> dec = init_decoder<float>(72);
  sampling_config cfg;
  cfg.n_samples = 48;
  cfg.stratified = true;
  cfg.seed = 9;
  camera_pose cam = orbit_camera(1.1, 0.4);
  render_workspace<float> ws;
  auto a = render_view(tp, dec, cam, 32, 32, cfg, ws);
  auto b = render_view(tp, dec, cam, 32, 32, cfg, ws);
  CHECK(a.rgb.data == b.rgb.data);

  set_exec_mode(exec_mode::serial);
  render_workspace<float> ws_serial;
  auto s = render_view(tp, dec, cam, 32, 32, cfg, ws_serial);
  set_exec_mode(exec_mode::parallel);
#if defined(_OPENMP)
  omp_set_num_threads(8);
  render_workspace<float> ws8;
  auto p8 = render_view(tp, dec, cam, 32, 32, cfg, ws8);
  omp_set_num_threads(omp_get_num_procs());
  CHECK(p8.rgb.data == s.rgb.data);
  CHECK(p8.mask.data == s.mask.data);
  CHECK(p8.depth.data == s.depth.data);
#endif
  CHECK(a.rgb.data == s.rgb.data);
  CHECK(a.mask.data == s.mask.data);
  CHECK(a.depth.data == s.depth.data);
}
