#pragma once

// Score-distillation refinement of a sampled triplane. Each step renders the
// object from a random orbit camera, noises the view at a mid-range timestep,
// asks the trained denoiser (with classifier-free guidance on the 2D pathway)
// for its noise estimate, and pushes w(t) * (eps_hat - eps) back through the
// fused renderer into the triplane and a per-object decoder copy. The model
// that produced the triplane acts as its own critic; the guidance callback is
// a template parameter so tests can substitute closed-form critics.

#include <chrono>
#include <utility>

#include "diffusion.h"
#include "fitting.h"

namespace pi3d {

template <scalar T>
struct refine_config {
  int steps = 2000;
  T guidance = T(20);
  T t_min = T(0.1), t_max = T(0.5);  // window as fractions of the schedule
  int img_res = 32;                  // rendered view side (pseudo-image scale)
  int n_samples = 64;
  T tp_lr = T(5e-3);   // constant; no decay over the refinement run
  T dec_lr = T(1e-4);
  T lambda_l2 = T(0.025), lambda_tv = T(0.025);
  uint64_t seed = 0;
};

// Integer timestep window [lo, hi] for a fractional range of the schedule.
inline std::pair<int, int> sds_t_range(double t_min, double t_max,
                                       int T_steps) {
  check(t_min >= 0 && t_max <= 1 && t_min < t_max,
        "timestep window must satisfy 0 <= t_min < t_max <= 1");
  int lo = std::max(1, int(std::ceil(t_min * T_steps)));
  int hi = int(std::floor(t_max * T_steps));
  check(lo <= hi, "timestep window is empty at this schedule length");
  return {lo, hi};
}

template <scalar T>
struct sds_stats {
  T gnorm = 0;      // l2 norm of the injected image-space gradient
  T surrogate = 0;  // <g, x> at the rendered view, for monitoring
};

namespace detail {

// Per-ray upstream reading a precomputed planar gradient field g over the
// [-1,1] image x; x = 2 * color - 1 contributes the factor 2.
template <scalar T>
struct sds_upstream {
  const T* g;  // [3, res, res] planar
  size_t n_pix;
  void operator()(int r, const T*, T, T, T* dc, T& dm, T& dd) const {
    for (int c = 0; c < 3; ++c) dc[c] = T(2) * g[size_t(c) * n_pix + r];
    dm = 0;
    dd = 0;
  }
};

}  // namespace detail

// One SDS accumulation at a fixed camera, timestep and noise draw. The view
// is rendered twice with identical sampling: once forward to form
//   g = weight * (guidance(z, t) - eps) / numel,   z = alpha_t x + sigma_t eps
// over the planar [-1,1] image x, then fused to scatter 2 g into d_tp/d_dec.
// `guidance(z, t)` must return the noise estimate for a planar [3, R, R]
// image and must not depend on gradients of z.
template <scalar T, typename Guidance>
sds_stats<T> sds_step(const triplane_grid<T>& tp, const decoder_params<T>& dec,
                      const camera_pose& cam, int t, const std::vector<T>& eps,
                      T weight, Guidance&& guidance,
                      const noise_schedule<T>& sch,
                      const sampling_config& scfg, int img_res,
                      triplane_grid<T>& d_tp, decoder_params<T>& d_dec,
                      render_workspace<T>& ws) {
  const int R = img_res;
  const size_t n_pix = size_t(R) * R;
  const size_t n = 3 * n_pix;
  check(eps.size() == n, "noise field size must match the rendered view");

  std::vector<render_ray_t<T>> rays(n_pix);
  for (int i = 0; i < R; ++i)
    for (int j = 0; j < R; ++j)
      rays[size_t(i) * R + j] =
          make_ray<T>(cam, R, R, i, j, uint64_t(i) * R + j);

  auto fwd = render_rays(tp, dec, rays, scfg, ws);

  // planar [-1,1] view and its noised version
  const T a = sch.alpha(t), s = sch.sigma(t);
  std::vector<T> x(n), z(n);
#pragma omp parallel for schedule(static) if (run_parallel())
  for (int64_t k = 0; k < int64_t(n); ++k) {
    const size_t c = size_t(k) / n_pix, r = size_t(k) % n_pix;
    x[size_t(k)] = T(2) * fwd.color[r * 3 + c] - T(1);
    z[size_t(k)] = noised_of(x[size_t(k)], eps[size_t(k)], a, s);
  }

  const std::vector<T> eps_hat = guidance(z, t);
  check(eps_hat.size() == n, "guidance must return one value per pixel");
  std::vector<T> g(n);
  const T scale = weight / T(n);
#pragma omp parallel for schedule(static) if (run_parallel())
  for (int64_t k = 0; k < int64_t(n); ++k)
    g[size_t(k)] = scale * (eps_hat[size_t(k)] - eps[size_t(k)]);

  sds_stats<T> stats;
  stats.gnorm = std::sqrt(deterministic_sum<T>(
      int64_t(n), [&](int64_t k) { return g[size_t(k)] * g[size_t(k)]; }));
  stats.surrogate = deterministic_sum<T>(
      int64_t(n), [&](int64_t k) { return g[size_t(k)] * x[size_t(k)]; });
  check(std::isfinite(double(stats.gnorm)), "non-finite guidance gradient");

  detail::sds_upstream<T> up{g.data(), n_pix};
  render_rays_fused(tp, dec, rays, scfg, up, &d_tp, &d_dec, ws);
  return stats;
}

// Classifier-free-guided noise estimate from the trained denoiser on the 2D
// pathway (single image, no plane embedding).
template <scalar T>
struct denoiser_guidance {
  denoiser_model<T>* model;
  const noise_schedule<T>* sch;
  caption_tokens caption;
  T scale;
  int res;

  std::vector<T> operator()(const std::vector<T>& z, int t) const {
    auto zn = ag::make_const<T>({1, 3, res, res}, z);
    denoise_cond cond_c, cond_u;
    cond_c.group = cond_u.group = 1;
    cond_c.t = cond_u.t = {t};
    cond_c.captions = {caption};
    cond_u.captions = {null_caption()};
    cond_c.plane_ids = cond_u.plane_ids = {-1};
    auto v_c = denoise(*model, zn, cond_c);
    auto v_u = denoise(*model, zn, cond_u);
    const T a = sch->alpha(t), s = sch->sigma(t);
    std::vector<T> eps_hat(z.size());
#pragma omp parallel for schedule(static) if (run_parallel())
    for (int64_t k = 0; k < int64_t(z.size()); ++k) {
      const T v =
          cfg_combine(v_u->val[size_t(k)], v_c->val[size_t(k)], scale);
      eps_hat[size_t(k)] = eps_of(z[size_t(k)], v, a, s);
    }
    return eps_hat;
  }
};

template <scalar T>
struct refine_report {
  std::vector<T> step_gnorm;
  std::vector<T> step_surrogate;  // <stopgrad(g), x> per step
  std::vector<int> step_t;
  decoder_params<T> decoder;  // refined per-object copy
  finalize_report finalized;
  double wall_seconds = 0;
};

// Full refinement loop: per-step camera, timestep and noise draws from
// counter-based streams, SDS gradients plus the (halved) smoothness
// regularizers, constant-rate Adam on the triplane and the decoder copy.
// The input decoder is copied, never written.
template <scalar T>
refine_report<T> refine(triplane_grid<T>& tp, const decoder_params<T>& dec,
                        denoiser_model<T>& model, const noise_schedule<T>& sch,
                        const caption_tokens& caption,
                        const refine_config<T>& cfg) {
  check(cfg.steps >= 1, "refinement needs at least one step");
  check(cfg.img_res > 0, "view resolution must be positive");
  const auto [t_lo, t_hi] =
      sds_t_range(double(cfg.t_min), double(cfg.t_max), sch.T_steps);
  const auto clock0 = std::chrono::steady_clock::now();

  refine_report<T> rep;
  rep.decoder = dec;
  rep.step_gnorm.reserve(cfg.steps);
  rep.step_surrogate.reserve(cfg.steps);
  rep.step_t.reserve(cfg.steps);
  adam_state<T> tp_opt(tp.data.size());
  adam_state<T> dec_opt(rep.decoder.data.size());
  render_workspace<T> ws;
  triplane_grid<T> d_tp(tp.C, tp.H, tp.W);
  decoder_params<T> d_dec;
  const size_t n = size_t(3) * cfg.img_res * cfg.img_res;
  std::vector<T> eps(n);
  denoiser_guidance<T> guide{&model, &sch, caption, cfg.guidance,
                             cfg.img_res};

  for (int step = 0; step < cfg.steps; ++step) {
    rng_stream cam_rng(hash_mix(cfg.seed, 0x72666376ull, uint64_t(step)));
    const camera_pose cam = sample_camera(cam_rng);
    const int t = t_lo + int(hash_mix(cfg.seed, 0x72667473ull, uint64_t(step)) %
                             uint64_t(t_hi - t_lo + 1));
    rng_stream noise(hash_mix(cfg.seed, 0x72666570ull, uint64_t(step)));
    for (auto& e : eps) e = T(noise.next_normal());

    std::fill(d_tp.data.begin(), d_tp.data.end(), T(0));
    std::fill(d_dec.data.begin(), d_dec.data.end(), T(0));
    sampling_config scfg;
    scfg.n_samples = cfg.n_samples;
    scfg.stratified = true;
    scfg.seed = cfg.seed;
    scfg.step = uint64_t(step);

    const T w = sch.sigma(t) * sch.sigma(t);
    auto stats = sds_step(tp, rep.decoder, cam, t, eps, w, guide, sch, scfg,
                          cfg.img_res, d_tp, d_dec, ws);
    accumulate_reg_grads(tp, cfg.lambda_l2, cfg.lambda_tv, d_tp);
    check(std::isfinite(double(stats.gnorm)),
          "refinement diverged at step " + std::to_string(step));

    tp_opt.step(tp.data.data(), d_tp.data.data(), cfg.tp_lr);
    dec_opt.step(rep.decoder.data.data(), d_dec.data.data(), cfg.dec_lr);
    rep.step_gnorm.push_back(stats.gnorm);
    rep.step_surrogate.push_back(stats.surrogate);
    rep.step_t.push_back(t);
  }

  // keep the result a valid pseudo-image stack
  rep.finalized = finalize_triplane(tp, finalize_kind::clamp);
  rep.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - clock0)
          .count();
  return rep;
}

}  // namespace pi3d
