// Wall-time comparison of the serial reference path against the OpenMP path
// for the heavy kernels. Every kernel keeps one code path whose loops are
// gated on the execution mode, so the two timings come from identical
// arithmetic; the diff column asserts the results agree bitwise.

#include <chrono>
#include <cstdio>
#include <functional>
#include <vector>

#include "pi3d/denoiser.h"
#include "pi3d/diffusion.h"
#include "pi3d/fitting.h"
#include "pi3d/kernels.h"
#include "pi3d/retrieval.h"
#include "pi3d/volrend.h"

namespace {

using namespace pi3d;

double time_best(const std::function<void()>& fn, int reps = 3) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    best = std::min(
        best, std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                            t0)
                  .count());
  }
  return best;
}

float max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
  check(a.size() == b.size(), "result size mismatch");
  float d = 0;
  for (size_t i = 0; i < a.size(); ++i)
    d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

// Runs `fn` (which must write its result into `out`) in both execution modes
// and prints one table row.
void row(const char* name, std::vector<float>& out,
         const std::function<void()>& fn) {
  set_exec_mode(exec_mode::serial);
  const double ts = time_best(fn);
  const std::vector<float> serial_out = out;
  set_exec_mode(exec_mode::parallel);
  const double tp = time_best(fn);
  std::printf("%-28s %9.3f ms %9.3f ms %7.2fx %10.2e\n", name, ts * 1e3,
              tp * 1e3, ts / tp, double(max_abs_diff(serial_out, out)));
}

}  // namespace

int main() {
  std::printf("%-28s %12s %12s %8s %10s\n", "kernel", "serial", "parallel",
              "speedup", "max |diff|");

  // gemm: the library path against the plain reference loops
  {
    const int n = 192;
    std::vector<float> a(size_t(n) * n), b(size_t(n) * n), c(size_t(n) * n),
        c_ref(size_t(n) * n);
    rng_stream rng(1);
    for (auto& v : a) v = float(rng.next_normal());
    for (auto& v : b) v = float(rng.next_normal());
    set_exec_mode(exec_mode::parallel);
    const double tref = time_best(
        [&] { reference::gemm_nn(n, n, n, 1.0f, a.data(), b.data(), 0.0f,
                                 c_ref.data()); });
    const double tpar = time_best(
        [&] { gemm_nn(n, n, n, 1.0f, a.data(), b.data(), 0.0f, c.data()); });
    std::printf("%-28s %9.3f ms %9.3f ms %7.2fx %10.2e\n", "gemm_nn 192^3",
                tref * 1e3, tpar * 1e3, tref / tpar,
                double(max_abs_diff(c_ref, c)));
  }

  const auto tp = random_triplane<float>(64, 64, 11, 0.3f);
  const auto dec = init_decoder<float>(7);

  // forward volume rendering of a full view's rays
  {
    const camera_pose cam = orbit_camera(0.7, 0.3);
    const int res = 96;
    std::vector<render_ray_t<float>> rays;
    for (int i = 0; i < res; ++i)
      for (int j = 0; j < res; ++j)
        rays.push_back(make_ray<float>(cam, res, res, i, j, 0));
    sampling_config scfg;
    scfg.n_samples = 64;
    render_workspace<float> ws;
    std::vector<float> out;
    row("render 9216 rays x 64", out, [&] {
      auto r = render_rays(tp, dec, rays, scfg, ws);
      out = r.color;
      out.insert(out.end(), r.mask.begin(), r.mask.end());
      out.insert(out.end(), r.depth.begin(), r.depth.end());
    });

    // fused forward+backward with a constant color upstream
    triplane_grid<float> d_tp(tp.C, tp.H, tp.W);
    decoder_params<float> d_dec;
    struct unit_up {
      void operator()(int, const float*, float, float, float* dc, float& dm,
                      float& dd) const {
        dc[0] = dc[1] = dc[2] = 1.0f;
        dm = dd = 0.5f;
      }
    };
    row("render fused backward", out, [&] {
      std::fill(d_tp.data.begin(), d_tp.data.end(), 0.0f);
      std::fill(d_dec.data.begin(), d_dec.data.end(), 0.0f);
      render_rays_fused(tp, dec, rays, scfg, unit_up{}, &d_tp, &d_dec, ws);
      out = d_tp.data;
    });
  }

  // one full fitting step (batch assembly + fused render + Adam)
  {
    rng_stream rng(3);
    const scene_spec scene = sample_scene(rng, 1.0);
    const auto data = make_object_views(scene, 8, 0, 48, 48, 64, 5);
    fit_config<float> cfg;
    cfg.seed = 9;
    auto tp_fit = random_triplane<float>(64, 64, 13, 0.05f);
    auto dec_fit = dec;
    adam_state<float> tp_opt(tp_fit.data.size());
    adam_state<float> dec_opt(dec_fit.data.size());
    fit_scratch<float> s;
    std::vector<float> out;
    row("fit_step 4096 rays", out, [&] {
      auto tp_local = tp_fit;
      auto dec_local = dec_fit;
      adam_state<float> topt = tp_opt, dopt = dec_opt;
      fit_step(data, tp_local, dec_local, true, topt, dopt, cfg, 0, 1e-2f, s);
      out = tp_local.data;
    });
  }

  // denoiser forward + backward on one pseudo-image group
  {
    unet_config ucfg;
    auto model = make_denoiser<float>(ucfg, 17);
    const int res = 16;
    auto z = ag::make_const<float>(
        {6, 3, res, res}, std::vector<float>(size_t(6) * 3 * res * res, 0.1f));
    denoise_cond cond;
    cond.group = 6;
    cond.t = {500};
    cond.captions = {tokenize_caption("red sphere on blue cube")};
    cond.plane_ids = {0, 1, 2, 3, 4, 5};
    const std::vector<float> target(z->val.size(), 0.0f);
    const std::vector<float> w(6, 1.0f);
    std::vector<float> out;
    row("denoise fwd+bwd 6x16^2", out, [&] {
      model.zero_grads();
      auto loss = ag::weighted_mse(denoise(model, z, cond), target, w);
      ag::backward(loss);
      out = model.p("stem.w")->grad;
    });
  }

  // oracle retrieval index over the full caption set
  {
    std::vector<float> out;
    row("retrieval index 420 x 4", out, [&] {
      const auto idx = build_retrieval_index(enumerate_captions(), 24);
      out.assign(1, float(idx.entries.size()));
      for (const auto& e : idx.entries)
        out.push_back(float(e.hists[0][0]));
    });
  }

  set_exec_mode(exec_mode::parallel);
  return 0;
}
