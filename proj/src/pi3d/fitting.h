#pragma once

// Depth-aware triplane fitting: the six-term loss, Adam, and the two training
// phases (joint shared-decoder training, then frozen-decoder per-object
// fits). Render-path gradients arrive through the fused renderer; regularizer
// gradients are accumulated texel-wise in gather form.

#include <chrono>
#include <utility>

#include "dataset.h"
#include "metrics.h"
#include "volrend.h"

namespace pi3d {

template <scalar T>
struct fit_config {
  T lambda_l1 = T(0.2);
  T lambda_mask = T(0.1);
  T lambda_depth = T(0.5);
  T lambda_l2 = T(0.05);
  T lambda_tv = T(0.05);
  T lambda_hull = T(1.0);
  int rays_per_step = 4096;
  int steps = 2000;
  int n_samples = 64;
  int tp_res = 64;
  T tp_lr = T(2e-2);   // linearly decayed to zero
  T dec_lr = T(1e-3);  // shared phase only
  T init_std = T(0.05);
  uint64_t seed = 0;
  finalize_kind finalize = finalize_kind::clamp;
};

// ---------------------------------------------------------------------------
// Loss values. All reductions are means (resolution- and batch-invariant).

template <scalar T>
T loss_color(int n, const T* pred, const T* target, T lambda_l1) {
  check(n > 0, "empty color batch");
  return deterministic_sum<T>(n, [&](int64_t r) {
           T sq = 0, l1 = 0;
           for (int c = 0; c < 3; ++c) {
             T d = pred[r * 3 + c] - target[r * 3 + c];
             sq += d * d;
             l1 += std::abs(d);
           }
           return sq + lambda_l1 * l1;
         }) /
         T(n);
}

template <scalar T>
T bce(T pred, T target) {
  T p = clamp(pred, T(1e-6), T(1) - T(1e-6));
  return -(target * std::log(p) + (T(1) - target) * std::log(T(1) - p));
}

template <scalar T>
T loss_mask(int n, const T* pred, const T* target) {
  check(n > 0, "empty mask batch");
  for (int r = 0; r < n; ++r) {
    // tolerance covers float round-off in the compositing weight sum
    check(pred[r] >= T(-1e-3) && pred[r] <= T(1) + T(1e-3),
          "mask prediction out of [0,1]");
    check(target[r] == T(0) || target[r] == T(1), "mask target not binary");
  }
  return deterministic_sum<T>(n, [&](int64_t r) {
           return bce(pred[r], target[r]);
         }) /
         T(n);
}

template <scalar T>
T loss_depth(int n, const T* pred, const T* target_depth,
             const T* target_mask) {
  check(n > 0, "empty depth batch");
  return deterministic_sum<T>(n, [&](int64_t r) {
           return target_mask[r] * std::abs(pred[r] - target_depth[r]);
         }) /
         T(n);
}

template <scalar T>
struct reg_values {
  T l2 = 0, tv = 0;
};

template <scalar T>
reg_values<T> loss_reg(const triplane_grid<T>& tp) {
  reg_values<T> out;
  out.l2 = deterministic_sum<T>(int64_t(tp.data.size()), [&](int64_t i) {
             return tp.data[i] * tp.data[i];
           }) /
           T(tp.data.size());
  const int H = tp.H, W = tp.W;
  const int64_t per_channel = int64_t(H) * (W - 1) + int64_t(H - 1) * W;
  const int64_t channels = int64_t(3) * tp.C;
  out.tv = deterministic_sum<T>(channels * per_channel, [&](int64_t k) {
             int64_t pc = k / per_channel;
             int64_t e = k % per_channel;
             int p = int(pc / tp.C), c = int(pc % tp.C);
             T a, b;
             if (e < int64_t(H) * (W - 1)) {  // horizontal neighbor pairs
               int i = int(e / (W - 1)), j = int(e % (W - 1));
               a = tp.at(p, c, i, j);
               b = tp.at(p, c, i, j + 1);
             } else {  // vertical pairs
               int64_t f = e - int64_t(H) * (W - 1);
               int i = int(f / W), j = int(f % W);
               a = tp.at(p, c, i, j);
               b = tp.at(p, c, i + 1, j);
             }
             return std::abs(a - b);
           }) /
           T(channels * per_channel);
  return out;
}

template <scalar T>
T loss_hull(const triplane_grid<T>& tp, const hull_masks& hulls) {
  check(hulls.o_xy.h == tp.H && hulls.o_xy.w == tp.W,
        "hull mask resolution must match the triplane");
  const image2d<uint8_t>* planes[3] = {&hulls.o_xy, &hulls.o_xz, &hulls.o_yz};
  return deterministic_sum<T>(int64_t(tp.data.size()), [&](int64_t k) {
           const size_t plane_sz = tp.plane_size();
           int p = int(size_t(k) / plane_sz);
           size_t within = size_t(k) % plane_sz;
           size_t pix = within % (size_t(tp.H) * tp.W);
           int i = int(pix / tp.W), j = int(pix % tp.W);
           if (planes[p]->at(i, j)) return T(0);
           return std::abs(tp.data[k]);
         }) /
         T(tp.data.size());
}

template <scalar T>
struct loss_breakdown {
  T color = 0, mask = 0, depth = 0, l2 = 0, tv = 0, hull = 0;
  T total(const fit_config<T>& cfg) const {
    return color + cfg.lambda_mask * mask + cfg.lambda_depth * depth +
           cfg.lambda_l2 * l2 + cfg.lambda_tv * tv + cfg.lambda_hull * hull;
  }
};

// ---------------------------------------------------------------------------
// Regularizer gradients, gather form (every texel reads its neighbors).

template <scalar T>
int sign_of(T x) {
  return (x > T(0)) - (x < T(0));
}

template <scalar T>
void accumulate_reg_grads(const triplane_grid<T>& tp, T lambda_l2, T lambda_tv,
                          triplane_grid<T>& d_tp) {
  const int H = tp.H, W = tp.W;
  const T l2_scale = lambda_l2 * T(2) / T(tp.data.size());
  const int64_t per_channel = int64_t(H) * (W - 1) + int64_t(H - 1) * W;
  const T tv_scale = lambda_tv / T(int64_t(3) * tp.C * per_channel);
  const int64_t n = int64_t(tp.data.size());
#pragma omp parallel for schedule(static) if (run_parallel())
  for (int64_t k = 0; k < n; ++k) {
    const size_t plane_sz = size_t(H) * W;
    size_t pix = size_t(k) % plane_sz;
    int i = int(pix / W), j = int(pix % W);
    T v = tp.data[k];
    T g = l2_scale * v;
    T tv = 0;
    if (j > 0) tv += T(sign_of(v - tp.data[k - 1]));
    if (j < W - 1) tv += T(sign_of(v - tp.data[k + 1]));
    if (i > 0) tv += T(sign_of(v - tp.data[k - W]));
    if (i < H - 1) tv += T(sign_of(v - tp.data[k + W]));
    d_tp.data[k] += g + tv_scale * tv;
  }
}

template <scalar T>
void accumulate_hull_grad(const triplane_grid<T>& tp, const hull_masks& hulls,
                          T lambda_hull, triplane_grid<T>& d_tp) {
  const image2d<uint8_t>* planes[3] = {&hulls.o_xy, &hulls.o_xz, &hulls.o_yz};
  const T scale = lambda_hull / T(tp.data.size());
  const int64_t n = int64_t(tp.data.size());
#pragma omp parallel for schedule(static) if (run_parallel())
  for (int64_t k = 0; k < n; ++k) {
    const size_t plane_sz = tp.plane_size();
    int p = int(size_t(k) / plane_sz);
    size_t pix = size_t(k) % (size_t(tp.H) * tp.W);
    int i = int(pix / tp.W), j = int(pix % tp.W);
    if (planes[p]->at(i, j)) continue;
    d_tp.data[k] += scale * T(sign_of(tp.data[k]));
  }
}

// ---------------------------------------------------------------------------
// Adam with linear learning-rate decay handled by the caller.

template <scalar T>
struct adam_state {
  std::vector<T> m, v;
  int64_t t = 0;

  explicit adam_state(size_t n) : m(n, T(0)), v(n, T(0)) {}

  void step(T* params, const T* grads, T lr) {
    ++t;
    const T b1 = T(0.9), b2 = T(0.999), eps = T(1e-8);
    const T c1 = T(1) - std::pow(b1, T(t));
    const T c2 = T(1) - std::pow(b2, T(t));
    const int64_t n = int64_t(m.size());
#pragma omp parallel for schedule(static) if (run_parallel())
    for (int64_t i = 0; i < n; ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * grads[i];
      v[i] = b2 * v[i] + (T(1) - b2) * grads[i] * grads[i];
      params[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }
};

// ---------------------------------------------------------------------------
// Ray batches: uniform over (view, pixel) pairs, counter-hashed per step.

template <scalar T>
struct fit_scratch {
  render_workspace<T> ws;
  std::vector<render_ray_t<T>> rays;
  std::vector<T> tc, tm, td;  // per-ray targets
  triplane_grid<T> d_tp;
  decoder_params<T> d_dec;
};

template <scalar T>
void build_fit_batch(const object_views& data, uint64_t seed, uint64_t step,
                     int rays_per_step, fit_scratch<T>& s) {
  const int V = int(data.train.size());
  const int h = data.img_h, w = data.img_w;
  const int64_t hw = int64_t(h) * w;
  s.rays.resize(rays_per_step);
  s.tc.resize(size_t(rays_per_step) * 3);
  s.tm.resize(rays_per_step);
  s.td.resize(rays_per_step);
#pragma omp parallel for schedule(static) if (run_parallel())
  for (int k = 0; k < rays_per_step; ++k) {
    uint64_t u = hash_mix(seed, 0x72617973ull, step, uint64_t(k));
    int64_t idx = int64_t(u % uint64_t(V * hw));
    const view_record& view = data.train[size_t(idx / hw)];
    int row = int((idx % hw) / w), col = int((idx % hw) % w);
    s.rays[k] = make_ray<T>(view.camera, h, w, row, col, uint64_t(k));
    for (int c = 0; c < 3; ++c)
      s.tc[size_t(k) * 3 + c] = T(view.rgb.at(row, col, c));
    s.tm[k] = T(view.mask.at(row, col));
    s.td[k] = T(view.depth.at(row, col));
  }
}

// Per-ray upstream gradients of the render-path losses, with the lambda
// weights and the 1/R mean folded in.
template <scalar T>
struct fit_upstream {
  const fit_scratch<T>* s;
  T inv_r, lambda_l1, lambda_mask, lambda_depth;

  void operator()(int r, const T* color, T mask, T depth, T* dc, T& dm,
                  T& dd) const {
    for (int c = 0; c < 3; ++c) {
      T d = color[c] - s->tc[size_t(r) * 3 + c];
      dc[c] = inv_r * (T(2) * d + lambda_l1 * T(sign_of(d)));
    }
    if (mask > T(1e-6) && mask < T(1) - T(1e-6)) {
      T m = s->tm[r];
      dm = lambda_mask * inv_r * (mask - m) / (mask * (T(1) - mask));
    } else {
      dm = 0;  // clamped BCE is locally flat
    }
    dd = lambda_depth * inv_r * s->tm[r] * T(sign_of(depth - s->td[r]));
  }
};

// One optimizer step over one object. Returns the loss breakdown at the
// pre-update parameters.
template <scalar T>
loss_breakdown<T> fit_step(const object_views& data, triplane_grid<T>& tp,
                           decoder_params<T>& dec, bool update_decoder,
                           adam_state<T>& tp_opt, adam_state<T>& dec_opt,
                           const fit_config<T>& cfg, uint64_t step, T tp_lr,
                           fit_scratch<T>& s) {
  build_fit_batch(data, cfg.seed, step, cfg.rays_per_step, s);
  if (s.d_tp.data.size() != tp.data.size()) s.d_tp = triplane_grid<T>(tp.C, tp.H, tp.W);
  std::fill(s.d_tp.data.begin(), s.d_tp.data.end(), T(0));
  std::fill(s.d_dec.data.begin(), s.d_dec.data.end(), T(0));

  sampling_config scfg;
  scfg.n_samples = cfg.n_samples;
  scfg.stratified = true;
  scfg.seed = cfg.seed;
  scfg.step = step;

  fit_upstream<T> up{&s, T(1) / T(cfg.rays_per_step), cfg.lambda_l1,
                     cfg.lambda_mask, cfg.lambda_depth};
  auto out = render_rays_fused(tp, dec, s.rays, scfg, up, &s.d_tp, &s.d_dec,
                               s.ws);
  accumulate_reg_grads(tp, cfg.lambda_l2, cfg.lambda_tv, s.d_tp);
  accumulate_hull_grad(tp, data.hulls, cfg.lambda_hull, s.d_tp);

  loss_breakdown<T> losses;
  losses.color = loss_color(out.n_rays, out.color.data(), s.tc.data(),
                            cfg.lambda_l1);
  losses.mask = loss_mask(out.n_rays, out.mask.data(), s.tm.data());
  losses.depth = loss_depth(out.n_rays, out.depth.data(), s.td.data(),
                            s.tm.data());
  reg_values<T> reg = loss_reg(tp);
  losses.l2 = reg.l2;
  losses.tv = reg.tv;
  losses.hull = loss_hull(tp, data.hulls);
  check(std::isfinite(double(losses.total(cfg))),
        "fitting diverged at step " + std::to_string(step));

  tp_opt.step(tp.data.data(), s.d_tp.data.data(), tp_lr);
  if (update_decoder) dec_opt.step(dec.data.data(), s.d_dec.data.data(), cfg.dec_lr);
  return losses;
}

// ---------------------------------------------------------------------------

template <scalar T>
struct fit_report {
  std::vector<T> step_total;
  loss_breakdown<T> first, last;
  double held_psnr = 0, held_iou = 0, held_depth_mae = 0;
  finalize_report finalized;
  double wall_seconds = 0;
};

template <scalar T>
void eval_heldout(const object_views& data, const triplane_grid<T>& tp,
                  const decoder_params<T>& dec, int n_samples,
                  fit_report<T>& rep) {
  if (data.heldout.empty()) return;
  sampling_config scfg;
  scfg.n_samples = n_samples;
  render_workspace<T> ws;
  double p = 0, iou = 0, mae = 0;
  for (const view_record& v : data.heldout) {
    auto view = render_view(tp, dec, v.camera, data.img_h, data.img_w, scfg, ws);
    p += psnr(view.rgb, v.rgb);
    iou += mask_iou(view.mask, v.mask);
    mae += depth_mae(view.depth, v.depth, v.mask);
  }
  rep.held_psnr = p / double(data.heldout.size());
  rep.held_iou = iou / double(data.heldout.size());
  rep.held_depth_mae = mae / double(data.heldout.size());
}

// Phase 2: frozen decoder, per-object triplane fit.
template <scalar T>
std::pair<triplane_grid<T>, fit_report<T>> fit_object(
    const object_views& data, const decoder_params<T>& dec,
    const fit_config<T>& cfg) {
  auto t0 = std::chrono::steady_clock::now();
  triplane_grid<T> tp = random_triplane<T>(cfg.tp_res, cfg.tp_res,
                                           hash_mix(cfg.seed, 0x74706c6eull),
                                           cfg.init_std);
  adam_state<T> tp_opt(tp.data.size());
  adam_state<T> dec_opt(0);  // unused: decoder stays frozen
  decoder_params<T> dec_copy = dec;
  fit_scratch<T> s;
  fit_report<T> rep;
  rep.step_total.reserve(cfg.steps);
  for (int step = 0; step < cfg.steps; ++step) {
    T lr = cfg.tp_lr * (T(1) - T(step) / T(cfg.steps));
    auto losses = fit_step(data, tp, dec_copy, false, tp_opt, dec_opt, cfg,
                           uint64_t(step), lr, s);
    rep.step_total.push_back(losses.total(cfg));
    if (step == 0) rep.first = losses;
    rep.last = losses;
  }
  rep.finalized = finalize_triplane(tp, cfg.finalize);
  eval_heldout(data, tp, dec_copy, cfg.n_samples, rep);
  rep.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return {std::move(tp), std::move(rep)};
}

// Phase 1: joint training of the shared decoder and the subset's triplanes.
// Objects are visited round-robin; the triplane learning rate decays over the
// whole phase.
template <scalar T>
struct shared_training_result {
  decoder_params<T> decoder;
  std::vector<triplane_grid<T>> triplanes;
  std::vector<T> step_total;
};

template <scalar T>
shared_training_result<T> train_shared_decoder(
    const std::vector<object_views>& objects, const fit_config<T>& cfg) {
  check(!objects.empty(), "shared decoder training needs objects");
  shared_training_result<T> out;
  out.decoder = init_decoder<T>(hash_mix(cfg.seed, 0x64656373ull));
  adam_state<T> dec_opt(out.decoder.data.size());
  std::vector<adam_state<T>> tp_opts;
  std::vector<fit_config<T>> per_obj_cfg(objects.size(), cfg);
  for (size_t o = 0; o < objects.size(); ++o) {
    out.triplanes.push_back(random_triplane<T>(
        cfg.tp_res, cfg.tp_res, hash_mix(cfg.seed, 0x74706c6eull, o),
        cfg.init_std));
    tp_opts.emplace_back(out.triplanes[o].data.size());
    per_obj_cfg[o].seed = hash_mix(cfg.seed, 0x6f626a73ull, o);
  }
  fit_scratch<T> s;
  out.step_total.reserve(cfg.steps);
  for (int step = 0; step < cfg.steps; ++step) {
    size_t o = size_t(step) % objects.size();
    T lr = cfg.tp_lr * (T(1) - T(step) / T(cfg.steps));
    auto losses =
        fit_step(objects[o], out.triplanes[o], out.decoder, true, tp_opts[o],
                 dec_opt, per_obj_cfg[o], uint64_t(step), lr, s);
    out.step_total.push_back(losses.total(cfg));
  }
  return out;
}

}  // namespace pi3d
