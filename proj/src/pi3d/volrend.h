#pragma once

// Differentiable volume rendering of color, mask and depth. Rays march N
// uniform bins between the slab entry/exit of the scene box; compositing uses
// alpha_i = 1 - exp(-sigma_i * delta) under running transmittance. The fused
// production path renders ray chunks in parallel and accumulates hand-derived
// gradients into per-chunk buffers combined in fixed order, so results are
// bitwise identical for any thread count.

#include <vector>

#include "common.h"
#include "scene.h"
#include "triplane.h"

namespace pi3d {

template <scalar T>
struct render_ray_t {
  vec3 origin, dir;
  T t_near = 0, t_far = 0;
  bool valid = false;   // non-empty slab interval
  uint64_t ray_id = 0;  // stable id for stratified jitter
};

struct sampling_config {
  int n_samples = 64;
  bool stratified = false;  // jitter within bins (fitting) vs midpoints (eval)
  uint64_t seed = 0;
  uint64_t step = 0;  // fitting step, decorrelates jitter across steps
};

// Slab intersection with the canonical box; empty interval => invalid ray.
template <scalar T>
render_ray_t<T> make_ray(const camera_pose& cam, int h, int w, double row,
                         double col, uint64_t ray_id) {
  ray3 r = camera_ray(cam, h, w, row, col);
  double t0 = -1e30, t1 = 1e30;
  for (int a = 0; a < 3; ++a) {
    double o = r.origin[a], d = r.dir[a];
    if (std::abs(d) < 1e-15) {
      if (o < kSceneMin || o > kSceneMax) t0 = 1e30;  // parallel miss
      continue;
    }
    double ta = (kSceneMin - o) / d, tb = (kSceneMax - o) / d;
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  render_ray_t<T> out;
  out.origin = r.origin;
  out.dir = r.dir;
  out.ray_id = ray_id;
  if (t0 < t1 && t1 > 0) {
    out.t_near = T(std::max(t0, 0.0));
    out.t_far = T(t1);
    out.valid = true;
  }
  return out;
}

// Position of sample i within its bin: stratified jitter or the midpoint.
inline double sample_offset(const sampling_config& cfg, uint64_t ray_id,
                            int i) {
  if (!cfg.stratified) return 0.5;
  return u01(hash_mix(cfg.seed, cfg.step, ray_id, uint64_t(i)));
}

// ---------------------------------------------------------------------------
// Generic single-ray renderer over an arbitrary field functor with signature
// field(const vec3& pos, double t, T rgb[3], T& sigma). Used by the renderer
// oracle tests; the production path below specializes to triplane + decoder.

template <scalar T, typename Field>
void render_ray_field(Field&& field, const render_ray_t<T>& ray,
                      const sampling_config& cfg, T color[3], T& mask,
                      T& depth, T* weights = nullptr) {
  color[0] = color[1] = color[2] = 0;
  mask = 0;
  depth = 0;
  const int N = cfg.n_samples;
  if (weights)
    for (int i = 0; i < N; ++i) weights[i] = 0;
  if (!ray.valid) return;
  const T delta = (ray.t_far - ray.t_near) / T(N);
  T transmittance = 1;
  for (int i = 0; i < N; ++i) {
    T t = ray.t_near + delta * T(i + sample_offset(cfg, ray.ray_id, i));
    vec3 pos = ray.origin + ray.dir * double(t);
    T rgb[3], sigma;
    field(pos, double(t), rgb, sigma);
    check(std::isfinite(double(sigma)),
          "non-finite density at sample " + std::to_string(i));
    T att = std::exp(-sigma * delta);
    T w = transmittance * (T(1) - att);
    color[0] += w * rgb[0];
    color[1] += w * rgb[1];
    color[2] += w * rgb[2];
    mask += w;
    depth += w * t;
    if (weights) weights[i] = w;
    transmittance *= att;
  }
}

// ---------------------------------------------------------------------------
// Batched triplane rendering with optional fused backward.

template <scalar T>
struct render_batch_output {
  int n_rays = 0, n_samples = 0;
  std::vector<T> color;    // R x 3
  std::vector<T> mask;     // R
  std::vector<T> depth;    // R
  std::vector<T> weights;  // R x N

  void resize(int R, int N) {
    n_rays = R;
    n_samples = N;
    color.assign(size_t(R) * 3, T(0));
    mask.assign(R, T(0));
    depth.assign(R, T(0));
    weights.assign(size_t(R) * N, T(0));
  }
};

template <scalar T>
struct render_workspace {
  struct chunk {
    decoder_batch<T> mlp;
    std::vector<int> ray_index;       // chunk-local -> batch ray index
    std::vector<T> ts;                // P sample positions
    std::vector<T> att;               // P per-sample exp(-sigma delta)
    std::vector<T> d_rgb, d_sigma, dx, suffix, scratch;
    std::vector<T> tp_grad;           // triplane-layout gradient buffer
    decoder_params<T> dec_grad;
    bool has_grads = false;
  };
  std::vector<chunk> chunks;

  void ensure_chunks() {
    if (chunks.empty()) chunks.resize(kReduceChunks);
  }
};

namespace detail {

// The per-ray upstream gradient: fills d_color[3], d_mask, d_depth from the
// forward outputs of one ray. Fitting losses capture their targets; gradient
// tests inject fixed unit vectors.
template <scalar T>
struct no_upstream {
  void operator()(int, const T*, T, T, T*, T&, T&) const {}
};

template <scalar T, typename UpstreamFn>
void render_chunk(const triplane_grid<T>& tp, const decoder_params<T>& dec,
                  const std::vector<render_ray_t<T>>& rays, int lo, int hi,
                  const sampling_config& cfg, UpstreamFn&& upstream,
                  bool backward, render_batch_output<T>& out,
                  typename render_workspace<T>::chunk& cw) {
  const int N = cfg.n_samples;
  cw.ray_index.clear();
  for (int r = lo; r < hi; ++r)
    if (rays[r].valid) cw.ray_index.push_back(r);
  const int P = int(cw.ray_index.size()) * N;
  cw.has_grads = false;
  if (P == 0) return;
  cw.mlp.resize(P);
  cw.ts.assign(P, T(0));
  cw.att.assign(P, T(0));

  for (int k = 0; k < int(cw.ray_index.size()); ++k) {
    const auto& ray = rays[cw.ray_index[k]];
    const T delta = (ray.t_far - ray.t_near) / T(N);
    for (int i = 0; i < N; ++i) {
      T t = ray.t_near + delta * T(i + sample_offset(cfg, ray.ray_id, i));
      vec3 pos = ray.origin + ray.dir * double(t);
      cw.ts[size_t(k) * N + i] = t;
      sample_features(tp, T(pos.x), T(pos.y), T(pos.z),
                      cw.mlp.x.data() + (size_t(k) * N + i) * kFeatDim);
    }
  }

  decoder_forward(dec, cw.mlp);

  for (int k = 0; k < int(cw.ray_index.size()); ++k) {
    const int r = cw.ray_index[k];
    const auto& ray = rays[r];
    const T delta = (ray.t_far - ray.t_near) / T(N);
    T transmittance = 1;
    T* col = out.color.data() + size_t(r) * 3;
    for (int i = 0; i < N; ++i) {
      size_t p = size_t(k) * N + i;
      T att = std::exp(-cw.mlp.sigma[p] * delta);
      T w = transmittance * (T(1) - att);
      col[0] += w * cw.mlp.rgb[p * 3 + 0];
      col[1] += w * cw.mlp.rgb[p * 3 + 1];
      col[2] += w * cw.mlp.rgb[p * 3 + 2];
      out.mask[r] += w;
      out.depth[r] += w * cw.ts[p];
      out.weights[size_t(r) * N + i] = w;
      cw.att[p] = att;
      transmittance *= att;
    }
  }

  if (!backward) return;
  cw.has_grads = true;
  cw.tp_grad.assign(tp.data.size(), T(0));
  cw.dec_grad.data.assign(decoder_params<T>::kTotal, T(0));
  cw.d_rgb.assign(size_t(P) * 3, T(0));
  cw.d_sigma.assign(P, T(0));
  cw.suffix.assign(N + 1, T(0));

  for (int k = 0; k < int(cw.ray_index.size()); ++k) {
    const int r = cw.ray_index[k];
    const auto& ray = rays[r];
    const T delta = (ray.t_far - ray.t_near) / T(N);
    T dc[3], dm = 0, dd = 0;
    dc[0] = dc[1] = dc[2] = 0;
    upstream(r, out.color.data() + size_t(r) * 3, out.mask[r], out.depth[r],
             dc, dm, dd);
    // d(loss)/d(w_i), then sigma gradients via the suffix identity
    //   d sigma_j = delta * (T_{j+1} g_j - sum_{i>j} g_i w_i)
    cw.suffix[N] = 0;
    for (int i = N - 1; i >= 0; --i) {
      size_t p = size_t(k) * N + i;
      const T* rgb = cw.mlp.rgb.data() + p * 3;
      T g = dc[0] * rgb[0] + dc[1] * rgb[1] + dc[2] * rgb[2] + dm +
            dd * cw.ts[p];
      T w = out.weights[size_t(r) * N + i];
      cw.d_rgb[p * 3 + 0] = w * dc[0];
      cw.d_rgb[p * 3 + 1] = w * dc[1];
      cw.d_rgb[p * 3 + 2] = w * dc[2];
      cw.d_sigma[p] = g;  // stash g; finished in the forward sweep below
      cw.suffix[i] = cw.suffix[i + 1] + g * w;
    }
    T transmittance = 1;
    for (int i = 0; i < N; ++i) {
      size_t p = size_t(k) * N + i;
      T next_T = transmittance * cw.att[p];
      cw.d_sigma[p] = delta * (next_T * cw.d_sigma[p] - cw.suffix[i + 1]);
      transmittance = next_T;
    }
  }

  cw.dx.assign(size_t(P) * kFeatDim, T(0));
  decoder_backward(dec, cw.mlp, cw.d_rgb.data(), cw.d_sigma.data(),
                   cw.dec_grad, cw.dx.data(), cw.scratch);

  for (int k = 0; k < int(cw.ray_index.size()); ++k) {
    const auto& ray = rays[cw.ray_index[k]];
    for (int i = 0; i < N; ++i) {
      size_t p = size_t(k) * N + i;
      vec3 pos = ray.origin + ray.dir * double(cw.ts[p]);
      scatter_feature_grad(tp, T(pos.x), T(pos.y), T(pos.z),
                           cw.dx.data() + p * kFeatDim, cw.tp_grad.data());
    }
  }
}

}  // namespace detail

// Fused forward + backward over a ray batch. The upstream functor maps each
// ray's forward outputs to gradients d_color/d_mask/d_depth; triplane and
// decoder gradients are accumulated into d_tp/d_dec.
template <scalar T, typename UpstreamFn>
render_batch_output<T> render_rays_fused(const triplane_grid<T>& tp,
                                         const decoder_params<T>& dec,
                                         const std::vector<render_ray_t<T>>& rays,
                                         const sampling_config& cfg,
                                         UpstreamFn&& upstream,
                                         triplane_grid<T>* d_tp,
                                         decoder_params<T>* d_dec,
                                         render_workspace<T>& ws) {
  render_batch_output<T> out;
  out.resize(int(rays.size()), cfg.n_samples);
  const bool backward = d_tp != nullptr;
  const int R = int(rays.size());
  const int per_chunk = (R + kReduceChunks - 1) / kReduceChunks;
  ws.ensure_chunks();
#pragma omp parallel for schedule(static) if (run_parallel())
  for (int c = 0; c < kReduceChunks; ++c) {
    int lo = c * per_chunk, hi = std::min(R, lo + per_chunk);
    if (lo >= hi) {
      ws.chunks[c].has_grads = false;
      continue;
    }
    detail::render_chunk(tp, dec, rays, lo, hi, cfg, upstream, backward, out,
                         ws.chunks[c]);
  }
  if (backward) {
    check(d_dec != nullptr, "decoder gradient buffer missing");
#pragma omp parallel for schedule(static) if (run_parallel())
    for (int64_t i = 0; i < int64_t(d_tp->data.size()); ++i) {
      T acc = 0;
      for (int c = 0; c < kReduceChunks; ++c)
        if (ws.chunks[c].has_grads) acc += ws.chunks[c].tp_grad[i];
      d_tp->data[i] += acc;
    }
    for (int i = 0; i < decoder_params<T>::kTotal; ++i) {
      T acc = 0;
      for (int c = 0; c < kReduceChunks; ++c)
        if (ws.chunks[c].has_grads) acc += ws.chunks[c].dec_grad.data[i];
      d_dec->data[i] += acc;
    }
  }
  return out;
}

// Forward-only rendering of a ray batch.
template <scalar T>
render_batch_output<T> render_rays(const triplane_grid<T>& tp,
                                   const decoder_params<T>& dec,
                                   const std::vector<render_ray_t<T>>& rays,
                                   const sampling_config& cfg,
                                   render_workspace<T>& ws) {
  return render_rays_fused(tp, dec, rays, cfg, detail::no_upstream<T>{},
                           static_cast<triplane_grid<T>*>(nullptr),
                           static_cast<decoder_params<T>*>(nullptr), ws);
}

// Per-pixel rendering of a full view (deterministic midpoints by default).
template <scalar T>
struct rendered_view {
  image2d<T> rgb, mask, depth;
};

template <scalar T>
rendered_view<T> render_view(const triplane_grid<T>& tp,
                             const decoder_params<T>& dec,
                             const camera_pose& cam, int h, int w,
                             const sampling_config& cfg,
                             render_workspace<T>& ws) {
  std::vector<render_ray_t<T>> rays(size_t(h) * w);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      rays[size_t(i) * w + j] =
          make_ray<T>(cam, h, w, i, j, uint64_t(i) * w + j);
  render_batch_output<T> out = render_rays(tp, dec, rays, cfg, ws);
  rendered_view<T> view{image2d<T>(h, w, 3), image2d<T>(h, w, 1),
                        image2d<T>(h, w, 1)};
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      size_t r = size_t(i) * w + j;
      for (int c = 0; c < 3; ++c) view.rgb.at(i, j, c) = out.color[r * 3 + c];
      view.mask.at(i, j) = out.mask[r];
      view.depth.at(i, j) = out.depth[r];
    }
  return view;
}

}  // namespace pi3d
