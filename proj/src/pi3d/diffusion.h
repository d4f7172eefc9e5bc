#pragma once

// Denoiser training on mixed triplane/2D batches and DDPM ancestral sampling
// with classifier-free guidance. All stochastic choices are counter-based
// hashes of (seed, step, slot), so runs are deterministic for any thread
// count and sampling chains are independent of batch composition.

#include "denoiser.h"
#include "schedule.h"
#include "triplane.h"

namespace pi3d {

// ---------------------------------------------------------------------------
// Training corpora. Triplane entries are pre-scaled to [-1, 1]; image entries
// are single rendered views scaled from [0, 1] to [-1, 1].

template <scalar T>
struct triplane_item {
  triplane_grid<T> tp;
  caption_tokens caption;
};

template <scalar T>
struct image_item {
  std::vector<T> pixels;  // [3, R, R] in [-1, 1]
  caption_tokens caption;
};

struct diffusion_config {
  int steps = 2500;
  int batch_items = 4;    // triplane items per step; 2D batches use 6x items
  double p_2d = 0.5;      // probability a step draws an Image2D batch
  double p_drop = 0.05;   // caption -> NULL dropout for CFG
  double lr_plane = 1e-3; // plane embeddings
  double lr_rest = 1e-4;  // everything else
  double gamma = 5.0;     // Min-SNR clamp
  uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Adam over the parameter registry with a split learning rate.

template <scalar T>
struct registry_adam {
  std::map<std::string, std::pair<std::vector<T>, std::vector<T>>> mv;
  int64_t steps = 0;

  void step(denoiser_model<T>& model, T lr_plane, T lr_rest) {
    const T b1 = T(0.9), b2 = T(0.999), eps = T(1e-8);
    ++steps;
    const T bc1 = T(1) - std::pow(b1, T(steps));
    const T bc2 = T(1) - std::pow(b2, T(steps));
    for (auto& [name, p] : model.params) {
      auto& [m, v] = mv[name];
      if (m.empty()) {
        m.assign(p->val.size(), T(0));
        v.assign(p->val.size(), T(0));
      }
      check(p->grad.size() == p->val.size(), "missing gradient for " + name);
      const T lr = name == "plane_emb" ? lr_plane : lr_rest;
      const int64_t n = int64_t(p->val.size());
      T* mp = m.data();
      T* vp = v.data();
      T* xp = p->val.data();
      const T* gp = p->grad.data();
#pragma omp parallel for schedule(static) if (run_parallel())
      for (int64_t i = 0; i < n; ++i) {
        mp[i] = b1 * mp[i] + (T(1) - b1) * gp[i];
        vp[i] = b2 * vp[i] + (T(1) - b2) * gp[i] * gp[i];
        xp[i] -= lr * (mp[i] / bc1) / (std::sqrt(vp[i] / bc2) + eps);
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Training

template <scalar T>
struct diffusion_report {
  std::vector<T> losses;  // one entry per step
};

namespace detail {

template <scalar T>
void check_scaled(const std::vector<T>& values, const char* what) {
  for (T v : values)
    check(std::isfinite(double(v)) && v >= T(-1 - 1e-6) && v <= T(1 + 1e-6),
          std::string(what) + " must be pre-scaled to [-1, 1]");
}

}  // namespace detail

template <scalar T>
diffusion_report<T> train_diffusion(
    denoiser_model<T>& model, const std::vector<triplane_item<T>>& tri_corpus,
    const std::vector<image_item<T>>& img_corpus, const noise_schedule<T>& sch,
    const diffusion_config& cfg) {
  check(cfg.steps > 0 && cfg.batch_items > 0, "bad training budget");
  check(cfg.p_2d >= 0 && cfg.p_2d <= 1, "p_2d must be a probability");
  check(cfg.p_2d == 1.0 || !tri_corpus.empty(), "triplane corpus is empty");
  check(cfg.p_2d == 0.0 || !img_corpus.empty(), "image corpus is empty");

  int res = 0;
  if (!tri_corpus.empty()) {
    res = tri_corpus.front().tp.H;
    for (const auto& item : tri_corpus) {
      check(item.tp.C == 6 && item.tp.H == res && item.tp.W == res,
            "triplane corpus resolution mismatch");
      detail::check_scaled(item.tp.data, "triplane corpus");
    }
  }
  if (!img_corpus.empty()) {
    if (res == 0) {
      double side = std::sqrt(double(img_corpus.front().pixels.size()) / 3.0);
      res = int(std::lround(side));
    }
    for (const auto& item : img_corpus) {
      check(item.pixels.size() == size_t(3) * res * res,
            "image corpus resolution mismatch");
      detail::check_scaled(item.pixels, "image corpus");
    }
  }
  check(res > 0 && res % 4 == 0, "corpus resolution must be divisible by 4");
  const size_t chw = size_t(3) * res * res;

  registry_adam<T> opt;
  diffusion_report<T> report;
  report.losses.reserve(size_t(cfg.steps));

  for (int step = 0; step < cfg.steps; ++step) {
    const bool use_2d =
        u01(hash_mix(cfg.seed, 0x6b696e64ull, uint64_t(step))) < cfg.p_2d;
    const int group = use_2d ? 1 : 6;
    const int items = use_2d ? 6 * cfg.batch_items : cfg.batch_items;
    const int B = items * group;

    auto z = ag::make_node<T>({B, 3, res, res});
    std::vector<T> target(z->val.size());
    std::vector<T> weights(static_cast<size_t>(B));
    denoise_cond cond;
    cond.group = group;
    cond.t.resize(size_t(items));
    cond.captions.resize(size_t(items));
    cond.plane_ids.resize(size_t(B));

#pragma omp parallel for schedule(static) if (run_parallel())
    for (int i = 0; i < items; ++i) {
      const uint64_t pick = hash_mix(cfg.seed, 0x7069636bull, uint64_t(step),
                                     uint64_t(i));
      const int t = 1 + int(hash_mix(cfg.seed, 0x74737465ull, uint64_t(step),
                                     uint64_t(i)) %
                            uint64_t(sch.T_steps));
      cond.t[size_t(i)] = t;
      const bool drop = u01(hash_mix(cfg.seed, 0x63647270ull, uint64_t(step),
                                     uint64_t(i))) < cfg.p_drop;
      const T a = sch.alpha(t), s = sch.sigma(t);
      rng_stream noise(hash_mix(cfg.seed, 0x6e6f6973ull, uint64_t(step),
                                uint64_t(i)));
      const T w = loss_weight(t, sch, T(cfg.gamma));
      const size_t base = size_t(i) * group * chw;
      const T* x0 = use_2d
                        ? img_corpus[pick % img_corpus.size()].pixels.data()
                        : tri_corpus[pick % tri_corpus.size()].tp.data.data();
      const caption_tokens& cap =
          use_2d ? img_corpus[pick % img_corpus.size()].caption
                 : tri_corpus[pick % tri_corpus.size()].caption;
      cond.captions[size_t(i)] = drop ? null_caption() : cap;
      for (size_t k = 0; k < size_t(group) * chw; ++k) {
        const T eps = T(noise.next_normal());
        z->val[base + k] = noised_of(x0[k], eps, a, s);
        target[base + k] = v_of(x0[k], eps, a, s);
      }
      for (int g = 0; g < group; ++g) {
        weights[size_t(i * group + g)] = w;
        cond.plane_ids[size_t(i * group + g)] = use_2d ? -1 : g;
      }
    }

    model.zero_grads();
    auto loss = ag::weighted_mse(denoise(model, z, cond), target, weights);
    check(std::isfinite(double(loss->val[0])),
          "diffusion training diverged at step " + std::to_string(step));
    ag::backward(loss);
    opt.step(model, T(cfg.lr_plane), T(cfg.lr_rest));
    report.losses.push_back(loss->val[0]);
  }
  return report;
}

// ---------------------------------------------------------------------------
// DDPM ancestral sampling with classifier-free guidance. One chain; the
// caller parallelizes over chains freely (each owns its RNG stream).

template <scalar T>
triplane_grid<T> sample_triplane(denoiser_model<T>& model,
                                 const noise_schedule<T>& sch,
                                 const caption_tokens& caption, int res,
                                 int steps, T guidance, uint64_t seed) {
  check(steps >= 2 && steps <= sch.T_steps, "step count out of range");
  check(res > 0 && res % 4 == 0, "resolution must be divisible by 4");
  const size_t n = size_t(6) * 3 * res * res;

  auto z = ag::make_node<T>({6, 3, res, res});
  {
    rng_stream init(hash_mix(seed, 0x696e6974ull));
    for (auto& v : z->val) v = T(init.next_normal());
  }
  denoise_cond cond_c, cond_u;
  cond_c.group = cond_u.group = 6;
  cond_c.captions = {caption};
  cond_u.captions = {null_caption()};
  cond_c.plane_ids = cond_u.plane_ids = {0, 1, 2, 3, 4, 5};

  const std::vector<int> ts = sample_timesteps(steps, sch.T_steps);
  std::vector<T> x0(n);
  for (size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    cond_c.t = cond_u.t = {t};
    auto v_c = denoise(model, z, cond_c);
    auto v_u = denoise(model, z, cond_u);
    const T a = sch.alpha(t), s = sch.sigma(t);
#pragma omp parallel for schedule(static) if (run_parallel())
    for (int64_t k = 0; k < int64_t(n); ++k) {
      const T v = cfg_combine(v_u->val[size_t(k)], v_c->val[size_t(k)],
                              guidance);
      x0[size_t(k)] = x0_of(z->val[size_t(k)], v, a, s);
    }
    if (i + 1 < ts.size()) {
      const auto c = ddpm_transition(t, ts[i + 1], sch);
      rng_stream step_noise(hash_mix(seed, 0x73746570ull, uint64_t(t)));
      for (size_t k = 0; k < n; ++k)
        z->val[k] = c.c_z * z->val[k] + c.c_x0 * x0[k] +
                    c.noise_std * T(step_noise.next_normal());
    }
  }
  for (auto& v : x0) v = clamp(v, T(-1), T(1));
  return unpack_pseudo_images(x0, res, res);
}

// Convenience wrapper over independent chains; results are identical to
// calling sample_triplane per caption (batch-composition invariance).
template <scalar T>
std::vector<triplane_grid<T>> sample_batch(denoiser_model<T>& model,
                                           const noise_schedule<T>& sch,
                                           const std::vector<caption_tokens>& captions,
                                           int res, int steps, T guidance,
                                           const std::vector<uint64_t>& seeds) {
  check(captions.size() == seeds.size(), "one seed per caption");
  std::vector<triplane_grid<T>> out(captions.size());
#pragma omp parallel for schedule(static) if (run_parallel())
  for (int64_t i = 0; i < int64_t(captions.size()); ++i)
    out[size_t(i)] = sample_triplane(model, sch, captions[size_t(i)], res,
                                     steps, guidance, seeds[size_t(i)]);
  return out;
}

}  // namespace pi3d
