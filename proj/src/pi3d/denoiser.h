#pragma once

// Conv U-Net denoiser over pseudo-image stacks. Three resolution levels with
// residual blocks, self-attention at the two lowest resolutions (tokens span
// all images of an item jointly), caption cross-attention, sinusoidal
// timestep embedding plus a learnable per-pseudo-image embedding. A 2D batch
// is the same network with group size 1 and the plane embedding dropped.

#include <array>
#include <map>

#include "scene.h"
#include "tensor.h"

namespace pi3d {

// ---------------------------------------------------------------------------

struct unet_config {
  int in_ch = 3;     // channels per pseudo-image
  int w0 = 64;       // widths of the three resolution levels
  int w1 = 128;
  int w2 = 256;
  int emb_dim = 256; // timestep/plane/caption embedding width
  int heads = 4;
  int groups = 8;    // group-norm groups
  int t_steps = 1000;

  void validate() const {
    check(w0 % groups == 0 && w1 % groups == 0 && w2 % groups == 0,
          "widths must be divisible by the norm groups");
    check(w0 % heads == 0 && w1 % heads == 0 && w2 % heads == 0,
          "widths must be divisible by the head count");
    check(emb_dim % 2 == 0, "embedding width must be even");
  }
};

template <scalar T>
struct denoiser_model {
  unet_config cfg;
  std::map<std::string, ag::tptr<T>> params;  // sorted by name -> stable order

  ag::tptr<T>& p(const std::string& name) {
    auto it = params.find(name);
    check(it != params.end(), "unknown parameter: " + name);
    return it->second;
  }
  void zero_grads() {
    for (auto& [name, t] : params) t->grad.assign(t->val.size(), T(0));
  }
  int64_t param_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : params) n += t->numel();
    return n;
  }
};

namespace detail {

template <scalar T>
void add_resblock(denoiser_model<T>& m, const std::string& name, int cin,
                  int cout) {
  m.params[name + ".gn1.g"] = ag::make_param<T>({cin});
  m.params[name + ".gn1.b"] = ag::make_param<T>({cin});
  m.params[name + ".conv1.w"] = ag::make_param<T>({cout, cin, 3, 3});
  m.params[name + ".conv1.b"] = ag::make_param<T>({cout});
  m.params[name + ".emb.w"] = ag::make_param<T>({m.cfg.emb_dim, cout});
  m.params[name + ".emb.b"] = ag::make_param<T>({cout});
  m.params[name + ".gn2.g"] = ag::make_param<T>({cout});
  m.params[name + ".gn2.b"] = ag::make_param<T>({cout});
  m.params[name + ".conv2.w"] = ag::make_param<T>({cout, cout, 3, 3});
  m.params[name + ".conv2.b"] = ag::make_param<T>({cout});
  if (cin != cout)
    m.params[name + ".skip.w"] = ag::make_param<T>({cout, cin, 1, 1});
}

template <scalar T>
void add_attn(denoiser_model<T>& m, const std::string& name, int c,
              int c_ctx) {
  m.params[name + ".gn.g"] = ag::make_param<T>({c});
  m.params[name + ".gn.b"] = ag::make_param<T>({c});
  m.params[name + ".q.w"] = ag::make_param<T>({c, c});
  m.params[name + ".q.b"] = ag::make_param<T>({c});
  m.params[name + ".k.w"] = ag::make_param<T>({c_ctx, c});
  m.params[name + ".k.b"] = ag::make_param<T>({c});
  m.params[name + ".v.w"] = ag::make_param<T>({c_ctx, c});
  m.params[name + ".v.b"] = ag::make_param<T>({c});
  m.params[name + ".o.w"] = ag::make_param<T>({c, c});
  m.params[name + ".o.b"] = ag::make_param<T>({c});
}

inline bool ends_with(const std::string& s, const std::string& tail) {
  return s.size() >= tail.size() &&
         s.compare(s.size() - tail.size(), tail.size(), tail) == 0;
}

}  // namespace detail

// He-style init for convs/linears, unit gamma, zeroed output projections so
// the network starts as the identity-to-zero map.
template <scalar T>
denoiser_model<T> make_denoiser(const unet_config& cfg, uint64_t seed) {
  cfg.validate();
  denoiser_model<T> m;
  m.cfg = cfg;
  const int e = cfg.emb_dim;

  m.params["stem.w"] = ag::make_param<T>({cfg.w0, cfg.in_ch, 3, 3});
  m.params["stem.b"] = ag::make_param<T>({cfg.w0});
  detail::add_resblock(m, "down0", cfg.w0, cfg.w0);
  m.params["ds1.w"] = ag::make_param<T>({cfg.w1, cfg.w0, 3, 3});
  m.params["ds1.b"] = ag::make_param<T>({cfg.w1});
  detail::add_resblock(m, "down1", cfg.w1, cfg.w1);
  detail::add_attn(m, "sa1", cfg.w1, cfg.w1);
  detail::add_attn(m, "ca1", cfg.w1, e);
  m.params["ds2.w"] = ag::make_param<T>({cfg.w2, cfg.w1, 3, 3});
  m.params["ds2.b"] = ag::make_param<T>({cfg.w2});
  detail::add_resblock(m, "down2", cfg.w2, cfg.w2);
  detail::add_attn(m, "sa2", cfg.w2, cfg.w2);
  detail::add_attn(m, "ca2", cfg.w2, e);
  detail::add_resblock(m, "mid", cfg.w2, cfg.w2);
  detail::add_resblock(m, "up1", cfg.w2 + cfg.w1, cfg.w1);
  detail::add_attn(m, "ua1", cfg.w1, cfg.w1);
  detail::add_attn(m, "cu1", cfg.w1, e);
  detail::add_resblock(m, "up0", cfg.w1 + cfg.w0, cfg.w0);
  m.params["out.gn.g"] = ag::make_param<T>({cfg.w0});
  m.params["out.gn.b"] = ag::make_param<T>({cfg.w0});
  m.params["out.conv.w"] = ag::make_param<T>({cfg.in_ch, cfg.w0, 3, 3});
  m.params["out.conv.b"] = ag::make_param<T>({cfg.in_ch});
  m.params["temb.l1.w"] = ag::make_param<T>({e, e});
  m.params["temb.l1.b"] = ag::make_param<T>({e});
  m.params["temb.l2.w"] = ag::make_param<T>({e, e});
  m.params["temb.l2.b"] = ag::make_param<T>({e});
  m.params["plane_emb"] = ag::make_param<T>({6, e});
  m.params["cap_emb"] = ag::make_param<T>({kVocabSize, e});
  m.params["cap_pos"] = ag::make_param<T>({kMaxCaptionTokens, e});

  uint64_t idx = 0;
  for (auto& [name, t] : m.params) {
    rng_stream rng(hash_mix(seed, 0x756e6574ull, idx++));
    const auto& sh = t->shape;
    if (detail::ends_with(name, ".gn.g") || detail::ends_with(name, "gn1.g") ||
        detail::ends_with(name, "gn2.g")) {
      for (auto& v : t->val) v = T(1);
    } else if (detail::ends_with(name, ".b") &&
               !detail::ends_with(name, "emb.b")) {
      // biases start at zero (including gn beta)
    } else if (name == "plane_emb" || name == "cap_emb" || name == "cap_pos") {
      for (auto& v : t->val) v = T(0.1 * rng.next_normal());
    } else if (detail::ends_with(name, ".o.w") ||
               detail::ends_with(name, "conv2.w") || name == "out.conv.w") {
      // zero-initialized output projections
    } else if (sh.size() == 4) {
      T std = std::sqrt(T(2) / T(sh[1] * sh[2] * sh[3]));
      for (auto& v : t->val) v = T(std * rng.next_normal());
    } else if (sh.size() == 2) {
      T std = std::sqrt(T(2) / T(sh[0]));
      for (auto& v : t->val) v = T(std * rng.next_normal());
    } else if (detail::ends_with(name, "emb.b")) {
      // resblock embedding projection bias: zero
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Forward pass.

struct denoise_cond {
  int group = 6;                     // images per item: 6 triplane, 1 image
  std::vector<int> t;                // per item, 1-indexed timesteps
  std::vector<caption_tokens> captions; // per item
  std::vector<int> plane_ids;        // per image; -1 = no plane embedding
};

namespace detail {

template <scalar T>
std::vector<T> timestep_features(const std::vector<int>& t, int dim) {
  const int half = dim / 2;
  std::vector<T> out(t.size() * size_t(dim));
  for (size_t i = 0; i < t.size(); ++i)
    for (int k = 0; k < half; ++k) {
      T freq = std::exp(T(-std::log(10000.0)) * T(k) / T(half));
      out[i * dim + k] = std::sin(T(t[i]) * freq);
      out[i * dim + half + k] = std::cos(T(t[i]) * freq);
    }
  return out;
}

template <scalar T>
ag::tptr<T> resblock(denoiser_model<T>& m, const std::string& name,
                     const ag::tptr<T>& x, const ag::tptr<T>& emb) {
  const int g = m.cfg.groups;
  auto h = ag::conv2d(ag::silu(ag::group_norm(x, m.p(name + ".gn1.g"),
                                              m.p(name + ".gn1.b"), g)),
                      m.p(name + ".conv1.w"), m.p(name + ".conv1.b"));
  auto ev = ag::linear(ag::silu(emb), m.p(name + ".emb.w"),
                       m.p(name + ".emb.b"));
  h = ag::add_vec_hw(h, ev);
  h = ag::conv2d(ag::silu(ag::group_norm(h, m.p(name + ".gn2.g"),
                                         m.p(name + ".gn2.b"), g)),
                 m.p(name + ".conv2.w"), m.p(name + ".conv2.b"));
  auto skip = m.params.count(name + ".skip.w")
                  ? ag::conv2d(x, m.p(name + ".skip.w"))
                  : x;
  return ag::add(skip, h);
}

// Self-attention whose tokens span all `group` images of an item; context
// cross-attention when ctx is non-null (keys/values from caption tokens).
template <scalar T>
ag::tptr<T> attention(denoiser_model<T>& m, const std::string& name,
                      const ag::tptr<T>& x, int group,
                      const ag::tptr<T>& ctx, const ag::tptr<T>& mask) {
  const int B = x->dim(0), C = x->dim(1), H = x->dim(2), W = x->dim(3);
  const int items = B / group, n_tok = group * H * W, heads = m.cfg.heads;
  const int dh = C / heads;
  auto tok = ag::nchw_to_tokens(
      ag::group_norm(x, m.p(name + ".gn.g"), m.p(name + ".gn.b"),
                     m.cfg.groups));
  auto grouped = ag::reshape(tok, {items, n_tok, C});
  auto flat = ag::reshape(grouped, {items * n_tok, C});
  auto q = ag::split_heads(
      ag::reshape(ag::linear(flat, m.p(name + ".q.w"), m.p(name + ".q.b")),
                  {items, n_tok, C}),
      heads);
  ag::tptr<T> k, v;
  if (ctx) {
    const int L = ctx->dim(1), cd = ctx->dim(2);
    auto cflat = ag::reshape(ctx, {items * L, cd});
    k = ag::split_heads(
        ag::reshape(ag::linear(cflat, m.p(name + ".k.w"), m.p(name + ".k.b")),
                    {items, L, C}),
        heads);
    v = ag::split_heads(
        ag::reshape(ag::linear(cflat, m.p(name + ".v.w"), m.p(name + ".v.b")),
                    {items, L, C}),
        heads);
  } else {
    k = ag::split_heads(
        ag::reshape(ag::linear(flat, m.p(name + ".k.w"), m.p(name + ".k.b")),
                    {items, n_tok, C}),
        heads);
    v = ag::split_heads(
        ag::reshape(ag::linear(flat, m.p(name + ".v.w"), m.p(name + ".v.b")),
                    {items, n_tok, C}),
        heads);
  }
  auto att = ag::softmax_rows(
      ag::scale(ag::bmatmul_nt(q, k), T(1) / std::sqrt(T(dh))), mask);
  auto mixed = ag::reshape(ag::merge_heads(ag::bmatmul_nn(att, v), heads),
                           {items * n_tok, C});
  auto proj = ag::linear(mixed, m.p(name + ".o.w"), m.p(name + ".o.b"));
  auto back = ag::tokens_to_nchw(
      ag::reshape(proj, {B, H * W, C}), H, W);
  return ag::add(x, back);
}

}  // namespace detail

// z: [B, in_ch, R, R] with B = items * cond.group; each item's images are
// contiguous. Returns the v-prediction of the same shape.
template <scalar T>
ag::tptr<T> denoise(denoiser_model<T>& m, const ag::tptr<T>& z,
                    const denoise_cond& cond) {
  const int B = z->dim(0);
  check(z->shape.size() == 4 && z->dim(1) == m.cfg.in_ch &&
            z->dim(2) == z->dim(3),
        "denoise input must be [B, C, R, R]");
  check(cond.group >= 1 && B % cond.group == 0, "batch/group mismatch");
  const int items = B / cond.group;
  check(int(cond.t.size()) == items, "one timestep per item");
  check(int(cond.captions.size()) == items, "one caption per item");
  check(int(cond.plane_ids.size()) == B, "one plane id per image");
  check(z->dim(2) % 4 == 0, "resolution must be divisible by 4");
  bool any_plane = false, all_plane = true;
  for (int pid : cond.plane_ids) {
    check(pid >= -1 && pid < 6, "plane id out of range");
    if (pid >= 0)
      any_plane = true;
    else
      all_plane = false;
  }
  check(!any_plane || all_plane, "mixed plane/no-plane batches unsupported");
  for (int t : cond.t)
    check(t >= 1 && t <= m.cfg.t_steps, "timestep out of range");

  // per-item timestep embedding -> per-image embedding (+ plane embedding)
  const int e = m.cfg.emb_dim;
  auto sin_feat = ag::make_const<T>(
      {items, e}, detail::timestep_features<T>(cond.t, e));
  auto temb = ag::linear(
      ag::silu(ag::linear(sin_feat, m.p("temb.l1.w"), m.p("temb.l1.b"))),
      m.p("temb.l2.w"), m.p("temb.l2.b"));
  auto emb = ag::repeat_rows(temb, cond.group);
  if (any_plane)
    emb = ag::add(emb, ag::embedding(m.p("plane_emb"), cond.plane_ids));

  // caption context [items, L, e] and its PAD mask [items*heads, L]
  std::vector<int> cap_flat, pos_flat;
  std::vector<T> mask_v(size_t(items) * m.cfg.heads * kMaxCaptionTokens, T(0));
  for (int i = 0; i < items; ++i)
    for (int l = 0; l < kMaxCaptionTokens; ++l) {
      cap_flat.push_back(cond.captions[size_t(i)][size_t(l)]);
      pos_flat.push_back(l);
      if (cond.captions[size_t(i)][size_t(l)] == kPadToken)
        for (int h = 0; h < m.cfg.heads; ++h)
          mask_v[(size_t(i) * m.cfg.heads + h) * kMaxCaptionTokens + l] = T(-1e9);
    }
  auto ctx = ag::reshape(ag::add(ag::embedding(m.p("cap_emb"), cap_flat),
                                 ag::embedding(m.p("cap_pos"), pos_flat)),
                         {items, kMaxCaptionTokens, e});
  auto mask = ag::make_const<T>({items * m.cfg.heads, kMaxCaptionTokens},
                                std::move(mask_v));

  const ag::tptr<T> none;
  auto h0 = ag::conv2d(z, m.p("stem.w"), m.p("stem.b"));
  h0 = detail::resblock(m, "down0", h0, emb);
  auto h1 = ag::conv2d(h0, m.p("ds1.w"), m.p("ds1.b"), 2);
  h1 = detail::resblock(m, "down1", h1, emb);
  h1 = detail::attention(m, "sa1", h1, cond.group, none, none);
  h1 = detail::attention(m, "ca1", h1, cond.group, ctx, mask);
  auto h2 = ag::conv2d(h1, m.p("ds2.w"), m.p("ds2.b"), 2);
  h2 = detail::resblock(m, "down2", h2, emb);
  h2 = detail::attention(m, "sa2", h2, cond.group, none, none);
  h2 = detail::attention(m, "ca2", h2, cond.group, ctx, mask);
  h2 = detail::resblock(m, "mid", h2, emb);
  auto u1 = ag::concat_ch(ag::upsample2x(h2), h1);
  u1 = detail::resblock(m, "up1", u1, emb);
  u1 = detail::attention(m, "ua1", u1, cond.group, none, none);
  u1 = detail::attention(m, "cu1", u1, cond.group, ctx, mask);
  auto u0 = ag::concat_ch(ag::upsample2x(u1), h0);
  u0 = detail::resblock(m, "up0", u0, emb);
  auto out = ag::conv2d(
      ag::silu(ag::group_norm(u0, m.p("out.gn.g"), m.p("out.gn.b"),
                              m.cfg.groups)),
      m.p("out.conv.w"), m.p("out.conv.b"));
  return out;
}

}  // namespace pi3d
