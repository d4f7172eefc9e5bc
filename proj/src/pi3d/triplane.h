#pragma once

// Triplane neural field: three axis-aligned C x H x W feature maps sampled
// bilinearly and decoded by a small shared MLP. Gradients are hand-derived;
// the batched decoder runs on the gemm kernels.

#include <vector>

#include "common.h"
#include "kernels.h"
#include "scene.h"

namespace pi3d {

inline constexpr int kPlaneChannels = 6;
inline constexpr int kFeatDim = 3 * kPlaneChannels;  // 18
inline constexpr int kHidden = 32;
inline constexpr int kDecoderOut = 4;  // rgb + density

template <scalar T>
struct triplane_grid {
  int C = kPlaneChannels, H = 0, W = 0;
  std::vector<T> data;  // [plane][channel][row][col], planes xy, xz, yz

  triplane_grid() = default;
  triplane_grid(int C_, int H_, int W_)
      : C(C_), H(H_), W(W_), data(size_t(3) * C_ * H_ * W_, T(0)) {}

  size_t plane_size() const { return size_t(C) * H * W; }
  T& at(int p, int c, int i, int j) {
    return data[(size_t(p) * C + c) * H * W + size_t(i) * W + j];
  }
  const T& at(int p, int c, int i, int j) const {
    return data[(size_t(p) * C + c) * H * W + size_t(i) * W + j];
  }
};

template <scalar T>
triplane_grid<T> random_triplane(int H, int W, uint64_t seed, T std_dev) {
  triplane_grid<T> tp(kPlaneChannels, H, W);
  for (size_t i = 0; i < tp.data.size(); ++i)
    tp.data[i] = std_dev * T(normal01(hash_mix(seed, i)));
  return tp;
}

// World coordinate -> continuous texel coordinate on one plane axis: the
// first-listed coordinate maps to columns, texel centers sit at integers.
template <scalar T>
T world_to_texel(T x, int extent) {
  return (x - T(kSceneMin)) / T(kSceneMax - kSceneMin) * T(extent - 1);
}

// Plane projections of a 3d point: (u, v) = (column, row) texel coordinates.
template <scalar T>
struct plane_uv {
  T u, v;
};

template <scalar T>
std::array<plane_uv<T>, 3> project_point(T x, T y, T z, int H, int W) {
  return {plane_uv<T>{world_to_texel(x, W), world_to_texel(y, H)},
          plane_uv<T>{world_to_texel(x, W), world_to_texel(z, H)},
          plane_uv<T>{world_to_texel(y, W), world_to_texel(z, H)}};
}

// Bilinear texel weights with clamp-to-edge addressing.
struct bilinear_support {
  int i0, i1, j0, j1;
  double w00, w01, w10, w11;  // (row, col) corner weights
};

template <scalar T>
bilinear_support bilinear_at(plane_uv<T> uv, int H, int W) {
  double u = clamp(double(uv.u), 0.0, double(W - 1));
  double v = clamp(double(uv.v), 0.0, double(H - 1));
  int j0 = std::min(int(u), W - 2);
  int i0 = std::min(int(v), H - 2);
  double fu = u - j0, fv = v - i0;
  bilinear_support s;
  s.i0 = i0;
  s.i1 = i0 + 1;
  s.j0 = j0;
  s.j1 = j0 + 1;
  s.w00 = (1 - fv) * (1 - fu);
  s.w01 = (1 - fv) * fu;
  s.w10 = fv * (1 - fu);
  s.w11 = fv * fu;
  return s;
}

// All C channels of one plane at a continuous texel coordinate.
template <scalar T>
void sample_plane(const triplane_grid<T>& tp, int plane, plane_uv<T> uv,
                  T* out) {
  bilinear_support s = bilinear_at(uv, tp.H, tp.W);
  for (int c = 0; c < tp.C; ++c) {
    out[c] = T(s.w00) * tp.at(plane, c, s.i0, s.j0) +
             T(s.w01) * tp.at(plane, c, s.i0, s.j1) +
             T(s.w10) * tp.at(plane, c, s.i1, s.j0) +
             T(s.w11) * tp.at(plane, c, s.i1, s.j1);
  }
}

// Concatenated 18-vector [xy | xz | yz] at a world point.
template <scalar T>
void sample_features(const triplane_grid<T>& tp, T x, T y, T z, T* out) {
  auto uvs = project_point(x, y, z, tp.H, tp.W);
  for (int p = 0; p < 3; ++p) sample_plane(tp, p, uvs[p], out + p * tp.C);
}

// Scatter d(feature)/d(texel) contributions for one point into a gradient
// buffer laid out like triplane_grid::data. Not thread-safe per buffer; the
// renderer gives each ray chunk its own buffer and combines them in order.
template <scalar T>
void scatter_feature_grad(const triplane_grid<T>& tp, T x, T y, T z,
                          const T* dfeat, T* grad) {
  auto uvs = project_point(x, y, z, tp.H, tp.W);
  for (int p = 0; p < 3; ++p) {
    bilinear_support s = bilinear_at(uvs[p], tp.H, tp.W);
    for (int c = 0; c < tp.C; ++c) {
      T g = dfeat[p * tp.C + c];
      size_t base = (size_t(p) * tp.C + c) * tp.H * tp.W;
      grad[base + size_t(s.i0) * tp.W + s.j0] += T(s.w00) * g;
      grad[base + size_t(s.i0) * tp.W + s.j1] += T(s.w01) * g;
      grad[base + size_t(s.i1) * tp.W + s.j0] += T(s.w10) * g;
      grad[base + size_t(s.i1) * tp.W + s.j1] += T(s.w11) * g;
    }
  }
}

// ---------------------------------------------------------------------------
// Pseudo-image stack: 6 images of 3 channels each, canonical order
// [xy ch0-2, xy ch3-5, xz ch0-2, xz ch3-5, yz ch0-2, yz ch3-5]. With the
// plane-major channel layout this is exactly the triplane buffer, so packing
// is a checked copy and the bijection is bitwise.

template <scalar T>
std::vector<T> pack_pseudo_images(const triplane_grid<T>& tp) {
  check(tp.C == 6, "pseudo-image packing requires 6 channels");
  return tp.data;
}

template <scalar T>
triplane_grid<T> unpack_pseudo_images(const std::vector<T>& stack, int H,
                                      int W) {
  check(stack.size() == size_t(6) * 3 * H * W,
        "pseudo-image stack has the wrong size");
  triplane_grid<T> tp(6, H, W);
  tp.data = stack;
  return tp;
}

// ---------------------------------------------------------------------------
// Shared MLP decoder: 18 -> 32 -> 32 -> 32 -> 4, ReLU hidden layers, sigmoid
// rgb head, softplus density head. Weights are row-major [in][out].

template <scalar T>
struct decoder_params {
  static constexpr int kW1 = 0;
  static constexpr int kB1 = kW1 + kFeatDim * kHidden;
  static constexpr int kW2 = kB1 + kHidden;
  static constexpr int kB2 = kW2 + kHidden * kHidden;
  static constexpr int kW3 = kB2 + kHidden;
  static constexpr int kB3 = kW3 + kHidden * kHidden;
  static constexpr int kW4 = kB3 + kHidden;
  static constexpr int kB4 = kW4 + kHidden * kDecoderOut;
  static constexpr int kTotal = kB4 + kDecoderOut;

  std::vector<T> data = std::vector<T>(kTotal, T(0));

  T* w1() { return data.data() + kW1; }
  T* b1() { return data.data() + kB1; }
  T* w2() { return data.data() + kW2; }
  T* b2() { return data.data() + kB2; }
  T* w3() { return data.data() + kW3; }
  T* b3() { return data.data() + kB3; }
  T* w4() { return data.data() + kW4; }
  T* b4() { return data.data() + kB4; }
  const T* w1() const { return data.data() + kW1; }
  const T* b1() const { return data.data() + kB1; }
  const T* w2() const { return data.data() + kW2; }
  const T* b2() const { return data.data() + kB2; }
  const T* w3() const { return data.data() + kW3; }
  const T* b3() const { return data.data() + kB3; }
  const T* w4() const { return data.data() + kW4; }
  const T* b4() const { return data.data() + kB4; }
};

template <scalar T>
T stable_sigmoid(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  T e = std::exp(x);
  return e / (T(1) + e);
}

template <scalar T>
T stable_softplus(T x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// He-normal hidden layers, small head layer, zero biases.
template <scalar T>
decoder_params<T> init_decoder(uint64_t seed) {
  decoder_params<T> dec;
  auto fill = [&](int off, int fan_in, int n, double std_scale) {
    double s = std_scale / std::sqrt(double(fan_in));
    for (int i = 0; i < n; ++i)
      dec.data[off + i] = T(s * normal01(hash_mix(seed, off + i)));
  };
  fill(decoder_params<T>::kW1, kFeatDim, kFeatDim * kHidden, std::sqrt(2.0));
  fill(decoder_params<T>::kW2, kHidden, kHidden * kHidden, std::sqrt(2.0));
  fill(decoder_params<T>::kW3, kHidden, kHidden * kHidden, std::sqrt(2.0));
  fill(decoder_params<T>::kW4, kHidden, kHidden * kDecoderOut, 0.1);
  return dec;
}

// Scratch for a batched decoder pass over P points.
template <scalar T>
struct decoder_batch {
  int P = 0;
  std::vector<T> x;            // P x 18 input features
  std::vector<T> h1, h2, h3;   // P x 32 post-relu activations
  std::vector<T> y;            // P x 4 pre-activation heads
  std::vector<T> rgb;          // P x 3
  std::vector<T> sigma;        // P

  void resize(int P_) {
    P = P_;
    x.assign(size_t(P) * kFeatDim, T(0));
    h1.assign(size_t(P) * kHidden, T(0));
    h2.assign(size_t(P) * kHidden, T(0));
    h3.assign(size_t(P) * kHidden, T(0));
    y.assign(size_t(P) * kDecoderOut, T(0));
    rgb.assign(size_t(P) * 3, T(0));
    sigma.assign(size_t(P), T(0));
  }
};

namespace detail {

template <scalar T>
void add_bias_relu(int P, int N, const T* b, T* h) {
  for (int i = 0; i < P; ++i)
    for (int j = 0; j < N; ++j) {
      T v = h[size_t(i) * N + j] + b[j];
      h[size_t(i) * N + j] = v > 0 ? v : T(0);
    }
}

template <scalar T>
void add_bias(int P, int N, const T* b, T* h) {
  for (int i = 0; i < P; ++i)
    for (int j = 0; j < N; ++j) h[size_t(i) * N + j] += b[j];
}

template <scalar T>
void relu_mask_grad(int P, int N, const T* post, T* dh) {
  for (size_t i = 0; i < size_t(P) * N; ++i)
    if (post[i] <= 0) dh[i] = T(0);
}

template <scalar T>
void accumulate_colsum(int P, int N, const T* dy, T* db) {
  for (int j = 0; j < N; ++j) {
    T acc = 0;
    for (int i = 0; i < P; ++i) acc += dy[size_t(i) * N + j];
    db[j] += acc;
  }
}

}  // namespace detail

// Forward pass over batch.x; fills h1..h3, y, rgb, sigma. Runs serially: the
// renderer parallelizes over ray chunks above this call.
template <scalar T>
void decoder_forward(const decoder_params<T>& dec, decoder_batch<T>& b) {
  const int P = b.P;
  gemm_nn(P, kHidden, kFeatDim, T(1), b.x.data(), dec.w1(), T(0), b.h1.data());
  detail::add_bias_relu(P, kHidden, dec.b1(), b.h1.data());
  gemm_nn(P, kHidden, kHidden, T(1), b.h1.data(), dec.w2(), T(0), b.h2.data());
  detail::add_bias_relu(P, kHidden, dec.b2(), b.h2.data());
  gemm_nn(P, kHidden, kHidden, T(1), b.h2.data(), dec.w3(), T(0), b.h3.data());
  detail::add_bias_relu(P, kHidden, dec.b3(), b.h3.data());
  gemm_nn(P, kDecoderOut, kHidden, T(1), b.h3.data(), dec.w4(), T(0),
          b.y.data());
  detail::add_bias(P, kDecoderOut, dec.b4(), b.y.data());
  for (int i = 0; i < P; ++i) {
    const T* y = b.y.data() + size_t(i) * kDecoderOut;
    for (int c = 0; c < 3; ++c) b.rgb[size_t(i) * 3 + c] = stable_sigmoid(y[c]);
    b.sigma[i] = stable_softplus(y[3]);
    check(std::isfinite(b.sigma[i]),
          "non-finite density at sample " + std::to_string(i));
  }
}

// Backward pass: consumes d_rgb (P x 3) and d_sigma (P), accumulates decoder
// gradients into dgrad.data and writes feature gradients to dx (P x 18).
template <scalar T>
void decoder_backward(const decoder_params<T>& dec, const decoder_batch<T>& b,
                      const T* d_rgb, const T* d_sigma,
                      decoder_params<T>& dgrad, T* dx,
                      std::vector<T>& scratch) {
  const int P = b.P;
  scratch.assign(size_t(P) * (kDecoderOut + 3 * kHidden), T(0));
  T* dy = scratch.data();
  T* dh3 = dy + size_t(P) * kDecoderOut;
  T* dh2 = dh3 + size_t(P) * kHidden;
  T* dh1 = dh2 + size_t(P) * kHidden;

  for (int i = 0; i < P; ++i) {
    const T* y = b.y.data() + size_t(i) * kDecoderOut;
    T* dyi = dy + size_t(i) * kDecoderOut;
    for (int c = 0; c < 3; ++c) {
      T s = b.rgb[size_t(i) * 3 + c];
      dyi[c] = d_rgb[size_t(i) * 3 + c] * s * (T(1) - s);
    }
    dyi[3] = d_sigma[i] * stable_sigmoid(y[3]);  // softplus' = sigmoid
  }

  gemm_tn(kHidden, kDecoderOut, P, T(1), b.h3.data(), dy, T(1), dgrad.w4());
  detail::accumulate_colsum(P, kDecoderOut, dy, dgrad.b4());
  gemm_nt(P, kHidden, kDecoderOut, T(1), dy, dec.w4(), T(0), dh3);
  detail::relu_mask_grad(P, kHidden, b.h3.data(), dh3);

  gemm_tn(kHidden, kHidden, P, T(1), b.h2.data(), dh3, T(1), dgrad.w3());
  detail::accumulate_colsum(P, kHidden, dh3, dgrad.b3());
  gemm_nt(P, kHidden, kHidden, T(1), dh3, dec.w3(), T(0), dh2);
  detail::relu_mask_grad(P, kHidden, b.h2.data(), dh2);

  gemm_tn(kHidden, kHidden, P, T(1), b.h1.data(), dh2, T(1), dgrad.w2());
  detail::accumulate_colsum(P, kHidden, dh2, dgrad.b2());
  gemm_nt(P, kHidden, kHidden, T(1), dh2, dec.w2(), T(0), dh1);
  detail::relu_mask_grad(P, kHidden, b.h1.data(), dh1);

  gemm_tn(kFeatDim, kHidden, P, T(1), b.x.data(), dh1, T(1), dgrad.w1());
  detail::accumulate_colsum(P, kHidden, dh1, dgrad.b1());
  gemm_nt(P, kFeatDim, kHidden, T(1), dh1, dec.w1(), T(0), dx);
}

// Convenience single-point decode used by tests and mesh export.
template <scalar T>
void decode_point(const decoder_params<T>& dec, const T* feat, T rgb[3],
                  T& sigma) {
  decoder_batch<T> b;
  b.resize(1);
  std::copy(feat, feat + kFeatDim, b.x.begin());
  decoder_forward(dec, b);
  rgb[0] = b.rgb[0];
  rgb[1] = b.rgb[1];
  rgb[2] = b.rgb[2];
  sigma = b.sigma[0];
}

// ---------------------------------------------------------------------------
// Finalization into [-1, 1] before the triplane becomes diffusion data.

enum class finalize_kind { clamp, rescale };

struct finalize_report {
  double inside_fraction = 1;  // texels already inside [-1, 1]
  double max_abs = 0;
};

template <scalar T>
finalize_report finalize_triplane(triplane_grid<T>& tp,
                                  finalize_kind kind = finalize_kind::clamp) {
  finalize_report rep;
  size_t inside = 0;
  for (T v : tp.data) {
    rep.max_abs = std::max(rep.max_abs, double(std::abs(v)));
    inside += std::abs(v) <= T(1);
  }
  rep.inside_fraction = tp.data.empty() ? 1.0 : double(inside) / tp.data.size();
  if (kind == finalize_kind::clamp) {
    for (T& v : tp.data) v = clamp(v, T(-1), T(1));
  } else if (rep.max_abs > 1) {
    T s = T(1) / T(rep.max_abs);
    for (T& v : tp.data) v *= s;
  }
  return rep;
}

}  // namespace pi3d
