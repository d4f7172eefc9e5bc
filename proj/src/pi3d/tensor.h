#pragma once

// Reverse-mode autodiff on a dynamic tape of dense tensors. Each op builds a
// node holding its value and a closure that pushes upstream gradients into
// its parents. Reductions and accumulations run in a fixed order, so results
// are bitwise reproducible for any thread count.

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>

#include "kernels.h"

namespace pi3d {
namespace ag {

template <scalar T>
struct node {
  std::vector<int> shape;
  std::vector<T> val;
  std::vector<T> grad;
  bool needs_grad = false;
  bool is_param = false;
  std::vector<std::shared_ptr<node>> parents;
  std::function<void()> backprop;

  int64_t numel() const {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }
  int dim(size_t i) const {
    check(i < shape.size(), "dim index out of range");
    return shape[i];
  }
  void ensure_grad() {
    if (grad.size() != val.size()) grad.assign(val.size(), T(0));
  }
};

template <scalar T>
using tptr = std::shared_ptr<node<T>>;

template <scalar T>
tptr<T> make_node(std::vector<int> shape, bool needs_grad = false) {
  auto n = std::make_shared<node<T>>();
  n->shape = std::move(shape);
  int64_t count = 1;
  for (int d : n->shape) {
    check(d > 0, "tensor dims must be positive");
    count *= d;
  }
  n->val.assign(size_t(count), T(0));
  n->needs_grad = needs_grad;
  return n;
}

template <scalar T>
tptr<T> make_param(std::vector<int> shape) {
  auto n = make_node<T>(std::move(shape), true);
  n->is_param = true;
  n->ensure_grad();
  return n;
}

template <scalar T>
tptr<T> make_const(std::vector<int> shape, std::vector<T> data) {
  auto n = make_node<T>(std::move(shape));
  check(int64_t(data.size()) == n->numel(), "const data size mismatch");
  n->val = std::move(data);
  return n;
}

namespace detail {

template <scalar T>
bool any_grad(const std::vector<tptr<T>>& parents) {
  for (const auto& p : parents)
    if (p->needs_grad) return true;
  return false;
}

// Registers parents + closure only when a gradient path exists; otherwise the
// node is a detached value and the inputs can be freed by the caller.
template <scalar T, typename Fn>
void attach(const tptr<T>& out, std::vector<tptr<T>> parents, Fn&& fn) {
  if (!any_grad(parents)) return;
  out->needs_grad = true;
  out->parents = std::move(parents);
  out->backprop = std::forward<Fn>(fn);
}

}  // namespace detail

// Runs reverse-mode accumulation from a scalar root (seed gradient 1).
template <scalar T>
void backward(const tptr<T>& root) {
  check(root->numel() == 1, "backward expects a scalar root");
  std::vector<node<T>*> order;
  std::unordered_set<node<T>*> seen;
  std::function<void(node<T>*)> dfs = [&](node<T>* n) {
    if (!n->needs_grad || seen.count(n)) return;
    seen.insert(n);
    for (auto& p : n->parents) dfs(p.get());
    order.push_back(n);
  };
  dfs(root.get());
  for (node<T>* n : order)
    if (!n->is_param) n->grad.assign(n->val.size(), T(0));
  root->ensure_grad();
  root->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backprop) (*it)->backprop();
}

// ---------------------------------------------------------------------------
// Elementwise and broadcast ops

template <scalar T>
tptr<T> add(const tptr<T>& a, const tptr<T>& b) {
  check(a->shape == b->shape, "add shape mismatch");
  auto out = make_node<T>(a->shape);
  const int64_t n = a->numel();
#pragma omp parallel for schedule(static) if (run_parallel())
  for (int64_t i = 0; i < n; ++i) out->val[i] = a->val[i] + b->val[i];
  detail::attach(out, {a, b}, [o = out.get(), a, b] {
    const int64_t n = o->numel();
    if (a->needs_grad) {
      a->ensure_grad();
#pragma omp parallel for schedule(static) if (run_parallel())
      for (int64_t i = 0; i < n; ++i) a->grad[i] += o->grad[i];
    }
    if (b->needs_grad) {
      b->ensure_grad();
#pragma omp parallel for schedule(static) if (run_parallel())
      for (int64_t i = 0; i < n; ++i) b->grad[i] += o->grad[i];
    }
  });
  return out;
}

template <scalar T>
tptr<T> scale(const tptr<T>& a, T c) {
  auto out = make_node<T>(a->shape);
  const int64_t n = a->numel();
#pragma omp parallel for schedule(static) if (run_parallel())
  for (int64_t i = 0; i < n; ++i) out->val[i] = c * a->val[i];
  detail::attach(out, {a}, [o = out.get(), a, c] {
    a->ensure_grad();
    const int64_t n = o->numel();
#pragma omp parallel for schedule(static) if (run_parallel())
    for (int64_t i = 0; i < n; ++i) a->grad[i] += c * o->grad[i];
  });
  return out;
}

template <scalar T>
tptr<T> silu(const tptr<T>& a) {
  auto out = make_node<T>(a->shape);
  const int64_t n = a->numel();
#pragma omp parallel for schedule(static) if (run_parallel())
  for (int64_t i = 0; i < n; ++i) {
    T s = T(1) / (T(1) + std::exp(-a->val[i]));
    out->val[i] = a->val[i] * s;
  }
  detail::attach(out, {a}, [o = out.get(), a] {
    a->ensure_grad();
    const int64_t n = o->numel();
#pragma omp parallel for schedule(static) if (run_parallel())
    for (int64_t i = 0; i < n; ++i) {
      T x = a->val[i];
      T s = T(1) / (T(1) + std::exp(-x));
      a->grad[i] += o->grad[i] * s * (T(1) + x * (T(1) - s));
    }
  });
  return out;
}

// x[B,C,H,W] + bias[C]
template <scalar T>
tptr<T> add_channels(const tptr<T>& x, const tptr<T>& bias) {
  check(x->shape.size() == 4 && bias->shape.size() == 1 &&
            bias->dim(0) == x->dim(1),
        "add_channels shape mismatch");
  auto out = make_node<T>(x->shape);
  const int64_t B = x->dim(0), C = x->dim(1);
  const int64_t hw = int64_t(x->dim(2)) * x->dim(3);
#pragma omp parallel for schedule(static) if (run_parallel())
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const T bv = bias->val[size_t(bc % C)];
    const T* src = x->val.data() + bc * hw;
    T* dst = out->val.data() + bc * hw;
    for (int64_t i = 0; i < hw; ++i) dst[i] = src[i] + bv;
  }
  detail::attach(out, {x, bias}, [o = out.get(), x, bias, B, C, hw] {
    if (x->needs_grad) {
      x->ensure_grad();
      const int64_t n = o->numel();
#pragma omp parallel for schedule(static) if (run_parallel())
      for (int64_t i = 0; i < n; ++i) x->grad[i] += o->grad[i];
    }
    if (bias->needs_grad) {
      bias->ensure_grad();
#pragma omp parallel for schedule(static) if (run_parallel())
      for (int64_t c = 0; c < C; ++c) {
        T acc = 0;
        for (int64_t b = 0; b < B; ++b) {
          const T* g = o->grad.data() + (b * C + c) * hw;
          for (int64_t i = 0; i < hw; ++i) acc += g[i];
        }
        bias->grad[size_t(c)] += acc;
      }
    }
  });
  return out;
}

// x[B,C,H,W] + v[B,C] broadcast over the spatial extent
template <scalar T>
tptr<T> add_vec_hw(const tptr<T>& x, const tptr<T>& v) {
  check(x->shape.size() == 4 && v->shape.size() == 2 &&
            v->dim(0) == x->dim(0) && v->dim(1) == x->dim(1),
        "add_vec_hw shape mismatch");
  auto out = make_node<T>(x->shape);
  const int64_t BC = int64_t(x->dim(0)) * x->dim(1);
  const int64_t hw = int64_t(x->dim(2)) * x->dim(3);
#pragma omp parallel for schedule(static) if (run_parallel())
  for (int64_t bc = 0; bc < BC; ++bc) {
    const T add_v = v->val[size_t(bc)];
    const T* src = x->val.data() + bc * hw;
    T* dst = out->val.data() + bc * hw;
    for (int64_t i = 0; i < hw; ++i) dst[i] = src[i] + add_v;
  }
  detail::attach(out, {x, v}, [o = out.get(), x, v, BC, hw] {
    if (x->needs_grad) {
      x->ensure_grad();
      const int64_t n = o->numel();
#pragma omp parallel for schedule(static) if (run_parallel())
      for (int64_t i = 0; i < n; ++i) x->grad[i] += o->grad[i];
    }
    if (v->needs_grad) {
      v->ensure_grad();
#pragma omp parallel for schedule(static) if (run_parallel())
      for (int64_t bc = 0; bc < BC; ++bc) {
        const T* g = o->grad.data() + bc * hw;
        T acc = 0;
        for (int64_t i = 0; i < hw; ++i) acc += g[i];
        v->grad[size_t(bc)] += acc;
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

// y[N,M] = x[N,K] * w[K,M] (+ bias[M])
template <scalar T>
tptr<T> linear(const tptr<T>& x, const tptr<T>& w,
               const tptr<T>& bias = nullptr) {
  check(x->shape.size() == 2 && w->shape.size() == 2 &&
            x->dim(1) == w->dim(0),
        "linear shape mismatch");
  const int N = x->dim(0), K = x->dim(1), M = w->dim(1);
  auto out = make_node<T>({N, M});
  gemm_nn(N, M, K, T(1), x->val.data(), w->val.data(), T(0), out->val.data());
  if (bias) {
    check(bias->shape.size() == 1 && bias->dim(0) == M, "bad bias shape");
    const int64_t n = out->numel();
#pragma omp parallel for schedule(static) if (run_parallel())
    for (int64_t i = 0; i < n; ++i) out->val[i] += bias->val[size_t(i % M)];
  }
  std::vector<tptr<T>> parents = {x, w};
  if (bias) parents.push_back(bias);
  detail::attach(out, std::move(parents),
                 [o = out.get(), x, w, bias, N, K, M] {
                   if (x->needs_grad) {
                     x->ensure_grad();
                     gemm_nt(N, K, M, T(1), o->grad.data(), w->val.data(),
                             T(1), x->grad.data());
                   }
                   if (w->needs_grad) {
                     w->ensure_grad();
                     gemm_tn(K, M, N, T(1), x->val.data(), o->grad.data(),
                             T(1), w->grad.data());
                   }
                   if (bias && bias->needs_grad) {
                     bias->ensure_grad();
#pragma omp parallel for schedule(static) if (run_parallel())
                     for (int m = 0; m < M; ++m) {
                       T acc = 0;
                       for (int i = 0; i < N; ++i)
                         acc += o->grad[size_t(i) * M + m];
                       bias->grad[size_t(m)] += acc;
                     }
                   }
                 });
  return out;
}

// y[B,N,M] = a[B,N,K] * b[B,K,M]
template <scalar T>
tptr<T> bmatmul_nn(const tptr<T>& a, const tptr<T>& b) {
  check(a->shape.size() == 3 && b->shape.size() == 3 &&
            a->dim(0) == b->dim(0) && a->dim(2) == b->dim(1),
        "bmatmul_nn shape mismatch");
  const int B = a->dim(0), N = a->dim(1), K = a->dim(2), M = b->dim(2);
  auto out = make_node<T>({B, N, M});
  for (int i = 0; i < B; ++i)
    gemm_nn(N, M, K, T(1), a->val.data() + size_t(i) * N * K,
            b->val.data() + size_t(i) * K * M, T(0),
            out->val.data() + size_t(i) * N * M);
  detail::attach(out, {a, b}, [o = out.get(), a, b, B, N, K, M] {
    if (a->needs_grad) a->ensure_grad();
    if (b->needs_grad) b->ensure_grad();
    for (int i = 0; i < B; ++i) {
      const T* g = o->grad.data() + size_t(i) * N * M;
      if (a->needs_grad)
        gemm_nt(N, K, M, T(1), g, b->val.data() + size_t(i) * K * M, T(1),
                a->grad.data() + size_t(i) * N * K);
      if (b->needs_grad)
        gemm_tn(K, M, N, T(1), a->val.data() + size_t(i) * N * K, g, T(1),
                b->grad.data() + size_t(i) * K * M);
    }
  });
  return out;
}

// y[B,N,M] = a[B,N,K] * b[B,M,K]^T
template <scalar T>
tptr<T> bmatmul_nt(const tptr<T>& a, const tptr<T>& b) {
  check(a->shape.size() == 3 && b->shape.size() == 3 &&
            a->dim(0) == b->dim(0) && a->dim(2) == b->dim(2),
        "bmatmul_nt shape mismatch");
  const int B = a->dim(0), N = a->dim(1), K = a->dim(2), M = b->dim(1);
  auto out = make_node<T>({B, N, M});
  for (int i = 0; i < B; ++i)
    gemm_nt(N, M, K, T(1), a->val.data() + size_t(i) * N * K,
            b->val.data() + size_t(i) * M * K, T(0),
            out->val.data() + size_t(i) * N * M);
  detail::attach(out, {a, b}, [o = out.get(), a, b, B, N, K, M] {
    if (a->needs_grad) a->ensure_grad();
    if (b->needs_grad) b->ensure_grad();
    for (int i = 0; i < B; ++i) {
      const T* g = o->grad.data() + size_t(i) * N * M;
      if (a->needs_grad)
        gemm_nn(N, K, M, T(1), g, b->val.data() + size_t(i) * M * K, T(1),
                a->grad.data() + size_t(i) * N * K);
      if (b->needs_grad)
        gemm_tn(M, K, N, T(1), g, a->val.data() + size_t(i) * N * K, T(1),
                b->grad.data() + size_t(i) * M * K);
    }
  });
  return out;
}

// Softmax over the last dim of x[B,N,M]; optional additive mask[B,M]
// (typically 0 / -inf-like) applied to every row of the batch entry.
template <scalar T>
tptr<T> softmax_rows(const tptr<T>& x, const tptr<T>& mask = nullptr) {
  check(x->shape.size() == 3, "softmax_rows wants [B,N,M]");
  const int B = x->dim(0), N = x->dim(1), M = x->dim(2);
  if (mask)
    check(mask->shape.size() == 2 && mask->dim(0) == B && mask->dim(1) == M,
          "softmax mask shape mismatch");
  auto out = make_node<T>(x->shape);
  const int64_t rows = int64_t(B) * N;
#pragma omp parallel for schedule(static) if (run_parallel())
  for (int64_t r = 0; r < rows; ++r) {
    const T* src = x->val.data() + r * M;
    const T* mk = mask ? mask->val.data() + (r / N) * M : nullptr;
    T* dst = out->val.data() + r * M;
    T mx = -std::numeric_limits<T>::infinity();
    for (int m = 0; m < M; ++m) {
      T v = src[m] + (mk ? mk[m] : T(0));
      mx = std::max(mx, v);
    }
    T sum = 0;
    for (int m = 0; m < M; ++m) {
      T v = std::exp(src[m] + (mk ? mk[m] : T(0)) - mx);
      dst[m] = v;
      sum += v;
    }
    for (int m = 0; m < M; ++m) dst[m] /= sum;
  }
  std::vector<tptr<T>> parents = {x};
  if (mask) parents.push_back(mask);  // mask is constant but keeps it alive
  detail::attach(out, std::move(parents), [o = out.get(), x, rows, M] {
    x->ensure_grad();
#pragma omp parallel for schedule(static) if (run_parallel())
    for (int64_t r = 0; r < rows; ++r) {
      const T* y = o->val.data() + r * M;
      const T* g = o->grad.data() + r * M;
      T* dx = x->grad.data() + r * M;
      T dot = 0;
      for (int m = 0; m < M; ++m) dot += g[m] * y[m];
      for (int m = 0; m < M; ++m) dx[m] += y[m] * (g[m] - dot);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Shape plumbing

template <scalar T>
tptr<T> reshape(const tptr<T>& x, std::vector<int> shape) {
  auto out = make_node<T>(std::move(shape));
  check(out->numel() == x->numel(), "reshape element count mismatch");
  out->val = x->val;
  detail::attach(out, {x}, [o = out.get(), x] {
    x->ensure_grad();
    const int64_t n = o->numel();
#pragma omp parallel for schedule(static) if (run_parallel())
    for (int64_t i = 0; i < n; ++i) x->grad[i] += o->grad[i];
  });
  return out;
}

// [B,C,H,W] -> [B, H*W, C]
template <scalar T>
tptr<T> nchw_to_tokens(const tptr<T>& x) {
  check(x->shape.size() == 4, "nchw_to_tokens wants 4D");
  const int B = x->dim(0), C = x->dim(1);
  const int64_t hw = int64_t(x->dim(2)) * x->dim(3);
  auto out = make_node<T>({B, int(hw), C});
#pragma omp parallel for schedule(static) if (run_parallel())
  for (int64_t b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int64_t i = 0; i < hw; ++i)
        out->val[(b * hw + i) * C + c] = x->val[(b * C + c) * hw + i];
  detail::attach(out, {x}, [o = out.get(), x, B, C, hw] {
    x->ensure_grad();
#pragma omp parallel for schedule(static) if (run_parallel())
    for (int64_t b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c)
        for (int64_t i = 0; i < hw; ++i)
          x->grad[(b * C + c) * hw + i] += o->grad[(b * hw + i) * C + c];
  });
  return out;
}

// [B, H*W, C] -> [B,C,H,W]
template <scalar T>
tptr<T> tokens_to_nchw(const tptr<T>& x, int h, int w) {
  check(x->shape.size() == 3 && x->dim(1) == h * w, "tokens_to_nchw mismatch");
  const int B = x->dim(0), C = x->dim(2);
  const int64_t hw = int64_t(h) * w;
  auto out = make_node<T>({B, C, h, w});
#pragma omp parallel for schedule(static) if (run_parallel())
  for (int64_t b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int64_t i = 0; i < hw; ++i)
        out->val[(b * C + c) * hw + i] = x->val[(b * hw + i) * C + c];
  detail::attach(out, {x}, [o = out.get(), x, B, C, hw] {
    x->ensure_grad();
#pragma omp parallel for schedule(static) if (run_parallel())
    for (int64_t b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c)
        for (int64_t i = 0; i < hw; ++i)
          x->grad[(b * hw + i) * C + c] += o->grad[(b * C + c) * hw + i];
  });
  return out;
}

// [B,N,C] -> [B*heads, N, C/heads]
template <scalar T>
tptr<T> split_heads(const tptr<T>& x, int heads) {
  check(x->shape.size() == 3 && x->dim(2) % heads == 0,
        "split_heads dimension mismatch");
  const int B = x->dim(0), N = x->dim(1), C = x->dim(2), D = C / heads;
  auto out = make_node<T>({B * heads, N, D});
#pragma omp parallel for schedule(static) if (run_parallel())
  for (int64_t b = 0; b < B; ++b)
    for (int a = 0; a < heads; ++a)
      for (int n = 0; n < N; ++n)
        for (int d = 0; d < D; ++d)
          out->val[((size_t(b) * heads + a) * N + n) * D + d] =
              x->val[(size_t(b) * N + n) * C + a * D + d];
  detail::attach(out, {x}, [o = out.get(), x, B, N, C, D, heads] {
    x->ensure_grad();
#pragma omp parallel for schedule(static) if (run_parallel())
    for (int64_t b = 0; b < B; ++b)
      for (int a = 0; a < heads; ++a)
        for (int n = 0; n < N; ++n)
          for (int d = 0; d < D; ++d)
            x->grad[(size_t(b) * N + n) * C + a * D + d] +=
                o->grad[((size_t(b) * heads + a) * N + n) * D + d];
  });
  return out;
}

// [B*heads, N, D] -> [B, N, heads*D]
template <scalar T>
tptr<T> merge_heads(const tptr<T>& x, int heads) {
  check(x->shape.size() == 3 && x->dim(0) % heads == 0,
        "merge_heads dimension mismatch");
  const int B = x->dim(0) / heads, N = x->dim(1), D = x->dim(2);
  auto out = make_node<T>({B, N, heads * D});
#pragma omp parallel for schedule(static) if (run_parallel())
  for (int64_t b = 0; b < B; ++b)
    for (int a = 0; a < heads; ++a)
      for (int n = 0; n < N; ++n)
        for (int d = 0; d < D; ++d)
          out->val[(size_t(b) * N + n) * (heads * D) + a * D + d] =
              x->val[((size_t(b) * heads + a) * N + n) * D + d];
  detail::attach(out, {x}, [o = out.get(), x, B, N, D, heads] {
    x->ensure_grad();
#pragma omp parallel for schedule(static) if (run_parallel())
    for (int64_t b = 0; b < B; ++b)
      for (int a = 0; a < heads; ++a)
        for (int n = 0; n < N; ++n)
          for (int d = 0; d < D; ++d)
            x->grad[((size_t(b) * heads + a) * N + n) * D + d] +=
                o->grad[(size_t(b) * N + n) * (heads * D) + a * D + d];
  });
  return out;
}

// Concatenate along the channel dim of [B,C,H,W].
template <scalar T>
tptr<T> concat_ch(const tptr<T>& a, const tptr<T>& b) {
  check(a->shape.size() == 4 && b->shape.size() == 4 &&
            a->dim(0) == b->dim(0) && a->dim(2) == b->dim(2) &&
            a->dim(3) == b->dim(3),
        "concat_ch shape mismatch");
  const int B = a->dim(0), Ca = a->dim(1), Cb = b->dim(1);
  const int64_t hw = int64_t(a->dim(2)) * a->dim(3);
  auto out = make_node<T>({B, Ca + Cb, a->dim(2), a->dim(3)});
#pragma omp parallel for schedule(static) if (run_parallel())
  for (int64_t i = 0; i < B; ++i) {
    std::copy_n(a->val.data() + i * Ca * hw, Ca * hw,
                out->val.data() + i * (Ca + Cb) * hw);
    std::copy_n(b->val.data() + i * Cb * hw, Cb * hw,
                out->val.data() + i * (Ca + Cb) * hw + Ca * hw);
  }
  detail::attach(out, {a, b}, [o = out.get(), a, b, B, Ca, Cb, hw] {
    if (a->needs_grad) a->ensure_grad();
    if (b->needs_grad) b->ensure_grad();
#pragma omp parallel for schedule(static) if (run_parallel())
    for (int64_t i = 0; i < B; ++i) {
      const T* g = o->grad.data() + i * (Ca + Cb) * hw;
      if (a->needs_grad)
        for (int64_t k = 0; k < Ca * hw; ++k) a->grad[i * Ca * hw + k] += g[k];
      if (b->needs_grad)
        for (int64_t k = 0; k < Cb * hw; ++k)
          b->grad[i * Cb * hw + k] += g[Ca * hw + k];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Convolutions (3x3 or 1x1, padding preserves size at stride 1)

namespace detail {

template <scalar T>
void im2col(const T* img, int C, int H, int W, int k, int stride, int pad,
            int oh, int ow, T* cols) {
  // cols is [C*k*k, oh*ow]
  for (int c = 0; c < C; ++c)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        T* dst = cols + size_t((c * k + ki) * k + kj) * oh * ow;
        for (int i = 0; i < oh; ++i) {
          int si = i * stride + ki - pad;
          for (int j = 0; j < ow; ++j) {
            int sj = j * stride + kj - pad;
            dst[size_t(i) * ow + j] =
                (si >= 0 && si < H && sj >= 0 && sj < W)
                    ? img[size_t(c) * H * W + size_t(si) * W + sj]
                    : T(0);
          }
        }
      }
}

template <scalar T>
void col2im(const T* cols, int C, int H, int W, int k, int stride, int pad,
            int oh, int ow, T* img) {
  for (int c = 0; c < C; ++c)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        const T* src = cols + size_t((c * k + ki) * k + kj) * oh * ow;
        for (int i = 0; i < oh; ++i) {
          int si = i * stride + ki - pad;
          if (si < 0 || si >= H) continue;
          for (int j = 0; j < ow; ++j) {
            int sj = j * stride + kj - pad;
            if (sj >= 0 && sj < W)
              img[size_t(c) * H * W + size_t(si) * W + sj] +=
                  src[size_t(i) * ow + j];
          }
        }
      }
}

}  // namespace detail

// x[B,Ci,H,W], w[Co,Ci,k,k], bias[Co] optional; stride 1 or 2, pad = k/2.
template <scalar T>
tptr<T> conv2d(const tptr<T>& x, const tptr<T>& w,
               const tptr<T>& bias = nullptr, int stride = 1) {
  check(x->shape.size() == 4 && w->shape.size() == 4, "conv2d wants 4D");
  check(w->dim(1) == x->dim(1), "conv2d channel mismatch");
  check(w->dim(2) == w->dim(3), "conv2d kernel must be square");
  const int B = x->dim(0), Ci = x->dim(1), H = x->dim(2), W = x->dim(3);
  const int Co = w->dim(0), k = w->dim(2), pad = k / 2;
  const int oh = (H + 2 * pad - k) / stride + 1;
  const int ow = (W + 2 * pad - k) / stride + 1;
  const int ck = Ci * k * k;
  auto out = make_node<T>({B, Co, oh, ow});
  std::vector<T> cols(size_t(ck) * oh * ow);
  for (int b = 0; b < B; ++b) {
    detail::im2col(x->val.data() + size_t(b) * Ci * H * W, Ci, H, W, k,
                   stride, pad, oh, ow, cols.data());
    gemm_nn(Co, oh * ow, ck, T(1), w->val.data(), cols.data(), T(0),
            out->val.data() + size_t(b) * Co * oh * ow);
  }
  if (bias) {
    check(bias->dim(0) == Co, "conv2d bias mismatch");
    const int64_t n = out->numel();
    const int64_t hw = int64_t(oh) * ow;
#pragma omp parallel for schedule(static) if (run_parallel())
    for (int64_t i = 0; i < n; ++i)
      out->val[i] += bias->val[size_t((i / hw) % Co)];
  }
  std::vector<tptr<T>> parents = {x, w};
  if (bias) parents.push_back(bias);
  detail::attach(
      out, std::move(parents),
      [o = out.get(), x, w, bias, B, Ci, H, W, Co, k, pad, stride, oh, ow,
       ck] {
        std::vector<T> cols(size_t(ck) * oh * ow);
        std::vector<T> dcols(size_t(ck) * oh * ow);
        if (x->needs_grad) x->ensure_grad();
        if (w->needs_grad) w->ensure_grad();
        for (int b = 0; b < B; ++b) {
          const T* g = o->grad.data() + size_t(b) * Co * oh * ow;
          if (w->needs_grad) {
            detail::im2col(x->val.data() + size_t(b) * Ci * H * W, Ci, H, W,
                           k, stride, pad, oh, ow, cols.data());
            gemm_nt(Co, ck, oh * ow, T(1), g, cols.data(), T(1),
                    w->grad.data());
          }
          if (x->needs_grad) {
            gemm_tn(ck, oh * ow, Co, T(1), w->val.data(), g, T(0),
                    dcols.data());
            detail::col2im(dcols.data(), Ci, H, W, k, stride, pad, oh, ow,
                           x->grad.data() + size_t(b) * Ci * H * W);
          }
        }
        if (bias && bias->needs_grad) {
          bias->ensure_grad();
          const int64_t hw = int64_t(oh) * ow;
#pragma omp parallel for schedule(static) if (run_parallel())
          for (int c = 0; c < Co; ++c) {
            T acc = 0;
            for (int b = 0; b < B; ++b) {
              const T* g = o->grad.data() + (size_t(b) * Co + c) * hw;
              for (int64_t i = 0; i < hw; ++i) acc += g[i];
            }
            bias->grad[size_t(c)] += acc;
          }
        }
      });
  return out;
}

// Nearest-neighbor 2x upsample.
template <scalar T>
tptr<T> upsample2x(const tptr<T>& x) {
  check(x->shape.size() == 4, "upsample2x wants 4D");
  const int B = x->dim(0), C = x->dim(1), H = x->dim(2), W = x->dim(3);
  auto out = make_node<T>({B, C, 2 * H, 2 * W});
  const int64_t bc = int64_t(B) * C;
#pragma omp parallel for schedule(static) if (run_parallel())
  for (int64_t p = 0; p < bc; ++p) {
    const T* src = x->val.data() + p * H * W;
    T* dst = out->val.data() + p * 4 * H * W;
    for (int i = 0; i < 2 * H; ++i)
      for (int j = 0; j < 2 * W; ++j)
        dst[size_t(i) * 2 * W + j] = src[size_t(i / 2) * W + j / 2];
  }
  detail::attach(out, {x}, [o = out.get(), x, bc, H, W] {
    x->ensure_grad();
#pragma omp parallel for schedule(static) if (run_parallel())
    for (int64_t p = 0; p < bc; ++p) {
      const T* g = o->grad.data() + p * 4 * H * W;
      T* dst = x->grad.data() + p * H * W;
      for (int i = 0; i < 2 * H; ++i)
        for (int j = 0; j < 2 * W; ++j)
          dst[size_t(i / 2) * W + j / 2] += g[size_t(i) * 2 * W + j];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Group normalization over [B,C,H,W] with per-channel affine parameters.

template <scalar T>
tptr<T> group_norm(const tptr<T>& x, const tptr<T>& gamma, const tptr<T>& beta,
                   int groups) {
  check(x->shape.size() == 4 && x->dim(1) % groups == 0,
        "group_norm channel/group mismatch");
  const int B = x->dim(0), C = x->dim(1), cg = C / groups;
  const int64_t hw = int64_t(x->dim(2)) * x->dim(3);
  const int64_t m = cg * hw;  // elements per group
  const T eps = T(1e-5);
  auto out = make_node<T>(x->shape);
  // stash per-(b,g) inverse std for the backward pass
  auto inv_std = std::make_shared<std::vector<T>>(size_t(B) * groups);
  auto mean_bg = std::make_shared<std::vector<T>>(size_t(B) * groups);
#pragma omp parallel for schedule(static) if (run_parallel())
  for (int64_t bg = 0; bg < int64_t(B) * groups; ++bg) {
    const int64_t base = bg * m;
    T mu = 0;
    for (int64_t i = 0; i < m; ++i) mu += x->val[base + i];
    mu /= T(m);
    T var = 0;
    for (int64_t i = 0; i < m; ++i) {
      T d = x->val[base + i] - mu;
      var += d * d;
    }
    var /= T(m);
    T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[size_t(bg)] = is;
    (*mean_bg)[size_t(bg)] = mu;
    const int g = int(bg % groups);
    for (int64_t i = 0; i < m; ++i) {
      int c = g * cg + int(i / hw);
      out->val[base + i] =
          gamma->val[size_t(c)] * (x->val[base + i] - mu) * is +
          beta->val[size_t(c)];
    }
  }
  detail::attach(
      out, {x, gamma, beta},
      [o = out.get(), x, gamma, beta, B, C, cg, hw, m, groups, inv_std,
       mean_bg] {
        if (x->needs_grad) x->ensure_grad();
        if (gamma->needs_grad) gamma->ensure_grad();
        if (beta->needs_grad) beta->ensure_grad();
        if (x->needs_grad) {
#pragma omp parallel for schedule(static) if (run_parallel())
          for (int64_t bg = 0; bg < int64_t(B) * groups; ++bg) {
            const int64_t base = bg * m;
            const T is = (*inv_std)[size_t(bg)];
            const T mu = (*mean_bg)[size_t(bg)];
            const int g = int(bg % groups);
            T mean_h = 0, mean_hu = 0;
            for (int64_t i = 0; i < m; ++i) {
              int c = g * cg + int(i / hw);
              T u = (x->val[base + i] - mu) * is;
              T h = o->grad[base + i] * gamma->val[size_t(c)];
              mean_h += h;
              mean_hu += h * u;
            }
            mean_h /= T(m);
            mean_hu /= T(m);
            for (int64_t i = 0; i < m; ++i) {
              int c = g * cg + int(i / hw);
              T u = (x->val[base + i] - mu) * is;
              T h = o->grad[base + i] * gamma->val[size_t(c)];
              x->grad[base + i] += is * (h - mean_h - u * mean_hu);
            }
          }
        }
        if (gamma->needs_grad || beta->needs_grad) {
#pragma omp parallel for schedule(static) if (run_parallel())
          for (int c = 0; c < C; ++c) {
            const int g = c / cg;
            T dg = 0, db = 0;
            for (int b = 0; b < B; ++b) {
              const int64_t bg = int64_t(b) * groups + g;
              const T is = (*inv_std)[size_t(bg)];
              const T mu = (*mean_bg)[size_t(bg)];
              const int64_t base =
                  bg * m + int64_t(c - g * cg) * hw;
              for (int64_t i = 0; i < hw; ++i) {
                T u = (x->val[base + i] - mu) * is;
                dg += o->grad[base + i] * u;
                db += o->grad[base + i];
              }
            }
            if (gamma->needs_grad) gamma->grad[size_t(c)] += dg;
            if (beta->needs_grad) beta->grad[size_t(c)] += db;
          }
        }
      });
  return out;
}

// Repeat each row of x[N,D] `times` times -> [N*times, D].
template <scalar T>
tptr<T> repeat_rows(const tptr<T>& x, int times) {
  check(x->shape.size() == 2 && times > 0, "repeat_rows wants [N,D]");
  const int N = x->dim(0), D = x->dim(1);
  auto out = make_node<T>({N * times, D});
#pragma omp parallel for schedule(static) if (run_parallel())
  for (int n = 0; n < N; ++n)
    for (int r = 0; r < times; ++r)
      std::copy_n(x->val.data() + size_t(n) * D, D,
                  out->val.data() + (size_t(n) * times + r) * D);
  detail::attach(out, {x}, [o = out.get(), x, N, D, times] {
    x->ensure_grad();
#pragma omp parallel for schedule(static) if (run_parallel())
    for (int n = 0; n < N; ++n)
      for (int r = 0; r < times; ++r)
        for (int d = 0; d < D; ++d)
          x->grad[size_t(n) * D + d] +=
              o->grad[(size_t(n) * times + r) * D + d];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Embedding rows gathered by token id.

template <scalar T>
tptr<T> embedding(const tptr<T>& table, const std::vector<int>& ids) {
  check(table->shape.size() == 2, "embedding table must be 2D");
  const int V = table->dim(0), D = table->dim(1);
  auto out = make_node<T>({int(ids.size()), D});
  for (size_t i = 0; i < ids.size(); ++i) {
    check(ids[i] >= 0 && ids[i] < V, "token id out of range");
    std::copy_n(table->val.data() + size_t(ids[i]) * D, D,
                out->val.data() + i * D);
  }
  detail::attach(out, {table}, [o = out.get(), table, ids, D] {
    table->ensure_grad();
    for (size_t i = 0; i < ids.size(); ++i)
      for (int d = 0; d < D; ++d)
        table->grad[size_t(ids[i]) * D + d] += o->grad[i * D + d];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Losses

// Mean over all elements of w[b] * (pred - target)^2, b = index in dim 0.
template <scalar T>
tptr<T> weighted_mse(const tptr<T>& pred, const std::vector<T>& target,
                     const std::vector<T>& w) {
  check(pred->val.size() == target.size(), "weighted_mse target mismatch");
  check(int(w.size()) == pred->dim(0), "weighted_mse weight count mismatch");
  const int64_t n = pred->numel();
  const int64_t per = n / pred->dim(0);
  auto out = make_node<T>({1});
  out->val[0] = deterministic_sum<T>(n, [&](int64_t i) {
                  T d = pred->val[i] - target[i];
                  return w[size_t(i / per)] * d * d;
                }) /
                T(n);
  detail::attach(out, {pred}, [o = out.get(), pred, target, w, n, per] {
    pred->ensure_grad();
    const T g = o->grad[0] * T(2) / T(n);
#pragma omp parallel for schedule(static) if (run_parallel())
    for (int64_t i = 0; i < n; ++i)
      pred->grad[i] += g * w[size_t(i / per)] * (pred->val[i] - target[i]);
  });
  return out;
}

template <scalar T>
tptr<T> mean_all(const tptr<T>& x) {
  const int64_t n = x->numel();
  auto out = make_node<T>({1});
  out->val[0] =
      deterministic_sum<T>(n, [&](int64_t i) { return x->val[i]; }) / T(n);
  detail::attach(out, {x}, [o = out.get(), x, n] {
    x->ensure_grad();
    const T g = o->grad[0] / T(n);
#pragma omp parallel for schedule(static) if (run_parallel())
    for (int64_t i = 0; i < n; ++i) x->grad[i] += g;
  });
  return out;
}

}  // namespace ag
}  // namespace pi3d
