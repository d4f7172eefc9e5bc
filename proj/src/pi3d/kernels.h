#pragma once

// Dense row-major matrix kernels used by the decoder MLP, the U-Net and the
// attention blocks. Every output element accumulates its k-terms in ascending
// order by one thread, so results are bitwise identical for any thread count.
// The reference:: versions are the naive loops the optimized kernels must
// match; the bench tool compares their throughput.

#include "common.h"

namespace pi3d {

// C[M x N] = alpha * A[M x K] * B[K x N] + beta * C
template <scalar T>
void gemm_nn(int M, int N, int K, T alpha, const T* A, const T* B, T beta,
             T* C) {
#pragma omp parallel for schedule(static) if (run_parallel())
  for (int i = 0; i < M; ++i) {
    T* c = C + size_t(i) * N;
    if (beta == T(0)) {
      for (int j = 0; j < N; ++j) c[j] = T(0);
    } else if (beta != T(1)) {
      for (int j = 0; j < N; ++j) c[j] *= beta;
    }
    const T* a = A + size_t(i) * K;
    for (int k = 0; k < K; ++k) {
      T av = alpha * a[k];
      const T* b = B + size_t(k) * N;
      for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[M x N] = alpha * A[M x K] * B^T (B is N x K) + beta * C
template <scalar T>
void gemm_nt(int M, int N, int K, T alpha, const T* A, const T* B, T beta,
             T* C) {
#pragma omp parallel for schedule(static) if (run_parallel())
  for (int i = 0; i < M; ++i) {
    const T* a = A + size_t(i) * K;
    T* c = C + size_t(i) * N;
    for (int j = 0; j < N; ++j) {
      const T* b = B + size_t(j) * K;
      T acc = 0;
      for (int k = 0; k < K; ++k) acc += a[k] * b[k];
      c[j] = alpha * acc + (beta == T(0) ? T(0) : beta * c[j]);
    }
  }
}

// C[M x N] = alpha * A^T (A is K x M) * B[K x N] + beta * C
template <scalar T>
void gemm_tn(int M, int N, int K, T alpha, const T* A, const T* B, T beta,
             T* C) {
#pragma omp parallel for schedule(static) if (run_parallel())
  for (int i = 0; i < M; ++i) {
    T* c = C + size_t(i) * N;
    if (beta == T(0)) {
      for (int j = 0; j < N; ++j) c[j] = T(0);
    } else if (beta != T(1)) {
      for (int j = 0; j < N; ++j) c[j] *= beta;
    }
    for (int k = 0; k < K; ++k) {
      T av = alpha * A[size_t(k) * M + i];
      const T* b = B + size_t(k) * N;
      for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

namespace reference {

template <scalar T>
void gemm_nn(int M, int N, int K, T alpha, const T* A, const T* B, T beta,
             T* C) {
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < N; ++j) {
      T acc = 0;
      for (int k = 0; k < K; ++k)
        acc += alpha * A[size_t(i) * K + k] * B[size_t(k) * N + j];
      C[size_t(i) * N + j] =
          acc + (beta == T(0) ? T(0) : beta * C[size_t(i) * N + j]);
    }
}

template <scalar T>
void gemm_nt(int M, int N, int K, T alpha, const T* A, const T* B, T beta,
             T* C) {
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < N; ++j) {
      T acc = 0;
      for (int k = 0; k < K; ++k)
        acc += A[size_t(i) * K + k] * B[size_t(j) * K + k];
      C[size_t(i) * N + j] =
          alpha * acc + (beta == T(0) ? T(0) : beta * C[size_t(i) * N + j]);
    }
}

template <scalar T>
void gemm_tn(int M, int N, int K, T alpha, const T* A, const T* B, T beta,
             T* C) {
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < N; ++j) {
      T acc = 0;
      for (int k = 0; k < K; ++k)
        acc += alpha * A[size_t(k) * M + i] * B[size_t(k) * N + j];
      C[size_t(i) * N + j] =
          acc + (beta == T(0) ? T(0) : beta * C[size_t(i) * N + j]);
    }
}

}  // namespace reference

}  // namespace pi3d
