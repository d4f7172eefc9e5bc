#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <vector>

#include "pi3d/kernels.h"

using namespace pi3d;

namespace {

template <scalar T>
std::vector<T> random_matrix(int rows, int cols, uint64_t seed) {
  std::vector<T> m(size_t(rows) * cols);
  for (size_t i = 0; i < m.size(); ++i)
    m[i] = T(normal01(hash_mix(seed, i)));
  return m;
}

template <scalar T>
T max_abs_diff(const std::vector<T>& a, const std::vector<T>& b) {
  T d = 0;
  for (size_t i = 0; i < a.size(); ++i)
    d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

}  // namespace

TEST_CASE("gemm_nn frozen 2x3 by 3x2 product") {
  // [1 2 3; 4 5 6] * [7 8; 9 10; 11 12] = [58 64; 139 154]
  std::vector<double> A{1, 2, 3, 4, 5, 6};
  std::vector<double> B{7, 8, 9, 10, 11, 12};
  std::vector<double> C(4, -1);
  gemm_nn(2, 2, 3, 1.0, A.data(), B.data(), 0.0, C.data());
  CHECK(C == std::vector<double>{58, 64, 139, 154});
  // beta accumulates
  gemm_nn(2, 2, 3, 1.0, A.data(), B.data(), 1.0, C.data());
  CHECK(C == std::vector<double>{116, 128, 278, 308});
  // alpha scales
  gemm_nn(2, 2, 3, 0.5, A.data(), B.data(), 0.0, C.data());
  CHECK(C == std::vector<double>{29, 32, 69.5, 77});
}

TEST_CASE("transposed variants agree with explicit transposition") {
  const int M = 13, N = 9, K = 17;
  auto A = random_matrix<double>(M, K, 1);
  auto B = random_matrix<double>(K, N, 2);
  std::vector<double> At(K * M), Bt(N * K);
  for (int i = 0; i < M; ++i)
    for (int k = 0; k < K; ++k) At[size_t(k) * M + i] = A[size_t(i) * K + k];
  for (int k = 0; k < K; ++k)
    for (int j = 0; j < N; ++j) Bt[size_t(j) * K + k] = B[size_t(k) * N + j];
  std::vector<double> c_nn(M * N), c_tn(M * N), c_nt(M * N);
  gemm_nn(M, N, K, 1.0, A.data(), B.data(), 0.0, c_nn.data());
  gemm_tn(M, N, K, 1.0, At.data(), B.data(), 0.0, c_tn.data());
  gemm_nt(M, N, K, 1.0, A.data(), Bt.data(), 0.0, c_nt.data());
  CHECK(max_abs_diff(c_nn, c_tn) < 1e-12);
  CHECK(max_abs_diff(c_nn, c_nt) < 1e-12);
}

TEST_CASE("optimized kernels match the reference loops") {
  const int M = 37, N = 29, K = 53;
  auto A = random_matrix<float>(M, K, 3);
  auto B = random_matrix<float>(K, N, 4);
  auto Bt = random_matrix<float>(N, K, 5);
  auto At = random_matrix<float>(K, M, 6);
  std::vector<float> fast(M * N), ref(M * N);

  gemm_nn(M, N, K, 1.5f, A.data(), B.data(), 0.0f, fast.data());
  reference::gemm_nn(M, N, K, 1.5f, A.data(), B.data(), 0.0f, ref.data());
  CHECK(max_abs_diff(fast, ref) < 1e-4f);

  gemm_nt(M, N, K, 1.0f, A.data(), Bt.data(), 0.0f, fast.data());
  reference::gemm_nt(M, N, K, 1.0f, A.data(), Bt.data(), 0.0f, ref.data());
  CHECK(max_abs_diff(fast, ref) < 1e-4f);

  gemm_tn(M, N, K, 1.0f, At.data(), B.data(), 0.0f, fast.data());
  reference::gemm_tn(M, N, K, 1.0f, At.data(), B.data(), 0.0f, ref.data());
  CHECK(max_abs_diff(fast, ref) < 1e-4f);
}

TEST_CASE("gemm is bitwise stable across execution modes and thread counts") {
  const int M = 61, N = 47, K = 31;
  auto A = random_matrix<float>(M, K, 7);
  auto B = random_matrix<float>(K, N, 8);
  set_exec_mode(exec_mode::serial);
  std::vector<float> serial(M * N);
  gemm_nn(M, N, K, 1.0f, A.data(), B.data(), 0.0f, serial.data());
  set_exec_mode(exec_mode::parallel);
#if defined(_OPENMP)
  for (int threads : {1, 3, 8}) {
    omp_set_num_threads(threads);
    std::vector<float> par(M * N);
    gemm_nn(M, N, K, 1.0f, A.data(), B.data(), 0.0f, par.data());
    CHECK(par == serial);
  }
  omp_set_num_threads(omp_get_num_procs());
#endif
  std::vector<float> again(M * N);
  gemm_nn(M, N, K, 1.0f, A.data(), B.data(), 0.0f, again.data());
  CHECK(again == serial);
}

TEST_CASE("deterministic_sum is invariant to execution mode") {
  auto term = [](int64_t i) {
    return float(normal01(splitmix64(uint64_t(i))));
  };
  set_exec_mode(exec_mode::serial);
  float a = deterministic_sum<float>(100000, term);
  set_exec_mode(exec_mode::parallel);
#if defined(_OPENMP)
  omp_set_num_threads(8);
#endif
  float b = deterministic_sum<float>(100000, term);
#if defined(_OPENMP)
  omp_set_num_threads(omp_get_num_procs());
#endif
  CHECK(a == b);
}
