#include "setnet/blas.hpp"

#include <dlfcn.h>

#include <cstdlib>
#include <mutex>
#include <string>

namespace setnet::blas {
namespace {

// CBLAS enums, by value.
constexpr int kRowMajor = 101;
constexpr int kNoTrans = 111;
constexpr int kTrans = 112;

using dgemm_fn = void (*)(int order, int trans_a, int trans_b, int m, int n,
                          int k, double alpha, const double* a, int lda,
                          const double* b, int ldb, double beta, double* c,
                          int ldc);
using set_threads_fn = void (*)(int);
using corename_fn = char* (*)();

struct Backend {
  dgemm_fn dgemm = nullptr;
  set_threads_fn set_threads = nullptr;
  std::string name = "fallback";
};

int env_threads() {
  const char* env = std::getenv("SETNET_THREADS");
  if (!env) return 1;
  int n = std::atoi(env);
  return n > 0 ? n : 1;
}

Backend load_backend() {
  Backend b;
  // OpenBLAS picks its kernel from CPUID at load time, which misfires on
  // some virtualized CPUs (falls back to a pre-AVX kernel). Loading the
  // library ourselves lets us pin the kernel via OPENBLAS_CORETYPE first.
  // An explicit user setting wins.
#if defined(__x86_64__)
  if (__builtin_cpu_supports("avx512f")) {
    setenv("OPENBLAS_CORETYPE", "SKYLAKEX", /*overwrite=*/0);
  } else if (__builtin_cpu_supports("avx2")) {
    setenv("OPENBLAS_CORETYPE", "HASWELL", /*overwrite=*/0);
  }
#endif
  void* h = dlopen("libopenblas.so.0", RTLD_NOW | RTLD_LOCAL);
  if (!h) h = dlopen("libopenblas.so", RTLD_NOW | RTLD_LOCAL);
  if (!h) return b;
  auto* gemm = reinterpret_cast<dgemm_fn>(dlsym(h, "cblas_dgemm"));
  if (!gemm) return b;
  b.dgemm = gemm;
  b.set_threads =
      reinterpret_cast<set_threads_fn>(dlsym(h, "openblas_set_num_threads"));
  auto* corename =
      reinterpret_cast<corename_fn>(dlsym(h, "openblas_get_corename"));
  b.name = std::string("openblas:") + (corename ? corename() : "unknown");
  if (b.set_threads) b.set_threads(env_threads());
  return b;
}

Backend& backend() {
  static Backend b = load_backend();
  return b;
}

void fallback_dgemm(bool trans_a, bool trans_b, int64_t m, int64_t n,
                    int64_t k, double alpha, const double* a, int64_t lda,
                    const double* b, int64_t ldb, double beta, double* c,
                    int64_t ldc) {
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int64_t p = 0; p < k; ++p) {
        double av = trans_a ? a[p * lda + i] : a[i * lda + p];
        double bv = trans_b ? b[j * ldb + p] : b[p * ldb + j];
        acc += av * bv;
      }
      double prev = beta == 0.0 ? 0.0 : beta * c[i * ldc + j];
      c[i * ldc + j] = prev + alpha * acc;
    }
  }
}

}  // namespace

void dgemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k,
           double alpha, const double* a, int64_t lda, const double* b,
           int64_t ldb, double beta, double* c, int64_t ldc) {
  if (m == 0 || n == 0) return;
  Backend& be = backend();
  if (be.dgemm) {
    be.dgemm(kRowMajor, trans_a ? kTrans : kNoTrans,
             trans_b ? kTrans : kNoTrans, static_cast<int>(m),
             static_cast<int>(n), static_cast<int>(k), alpha, a,
             static_cast<int>(lda), b, static_cast<int>(ldb), beta, c,
             static_cast<int>(ldc));
    return;
  }
  fallback_dgemm(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c,
                 ldc);
}

const char* backend_name() { return backend().name.c_str(); }

void set_threads(int n) {
  Backend& be = backend();
  if (be.set_threads && n > 0) be.set_threads(n);
}

}  // namespace setnet::blas
