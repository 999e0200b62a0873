#pragma once

#include <cstdint>

namespace setnet::blas {

// Row-major C = alpha * op(A) * op(B) + beta * C.
// Backed by OpenBLAS when available (loaded at runtime so the kernel
// matching the actual CPU can be selected), with a portable fallback.
void dgemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k,
           double alpha, const double* a, int64_t lda, const double* b,
           int64_t ldb, double beta, double* c, int64_t ldc);

// Name of the active backend ("openblas:<corename>" or "fallback").
const char* backend_name();

// Caps BLAS threads. Defaults to the SETNET_THREADS env var, else 1.
void set_threads(int n);

}  // namespace setnet::blas
