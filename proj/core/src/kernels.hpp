#pragma once

#include <cstddef>

// Dense row-major kernels shared by the tape ops and the plain evaluation
// paths. Loop orders are fixed so results are bit-identical regardless of
// thread count: threads only ever split over independent output rows.

namespace isoray::kern {

#if defined(_OPENMP)
constexpr std::size_t kParallelFlopThreshold = 1u << 16;
#endif

// C (m,n) = A (m,k) * B (k,n)
void matmul_nn(const double* A, const double* B, double* C, std::size_t m,
               std::size_t k, std::size_t n);

// C (m,k) = A (m,n) * B^T with B stored (k,n)
void matmul_nt(const double* A, const double* B, double* C, std::size_t m,
               std::size_t n, std::size_t k);

// C (k,n) = A^T * G with A stored (m,k), G (m,n)
void matmul_tn(const double* A, const double* G, double* C, std::size_t m,
               std::size_t k, std::size_t n);

}  // namespace isoray::kern
