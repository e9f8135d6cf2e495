#include "kernels.hpp"

#include <cstring>

namespace isoray::kern {

void matmul_nn(const double* A, const double* B, double* C, std::size_t m,
               std::size_t k, std::size_t n) {
#if defined(_OPENMP)
#pragma omp parallel for schedule(static) if (m * k * n > kParallelFlopThreshold)
#endif
  for (long long ii = 0; ii < static_cast<long long>(m); ++ii) {
    const std::size_t i = static_cast<std::size_t>(ii);
    double* ci = C + i * n;
    std::memset(ci, 0, n * sizeof(double));
    const double* ai = A + i * k;
    for (std::size_t l = 0; l < k; ++l) {
      const double a = ai[l];
      const double* bl = B + l * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += a * bl[j];
    }
  }
}

void matmul_nt(const double* A, const double* B, double* C, std::size_t m,
               std::size_t n, std::size_t k) {
#if defined(_OPENMP)
#pragma omp parallel for schedule(static) if (m * k * n > kParallelFlopThreshold)
#endif
  for (long long ii = 0; ii < static_cast<long long>(m); ++ii) {
    const std::size_t i = static_cast<std::size_t>(ii);
    const double* ai = A + i * n;
    double* ci = C + i * k;
    for (std::size_t j = 0; j < k; ++j) {
      const double* bj = B + j * n;
      // four fixed-order accumulators so the compiler can vectorize
      double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
      std::size_t l = 0;
      for (; l + 4 <= n; l += 4) {
        s0 += ai[l] * bj[l];
        s1 += ai[l + 1] * bj[l + 1];
        s2 += ai[l + 2] * bj[l + 2];
        s3 += ai[l + 3] * bj[l + 3];
      }
      for (; l < n; ++l) s0 += ai[l] * bj[l];
      ci[j] = ((s0 + s1) + (s2 + s3));
    }
  }
}

void matmul_tn(const double* A, const double* G, double* C, std::size_t m,
               std::size_t k, std::size_t n) {
#if defined(_OPENMP)
#pragma omp parallel for schedule(static) if (m * k * n > kParallelFlopThreshold)
#endif
  for (long long ll = 0; ll < static_cast<long long>(k); ++ll) {
    const std::size_t l = static_cast<std::size_t>(ll);
    double* cl = C + l * n;
    std::memset(cl, 0, n * sizeof(double));
    for (std::size_t i = 0; i < m; ++i) {
      const double a = A[i * k + l];
      const double* gi = G + i * n;
      for (std::size_t j = 0; j < n; ++j) cl[j] += a * gi[j];
    }
  }
}

}  // namespace isoray::kern
