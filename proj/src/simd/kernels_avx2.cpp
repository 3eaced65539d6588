#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

#include "kernel_tables.hpp"

#define GM_AVX2 __attribute__((target("avx2")))

namespace gradmerge::simd::detail {
namespace {

GM_AVX2 void axpy(double a, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d prod = _mm256_mul_pd(va, _mm256_loadu_pd(x + i));
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), prod));
  }
  for (; i < n; ++i) y[i] = y[i] + a * x[i];
}

GM_AVX2 void product_accumulate(double a, const double* w, const double* x, double* acc,
                                std::size_t n) {
  const __m256d va = _mm256_set1_pd(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d wx = _mm256_mul_pd(_mm256_loadu_pd(w + i), _mm256_loadu_pd(x + i));
    _mm256_storeu_pd(acc + i, _mm256_add_pd(_mm256_loadu_pd(acc + i), _mm256_mul_pd(va, wx)));
  }
  for (; i < n; ++i) acc[i] = acc[i] + a * (w[i] * x[i]);
}

GM_AVX2 void square_accumulate(double a, const double* x, double* acc, std::size_t n) {
  const __m256d va = _mm256_set1_pd(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d vx = _mm256_loadu_pd(x + i);
    const __m256d sq = _mm256_mul_pd(vx, vx);
    _mm256_storeu_pd(acc + i, _mm256_add_pd(_mm256_loadu_pd(acc + i), _mm256_mul_pd(va, sq)));
  }
  for (; i < n; ++i) acc[i] = acc[i] + a * (x[i] * x[i]);
}

GM_AVX2 void precondition_accumulate(double a, const double* h0, const double* ht,
                                     const double* theta, const double* anchor, double* acc,
                                     std::size_t n) {
  const __m256d va = _mm256_set1_pd(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d h = _mm256_add_pd(_mm256_loadu_pd(h0 + i), _mm256_loadu_pd(ht + i));
    const __m256d d = _mm256_sub_pd(_mm256_loadu_pd(theta + i), _mm256_loadu_pd(anchor + i));
    const __m256d term = _mm256_mul_pd(va, _mm256_mul_pd(h, d));
    _mm256_storeu_pd(acc + i, _mm256_add_pd(_mm256_loadu_pd(acc + i), term));
  }
  for (; i < n; ++i) acc[i] = acc[i] + a * ((h0[i] + ht[i]) * (theta[i] - anchor[i]));
}

GM_AVX2 void subtract(const double* x, const double* y, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_sub_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) out[i] = x[i] - y[i];
}

GM_AVX2 void add_quotient(const double* base, const double* num, const double* den, double* out,
                          std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d q = _mm256_div_pd(_mm256_loadu_pd(num + i), _mm256_loadu_pd(den + i));
    _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(base + i), q));
  }
  for (; i < n; ++i) out[i] = base[i] + num[i] / den[i];
}

// Two 4-wide accumulators hold lanes 0..3 and 4..7 of the canonical order.
GM_AVX2 double dot(const double* x, const double* y, std::size_t n) {
  __m256d lo = _mm256_setzero_pd();
  __m256d hi = _mm256_setzero_pd();
  const std::size_t blocked = n - n % kReductionLanes;
  for (std::size_t i = 0; i < blocked; i += kReductionLanes) {
    lo = _mm256_add_pd(lo, _mm256_mul_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
    hi = _mm256_add_pd(hi, _mm256_mul_pd(_mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4)));
  }
  const __m256d p = _mm256_add_pd(lo, hi);
  const __m128d q = _mm_add_pd(_mm256_castpd256_pd128(p), _mm256_extractf128_pd(p, 1));
  double sum = _mm_cvtsd_f64(q) + _mm_cvtsd_f64(_mm_unpackhi_pd(q, q));
  for (std::size_t i = blocked; i < n; ++i) sum = sum + x[i] * y[i];
  return sum;
}

GM_AVX2 double sum_squares(const double* x, std::size_t n) { return dot(x, x, n); }

}  // namespace

const KernelTable& avx2_table() {
  static const KernelTable table{Isa::avx2,    axpy,     product_accumulate, square_accumulate,
                                 precondition_accumulate, subtract, add_quotient, dot,
                                 sum_squares};
  return table;
}

}  // namespace gradmerge::simd::detail

#endif
