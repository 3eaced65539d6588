#pragma once

#include "gradmerge/simd/kernels.hpp"

namespace gradmerge::simd::detail {

// Lanes of the canonical reduction order.
inline constexpr std::size_t kReductionLanes = 8;

// Folds the 8 partial sums as ((l0+l4)+(l2+l6)) + ((l1+l5)+(l3+l7)).
inline double fold_lanes(const double* lanes) {
  const double p0 = lanes[0] + lanes[4];
  const double p1 = lanes[1] + lanes[5];
  const double p2 = lanes[2] + lanes[6];
  const double p3 = lanes[3] + lanes[7];
  return (p0 + p2) + (p1 + p3);
}

const KernelTable& scalar_table();
#if defined(__x86_64__) || defined(_M_X64)
const KernelTable& avx2_table();
const KernelTable& avx512_table();
#endif

}  // namespace gradmerge::simd::detail
