#include "kernel_tables.hpp"

namespace gradmerge::simd::detail {
namespace {

void axpy(double a, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = y[i] + a * x[i];
}

void product_accumulate(double a, const double* w, const double* x, double* acc, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) acc[i] = acc[i] + a * (w[i] * x[i]);
}

void square_accumulate(double a, const double* x, double* acc, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) acc[i] = acc[i] + a * (x[i] * x[i]);
}

void precondition_accumulate(double a, const double* h0, const double* ht, const double* theta,
                             const double* anchor, double* acc, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    acc[i] = acc[i] + a * ((h0[i] + ht[i]) * (theta[i] - anchor[i]));
  }
}

void subtract(const double* x, const double* y, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] - y[i];
}

void add_quotient(const double* base, const double* num, const double* den, double* out,
                  std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = base[i] + num[i] / den[i];
}

double dot(const double* x, const double* y, std::size_t n) {
  double lanes[kReductionLanes] = {};
  const std::size_t blocked = n - n % kReductionLanes;
  for (std::size_t i = 0; i < blocked; i += kReductionLanes) {
    for (std::size_t k = 0; k < kReductionLanes; ++k) lanes[k] = lanes[k] + x[i + k] * y[i + k];
  }
  double sum = fold_lanes(lanes);
  for (std::size_t i = blocked; i < n; ++i) sum = sum + x[i] * y[i];
  return sum;
}

double sum_squares(const double* x, std::size_t n) { return dot(x, x, n); }

}  // namespace

const KernelTable& scalar_table() {
  static const KernelTable table{Isa::scalar,  axpy,     product_accumulate, square_accumulate,
                                 precondition_accumulate, subtract, add_quotient, dot,
                                 sum_squares};
  return table;
}

}  // namespace gradmerge::simd::detail
