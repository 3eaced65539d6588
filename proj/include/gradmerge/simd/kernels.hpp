#pragma once

// Data-parallel inner loops shared by merging, curvature and the model zoo.
//
// Every kernel has a scalar reference implementation and vectorized variants
// selected at runtime. Elementwise kernels perform the same IEEE operations in
// the same order per element (no FMA contraction), and reductions use one
// canonical 8-lane partial-sum order, so all variants return bit-identical
// results. The scalar code is the specification; see tests/test_simd.cpp.

#include <cstddef>
#include <optional>
#include <span>
#include <string_view>

namespace gradmerge::simd {

enum class Isa { scalar, avx2, avx512 };

struct KernelTable {
  Isa isa;
  // y[i] += a * x[i]
  void (*axpy)(double a, const double* x, double* y, std::size_t n);
  // acc[i] += a * (w[i] * x[i])
  void (*product_accumulate)(double a, const double* w, const double* x, double* acc,
                             std::size_t n);
  // acc[i] += a * (x[i] * x[i])
  void (*square_accumulate)(double a, const double* x, double* acc, std::size_t n);
  // acc[i] += a * ((h0[i] + ht[i]) * (theta[i] - anchor[i]))
  void (*precondition_accumulate)(double a, const double* h0, const double* ht,
                                  const double* theta, const double* anchor, double* acc,
                                  std::size_t n);
  // out[i] = x[i] - y[i]
  void (*subtract)(const double* x, const double* y, double* out, std::size_t n);
  // out[i] = base[i] + num[i] / den[i]
  void (*add_quotient)(const double* base, const double* num, const double* den, double* out,
                       std::size_t n);
  double (*dot)(const double* x, const double* y, std::size_t n);
  double (*sum_squares)(const double* x, std::size_t n);
};

std::string_view isa_name(Isa isa);
std::optional<Isa> parse_isa(std::string_view name);
bool isa_supported(Isa isa);

// Table for a specific ISA; throws UnsupportedError when the CPU lacks it.
const KernelTable& kernels(Isa isa);

// Table chosen at first use: GRADMERGE_SIMD=scalar|avx2|avx512 if set and
// supported, otherwise the widest supported ISA.
const KernelTable& kernels();
Isa active_isa();

// Span wrappers over the active table. Length mismatches throw LayoutError.
void axpy(double a, std::span<const double> x, std::span<double> y);
void product_accumulate(double a, std::span<const double> w, std::span<const double> x,
                        std::span<double> acc);
void square_accumulate(double a, std::span<const double> x, std::span<double> acc);
void precondition_accumulate(double a, std::span<const double> h0, std::span<const double> ht,
                             std::span<const double> theta, std::span<const double> anchor,
                             std::span<double> acc);
void subtract(std::span<const double> x, std::span<const double> y, std::span<double> out);
void add_quotient(std::span<const double> base, std::span<const double> num,
                  std::span<const double> den, std::span<double> out);
double dot(std::span<const double> x, std::span<const double> y);
double sum_squares(std::span<const double> x);

}  // namespace gradmerge::simd
