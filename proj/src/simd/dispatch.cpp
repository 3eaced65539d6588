#include <cstdlib>
#include <iostream>
#include <string>

#include "gradmerge/errors.hpp"
#include "kernel_tables.hpp"

namespace gradmerge::simd {

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::scalar: return "scalar";
    case Isa::avx2: return "avx2";
    case Isa::avx512: return "avx512";
  }
  return "unknown";
}

std::optional<Isa> parse_isa(std::string_view name) {
  if (name == "scalar") return Isa::scalar;
  if (name == "avx2") return Isa::avx2;
  if (name == "avx512") return Isa::avx512;
  return std::nullopt;
}

bool isa_supported(Isa isa) {
  switch (isa) {
    case Isa::scalar: return true;
#if defined(__x86_64__) || defined(_M_X64)
    case Isa::avx2: return __builtin_cpu_supports("avx2");
    case Isa::avx512: return __builtin_cpu_supports("avx512f");
#else
    default: return false;
#endif
  }
  return false;
}

const KernelTable& kernels(Isa isa) {
  if (!isa_supported(isa)) {
    throw UnsupportedError("CPU does not support " + std::string(isa_name(isa)));
  }
  switch (isa) {
#if defined(__x86_64__) || defined(_M_X64)
    case Isa::avx2: return detail::avx2_table();
    case Isa::avx512: return detail::avx512_table();
#endif
    default: return detail::scalar_table();
  }
}

namespace {

Isa select_isa() {
  if (const char* env = std::getenv("GRADMERGE_SIMD"); env != nullptr && *env != '\0') {
    const std::string_view requested(env);
    if (requested != "auto") {
      const auto isa = parse_isa(requested);
      if (isa && isa_supported(*isa)) return *isa;
      std::cerr << "warning: GRADMERGE_SIMD=" << requested
                << " is unknown or unsupported; using automatic selection\n";
    }
  }
  if (isa_supported(Isa::avx512)) return Isa::avx512;
  if (isa_supported(Isa::avx2)) return Isa::avx2;
  return Isa::scalar;
}

void check_same(std::size_t a, std::size_t b) {
  if (a != b) {
    throw LayoutError("kernel operand lengths differ (" + std::to_string(a) + " vs " +
                      std::to_string(b) + ")");
  }
}

}  // namespace

const KernelTable& kernels() {
  static const KernelTable& active = kernels(select_isa());
  return active;
}

Isa active_isa() { return kernels().isa; }

void axpy(double a, std::span<const double> x, std::span<double> y) {
  check_same(x.size(), y.size());
  kernels().axpy(a, x.data(), y.data(), x.size());
}

void product_accumulate(double a, std::span<const double> w, std::span<const double> x,
                        std::span<double> acc) {
  check_same(w.size(), x.size());
  check_same(x.size(), acc.size());
  kernels().product_accumulate(a, w.data(), x.data(), acc.data(), x.size());
}

void square_accumulate(double a, std::span<const double> x, std::span<double> acc) {
  check_same(x.size(), acc.size());
  kernels().square_accumulate(a, x.data(), acc.data(), x.size());
}

void precondition_accumulate(double a, std::span<const double> h0, std::span<const double> ht,
                             std::span<const double> theta, std::span<const double> anchor,
                             std::span<double> acc) {
  check_same(h0.size(), ht.size());
  check_same(ht.size(), theta.size());
  check_same(theta.size(), anchor.size());
  check_same(anchor.size(), acc.size());
  kernels().precondition_accumulate(a, h0.data(), ht.data(), theta.data(), anchor.data(),
                                    acc.data(), acc.size());
}

void subtract(std::span<const double> x, std::span<const double> y, std::span<double> out) {
  check_same(x.size(), y.size());
  check_same(y.size(), out.size());
  kernels().subtract(x.data(), y.data(), out.data(), out.size());
}

void add_quotient(std::span<const double> base, std::span<const double> num,
                  std::span<const double> den, std::span<double> out) {
  check_same(base.size(), num.size());
  check_same(num.size(), den.size());
  check_same(den.size(), out.size());
  kernels().add_quotient(base.data(), num.data(), den.data(), out.data(), out.size());
}

double dot(std::span<const double> x, std::span<const double> y) {
  check_same(x.size(), y.size());
  return kernels().dot(x.data(), y.data(), x.size());
}

double sum_squares(std::span<const double> x) { return kernels().sum_squares(x.data(), x.size()); }

}  // namespace gradmerge::simd
