#include <doctest.h>

#include <bit>
#include <cstdint>
#include <random>
#include <vector>

#include "gradmerge/errors.hpp"
#include "gradmerge/simd/kernels.hpp"

using namespace gradmerge;
using namespace gradmerge::simd;

namespace {

std::vector<double> random_vec(std::mt19937_64& gen, std::size_t n, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(gen);
  return v;
}

bool bit_equal(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
  }
  return true;
}

bool bit_equal(double a, double b) {
  return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b);
}

std::vector<Isa> supported_vector_isas() {
  std::vector<Isa> out;
  for (Isa isa : {Isa::avx2, Isa::avx512}) {
    if (isa_supported(isa)) out.push_back(isa);
  }
  return out;
}

// Lengths straddling every vector width and tail size.
const std::size_t kLengths[] = {0, 1, 2, 3, 4, 5, 7, 8, 9, 15, 16, 17, 31, 33, 63, 64, 65, 100, 257, 1001};

}  // namespace

TEST_CASE("isa names round-trip") {
  for (Isa isa : {Isa::scalar, Isa::avx2, Isa::avx512}) {
    auto parsed = parse_isa(isa_name(isa));
    REQUIRE(parsed.has_value());
    CHECK(*parsed == isa);
  }
  CHECK_FALSE(parse_isa("sse9").has_value());
  CHECK(isa_supported(Isa::scalar));
  CHECK(kernels(Isa::scalar).isa == Isa::scalar);
}

TEST_CASE("unsupported isa request throws") {
  for (Isa isa : {Isa::avx2, Isa::avx512}) {
    if (!isa_supported(isa)) CHECK_THROWS_AS(kernels(isa), UnsupportedError);
  }
}

TEST_CASE("active table is one of the supported tables") {
  const Isa active = active_isa();
  CHECK(isa_supported(active));
  CHECK(kernels().isa == active);
}

TEST_CASE("elementwise kernels are bit-identical across isas") {
  const auto isas = supported_vector_isas();
  if (isas.empty()) {
    MESSAGE("no vector ISA available; only scalar kernels exercised");
  }
  std::mt19937_64 gen(1234);
  const KernelTable& ref = kernels(Isa::scalar);
  for (std::size_t n : kLengths) {
    const auto x = random_vec(gen, n, -3.0, 3.0);
    const auto y = random_vec(gen, n, -3.0, 3.0);
    const auto w = random_vec(gen, n, 0.0, 2.0);
    const auto h0 = random_vec(gen, n, 0.1, 2.0);
    const auto ht = random_vec(gen, n, 0.0, 2.0);
    const auto den = random_vec(gen, n, 0.5, 4.0);
    const auto acc0 = random_vec(gen, n, -1.0, 1.0);
    const double a = 0.37;

    for (Isa isa : isas) {
      CAPTURE(n);
      CAPTURE(isa_name(isa));
      const KernelTable& k = kernels(isa);
      {
        auto r1 = acc0, r2 = acc0;
        ref.axpy(a, x.data(), r1.data(), n);
        k.axpy(a, x.data(), r2.data(), n);
        CHECK(bit_equal(r1, r2));
      }
      {
        auto r1 = acc0, r2 = acc0;
        ref.product_accumulate(a, w.data(), x.data(), r1.data(), n);
        k.product_accumulate(a, w.data(), x.data(), r2.data(), n);
        CHECK(bit_equal(r1, r2));
      }
      {
        auto r1 = acc0, r2 = acc0;
        ref.square_accumulate(a, x.data(), r1.data(), n);
        k.square_accumulate(a, x.data(), r2.data(), n);
        CHECK(bit_equal(r1, r2));
      }
      {
        auto r1 = acc0, r2 = acc0;
        ref.precondition_accumulate(a, h0.data(), ht.data(), x.data(), y.data(), r1.data(), n);
        k.precondition_accumulate(a, h0.data(), ht.data(), x.data(), y.data(), r2.data(), n);
        CHECK(bit_equal(r1, r2));
      }
      {
        std::vector<double> r1(n), r2(n);
        ref.subtract(x.data(), y.data(), r1.data(), n);
        k.subtract(x.data(), y.data(), r2.data(), n);
        CHECK(bit_equal(r1, r2));
      }
      {
        std::vector<double> r1(n), r2(n);
        ref.add_quotient(y.data(), x.data(), den.data(), r1.data(), n);
        k.add_quotient(y.data(), x.data(), den.data(), r2.data(), n);
        CHECK(bit_equal(r1, r2));
      }
    }
  }
}

TEST_CASE("reductions are bit-identical across isas") {
  const auto isas = supported_vector_isas();
  std::mt19937_64 gen(99);
  const KernelTable& ref = kernels(Isa::scalar);
  for (std::size_t n : kLengths) {
    // Wide dynamic range makes any change in summation order visible.
    auto x = random_vec(gen, n, -1.0, 1.0);
    auto y = random_vec(gen, n, -1.0, 1.0);
    for (std::size_t i = 0; i < n; i += 3) x[i] *= 1e8;
    const double d_ref = ref.dot(x.data(), y.data(), n);
    const double s_ref = ref.sum_squares(x.data(), n);
    for (Isa isa : isas) {
      CAPTURE(n);
      CAPTURE(isa_name(isa));
      CHECK(bit_equal(d_ref, kernels(isa).dot(x.data(), y.data(), n)));
      CHECK(bit_equal(s_ref, kernels(isa).sum_squares(x.data(), n)));
    }
  }
}

TEST_CASE("scalar reductions match a naive sum closely") {
  std::mt19937_64 gen(5);
  for (std::size_t n : kLengths) {
    const auto x = random_vec(gen, n, -2.0, 2.0);
    const auto y = random_vec(gen, n, -2.0, 2.0);
    long double naive = 0.0L, sq = 0.0L;
    for (std::size_t i = 0; i < n; ++i) {
      naive += static_cast<long double>(x[i]) * y[i];
      sq += static_cast<long double>(x[i]) * x[i];
    }
    CHECK(dot(x, y) == doctest::Approx(static_cast<double>(naive)).epsilon(1e-12));
    CHECK(sum_squares(x) == doctest::Approx(static_cast<double>(sq)).epsilon(1e-12));
  }
}

TEST_CASE("span wrappers reject length mismatch") {
  std::vector<double> a(3, 1.0), b(4, 1.0), out(3);
  CHECK_THROWS_AS(axpy(1.0, a, b), LayoutError);
  CHECK_THROWS_AS(dot(a, b), LayoutError);
  CHECK_THROWS_AS(subtract(a, b, out), LayoutError);
  CHECK_THROWS_AS(add_quotient(a, a, b, out), LayoutError);
}

TEST_CASE("span wrappers compute the documented formulas") {
  std::vector<double> x{1, 2, 3}, y{10, 20, 30};
  axpy(2.0, x, y);
  CHECK(y == std::vector<double>{12, 24, 36});

  std::vector<double> acc{0, 0, 0};
  precondition_accumulate(0.5, std::vector<double>{1, 1, 1}, std::vector<double>{1, 3, 0},
                          std::vector<double>{2, 2, 2}, std::vector<double>{0, 1, 2}, acc);
  CHECK(acc == std::vector<double>{2.0, 2.0, 0.0});

  std::vector<double> out(3);
  add_quotient(std::vector<double>{1, 1, 1}, std::vector<double>{2, 4, 6}, std::vector<double>{2, 2, 3},
               out);
  CHECK(out == std::vector<double>{2, 3, 3});
}
