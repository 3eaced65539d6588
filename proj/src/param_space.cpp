#include "gradmerge/param_space.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <set>
#include <string>

#include "gradmerge/errors.hpp"
#include "gradmerge/simd/kernels.hpp"

namespace gradmerge {

std::size_t LayoutEntry::size() const {
  std::size_t n = 1;
  for (std::size_t dim : shape) n *= dim;
  return n;
}

ParamLayout::ParamLayout(std::vector<LayoutEntry> entries) : entries_(std::move(entries)) {
  if (entries_.empty()) throw LayoutError("layout has no entries");
  std::set<std::string, std::less<>> seen;
  for (const auto& e : entries_) {
    if (e.name.empty()) throw LayoutError("layout entry with empty name");
    if (!seen.insert(e.name).second) throw LayoutError("duplicate layout entry '" + e.name + "'");
    if (e.shape.empty()) throw LayoutError("entry '" + e.name + "' has an empty shape");
    for (std::size_t dim : e.shape) {
      if (dim == 0) throw LayoutError("entry '" + e.name + "' has a zero dimension");
    }
    total_len_ += e.size();
  }
}

std::size_t ParamLayout::offset_of(std::string_view name) const {
  std::size_t offset = 0;
  for (const auto& e : entries_) {
    if (e.name == name) return offset;
    offset += e.size();
  }
  throw LayoutError("no layout entry named '" + std::string(name) + "'");
}

const LayoutEntry& ParamLayout::entry(std::string_view name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e;
  }
  throw LayoutError("no layout entry named '" + std::string(name) + "'");
}

LayoutPtr make_layout(std::vector<LayoutEntry> entries) {
  return std::make_shared<const ParamLayout>(std::move(entries));
}

bool same_layout(const LayoutPtr& a, const LayoutPtr& b) { return a == b || *a == *b; }

void require_same_layout(const LayoutPtr& a, const LayoutPtr& b, std::string_view context) {
  if (!same_layout(a, b)) throw LayoutError(std::string(context) + ": layouts differ");
}

namespace {

void check_length(const ParamLayout& layout, std::size_t n, std::string_view what) {
  if (n != layout.total_len()) {
    throw LayoutError(std::string(what) + " has " + std::to_string(n) +
                      " values but layout expects " + std::to_string(layout.total_len()));
  }
}

bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  return std::ranges::equal(a, b, [](double x, double y) {
    return std::bit_cast<std::uint64_t>(x) == std::bit_cast<std::uint64_t>(y);
  });
}

}  // namespace

ParamVector::ParamVector(LayoutPtr layout, std::vector<double> values)
    : layout_(std::move(layout)), values_(std::move(values)) {
  if (!layout_) throw LayoutError("parameter vector without layout");
  check_length(*layout_, values_.size(), "parameter vector");
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (!std::isfinite(values_[i])) {
      throw NumericError("non-finite parameter at index " + std::to_string(i));
    }
  }
}

ParamVector ParamVector::zeros(LayoutPtr layout) {
  const std::size_t n = layout->total_len();
  return ParamVector(std::move(layout), std::vector<double>(n, 0.0));
}

std::span<const double> ParamVector::block(std::string_view name) const {
  return std::span<const double>(values_).subspan(layout_->offset_of(name),
                                                  layout_->entry(name).size());
}

bool ParamVector::operator==(const ParamVector& other) const {
  return same_layout(layout_, other.layout_) && bitwise_equal(values_, other.values_);
}

DiagCurvature::DiagCurvature(LayoutPtr layout, std::vector<double> values)
    : layout_(std::move(layout)), values_(std::move(values)) {
  if (!layout_) throw LayoutError("curvature without layout");
  check_length(*layout_, values_.size(), "curvature");
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (!std::isfinite(values_[i]) || values_[i] < 0.0) {
      throw NumericError("curvature entry " + std::to_string(i) +
                         " is negative or non-finite (" + std::to_string(values_[i]) + ")");
    }
  }
}

DiagCurvature DiagCurvature::identity(LayoutPtr layout, double scale) {
  const std::size_t n = layout->total_len();
  return DiagCurvature(std::move(layout), std::vector<double>(n, scale));
}

DiagCurvature DiagCurvature::zeros(LayoutPtr layout) { return identity(std::move(layout), 0.0); }

DiagCurvature DiagCurvature::scaled(double factor) const {
  std::vector<double> out(values_.size());
  std::ranges::transform(values_, out.begin(), [factor](double v) { return v * factor; });
  return DiagCurvature(layout_, std::move(out));
}

DiagCurvature DiagCurvature::plus(double shift) const {
  std::vector<double> out(values_.size());
  std::ranges::transform(values_, out.begin(), [shift](double v) { return v + shift; });
  return DiagCurvature(layout_, std::move(out));
}

DiagCurvature DiagCurvature::plus(const DiagCurvature& other) const {
  require_same_layout(layout_, other.layout_, "curvature sum");
  std::vector<double> out = values_;
  simd::axpy(1.0, other.values_, out);
  return DiagCurvature(layout_, std::move(out));
}

bool DiagCurvature::strictly_positive() const {
  return std::ranges::all_of(values_, [](double v) { return v > 0.0; });
}

bool DiagCurvature::operator==(const DiagCurvature& other) const {
  return same_layout(layout_, other.layout_) && bitwise_equal(values_, other.values_);
}

namespace {

ParamVector finite_or_throw(LayoutPtr layout, std::vector<double> values, std::string_view what) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string(what) + " produced a non-finite value");
  }
  return ParamVector(std::move(layout), std::move(values));
}

}  // namespace

ParamVector combine(std::span<const WeightedTerm> terms) {
  if (terms.empty()) throw ConfigError("combine needs at least one term");
  const LayoutPtr& layout = terms.front().vec.get().layout_ptr();
  std::vector<double> acc(layout->total_len(), 0.0);
  for (const auto& term : terms) {
    require_same_layout(layout, term.vec.get().layout_ptr(), "combine");
    simd::axpy(term.weight, term.vec.get().values(), acc);
  }
  return finite_or_throw(layout, std::move(acc), "combine");
}

ParamVector precondition_combine(const ParamVector& anchor, std::span<const PreconditionTerm> terms,
                                 const DiagCurvature& hbar) {
  const LayoutPtr& layout = anchor.layout_ptr();
  require_same_layout(layout, hbar.layout_ptr(), "precondition_combine (hbar)");
  for (std::size_t i = 0; i < hbar.size(); ++i) {
    if (!(hbar[i] > 0.0)) {
      throw SingularCurvatureError("accumulated curvature is not positive at index " +
                                   std::to_string(i));
    }
  }
  std::vector<double> acc(layout->total_len(), 0.0);
  for (const auto& term : terms) {
    require_same_layout(layout, term.h0.get().layout_ptr(), "precondition_combine (h0)");
    require_same_layout(layout, term.ht.get().layout_ptr(), "precondition_combine (ht)");
    require_same_layout(layout, term.theta.get().layout_ptr(), "precondition_combine (theta)");
    simd::precondition_accumulate(term.alpha, term.h0.get().values(), term.ht.get().values(),
                                  term.theta.get().values(), anchor.values(), acc);
  }
  std::vector<double> out(acc.size());
  simd::add_quotient(anchor.values(), acc, hbar.values(), out);
  return finite_or_throw(layout, std::move(out), "precondition_combine");
}

std::vector<double> difference(const ParamVector& a, const ParamVector& b) {
  require_same_layout(a.layout_ptr(), b.layout_ptr(), "difference");
  std::vector<double> out(a.size());
  simd::subtract(a.values(), b.values(), out);
  return out;
}

double l2_norm(std::span<const double> x) { return std::sqrt(simd::sum_squares(x)); }

double linf_norm(std::span<const double> x) {
  double m = 0.0;
  for (double v : x) m = std::max(m, std::abs(v));
  return m;
}

double l2_distance(const ParamVector& a, const ParamVector& b) { return l2_norm(difference(a, b)); }

double max_abs_difference(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw LayoutError("max_abs_difference: lengths differ");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Checkpoint::Checkpoint(ParamVector params, std::optional<DiagCurvature> curvature,
                       std::optional<std::string> anchor_id, std::map<std::string, std::string> meta)
    : params_(std::move(params)),
      curvature_(std::move(curvature)),
      anchor_id_(std::move(anchor_id)),
      meta_(std::move(meta)) {
  if (curvature_) require_same_layout(params_.layout_ptr(), curvature_->layout_ptr(), "checkpoint");
}

std::string Checkpoint::name() const {
  const auto it = meta_.find("name");
  return it == meta_.end() ? std::string("unnamed") : it->second;
}

Checkpoint Checkpoint::with_curvature(DiagCurvature curvature) const {
  return Checkpoint(params_, std::move(curvature), anchor_id_, meta_);
}

Checkpoint Checkpoint::with_meta(std::string key, std::string value) const {
  auto meta = meta_;
  meta[std::move(key)] = std::move(value);
  return Checkpoint(params_, curvature_, anchor_id_, std::move(meta));
}

bool Checkpoint::operator==(const Checkpoint& other) const {
  return params_ == other.params_ && curvature_ == other.curvature_ &&
         anchor_id_ == other.anchor_id_ && meta_ == other.meta_;
}

}  // namespace gradmerge
