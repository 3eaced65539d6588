#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace gradmerge {

struct LayoutEntry {
  std::string name;
  std::vector<std::size_t> shape;

  std::size_t size() const;
  bool operator==(const LayoutEntry&) const = default;
};

/// Ordered, named blocks of a flat parameter vector.
///
/// Names are unique and nonempty, every shape dimension is positive, and the
/// total length is positive. Violations throw LayoutError.
class ParamLayout {
 public:
  explicit ParamLayout(std::vector<LayoutEntry> entries);

  const std::vector<LayoutEntry>& entries() const { return entries_; }
  std::size_t total_len() const { return total_len_; }
  std::size_t offset_of(std::string_view name) const;
  const LayoutEntry& entry(std::string_view name) const;

  bool operator==(const ParamLayout& other) const { return entries_ == other.entries_; }

 private:
  std::vector<LayoutEntry> entries_;
  std::size_t total_len_ = 0;
};

using LayoutPtr = std::shared_ptr<const ParamLayout>;

LayoutPtr make_layout(std::vector<LayoutEntry> entries);
bool same_layout(const LayoutPtr& a, const LayoutPtr& b);
void require_same_layout(const LayoutPtr& a, const LayoutPtr& b, std::string_view context);

/// Immutable parameter vector; all values finite.
class ParamVector {
 public:
  ParamVector(LayoutPtr layout, std::vector<double> values);

  static ParamVector zeros(LayoutPtr layout);

  const ParamLayout& layout() const { return *layout_; }
  const LayoutPtr& layout_ptr() const { return layout_; }
  std::span<const double> values() const { return values_; }
  std::size_t size() const { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }
  std::span<const double> block(std::string_view name) const;

  // Bitwise equality of values plus layout equality.
  bool operator==(const ParamVector& other) const;

 private:
  LayoutPtr layout_;
  std::vector<double> values_;
};

/// Immutable diagonal curvature (Hessian/Fisher diagonal); all values finite
/// and nonnegative.
class DiagCurvature {
 public:
  DiagCurvature(LayoutPtr layout, std::vector<double> values);

  static DiagCurvature identity(LayoutPtr layout, double scale = 1.0);
  static DiagCurvature zeros(LayoutPtr layout);

  const ParamLayout& layout() const { return *layout_; }
  const LayoutPtr& layout_ptr() const { return layout_; }
  std::span<const double> values() const { return values_; }
  std::size_t size() const { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }

  DiagCurvature scaled(double factor) const;
  DiagCurvature plus(double shift) const;
  DiagCurvature plus(const DiagCurvature& other) const;
  bool strictly_positive() const;

  bool operator==(const DiagCurvature& other) const;

 private:
  LayoutPtr layout_;
  std::vector<double> values_;
};

struct WeightedTerm {
  double weight;
  std::reference_wrapper<const ParamVector> vec;
};

/// Elementwise sum of weight * vec. Throws ConfigError on an empty list,
/// LayoutError on layout mismatch, NumericError on a non-finite result.
ParamVector combine(std::span<const WeightedTerm> terms);

struct PreconditionTerm {
  double alpha;
  std::reference_wrapper<const DiagCurvature> h0;
  std::reference_wrapper<const DiagCurvature> ht;
  std::reference_wrapper<const ParamVector> theta;
};

/// anchor + sum_t alpha_t * hbar^-1 (h0_t + ht_t) (theta_t - anchor), diagonal.
/// hbar must be strictly positive, otherwise SingularCurvatureError.
ParamVector precondition_combine(const ParamVector& anchor, std::span<const PreconditionTerm> terms,
                                 const DiagCurvature& hbar);

// Small vector helpers used across modules.
std::vector<double> difference(const ParamVector& a, const ParamVector& b);
double l2_norm(std::span<const double> x);
double linf_norm(std::span<const double> x);
double l2_distance(const ParamVector& a, const ParamVector& b);
double max_abs_difference(std::span<const double> a, std::span<const double> b);

/// Parameters plus optional curvature, anchor reference and string metadata.
class Checkpoint {
 public:
  explicit Checkpoint(ParamVector params, std::optional<DiagCurvature> curvature = std::nullopt,
                      std::optional<std::string> anchor_id = std::nullopt,
                      std::map<std::string, std::string> meta = {});

  const ParamLayout& layout() const { return params_.layout(); }
  const ParamVector& params() const { return params_; }
  const std::optional<DiagCurvature>& curvature() const { return curvature_; }
  const std::optional<std::string>& anchor_id() const { return anchor_id_; }
  const std::map<std::string, std::string>& meta() const { return meta_; }

  // meta["name"] if present, otherwise "unnamed".
  std::string name() const;

  Checkpoint with_curvature(DiagCurvature curvature) const;
  Checkpoint with_meta(std::string key, std::string value) const;

  bool operator==(const Checkpoint& other) const;

 private:
  ParamVector params_;
  std::optional<DiagCurvature> curvature_;
  std::optional<std::string> anchor_id_;
  std::map<std::string, std::string> meta_;
};

/// Writes `<stem>.meta.json` and `<stem>.f64le` (params then curvature as raw
/// little-endian doubles in layout order).
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& stem);
Checkpoint load_checkpoint(const std::filesystem::path& stem);

std::filesystem::path meta_path(const std::filesystem::path& stem);
std::filesystem::path blob_path(const std::filesystem::path& stem);

}  // namespace gradmerge
