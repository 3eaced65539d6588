#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "gradmerge/param_space.hpp"

namespace gradmerge {

enum class ModelKind { linear_regression, logistic, mlp };
enum class Activation { tanh, relu };
enum class LossKind { squared_error, logistic_nll };
enum class Reduce { sum, mean };

std::string_view to_string(ModelKind kind);
std::string_view to_string(Activation act);
std::string_view to_string(LossKind kind);
ModelKind parse_model_kind(std::string_view name);
Activation parse_activation(std::string_view name);
LossKind parse_loss_kind(std::string_view name);

struct ModelSpec {
  ModelKind kind = ModelKind::linear_regression;
  std::size_t n_features = 1;
  std::optional<std::size_t> hidden;  // mlp only
  Activation activation = Activation::tanh;

  // hidden present iff kind == mlp; n_features and hidden positive.
  void validate() const;
};

/// Parameter layout of a model. Linear and logistic models hold a single
/// weight block "w" (no bias; add a constant feature instead). The MLP layout
/// is fixed as [W1 (hidden x n_features), b1 (hidden), W2 (1 x hidden), b2 (1)].
LayoutPtr canonical_layout(const ModelSpec& spec);

/// Supervised examples; inputs are stored row-major (n_examples x n_features).
class TaskDataset {
 public:
  TaskDataset(std::string task_id, std::size_t n_features, std::vector<double> inputs,
              std::vector<double> targets, std::uint64_t seed = 0);

  const std::string& task_id() const { return task_id_; }
  std::size_t n_examples() const { return targets_.size(); }
  std::size_t n_features() const { return n_features_; }
  std::uint64_t seed() const { return seed_; }
  bool empty() const { return targets_.empty(); }

  std::span<const double> row(std::size_t i) const {
    return std::span<const double>(inputs_).subspan(i * n_features_, n_features_);
  }
  double target(std::size_t i) const { return targets_[i]; }
  std::span<const double> inputs() const { return inputs_; }
  std::span<const double> targets() const { return targets_; }

  // Examples [begin, end) as a new dataset.
  TaskDataset slice(std::size_t begin, std::size_t end, std::string task_id) const;
  TaskDataset slice(std::size_t begin, std::size_t end) const;

 private:
  std::string task_id_;
  std::size_t n_features_;
  std::vector<double> inputs_;
  std::vector<double> targets_;
  std::uint64_t seed_;
};

/// Concatenates datasets with equal feature counts.
TaskDataset concat(std::span<const TaskDataset> parts, std::string task_id);

// JSON: {"task_id", "seed", "inputs": [[...]], "targets": [...]}
nlohmann::json dataset_to_json(const TaskDataset& data);
TaskDataset dataset_from_json(const nlohmann::json& doc);
void save_dataset(const TaskDataset& data, const std::filesystem::path& path);
TaskDataset load_dataset(const std::filesystem::path& path);

double loss(const ModelSpec& spec, LossKind loss_kind, const ParamVector& theta,
            const TaskDataset& data, Reduce reduce);

ParamVector grad(const ModelSpec& spec, LossKind loss_kind, const ParamVector& theta,
                 const TaskDataset& data, Reduce reduce);

/// One gradient per example, in dataset order.
std::vector<ParamVector> per_example_grads(const ModelSpec& spec, LossKind loss_kind,
                                           const ParamVector& theta, const TaskDataset& data);

/// Central finite-difference gradient of loss(); h must be positive.
ParamVector fd_grad(const ModelSpec& spec, LossKind loss_kind, const ParamVector& theta,
                    const TaskDataset& data, double h, Reduce reduce = Reduce::sum);

/// Raw model outputs (logits for classification).
std::vector<double> predict(const ModelSpec& spec, const ParamVector& theta,
                            const TaskDataset& data);

/// Fraction of examples whose thresholded prediction matches the {0,1} target.
/// A sigmoid output of exactly 0.5 predicts class 1.
double accuracy(const ModelSpec& spec, const ParamVector& theta, const TaskDataset& data);

/// Number of correct predictions; used for pooled ("true average") accuracy.
std::size_t correct_count(const ModelSpec& spec, const ParamVector& theta,
                          const TaskDataset& data);

/// Throws ConfigError when the model/loss/target combination is invalid and
/// LayoutError when theta or data disagree with the spec.
void check_compatible(const ModelSpec& spec, LossKind loss_kind, const ParamVector& theta,
                      const TaskDataset& data);

double sigmoid(double z);

}  // namespace gradmerge
