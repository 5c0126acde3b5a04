#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mbsurv/data_model.hpp"

namespace mbsurv {

/// Learning rate for a single-modality risk network.
inline constexpr double kLearningRateSingleModality = 0.01;
/// Learning rate for a network on a joint (multi-modal) representation.
inline constexpr double kLearningRateMultiModal = 0.03;
inline constexpr int kDefaultHiddenWidth = 32;

/// Hidden layer widths; empty means a linear model w.x + b.
struct Architecture {
  std::vector<int> hidden;

  static Architecture linear() { return {}; }
  static Architecture mlp(std::vector<int> widths = {kDefaultHiddenWidth}) { return {std::move(widths)}; }
  bool is_linear() const { return hidden.empty(); }
  std::string describe() const;
};

struct DenseLayer {
  Eigen::MatrixXd weights;  // out x in
  Eigen::VectorXd bias;     // out
};

/// Same shapes as the model's layers; used for gradients and Adam moments.
using LayerTensors = std::vector<DenseLayer>;

/// Risk function g(x): ReLU hidden layers followed by a scalar head.
class RiskModel {
 public:
  RiskModel() = default;
  /// Uniform fan-in initialization U(-1/sqrt(fan_in), 1/sqrt(fan_in)), seeded.
  RiskModel(int input_width, Architecture architecture, std::uint64_t seed);

  int input_width() const { return input_width_; }
  const Architecture& architecture() const { return architecture_; }
  const LayerTensors& layers() const { return layers_; }
  /// Mutable access bumps the version, invalidating cached forward passes.
  LayerTensors& mutable_layers();
  std::uint64_t version() const { return version_; }

  std::size_t parameter_count() const;
  std::vector<double> flat_parameters() const;
  void set_flat_parameters(std::span<const double> values);

  json to_json() const;
  static RiskModel from_json(const json& j);

 private:
  int input_width_ = 0;
  Architecture architecture_;
  LayerTensors layers_;
  std::uint64_t version_ = 0;
};

/// Activations kept by forward() for the matching backward() call.
struct ForwardCache {
  std::uint64_t model_version = 0;
  const RiskModel* model = nullptr;
  Eigen::MatrixXd input;                    // batch x in
  std::vector<Eigen::MatrixXd> activations; // post-ReLU output of each hidden layer
};

/// Scores for each row of `batch` (batch x input_width).
Eigen::VectorXd forward(const RiskModel& model, const Eigen::MatrixXd& batch,
                        ForwardCache* cache = nullptr);

/// Gradients of sum_i upstream_i * g(x_i) with respect to every parameter.
/// The ReLU subgradient at 0 is 0. Throws if the cache is stale.
LayerTensors backward(const RiskModel& model, const ForwardCache& cache,
                      const Eigen::VectorXd& upstream);

LayerTensors zeros_like(const LayerTensors& layers);
std::vector<double> flatten(const LayerTensors& layers);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamConfig config;
  LayerTensors first_moment;
  LayerTensors second_moment;
  std::int64_t step = 0;

  static AdamState for_model(const RiskModel& model, AdamConfig config = {});
};

/// Bias-corrected Adam update with learning rate `lr`. Throws ValidationError
/// naming the parameter if any gradient entry is non-finite.
void adam_step(RiskModel& model, const LayerTensors& gradients, AdamState& state, double lr);

/// One-hot encoding of categorical states concatenated with standardized
/// bin representatives of continuous states. Statistics come from training data.
class FeatureEncoder {
 public:
  FeatureEncoder() = default;
  /// Mean and population standard deviation of observed representatives.
  static FeatureEncoder fit(const Cohort& training, const BinningSpec& binning);

  int width() const { return width_; }
  const FeatureSchema& schema() const { return schema_; }
  const BinningSpec& binning() const { return binning_; }

  /// Throws ValidationError if the record has a missing state.
  Eigen::RowVectorXd encode(const ClinicalRecord& record) const;
  Eigen::MatrixXd encode(std::span<const ClinicalRecord> records) const;

  json to_json() const;
  static FeatureEncoder from_json(const json& j, const FeatureSchema& schema);

 private:
  FeatureSchema schema_;
  BinningSpec binning_;
  std::vector<double> means_;  // per feature; used for continuous ones
  std::vector<double> stds_;
  std::vector<int> offsets_;
  int width_ = 0;

  void compute_layout();
};

inline Eigen::RowVectorXd vectorize(const ClinicalRecord& record, const FeatureEncoder& encoder) {
  return encoder.encode(record);
}

}  // namespace mbsurv
