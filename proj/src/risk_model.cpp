#include "mbsurv/risk_model.hpp"

#include <cmath>

#include "mbsurv/diagnostics.hpp"
#include "mbsurv/errors.hpp"
#include "mbsurv/rng.hpp"

namespace mbsurv {

namespace {

json matrix_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index c = 0; c < m.cols(); ++c) row[c] = m(r, c);
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd matrix_from_json(const json& j, Eigen::Index rows, Eigen::Index cols) {
  if (static_cast<Eigen::Index>(j.size()) != rows) throw ValidationError("weight matrix has wrong row count");
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto row = j.at(r).get<std::vector<double>>();
    if (static_cast<Eigen::Index>(row.size()) != cols) throw ValidationError("weight matrix has wrong column count");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row[c];
  }
  return m;
}

std::string layer_name(std::size_t l, const char* part) {
  return "layer " + std::to_string(l) + " " + part;
}

}  // namespace

std::string Architecture::describe() const {
  if (is_linear()) return "linear";
  std::string s = "mlp(";
  for (std::size_t i = 0; i < hidden.size(); ++i) s += (i ? "," : "") + std::to_string(hidden[i]);
  return s + ")";
}

RiskModel::RiskModel(int input_width, Architecture architecture, std::uint64_t seed)
    : input_width_(input_width), architecture_(std::move(architecture)) {
  if (input_width < 1) throw ValidationError("risk model input width must be >= 1");
  auto rng = make_rng(seed, "risk-model-init");
  int fan_in = input_width;
  auto add_layer = [&](int out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    DenseLayer layer{Eigen::MatrixXd(out, fan_in), Eigen::VectorXd(out)};
    for (Eigen::Index r = 0; r < layer.weights.rows(); ++r)
      for (Eigen::Index c = 0; c < layer.weights.cols(); ++c) layer.weights(r, c) = u(rng);
    for (Eigen::Index r = 0; r < layer.bias.size(); ++r) layer.bias(r) = u(rng);
    layers_.push_back(std::move(layer));
    fan_in = out;
  };
  for (int w : architecture_.hidden) {
    if (w < 1) throw ValidationError("hidden layer width must be >= 1");
    add_layer(w);
  }
  add_layer(1);
}

LayerTensors& RiskModel::mutable_layers() {
  ++version_;
  return layers_;
}

std::size_t RiskModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += static_cast<std::size_t>(l.weights.size() + l.bias.size());
  return n;
}

std::vector<double> flatten(const LayerTensors& layers) {
  std::vector<double> out;
  for (const auto& l : layers) {
    out.insert(out.end(), l.weights.data(), l.weights.data() + l.weights.size());
    out.insert(out.end(), l.bias.data(), l.bias.data() + l.bias.size());
  }
  return out;
}

std::vector<double> RiskModel::flat_parameters() const { return flatten(layers_); }

void RiskModel::set_flat_parameters(std::span<const double> values) {
  if (values.size() != parameter_count()) throw ValidationError("parameter vector has wrong length");
  ++version_;
  std::size_t i = 0;
  for (auto& l : layers_) {
    for (Eigen::Index j = 0; j < l.weights.size(); ++j) l.weights.data()[j] = values[i++];
    for (Eigen::Index j = 0; j < l.bias.size(); ++j) l.bias.data()[j] = values[i++];
  }
}

json RiskModel::to_json() const {
  json layers = json::array();
  for (const auto& l : layers_) {
    std::vector<double> bias(l.bias.data(), l.bias.data() + l.bias.size());
    layers.push_back({{"weights", matrix_to_json(l.weights)}, {"bias", bias}});
  }
  return {{"format", "risk_model"},
          {"architecture", {{"type", architecture_.is_linear() ? "linear" : "mlp"},
                            {"hidden", architecture_.hidden},
                            {"activation", "relu"}}},
          {"input_width", input_width_},
          {"layers", std::move(layers)}};
}

RiskModel RiskModel::from_json(const json& j) {
  try {
    if (j.value("format", std::string{}) != "risk_model") throw ValidationError("not a risk model");
    Architecture arch{j.at("architecture").at("hidden").get<std::vector<int>>()};
    RiskModel model(j.at("input_width").get<int>(), arch, 0);
    const auto& jl = j.at("layers");
    if (jl.size() != model.layers_.size()) throw ValidationError("layer count does not match architecture");
    for (std::size_t l = 0; l < model.layers_.size(); ++l) {
      auto& layer = model.layers_[l];
      layer.weights = matrix_from_json(jl[l].at("weights"), layer.weights.rows(), layer.weights.cols());
      const auto bias = jl[l].at("bias").get<std::vector<double>>();
      if (static_cast<Eigen::Index>(bias.size()) != layer.bias.size())
        throw ValidationError("bias has wrong length");
      for (Eigen::Index r = 0; r < layer.bias.size(); ++r) layer.bias(r) = bias[r];
    }
    return model;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed risk model: ") + e.what());
  }
}

Eigen::VectorXd forward(const RiskModel& model, const Eigen::MatrixXd& batch, ForwardCache* cache) {
  if (batch.cols() != model.input_width())
    throw ValidationError("input width " + std::to_string(batch.cols()) + " does not match model width " +
                          std::to_string(model.input_width()));
  const auto& layers = model.layers();
  if (cache) {
    cache->model_version = model.version();
    cache->model = &model;
    cache->input = batch;
    cache->activations.clear();
  }
  Eigen::MatrixXd a = batch;
  for (std::size_t l = 0; l + 1 < layers.size(); ++l) {
    Eigen::MatrixXd z = a * layers[l].weights.transpose();
    z.rowwise() += layers[l].bias.transpose();
    a = z.cwiseMax(0.0);
    if (cache) cache->activations.push_back(a);
  }
  const auto& head = layers.back();
  Eigen::VectorXd out = a * head.weights.row(0).transpose();
  out.array() += head.bias(0);
  return out;
}

LayerTensors backward(const RiskModel& model, const ForwardCache& cache, const Eigen::VectorXd& upstream) {
  if (cache.model != &model || cache.model_version != model.version())
    throw ValidationError("stale forward cache: model changed since the forward pass");
  if (upstream.size() != cache.input.rows())
    throw ValidationError("upstream gradient length does not match the cached batch");
  const auto& layers = model.layers();
  LayerTensors grads = zeros_like(layers);

  const std::size_t last = layers.size() - 1;
  const Eigen::MatrixXd& head_in = last == 0 ? cache.input : cache.activations[last - 1];
  grads[last].weights.row(0) = upstream.transpose() * head_in;
  grads[last].bias(0) = upstream.sum();

  if (last == 0) return grads;
  // d loss / d activation of the last hidden layer
  Eigen::MatrixXd delta = upstream * layers[last].weights.row(0);
  for (std::size_t l = last; l-- > 0;) {
    const Eigen::MatrixXd& act = cache.activations[l];
    delta = (act.array() > 0.0).select(delta, 0.0);
    const Eigen::MatrixXd& in = l == 0 ? cache.input : cache.activations[l - 1];
    grads[l].weights = delta.transpose() * in;
    grads[l].bias = delta.colwise().sum().transpose();
    if (l > 0) delta = delta * layers[l].weights;
  }
  return grads;
}

LayerTensors zeros_like(const LayerTensors& layers) {
  LayerTensors out;
  out.reserve(layers.size());
  for (const auto& l : layers)
    out.push_back({Eigen::MatrixXd::Zero(l.weights.rows(), l.weights.cols()),
                   Eigen::VectorXd::Zero(l.bias.size())});
  return out;
}

AdamState AdamState::for_model(const RiskModel& model, AdamConfig config) {
  return {config, zeros_like(model.layers()), zeros_like(model.layers()), 0};
}

void adam_step(RiskModel& model, const LayerTensors& gradients, AdamState& state, double lr) {
  const auto& layers = model.layers();
  if (gradients.size() != layers.size() || state.first_moment.size() != layers.size())
    throw ValidationError("gradient/optimizer shapes do not match the model");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (gradients[l].weights.rows() != layers[l].weights.rows() ||
        gradients[l].weights.cols() != layers[l].weights.cols() ||
        gradients[l].bias.size() != layers[l].bias.size())
      throw ValidationError("gradient shape mismatch at " + layer_name(l, "weights"));
    if (!gradients[l].weights.allFinite())
      throw ValidationError("non-finite gradient in " + layer_name(l, "weights"));
    if (!gradients[l].bias.allFinite())
      throw ValidationError("non-finite gradient in " + layer_name(l, "bias"));
  }

  const auto& cfg = state.config;
  ++state.step;
  const double correction1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double correction2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  auto update = [&](auto& param, const auto& grad, auto& m, auto& v) {
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
    param.array() -= lr * (m.array() / correction1) /
                     ((v.array() / correction2).sqrt() + cfg.epsilon);
  };
  auto& params = model.mutable_layers();
  for (std::size_t l = 0; l < params.size(); ++l) {
    update(params[l].weights, gradients[l].weights, state.first_moment[l].weights,
           state.second_moment[l].weights);
    update(params[l].bias, gradients[l].bias, state.first_moment[l].bias, state.second_moment[l].bias);
  }
}

// ---------------------------------------------------------------- encoder

void FeatureEncoder::compute_layout() {
  offsets_.clear();
  width_ = 0;
  for (std::size_t k = 0; k < schema_.size(); ++k) {
    offsets_.push_back(width_);
    width_ += schema_[k].is_continuous() ? 1 : schema_.cardinality(k);
  }
}

FeatureEncoder FeatureEncoder::fit(const Cohort& training, const BinningSpec& binning) {
  FeatureEncoder enc;
  enc.schema_ = training.schema;
  enc.binning_ = binning;
  enc.means_.assign(enc.schema_.size(), 0.0);
  enc.stds_.assign(enc.schema_.size(), 1.0);
  for (std::size_t k = 0; k < enc.schema_.size(); ++k) {
    if (!enc.schema_[k].is_continuous()) continue;
    const auto& reps = binning.at(k).representatives;
    double sum = 0.0, sq = 0.0;
    std::size_t n = 0;
    for (const auto& r : training.records) {
      if (!r.states.at(k)) continue;
      const double v = reps.at(static_cast<std::size_t>(*r.states[k]));
      sum += v;
      ++n;
    }
    if (n == 0) {
      warn("feature '" + enc.schema_[k].name + "' has no observed training values; encoded as 0");
      enc.stds_[k] = 0.0;
      continue;
    }
    const double mean = sum / static_cast<double>(n);
    for (const auto& r : training.records) {
      if (!r.states[k]) continue;
      const double d = reps[static_cast<std::size_t>(*r.states[k])] - mean;
      sq += d * d;
    }
    enc.means_[k] = mean;
    enc.stds_[k] = std::sqrt(sq / static_cast<double>(n));
    if (!(enc.stds_[k] > 0.0))
      warn("feature '" + enc.schema_[k].name + "' has zero training variance; encoded as 0");
  }
  enc.compute_layout();
  return enc;
}

Eigen::RowVectorXd FeatureEncoder::encode(const ClinicalRecord& record) const {
  if (record.states.size() != schema_.size())
    throw ValidationError("patient '" + record.patient_id + "': wrong number of features for encoder");
  Eigen::RowVectorXd x = Eigen::RowVectorXd::Zero(width_);
  for (std::size_t k = 0; k < schema_.size(); ++k) {
    if (!record.states[k])
      throw ValidationError("patient '" + record.patient_id + "': feature '" + schema_[k].name +
                            "' is missing; impute before encoding");
    const int s = *record.states[k];
    if (s < 0 || s >= schema_.cardinality(k))
      throw ValidationError("patient '" + record.patient_id + "': state out of range for '" +
                            schema_[k].name + "'");
    if (schema_[k].is_continuous()) {
      const double v = binning_.at(k).representatives.at(static_cast<std::size_t>(s));
      x(offsets_[k]) = stds_[k] > 0.0 ? (v - means_[k]) / stds_[k] : 0.0;
    } else {
      x(offsets_[k] + s) = 1.0;
    }
  }
  return x;
}

Eigen::MatrixXd FeatureEncoder::encode(std::span<const ClinicalRecord> records) const {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(records.size()), width_);
  for (std::size_t i = 0; i < records.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = encode(records[i]);
  return out;
}

json FeatureEncoder::to_json() const {
  return {{"schema_fingerprint", schema_.fingerprint()},
          {"binning", binning_.to_json()},
          {"means", means_},
          {"stds", stds_}};
}

FeatureEncoder FeatureEncoder::from_json(const json& j, const FeatureSchema& schema) {
  try {
    if (j.at("schema_fingerprint").get<std::string>() != schema.fingerprint())
      throw SchemaMismatchError("feature encoder was fit on a different schema");
    FeatureEncoder enc;
    enc.schema_ = schema;
    enc.binning_ = BinningSpec::from_json(j.at("binning"));
    enc.means_ = j.at("means").get<std::vector<double>>();
    enc.stds_ = j.at("stds").get<std::vector<double>>();
    if (enc.means_.size() != schema.size() || enc.stds_.size() != schema.size() ||
        enc.binning_.entries.size() != schema.size())
      throw ValidationError("feature encoder does not match schema size");
    enc.compute_layout();
    return enc;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed feature encoder: ") + e.what());
  }
}

}  // namespace mbsurv
