#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "se3m/checkpoint.hpp"
#include "se3m/corpus.hpp"
#include "se3m/error.hpp"
#include "se3m/layers.hpp"
#include "se3m/optim.hpp"
#include "se3m/rng.hpp"
#include "se3m/tensor.hpp"

namespace se3m {

enum class InputMode { sequence, pooled };
enum class HeadOutput { linear, softmax };

inline std::string to_string(InputMode m) { return m == InputMode::sequence ? "sequence" : "pooled"; }
inline std::string to_string(HeadOutput o) { return o == HeadOutput::linear ? "linear" : "softmax"; }

inline InputMode parse_input_mode(std::string_view s) {
  if (s == "sequence") return InputMode::sequence;
  if (s == "pooled") return InputMode::pooled;
  throw ConfigError("unknown input mode '" + std::string(s) + "'");
}

inline HeadOutput parse_head_output(std::string_view s) {
  if (s == "linear" || s == "regression") return HeadOutput::linear;
  if (s == "softmax" || s == "classification") return HeadOutput::softmax;
  throw ConfigError("unknown head output '" + std::string(s) + "'");
}

struct HeadConfig {
  InputMode mode = InputMode::sequence;
  std::size_t lstm_hidden = 50;
  std::vector<std::size_t> dense = {50, 10};
  Activation dense_activation = Activation::relu;
  HeadOutput output = HeadOutput::linear;
  std::size_t epochs = 20;
  std::size_t batch_size = 128;
  std::size_t patience = 5;
  double epsilon = 1e-4;
  double lr = 0.002;
  std::uint64_t seed = 1;
  std::size_t pad_length = 0;  // 0: pad each batch to its longest sequence

  std::size_t output_size() const { return output == HeadOutput::linear ? 1 : BucketScheme::size(); }

  void validate() const {
    require_config(!dense.empty(), "head: at least one dense layer required");
    for (auto d : dense) require_config(d >= 1, "head: dense sizes must be positive");
    require_config(mode == InputMode::pooled || lstm_hidden >= 1, "head: lstm_hidden must be positive");
    require_config(epochs >= 1, "head: epochs must be at least 1");
    require_config(patience >= 1 && patience <= epochs, "head: patience must lie in [1, epochs]");
    require_config(batch_size >= 1, "head: batch_size must be at least 1");
    require_config(lr > 0.0, "head: lr must be positive");
    require_config(epsilon >= 0.0, "head: epsilon must be non-negative");
  }

  nlohmann::ordered_json to_json() const {
    return {{"input_mode", to_string(mode)}, {"lstm_hidden", lstm_hidden},   {"dense", dense},
            {"dense_activation", std::string(to_string(dense_activation))},  {"output", to_string(output)},
            {"epochs", epochs},              {"batch_size", batch_size},     {"patience", patience},
            {"epsilon", epsilon},            {"lr", lr},                     {"seed", seed},
            {"pad_length", pad_length}};
  }

  static HeadConfig from_json(const nlohmann::json& j) {
    HeadConfig c;
    try {
      c.mode = parse_input_mode(j.at("input_mode").get<std::string>());
      c.lstm_hidden = j.at("lstm_hidden").get<std::size_t>();
      c.dense = j.at("dense").get<std::vector<std::size_t>>();
      c.dense_activation = parse_activation(j.at("dense_activation").get<std::string>());
      c.output = parse_head_output(j.at("output").get<std::string>());
      c.epochs = j.at("epochs").get<std::size_t>();
      c.batch_size = j.at("batch_size").get<std::size_t>();
      c.patience = j.at("patience").get<std::size_t>();
      c.epsilon = j.at("epsilon").get<double>();
      c.lr = j.at("lr").get<double>();
      c.seed = j.at("seed").get<std::uint64_t>();
      c.pad_length = j.value("pad_length", std::size_t{0});
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("head config: ") + e.what());
    }
    c.validate();
    return c;
  }

  friend bool operator==(const HeadConfig&, const HeadConfig&) = default;
};

/// Model input for one requirement: `steps` rows of `dim` floats. Pooled
/// inputs have exactly one row; sequences may have none.
struct Representation {
  std::vector<float> values;
  std::size_t steps = 0;
  std::size_t dim = 0;
  bool degenerate = false;

  static Representation pooled(std::vector<float> v, bool degenerate = false) {
    const std::size_t d = v.size();
    return {std::move(v), 1, d, degenerate};
  }

  static Representation sequence(const std::vector<std::vector<float>>& rows, std::size_t dim, bool degenerate = false) {
    Representation r{{}, rows.size(), dim, degenerate};
    r.values.reserve(rows.size() * dim);
    for (const auto& row : rows) {
      require_shape(row.size() == dim, "representation: row width mismatch");
      r.values.insert(r.values.end(), row.begin(), row.end());
    }
    return r;
  }

  std::span<const float> row(std::size_t t) const { return {values.data() + t * dim, dim}; }
};

struct Sample {
  const Representation* input = nullptr;
  double effort = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double validation_mae = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_validation_mae = 0.0;
  std::string stop_reason;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json per = nlohmann::ordered_json::array();
    for (const auto& e : epochs) per.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"validation_mae", e.validation_mae}});
    return {{"best_epoch", best_epoch}, {"best_validation_mae", best_validation_mae}, {"stop_reason", stop_reason}, {"epochs", per}};
  }

  static TrainHistory from_json(const nlohmann::json& j) {
    TrainHistory h;
    h.best_epoch = j.at("best_epoch").get<std::size_t>();
    h.best_validation_mae = j.at("best_validation_mae").get<double>();
    h.stop_reason = j.at("stop_reason").get<std::string>();
    for (const auto& e : j.at("epochs"))
      h.epochs.push_back({e.at("epoch").get<std::size_t>(), e.at("train_loss").get<double>(), e.at("validation_mae").get<double>()});
    return h;
  }
};

struct PredictionResult {
  double effort = 0.0;  // in [1, 100]
  double bucket = 0.0;
  double raw = 0.0;
  std::vector<double> probabilities;  // softmax head only, bucket order
};

/// Clamps a regression output to [1, 100] and bucketizes it.
inline PredictionResult prediction_from_raw(double raw) {
  PredictionResult p;
  p.raw = raw;
  p.effort = std::isnan(raw) ? 1.0 : std::clamp(raw, 1.0, kMaxEffort);
  p.bucket = bucketize(p.effort);
  return p;
}

/// Argmax bucket of a probability vector; ties go to the lowest bucket.
inline PredictionResult prediction_from_probabilities(std::vector<double> probs, const BucketScheme& scheme = {}) {
  require_shape(probs.size() == scheme.size(), "prediction: expected one probability per bucket");
  PredictionResult p;
  const auto idx = static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
  p.bucket = p.effort = p.raw = scheme.buckets[idx];
  p.probabilities = std::move(probs);
  return p;
}

/// LSTM (sequence mode only) -> dense stack -> linear or 9-way output.
template <typename T = float>
class EstimatorModel {
 public:
  EstimatorModel(HeadConfig config, std::size_t input_dim) : config_(std::move(config)), input_dim_(input_dim) {
    config_.validate();
    require_config(input_dim_ >= 1, "estimator: input dimension must be positive");
    std::size_t width = input_dim_;
    if (config_.mode == InputMode::sequence) {
      lstm_.emplace("head.lstm", input_dim_, config_.lstm_hidden);
      width = config_.lstm_hidden;
    }
    for (std::size_t i = 0; i < config_.dense.size(); ++i) {
      dense_.emplace_back("head.dense" + std::to_string(i + 1), width, config_.dense[i], config_.dense_activation);
      width = config_.dense[i];
    }
    output_ = Dense<T>("head.output", width, config_.output_size(), Activation::identity);
    RngStream rng = RngStream(config_.seed).derive("init");
    if (lstm_) lstm_->init(rng);
    for (auto& d : dense_) d.init(rng);
    output_.init(rng);
  }

  const HeadConfig& config() const { return config_; }
  std::size_t input_dim() const { return input_dim_; }
  bool has_lstm() const { return lstm_.has_value(); }

  ParameterRefs<T> parameters() {
    ParameterRefs<T> ps;
    if (lstm_)
      for (auto* p : lstm_->parameters()) ps.push_back(p);
    for (auto& d : dense_)
      for (auto* p : d.parameters()) ps.push_back(p);
    for (auto* p : output_.parameters()) ps.push_back(p);
    return ps;
  }

  ParameterRefs<T> parameters() const { return const_cast<EstimatorModel*>(this)->parameters(); }

  std::size_t parameter_count() const { return se3m::parameter_count(parameters()); }

  void check_input(const Representation& r) const {
    require_shape(r.dim == input_dim_, "estimator: representation width " + std::to_string(r.dim) +
                                           " does not match input dimension " + std::to_string(input_dim_));
    require_shape(r.values.size() == r.steps * r.dim, "estimator: malformed representation");
    if (config_.mode == InputMode::pooled)
      require_shape(r.steps == 1, "estimator: pooled mode expects one vector per requirement, got " +
                                      std::to_string(r.steps));
    else if (config_.pad_length)
      require_shape(r.steps <= config_.pad_length, "estimator: sequence of " + std::to_string(r.steps) +
                                                       " steps exceeds pad_length " + std::to_string(config_.pad_length));
  }

  /// Packs inputs into [B x d] (pooled) or [B x T x d] plus a [B x T] mask.
  std::pair<Tensor<T>, std::vector<std::uint8_t>> make_batch(std::span<const Representation* const> inputs) const {
    const std::size_t b = inputs.size();
    for (const auto* r : inputs) check_input(*r);
    if (config_.mode == InputMode::pooled) {
      Tensor<T> x({b, input_dim_});
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < input_dim_; ++j) x(i, j) = static_cast<T>(inputs[i]->values[j]);
      return {std::move(x), {}};
    }
    std::size_t t_len = config_.pad_length;
    if (!t_len)
      for (const auto* r : inputs) t_len = std::max(t_len, r->steps);
    t_len = std::max<std::size_t>(t_len, 1);
    Tensor<T> x({b, t_len, input_dim_});
    std::vector<std::uint8_t> mask(b * t_len, 0);
    for (std::size_t i = 0; i < b; ++i) {
      const auto* r = inputs[i];
      for (std::size_t k = 0; k < r->values.size(); ++k) x.data()[i * t_len * input_dim_ + k] = static_cast<T>(r->values[k]);
      std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(i * t_len), r->steps, std::uint8_t{1});
    }
    return {std::move(x), std::move(mask)};
  }

  /// Raw outputs [B x 1] or logits [B x 9].
  Tensor<T> apply(const Tensor<T>& x, std::span<const std::uint8_t> mask) const {
    Tensor<T> h = lstm_ ? lstm_->apply(x, mask) : x;
    for (const auto& d : dense_) h = d.apply(h);
    return output_.apply(h);
  }

  Tensor<T> forward(const Tensor<T>& x, std::span<const std::uint8_t> mask) {
    Tensor<T> h = lstm_ ? lstm_->forward(x, mask) : x;
    for (auto& d : dense_) h = d.forward(h);
    return output_.forward(h);
  }

  void backward(const Tensor<T>& grad_out) {
    Tensor<T> g = output_.backward(grad_out);
    for (std::size_t i = dense_.size(); i-- > 0;) g = dense_[i].backward(g);
    if (lstm_) lstm_->backward(g);
  }

  std::vector<PredictionResult> predict_batch(std::span<const Representation* const> inputs) const {
    std::vector<PredictionResult> out;
    out.reserve(inputs.size());
    for (std::size_t start = 0; start < inputs.size(); start += config_.batch_size) {
      const auto chunk = inputs.subspan(start, std::min(config_.batch_size, inputs.size() - start));
      const auto [x, mask] = make_batch(chunk);
      const Tensor<T> y = apply(x, mask);
      if (config_.output == HeadOutput::linear) {
        for (std::size_t i = 0; i < chunk.size(); ++i) out.push_back(prediction_from_raw(static_cast<double>(y(i, 0))));
      } else {
        const Tensor<T> probs = softmax(y);
        for (std::size_t i = 0; i < chunk.size(); ++i) {
          std::vector<double> p(probs.row(i).begin(), probs.row(i).end());
          const double sum = std::accumulate(p.begin(), p.end(), 0.0);
          for (double& v : p) v /= sum;
          out.push_back(prediction_from_probabilities(std::move(p)));
        }
      }
    }
    return out;
  }

  PredictionResult predict(const Representation& r) const {
    const Representation* one[] = {&r};
    return predict_batch(one).front();
  }

  std::vector<Tensor<T>> snapshot() const {
    std::vector<Tensor<T>> s;
    for (const auto* p : parameters()) s.push_back(p->value);
    return s;
  }

  void restore(const std::vector<Tensor<T>>& s) {
    auto ps = parameters();
    require_shape(s.size() == ps.size(), "estimator: snapshot does not match the model");
    for (std::size_t i = 0; i < ps.size(); ++i) ps[i]->value = s[i];
  }

  /// Identity of the embedding model and pooling that produced the inputs.
  nlohmann::ordered_json source = nlohmann::ordered_json::object();
  /// Split seed, fold and similar run facts.
  nlohmann::ordered_json provenance = nlohmann::ordered_json::object();
  std::optional<TrainHistory> history;

 private:
  HeadConfig config_;
  std::size_t input_dim_ = 0;
  std::optional<Lstm<T>> lstm_;
  std::vector<Dense<T>> dense_;
  Dense<T> output_;
};

template <typename T = float>
EstimatorModel<T> build_estimator(const HeadConfig& config, std::size_t input_dim) {
  return EstimatorModel<T>(config, input_dim);
}

/// Parameter count of a freshly built head, from the layer sizes alone.
inline std::size_t head_parameter_count(const HeadConfig& c, std::size_t input_dim) {
  std::size_t n = 0, width = input_dim;
  if (c.mode == InputMode::sequence) {
    n += 4 * c.lstm_hidden * (input_dim + c.lstm_hidden + 1);
    width = c.lstm_hidden;
  }
  for (auto d : c.dense) {
    n += (width + 1) * d;
    width = d;
  }
  return n + (width + 1) * c.output_size();
}

/// Clamped regression output and its bucket.
template <typename T>
PredictionResult predict_effort(const EstimatorModel<T>& model, const Representation& r) {
  require_config(model.config().output == HeadOutput::linear, "predict_effort: model has a softmax head");
  return model.predict(r);
}

template <typename T>
PredictionResult predict_class(const EstimatorModel<T>& model, const Representation& r) {
  require_config(model.config().output == HeadOutput::softmax, "predict_class: model has a linear head");
  return model.predict(r);
}

/// Mean absolute error on a sample set, measured against raw efforts for a
/// linear head and against bucketized efforts for a softmax head.
template <typename T>
double validation_mae(const EstimatorModel<T>& model, std::span<const Sample> samples) {
  std::vector<const Representation*> inputs;
  for (const auto& s : samples) inputs.push_back(s.input);
  const auto preds = model.predict_batch(inputs);
  const bool classes = model.config().output == HeadOutput::softmax;
  double sum = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i)
    sum += std::abs((classes ? bucketize(samples[i].effort) : samples[i].effort) - preds[i].effort);
  return sum / static_cast<double>(samples.size());
}

/// Tracks validation MAE across epochs. The best epoch is the first one with
/// the lowest MAE. The patience counter resets only when an epoch beats the
/// last reset point by more than epsilon.
class EarlyStopping {
 public:
  EarlyStopping(std::size_t patience, double epsilon) : patience_(patience), epsilon_(epsilon) {}

  /// Records the next epoch; true once `patience` epochs in a row failed to
  /// improve.
  bool observe(double mae) {
    ++epoch_;
    if (mae < best_) {
      best_ = mae;
      best_epoch_ = epoch_;
    }
    if (mae < reference_ - epsilon_) {
      reference_ = mae;
      stale_ = 0;
      return false;
    }
    return ++stale_ >= patience_;
  }

  std::size_t best_epoch() const { return best_epoch_; }
  double best() const { return best_; }
  std::size_t stale() const { return stale_; }

 private:
  std::size_t patience_;
  double epsilon_;
  std::size_t epoch_ = 0;
  std::size_t best_epoch_ = 0;
  std::size_t stale_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
  double reference_ = std::numeric_limits<double>::infinity();
};

/// Minibatch Adam on MSE (linear head) or cross-entropy over bucket labels
/// (softmax head). After every epoch the validation MAE is measured; the
/// parameters of the epoch with the lowest one are restored at the end.
/// Training stops once `patience` consecutive epochs fail to improve on the
/// reference MAE by more than epsilon.
template <typename T>
TrainHistory train_estimator(EstimatorModel<T>& model, std::span<const Sample> train, std::span<const Sample> val,
                             const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  if (train.empty()) throw DataError("train_estimator: empty training set");
  if (val.empty()) throw DataError("train_estimator: empty validation set");
  for (const auto& s : train) {
    model.check_input(*s.input);
    if (!(s.effort > 0)) throw DataError("train_estimator: effort must be positive");
  }
  for (const auto& s : val) model.check_input(*s.input);

  const HeadConfig& cfg = model.config();
  auto params = model.parameters();
  Adam<T> adam(params, AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  const RngStream shuffle_root = RngStream(cfg.seed).derive("shuffle");
  std::vector<std::size_t> order(train.size());
  std::vector<const Representation*> batch;
  std::vector<double> targets;
  std::vector<std::size_t> labels;

  TrainHistory hist;
  EarlyStopping stopper(cfg.patience, cfg.epsilon);
  std::vector<Tensor<T>> best_params = model.snapshot();

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    RngStream shuffler = shuffle_root.derive(epoch);
    shuffler.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      batch.clear();
      targets.clear();
      labels.clear();
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(train[order[i]].input);
        targets.push_back(train[order[i]].effort);
        labels.push_back(bucket_index(train[order[i]].effort));
      }
      const auto [x, mask] = model.make_batch(batch);
      zero_grads(params);
      const Tensor<T> y = model.forward(x, mask);
      LossResult<T> loss = cfg.output == HeadOutput::linear ? mse_loss(y, targets) : cross_entropy_loss(y, labels);
      model.backward(loss.grad);
      adam.update();
      loss_sum += loss.value * static_cast<double>(end - start);
    }
    const EpochRecord rec{epoch, loss_sum / static_cast<double>(train.size()), validation_mae(model, val)};
    hist.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
    const bool stop = stopper.observe(rec.validation_mae);
    if (stopper.best_epoch() == epoch) best_params = model.snapshot();
    if (stop) {
      hist.stop_reason = "patience";
      break;
    }
  }
  if (hist.stop_reason.empty()) hist.stop_reason = "epochs";
  hist.best_epoch = stopper.best_epoch();
  hist.best_validation_mae = stopper.best();
  model.restore(best_params);
  model.history = hist;
  return hist;
}

// ---------------------------------------------------------------------------
// Persistence

template <typename T>
Checkpoint to_checkpoint(const EstimatorModel<T>& model) {
  Checkpoint ckpt;
  ckpt.add_all(model.parameters());
  ckpt.sections["kind"] = "estimator";
  ckpt.sections["input_dim"] = std::to_string(model.input_dim());
  ckpt.sections["meta.head_config"] = model.config().to_json().dump();
  ckpt.sections["meta.source"] = model.source.dump();
  ckpt.sections["meta.provenance"] = model.provenance.dump();
  if (model.history) ckpt.sections["meta.history"] = model.history->to_json().dump();
  return ckpt;
}

template <typename T = float>
EstimatorModel<T> estimator_from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.sections.contains("kind") || ckpt.section("kind") != "estimator")
    throw DataError("checkpoint is not an estimator");
  try {
    const auto cfg = HeadConfig::from_json(nlohmann::json::parse(ckpt.section("meta.head_config")));
    EstimatorModel<T> m(cfg, std::stoull(ckpt.section("input_dim")));
    ckpt.restore_all(m.parameters());
    m.source = nlohmann::ordered_json::parse(ckpt.section("meta.source"));
    m.provenance = nlohmann::ordered_json::parse(ckpt.section("meta.provenance"));
    if (ckpt.sections.contains("meta.history"))
      m.history = TrainHistory::from_json(nlohmann::json::parse(ckpt.section("meta.history")));
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("estimator checkpoint: ") + e.what());
  }
}

template <typename T>
void save_estimator(const std::filesystem::path& path, const EstimatorModel<T>& model) {
  save_checkpoint(path, to_checkpoint(model));
}

template <typename T = float>
EstimatorModel<T> load_estimator(const std::filesystem::path& path) {
  return estimator_from_checkpoint<T>(load_checkpoint(path));
}

}  // namespace se3m
