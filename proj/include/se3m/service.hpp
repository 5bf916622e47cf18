#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <utility>

#include "json.hpp"
#include "se3m/checkpoint.hpp"
#include "se3m/contextual_embedding.hpp"
#include "se3m/error.hpp"
#include "se3m/estimator.hpp"
#include "se3m/experiment.hpp"
#include "se3m/static_embedding.hpp"

namespace se3m {

/// An embedding model loaded from disk together with the source wrapping it.
/// The models live on the heap so the source's references stay valid when
/// the bundle is moved.
struct LoadedSource {
  std::unique_ptr<StaticEmbeddingModel> static_model;
  std::unique_ptr<ContextualEmbedder> contextual_model;
  std::unique_ptr<RepresentationSource> source;
};

struct SourceOptions {
  bool finetuned = false;
  std::size_t max_words = 100;
  std::optional<std::size_t> pooling_layer;
};

/// Loads a static or contextual model; the checkpoint's "kind" decides which.
inline LoadedSource open_source(const std::filesystem::path& path, const SourceOptions& opts = {}) {
  const Checkpoint ckpt = load_checkpoint(path);
  LoadedSource out;
  const std::string kind = ckpt.sections.contains("kind") ? ckpt.section("kind") : "";
  if (kind == "contextual") {
    out.contextual_model = std::make_unique<ContextualEmbedder>(contextual_model_from_checkpoint(ckpt));
    out.source = std::make_unique<ContextualSource>(*out.contextual_model, path.string(), opts.finetuned,
                                                    PoolingStrategy{opts.pooling_layer});
  } else {
    out.static_model = std::make_unique<StaticEmbeddingModel>(static_model_from_checkpoint(ckpt));
    out.source = std::make_unique<StaticSource>(*out.static_model, path.string(), opts.finetuned, opts.max_words);
  }
  return out;
}

/// Re-opens the embedding model an estimator was trained on, from the
/// descriptor stored with the estimator.
inline LoadedSource open_source(const nlohmann::ordered_json& descriptor) {
  try {
    SourceOptions opts;
    opts.finetuned = descriptor.at("finetuned").get<bool>();
    if (descriptor.contains("max_words")) opts.max_words = descriptor.at("max_words").get<std::size_t>();
    if (descriptor.contains("pooling_layer")) opts.pooling_layer = descriptor.at("pooling_layer").get<std::size_t>();
    return open_source(descriptor.at("model").get<std::string>(), opts);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("embedding source descriptor: ") + e.what());
  }
}

struct EstimateResponse {
  double effort = 1.0;
  double bucket = 1.0;
  std::string model_id;
  bool degenerate = true;

  nlohmann::ordered_json to_json() const {
    return {{"effort", effort}, {"class", bucket}, {"model_id", model_id}, {"degenerate", degenerate}};
  }
};

/// Read-only estimator plus its embedding model; safe to share between
/// request threads.
class EstimationService {
 public:
  static EstimationService load(const std::filesystem::path& estimator_path) {
    EstimationService s;
    s.model_ = std::make_unique<EstimatorModel<float>>(load_estimator<float>(estimator_path));
    s.embedding_ = open_source(s.model_->source);
    if (s.embedding_.source->dim() != s.model_->input_dim())
      throw DataError("embedding model width does not match the estimator input");
    s.model_id_ = estimator_path.filename().string();
    return s;
  }

  const std::string& model_id() const { return model_id_; }
  const EstimatorModel<float>& estimator() const { return *model_; }

  EstimateResponse estimate(std::string_view text) const {
    const Representation r = embedding_.source->represent(text, model_->config().mode);
    const PredictionResult p = model_->predict(r);
    return {p.effort, p.bucket, model_id_, r.degenerate};
  }

  /// JSON body {"text": ...} in, HTTP status and JSON body out.
  std::pair<int, std::string> handle(std::string_view body) const {
    nlohmann::json req;
    try {
      req = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception&) {
      return {400, nlohmann::json{{"error", "request body is not valid JSON"}}.dump()};
    }
    if (!req.is_object() || !req.contains("text") || !req["text"].is_string())
      return {400, nlohmann::json{{"error", "expected an object with a string field \"text\""}}.dump()};
    try {
      return {200, estimate(req["text"].get<std::string>()).to_json().dump()};
    } catch (const Error& e) {
      return {422, nlohmann::json{{"error", e.what()}}.dump()};
    }
  }

 private:
  std::unique_ptr<EstimatorModel<float>> model_;
  LoadedSource embedding_;
  std::string model_id_;
};

}  // namespace se3m
