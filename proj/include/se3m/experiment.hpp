#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "se3m/contextual_embedding.hpp"
#include "se3m/corpus.hpp"
#include "se3m/error.hpp"
#include "se3m/estimator.hpp"
#include "se3m/eval.hpp"
#include "se3m/rng.hpp"
#include "se3m/static_embedding.hpp"
#include "se3m/text.hpp"

namespace se3m {

/// Turns requirement text into estimator inputs.
class RepresentationSource {
 public:
  virtual ~RepresentationSource() = default;

  virtual std::size_t dim() const = 0;
  virtual bool contextual() const = 0;
  virtual bool finetuned() const = 0;
  virtual Representation represent(std::string_view raw, InputMode mode) const = 0;
  virtual nlohmann::ordered_json describe() const = 0;
};

/// Word vectors of a static model. Sequence mode keeps the first `max_words`
/// cleaned tokens in order, with a zero row for each unknown token.
class StaticSource final : public RepresentationSource {
 public:
  StaticSource(const StaticEmbeddingModel& model, std::string model_id, bool finetuned, std::size_t max_words = 100,
               const StopwordSet& stopwords = default_stopwords())
      : model_(model), id_(std::move(model_id)), finetuned_(finetuned), max_words_(max_words), stopwords_(stopwords) {
    require_config(max_words_ >= 1, "static source: max_words must be positive");
  }

  std::size_t dim() const override { return model_.dim; }
  bool contextual() const override { return false; }
  bool finetuned() const override { return finetuned_; }

  Representation represent(std::string_view raw, InputMode mode) const override {
    TokenSequence tokens = tokenize_words(clean_text(raw, stopwords_));
    if (tokens.size() > max_words_) {
      tokens.tokens.resize(max_words_);
      tokens.truncated = true;
    }
    if (mode == InputMode::pooled) {
      PooledSentence p = mean_pool_sentence(model_, tokens);
      return Representation::pooled(std::move(p.vector), p.degenerate);
    }
    Representation r{std::vector<float>(tokens.size() * model_.dim, 0.0f), tokens.size(), model_.dim, true};
    for (std::size_t t = 0; t < tokens.size(); ++t)
      if (auto row = embed_word(model_, tokens.tokens[t])) {
        std::copy(row->begin(), row->end(), r.values.begin() + static_cast<std::ptrdiff_t>(t * model_.dim));
        r.degenerate = false;
      }
    return r;
  }

  nlohmann::ordered_json describe() const override {
    return {{"kind", "static"},       {"model", id_},        {"finetuned", finetuned_},
            {"dim", model_.dim},      {"vocab", model_.vocab.size()},
            {"objective", to_string(model_.config.mode)}, {"max_words", max_words_}};
  }

 private:
  const StaticEmbeddingModel& model_;
  std::string id_;
  bool finetuned_;
  std::size_t max_words_;
  const StopwordSet& stopwords_;
};

/// Token vectors (sequence) or their mean (pooled) from one encoder layer.
class ContextualSource final : public RepresentationSource {
 public:
  ContextualSource(const ContextualEmbedder& embedder, std::string model_id, bool finetuned, PoolingStrategy pooling = {},
                   const StopwordSet& stopwords = default_stopwords())
      : embedder_(embedder), id_(std::move(model_id)), finetuned_(finetuned), pooling_(pooling), stopwords_(stopwords) {
    pooling_.resolve(embedder_.model.num_layers());
  }

  std::size_t dim() const override { return embedder_.model.config().hidden; }
  bool contextual() const override { return true; }
  bool finetuned() const override { return finetuned_; }

  Representation represent(std::string_view raw, InputMode mode) const override {
    if (mode == InputMode::pooled) {
      PooledSentence p = embedder_.sentence_vector(raw, pooling_, stopwords_);
      return Representation::pooled(std::move(p.vector), p.degenerate);
    }
    const auto rows = embedder_.token_vectors(raw, pooling_, stopwords_);
    return Representation::sequence(rows, dim(), rows.empty());
  }

  nlohmann::ordered_json describe() const override {
    const auto& c = embedder_.model.config();
    return {{"kind", "contextual"},
            {"model", id_},
            {"finetuned", finetuned_},
            {"layers", c.layers},
            {"hidden", c.hidden},
            {"vocab", c.vocab_size},
            {"pooling_layer", pooling_.resolve(embedder_.model.num_layers())}};
  }

 private:
  const ContextualEmbedder& embedder_;
  std::string id_;
  bool finetuned_;
  PoolingStrategy pooling_;
  const StopwordSet& stopwords_;
};

// ---------------------------------------------------------------------------
// Experiments

struct ExperimentInfo {
  std::string id;
  std::string model;  // display name
  bool contextual = false;
  bool finetuned = false;
  HeadOutput output = HeadOutput::linear;
};

inline const std::vector<ExperimentInfo>& experiment_catalog() {
  static const std::vector<ExperimentInfo> all = {
      {"E1", "word2vec_base", false, false, HeadOutput::linear},
      {"E2", "word2vec_SE", false, true, HeadOutput::linear},
      {"E3", "BERT_base", true, false, HeadOutput::linear},
      {"E4", "BERT_SE", true, true, HeadOutput::linear},
      {"E5", "BERT_SE", true, true, HeadOutput::softmax},
  };
  return all;
}

inline const ExperimentInfo& experiment_info(std::string_view id) {
  for (const auto& e : experiment_catalog())
    if (e.id == id) return e;
  throw ConfigError("unknown experiment '" + std::string(id) + "' (expected E1..E5)");
}

struct ExperimentConfig {
  std::string id = "E1";
  HeadConfig head;
  double validation_fraction = 0.1;
  std::uint64_t seed = 1;

  void validate() const {
    experiment_info(id);
    head.validate();
    require_config(validation_fraction > 0.0 && validation_fraction < 1.0, "experiment: validation_fraction must lie in (0, 1)");
  }
};

inline std::string split_kind_name(SplitKind k) { return k == SplitKind::kfold ? "kfold" : "by-project"; }

/// Seeded carve of `fraction` of the training indices (at least one) into a
/// validation set. Returns {train, validation}, each in corpus order.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> carve_validation(std::vector<std::size_t> indices,
                                                                                     double fraction, RngStream rng) {
  if (indices.size() < 2) throw DataError("validation carve needs at least 2 training records");
  rng.shuffle(indices);
  const auto n_val = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(fraction * static_cast<double>(indices.size()))),
                                             1, indices.size() - 1);
  std::vector<std::size_t> val(indices.begin(), indices.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train(indices.begin() + static_cast<std::ptrdiff_t>(n_val), indices.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  return {std::move(train), std::move(val)};
}

using FoldCallback = std::function<void(const FoldResult&)>;

/// Runs one experiment over every round of the split plan. Representations
/// are extracted once; each round carves a validation set from its training
/// records, trains a fresh head and scores the test records. Degenerate
/// records never enter training or validation but are still predicted.
inline EvalReport run_experiment(const ExperimentConfig& config, const LabeledCorpus& corpus, const SplitPlan& plan,
                                 const RepresentationSource* source, const FoldCallback& on_fold = {}) {
  config.validate();
  const ExperimentInfo& info = experiment_info(config.id);
  if (!source) throw ConfigError(config.id + ": no embedding model supplied");
  if (source->contextual() != info.contextual || source->finetuned() != info.finetuned)
    throw ConfigError(config.id + " needs a " + (info.finetuned ? "fine-tuned " : "base ") +
                      (info.contextual ? "contextual" : "static") + " embedding model");
  if (!plan.matches(corpus)) throw ConfigError(config.id + ": split plan was not made for this corpus");

  HeadConfig head = config.head;
  head.output = info.output;
  const bool classes = head.output == HeadOutput::softmax;

  std::vector<Representation> reps;
  reps.reserve(corpus.size());
  for (const auto& rec : corpus.records()) {
    reps.push_back(source->represent(rec.text, head.mode));
    reps.back().degenerate = reps.back().degenerate || rec.degenerate;
  }

  EvalReport report;
  report.experiment_id = config.id;
  report.model = info.model;
  report.split_kind = split_kind_name(plan.kind);
  report.input_mode = to_string(head.mode);
  if (classes) report.confusion = ConfusionMatrix{};

  const RngStream root(config.seed);
  nlohmann::ordered_json fold_seeds = nlohmann::ordered_json::array();
  for (std::size_t round = 0; round < plan.rounds(); ++round) {
    std::vector<std::size_t> usable;
    for (auto i : plan.train_indices(round))
      if (!reps[i].degenerate) usable.push_back(i);
    const auto [train_idx, val_idx] = carve_validation(usable, config.validation_fraction, root.derive("validation").derive(round));

    HeadConfig fold_head = head;
    fold_head.seed = RngStream(head.seed).derive(round).next_u64();
    fold_seeds.push_back(fold_head.seed);
    auto model = build_estimator<float>(fold_head, source->dim());
    std::vector<Sample> train, val;
    for (auto i : train_idx) train.push_back({&reps[i], corpus[i].effort});
    for (auto i : val_idx) val.push_back({&reps[i], corpus[i].effort});
    const TrainHistory hist = train_estimator(model, train, val);

    const auto test_idx = plan.test_indices(round);
    std::vector<const Representation*> inputs;
    for (auto i : test_idx) inputs.push_back(&reps[i]);
    const auto preds = model.predict_batch(inputs);
    std::vector<double> actual, predicted;
    for (std::size_t k = 0; k < test_idx.size(); ++k) {
      const auto& rec = corpus[test_idx[k]];
      const double a = classes ? bucketize(rec.effort) : rec.effort;
      actual.push_back(a);
      predicted.push_back(preds[k].effort);
      report.predictions.push_back({rec.id, rec.project_id, round, rec.effort, preds[k].effort, bucketize(rec.effort),
                                    preds[k].bucket, reps[test_idx[k]].degenerate});
      if (classes) report.confusion->add(a, preds[k].bucket);
    }

    FoldResult fr;
    fr.round = round;
    fr.label = plan.labels[round];
    fr.train_size = train.size();
    fr.validation_size = val.size();
    fr.test_size = test_idx.size();
    fr.best_epoch = hist.best_epoch;
    fr.best_validation_mae = hist.best_validation_mae;
    fr.stop_reason = hist.stop_reason;
    fr.metrics = compute_metrics(actual, predicted);
    report.folds.push_back(fr);
    if (on_fold) on_fold(fr);
  }
  report.finalize();

  nlohmann::ordered_json prov;
  prov["experiment"] = config.id;
  prov["seed"] = config.seed;
  prov["validation_fraction"] = config.validation_fraction;
  prov["head"] = head.to_json();
  prov["fold_head_seeds"] = fold_seeds;
  prov["split"] = {{"kind", report.split_kind}, {"seed", plan.seed}, {"rounds", plan.rounds()}};
  prov["source"] = source->describe();
  prov["records"] = corpus.size();
  prov["degenerate_records"] = std::count_if(reps.begin(), reps.end(), [](const auto& r) { return r.degenerate; });
  prov["metric_space"] = classes ? "bucket" : "story_points";
  report.provenance = prov;
  return report;
}

}  // namespace se3m
