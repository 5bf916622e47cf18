#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "se3m/checkpoint.hpp"
#include "se3m/corpus.hpp"
#include "se3m/error.hpp"
#include "se3m/optim.hpp"
#include "se3m/pretraining_data.hpp"
#include "se3m/rng.hpp"
#include "se3m/static_embedding.hpp"
#include "se3m/text.hpp"
#include "se3m/transformer.hpp"
#include "se3m/wordpiece.hpp"

namespace se3m {

struct PretrainConfig {
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::uint64_t seed = 1;

  void validate() const {
    require_config(batch_size >= 1, "pretrain: batch_size must be at least 1");
    require_config(lr > 0.0, "pretrain: lr must be positive");
  }
};

/// Training-mode averages over one epoch.
struct PretrainEpoch {
  std::size_t epoch = 0;
  double mlm_loss = 0.0;
  double nsp_loss = 0.0;
  std::size_t steps = 0;
};

struct PretrainEval {
  double mlm_loss = 0.0;
  double mlm_accuracy = 0.0;
  double nsp_loss = 0.0;
  double nsp_accuracy = 0.0;
  std::size_t masked = 0;
  std::size_t examples = 0;
};

struct PretrainHistory {
  std::vector<PretrainEpoch> epochs;
  std::size_t steps = 0;
};

/// Inference-mode MLM loss/accuracy (per masked position) and NSP
/// loss/accuracy (per example).
template <typename T>
PretrainEval evaluate_pretraining(const TransformerModel<T>& model, std::span<const PretrainExample> examples) {
  PretrainEval ev;
  std::size_t correct = 0, nsp_correct = 0;
  for (const auto& ex : examples) {
    const ExampleLoss l = model.evaluate(ex);
    ev.mlm_loss += l.mlm_sum;
    ev.masked += l.mlm_count;
    correct += l.mlm_correct;
    ev.nsp_loss += l.nsp;
    nsp_correct += l.nsp_correct ? 1 : 0;
  }
  ev.examples = examples.size();
  if (ev.masked) {
    ev.mlm_loss /= static_cast<double>(ev.masked);
    ev.mlm_accuracy = static_cast<double>(correct) / static_cast<double>(ev.masked);
  }
  if (ev.examples) {
    ev.nsp_loss /= static_cast<double>(ev.examples);
    ev.nsp_accuracy = static_cast<double>(nsp_correct) / static_cast<double>(ev.examples);
  }
  return ev;
}

/// Minimizes MLM + NSP cross-entropy with Adam over shuffled minibatches.
/// Within a batch the MLM loss is averaged over all masked positions and the
/// NSP loss over examples.
template <typename T>
PretrainHistory pretrain(TransformerModel<T>& model, std::span<const PretrainExample> examples,
                         const PretrainConfig& cfg,
                         const std::function<void(const PretrainEpoch&)>& on_epoch = {}) {
  cfg.validate();
  if (examples.empty()) throw DataError("pretrain: no examples");
  for (const auto& ex : examples)
    require_config(ex.size() <= model.config().max_seq_len,
                   "pretrain: example of length " + std::to_string(ex.size()) + " exceeds max_seq_len");

  auto params = model.parameters();
  Adam<T> adam(params, AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  const RngStream root(cfg.seed);
  RngStream dropout = root.derive("dropout");
  const RngStream shuffle_root = root.derive("shuffle");
  std::vector<std::size_t> order(examples.size());
  PretrainHistory history;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    RngStream shuffler = shuffle_root.derive(epoch);
    shuffler.shuffle(order);
    PretrainEpoch rec{epoch, 0.0, 0.0, 0};
    std::size_t masked_total = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::size_t masked = 0;
      for (std::size_t i = start; i < end; ++i) masked += examples[order[i]].masked_positions.size();
      const double mlm_scale = masked ? 1.0 / static_cast<double>(masked) : 0.0;
      const double nsp_scale = 1.0 / static_cast<double>(end - start);
      zero_grads(params);
      for (std::size_t i = start; i < end; ++i) {
        const ExampleLoss l = model.accumulate_gradients(examples[order[i]], mlm_scale, nsp_scale, &dropout);
        rec.mlm_loss += l.mlm_sum;
        rec.nsp_loss += l.nsp;
      }
      masked_total += masked;
      adam.update();
      ++rec.steps;
    }
    if (masked_total) rec.mlm_loss /= static_cast<double>(masked_total);
    rec.nsp_loss /= static_cast<double>(examples.size());
    history.steps += rec.steps;
    history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return history;
}

/// Continues MLM + NSP training on examples drawn from a domain corpus. The
/// vocabulary is left as is; unseen words fall back to known pieces or [UNK].
template <typename T>
PretrainHistory finetune_lm(TransformerModel<T>& model, const WordPieceVocab& vocab, const UnlabeledCorpus& domain,
                            const PretrainConfig& cfg, PretrainDataConfig data_cfg = {},
                            const StopwordSet& stopwords = default_stopwords()) {
  if (domain.empty()) throw DataError("finetune_lm: empty domain corpus");
  require_config(vocab.size() == model.config().vocab_size, "finetune_lm: vocabulary does not match the model");
  if (cfg.epochs == 0) return {};
  data_cfg.max_seq_len = std::min(data_cfg.max_seq_len, model.config().max_seq_len);
  const auto examples = create_pretraining_data(domain, vocab, data_cfg, stopwords);
  return pretrain(model, std::span<const PretrainExample>(examples), cfg);
}

// ---------------------------------------------------------------------------
// Pooling

/// Which of the L+1 layer outputs to average. Unset means the penultimate
/// encoder layer, index L-1.
struct PoolingStrategy {
  std::optional<std::size_t> layer;

  std::size_t resolve(std::size_t num_layers) const {
    const std::size_t idx = layer.value_or(num_layers - 1);
    require_config(idx <= num_layers, "pooling: layer " + std::to_string(idx) + " does not exist in a " +
                                          std::to_string(num_layers) + "-layer encoder");
    return idx;
  }
};

inline bool is_frame_token(std::size_t id) {
  return id == WordPieceVocab::kCls || id == WordPieceVocab::kSep || id == WordPieceVocab::kPad;
}

/// Mean of the selected layer over real tokens (mask 1, not [CLS]/[SEP]/[PAD]).
/// With no real tokens, the [CLS] row is returned and flagged degenerate.
/// oov_ratio is the share of [UNK] among the real tokens.
template <typename T>
PooledSentence pool_sentence(const std::vector<Tensor<T>>& layers, std::span<const std::size_t> ids,
                             const PoolingStrategy& strategy = {}, std::span<const std::uint8_t> mask = {}) {
  require_shape(!layers.empty(), "pooling: no layer outputs");
  const Tensor<T>& sel = layers[strategy.resolve(layers.size() - 1)];
  require_shape(sel.rows() == ids.size(), "pooling: ids do not match the layer length");
  require_shape(mask.empty() || mask.size() == ids.size(), "pooling: mask length mismatch");
  PooledSentence out;
  const std::size_t h = sel.cols();
  std::vector<double> acc(h, 0.0);
  std::size_t n = 0, unk = 0;
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if ((!mask.empty() && !mask[t]) || is_frame_token(ids[t])) continue;
    for (std::size_t j = 0; j < h; ++j) acc[j] += static_cast<double>(sel(t, j));
    ++n;
    if (ids[t] == WordPieceVocab::kUnk) ++unk;
  }
  out.vector.resize(h);
  if (n == 0) {
    for (std::size_t j = 0; j < h; ++j) out.vector[j] = static_cast<float>(sel(0, j));
    out.degenerate = true;
    out.oov_ratio = 1.0;
    return out;
  }
  for (std::size_t j = 0; j < h; ++j) out.vector[j] = static_cast<float>(acc[j] / static_cast<double>(n));
  out.oov_ratio = static_cast<double>(unk) / static_cast<double>(n);
  out.degenerate = false;
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary + encoder bundle

struct ContextualEmbedder {
  WordPieceVocab vocab;
  TransformerModel<float> model;

  /// Cleans the text and frames it as [CLS] pieces [SEP] within max_seq_len.
  WordPieceEncoding encode_text(std::string_view raw, const StopwordSet& stopwords = default_stopwords()) const {
    return encode_for_model(vocab, clean_text(raw, stopwords), model.config().max_seq_len);
  }

  PooledSentence sentence_vector(std::string_view raw, const PoolingStrategy& strategy = {},
                                 const StopwordSet& stopwords = default_stopwords()) const {
    const auto enc = encode_text(raw, stopwords);
    return pool_sentence(model.encode(enc.ids, enc.segments), enc.ids, strategy);
  }

  /// Selected-layer vectors of the real tokens, [n x H]; n may be 0.
  std::vector<std::vector<float>> token_vectors(std::string_view raw, const PoolingStrategy& strategy = {},
                                                const StopwordSet& stopwords = default_stopwords()) const {
    const auto enc = encode_text(raw, stopwords);
    const auto layers = model.encode(enc.ids, enc.segments);
    const auto& sel = layers[strategy.resolve(model.num_layers())];
    std::vector<std::vector<float>> rows;
    for (std::size_t t = 0; t < enc.ids.size(); ++t)
      if (!is_frame_token(enc.ids[t])) rows.emplace_back(sel.row(t).begin(), sel.row(t).end());
    return rows;
  }
};

/// Fresh encoder sized to the vocabulary.
inline ContextualEmbedder make_contextual_embedder(WordPieceVocab vocab, TransformerConfig cfg) {
  cfg.vocab_size = vocab.size();
  return ContextualEmbedder{std::move(vocab), TransformerModel<float>(cfg)};
}

inline Checkpoint to_checkpoint(const ContextualEmbedder& e) {
  Checkpoint ckpt = e.model.to_checkpoint();
  ckpt.sections["kind"] = "contextual";
  ckpt.sections["vocab"] = e.vocab.to_text();
  return ckpt;
}

inline void save_contextual_model(const std::filesystem::path& path, const ContextualEmbedder& e) {
  save_checkpoint(path, to_checkpoint(e));
}

inline ContextualEmbedder contextual_model_from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.sections.contains("kind") || ckpt.section("kind") != "contextual")
    throw DataError("checkpoint is not a contextual embedding model");
  ContextualEmbedder e{WordPieceVocab::from_text(ckpt.section("vocab")), TransformerModel<float>::from_checkpoint(ckpt)};
  if (e.vocab.size() != e.model.config().vocab_size) throw DataError("contextual model vocabulary size mismatch");
  return e;
}

inline ContextualEmbedder load_contextual_model(const std::filesystem::path& path) {
  return contextual_model_from_checkpoint(load_checkpoint(path));
}

}  // namespace se3m
