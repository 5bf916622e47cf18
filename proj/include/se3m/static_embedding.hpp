#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "se3m/checkpoint.hpp"
#include "se3m/corpus.hpp"
#include "se3m/layers.hpp"
#include "se3m/rng.hpp"

namespace se3m {

enum class StaticMode { cbow, skipgram };

inline std::string to_string(StaticMode m) { return m == StaticMode::cbow ? "cbow" : "skipgram"; }

inline StaticMode parse_static_mode(std::string_view s) {
  if (s == "cbow") return StaticMode::cbow;
  if (s == "skipgram" || s == "skip-gram") return StaticMode::skipgram;
  throw ConfigError("unknown static embedding mode '" + std::string(s) + "'");
}

struct StaticTrainConfig {
  StaticMode mode = StaticMode::cbow;
  std::size_t dim = 100;
  std::size_t window = 5;
  std::size_t negatives = 5;
  std::size_t epochs = 5;
  double lr = 0.05;
  std::uint64_t min_count = 1;
  std::uint64_t seed = 1;

  void validate() const {
    require_config(dim >= 1, "static embedding dimension must be >= 1");
    require_config(window >= 1, "window must be >= 1");
    require_config(negatives >= 1, "negatives must be >= 1");
    require_config(min_count >= 1, "min_count must be >= 1");
    require_config(lr > 0, "learning rate must be positive");
  }

  nlohmann::ordered_json to_json() const {
    return {{"mode", to_string(mode)}, {"dim", dim},           {"window", window}, {"negatives", negatives},
            {"epochs", epochs},        {"lr", lr},             {"min_count", min_count}, {"seed", seed}};
  }

  static StaticTrainConfig from_json(const nlohmann::json& j) {
    StaticTrainConfig c;
    c.mode = parse_static_mode(j.value("mode", std::string("cbow")));
    c.dim = j.value("dim", c.dim);
    c.window = j.value("window", c.window);
    c.negatives = j.value("negatives", c.negatives);
    c.epochs = j.value("epochs", c.epochs);
    c.lr = j.value("lr", c.lr);
    c.min_count = j.value("min_count", c.min_count);
    c.seed = j.value("seed", c.seed);
    return c;
  }
};

/// Vocabulary plus input ("word") and output ("context") vectors, |V| x d each.
struct StaticEmbeddingModel {
  Vocabulary vocab;
  std::size_t dim = 0;
  std::vector<float> input;
  std::vector<float> output;
  StaticTrainConfig config;

  std::span<const float> input_row(std::size_t i) const { return std::span<const float>(input).subspan(i * dim, dim); }
  std::span<float> input_row(std::size_t i) { return std::span<float>(input).subspan(i * dim, dim); }
  std::span<float> output_row(std::size_t i) { return std::span<float>(output).subspan(i * dim, dim); }
  std::span<const float> output_row(std::size_t i) const { return std::span<const float>(output).subspan(i * dim, dim); }
};

/// One negative-sampling training unit: the averaged input rows predict the
/// target against the listed negatives.
struct NsExample {
  std::vector<std::size_t> inputs;
  std::size_t target = 0;
  std::vector<std::size_t> negatives;
};

namespace detail {

/// Sampling distribution proportional to count^0.75.
class NoiseDistribution {
 public:
  NoiseDistribution() = default;
  explicit NoiseDistribution(const std::vector<std::pair<std::size_t, std::uint64_t>>& index_counts) {
    double total = 0;
    for (const auto& [idx, n] : index_counts) {
      if (n == 0) continue;
      total += std::pow(static_cast<double>(n), 0.75);
      indices_.push_back(idx);
      cumulative_.push_back(total);
    }
  }
  bool empty() const { return indices_.empty(); }
  std::size_t sample(RngStream& rng) const {
    const double u = rng.uniform() * cumulative_.back();
    const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
    return indices_[std::min<std::size_t>(static_cast<std::size_t>(it - cumulative_.begin()), indices_.size() - 1)];
  }

 private:
  std::vector<std::size_t> indices_;
  std::vector<double> cumulative_;
};

using IndexedSentences = std::vector<std::vector<std::size_t>>;

inline IndexedSentences index_sentences(const Vocabulary& vocab, std::span<const std::string> cleaned) {
  IndexedSentences out;
  for (const auto& text : cleaned) {
    std::vector<std::size_t> ids;
    for (const auto& tok : tokenize_words(text).tokens)
      if (auto i = vocab.find(tok); i && *i >= Vocabulary::kSpecials) ids.push_back(*i);
    if (!ids.empty()) out.push_back(std::move(ids));
  }
  return out;
}

inline bool has_training_pair(const IndexedSentences& sentences) {
  return std::any_of(sentences.begin(), sentences.end(), [](const auto& s) { return s.size() >= 2; });
}

inline double dot(std::span<const float> a, std::span<const float> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

inline double dot(const std::vector<double>& a, std::span<const float> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// One update of the output rows for `target` (label 1) and sampled
/// negatives (label 0), accumulating the input-side gradient in `neu1e`.
inline void ns_update(StaticEmbeddingModel& m, const std::vector<double>& h, std::size_t target,
                      const NoiseDistribution& noise, std::size_t negatives, double lr, RngStream& rng,
                      std::vector<double>& neu1e) {
  for (std::size_t d = 0; d <= negatives; ++d) {
    std::size_t word = target;
    double label = 1.0;
    if (d > 0) {
      word = noise.sample(rng);
      if (word == target) continue;
      label = 0.0;
    }
    auto out = m.output_row(word);
    const double g = (label - sigmoid(dot(h, out))) * lr;
    for (std::size_t k = 0; k < m.dim; ++k) {
      neu1e[k] += g * out[k];
      out[k] = static_cast<float>(out[k] + g * h[k]);
    }
  }
}

using StaticEpochCallback = std::function<void(std::size_t epoch, const StaticEmbeddingModel&)>;

/// Single-threaded SGD over the sentences with linearly decaying rate.
inline void run_static_sgd(StaticEmbeddingModel& m, const IndexedSentences& sentences, const NoiseDistribution& noise,
                           std::size_t epochs, const StaticTrainConfig& cfg, RngStream& rng,
                           const StaticEpochCallback& on_epoch) {
  std::size_t words_per_epoch = 0;
  for (const auto& s : sentences) words_per_epoch += s.size();
  const double total = static_cast<double>(words_per_epoch * std::max<std::size_t>(epochs, 1));
  std::size_t processed = 0;
  std::vector<double> h(m.dim), neu1e(m.dim);
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    for (const auto& sent : sentences) {
      for (std::size_t i = 0; i < sent.size(); ++i, ++processed) {
        const double lr = cfg.lr * std::max(1e-4, 1.0 - static_cast<double>(processed) / total);
        const std::size_t span = cfg.window - rng.below(cfg.window);  // reduced window in [1, window]
        const std::size_t lo = i >= span ? i - span : 0;
        const std::size_t hi = std::min(sent.size() - 1, i + span);
        if (cfg.mode == StaticMode::cbow) {
          std::fill(h.begin(), h.end(), 0.0);
          std::size_t n_ctx = 0;
          for (std::size_t j = lo; j <= hi; ++j) {
            if (j == i) continue;
            const auto row = m.input_row(sent[j]);
            for (std::size_t k = 0; k < m.dim; ++k) h[k] += row[k];
            ++n_ctx;
          }
          if (n_ctx == 0) continue;
          for (auto& v : h) v /= static_cast<double>(n_ctx);
          std::fill(neu1e.begin(), neu1e.end(), 0.0);
          ns_update(m, h, sent[i], noise, cfg.negatives, lr, rng, neu1e);
          for (std::size_t j = lo; j <= hi; ++j) {
            if (j == i) continue;
            auto row = m.input_row(sent[j]);
            for (std::size_t k = 0; k < m.dim; ++k) row[k] = static_cast<float>(row[k] + neu1e[k]);
          }
        } else {
          for (std::size_t j = lo; j <= hi; ++j) {
            if (j == i) continue;
            auto row = m.input_row(sent[j]);
            for (std::size_t k = 0; k < m.dim; ++k) h[k] = row[k];
            std::fill(neu1e.begin(), neu1e.end(), 0.0);
            ns_update(m, h, sent[i], noise, cfg.negatives, lr, rng, neu1e);
            for (std::size_t k = 0; k < m.dim; ++k) row[k] = static_cast<float>(row[k] + neu1e[k]);
          }
        }
      }
    }
    if (on_epoch) on_epoch(epoch + 1, m);
  }
}

inline NoiseDistribution noise_from_sentences(const IndexedSentences& sentences) {
  std::map<std::size_t, std::uint64_t> counts;
  for (const auto& s : sentences)
    for (auto i : s) ++counts[i];
  return NoiseDistribution(std::vector<std::pair<std::size_t, std::uint64_t>>(counts.begin(), counts.end()));
}

}  // namespace detail

/// Trains CBOW or skip-gram vectors with negative sampling on cleaned texts.
inline StaticEmbeddingModel train_static(std::span<const std::string> cleaned, const StaticTrainConfig& cfg,
                                         const detail::StaticEpochCallback& on_epoch = {}) {
  cfg.validate();
  StaticEmbeddingModel m;
  m.vocab = build_word_vocab(cleaned, cfg.min_count);
  m.dim = cfg.dim;
  m.config = cfg;
  const auto sentences = detail::index_sentences(m.vocab, cleaned);
  if (!detail::has_training_pair(sentences)) throw DataError("train_static: corpus yields no (center, context) pairs");
  RngStream rng(cfg.seed);
  m.input.resize(m.vocab.size() * m.dim);
  m.output.assign(m.vocab.size() * m.dim, 0.0f);
  const double bound = 0.5 / static_cast<double>(m.dim);
  for (std::size_t i = Vocabulary::kSpecials; i < m.vocab.size(); ++i)
    for (auto& v : m.input_row(i)) v = static_cast<float>(rng.uniform(-bound, bound));
  const auto noise = detail::noise_from_sentences(sentences);
  detail::run_static_sgd(m, sentences, noise, cfg.epochs, cfg, rng, on_epoch);
  return m;
}

inline StaticEmbeddingModel train_static(const UnlabeledCorpus& corpus, const StaticTrainConfig& cfg,
                                         const detail::StaticEpochCallback& on_epoch = {}) {
  return train_static(cleaned_texts(corpus), cfg, on_epoch);
}

/// Continues training on a domain corpus. New tokens meeting min_count are
/// appended to the vocabulary with fresh rows; negatives are drawn from the
/// domain corpus only, so rows of words absent from it are never touched.
inline StaticEmbeddingModel finetune_static(const StaticEmbeddingModel& base, std::span<const std::string> cleaned,
                                            std::size_t extra_epochs) {
  if (cleaned.empty()) throw DataError("finetune_static: empty fine-tuning corpus");
  StaticEmbeddingModel m = base;
  const auto counts = count_tokens(cleaned);
  if (counts.empty()) throw DataError("finetune_static: fine-tuning corpus has no tokens");
  RngStream rng = RngStream(base.config.seed).derive("finetune");
  const double bound = 0.5 / static_cast<double>(m.dim);
  for (const auto& [tok, n] : rank_tokens(counts, base.config.min_count)) {
    if (m.vocab.contains(tok)) continue;
    m.vocab.add(tok, 0);
    for (std::size_t k = 0; k < m.dim; ++k) m.input.push_back(static_cast<float>(rng.uniform(-bound, bound)));
    m.output.resize(m.output.size() + m.dim, 0.0f);
  }
  for (const auto& [tok, n] : counts)
    if (auto i = m.vocab.find(tok); i && *i >= Vocabulary::kSpecials) m.vocab.add(tok, n);
  const auto sentences = detail::index_sentences(m.vocab, cleaned);
  if (sentences.empty()) throw DataError("finetune_static: no in-vocabulary tokens in fine-tuning corpus");
  const auto noise = detail::noise_from_sentences(sentences);
  detail::run_static_sgd(m, sentences, noise, extra_epochs, m.config, rng, {});
  return m;
}

inline StaticEmbeddingModel finetune_static(const StaticEmbeddingModel& base, const UnlabeledCorpus& corpus,
                                            std::size_t extra_epochs) {
  if (corpus.empty()) throw DataError("finetune_static: empty fine-tuning corpus");
  return finetune_static(base, cleaned_texts(corpus), extra_epochs);
}

/// Input-matrix row, or nullopt for unknown tokens and the specials.
inline std::optional<std::span<const float>> embed_word(const StaticEmbeddingModel& m, std::string_view token) {
  const auto i = m.vocab.find(token);
  if (!i || *i < Vocabulary::kSpecials) return std::nullopt;
  return m.input_row(*i);
}

struct PooledSentence {
  std::vector<float> vector;
  double oov_ratio = 1.0;
  bool degenerate = true;
};

/// Mean of the in-vocabulary token vectors; pads are ignored and OOV tokens
/// skipped. Sentences without a known token give the zero vector.
inline PooledSentence mean_pool_sentence(const StaticEmbeddingModel& m, const TokenSequence& tokens) {
  PooledSentence out{std::vector<float>(m.dim, 0.0f), 1.0, true};
  std::vector<double> acc(m.dim, 0.0);
  std::size_t real = 0, known = 0;
  for (std::size_t t = 0; t < tokens.real_length(); ++t) {
    if (tokens.tokens[t] == kPadToken) continue;
    ++real;
    if (auto row = embed_word(m, tokens.tokens[t])) {
      ++known;
      for (std::size_t k = 0; k < m.dim; ++k) acc[k] += (*row)[k];
    }
  }
  if (known == 0) return out;
  for (std::size_t k = 0; k < m.dim; ++k) out.vector[k] = static_cast<float>(acc[k] / static_cast<double>(known));
  out.oov_ratio = static_cast<double>(real - known) / static_cast<double>(real);
  out.degenerate = false;
  return out;
}

inline double cosine_similarity(std::span<const float> a, std::span<const float> b) {
  const double na = std::sqrt(detail::dot(a, a)), nb = std::sqrt(detail::dot(b, b));
  if (na == 0 || nb == 0) return 0.0;
  return detail::dot(a, b) / (na * nb);
}

/// Deterministic sample of negative-sampling units from cleaned texts, used to
/// track the training objective on a fixed minibatch.
inline std::vector<NsExample> sample_ns_examples(const StaticEmbeddingModel& m, std::span<const std::string> cleaned,
                                                 std::size_t count, std::uint64_t seed) {
  const auto sentences = detail::index_sentences(m.vocab, cleaned);
  const auto noise = detail::noise_from_sentences(sentences);
  RngStream rng(seed);
  std::vector<NsExample> out;
  std::size_t guard = 0;
  while (out.size() < count && ++guard < 100 * count + 100) {
    const auto& s = sentences[rng.below(sentences.size())];
    if (s.size() < 2) continue;
    const std::size_t i = rng.below(s.size());
    const std::size_t lo = i >= m.config.window ? i - m.config.window : 0;
    const std::size_t hi = std::min(s.size() - 1, i + m.config.window);
    NsExample ex;
    ex.target = s[i];
    if (m.config.mode == StaticMode::cbow) {
      for (std::size_t j = lo; j <= hi; ++j)
        if (j != i) ex.inputs.push_back(s[j]);
    } else {
      std::size_t j = lo + rng.below(hi - lo);
      if (j >= i) ++j;
      ex.inputs.push_back(s[j]);
    }
    while (ex.negatives.size() < m.config.negatives) {
      const auto w = noise.sample(rng);
      if (w != ex.target) ex.negatives.push_back(w);
    }
    out.push_back(std::move(ex));
  }
  return out;
}

/// Mean of -log s(u_t . h) - sum log s(-u_n . h) over the examples.
inline double negative_sampling_loss(const StaticEmbeddingModel& m, const std::vector<NsExample>& examples) {
  double total = 0;
  std::vector<double> h(m.dim);
  for (const auto& ex : examples) {
    std::fill(h.begin(), h.end(), 0.0);
    for (auto i : ex.inputs) {
      const auto row = m.input_row(i);
      for (std::size_t k = 0; k < m.dim; ++k) h[k] += row[k];
    }
    for (auto& v : h) v /= static_cast<double>(ex.inputs.size());
    total -= std::log(sigmoid(detail::dot(h, m.output_row(ex.target))));
    for (auto n : ex.negatives) total -= std::log(sigmoid(-detail::dot(h, m.output_row(n))));
  }
  return total / static_cast<double>(examples.size());
}

inline Checkpoint to_checkpoint(const StaticEmbeddingModel& m) {
  Checkpoint ckpt;
  const std::size_t v = m.vocab.size();
  ckpt.tensors.push_back({"static.input", DType::f32, {v, m.dim}, std::vector<double>(m.input.begin(), m.input.end())});
  ckpt.tensors.push_back({"static.output", DType::f32, {v, m.dim}, std::vector<double>(m.output.begin(), m.output.end())});
  ckpt.sections["kind"] = "static";
  ckpt.sections["vocab"] = m.vocab.serialize();
  ckpt.sections["config"] = m.config.to_json().dump();
  return ckpt;
}

inline void save_static_model(const std::filesystem::path& path, const StaticEmbeddingModel& m) {
  save_checkpoint(path, to_checkpoint(m));
}

inline StaticEmbeddingModel static_model_from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.sections.contains("kind") || ckpt.section("kind") != "static") throw DataError("checkpoint is not a static embedding model");
  StaticEmbeddingModel m;
  m.vocab = Vocabulary::deserialize(ckpt.section("vocab"));
  m.config = StaticTrainConfig::from_json(nlohmann::json::parse(ckpt.section("config")));
  const auto& in = ckpt.tensor("static.input");
  const auto& out = ckpt.tensor("static.output");
  if (in.shape.size() != 2 || in.shape[0] != m.vocab.size() || out.shape != in.shape)
    throw DataError("static model matrices do not match the vocabulary");
  m.dim = in.shape[1];
  m.input.assign(in.values.begin(), in.values.end());
  m.output.assign(out.values.begin(), out.values.end());
  return m;
}

inline StaticEmbeddingModel load_static_model(const std::filesystem::path& path) {
  return static_model_from_checkpoint(load_checkpoint(path));
}

}  // namespace se3m
