#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "se3m/corpus.hpp"
#include "se3m/error.hpp"
#include "se3m/rng.hpp"
#include "se3m/text.hpp"
#include "se3m/wordpiece.hpp"

namespace se3m {

/// One MLM + NSP training instance.
struct PretrainExample {
  std::vector<std::size_t> ids;            // after masking, framed with [CLS]/[SEP]
  std::vector<std::uint8_t> segments;      // 0 for the first sentence, 1 for the second
  std::vector<std::size_t> masked_positions;
  std::vector<std::size_t> masked_labels;  // original id at each masked position
  bool is_next = false;

  std::size_t size() const { return ids.size(); }

  /// Full-length label vector: the original id wherever one is known, i.e.
  /// masked positions carry their label and others carry the (unmasked) input.
  std::vector<std::size_t> dense_labels() const {
    std::vector<std::size_t> labels = ids;
    for (std::size_t k = 0; k < masked_positions.size(); ++k) labels[masked_positions[k]] = masked_labels[k];
    return labels;
  }
};

struct PretrainDataConfig {
  std::size_t max_seq_len = 100;
  double mask_rate = 0.15;
  double mask_token_prob = 0.8;
  double random_token_prob = 0.1;
  std::size_t dupe_factor = 1;
  std::uint64_t seed = 12345;

  void validate() const {
    require_config(max_seq_len >= 5, "pretraining data: max_seq_len must be at least 5");
    require_config(mask_rate > 0.0 && mask_rate < 1.0, "pretraining data: mask_rate must lie in (0, 1)");
    require_config(mask_token_prob >= 0.0 && random_token_prob >= 0.0 && mask_token_prob + random_token_prob <= 1.0,
                   "pretraining data: replacement probabilities must be non-negative and sum to at most 1");
    require_config(dupe_factor >= 1, "pretraining data: dupe_factor must be at least 1");
  }
};

/// Splits on '.' and newlines, then cleans each piece. Empty sentences are
/// dropped.
inline std::vector<std::string> split_sentences(std::string_view document,
                                                const StopwordSet& stopwords = default_stopwords()) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= document.size(); ++i) {
    if (i == document.size() || document[i] == '.' || document[i] == '\n') {
      auto cleaned = clean_text(document.substr(start, i - start), stopwords);
      if (!cleaned.empty()) out.push_back(std::move(cleaned));
      start = i + 1;
    }
  }
  return out;
}

/// Number of positions to mask among `maskable` candidates.
inline std::size_t mask_count(std::size_t maskable, double rate) {
  return static_cast<std::size_t>(std::llround(rate * static_cast<double>(maskable)));
}

/// Chooses round(rate * maskable) non-special positions, then replaces 80%
/// with [MASK], 10% with a random non-special piece and leaves 10% unchanged
/// (proportions from the config).
inline void apply_masking(PretrainExample& ex, const WordPieceVocab& vocab, const PretrainDataConfig& cfg,
                          RngStream& rng) {
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < ex.ids.size(); ++i)
    if (!WordPieceVocab::is_special(ex.ids[i]) || ex.ids[i] == WordPieceVocab::kUnk) candidates.push_back(i);
  rng.shuffle(candidates);
  candidates.resize(std::min(candidates.size(), mask_count(candidates.size(), cfg.mask_rate)));
  std::sort(candidates.begin(), candidates.end());
  const std::size_t regular = vocab.size() - WordPieceVocab::kSpecials;
  ex.masked_positions = candidates;
  ex.masked_labels.clear();
  for (std::size_t pos : candidates) {
    ex.masked_labels.push_back(ex.ids[pos]);
    const double u = rng.uniform();
    if (u < cfg.mask_token_prob) {
      ex.ids[pos] = WordPieceVocab::kMask;
    } else if (u < cfg.mask_token_prob + cfg.random_token_prob && regular > 0) {
      ex.ids[pos] = WordPieceVocab::kSpecials + static_cast<std::size_t>(rng.below(regular));
    }
  }
}

namespace detail {

/// Drops pieces from the end of the longer side until the framed pair fits.
inline void truncate_pair(std::vector<std::size_t>& a, std::vector<std::size_t>& b, std::size_t max_pieces) {
  while (a.size() + b.size() > max_pieces) {
    if (a.size() >= b.size())
      a.pop_back();
    else
      b.pop_back();
  }
}

}  // namespace detail

/// Builds sentence-pair examples. Every sentence that has a successor in its
/// document anchors one example per dupe round: with probability 1/2 the pair
/// is (sentence, successor), otherwise (sentence, random sentence of another
/// document). Single-sentence documents only supply such negatives.
inline std::vector<PretrainExample> create_pretraining_data(std::span<const std::string> documents,
                                                            const WordPieceVocab& vocab,
                                                            const PretrainDataConfig& cfg = {},
                                                            const StopwordSet& stopwords = default_stopwords()) {
  cfg.validate();
  std::vector<std::vector<std::vector<std::size_t>>> docs;
  for (const auto& d : documents) {
    std::vector<std::vector<std::size_t>> sentences;
    for (const auto& s : split_sentences(d, stopwords)) {
      auto ids = wordpiece_ids(vocab, s);
      if (!ids.empty()) sentences.push_back(std::move(ids));
    }
    if (!sentences.empty()) docs.push_back(std::move(sentences));
  }
  if (docs.size() < 2) throw DataError("pretraining data needs at least two non-empty documents");

  RngStream rng(cfg.seed);
  std::vector<PretrainExample> examples;
  const std::size_t max_pieces = cfg.max_seq_len - 3;
  for (std::size_t round = 0; round < cfg.dupe_factor; ++round) {
    for (std::size_t d = 0; d < docs.size(); ++d) {
      for (std::size_t s = 0; s + 1 < docs[d].size(); ++s) {
        std::vector<std::size_t> a = docs[d][s];
        std::vector<std::size_t> b;
        PretrainExample ex;
        ex.is_next = rng.bernoulli(0.5);
        if (ex.is_next) {
          b = docs[d][s + 1];
        } else {
          std::size_t other = static_cast<std::size_t>(rng.below(docs.size() - 1));
          if (other >= d) ++other;
          b = docs[other][static_cast<std::size_t>(rng.below(docs[other].size()))];
        }
        detail::truncate_pair(a, b, max_pieces);
        auto framed = frame_pieces(a, std::span<const std::size_t>(b));
        ex.ids = std::move(framed.ids);
        ex.segments = std::move(framed.segments);
        apply_masking(ex, vocab, cfg, rng);
        examples.push_back(std::move(ex));
      }
    }
  }
  if (examples.empty()) throw DataError("pretraining data: no document has two sentences");
  return examples;
}

inline std::vector<PretrainExample> create_pretraining_data(const UnlabeledCorpus& corpus, const WordPieceVocab& vocab,
                                                            const PretrainDataConfig& cfg = {},
                                                            const StopwordSet& stopwords = default_stopwords()) {
  return create_pretraining_data(std::span<const std::string>(corpus.documents), vocab, cfg, stopwords);
}

}  // namespace se3m
