#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "se3m/checkpoint.hpp"
#include "se3m/corpus.hpp"
#include "se3m/error.hpp"
#include "se3m/text.hpp"

namespace se3m {

inline constexpr std::string_view kContinuationPrefix = "##";

/// Subword vocabulary. The five specials occupy ids 0-4 in a fixed order.
class WordPieceVocab {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;
  static constexpr std::size_t kCls = 2;
  static constexpr std::size_t kSep = 3;
  static constexpr std::size_t kMask = 4;
  static constexpr std::size_t kSpecials = 5;
  static constexpr std::array<std::string_view, kSpecials> kSpecialPieces = {"[PAD]", "[UNK]", "[CLS]", "[SEP]",
                                                                             "[MASK]"};

  WordPieceVocab() {
    for (auto s : kSpecialPieces) add(std::string(s));
  }

  std::size_t size() const { return pieces_.size(); }
  const std::string& piece(std::size_t id) const { return pieces_.at(id); }
  const std::vector<std::string>& pieces() const { return pieces_; }

  std::optional<std::size_t> find(std::string_view piece) const {
    auto it = index_.find(piece);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  bool contains(std::string_view piece) const { return index_.contains(piece); }

  /// Returns the id of the piece, adding it if new.
  std::size_t add(const std::string& piece) {
    require_config(!piece.empty(), "wordpiece: empty piece");
    if (auto id = find(piece)) return *id;
    index_.emplace(piece, pieces_.size());
    pieces_.push_back(piece);
    return pieces_.size() - 1;
  }

  static bool is_special(std::size_t id) { return id < kSpecials; }

  /// vocab.txt layout: one piece per line, line number = id.
  std::string to_text() const {
    std::string out;
    for (const auto& p : pieces_) {
      out += p;
      out += '\n';
    }
    return out;
  }

  static WordPieceVocab from_text(std::string_view text) {
    WordPieceVocab v;
    v.pieces_.clear();
    v.index_.clear();
    std::size_t start = 0;
    while (start < text.size()) {
      std::size_t end = text.find('\n', start);
      if (end == std::string_view::npos) end = text.size();
      std::string line(text.substr(start, end - start));
      if (!line.empty() && line.back() == '\r') line.pop_back();
      start = end + 1;
      if (line.empty()) throw DataError("vocab.txt: empty line at id " + std::to_string(v.pieces_.size()));
      if (v.index_.contains(line)) throw DataError("vocab.txt: duplicate piece '" + line + "'");
      v.index_.emplace(line, v.pieces_.size());
      v.pieces_.push_back(std::move(line));
    }
    for (std::size_t i = 0; i < kSpecials; ++i)
      if (v.pieces_.size() <= i || v.pieces_[i] != kSpecialPieces[i])
        throw DataError("vocab.txt: expected " + std::string(kSpecialPieces[i]) + " at id " + std::to_string(i));
    return v;
  }

  void save(const std::filesystem::path& path) const { write_file(path, to_text()); }
  static WordPieceVocab load(const std::filesystem::path& path) { return from_text(read_file(path)); }

  friend bool operator==(const WordPieceVocab& a, const WordPieceVocab& b) { return a.pieces_ == b.pieces_; }

 private:
  std::vector<std::string> pieces_;
  std::unordered_map<std::string, std::size_t, StringHash, std::equal_to<>> index_;
};

namespace detail {

inline bool is_ascii_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

inline bool is_ascii_punct(char c) {
  const auto u = static_cast<unsigned char>(c);
  return (u >= 33 && u <= 47) || (u >= 58 && u <= 64) || (u >= 91 && u <= 96) || (u >= 123 && u <= 126);
}

/// Lowercases ASCII, splits on whitespace, and makes each ASCII punctuation
/// mark its own word. Bytes >= 0x80 stay inside their word.
inline std::vector<std::string> basic_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) words.push_back(std::move(cur));
    cur.clear();
  };
  for (char c : text) {
    if (is_ascii_space(c)) {
      flush();
    } else if (is_ascii_punct(c)) {
      flush();
      words.emplace_back(1, c);
    } else {
      cur += ascii_lower(c);
    }
  }
  flush();
  return words;
}

inline std::string strip_prefix(const std::string& piece) {
  return piece.starts_with(kContinuationPrefix) ? piece.substr(kContinuationPrefix.size()) : piece;
}

/// Incremental pair statistics for subword induction.
class MergeTable {
 public:
  MergeTable(std::vector<std::vector<std::string>> words, std::vector<std::uint64_t> counts)
      : words_(std::move(words)), counts_(std::move(counts)) {
    for (std::size_t w = 0; w < words_.size(); ++w) add_word(w);
  }

  /// Highest-count pair; ties go to the pair that occurs first when the
  /// words are scanned in corpus order, left to right.
  std::optional<std::pair<std::string, std::string>> best() const {
    if (by_count_.empty()) return std::nullopt;
    const auto& tied = by_count_.begin()->second;
    std::optional<std::pair<std::string, std::string>> pick;
    std::pair<std::size_t, std::size_t> pick_at{SIZE_MAX, SIZE_MAX};
    for (const auto& key : tied) {
      const std::size_t w = *pair_words_.at(key).begin();
      const auto [left, right] = split_key(key);
      const auto& syms = words_[w];
      std::size_t offset = 0;
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
        if (syms[i] == left && syms[i + 1] == right) break;
        offset += strip_prefix(syms[i]).size();
      }
      const std::pair<std::size_t, std::size_t> at{w, offset};
      if (at < pick_at) {
        pick_at = at;
        pick = std::make_pair(left, right);
      }
    }
    return pick;
  }

  /// Merges every occurrence of (left, right); returns the new piece.
  std::string merge(const std::string& left, const std::string& right) {
    const std::string key = make_key(left, right);
    const std::string merged = left + strip_prefix(right);
    const std::set<std::size_t> affected = pair_words_.at(key);
    for (std::size_t w : affected) {
      remove_word(w);
      auto& syms = words_[w];
      std::vector<std::string> next;
      next.reserve(syms.size());
      for (std::size_t i = 0; i < syms.size(); ++i) {
        if (i + 1 < syms.size() && syms[i] == left && syms[i + 1] == right) {
          next.push_back(merged);
          ++i;
        } else {
          next.push_back(syms[i]);
        }
      }
      syms = std::move(next);
      add_word(w);
    }
    return merged;
  }

 private:
  static std::string make_key(const std::string& l, const std::string& r) { return l + '\x1f' + r; }
  static std::pair<std::string, std::string> split_key(const std::string& key) {
    const auto cut = key.find('\x1f');
    return {key.substr(0, cut), key.substr(cut + 1)};
  }

  void change(const std::string& key, std::int64_t delta) {
    auto& c = pair_count_[key];
    if (c > 0) {
      auto it = by_count_.find(c);
      it->second.erase(key);
      if (it->second.empty()) by_count_.erase(it);
    }
    c += delta;
    if (c > 0)
      by_count_[c].insert(key);
    else
      pair_count_.erase(key);
  }

  void add_word(std::size_t w) {
    const auto& syms = words_[w];
    for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
      const std::string key = make_key(syms[i], syms[i + 1]);
      change(key, static_cast<std::int64_t>(counts_[w]));
      pair_words_[key].insert(w);
    }
  }

  void remove_word(std::size_t w) {
    const auto& syms = words_[w];
    for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
      const std::string key = make_key(syms[i], syms[i + 1]);
      change(key, -static_cast<std::int64_t>(counts_[w]));
      auto it = pair_words_.find(key);
      if (it != pair_words_.end()) {
        it->second.erase(w);
        if (it->second.empty()) pair_words_.erase(it);
      }
    }
  }

  std::vector<std::vector<std::string>> words_;
  std::vector<std::uint64_t> counts_;
  std::unordered_map<std::string, std::int64_t> pair_count_;
  std::map<std::int64_t, std::set<std::string>, std::greater<>> by_count_;
  std::unordered_map<std::string, std::set<std::size_t>> pair_words_;
};

}  // namespace detail

/// Induces a subword vocabulary of exactly `size` pieces (or fewer, if the
/// corpus runs out of pairs to merge). The base holds the specials plus, for
/// every character seen, both the word-initial form "c" and the continuation
/// form "##c". Then the most frequent adjacent pair is merged repeatedly.
inline WordPieceVocab build_wordpiece_vocab(std::span<const std::string> texts, std::size_t size) {
  std::vector<std::string> order;
  std::unordered_map<std::string, std::uint64_t> freq;
  for (const auto& text : texts)
    for (auto& w : detail::basic_words(text))
      if (freq[w]++ == 0) order.push_back(w);

  std::set<char> chars;
  for (const auto& w : order) chars.insert(w.begin(), w.end());
  if (chars.empty()) throw DataError("wordpiece: corpus has no characters");
  const std::size_t base = WordPieceVocab::kSpecials + 2 * chars.size();
  if (size < base)
    throw ConfigError("wordpiece: size " + std::to_string(size) + " is below the character base of " +
                      std::to_string(base));

  WordPieceVocab vocab;
  for (char c : chars) vocab.add(std::string(1, c));
  for (char c : chars) vocab.add(std::string(kContinuationPrefix) + c);

  std::vector<std::vector<std::string>> words;
  std::vector<std::uint64_t> counts;
  for (const auto& w : order) {
    std::vector<std::string> syms;
    for (std::size_t i = 0; i < w.size(); ++i) syms.push_back(i == 0 ? std::string(1, w[i]) : std::string(kContinuationPrefix) + w[i]);
    words.push_back(std::move(syms));
    counts.push_back(freq[w]);
  }
  detail::MergeTable table(std::move(words), std::move(counts));
  while (vocab.size() < size) {
    auto pair = table.best();
    if (!pair) break;
    vocab.add(table.merge(pair->first, pair->second));
  }
  return vocab;
}

/// Cleans each document first, matching how requirement text reaches the
/// tokenizer.
inline WordPieceVocab build_wordpiece_vocab(const UnlabeledCorpus& corpus, std::size_t size,
                                            const StopwordSet& stopwords = default_stopwords()) {
  std::vector<std::string> cleaned;
  cleaned.reserve(corpus.size());
  for (const auto& d : corpus.documents) cleaned.push_back(clean_text(d, stopwords));
  return build_wordpiece_vocab(std::span<const std::string>(cleaned), size);
}

/// Greedy longest-match-first split of one word; [UNK] when some suffix
/// cannot be covered.
inline std::vector<std::size_t> wordpiece_word(const WordPieceVocab& vocab, std::string_view word,
                                               std::size_t max_chars = 100) {
  if (word.size() > max_chars) return {WordPieceVocab::kUnk};
  std::vector<std::size_t> out;
  std::size_t start = 0;
  std::string candidate;
  while (start < word.size()) {
    std::optional<std::size_t> hit;
    std::size_t end = word.size();
    for (; end > start; --end) {
      candidate.assign(start > 0 ? kContinuationPrefix : std::string_view{});
      candidate.append(word.substr(start, end - start));
      if ((hit = vocab.find(candidate))) break;
    }
    if (!hit) return {WordPieceVocab::kUnk};
    out.push_back(*hit);
    start = end;
  }
  return out;
}

/// Subword ids of a text, without framing.
inline std::vector<std::size_t> wordpiece_ids(const WordPieceVocab& vocab, std::string_view text) {
  std::vector<std::size_t> ids;
  for (const auto& w : detail::basic_words(text)) {
    auto pieces = wordpiece_word(vocab, w);
    ids.insert(ids.end(), pieces.begin(), pieces.end());
  }
  return ids;
}

struct WordPieceEncoding {
  std::vector<std::size_t> ids;
  std::vector<std::uint8_t> segments;

  std::size_t size() const { return ids.size(); }
};

/// [CLS] a [SEP], or [CLS] a [SEP] b [SEP] with segment 1 on the b part.
inline WordPieceEncoding frame_pieces(std::span<const std::size_t> a, std::optional<std::span<const std::size_t>> b = {}) {
  WordPieceEncoding enc;
  enc.ids.push_back(WordPieceVocab::kCls);
  enc.ids.insert(enc.ids.end(), a.begin(), a.end());
  enc.ids.push_back(WordPieceVocab::kSep);
  enc.segments.assign(enc.ids.size(), 0);
  if (b) {
    enc.ids.insert(enc.ids.end(), b->begin(), b->end());
    enc.ids.push_back(WordPieceVocab::kSep);
    enc.segments.resize(enc.ids.size(), 1);
  }
  return enc;
}

inline WordPieceEncoding tokenize_wordpiece(const WordPieceVocab& vocab, std::string_view text,
                                            std::optional<std::string_view> pair = {}) {
  const auto a = wordpiece_ids(vocab, text);
  if (!pair) return frame_pieces(a);
  const auto b = wordpiece_ids(vocab, *pair);
  return frame_pieces(a, std::span<const std::size_t>(b));
}

/// Single-text framing cut so that the framed length is at most max_len.
inline WordPieceEncoding encode_for_model(const WordPieceVocab& vocab, std::string_view text, std::size_t max_len) {
  require_config(max_len >= 2, "encode_for_model: max_len must leave room for [CLS] and [SEP]");
  auto ids = wordpiece_ids(vocab, text);
  if (ids.size() > max_len - 2) ids.resize(max_len - 2);
  return frame_pieces(ids);
}

/// Pieces of a text, for display.
inline std::vector<std::string> wordpiece_pieces(const WordPieceVocab& vocab, std::string_view text) {
  std::vector<std::string> out;
  for (auto id : wordpiece_ids(vocab, text)) out.push_back(vocab.piece(id));
  return out;
}

}  // namespace se3m
