#pragma once

#include <fstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "se3m/error.hpp"
#include "se3m/stopwords.hpp"

namespace se3m {

inline constexpr std::string_view kPadToken = "<pad>";
inline constexpr std::string_view kUnkToken = "<unk>";

struct StringHash {
  using is_transparent = void;
  std::size_t operator()(std::string_view s) const { return std::hash<std::string_view>{}(s); }
};

using StopwordSet = std::unordered_set<std::string, StringHash, std::equal_to<>>;

inline const StopwordSet& default_stopwords() {
  static const StopwordSet set = [] {
    StopwordSet s;
    for (auto w : kDefaultStopwords) s.emplace(w);
    return s;
  }();
  return set;
}

/// Reads one word per line; blank lines and '#' comments are skipped.
inline StopwordSet load_stopwords(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open stopword file " + path);
  StopwordSet set;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    set.insert(line);
  }
  return set;
}

namespace detail {
inline bool is_word_char(char c) { return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9'); }
inline char ascii_lower(char c) { return (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c; }
}  // namespace detail

/// Lowercases, keeps [a-z0-9] and hyphens between two such characters, turns
/// everything else into a separator, drops stopwords, and joins the remaining
/// tokens with single spaces.
inline std::string clean_text(std::string_view raw, const StopwordSet& stopwords = default_stopwords()) {
  std::string chars(raw.size(), ' ');
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const char c = detail::ascii_lower(raw[i]);
    if (detail::is_word_char(c)) {
      chars[i] = c;
    } else if (c == '-' && i > 0 && i + 1 < raw.size() && detail::is_word_char(detail::ascii_lower(raw[i - 1])) &&
               detail::is_word_char(detail::ascii_lower(raw[i + 1]))) {
      chars[i] = '-';
    }
  }
  std::string out;
  out.reserve(chars.size());
  std::size_t i = 0;
  while (i < chars.size()) {
    while (i < chars.size() && chars[i] == ' ') ++i;
    const std::size_t start = i;
    while (i < chars.size() && chars[i] != ' ') ++i;
    if (i == start) break;
    const std::string_view word(chars.data() + start, i - start);
    if (stopwords.contains(word)) continue;
    if (!out.empty()) out += ' ';
    out += word;
  }
  return out;
}

/// A token sequence, possibly cut or padded to a fixed length.
struct TokenSequence {
  std::vector<std::string> tokens;
  bool truncated = false;
  std::size_t pad_count = 0;

  std::size_t size() const { return tokens.size(); }
  std::size_t real_length() const { return tokens.size() - pad_count; }
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

/// Whitespace split of already-cleaned text.
inline TokenSequence tokenize_words(std::string_view text) {
  TokenSequence seq;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && (text[i] == ' ' || text[i] == '\t' || text[i] == '\n' || text[i] == '\r')) ++i;
    const std::size_t start = i;
    while (i < text.size() && !(text[i] == ' ' || text[i] == '\t' || text[i] == '\n' || text[i] == '\r')) ++i;
    if (i > start) seq.tokens.emplace_back(text.substr(start, i - start));
  }
  return seq;
}

/// Cuts to max_len or right-pads with the pad token to exactly max_len.
inline TokenSequence truncate_pad(TokenSequence seq, std::size_t max_len = 100) {
  require_config(max_len >= 1, "truncate_pad: max_len must be at least 1");
  seq = TokenSequence{std::vector<std::string>(seq.tokens.begin(), seq.tokens.end() - static_cast<std::ptrdiff_t>(seq.pad_count)),
                      seq.truncated, 0};
  if (seq.tokens.size() > max_len) {
    seq.tokens.resize(max_len);
    seq.truncated = true;
  } else {
    seq.pad_count = max_len - seq.tokens.size();
    seq.tokens.resize(max_len, std::string(kPadToken));
  }
  return seq;
}

/// Removes the pad suffix.
inline TokenSequence strip_padding(TokenSequence seq) {
  seq.tokens.resize(seq.real_length());
  seq.pad_count = 0;
  return seq;
}

}  // namespace se3m
