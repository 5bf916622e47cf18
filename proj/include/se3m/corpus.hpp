#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "json.hpp"

#include "se3m/checkpoint.hpp"
#include "se3m/csv.hpp"
#include "se3m/error.hpp"
#include "se3m/rng.hpp"
#include "se3m/text.hpp"

namespace se3m {

// ---------------------------------------------------------------------------
// Records and corpora

inline constexpr double kMaxEffort = 100.0;

struct RequirementRecord {
  std::string id;
  std::string project_id;
  std::string text;
  double effort = 0.0;
  bool degenerate = false;  // empty after cleaning

  friend bool operator==(const RequirementRecord&, const RequirementRecord&) = default;
};

class LabeledCorpus {
 public:
  void add(RequirementRecord record) {
    if (!ids_.insert(record.id).second) throw DataError("duplicate record id '" + record.id + "'");
    projects_.insert(record.project_id);
    records_.push_back(std::move(record));
  }

  bool contains_id(const std::string& id) const { return ids_.contains(id); }
  const std::vector<RequirementRecord>& records() const { return records_; }
  const RequirementRecord& operator[](std::size_t i) const { return records_[i]; }
  const std::set<std::string>& projects() const { return projects_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }

  std::size_t degenerate_count() const {
    return static_cast<std::size_t>(std::count_if(records_.begin(), records_.end(), [](const auto& r) { return r.degenerate; }));
  }

 private:
  std::vector<RequirementRecord> records_;
  std::set<std::string> projects_;
  std::unordered_set<std::string> ids_;
};

struct UnlabeledCorpus {
  std::vector<std::string> documents;
  std::size_t size() const { return documents.size(); }
  bool empty() const { return documents.empty(); }
};

struct Rejection {
  std::size_t line = 0;
  std::string id;
  std::string reason;
};

struct IngestResult {
  LabeledCorpus corpus;
  std::vector<Rejection> rejections;
};

enum class CorpusFormat { csv, jsonl };

inline CorpusFormat format_from_path(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".csv") return CorpusFormat::csv;
  if (ext == ".jsonl" || ext == ".json" || ext == ".ndjson") return CorpusFormat::jsonl;
  throw ConfigError("cannot infer corpus format from '" + path.string() + "' (expected .csv or .jsonl)");
}

namespace detail {

inline std::optional<double> parse_number(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (s.empty()) return std::nullopt;
  double v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

/// Returns an empty string when the effort is acceptable, else the reason.
inline std::string effort_problem(std::optional<double> effort) {
  if (!effort) return "non-numeric effort";
  if (*effort <= 0) return "non-positive effort";
  if (*effort > kMaxEffort) return "effort above 100";
  return {};
}

inline void admit(IngestResult& out, RequirementRecord rec, std::size_t line, const StopwordSet& stopwords) {
  if (rec.id.empty()) {
    out.rejections.push_back({line, rec.id, "missing id"});
    return;
  }
  if (out.corpus.contains_id(rec.id)) {
    out.rejections.push_back({line, rec.id, "duplicate id"});
    return;
  }
  rec.degenerate = clean_text(rec.text, stopwords).empty();
  out.corpus.add(std::move(rec));
}

}  // namespace detail

/// Reads a labeled corpus. CSV needs the header
/// issuekey,project,title,description,storypoint (title and description are
/// joined with one space); JSONL needs id, project, text, effort per line.
/// Bad records are collected as rejections; missing files and missing
/// columns throw.
inline IngestResult load_labeled(const std::filesystem::path& path, CorpusFormat format,
                                 const StopwordSet& stopwords = default_stopwords()) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open labeled corpus " + path.string());
  IngestResult out;

  if (format == CorpusFormat::csv) {
    CsvReader reader(in);
    auto header = reader.next();
    if (!header) throw DataError("empty CSV file " + path.string());
    std::map<std::string, std::size_t> col;
    for (std::size_t i = 0; i < header->size(); ++i) {
      std::string name = (*header)[i];
      while (!name.empty() && (name.back() == '\r' || name.back() == ' ')) name.pop_back();
      col[name] = i;
    }
    for (const char* required : {"issuekey", "project", "title", "description", "storypoint"})
      if (!col.contains(required)) throw DataError(std::string("CSV is missing required column '") + required + "'");
    while (auto row = reader.next()) {
      if (row->size() == 1 && (*row)[0].empty()) continue;  // blank line
      const std::size_t line = reader.line();
      auto field = [&](const char* name) -> std::string {
        const std::size_t i = col.at(name);
        return i < row->size() ? (*row)[i] : std::string();
      };
      RequirementRecord rec{field("issuekey"), field("project"), field("title") + " " + field("description"), 0.0};
      const auto effort = detail::parse_number(field("storypoint"));
      if (auto why = detail::effort_problem(effort); !why.empty()) {
        out.rejections.push_back({line, rec.id, why});
        continue;
      }
      rec.effort = *effort;
      detail::admit(out, std::move(rec), line, stopwords);
    }
    return out;
  }

  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception&) {
      out.rejections.push_back({line, "", "malformed JSON"});
      continue;
    }
    if (!obj.is_object()) {
      out.rejections.push_back({line, "", "line is not a JSON object"});
      continue;
    }
    auto str_field = [&](const char* key) -> std::optional<std::string> {
      auto it = obj.find(key);
      if (it == obj.end()) return std::nullopt;
      if (it->is_string()) return it->get<std::string>();
      if (it->is_number()) return it->dump();
      return std::nullopt;
    };
    const auto id = str_field("id");
    const auto project = str_field("project");
    const auto body = str_field("text");
    if (!id || !project || !body) {
      out.rejections.push_back({line, id.value_or(""), "missing id, project or text"});
      continue;
    }
    std::optional<double> effort;
    if (auto it = obj.find("effort"); it != obj.end() && it->is_number()) effort = it->get<double>();
    if (auto why = detail::effort_problem(effort); !why.empty()) {
      out.rejections.push_back({line, *id, why});
      continue;
    }
    detail::admit(out, RequirementRecord{*id, *project, *body, *effort}, line, stopwords);
  }
  return out;
}

inline IngestResult load_labeled(const std::filesystem::path& path) { return load_labeled(path, format_from_path(path)); }

/// Writes the canonical JSONL form (id, project, text, effort).
inline void save_labeled_jsonl(const std::filesystem::path& path, const LabeledCorpus& corpus) {
  std::string out;
  for (const auto& r : corpus.records()) {
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["project"] = r.project_id;
    j["text"] = r.text;
    j["effort"] = r.effort;
    out += j.dump() + "\n";
  }
  write_file(path, out);
}

/// One document per line, either plain text or a JSON object with a "text"
/// field. Blank lines and lines that clean to nothing are dropped.
inline UnlabeledCorpus load_unlabeled(const std::filesystem::path& path,
                                      const StopwordSet& stopwords = default_stopwords()) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open unlabeled corpus " + path.string());
  UnlabeledCorpus corpus;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::string doc = line;
    if (line.front() == '{') {
      try {
        const auto obj = nlohmann::json::parse(line);
        if (obj.is_object() && obj.contains("text") && obj["text"].is_string()) doc = obj["text"].get<std::string>();
      } catch (const nlohmann::json::exception&) {
        // not JSON after all; keep the raw line
      }
    }
    if (clean_text(doc, stopwords).empty()) continue;
    corpus.documents.push_back(std::move(doc));
  }
  if (corpus.empty()) throw DataError("no usable documents in " + path.string());
  return corpus;
}

// ---------------------------------------------------------------------------
// Vocabulary

/// Dense token index with <pad> = 0 and <unk> = 1.
class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;
  static constexpr std::size_t kSpecials = 2;

  Vocabulary() {
    push(std::string(kPadToken), 0);
    push(std::string(kUnkToken), 0);
  }

  std::size_t size() const { return tokens_.size(); }
  std::size_t word_count() const { return size() - kSpecials; }
  const std::string& token(std::size_t i) const { return tokens_.at(i); }
  std::uint64_t count(std::size_t i) const { return counts_.at(i); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::optional<std::size_t> find(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  bool contains(std::string_view token) const { return find(token).has_value(); }
  std::size_t index_of(std::string_view token) const { return find(token).value_or(kUnk); }

  /// Appends a new token; returns its index. Existing tokens only gain count.
  std::size_t add(const std::string& token, std::uint64_t count) {
    if (auto i = find(token)) {
      counts_[*i] += count;
      return *i;
    }
    return push(token, count);
  }

  /// Text form: "token<TAB>count<TAB>index" per line.
  std::string serialize() const {
    std::string out;
    for (std::size_t i = 0; i < size(); ++i) out += tokens_[i] + "\t" + std::to_string(counts_[i]) + "\t" + std::to_string(i) + "\n";
    return out;
  }

  static Vocabulary deserialize(const std::string& text) {
    Vocabulary v;
    std::size_t pos = 0, line_no = 0;
    while (pos < text.size()) {
      const std::size_t end = text.find('\n', pos);
      const std::string line = text.substr(pos, end - pos);
      pos = end == std::string::npos ? text.size() : end + 1;
      const auto t1 = line.find('\t');
      const auto t2 = line.find('\t', t1 + 1);
      if (t1 == std::string::npos || t2 == std::string::npos) throw DataError("malformed vocabulary line");
      const std::string token = line.substr(0, t1);
      const auto count = std::stoull(line.substr(t1 + 1, t2 - t1 - 1));
      const auto index = std::stoull(line.substr(t2 + 1));
      if (index != line_no) throw DataError("vocabulary indices are not dense");
      if (line_no < kSpecials) {
        if (token != v.tokens_[line_no]) throw DataError("vocabulary specials out of place");
        v.counts_[line_no] = count;
      } else {
        if (v.contains(token)) throw DataError("duplicate vocabulary token '" + token + "'");
        v.push(token, count);
      }
      ++line_no;
    }
    return v;
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_ && a.counts_ == b.counts_; }

 private:
  std::size_t push(const std::string& token, std::uint64_t count) {
    index_.emplace(token, tokens_.size());
    tokens_.push_back(token);
    counts_.push_back(count);
    return tokens_.size() - 1;
  }

  std::vector<std::string> tokens_;
  std::vector<std::uint64_t> counts_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Counts whitespace tokens across texts.
inline std::map<std::string, std::uint64_t> count_tokens(std::span<const std::string> texts) {
  std::map<std::string, std::uint64_t> counts;
  for (const auto& t : texts)
    for (auto& tok : tokenize_words(t).tokens) ++counts[tok];
  return counts;
}

/// Tokens with count >= min_count, by descending count then lexicographic.
inline std::vector<std::pair<std::string, std::uint64_t>> rank_tokens(const std::map<std::string, std::uint64_t>& counts,
                                                                      std::uint64_t min_count) {
  std::vector<std::pair<std::string, std::uint64_t>> kept;
  for (const auto& [tok, n] : counts)
    if (n >= min_count && tok != kPadToken && tok != kUnkToken) kept.emplace_back(tok, n);
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  return kept;
}

/// Builds a vocabulary from already-cleaned texts.
inline Vocabulary build_word_vocab(std::span<const std::string> cleaned_texts, std::uint64_t min_count) {
  require_config(min_count >= 1, "min_count must be at least 1");
  const auto kept = rank_tokens(count_tokens(cleaned_texts), min_count);
  if (kept.empty()) throw DataError("vocabulary is empty after applying min_count " + std::to_string(min_count));
  Vocabulary v;
  for (const auto& [tok, n] : kept) v.add(tok, n);
  return v;
}

inline std::vector<std::string> cleaned_texts(const LabeledCorpus& corpus, const StopwordSet& stopwords = default_stopwords()) {
  std::vector<std::string> out;
  out.reserve(corpus.size());
  for (const auto& r : corpus.records()) out.push_back(clean_text(r.text, stopwords));
  return out;
}

inline std::vector<std::string> cleaned_texts(const UnlabeledCorpus& corpus, const StopwordSet& stopwords = default_stopwords()) {
  std::vector<std::string> out;
  out.reserve(corpus.size());
  for (const auto& d : corpus.documents) out.push_back(clean_text(d, stopwords));
  return out;
}

inline Vocabulary build_word_vocab(const LabeledCorpus& corpus, std::uint64_t min_count) {
  return build_word_vocab(cleaned_texts(corpus), min_count);
}

inline Vocabulary build_word_vocab(const UnlabeledCorpus& corpus, std::uint64_t min_count) {
  return build_word_vocab(cleaned_texts(corpus), min_count);
}

// ---------------------------------------------------------------------------
// Split plans

enum class SplitKind { kfold, leave_one_project_out };

/// Assigns every record (by corpus position) to exactly one round's test set.
struct SplitPlan {
  SplitKind kind = SplitKind::kfold;
  std::uint64_t seed = 0;
  std::vector<std::string> record_ids;  // corpus order
  std::vector<std::size_t> assignment;  // round whose test set holds the record
  std::vector<std::string> labels;      // "fold-3" or the held-out project id

  std::size_t rounds() const { return labels.size(); }

  std::vector<std::size_t> test_indices(std::size_t round) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < assignment.size(); ++i)
      if (assignment[i] == round) out.push_back(i);
    return out;
  }

  std::vector<std::size_t> train_indices(std::size_t round) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < assignment.size(); ++i)
      if (assignment[i] != round) out.push_back(i);
    return out;
  }

  std::vector<std::size_t> round_sizes() const {
    std::vector<std::size_t> sizes(rounds(), 0);
    for (auto a : assignment) ++sizes[a];
    return sizes;
  }

  /// True when the plan was made for exactly this corpus.
  bool matches(const LabeledCorpus& corpus) const {
    if (record_ids.size() != corpus.size()) return false;
    for (std::size_t i = 0; i < corpus.size(); ++i)
      if (record_ids[i] != corpus[i].id) return false;
    return true;
  }
};

/// Seeded shuffled partition into k folds; the first n % k folds get one
/// extra record.
inline SplitPlan kfold_split(std::vector<std::string> record_ids, std::size_t k, std::uint64_t seed) {
  require_config(k >= 2, "kfold: k must be at least 2");
  if (k > record_ids.size())
    throw ConfigError("kfold: k = " + std::to_string(k) + " exceeds corpus size " + std::to_string(record_ids.size()));
  SplitPlan plan;
  plan.kind = SplitKind::kfold;
  plan.seed = seed;
  const std::size_t n = record_ids.size();
  plan.record_ids = std::move(record_ids);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  RngStream rng(seed);
  rng.shuffle(order);
  plan.assignment.assign(n, 0);
  const std::size_t base = n / k, extra = n % k;
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t size = base + (f < extra ? 1 : 0);
    for (std::size_t j = 0; j < size; ++j) plan.assignment[order[pos++]] = f;
    plan.labels.push_back("fold-" + std::to_string(f));
  }
  return plan;
}

inline SplitPlan kfold_split(const LabeledCorpus& corpus, std::size_t k, std::uint64_t seed) {
  std::vector<std::string> ids;
  ids.reserve(corpus.size());
  for (const auto& r : corpus.records()) ids.push_back(r.id);
  return kfold_split(std::move(ids), k, seed);
}

/// One round per project (sorted by project id); the round's test set is
/// that project's records.
inline SplitPlan leave_one_project_out(const LabeledCorpus& corpus) {
  if (corpus.projects().size() < 2) throw ConfigError("leave-one-project-out needs at least 2 projects");
  SplitPlan plan;
  plan.kind = SplitKind::leave_one_project_out;
  plan.labels.assign(corpus.projects().begin(), corpus.projects().end());
  std::map<std::string, std::size_t> round_of;
  for (std::size_t r = 0; r < plan.labels.size(); ++r) round_of[plan.labels[r]] = r;
  for (const auto& rec : corpus.records()) {
    plan.record_ids.push_back(rec.id);
    plan.assignment.push_back(round_of.at(rec.project_id));
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Planning-Poker buckets

struct BucketScheme {
  std::array<double, 9> buckets = {1, 2, 3, 5, 8, 13, 20, 40, 100};

  static constexpr std::size_t size() { return 9; }

  std::optional<std::size_t> index_of(double value) const {
    for (std::size_t i = 0; i < buckets.size(); ++i)
      if (buckets[i] == value) return i;
    return std::nullopt;
  }
};

/// Index of the nearest bucket; ties go to the lower bucket and anything
/// above the top bucket clamps to it.
inline std::size_t bucket_index(double effort, const BucketScheme& scheme = {}) {
  if (!(effort > 0)) throw DataError("bucketize: effort must be positive");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scheme.buckets.size(); ++i)
    if (std::abs(effort - scheme.buckets[i]) < std::abs(effort - scheme.buckets[best])) best = i;
  return best;
}

inline double bucketize(double effort, const BucketScheme& scheme = {}) { return scheme.buckets[bucket_index(effort, scheme)]; }

// ---------------------------------------------------------------------------
// Statistics

struct HistogramBin {
  double lo = 0;
  double hi = 0;
  std::size_t count = 0;
};

struct CorpusStats {
  std::size_t records = 0;
  std::size_t degenerate = 0;
  std::vector<std::size_t> words_per_text;
  double words_mean = 0, words_std = 0;
  std::size_t words_min = 0, words_max = 0;
  double effort_mean = 0, effort_std = 0;
  std::vector<HistogramBin> words_histogram;   // [lo, hi) bins of fixed width
  std::vector<HistogramBin> effort_histogram;  // one bin per distinct effort value
  std::array<std::size_t, 9> bucket_counts{};
};

/// Mean and population standard deviation.
inline std::pair<double, double> mean_std(std::span<const double> xs) {
  if (xs.empty()) return {0.0, 0.0};
  double sum = 0;
  for (double x : xs) sum += x;
  const double mean = sum / static_cast<double>(xs.size());
  double ss = 0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(xs.size()))};
}

inline CorpusStats corpus_stats(const LabeledCorpus& corpus, std::size_t word_bin_width = 10,
                                const StopwordSet& stopwords = default_stopwords()) {
  if (corpus.empty()) throw DataError("corpus_stats: empty corpus");
  require_config(word_bin_width >= 1, "histogram bin width must be positive");
  CorpusStats s;
  s.records = corpus.size();
  s.degenerate = corpus.degenerate_count();
  std::vector<double> words, efforts;
  std::map<double, std::size_t> effort_counts;
  for (const auto& r : corpus.records()) {
    const std::size_t n = tokenize_words(clean_text(r.text, stopwords)).size();
    s.words_per_text.push_back(n);
    words.push_back(static_cast<double>(n));
    efforts.push_back(r.effort);
    ++effort_counts[r.effort];
    ++s.bucket_counts[bucket_index(r.effort)];
  }
  std::tie(s.words_mean, s.words_std) = mean_std(words);
  std::tie(s.effort_mean, s.effort_std) = mean_std(efforts);
  s.words_min = *std::min_element(s.words_per_text.begin(), s.words_per_text.end());
  s.words_max = *std::max_element(s.words_per_text.begin(), s.words_per_text.end());
  const std::size_t bins = s.words_max / word_bin_width + 1;
  for (std::size_t b = 0; b < bins; ++b)
    s.words_histogram.push_back({static_cast<double>(b * word_bin_width), static_cast<double>((b + 1) * word_bin_width), 0});
  for (auto n : s.words_per_text) ++s.words_histogram[n / word_bin_width].count;
  for (const auto& [value, count] : effort_counts) s.effort_histogram.push_back({value, value, count});
  return s;
}

/// Shortest round-trip decimal form.
inline std::string format_number(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline std::string histogram_csv(const std::vector<HistogramBin>& bins) {
  std::string out = "bin_lo,bin_hi,count\n";
  for (const auto& b : bins) out += format_number(b.lo) + "," + format_number(b.hi) + "," + std::to_string(b.count) + "\n";
  return out;
}

/// Writes words_per_text.csv, effort_histogram.csv, bucket_counts.csv and
/// summary.json into `dir`.
inline void write_stats(const std::filesystem::path& dir, const CorpusStats& s) {
  write_file(dir / "words_per_text.csv", histogram_csv(s.words_histogram));
  write_file(dir / "effort_histogram.csv", histogram_csv(s.effort_histogram));
  std::string buckets = "bucket,count\n";
  const BucketScheme scheme;
  for (std::size_t i = 0; i < 9; ++i) buckets += format_number(scheme.buckets[i]) + "," + std::to_string(s.bucket_counts[i]) + "\n";
  write_file(dir / "bucket_counts.csv", buckets);
  nlohmann::ordered_json j;
  j["records"] = s.records;
  j["degenerate"] = s.degenerate;
  j["words_per_text"] = {{"mean", s.words_mean}, {"std_population", s.words_std}, {"min", s.words_min}, {"max", s.words_max}};
  j["effort"] = {{"mean", s.effort_mean}, {"std_population", s.effort_std}};
  write_file(dir / "summary.json", j.dump(2) + "\n");
}

}  // namespace se3m
