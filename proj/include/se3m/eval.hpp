#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "se3m/checkpoint.hpp"
#include "se3m/corpus.hpp"
#include "se3m/csv.hpp"
#include "se3m/error.hpp"

namespace se3m {

namespace detail {
inline void require_pairs(std::span<const double> actual, std::span<const double> predicted, const char* what) {
  if (actual.size() != predicted.size())
    throw ShapeError(std::string(what) + ": " + std::to_string(actual.size()) + " actual vs " +
                     std::to_string(predicted.size()) + " predicted values");
  if (actual.empty()) throw DataError(std::string(what) + ": no samples");
}
}  // namespace detail

inline double mae(std::span<const double> actual, std::span<const double> predicted) {
  detail::require_pairs(actual, predicted, "mae");
  double sum = 0.0;
  for (std::size_t i = 0; i < actual.size(); ++i) sum += std::abs(actual[i] - predicted[i]);
  return sum / static_cast<double>(actual.size());
}

/// Median absolute error; an even count averages the two central errors.
inline double mdae(std::span<const double> actual, std::span<const double> predicted) {
  detail::require_pairs(actual, predicted, "mdae");
  std::vector<double> err(actual.size());
  for (std::size_t i = 0; i < actual.size(); ++i) err[i] = std::abs(actual[i] - predicted[i]);
  std::sort(err.begin(), err.end());
  const std::size_t n = err.size();
  return n % 2 ? err[n / 2] : 0.5 * (err[n / 2 - 1] + err[n / 2]);
}

struct SquaredError {
  double mse = 0.0;
  double rmse = 0.0;
};

/// Mean of squared errors and its square root.
inline SquaredError mse(std::span<const double> actual, std::span<const double> predicted) {
  detail::require_pairs(actual, predicted, "mse");
  double sum = 0.0;
  for (std::size_t i = 0; i < actual.size(); ++i) sum += (actual[i] - predicted[i]) * (actual[i] - predicted[i]);
  const double m = sum / static_cast<double>(actual.size());
  return {m, std::sqrt(m)};
}

struct MetricSet {
  double mae = 0.0;
  double mdae = 0.0;
  double mse = 0.0;
  double rmse = 0.0;
  std::size_t n = 0;

  friend bool operator==(const MetricSet&, const MetricSet&) = default;
};

inline MetricSet compute_metrics(std::span<const double> actual, std::span<const double> predicted) {
  const auto sq = mse(actual, predicted);
  return {mae(actual, predicted), mdae(actual, predicted), sq.mse, sq.rmse, actual.size()};
}

/// Mean and population standard deviation of each metric across folds.
struct MetricAggregate {
  MetricSet mean;
  MetricSet std;
  std::size_t folds = 0;
};

inline MetricAggregate aggregate_folds(std::span<const MetricSet> folds) {
  if (folds.empty()) throw DataError("aggregate_folds: no folds");
  MetricAggregate agg;
  agg.folds = folds.size();
  auto field = [&](double MetricSet::*f, double& mean_out, double& std_out) {
    std::vector<double> xs;
    for (const auto& m : folds) xs.push_back(m.*f);
    std::tie(mean_out, std_out) = mean_std(xs);
  };
  field(&MetricSet::mae, agg.mean.mae, agg.std.mae);
  field(&MetricSet::mdae, agg.mean.mdae, agg.std.mdae);
  field(&MetricSet::mse, agg.mean.mse, agg.std.mse);
  field(&MetricSet::rmse, agg.mean.rmse, agg.std.rmse);
  for (const auto& m : folds) agg.mean.n += m.n;
  return agg;
}

/// Counts of actual bucket (rows) against predicted bucket (columns).
struct ConfusionMatrix {
  BucketScheme scheme;
  std::vector<std::vector<std::size_t>> counts = std::vector<std::vector<std::size_t>>(9, std::vector<std::size_t>(9, 0));

  std::size_t index(double bucket) const {
    auto i = scheme.index_of(bucket);
    if (!i) throw DataError("confusion matrix: " + format_number(bucket) + " is not a bucket value");
    return *i;
  }

  void add(double actual_bucket, double predicted_bucket) { ++counts[index(actual_bucket)][index(predicted_bucket)]; }

  std::size_t at(double actual_bucket, double predicted_bucket) const {
    return counts[index(actual_bucket)][index(predicted_bucket)];
  }

  std::size_t total() const {
    std::size_t t = 0;
    for (const auto& r : counts)
      for (auto c : r) t += c;
    return t;
  }

  std::vector<std::size_t> row_sums() const {
    std::vector<std::size_t> s;
    for (const auto& r : counts) s.push_back(std::accumulate(r.begin(), r.end(), std::size_t{0}));
    return s;
  }

  /// Each row divided by its sum; empty rows stay zero.
  std::vector<std::vector<double>> normalized() const {
    std::vector<std::vector<double>> out(9, std::vector<double>(9, 0.0));
    const auto sums = row_sums();
    for (std::size_t i = 0; i < 9; ++i)
      if (sums[i])
        for (std::size_t j = 0; j < 9; ++j) out[i][j] = static_cast<double>(counts[i][j]) / static_cast<double>(sums[i]);
    return out;
  }

  void merge(const ConfusionMatrix& other) {
    for (std::size_t i = 0; i < 9; ++i)
      for (std::size_t j = 0; j < 9; ++j) counts[i][j] += other.counts[i][j];
  }
};

inline ConfusionMatrix confusion_matrix(std::span<const double> actual, std::span<const double> predicted,
                                        const BucketScheme& scheme = {}) {
  if (actual.size() != predicted.size()) throw ShapeError("confusion matrix: length mismatch");
  ConfusionMatrix cm;
  cm.scheme = scheme;
  for (std::size_t i = 0; i < actual.size(); ++i) cm.add(actual[i], predicted[i]);
  return cm;
}

// ---------------------------------------------------------------------------
// Reports

/// One test-set prediction, kept for per-project tables and exports.
struct PredictionRecord {
  std::string id;
  std::string project;
  std::size_t round = 0;
  double actual = 0.0;
  double predicted = 0.0;
  double actual_bucket = 0.0;
  double predicted_bucket = 0.0;
  bool degenerate = false;
};

struct FoldResult {
  std::size_t round = 0;
  std::string label;  // fold number, or the held-out project
  std::size_t train_size = 0;
  std::size_t validation_size = 0;
  std::size_t test_size = 0;
  std::size_t best_epoch = 0;
  double best_validation_mae = 0.0;
  std::string stop_reason;
  MetricSet metrics;
};

struct EvalReport {
  std::string experiment_id;
  std::string model;       // display name, e.g. "BERT_SE"
  std::string split_kind;  // "kfold" or "by-project"
  std::string input_mode;  // "sequence" or "pooled"
  std::vector<FoldResult> folds;
  MetricAggregate aggregate;
  std::optional<ConfusionMatrix> confusion;
  std::vector<PredictionRecord> predictions;
  nlohmann::ordered_json provenance;

  /// Recomputes the aggregate from the fold list.
  void finalize() {
    std::vector<MetricSet> ms;
    for (const auto& f : folds) ms.push_back(f.metrics);
    aggregate = aggregate_folds(ms);
  }
};

/// Fixed two-decimal rendering for display tables.
inline std::string fixed2(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed, 2);
  std::string s(buf, ptr);
  if (s == "-0.00") s = "0.00";
  return s;
}

namespace detail {

using Cell = std::function<std::string(double)>;

/// Writes `<stem>.csv` (two decimals) and `<stem>_raw.csv` (shortest exact).
template <typename RowFn>
void write_table_pair(const std::filesystem::path& dir, const std::string& stem, const std::vector<std::string>& header,
                      std::size_t rows, RowFn&& row) {
  std::string shown = csv_row(header), raw = shown;
  for (std::size_t r = 0; r < rows; ++r) {
    shown += csv_row(row(r, Cell(fixed2)));
    raw += csv_row(row(r, Cell(format_number)));
  }
  write_file(dir / (stem + ".csv"), shown);
  write_file(dir / (stem + "_raw.csv"), raw);
}

}  // namespace detail

inline nlohmann::ordered_json report_to_json(const EvalReport& rep) {
  nlohmann::ordered_json j;
  j["experiment"] = rep.experiment_id;
  j["model"] = rep.model;
  j["split"] = rep.split_kind;
  j["input_mode"] = rep.input_mode;
  nlohmann::ordered_json folds = nlohmann::ordered_json::array();
  for (const auto& f : rep.folds)
    folds.push_back({{"round", f.round},
                     {"label", f.label},
                     {"train", f.train_size},
                     {"validation", f.validation_size},
                     {"test", f.test_size},
                     {"best_epoch", f.best_epoch},
                     {"best_validation_mae", f.best_validation_mae},
                     {"stop_reason", f.stop_reason},
                     {"mae", f.metrics.mae},
                     {"mdae", f.metrics.mdae},
                     {"mse", f.metrics.mse},
                     {"rmse", f.metrics.rmse},
                     {"n", f.metrics.n}});
  j["folds"] = folds;
  nlohmann::ordered_json agg;
  for (const auto& [name, m] : std::vector<std::pair<std::string, double MetricSet::*>>{
           {"mae", &MetricSet::mae}, {"mdae", &MetricSet::mdae}, {"mse", &MetricSet::mse}, {"rmse", &MetricSet::rmse}})
    agg[name] = {{"mean", rep.aggregate.mean.*m}, {"std_population", rep.aggregate.std.*m}};
  j["aggregate"] = agg;
  if (rep.confusion) j["confusion"] = rep.confusion->counts;
  j["provenance"] = rep.provenance;
  return j;
}

/// folds.csv, aggregate.csv (+ _raw twins), predictions.csv, the confusion
/// matrix CSVs when present, and report.json.
inline void write_report(const std::filesystem::path& dir, const EvalReport& rep) {
  detail::write_table_pair(
      dir, "folds",
      {"round", "label", "train", "validation", "test", "best_epoch", "best_validation_mae", "stop_reason", "mae", "mdae",
       "mse", "rmse"},
      rep.folds.size(), [&](std::size_t r, const detail::Cell& f) {
        const auto& x = rep.folds[r];
        return std::vector<std::string>{std::to_string(x.round), x.label, std::to_string(x.train_size),
                                        std::to_string(x.validation_size), std::to_string(x.test_size),
                                        std::to_string(x.best_epoch), f(x.best_validation_mae), x.stop_reason,
                                        f(x.metrics.mae), f(x.metrics.mdae), f(x.metrics.mse), f(x.metrics.rmse)};
      });
  const std::vector<std::pair<std::string, double MetricSet::*>> metrics = {
      {"mae", &MetricSet::mae}, {"mdae", &MetricSet::mdae}, {"mse", &MetricSet::mse}, {"rmse", &MetricSet::rmse}};
  detail::write_table_pair(dir, "aggregate", {"metric", "mean", "std_population", "folds"}, metrics.size(),
                           [&](std::size_t r, const detail::Cell& f) {
                             const auto m = metrics[r].second;
                             return std::vector<std::string>{metrics[r].first, f(rep.aggregate.mean.*m),
                                                             f(rep.aggregate.std.*m), std::to_string(rep.aggregate.folds)};
                           });
  std::string preds = "id,project,round,actual,predicted,actual_bucket,predicted_bucket,degenerate\n";
  for (const auto& p : rep.predictions)
    preds += csv_row({p.id, p.project, std::to_string(p.round), format_number(p.actual), format_number(p.predicted),
                               format_number(p.actual_bucket), format_number(p.predicted_bucket),
                               p.degenerate ? "1" : "0"});
  write_file(dir / "predictions.csv", preds);
  if (rep.confusion) {
    std::string header = "actual\\predicted";
    for (double b : rep.confusion->scheme.buckets) header += "," + format_number(b);
    std::string counts = header + "\n", norm = header + "\n";
    const auto nm = rep.confusion->normalized();
    for (std::size_t i = 0; i < 9; ++i) {
      counts += format_number(rep.confusion->scheme.buckets[i]);
      norm += format_number(rep.confusion->scheme.buckets[i]);
      for (std::size_t j = 0; j < 9; ++j) {
        counts += "," + std::to_string(rep.confusion->counts[i][j]);
        norm += "," + format_number(nm[i][j]);
      }
      counts += "\n";
      norm += "\n";
    }
    write_file(dir / "confusion_counts.csv", counts);
    write_file(dir / "confusion_normalized.csv", norm);
  }
  write_file(dir / "report.json", report_to_json(rep).dump(2) + "\n");
}

/// Reads back what write_report produced.
inline EvalReport read_report(const std::filesystem::path& dir) {
  EvalReport rep;
  try {
    const auto j = nlohmann::json::parse(read_file(dir / "report.json"));
    rep.experiment_id = j.at("experiment").get<std::string>();
    rep.model = j.at("model").get<std::string>();
    rep.split_kind = j.at("split").get<std::string>();
    rep.input_mode = j.at("input_mode").get<std::string>();
    rep.provenance = nlohmann::ordered_json::parse(j.at("provenance").dump());
    for (const auto& f : j.at("folds")) {
      FoldResult fr;
      fr.round = f.at("round").get<std::size_t>();
      fr.label = f.at("label").get<std::string>();
      fr.train_size = f.at("train").get<std::size_t>();
      fr.validation_size = f.at("validation").get<std::size_t>();
      fr.test_size = f.at("test").get<std::size_t>();
      fr.best_epoch = f.at("best_epoch").get<std::size_t>();
      fr.best_validation_mae = f.at("best_validation_mae").get<double>();
      fr.stop_reason = f.at("stop_reason").get<std::string>();
      fr.metrics = {f.at("mae").get<double>(), f.at("mdae").get<double>(), f.at("mse").get<double>(),
                    f.at("rmse").get<double>(), f.at("n").get<std::size_t>()};
      rep.folds.push_back(fr);
    }
    if (j.contains("confusion")) {
      ConfusionMatrix cm;
      cm.counts = j.at("confusion").get<std::vector<std::vector<std::size_t>>>();
      if (cm.counts.size() != 9) throw DataError("confusion matrix must be 9x9");
      for (const auto& row : cm.counts)
        if (row.size() != 9) throw DataError("confusion matrix must be 9x9");
      rep.confusion = cm;
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed report in " + dir.string() + ": " + e.what());
  }
  std::istringstream in(read_file(dir / "predictions.csv"));
  CsvReader reader(in);
  reader.next();
  while (auto row = reader.next()) {
    if (row->size() != 8) throw DataError("malformed predictions.csv in " + dir.string());
    auto num = [&](std::size_t i) {
      auto v = detail::parse_number((*row)[i]);
      if (!v) throw DataError("malformed number in predictions.csv: " + (*row)[i]);
      return *v;
    };
    rep.predictions.push_back({(*row)[0], (*row)[1], static_cast<std::size_t>(num(2)), num(3), num(4), num(5), num(6),
                               (*row)[7] == "1"});
  }
  rep.finalize();
  return rep;
}

enum class TableMode { comparison, per_project, new_project };

inline TableMode parse_table_mode(std::string_view s) {
  if (s == "comparison") return TableMode::comparison;
  if (s == "per-project") return TableMode::per_project;
  if (s == "new-project") return TableMode::new_project;
  throw ConfigError("unknown table mode '" + std::string(s) + "'");
}

/// Writes the cross-report tables into `dir` and returns the stem written.
///
/// comparison: one row per report with mean and std of mae, mse, mdae.
/// per-project: one row per project over all predictions of the reports,
///   with requirement count, effort mean/std and MAE.
/// new-project: one row per held-out project of by-project reports, plus an
///   average row.
inline std::string emit_tables(std::span<const EvalReport> reports, TableMode mode, const std::filesystem::path& dir) {
  if (reports.empty()) throw DataError("emit_tables: no reports");
  switch (mode) {
    case TableMode::comparison: {
      for (const auto& r : reports)
        if (r.experiment_id.empty()) throw DataError("emit_tables: report without experiment id");
      std::string shown = "model,mae,mse,mdae\n";
      std::string raw = "experiment,model,mae_mean,mae_std_population,mse_mean,mse_std_population,mdae_mean,"
                        "mdae_std_population,rmse_mean,rmse_std_population,folds\n";
      for (const auto& r : reports) {
        const auto& a = r.aggregate;
        auto pm = [](double m, double s) { return fixed2(m) + " \xC2\xB1" + fixed2(s); };
        shown += csv_row({r.model.empty() ? r.experiment_id : r.model, pm(a.mean.mae, a.std.mae),
                                   pm(a.mean.mse, a.std.mse), pm(a.mean.mdae, a.std.mdae)});
        raw += csv_row({r.experiment_id, r.model, format_number(a.mean.mae), format_number(a.std.mae),
                                 format_number(a.mean.mse), format_number(a.std.mse), format_number(a.mean.mdae),
                                 format_number(a.std.mdae), format_number(a.mean.rmse), format_number(a.std.rmse),
                                 std::to_string(a.folds)});
      }
      write_file(dir / "comparison.csv", shown);
      write_file(dir / "comparison_raw.csv", raw);
      return "comparison";
    }
    case TableMode::per_project: {
      std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> by_project;
      for (const auto& r : reports)
        for (const auto& p : r.predictions) {
          if (p.project.empty()) throw DataError("emit_tables: prediction " + p.id + " has no project");
          by_project[p.project].first.push_back(p.actual);
          by_project[p.project].second.push_back(p.predicted);
        }
      if (by_project.empty()) throw DataError("emit_tables: reports carry no predictions");
      std::vector<std::string> names;
      for (const auto& [k, v] : by_project) names.push_back(k);
      detail::write_table_pair(dir, "per_project", {"project", "requirements", "effort_mean", "effort_std_population", "mae"},
                               names.size(), [&](std::size_t i, const detail::Cell& f) {
                                 const auto& [actual, predicted] = by_project.at(names[i]);
                                 const auto [m, s] = mean_std(actual);
                                 return std::vector<std::string>{names[i], std::to_string(actual.size()), f(m), f(s),
                                                                 f(mae(actual, predicted))};
                               });
      return "per_project";
    }
    case TableMode::new_project: {
      std::vector<std::pair<std::string, double>> rows;
      for (const auto& r : reports) {
        if (r.split_kind != "by-project") throw DataError("emit_tables: new-project mode needs by-project reports");
        for (const auto& f : r.folds) {
          if (f.label.empty()) throw DataError("emit_tables: fold without project id");
          rows.emplace_back(f.label, f.metrics.mae);
        }
      }
      double avg = 0.0;
      for (const auto& [p, m] : rows) avg += m;
      avg /= static_cast<double>(rows.size());
      detail::write_table_pair(dir, "new_project", {"project", "mae"}, rows.size() + 1,
                               [&](std::size_t i, const detail::Cell& f) {
                                 if (i == rows.size()) return std::vector<std::string>{"Avg", f(avg)};
                                 return std::vector<std::string>{rows[i].first, f(rows[i].second)};
                               });
      return "new_project";
    }
  }
  return {};
}

}  // namespace se3m
