#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <sstream>

#include "se3m/csv.hpp"
#include "se3m/eval.hpp"
#include "se3m/rng.hpp"

namespace fs = std::filesystem;
using namespace se3m;

namespace {

// Straightforward loops, no shared helpers with the library.
struct Oracle {
  double mae, mdae, mse;
};

Oracle brute_force(const std::vector<double>& a, const std::vector<double>& p) {
  const std::size_t n = a.size();
  std::vector<double> e(n);
  long double abs_sum = 0, sq_sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    e[i] = a[i] > p[i] ? a[i] - p[i] : p[i] - a[i];
    abs_sum += e[i];
    sq_sum += static_cast<long double>(e[i]) * e[i];
  }
  // selection sort
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t m = i;
    for (std::size_t j = i + 1; j < n; ++j)
      if (e[j] < e[m]) m = j;
    std::swap(e[i], e[m]);
  }
  const double med = (n % 2 == 1) ? e[(n - 1) / 2] : (e[n / 2 - 1] + e[n / 2]) / 2.0;
  return {static_cast<double>(abs_sum / n), med, static_cast<double>(sq_sum / n)};
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::istringstream in(read_file(p));
  CsvReader r(in);
  std::vector<std::vector<std::string>> rows;
  while (auto rec = r.next()) rows.push_back(*rec);
  return rows;
}

fs::path scratch(const std::string& name) {
  auto d = fs::temp_directory_path() / ("se3m_eval_" + name);
  fs::remove_all(d);
  return d;
}

MetricSet fold(double mae_v, double mse_v, double mdae_v) { return {mae_v, mdae_v, mse_v, std::sqrt(mse_v), 10}; }

EvalReport report(const std::string& id, const std::string& model, std::vector<MetricSet> folds) {
  EvalReport r;
  r.experiment_id = id;
  r.model = model;
  r.split_kind = "kfold";
  for (std::size_t i = 0; i < folds.size(); ++i) {
    FoldResult f;
    f.round = i + 1;
    f.label = std::to_string(i + 1);
    f.metrics = folds[i];
    r.folds.push_back(f);
  }
  r.finalize();
  return r;
}

}  // namespace

TEST(Metrics, DeskExamples) {
  const std::vector<double> a{2, 4}, p{3, 7};
  EXPECT_DOUBLE_EQ(mae(a, p), 2.0);
  EXPECT_DOUBLE_EQ(mae(a, a), 0.0);
  EXPECT_DOUBLE_EQ(mae(std::vector<double>{5}, std::vector<double>{1}), 4.0);
  const auto sq = mse(a, p);
  EXPECT_DOUBLE_EQ(sq.mse, 5.0);
  EXPECT_NEAR(sq.rmse, 2.2360, 1e-4);
  const auto zero = mse(a, a);
  EXPECT_EQ(zero.mse, 0.0);
  EXPECT_EQ(zero.rmse, 0.0);
}

TEST(Metrics, MedianAbsoluteError) {
  const std::vector<double> zeros{0, 0, 0};
  EXPECT_DOUBLE_EQ(mdae(zeros, std::vector<double>{0, 2, 4}), 2.0);
  EXPECT_DOUBLE_EQ(mdae(std::vector<double>{0, 0}, std::vector<double>{1, 3}), 2.0);
  std::vector<double> a(10, 3.0), p(10, 3.0);
  p[4] = 1e6;
  EXPECT_EQ(mdae(a, p), 0.0);
}

TEST(Metrics, Errors) {
  const std::vector<double> one{1}, two{1, 2}, none;
  EXPECT_THROW(mae(one, two), ShapeError);
  EXPECT_THROW(mdae(one, two), ShapeError);
  EXPECT_THROW(mse(one, two), ShapeError);
  EXPECT_THROW(mae(none, none), DataError);
  EXPECT_THROW(mdae(none, none), DataError);
  EXPECT_THROW(mse(none, none), DataError);
}

TEST(Metrics, MatchBruteForceOnRandomSamples) {
  const auto t0 = std::chrono::steady_clock::now();
  RngStream rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(1000);
    std::vector<double> a(n), p(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = rng.uniform(0.5, 100.0);
      p[i] = rng.uniform(-20.0, 120.0);
    }
    const Oracle o = brute_force(a, p);
    const MetricSet m = compute_metrics(a, p);
    EXPECT_NEAR(m.mae, o.mae, 1e-9);
    EXPECT_NEAR(m.mdae, o.mdae, 1e-9);
    EXPECT_NEAR(m.mse, o.mse, 1e-9);
    EXPECT_NEAR(m.rmse * m.rmse, m.mse, 1e-9 * std::max(1.0, m.mse));
    EXPECT_LE(m.mae, m.rmse + 1e-12);
    EXPECT_EQ(m.n, n);
  }
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 10.0);
}

TEST(Metrics, PermutationInvariantAndNonNegative) {
  RngStream rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 1 + rng.below(60);
    std::vector<double> a(n), p(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = rng.uniform(1, 40);
      p[i] = rng.uniform(1, 40);
    }
    const MetricSet before = compute_metrics(a, p);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    rng.shuffle(idx);
    std::vector<double> a2, p2;
    for (auto i : idx) {
      a2.push_back(a[i]);
      p2.push_back(p[i]);
    }
    const MetricSet after = compute_metrics(a2, p2);
    EXPECT_NEAR(before.mae, after.mae, 1e-12);
    EXPECT_EQ(before.mdae, after.mdae);
    EXPECT_NEAR(before.mse, after.mse, 1e-9);
    EXPECT_GE(after.mae, 0.0);
    EXPECT_GE(after.mdae, 0.0);
    EXPECT_GE(after.mse, 0.0);
  }
}

TEST(Metrics, AllZeroOnlyForExactPredictions) {
  const std::vector<double> a{1, 2, 3};
  EXPECT_EQ(compute_metrics(a, a), (MetricSet{0, 0, 0, 0, 3}));
  const auto m = compute_metrics(a, std::vector<double>{1, 2, 3.5});
  EXPECT_GT(m.mae, 0.0);
  EXPECT_GT(m.mse, 0.0);
}

TEST(Aggregate, MeanAndPopulationStd) {
  const std::vector<MetricSet> folds{fold(4, 20, 3), fold(6, 30, 5)};
  const auto agg = aggregate_folds(folds);
  EXPECT_DOUBLE_EQ(agg.mean.mae, 5.0);
  EXPECT_DOUBLE_EQ(agg.std.mae, 1.0);
  EXPECT_DOUBLE_EQ(agg.mean.mse, 25.0);
  EXPECT_DOUBLE_EQ(agg.std.mse, 5.0);
  EXPECT_EQ(agg.folds, 2u);
  EXPECT_EQ(agg.mean.n, 20u);
}

TEST(Aggregate, SingleAndIdenticalFolds) {
  const auto one = aggregate_folds(std::vector<MetricSet>{fold(3.5, 12, 2)});
  EXPECT_EQ(one.std.mae, 0.0);
  EXPECT_EQ(one.mean.mae, 3.5);
  const std::vector<MetricSet> ten(10, fold(4.25, 80.5, 2.5));
  const auto agg = aggregate_folds(ten);
  EXPECT_NEAR(agg.mean.mae, 4.25, 1e-12);
  EXPECT_NEAR(agg.std.mae, 0.0, 1e-12);
  EXPECT_NEAR(agg.std.mse, 0.0, 1e-12);
  EXPECT_THROW(aggregate_folds(std::vector<MetricSet>{}), DataError);
}

TEST(Aggregate, RecomputableFromFoldList) {
  auto r = report("E1", "Word2Vec_SE", {fold(4, 90, 2), fold(5, 95, 3), fold(4.5, 100, 2.5)});
  const auto saved = r.aggregate;
  r.finalize();
  EXPECT_EQ(saved.mean, r.aggregate.mean);
  EXPECT_EQ(saved.std, r.aggregate.std);
}

TEST(Confusion, DeskExample) {
  const auto cm = confusion_matrix(std::vector<double>{1, 5}, std::vector<double>{1, 8});
  EXPECT_EQ(cm.at(1, 1), 1u);
  EXPECT_EQ(cm.at(5, 8), 1u);
  EXPECT_EQ(cm.total(), 2u);
  std::size_t nonzero = 0;
  for (const auto& row : cm.counts)
    for (auto c : row) nonzero += c ? 1 : 0;
  EXPECT_EQ(nonzero, 2u);
}

TEST(Confusion, PerfectPredictionsAreDiagonal) {
  const BucketScheme s;
  std::vector<double> a(s.buckets.begin(), s.buckets.end());
  a.insert(a.end(), s.buckets.begin(), s.buckets.end());
  const auto cm = confusion_matrix(a, a);
  for (std::size_t i = 0; i < 9; ++i)
    for (std::size_t j = 0; j < 9; ++j) EXPECT_EQ(cm.counts[i][j], i == j ? 2u : 0u);
}

TEST(Confusion, RowSumsAndNormalization) {
  const BucketScheme s;
  RngStream rng(8);
  std::vector<double> a, p;
  std::array<std::size_t, 9> actual_counts{};
  for (int i = 0; i < 500; ++i) {
    const std::size_t ai = rng.below(8);  // top bucket stays empty
    a.push_back(s.buckets[ai]);
    p.push_back(s.buckets[rng.below(9)]);
    ++actual_counts[ai];
  }
  const auto cm = confusion_matrix(a, p);
  EXPECT_EQ(cm.total(), 500u);
  const auto sums = cm.row_sums();
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(sums[i], actual_counts[i]);
  const auto nm = cm.normalized();
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(std::accumulate(nm[i].begin(), nm[i].end(), 0.0), 1.0, 1e-12);
  for (double v : nm[8]) EXPECT_EQ(v, 0.0);
}

TEST(Confusion, RejectsValuesOutsideScheme) {
  EXPECT_THROW(confusion_matrix(std::vector<double>{4}, std::vector<double>{5}), DataError);
  EXPECT_THROW(confusion_matrix(std::vector<double>{5}, std::vector<double>{6.5}), DataError);
  EXPECT_THROW(confusion_matrix(std::vector<double>{5, 8}, std::vector<double>{5}), ShapeError);
}

TEST(Tables, FixedTwoDecimals) {
  EXPECT_EQ(fixed2(4.255), "4.25");  // binary 4.2549999...
  EXPECT_EQ(fixed2(86.1549), "86.15");
  EXPECT_EQ(fixed2(-0.001), "0.00");
  EXPECT_EQ(fixed2(3), "3.00");
}

TEST(Tables, ComparisonHasOneRowPerReport) {
  const auto dir = scratch("comparison");
  std::vector<EvalReport> reps{report("E1", "Word2Vec_SE", {fold(4, 90, 2), fold(6, 100, 4)}),
                               report("E2", "BERT_SE", {fold(4.5, 86, 3)}),
                               report("E3", "Word2Vec_base", {fold(5, 101, 3)}),
                               report("E4", "BERT_base", {fold(4.4, 88, 3)})};
  EXPECT_EQ(emit_tables(reps, TableMode::comparison, dir), "comparison");
  const auto shown = read_csv(dir / "comparison.csv");
  ASSERT_EQ(shown.size(), 5u);
  EXPECT_EQ(shown[0], (std::vector<std::string>{"model", "mae", "mse", "mdae"}));
  EXPECT_EQ(shown[1], (std::vector<std::string>{"Word2Vec_SE", "5.00 \xC2\xB1" "1.00", "95.00 \xC2\xB1" "5.00",
                                                "3.00 \xC2\xB1" "1.00"}));
  const auto raw = read_csv(dir / "comparison_raw.csv");
  ASSERT_EQ(raw.size(), 5u);
  EXPECT_EQ(raw[0][3], "mae_std_population");
  EXPECT_EQ(raw[2][0], "E2");
  EXPECT_EQ(std::stod(raw[2][2]), 4.5);
  fs::remove_all(dir);
}

TEST(Tables, ComparisonRequiresExperimentId) {
  auto r = report("", "X", {fold(1, 1, 1)});
  EXPECT_THROW(emit_tables(std::vector<EvalReport>{r}, TableMode::comparison, scratch("noid")), DataError);
  EXPECT_THROW(emit_tables(std::vector<EvalReport>{}, TableMode::comparison, scratch("none")), DataError);
}

TEST(Tables, PerProjectColumns) {
  const auto dir = scratch("per_project");
  auto r = report("E2", "BERT_SE", {fold(1, 1, 1)});
  r.predictions = {{"a", "moodle", 1, 2, 3, 2, 3}, {"b", "moodle", 1, 4, 7, 5, 8}, {"c", "xd", 1, 8, 8, 8, 8}};
  emit_tables(std::vector<EvalReport>{r}, TableMode::per_project, dir);
  const auto rows = read_csv(dir / "per_project.csv");
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"project", "requirements", "effort_mean", "effort_std_population", "mae"}));
  EXPECT_EQ(rows[1], (std::vector<std::string>{"moodle", "2", "3.00", "1.00", "2.00"}));
  EXPECT_EQ(rows[2], (std::vector<std::string>{"xd", "1", "8.00", "0.00", "0.00"}));
  r.predictions[2].project.clear();
  EXPECT_THROW(emit_tables(std::vector<EvalReport>{r}, TableMode::per_project, dir), DataError);
  fs::remove_all(dir);
}

TEST(Tables, NewProjectAveragesTargets) {
  const auto dir = scratch("new_project");
  auto r = report("E2-new", "BERT_SE", {fold(2, 1, 1), fold(4, 1, 1), fold(3.3, 1, 1)});
  r.split_kind = "by-project";
  r.folds[0].label = "apstud";
  r.folds[1].label = "mesos";
  r.folds[2].label = "xd";
  emit_tables(std::vector<EvalReport>{r}, TableMode::new_project, dir);
  const auto rows = read_csv(dir / "new_project.csv");
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[4], (std::vector<std::string>{"Avg", "3.10"}));
  const auto raw = read_csv(dir / "new_project_raw.csv");
  EXPECT_NEAR(std::stod(raw[4][1]), 3.1, 1e-12);
  r.folds[1].label.clear();
  EXPECT_THROW(emit_tables(std::vector<EvalReport>{r}, TableMode::new_project, dir), DataError);
  r.split_kind = "kfold";
  EXPECT_THROW(emit_tables(std::vector<EvalReport>{r}, TableMode::new_project, dir), DataError);
  fs::remove_all(dir);
}

TEST(Tables, ModeParsing) {
  EXPECT_EQ(parse_table_mode("per-project"), TableMode::per_project);
  EXPECT_EQ(parse_table_mode("new-project"), TableMode::new_project);
  EXPECT_THROW(parse_table_mode("all"), ConfigError);
}

TEST(Report, WritesFoldsAggregateAndConfusion) {
  const auto dir = scratch("report");
  auto r = report("E5", "BERT_SE_class", {fold(4, 20, 3), fold(6, 30, 5)});
  r.confusion = confusion_matrix(std::vector<double>{1, 5, 5}, std::vector<double>{1, 8, 5});
  r.provenance = {{"seed", 7}};
  write_report(dir, r);
  for (const char* f : {"folds.csv", "folds_raw.csv", "aggregate.csv", "aggregate_raw.csv", "predictions.csv",
                        "confusion_counts.csv", "confusion_normalized.csv", "report.json"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  const auto agg = read_csv(dir / "aggregate.csv");
  EXPECT_EQ(agg[0][2], "std_population");
  EXPECT_EQ(agg[1], (std::vector<std::string>{"mae", "5.00", "1.00", "2"}));
  const auto counts = read_csv(dir / "confusion_counts.csv");
  ASSERT_EQ(counts.size(), 10u);
  EXPECT_EQ(counts[0].size(), 10u);
  EXPECT_EQ(counts[4][0], "5");
  EXPECT_EQ(counts[4][4], "1");
  EXPECT_EQ(counts[4][5], "1");
  const auto norm = read_csv(dir / "confusion_normalized.csv");
  EXPECT_EQ(norm[4][4], "0.5");
  fs::remove_all(dir);
}

TEST(Report, ReadBackMatchesWritten) {
  const auto dir = scratch("readback");
  auto r = report("E5", "BERT_SE", {fold(4.125, 20.5, 3), fold(6, 30, 5.25)});
  r.split_kind = "by-project";
  r.input_mode = "pooled";
  r.confusion = confusion_matrix(std::vector<double>{1, 5, 13}, std::vector<double>{2, 5, 13});
  r.predictions = {{"a,1", "p\"x", 0, 1, 2, 1, 2, false}, {"b", "q", 1, 4.7, 5, 5, 5, true}};
  r.provenance = {{"seed", 3}, {"fold_head_seeds", {1, 2}}};
  write_report(dir, r);
  const auto back = read_report(dir);
  EXPECT_EQ(back.experiment_id, "E5");
  EXPECT_EQ(back.model, "BERT_SE");
  EXPECT_EQ(back.split_kind, "by-project");
  EXPECT_EQ(back.input_mode, "pooled");
  ASSERT_EQ(back.folds.size(), 2u);
  EXPECT_EQ(back.folds[0].metrics, r.folds[0].metrics);
  EXPECT_EQ(back.aggregate.mean, r.aggregate.mean);
  ASSERT_TRUE(back.confusion.has_value());
  EXPECT_EQ(back.confusion->counts, r.confusion->counts);
  ASSERT_EQ(back.predictions.size(), 2u);
  EXPECT_EQ(back.predictions[0].id, "a,1");
  EXPECT_EQ(back.predictions[0].project, "p\"x");
  EXPECT_EQ(back.predictions[1].actual, 4.7);
  EXPECT_TRUE(back.predictions[1].degenerate);
  EXPECT_EQ(back.provenance["seed"], 3);
  fs::remove_all(dir);
  EXPECT_THROW(read_report(dir), DataError);
}
