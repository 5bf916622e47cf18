#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "se3m/experiment.hpp"
#include "synthetic.hpp"

namespace fs = std::filesystem;
using namespace se3m;

namespace {

StaticEmbeddingModel small_static(const LabeledCorpus& corpus) {
  StaticTrainConfig c;
  c.dim = 12;
  c.epochs = 2;
  c.mode = StaticMode::skipgram;
  return train_static(cleaned_texts(corpus), c);
}

ContextualEmbedder small_contextual(const LabeledCorpus& corpus) {
  std::vector<std::string> texts;
  for (const auto& r : corpus.records()) texts.push_back(r.text);
  TransformerConfig c;
  c.layers = 1;
  c.hidden = 16;
  c.heads = 2;
  c.ff = 32;
  c.max_seq_len = 32;
  UnlabeledCorpus docs{texts};
  return make_contextual_embedder(build_wordpiece_vocab(docs, 120, default_stopwords()), c);
}

ExperimentConfig quick(const std::string& id) {
  ExperimentConfig c;
  c.id = id;
  c.head.epochs = 3;
  c.head.patience = 3;
  c.head.lstm_hidden = 8;
  c.head.dense = {8, 4};
  c.head.batch_size = 32;
  c.seed = 5;
  return c;
}

std::string slurp_dir(const fs::path& dir) {
  std::string all;
  std::set<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) files.insert(e.path());
  for (const auto& f : files) all += f.filename().string() + "\n" + read_file(f);
  return all;
}

}  // namespace

TEST(Catalog, ExperimentIds) {
  EXPECT_EQ(experiment_info("E1").model, "word2vec_base");
  EXPECT_FALSE(experiment_info("E1").contextual);
  EXPECT_TRUE(experiment_info("E2").finetuned);
  EXPECT_EQ(experiment_info("E4").model, "BERT_SE");
  EXPECT_EQ(experiment_info("E5").output, HeadOutput::softmax);
  EXPECT_THROW(experiment_info("E6"), ConfigError);
}

TEST(Carve, TenPercentDisjoint) {
  std::vector<std::size_t> idx(450);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const auto [train, val] = carve_validation(idx, 0.1, RngStream(3));
  EXPECT_EQ(val.size(), 45u);
  EXPECT_EQ(train.size(), 405u);
  std::set<std::size_t> all(train.begin(), train.end());
  for (auto v : val) EXPECT_TRUE(all.insert(v).second);
  EXPECT_EQ(all.size(), 450u);
  EXPECT_EQ(carve_validation(std::vector<std::size_t>{1, 2, 3}, 0.1, RngStream(1)).second.size(), 1u);
  EXPECT_THROW(carve_validation(std::vector<std::size_t>{1}, 0.1, RngStream(1)), DataError);
  EXPECT_EQ(carve_validation(idx, 0.1, RngStream(3)).second, val);
}

TEST(StaticSourceTest, SequenceKeepsOrderWithZeroRowsForUnknownWords) {
  const auto corpus = synth::labeled_corpus(60, 1);
  const auto model = small_static(corpus);
  const StaticSource src(model, "w2v", false, 3);
  const auto r = src.represent("Admin wants zzzunknown login page extra words", InputMode::sequence);
  ASSERT_EQ(r.steps, 3u);
  EXPECT_EQ(r.dim, 12u);
  const auto admin = *embed_word(model, "admin");
  EXPECT_TRUE(std::equal(admin.begin(), admin.end(), r.row(0).begin()));
  // "wants" is in the corpus, the invented word is not
  for (float v : r.row(2)) EXPECT_EQ(v, 0.0f);
  EXPECT_FALSE(r.degenerate);
  EXPECT_TRUE(src.represent("qqq zzz", InputMode::sequence).degenerate);
  EXPECT_EQ(src.represent("the of", InputMode::sequence).steps, 0u);
  const auto pooled = src.represent("admin login", InputMode::pooled);
  EXPECT_EQ(pooled.steps, 1u);
  EXPECT_EQ(src.describe()["kind"], "static");
}

TEST(ContextualSourceTest, ShapesFollowMode) {
  const auto corpus = synth::labeled_corpus(40, 2);
  const auto emb = small_contextual(corpus);
  const ContextualSource src(emb, "bert", false);
  const auto seq = src.represent("admin wants login page", InputMode::sequence);
  EXPECT_EQ(seq.dim, 16u);
  EXPECT_EQ(seq.steps, emb.encode_text("admin wants login page").ids.size() - 2);
  const auto pooled = src.represent("admin wants login page", InputMode::pooled);
  EXPECT_EQ(pooled.steps, 1u);
  EXPECT_TRUE(src.represent("the and", InputMode::sequence).degenerate);
  EXPECT_THROW(ContextualSource(emb, "bert", false, PoolingStrategy{5}), ConfigError);
}

TEST(RunExperiment, E1TenFoldStructure) {
  const auto corpus = synth::labeled_corpus(500, 11);
  const auto model = small_static(corpus);
  const StaticSource src(model, "w2v_base", false);
  const auto plan = kfold_split(corpus, 10, 3);
  std::size_t callbacks = 0;
  const auto rep = run_experiment(quick("E1"), corpus, plan, &src, [&](const FoldResult&) { ++callbacks; });
  EXPECT_EQ(rep.folds.size(), 10u);
  EXPECT_EQ(callbacks, 10u);
  EXPECT_EQ(rep.aggregate.folds, 10u);
  EXPECT_EQ(rep.predictions.size(), 500u);
  EXPECT_FALSE(rep.confusion.has_value());
  EXPECT_EQ(rep.model, "word2vec_base");
  EXPECT_EQ(rep.split_kind, "kfold");
  EXPECT_EQ(rep.input_mode, "sequence");
  for (const auto& f : rep.folds) {
    EXPECT_EQ(f.test_size, 50u);
    EXPECT_EQ(f.train_size + f.validation_size, 450u);
    EXPECT_EQ(f.validation_size, 45u);
    EXPECT_GE(f.best_epoch, 1u);
    EXPECT_GE(f.metrics.mae, 0.0);
  }
  EXPECT_EQ(rep.provenance["source"]["model"], "w2v_base");
  EXPECT_EQ(rep.provenance["fold_head_seeds"].size(), 10u);
  for (const auto& p : rep.predictions) {
    EXPECT_GE(p.predicted, 1.0);
    EXPECT_LE(p.predicted, 100.0);
  }
}

TEST(RunExperiment, DegenerateRecordsOnlyInTest) {
  const auto corpus = synth::labeled_corpus(120, 4, 3, 10);
  ASSERT_EQ(corpus.degenerate_count(), 12u);
  const auto model = small_static(corpus);
  const StaticSource src(model, "w2v", false);
  const auto plan = kfold_split(corpus, 4, 1);
  const auto rep = run_experiment(quick("E1"), corpus, plan, &src);
  std::size_t degenerate_predictions = 0;
  for (const auto& p : rep.predictions) degenerate_predictions += p.degenerate ? 1 : 0;
  EXPECT_EQ(degenerate_predictions, 12u);
  EXPECT_EQ(rep.predictions.size(), 120u);
  for (std::size_t r = 0; r < plan.rounds(); ++r) {
    std::size_t usable = 0;
    for (auto i : plan.train_indices(r)) usable += corpus[i].degenerate ? 0 : 1;
    EXPECT_EQ(rep.folds[r].train_size + rep.folds[r].validation_size, usable);
  }
  EXPECT_EQ(rep.provenance["degenerate_records"], 12);
}

TEST(RunExperiment, E5ConfusionMatrix) {
  const auto corpus = synth::labeled_corpus(90, 6);
  const auto emb = small_contextual(corpus);
  const ContextualSource src(emb, "bert_se", true);
  const auto plan = kfold_split(corpus, 3, 2);
  auto cfg = quick("E5");
  cfg.head.mode = InputMode::pooled;
  const auto rep = run_experiment(cfg, corpus, plan, &src);
  ASSERT_TRUE(rep.confusion.has_value());
  EXPECT_EQ(rep.confusion->counts.size(), 9u);
  for (const auto& row : rep.confusion->counts) EXPECT_EQ(row.size(), 9u);
  EXPECT_EQ(rep.confusion->total(), corpus.size());
  const auto sums = rep.confusion->row_sums();
  std::array<std::size_t, 9> expected{};
  for (const auto& r : corpus.records()) ++expected[bucket_index(r.effort)];
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(sums[i], expected[i]);
  for (const auto& p : rep.predictions) EXPECT_TRUE(BucketScheme{}.index_of(p.predicted).has_value());
  EXPECT_EQ(rep.provenance["head"]["output"], "softmax");
  EXPECT_EQ(rep.provenance["metric_space"], "bucket");
}

TEST(RunExperiment, ByProjectFeedsNewProjectTable) {
  const auto corpus = synth::labeled_corpus(90, 7, 3);
  const auto emb = small_contextual(corpus);
  const ContextualSource src(emb, "bert_se", true);
  auto cfg = quick("E4");
  cfg.head.mode = InputMode::pooled;
  const auto rep = run_experiment(cfg, corpus, leave_one_project_out(corpus), &src);
  EXPECT_EQ(rep.split_kind, "by-project");
  ASSERT_EQ(rep.folds.size(), 3u);
  EXPECT_EQ(rep.folds[0].label, "p0");
  const auto dir = fs::temp_directory_path() / "se3m_exp_newproj";
  fs::remove_all(dir);
  emit_tables(std::vector<EvalReport>{rep}, TableMode::new_project, dir);
  EXPECT_TRUE(fs::exists(dir / "new_project.csv"));
  fs::remove_all(dir);
}

TEST(RunExperiment, IdenticalReportsForIdenticalInputs) {
  const auto corpus = synth::labeled_corpus(150, 8);
  const auto model = small_static(corpus);
  const StaticSource src(model, "w2v", true);
  const auto plan = kfold_split(corpus, 5, 9);
  const auto a = run_experiment(quick("E2"), corpus, plan, &src);
  const auto b = run_experiment(quick("E2"), corpus, plan, &src);
  const auto da = fs::temp_directory_path() / "se3m_exp_det_a", db = fs::temp_directory_path() / "se3m_exp_det_b";
  fs::remove_all(da);
  fs::remove_all(db);
  write_report(da, a);
  write_report(db, b);
  EXPECT_EQ(slurp_dir(da), slurp_dir(db));
  fs::remove_all(da);
  fs::remove_all(db);
}

TEST(RunExperiment, RejectsMissingOrWrongModelAndForeignPlan) {
  const auto corpus = synth::labeled_corpus(60, 9);
  const auto model = small_static(corpus);
  const StaticSource base(model, "w2v", false);
  const auto plan = kfold_split(corpus, 3, 1);
  EXPECT_THROW(run_experiment(quick("E1"), corpus, plan, nullptr), ConfigError);
  EXPECT_THROW(run_experiment(quick("E2"), corpus, plan, &base), ConfigError);
  EXPECT_THROW(run_experiment(quick("E3"), corpus, plan, &base), ConfigError);
  const auto other = synth::labeled_corpus(61, 9);
  EXPECT_THROW(run_experiment(quick("E1"), corpus, kfold_split(other, 3, 1), &base), ConfigError);
  auto bad = quick("E1");
  bad.validation_fraction = 1.0;
  EXPECT_THROW(run_experiment(bad, corpus, plan, &base), ConfigError);
}
