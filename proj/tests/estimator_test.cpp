#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "se3m/estimator.hpp"
#include "se3m/grad_check.hpp"

namespace fs = std::filesystem;
using namespace se3m;

namespace {

struct ToySet {
  std::vector<Representation> reps;
  std::vector<Sample> samples;
};

ToySet random_set(std::size_t n, std::size_t dim, bool pooled, std::uint64_t seed, double constant = 0.0) {
  RngStream rng(seed);
  const BucketScheme scheme;
  ToySet s;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t steps = pooled ? 1 : 2 + rng.below(7);
    std::vector<std::vector<float>> rows(steps, std::vector<float>(dim));
    for (auto& r : rows)
      for (auto& v : r) v = static_cast<float>(rng.normal());
    s.reps.push_back(Representation::sequence(rows, dim));
  }
  for (std::size_t i = 0; i < n; ++i) s.samples.push_back({&s.reps[i], constant > 0 ? constant : scheme.buckets[rng.below(8)]});
  return s;
}

double training_mae(const EstimatorModel<float>& m, const std::vector<Sample>& samples) {
  double sum = 0;
  for (const auto& s : samples) sum += std::abs(predict_effort(m, *s.input).effort - s.effort);
  return sum / static_cast<double>(samples.size());
}

bool same_parameters(const EstimatorModel<float>& a, const EstimatorModel<float>& b) {
  const auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (pa[i]->value.values() != pb[i]->value.values()) return false;
  return true;
}

}  // namespace

TEST(HeadConfig, Defaults) {
  const HeadConfig c;
  EXPECT_EQ(c.mode, InputMode::sequence);
  EXPECT_EQ(c.dense, (std::vector<std::size_t>{50, 10}));
  EXPECT_EQ(c.epochs, 20u);
  EXPECT_EQ(c.batch_size, 128u);
  EXPECT_EQ(c.patience, 5u);
  EXPECT_DOUBLE_EQ(c.lr, 0.002);
  EXPECT_DOUBLE_EQ(c.epsilon, 1e-4);
  EXPECT_EQ(c.output_size(), 1u);
}

TEST(HeadConfig, Validation) {
  HeadConfig c;
  c.dense = {50, 0};
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.patience = 21;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.dense.clear();
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(build_estimator(HeadConfig{}, 0), ConfigError);
  EXPECT_THROW(parse_input_mode("bag"), ConfigError);
  EXPECT_THROW(parse_head_output("sigmoid"), ConfigError);
}

TEST(HeadConfig, JsonRoundTrip) {
  HeadConfig c;
  c.mode = InputMode::pooled;
  c.output = HeadOutput::softmax;
  c.dense = {32, 8, 4};
  c.dense_activation = Activation::tanh;
  c.seed = 99;
  c.pad_length = 100;
  EXPECT_EQ(HeadConfig::from_json(nlohmann::json::parse(c.to_json().dump())), c);
  auto j = nlohmann::json::parse(c.to_json().dump());
  j.erase("epochs");
  EXPECT_THROW(HeadConfig::from_json(j), ConfigError);
}

TEST(Build, SequenceParameterCount) {
  // LSTM: 4 gates x 50 x (100 inputs + 50 recurrent + 1 bias)
  const std::size_t lstm = 4 * 50 * (100 + 50 + 1);
  const std::size_t oracle = lstm + (50 * 50 + 50) + (50 * 10 + 10) + (10 * 1 + 1);
  EXPECT_EQ(oracle, 33271u);
  const auto m = build_estimator(HeadConfig{}, 100);
  EXPECT_EQ(m.parameter_count(), oracle);
  EXPECT_EQ(head_parameter_count(HeadConfig{}, 100), oracle);
  EXPECT_TRUE(m.has_lstm());
}

TEST(Build, PooledAndSoftmaxShapes) {
  HeadConfig c;
  c.mode = InputMode::pooled;
  const auto pooled = build_estimator(c, 100);
  EXPECT_FALSE(pooled.has_lstm());
  EXPECT_EQ(pooled.parameter_count(), (100u * 50 + 50) + (50 * 10 + 10) + 11);
  c.output = HeadOutput::softmax;
  const auto cls = build_estimator(c, 100);
  EXPECT_EQ(cls.parameters().back()->value.dim(0), 9u);
  EXPECT_EQ(cls.parameter_count(), (100u * 50 + 50) + (50 * 10 + 10) + (10 * 9 + 9));
  EXPECT_EQ(cls.parameter_count(), head_parameter_count(c, 100));
}

TEST(Build, SeedDeterminesInitialParameters) {
  HeadConfig c;
  const auto a = build_estimator(c, 16), b = build_estimator(c, 16);
  EXPECT_TRUE(same_parameters(a, b));
  c.seed = 2;
  EXPECT_FALSE(same_parameters(a, build_estimator(c, 16)));
}

TEST(Predict, ClampExamples) {
  const auto low = prediction_from_raw(-3.2);
  EXPECT_EQ(low.effort, 1.0);
  EXPECT_EQ(low.raw, -3.2);
  const auto mid = prediction_from_raw(6.0);
  EXPECT_EQ(mid.effort, 6.0);
  EXPECT_EQ(mid.bucket, 5.0);
  const auto high = prediction_from_raw(250);
  EXPECT_EQ(high.effort, 100.0);
  EXPECT_EQ(high.bucket, 100.0);
  EXPECT_TRUE(high.probabilities.empty());
}

TEST(Predict, EffortAlwaysInRange) {
  RngStream rng(4);
  std::vector<double> raws{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity(),
                           std::numeric_limits<double>::quiet_NaN(), 0.0, 1.0, 100.0};
  for (int i = 0; i < 1000; ++i) raws.push_back(rng.uniform(-1e4, 1e4));
  for (double r : raws) {
    const auto p = prediction_from_raw(r);
    EXPECT_GE(p.effort, 1.0);
    EXPECT_LE(p.effort, 100.0);
    EXPECT_TRUE(BucketScheme{}.index_of(p.bucket).has_value());
  }
}

TEST(Predict, UniformProbabilitiesPickLowestBucket) {
  const auto p = prediction_from_probabilities(std::vector<double>(9, 1.0 / 9));
  EXPECT_EQ(p.bucket, 1.0);
  std::vector<double> tie(9, 0.0);
  tie[3] = tie[6] = 0.5;
  EXPECT_EQ(prediction_from_probabilities(tie).bucket, 5.0);
  EXPECT_THROW(prediction_from_probabilities(std::vector<double>(8, 0.125)), ShapeError);
}

TEST(Predict, SoftmaxHeadProbabilities) {
  HeadConfig c;
  c.output = HeadOutput::softmax;
  auto m = build_estimator(c, 8);
  const auto set = random_set(20, 8, false, 1);
  for (const auto& r : set.reps) {
    const auto p = predict_class(m, r);
    ASSERT_EQ(p.probabilities.size(), 9u);
    double sum = 0;
    for (double v : p.probabilities) sum += v;
    EXPECT_NEAR(sum, 1.0, 1e-9);
    EXPECT_EQ(p.effort, p.bucket);
  }
  // zero output layer: uniform logits
  for (auto* p : m.parameters())
    if (p->name.starts_with("head.output")) p->value.fill(0.0f);
  EXPECT_EQ(predict_class(m, set.reps[0]).bucket, 1.0);
  EXPECT_THROW(predict_effort(m, set.reps[0]), ConfigError);
  EXPECT_THROW(predict_class(build_estimator(HeadConfig{}, 8), set.reps[0]), ConfigError);
}

TEST(Predict, RejectsMismatchedInputs) {
  const auto m = build_estimator(HeadConfig{}, 8);
  EXPECT_THROW(m.predict(Representation::pooled(std::vector<float>(7, 0.f))), ShapeError);
  HeadConfig c;
  c.mode = InputMode::pooled;
  const auto pooled = build_estimator(c, 4);
  const auto seq = Representation::sequence({{1, 2, 3, 4}, {1, 2, 3, 4}}, 4);
  EXPECT_THROW(pooled.predict(seq), ShapeError);
  c = {};
  c.pad_length = 1;
  EXPECT_THROW(build_estimator(c, 4).predict(seq), ShapeError);
}

TEST(Predict, EmptySequenceIsAccepted) {
  const auto m = build_estimator(HeadConfig{}, 4);
  const auto p = m.predict(Representation::sequence({}, 4, true));
  EXPECT_GE(p.effort, 1.0);
  EXPECT_EQ(m.predict(Representation::sequence({}, 4)).raw, p.raw);
}

TEST(Predict, BatchMatchesSingle) {
  const auto m = build_estimator(HeadConfig{}, 6);
  const auto set = random_set(10, 6, false, 3);
  std::vector<const Representation*> ptrs;
  for (const auto& r : set.reps) ptrs.push_back(&r);
  const auto batch = m.predict_batch(ptrs);
  for (std::size_t i = 0; i < ptrs.size(); ++i) EXPECT_NEAR(batch[i].raw, m.predict(*ptrs[i]).raw, 1e-5);
}

TEST(GradCheck, SequenceHeadInDouble) {
  HeadConfig c;
  c.lstm_hidden = 4;
  c.dense = {5, 3};
  c.dense_activation = Activation::tanh;
  EstimatorModel<double> m(c, 3);
  const auto set = random_set(4, 3, false, 9);
  std::vector<const Representation*> ptrs;
  std::vector<double> targets;
  for (const auto& s : set.samples) {
    ptrs.push_back(s.input);
    targets.push_back(s.effort);
  }
  const auto [x, mask] = m.make_batch(ptrs);
  auto params = m.parameters();
  const auto res = grad_check(
      params, [&] { return mse_loss(m.apply(x, mask), targets).value; },
      [&] {
        zero_grads(params);
        const auto y = m.forward(x, mask);
        m.backward(mse_loss(y, targets).grad);
      });
  EXPECT_LT(res.max_relative_error, 1e-4) << res.worst_parameter << "[" << res.worst_index << "]";
}

TEST(Train, MemorizesThirtyTwoSamples) {
  for (bool pooled : {false, true}) {
    auto set = random_set(32, 16, pooled, 3);
    HeadConfig c;
    c.mode = pooled ? InputMode::pooled : InputMode::sequence;
    c.epochs = 300;
    c.patience = 300;
    auto m = build_estimator(c, 16);
    std::size_t reached = 0;
    train_estimator(m, set.samples, set.samples, [&](const EpochRecord& e) {
      if (!reached && e.validation_mae < 0.5) reached = e.epoch;
    });
    EXPECT_GT(reached, 0u) << (pooled ? "pooled" : "sequence");
    EXPECT_LE(reached, 300u);
    EXPECT_LT(training_mae(m, set.samples), 0.5) << (pooled ? "pooled" : "sequence");
  }
}

TEST(Train, ConstantTargetConverges) {
  // Too few random inputs and the head fits them without becoming input-invariant.
  auto train = random_set(512, 8, false, 5, 5.0);
  auto val = random_set(32, 8, false, 6, 5.0);
  HeadConfig c;
  c.epochs = 100;
  c.patience = 100;
  c.batch_size = 32;
  auto m = build_estimator(c, 8);
  const auto h = train_estimator(m, train.samples, val.samples);
  EXPECT_LT(h.best_validation_mae, 0.1);
  double mean = 0;
  for (const auto& r : val.reps) mean += predict_effort(m, r).effort;
  EXPECT_NEAR(mean / static_cast<double>(val.reps.size()), 5.0, 0.1);
  EXPECT_EQ(training_mae(m, val.samples), h.best_validation_mae);
}

TEST(Train, RestoresBestEpoch) {
  auto train = random_set(48, 6, false, 11);
  auto val = random_set(24, 6, false, 12);
  HeadConfig c;
  c.epochs = 40;
  c.patience = 40;
  c.batch_size = 8;
  c.lr = 0.02;
  auto m = build_estimator(c, 6);
  const auto h = train_estimator(m, train.samples, val.samples);
  ASSERT_EQ(h.epochs.size(), 40u);
  double mn = h.epochs[0].validation_mae;
  for (const auto& e : h.epochs) mn = std::min(mn, e.validation_mae);
  EXPECT_EQ(h.best_validation_mae, mn);
  EXPECT_EQ(h.epochs[h.best_epoch - 1].validation_mae, mn);
  EXPECT_LE(h.best_epoch, h.epochs.size());
  EXPECT_EQ(validation_mae(m, val.samples), mn);
  EXPECT_EQ(h.stop_reason, "epochs");
  ASSERT_TRUE(m.history.has_value());
  EXPECT_EQ(m.history->best_epoch, h.best_epoch);
}

TEST(Train, FlatValidationStopsOnPatience) {
  auto set = random_set(16, 4, true, 2);
  HeadConfig c;
  c.mode = InputMode::pooled;
  c.lr = 1e-12;
  auto m = build_estimator(c, 4);
  const auto h = train_estimator(m, set.samples, set.samples);
  EXPECT_EQ(h.stop_reason, "patience");
  EXPECT_EQ(h.epochs.size(), 1u + c.patience);
}

TEST(EarlyStopping, ResetsOnlyOnRealImprovement) {
  EarlyStopping s(3, 1e-4);
  EXPECT_FALSE(s.observe(5.0));
  EXPECT_FALSE(s.observe(4.99995));  // below epsilon
  EXPECT_EQ(s.stale(), 1u);
  EXPECT_EQ(s.best_epoch(), 2u);
  EXPECT_FALSE(s.observe(4.9));
  EXPECT_EQ(s.stale(), 0u);
  EXPECT_FALSE(s.observe(4.95));
  EXPECT_FALSE(s.observe(4.89995));
  EXPECT_TRUE(s.observe(4.9));
  EXPECT_EQ(s.best_epoch(), 5u);
  EXPECT_EQ(s.best(), 4.89995);
}

TEST(EarlyStopping, TiesKeepFirstEpoch) {
  EarlyStopping s(5, 0.0);
  s.observe(3.0);
  s.observe(2.0);
  s.observe(2.0);
  EXPECT_EQ(s.best_epoch(), 2u);
}

TEST(Train, PaddingDoesNotChangeTraining) {
  auto train = random_set(40, 5, false, 21);
  auto val = random_set(10, 5, false, 22);
  HeadConfig c;
  c.epochs = 6;
  c.batch_size = 16;
  auto unpadded = build_estimator(c, 5);
  c.pad_length = 100;
  auto padded = build_estimator(c, 5);
  const auto h1 = train_estimator(unpadded, train.samples, val.samples);
  const auto h2 = train_estimator(padded, train.samples, val.samples);
  ASSERT_EQ(h1.epochs.size(), h2.epochs.size());
  for (std::size_t i = 0; i < h1.epochs.size(); ++i) {
    EXPECT_EQ(h1.epochs[i].train_loss, h2.epochs[i].train_loss);
    EXPECT_EQ(h1.epochs[i].validation_mae, h2.epochs[i].validation_mae);
  }
  EXPECT_TRUE(same_parameters(unpadded, padded));
}

TEST(Train, DeterministicForSeed) {
  auto train = random_set(30, 4, false, 31);
  auto val = random_set(10, 4, false, 32);
  HeadConfig c;
  c.epochs = 5;
  c.output = HeadOutput::softmax;
  auto a = build_estimator(c, 4), b = build_estimator(c, 4);
  const auto ha = train_estimator(a, train.samples, val.samples);
  const auto hb = train_estimator(b, train.samples, val.samples);
  EXPECT_EQ(ha.to_json(), hb.to_json());
  EXPECT_TRUE(same_parameters(a, b));
}

TEST(Train, ClassificationMaeInBucketSpace) {
  auto train = random_set(30, 4, true, 41);
  HeadConfig c;
  c.mode = InputMode::pooled;
  c.output = HeadOutput::softmax;
  c.epochs = 200;
  c.patience = 200;
  c.batch_size = 8;
  auto m = build_estimator(c, 4);
  for (auto& s : train.samples) s.effort = s.effort + 0.4;  // same buckets, off-bucket values
  const auto h = train_estimator(m, train.samples, train.samples);
  EXPECT_LT(h.best_validation_mae, 0.5);
  double bucket_mae = 0;
  for (const auto& s : train.samples) bucket_mae += std::abs(bucketize(s.effort) - predict_class(m, *s.input).bucket);
  EXPECT_EQ(validation_mae(m, train.samples), bucket_mae / static_cast<double>(train.samples.size()));
}

TEST(Train, Errors) {
  auto set = random_set(4, 4, false, 1);
  auto m = build_estimator(HeadConfig{}, 4);
  const std::vector<Sample> none;
  EXPECT_THROW(train_estimator(m, none, set.samples), DataError);
  EXPECT_THROW(train_estimator(m, set.samples, none), DataError);
  auto wrong = random_set(4, 5, false, 1);
  EXPECT_THROW(train_estimator(m, wrong.samples, set.samples), ShapeError);
  EXPECT_THROW(train_estimator(m, set.samples, wrong.samples), ShapeError);
  auto bad = set.samples;
  bad[0].effort = 0.0;
  EXPECT_THROW(train_estimator(m, bad, set.samples), DataError);
}

TEST(Persistence, CheckpointRoundTrip) {
  auto set = random_set(20, 4, false, 51);
  HeadConfig c;
  c.epochs = 3;
  c.patience = 3;
  auto m = build_estimator(c, 4);
  m.source = {{"kind", "static"}, {"model", "w2v_se.ckpt"}, {"pooling", "sequence"}};
  m.provenance = {{"split_seed", 7}, {"fold", 2}};
  train_estimator(m, set.samples, set.samples);
  const auto path = fs::temp_directory_path() / "se3m_estimator_rt.ckpt";
  save_estimator(path, m);
  const auto back = load_estimator(path);
  EXPECT_EQ(back.config(), m.config());
  EXPECT_EQ(back.input_dim(), 4u);
  EXPECT_EQ(back.source, m.source);
  EXPECT_EQ(back.provenance, m.provenance);
  ASSERT_TRUE(back.history.has_value());
  EXPECT_EQ(back.history->to_json(), m.history->to_json());
  EXPECT_TRUE(same_parameters(back, m));
  for (const auto& r : set.reps) EXPECT_EQ(back.predict(r).raw, m.predict(r).raw);
  const std::string manifest = read_file(path.string() + ".manifest");
  EXPECT_NE(manifest.find("meta.head_config {"), std::string::npos);
  EXPECT_NE(manifest.find("meta.source {\"kind\":\"static\""), std::string::npos);
  EXPECT_NE(manifest.find("\"split_seed\":7"), std::string::npos);
  EXPECT_NE(manifest.find("meta.history {\"best_epoch\""), std::string::npos);
  fs::remove(path);
  fs::remove(path.string() + ".manifest");
}

TEST(Persistence, RejectsOtherCheckpoints) {
  Checkpoint ckpt;
  ckpt.sections["kind"] = "static";
  EXPECT_THROW(estimator_from_checkpoint(ckpt), DataError);
}
