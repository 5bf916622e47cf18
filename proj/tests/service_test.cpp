#include <gtest/gtest.h>

#include <filesystem>
#include <thread>

#include "json.hpp"
#include "se3m/config.hpp"
#include "se3m/service.hpp"
#include "synthetic.hpp"

namespace fs = std::filesystem;
using namespace se3m;

namespace {

Settings sample_settings() { return Settings({{"seed", "1"}, {"head.dense", "50,10"}, {"mode", "sequence"}, {"ratio", "0.5"}}); }

struct ServiceFixture : ::testing::Test {
  fs::path dir;

  void SetUp() override {
    dir = fs::temp_directory_path() / ("se3m_service_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  /// Static model plus a briefly trained estimator on top of it.
  fs::path make_estimator(HeadOutput output = HeadOutput::linear) {
    const auto corpus = synth::labeled_corpus(80, 3);
    StaticTrainConfig sc;
    sc.dim = 8;
    sc.epochs = 2;
    const auto wv = train_static(cleaned_texts(corpus), sc);
    const fs::path wv_path = dir / "static.ckpt";
    save_static_model(wv_path, wv);
    const StaticSource src(wv, wv_path.string(), false);

    HeadConfig h;
    h.lstm_hidden = 6;
    h.dense = {4};
    h.epochs = 2;
    h.patience = 2;
    h.output = output;
    std::vector<Representation> reps;
    for (const auto& r : corpus.records()) reps.push_back(src.represent(r.text, h.mode));
    std::vector<Sample> train, val;
    for (std::size_t i = 0; i < corpus.size(); ++i) (i % 5 ? train : val).push_back({&reps[i], corpus[i].effort});
    auto model = build_estimator<float>(h, src.dim());
    train_estimator(model, train, val);
    model.source = src.describe();
    const fs::path path = dir / "estimator.ckpt";
    save_estimator(path, model);
    return path;
  }
};

}  // namespace

TEST(SettingsTest, FileTextWithCommentsAndBlanks) {
  Settings s = sample_settings();
  s.merge_text("# header\n\nseed = 7   # trailing\n  mode=pooled\r\n", "test");
  EXPECT_EQ(s.u64("seed"), 7u);
  EXPECT_EQ(s.str("mode"), "pooled");
  EXPECT_EQ(s.sizes("head.dense"), (std::vector<std::size_t>{50, 10}));
  EXPECT_DOUBLE_EQ(s.real("ratio"), 0.5);
}

TEST(SettingsTest, LaterLayerWins) {
  Settings s = sample_settings();
  s.merge_text("seed = 7\n", "file");
  s.set_pair("seed=9");
  EXPECT_EQ(s.u64("seed"), 9u);
  s.set("seed", "11");
  EXPECT_EQ(s.u64("seed"), 11u);
}

TEST(SettingsTest, RejectsUnknownKeysAndMalformedValues) {
  Settings s = sample_settings();
  EXPECT_THROW(s.merge_text("colour = red\n", "file"), ConfigError);
  EXPECT_THROW(s.merge_text("seed 7\n", "file"), ConfigError);
  EXPECT_THROW(s.set_pair("novalue"), ConfigError);
  s.set("seed", "-3");
  EXPECT_THROW(s.u64("seed"), ConfigError);
  s.set("seed", "7x");
  EXPECT_THROW(s.u64("seed"), ConfigError);
  s.set("ratio", "");
  EXPECT_THROW(s.real("ratio"), ConfigError);
  s.set("head.dense", "50,,10");
  EXPECT_THROW(s.sizes("head.dense"), ConfigError);
  s.set("mode", "maybe");
  EXPECT_THROW(s.flag("mode"), ConfigError);
  EXPECT_THROW(s.merge_file("/nonexistent/se3m.conf"), ConfigError);
}

TEST(SettingsTest, DumpIsSortedAndRoundTrips) {
  Settings s = sample_settings();
  s.set("seed", "5");
  const std::string text = s.dump();
  EXPECT_EQ(text.rfind("head.dense = ", 0), 0u);
  Settings t = sample_settings();
  t.merge_text(text, "dump");
  EXPECT_EQ(t.values(), s.values());
}

TEST_F(ServiceFixture, EstimateStaysInRangeAndFlagsDegenerate) {
  const auto svc = EstimationService::load(make_estimator());
  const BucketScheme scheme;
  for (const char* text : {"admin wants login page", "user wants deploy release on build pipeline", "zzz qqq"}) {
    const auto r = svc.estimate(text);
    EXPECT_GE(r.effort, 1.0);
    EXPECT_LE(r.effort, 100.0);
    EXPECT_TRUE(scheme.index_of(r.bucket).has_value());
    EXPECT_EQ(r.model_id, "estimator.ckpt");
  }
  EXPECT_FALSE(svc.estimate("admin wants login page").degenerate);
  const auto empty = svc.estimate("");
  EXPECT_TRUE(empty.degenerate);
  EXPECT_GE(empty.effort, 1.0);
  EXPECT_LE(empty.effort, 100.0);
}

TEST_F(ServiceFixture, SoftmaxHeadReturnsBucketEffort) {
  const auto svc = EstimationService::load(make_estimator(HeadOutput::softmax));
  const auto r = svc.estimate("admin wants refund order on payment gateway");
  EXPECT_TRUE(BucketScheme{}.index_of(r.effort).has_value());
  EXPECT_EQ(r.effort, r.bucket);
}

TEST_F(ServiceFixture, HandleReturnsJsonOrClientError) {
  const auto svc = EstimationService::load(make_estimator());
  const auto [ok, body] = svc.handle(R"({"text": "add login form"})");
  EXPECT_EQ(ok, 200);
  const auto j = nlohmann::json::parse(body);
  for (const char* key : {"effort", "class", "model_id", "degenerate"}) EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_EQ(svc.handle("{not json").first, 400);
  EXPECT_EQ(svc.handle(R"({"txt": "a"})").first, 400);
  EXPECT_EQ(svc.handle(R"({"text": 5})").first, 400);
  EXPECT_EQ(svc.handle("[1,2]").first, 400);
  EXPECT_EQ(svc.handle(R"({"text": ""})").first, 200);
}

TEST_F(ServiceFixture, ConcurrentIdenticalRequestsAgree) {
  const auto svc = EstimationService::load(make_estimator());
  const std::string body = R"({"text": "manager wants rank results on search index"})";
  const auto expected = svc.handle(body);
  std::vector<std::pair<int, std::string>> got(8);
  std::vector<std::thread> threads;
  for (std::size_t t = 0; t < got.size(); ++t)
    threads.emplace_back([&, t] {
      for (int k = 0; k < 20; ++k) got[t] = svc.handle(body);
    });
  for (auto& th : threads) th.join();
  for (const auto& g : got) EXPECT_EQ(g, expected);
}

TEST_F(ServiceFixture, LoadFailures) {
  EXPECT_THROW(EstimationService::load(dir / "missing.ckpt"), Error);
  const fs::path est = make_estimator();
  fs::remove(dir / "static.ckpt");
  EXPECT_THROW(EstimationService::load(est), Error);
  StaticTrainConfig narrow;
  narrow.dim = 4;
  save_static_model(dir / "static.ckpt", train_static(cleaned_texts(synth::labeled_corpus(40, 1)), narrow));
  EXPECT_THROW(EstimationService::load(est), DataError);
}
