#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "httplib.h"
#include "json.hpp"
#include "se3m/checkpoint.hpp"
#include "se3m/config.hpp"
#include "se3m/contextual_embedding.hpp"
#include "se3m/corpus.hpp"
#include "se3m/estimator.hpp"
#include "se3m/eval.hpp"
#include "se3m/experiment.hpp"
#include "se3m/service.hpp"
#include "se3m/static_embedding.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace se3m;

namespace {

constexpr int kBundleFormatVersion = 1;

std::map<std::string, std::string> default_settings() {
  return {
      {"corpus", ""},
      {"pretrain_corpus", ""},
      {"finetune_corpus", ""},
      {"model_dir", "models"},
      {"out", "runs"},
      {"runs", ""},
      {"experiment", "E1"},
      {"kfold", "10"},
      {"by_project", "false"},
      {"seed", "1"},
      {"mode", "sequence"},
      {"bind", "127.0.0.1:8080"},
      {"model", ""},
      {"static.mode", "cbow"},
      {"static.dim", "100"},
      {"static.window", "5"},
      {"static.negatives", "5"},
      {"static.epochs", "5"},
      {"static.lr", "0.05"},
      {"static.min_count", "1"},
      {"static.finetune_epochs", "5"},
      {"static.max_words", "100"},
      {"static.seed", ""},
      {"ctx.layers", "4"},
      {"ctx.hidden", "128"},
      {"ctx.heads", "4"},
      {"ctx.ff", "512"},
      {"ctx.max_seq_len", "100"},
      {"ctx.vocab_size", "8000"},
      {"ctx.dropout", "0.1"},
      {"ctx.epochs", "1"},
      {"ctx.batch_size", "32"},
      {"ctx.lr", "0.001"},
      {"ctx.mask_rate", "0.15"},
      {"ctx.dupe_factor", "1"},
      {"ctx.finetune_epochs", "1"},
      {"ctx.pooling_layer", ""},
      {"ctx.seed", ""},
      {"head.lstm_hidden", "50"},
      {"head.dense", "50,10"},
      {"head.activation", "relu"},
      {"head.epochs", "20"},
      {"head.batch_size", "128"},
      {"head.patience", "5"},
      {"head.epsilon", "0.0001"},
      {"head.lr", "0.002"},
      {"head.pad_length", "0"},
      {"head.validation_fraction", "0.1"},
      {"head.seed", ""},
  };
}

// ---------------------------------------------------------------------------
// Settings to typed configs

std::uint64_t stage_seed(const Settings& s, const std::string& key) {
  return s.has(key) ? s.u64(key) : s.u64("seed");
}

fs::path resolve_data_path(const std::string& p) {
  const fs::path path(p);
  if (path.is_absolute() || fs::exists(path)) return path;
  if (const char* root = std::getenv("SE3M_DATA_DIR"); root && *root)
    if (fs::exists(fs::path(root) / path)) return fs::path(root) / path;
  return path;
}

fs::path corpus_path(const Settings& s) {
  if (s.has("corpus")) {
    const fs::path p = resolve_data_path(s.str("corpus"));
    if (!fs::exists(p)) throw ConfigError("corpus " + p.string() + " does not exist");
    return p;
  }
  if (const char* root = std::getenv("SE3M_DATA_DIR"); root && *root)
    for (const char* name : {"corpus.jsonl", "corpus.csv"})
      if (fs::exists(fs::path(root) / name)) return fs::path(root) / name;
  throw ConfigError("no labeled corpus: pass --corpus or set SE3M_DATA_DIR");
}

fs::path existing_path(const Settings& s, const std::string& key) {
  const fs::path p = resolve_data_path(s.str(key));
  if (!fs::exists(p)) throw ConfigError(key + " " + p.string() + " does not exist");
  return p;
}

LabeledCorpus load_corpus(const Settings& s) {
  const fs::path p = corpus_path(s);
  IngestResult in = load_labeled(p);
  if (!in.rejections.empty())
    std::cerr << p.string() << ": " << in.rejections.size() << " records rejected (see `se3m ingest`)\n";
  if (in.corpus.size() == 0) throw DataError(p.string() + ": no usable records");
  return std::move(in.corpus);
}

UnlabeledCorpus texts_of(const LabeledCorpus& corpus) {
  UnlabeledCorpus out;
  for (const auto& r : corpus.records()) out.documents.push_back(r.text);
  return out;
}

/// Unlabeled corpus under `key`, or the labeled corpus's texts when unset.
UnlabeledCorpus unlabeled_or_corpus(const Settings& s, const std::string& key) {
  if (s.has(key)) {
    UnlabeledCorpus c = load_unlabeled(existing_path(s, key));
    if (c.empty()) throw DataError(s.str(key) + ": no documents");
    return c;
  }
  std::cerr << key << " not set; using the labeled corpus texts\n";
  return texts_of(load_corpus(s));
}

StaticTrainConfig static_config(const Settings& s) {
  StaticTrainConfig c;
  c.mode = parse_static_mode(s.str("static.mode"));
  c.dim = s.size("static.dim");
  c.window = s.size("static.window");
  c.negatives = s.size("static.negatives");
  c.epochs = s.size("static.epochs");
  c.lr = s.real("static.lr");
  c.min_count = s.u64("static.min_count");
  c.seed = stage_seed(s, "static.seed");
  c.validate();
  return c;
}

TransformerConfig transformer_config(const Settings& s) {
  TransformerConfig c;
  c.layers = s.size("ctx.layers");
  c.hidden = s.size("ctx.hidden");
  c.heads = s.size("ctx.heads");
  c.ff = s.size("ctx.ff");
  c.max_seq_len = s.size("ctx.max_seq_len");
  c.dropout = s.real("ctx.dropout");
  c.seed = stage_seed(s, "ctx.seed");
  return c;
}

PretrainConfig pretrain_config(const Settings& s, const std::string& epochs_key) {
  PretrainConfig c;
  c.epochs = s.size(epochs_key);
  c.batch_size = s.size("ctx.batch_size");
  c.lr = s.real("ctx.lr");
  c.seed = stage_seed(s, "ctx.seed");
  c.validate();
  return c;
}

PretrainDataConfig pretrain_data_config(const Settings& s) {
  PretrainDataConfig c;
  c.max_seq_len = s.size("ctx.max_seq_len");
  c.mask_rate = s.real("ctx.mask_rate");
  c.dupe_factor = s.size("ctx.dupe_factor");
  c.seed = RngStream(stage_seed(s, "ctx.seed")).derive("data").next_u64();
  c.validate();
  return c;
}

HeadConfig head_config(const Settings& s) {
  HeadConfig h;
  h.mode = parse_input_mode(s.str("mode"));
  h.lstm_hidden = s.size("head.lstm_hidden");
  h.dense = s.sizes("head.dense");
  h.dense_activation = parse_activation(s.str("head.activation"));
  h.epochs = s.size("head.epochs");
  h.batch_size = s.size("head.batch_size");
  h.patience = s.size("head.patience");
  h.epsilon = s.real("head.epsilon");
  h.lr = s.real("head.lr");
  h.pad_length = s.size("head.pad_length");
  h.seed = stage_seed(s, "head.seed");
  h.output = experiment_info(s.str("experiment")).output;
  h.validate();
  return h;
}

ExperimentConfig experiment_config(const Settings& s) {
  ExperimentConfig c;
  c.id = s.str("experiment");
  c.head = head_config(s);
  c.validation_fraction = s.real("head.validation_fraction");
  c.seed = s.u64("seed");
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Model files

fs::path model_dir(const Settings& s) { return s.str("model_dir"); }

fs::path embedding_file(const Settings& s, const ExperimentInfo& info) {
  const char* name = info.contextual ? (info.finetuned ? "ctx_se.ckpt" : "ctx_base.ckpt")
                                     : (info.finetuned ? "static_se.ckpt" : "static_base.ckpt");
  return model_dir(s) / name;
}

fs::path estimator_file(const Settings& s) {
  if (s.has("model")) return s.str("model");
  return model_dir(s) / ("estimator_" + s.str("experiment") + ".ckpt");
}

std::optional<std::size_t> pooling_layer(const Settings& s) {
  if (!s.has("ctx.pooling_layer")) return std::nullopt;
  return s.size("ctx.pooling_layer");
}

/// The embedding model an experiment needs, identified by `id` in provenance.
LoadedSource experiment_source(const Settings& s, const ExperimentInfo& info, bool absolute_id = false) {
  const fs::path path = embedding_file(s, info);
  if (!fs::exists(path)) {
    const char* cmd = info.contextual ? (info.finetuned ? "finetune-ctx" : "pretrain-ctx")
                                      : (info.finetuned ? "finetune-static" : "pretrain-static");
    throw ConfigError(info.id + " needs " + path.string() + "; run `se3m " + cmd + "` first");
  }
  SourceOptions opts;
  opts.finetuned = info.finetuned;
  opts.max_words = s.size("static.max_words");
  opts.pooling_layer = pooling_layer(s);
  return open_source(absolute_id ? fs::absolute(path).lexically_normal() : path, opts);
}

std::string checksum_of(const fs::path& p) { return hex64(fnv1a64(read_file(p))); }

// ---------------------------------------------------------------------------
// Subcommands

int cmd_ingest(const Settings& s) {
  const fs::path in = corpus_path(s);
  const IngestResult r = load_labeled(in);
  const fs::path out = s.str("out");
  fs::create_directories(out);
  save_labeled_jsonl(out / "corpus.jsonl", r.corpus);
  std::string rej = "line,id,reason\n";
  for (const auto& x : r.rejections) rej += csv_row({std::to_string(x.line), x.id, x.reason});
  write_file(out / "rejections.csv", rej);
  std::cout << "ingested " << r.corpus.size() << " records (" << r.rejections.size() << " rejected, "
            << r.corpus.degenerate_count() << " degenerate) -> " << (out / "corpus.jsonl").string() << "\n";
  return 0;
}

int cmd_stats(const Settings& s) {
  const LabeledCorpus corpus = load_corpus(s);
  const CorpusStats st = corpus_stats(corpus);
  const fs::path out = fs::path(s.str("out")) / "stats";
  write_stats(out, st);
  std::cout << "stats: " << st.records << " records, words/text " << fixed2(st.words_mean) << " ±"
            << fixed2(st.words_std) << ", effort " << fixed2(st.effort_mean) << " ±" << fixed2(st.effort_std) << " -> "
            << out.string() << "\n";
  return 0;
}

int cmd_pretrain_static(const Settings& s) {
  const UnlabeledCorpus docs = unlabeled_or_corpus(s, "pretrain_corpus");
  const StaticTrainConfig cfg = static_config(s);
  const StaticEmbeddingModel m = train_static(docs, cfg);
  const fs::path out = model_dir(s) / "static_base.ckpt";
  save_static_model(out, m);
  std::cout << "static " << to_string(cfg.mode) << " d=" << m.dim << ", vocabulary " << m.vocab.size() << " -> "
            << out.string() << "\n";
  return 0;
}

int cmd_finetune_static(const Settings& s) {
  const fs::path base_path = model_dir(s) / "static_base.ckpt";
  if (!fs::exists(base_path)) throw ConfigError(base_path.string() + " missing; run `se3m pretrain-static` first");
  const StaticEmbeddingModel base = load_static_model(base_path);
  const UnlabeledCorpus docs = unlabeled_or_corpus(s, "finetune_corpus");
  const StaticEmbeddingModel m = finetune_static(base, docs, s.size("static.finetune_epochs"));
  const fs::path out = model_dir(s) / "static_se.ckpt";
  save_static_model(out, m);
  std::cout << "static fine-tuned, vocabulary " << base.vocab.size() << " -> " << m.vocab.size() << " -> "
            << out.string() << "\n";
  return 0;
}

void print_pretrain_epoch(const PretrainEpoch& e) {
  std::cerr << "epoch " << e.epoch << ": mlm " << fixed2(e.mlm_loss) << ", nsp " << fixed2(e.nsp_loss) << " ("
            << e.steps << " steps)\n";
}

int cmd_pretrain_ctx(const Settings& s) {
  const UnlabeledCorpus docs = unlabeled_or_corpus(s, "pretrain_corpus");
  TransformerConfig tc = transformer_config(s);
  ContextualEmbedder emb = make_contextual_embedder(build_wordpiece_vocab(docs, s.size("ctx.vocab_size")), tc);
  const auto examples = create_pretraining_data(docs, emb.vocab, pretrain_data_config(s));
  const auto hist = pretrain(emb.model, std::span<const PretrainExample>(examples), pretrain_config(s, "ctx.epochs"),
                             print_pretrain_epoch);
  const fs::path out = model_dir(s) / "ctx_base.ckpt";
  save_contextual_model(out, emb);
  std::cout << "encoder L=" << tc.layers << " H=" << tc.hidden << ", vocabulary " << emb.vocab.size() << ", "
            << examples.size() << " examples, " << hist.steps << " steps -> " << out.string() << "\n";
  return 0;
}

int cmd_finetune_ctx(const Settings& s) {
  const fs::path base_path = model_dir(s) / "ctx_base.ckpt";
  if (!fs::exists(base_path)) throw ConfigError(base_path.string() + " missing; run `se3m pretrain-ctx` first");
  ContextualEmbedder emb = load_contextual_model(base_path);
  const UnlabeledCorpus docs = unlabeled_or_corpus(s, "finetune_corpus");
  const auto hist = finetune_lm(emb.model, emb.vocab, docs, pretrain_config(s, "ctx.finetune_epochs"),
                                pretrain_data_config(s));
  for (const auto& e : hist.epochs) print_pretrain_epoch(e);
  const fs::path out = model_dir(s) / "ctx_se.ckpt";
  save_contextual_model(out, emb);
  std::cout << "encoder fine-tuned, " << hist.steps << " steps -> " << out.string() << "\n";
  return 0;
}

/// Pooled sentence vectors, one row per record.
void write_embeddings(const fs::path& path, const LabeledCorpus& corpus, const RepresentationSource& src) {
  std::string out = "id,project,effort,degenerate";
  for (std::size_t j = 0; j < src.dim(); ++j) out += ",e" + std::to_string(j);
  out += "\n";
  for (const auto& rec : corpus.records()) {
    const Representation r = src.represent(rec.text, InputMode::pooled);
    std::vector<std::string> cells{rec.id, rec.project_id, format_number(rec.effort),
                                   (r.degenerate || rec.degenerate) ? "1" : "0"};
    for (float v : r.values) cells.push_back(format_number(v));
    out += csv_row(cells);
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file(path, out);
}

int cmd_embed(const Settings& s) {
  const LabeledCorpus corpus = load_corpus(s);
  const ExperimentInfo& info = experiment_info(s.str("experiment"));
  const LoadedSource src = experiment_source(s, info);
  const fs::path out = fs::path(s.str("out")) / ("embeddings_" + info.id + ".csv");
  write_embeddings(out, corpus, *src.source);
  std::cout << "embedded " << corpus.size() << " records with " << embedding_file(s, info).string() << " (d="
            << src.source->dim() << ") -> " << out.string() << "\n";
  return 0;
}

int cmd_train(const Settings& s) {
  const LabeledCorpus corpus = load_corpus(s);
  const ExperimentConfig ec = experiment_config(s);
  const ExperimentInfo& info = experiment_info(ec.id);
  const LoadedSource src = experiment_source(s, info, true);

  std::vector<Representation> reps;
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    reps.push_back(src.source->represent(corpus[i].text, ec.head.mode));
    if (!reps.back().degenerate && !corpus[i].degenerate) usable.push_back(i);
  }
  const auto [train_idx, val_idx] =
      carve_validation(usable, ec.validation_fraction, RngStream(ec.seed).derive("validation"));
  std::vector<Sample> train, val;
  for (auto i : train_idx) train.push_back({&reps[i], corpus[i].effort});
  for (auto i : val_idx) val.push_back({&reps[i], corpus[i].effort});

  auto model = build_estimator<float>(ec.head, src.source->dim());
  const TrainHistory hist = train_estimator(model, train, val, [](const EpochRecord& e) {
    std::cerr << "epoch " << e.epoch << ": train loss " << fixed2(e.train_loss) << ", validation mae "
              << fixed2(e.validation_mae) << "\n";
  });
  model.source = src.source->describe();
  model.provenance = {{"experiment", ec.id},
                      {"seed", ec.seed},
                      {"validation_fraction", ec.validation_fraction},
                      {"records", corpus.size()},
                      {"train", train.size()},
                      {"validation", val.size()},
                      {"corpus_checksum", checksum_of(corpus_path(s))}};
  const fs::path out = estimator_file(s);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_estimator(out, model);
  std::cout << ec.id << " " << info.model << ": best epoch " << hist.best_epoch << ", validation mae "
            << fixed2(hist.best_validation_mae) << " (" << hist.stop_reason << ") -> " << out.string() << "\n";
  return 0;
}

std::string safe_name(std::string label) {
  for (char& c : label)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_' && c != '.') c = '_';
  return label.empty() ? "_" : label;
}

/// One subdirectory per held-out project with its fold metrics and predictions.
void write_project_reports(const fs::path& dir, const EvalReport& rep) {
  for (const auto& f : rep.folds) {
    const fs::path pd = dir / "projects" / safe_name(f.label);
    fs::create_directories(pd);
    const std::vector<std::string> header{"project", "test", "mae", "mdae", "mse", "rmse"};
    detail::write_table_pair(pd, "metrics", header, 1, [&f](std::size_t, const detail::Cell& cell) {
      return std::vector<std::string>{f.label, std::to_string(f.test_size), cell(f.metrics.mae), cell(f.metrics.mdae),
                                      cell(f.metrics.mse), cell(f.metrics.rmse)};
    });
    std::string preds = "id,actual,predicted,actual_bucket,predicted_bucket,degenerate\n";
    for (const auto& p : rep.predictions)
      if (p.round == f.round)
        preds += csv_row({p.id, format_number(p.actual), format_number(p.predicted), format_number(p.actual_bucket),
                          format_number(p.predicted_bucket), p.degenerate ? "1" : "0"});
    write_file(pd / "predictions.csv", preds);
  }
}

int cmd_evaluate(const Settings& s) {
  const LabeledCorpus corpus = load_corpus(s);
  const ExperimentConfig ec = experiment_config(s);
  const ExperimentInfo& info = experiment_info(ec.id);
  const bool by_project = s.flag("by_project");
  const std::size_t k = s.size("kfold");
  const SplitPlan plan = by_project ? leave_one_project_out(corpus) : kfold_split(corpus, k, ec.seed);
  const LoadedSource src = experiment_source(s, info);

  const EvalReport rep = run_experiment(ec, corpus, plan, src.source.get(), [](const FoldResult& f) {
    std::cerr << "round " << f.round + 1 << " (" << f.label << "): mae " << fixed2(f.metrics.mae) << ", best epoch "
              << f.best_epoch << "\n";
  });
  const fs::path dir =
      fs::path(s.str("out")) / (ec.id + (by_project ? std::string("-by-project") : "-kfold" + std::to_string(k)));
  fs::remove_all(dir);
  write_report(dir, rep);
  emit_tables(std::vector<EvalReport>{rep}, TableMode::per_project, dir);
  if (by_project) {
    emit_tables(std::vector<EvalReport>{rep}, TableMode::new_project, dir);
    write_project_reports(dir, rep);
  }
  write_file(dir / "config.txt", s.dump());
  const auto& a = rep.aggregate;
  std::cout << ec.id << " " << info.model << " " << rep.split_kind << " (" << rep.folds.size() << " rounds): mae "
            << fixed2(a.mean.mae) << " ±" << fixed2(a.std.mae) << ", mse " << fixed2(a.mean.mse) << " ±"
            << fixed2(a.std.mse) << ", mdae " << fixed2(a.mean.mdae) << " ±" << fixed2(a.std.mdae) << " -> "
            << dir.string() << "\n";
  return 0;
}

int cmd_predict(const Settings& s, const std::vector<std::string>& texts, const std::string& input) {
  const EstimationService svc = EstimationService::load(estimator_file(s));
  std::vector<std::string> lines = texts;
  if (!input.empty()) {
    std::ifstream in(input, std::ios::binary);
    if (!in) throw ConfigError("cannot open input " + input);
    for (std::string line; std::getline(in, line);) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.find_first_not_of(" \t") != std::string::npos) lines.push_back(line);
    }
  }
  if (lines.empty()) throw ConfigError("predict: pass --text or --input");
  for (const auto& t : lines) {
    json j = svc.estimate(t).to_json();
    j["text"] = t;
    std::cout << j.dump() << "\n";
  }
  return 0;
}

int cmd_serve(const Settings& s) {
  const EstimationService svc = EstimationService::load(estimator_file(s));
  const std::string bind = s.str("bind");
  const auto colon = bind.rfind(':');
  if (colon == std::string::npos) throw ConfigError("bind expects HOST:PORT, got '" + bind + "'");
  const std::string host = bind.substr(0, colon);
  int port = 0;
  try {
    port = std::stoi(bind.substr(colon + 1));
  } catch (const std::exception&) {
    throw ConfigError("bind expects HOST:PORT, got '" + bind + "'");
  }
  httplib::Server server;
  server.Post("/estimate", [&svc](const httplib::Request& req, httplib::Response& res) {
    const auto [status, body] = svc.handle(req.body);
    res.status = status;
    res.set_content(body, "application/json; charset=utf-8");
  });
  if (port == 0) {
    port = server.bind_to_any_port(host);
    if (port < 0) throw Error("cannot bind " + host);
  } else if (!server.bind_to_port(host, port)) {
    throw Error("cannot bind " + bind);
  }
  std::cout << "serving " << svc.model_id() << " on http://" << host << ":" << port << "/estimate" << std::endl;
  server.listen_after_bind();
  return 0;
}

void collect_seeds(const json& j, std::set<std::uint64_t>& out) {
  if (j.is_object()) {
    for (const auto& [key, v] : j.items()) {
      if ((key == "seed" || key.ends_with("_seed")) && v.is_number_unsigned()) out.insert(v.get<std::uint64_t>());
      if (key.ends_with("_seeds") && v.is_array())
        for (const auto& x : v)
          if (x.is_number_unsigned()) out.insert(x.get<std::uint64_t>());
      collect_seeds(v, out);
    }
  } else if (j.is_array()) {
    for (const auto& v : j) collect_seeds(v, out);
  }
}

std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

int cmd_report(const Settings& s) {
  const fs::path runs = s.has("runs") ? fs::path(s.str("runs")) : fs::path(s.str("out"));
  if (!fs::is_directory(runs)) throw DataError("run directory " + runs.string() + " does not exist");
  std::set<fs::path> run_dirs;
  for (const auto& e : fs::directory_iterator(runs))
    if (e.is_directory() && fs::exists(e.path() / "report.json")) run_dirs.insert(e.path());
  if (run_dirs.empty()) throw DataError("run directory " + runs.string() + " holds no evaluation output");

  const fs::path bundle = runs / "bundle";
  fs::remove_all(bundle);
  fs::create_directories(bundle / "runs");
  std::vector<EvalReport> kfold, by_project;
  json manifest;
  manifest["format_version"] = kBundleFormatVersion;
  manifest["created"] = utc_timestamp();
  json run_list = json::array();
  json configs = json::object();
  std::set<std::uint64_t> seeds;
  for (const auto& dir : run_dirs) {
    const std::string name = dir.filename().string();
    EvalReport rep = read_report(dir);
    fs::copy(dir, bundle / "runs" / name, fs::copy_options::recursive);
    if (rep.confusion) {
      fs::copy_file(dir / "confusion_counts.csv", bundle / ("confusion_" + name + "_counts.csv"));
      fs::copy_file(dir / "confusion_normalized.csv", bundle / ("confusion_" + name + "_normalized.csv"));
    }
    collect_seeds(rep.provenance, seeds);
    run_list.push_back({{"name", name},
                        {"experiment", rep.experiment_id},
                        {"model", rep.model},
                        {"split", rep.split_kind},
                        {"provenance", rep.provenance}});
    if (fs::exists(dir / "config.txt")) configs[name] = read_file(dir / "config.txt");
    (rep.split_kind == "kfold" ? kfold : by_project).push_back(std::move(rep));
  }
  if (!kfold.empty()) emit_tables(kfold, TableMode::comparison, bundle);
  if (!by_project.empty()) emit_tables(by_project, TableMode::new_project, bundle);

  manifest["runs"] = run_list;
  manifest["seeds"] = json(std::vector<std::uint64_t>(seeds.begin(), seeds.end()));
  manifest["configs"] = configs;
  manifest["settings"] = json(s.values());

  json checksums = json::object();
  std::optional<LabeledCorpus> corpus;
  try {
    const fs::path cp = corpus_path(s);
    checksums["corpus"] = {{"path", cp.string()}, {"fnv1a64", checksum_of(cp)}};
    corpus = load_corpus(s);
  } catch (const ConfigError&) {
    std::cerr << "no corpus configured; embedding export skipped\n";
  }
  json models = json::object();
  if (fs::is_directory(model_dir(s))) {
    std::set<fs::path> files;
    for (const auto& e : fs::directory_iterator(model_dir(s)))
      if (e.path().extension() == ".ckpt") files.insert(e.path());
    for (const auto& f : files) models[f.filename().string()] = checksum_of(f);
  }
  checksums["models"] = models;
  manifest["checksums"] = checksums;

  json exports = json::array();
  if (corpus) {
    std::set<std::string> done;
    for (const auto& group : {kfold, by_project})
      for (const auto& rep : group) {
        const ExperimentInfo& info = experiment_info(rep.experiment_id);
        const fs::path file = embedding_file(s, info);
        if (!fs::exists(file) || !done.insert(file.string()).second) continue;
        const LoadedSource src = experiment_source(s, info);
        const std::string out = "embeddings_" + file.stem().string() + ".csv";
        write_embeddings(bundle / out, *corpus, *src.source);
        exports.push_back({{"file", out}, {"model", file.string()}, {"rows", corpus->size()}});
      }
  }
  manifest["embedding_exports"] = exports;
  write_file(bundle / "manifest.json", manifest.dump(2) + "\n");
  std::cout << "bundled " << run_dirs.size() << " runs (" << kfold.size() << " k-fold, " << by_project.size()
            << " by-project), " << exports.size() << " embedding exports -> " << bundle.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Story-point effort estimation from requirement text"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::vector<std::string> set_pairs, texts;
  std::string corpus, pretrain_corpus, finetune_corpus, models, out, experiment, mode, bind, model, input, runs;
  std::size_t kfold = 0;
  std::uint64_t seed = 0;
  bool by_project = false;

  app.add_option("--config", config_path, "key = value settings file");
  app.add_option("--set", set_pairs, "override a setting, key=value (repeatable)");
  std::map<std::string, CLI::Option*> flags;
  flags["corpus"] = app.add_option("--corpus", corpus, "labeled corpus (.csv or .jsonl)");
  flags["pretrain_corpus"] = app.add_option("--pretrain-corpus", pretrain_corpus, "general-domain documents");
  flags["finetune_corpus"] = app.add_option("--finetune-corpus", finetune_corpus, "domain documents for fine-tuning");
  flags["model_dir"] = app.add_option("--model-dir", models, "directory of model checkpoints");
  flags["out"] = app.add_option("--out", out, "output directory");
  flags["runs"] = app.add_option("--runs", runs, "directory of evaluation runs (report)");
  flags["experiment"] = app.add_option("--experiment", experiment, "E1..E5");
  flags["kfold"] = app.add_option("--kfold", kfold, "number of folds");
  flags["by_project"] = app.add_flag("--by-project", by_project, "leave one project out");
  flags["seed"] = app.add_option("--seed", seed, "seed for splits and training");
  flags["mode"] = app.add_option("--mode", mode, "sequence or pooled");
  flags["bind"] = app.add_option("--bind", bind, "HOST:PORT for serve");
  flags["model"] = app.add_option("--model", model, "estimator checkpoint (predict, serve)");
  app.add_option("--text", texts, "requirement text to estimate (repeatable)");
  app.add_option("--input", input, "file with one requirement per line");

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"ingest", "validate a labeled corpus and write corpus.jsonl + rejections.csv"},
      {"stats", "word-count and effort histograms"},
      {"pretrain-static", "train base word vectors"},
      {"finetune-static", "continue word-vector training on the domain corpus"},
      {"pretrain-ctx", "pretrain the encoder (masked LM + next sentence)"},
      {"finetune-ctx", "continue encoder pretraining on the domain corpus"},
      {"embed", "export pooled sentence vectors"},
      {"train", "fit an estimator on the whole corpus"},
      {"evaluate", "cross-validate an experiment"},
      {"predict", "estimate effort for texts"},
      {"serve", "HTTP estimate endpoint"},
      {"report", "bundle evaluation runs"},
  };
  for (const auto& [name, help] : commands) app.add_subcommand(name, help);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 2;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    Settings settings(default_settings());
    if (!config_path.empty()) settings.merge_file(config_path);
    for (const auto& p : set_pairs) settings.set_pair(p);
    for (const auto& [key, opt] : flags)
      if (opt->count() > 0) settings.set(key, key == "by_project" ? "true" : opt->as<std::string>());
    experiment_info(settings.str("experiment"));

    if (cmd == "ingest") return cmd_ingest(settings);
    if (cmd == "stats") return cmd_stats(settings);
    if (cmd == "pretrain-static") return cmd_pretrain_static(settings);
    if (cmd == "finetune-static") return cmd_finetune_static(settings);
    if (cmd == "pretrain-ctx") return cmd_pretrain_ctx(settings);
    if (cmd == "finetune-ctx") return cmd_finetune_ctx(settings);
    if (cmd == "embed") return cmd_embed(settings);
    if (cmd == "train") return cmd_train(settings);
    if (cmd == "evaluate") return cmd_evaluate(settings);
    if (cmd == "predict") return cmd_predict(settings, texts, input);
    if (cmd == "serve") return cmd_serve(settings);
    if (cmd == "report") return cmd_report(settings);
  } catch (const ConfigError& e) {
    std::cerr << "se3m " << cmd << ": configuration error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "se3m " << cmd << ": " << e.what() << "\n";
    return 1;
  }
  return 2;
}
