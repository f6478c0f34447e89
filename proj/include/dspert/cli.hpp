#pragma once

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dspert/analysis.hpp"
#include "dspert/checkpoint.hpp"
#include "dspert/config.hpp"
#include "dspert/data.hpp"
#include "dspert/metrics.hpp"
#include "dspert/model.hpp"
#include "dspert/training.hpp"

namespace dspert::cli {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Files and corpora

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline void write_file(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << content;
}

inline DataFormat guess_format(const fs::path& path) {
  const auto ext = path.extension().string();
  return ext == ".jsonl" || ext == ".json" ? DataFormat::JsonSpans : DataFormat::Bio;
}

inline std::vector<Sentence> read_corpus(const fs::path& path, std::optional<DataFormat> format) {
  const std::string text = read_file(path);
  try {
    if (format.value_or(guess_format(path)) == DataFormat::Bio) return parse_bio(text);
    return parse_json_spans(text);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

inline std::string serialize_corpus(const std::vector<Sentence>& s, DataFormat format) {
  return format == DataFormat::Bio ? serialize_bio(s) : serialize_json_spans(s);
}

struct Corpus {
  std::vector<Sentence> train;
  std::vector<Sentence> dev;
  std::vector<Sentence> test;
};

/// Train/dev/test splits of one synthetic corpus, generated in one pass.
inline Corpus synthetic_corpus(const DataConfig& d, std::size_t test_size = 0) {
  SynthConfig sc = d.synth;
  sc.n_sentences = d.synth_train + d.synth_dev + test_size;
  auto all = gen_synthetic(sc);
  Corpus c;
  auto at = [&](std::size_t i) { return all.begin() + static_cast<std::ptrdiff_t>(i); };
  c.train.assign(at(0), at(d.synth_train));
  c.dev.assign(at(d.synth_train), at(d.synth_train + d.synth_dev));
  c.test.assign(at(d.synth_train + d.synth_dev), all.end());
  return c;
}

inline Corpus load_corpus(const DataConfig& d) {
  if (d.synthetic()) return synthetic_corpus(d);
  Corpus c;
  c.train = read_corpus(d.train, d.format);
  c.dev = read_corpus(d.dev, d.format);
  if (!d.test.empty()) c.test = read_corpus(d.test, d.format);
  return c;
}

/// Fills the data-dependent model sizes.
inline ModelConfig sized_model_config(ModelConfig m, const Vocab& vocab, const Corpus& c) {
  m.vocab_size = vocab.token_count();
  m.num_classes = vocab.type_count();
  for (const auto* split : {&c.train, &c.dev, &c.test})
    for (const auto& s : *split) m.max_len = std::max(m.max_len, s.tokens.size());
  return m;
}

/// Independent stream for model initialisation, distinct from the training
/// stream seeded with the same run seed.
inline std::uint64_t init_seed(std::uint64_t seed) { return seed ^ 0x6a09e667f3bcc909ULL; }

// ---------------------------------------------------------------------------
// Reports

inline json prf_json(const PRF& p) {
  return {{"precision", p.precision}, {"recall", p.recall}, {"f1", p.f1},
          {"tp", p.tp},               {"fp", p.fp},         {"fn", p.fn}};
}

struct SplitReport {
  PRF overall;
  std::map<std::size_t, PRF> by_length;
  std::map<NestednessTag, PRF> by_nestedness;
};

inline SplitReport split_report(const Model& model, const Vocab& vocab,
                                const std::vector<Sentence>& data) {
  const auto preds = predict_corpus(model, vocab, data);
  const auto golds = gold_corpus(data);
  return {micro_prf(preds, golds), f1_by_length(preds, golds, 10), f1_by_nestedness(preds, golds)};
}

inline json split_json(const SplitReport& r) {
  json by_length = json::object(), by_nest = json::object();
  for (const auto& [w, p] : r.by_length) by_length[std::to_string(w)] = prf_json(p);
  for (const auto& [t, p] : r.by_nestedness) by_nest[std::string(to_string(t))] = prf_json(p);
  return {{"micro", prf_json(r.overall)}, {"by_length", by_length}, {"by_nestedness", by_nest}};
}

inline std::string length_csv(const std::map<std::size_t, PRF>& buckets) {
  std::ostringstream os;
  os << "width,precision,recall,f1,tp,fp,fn\n";
  for (const auto& [w, p] : buckets)
    os << w << ',' << p.precision << ',' << p.recall << ',' << p.f1 << ',' << p.tp << ',' << p.fp
       << ',' << p.fn << '\n';
  return os.str();
}

inline std::string nestedness_csv(const std::map<NestednessTag, PRF>& buckets) {
  std::ostringstream os;
  os << "bucket,precision,recall,f1,tp,fp,fn\n";
  for (const auto& [t, p] : buckets)
    os << to_string(t) << ',' << p.precision << ',' << p.recall << ',' << p.f1 << ',' << p.tp
       << ',' << p.fp << ',' << p.fn << '\n';
  return os.str();
}

inline json run_json(const RunConfig& c, std::uint64_t seed) {
  return {{"model", to_json(c.model)}, {"train", to_json(c.train)}, {"seed", seed}};
}

// ---------------------------------------------------------------------------
// Training run

struct RunOutcome {
  std::size_t best_epoch = 0;
  SplitReport dev;
  std::optional<SplitReport> test;
};

/// Trains one model and writes history.jsonl, metrics.json, best.ckpt and
/// the bucket CSVs into out_dir.
inline RunOutcome train_run(RunConfig cfg, std::uint64_t seed, const Corpus& corpus,
                            const fs::path& out_dir, std::ostream* log) {
  cfg.train.seed = seed;
  const Vocab vocab = Vocab::build(corpus.train);
  cfg.model = sized_model_config(cfg.model, vocab, corpus);
  cfg.validate();
  fs::create_directories(out_dir);

  Rng init(init_seed(seed));
  const Model initial = Model::create(cfg.model, init);

  std::ofstream history(out_dir / "history.jsonl");
  if (!history) throw std::runtime_error("cannot write " + (out_dir / "history.jsonl").string());
  auto on_epoch = [&](const EpochRecord& r) {
    json line = {{"epoch", r.epoch}, {"loss", r.loss}, {"dev", prf_json(r.dev)}};
    if (r.train) line["train"] = prf_json(*r.train);
    history << line.dump() << '\n';
    history.flush();
    if (log) {
      *log << "epoch " << r.epoch << "  loss " << r.loss << "  dev f1 " << r.dev.f1;
      if (r.train) *log << "  train f1 " << r.train->f1;
      *log << '\n';
    }
  };
  const TrainResult result = train(initial, vocab, corpus.train, corpus.dev, cfg.train, on_epoch);

  RunOutcome out;
  out.best_epoch = result.best_epoch;
  out.dev = split_report(result.best, vocab, corpus.dev);
  json metrics = {{"best_epoch", result.best_epoch},
                  {"steps", result.steps},
                  {"dev", split_json(out.dev)},
                  {"run", run_json(cfg, seed)}};
  if (!corpus.test.empty()) {
    out.test = split_report(result.best, vocab, corpus.test);
    metrics["test"] = split_json(*out.test);
  }
  write_file(out_dir / "metrics.json", metrics.dump(2) + "\n");
  write_file(out_dir / "f1_by_length.csv", length_csv(out.dev.by_length));
  write_file(out_dir / "f1_by_nestedness.csv", nestedness_csv(out.dev.by_nestedness));
  save_checkpoint(out_dir / "best.ckpt", result.best, vocab, run_json(cfg, seed), init);
  return out;
}

// ---------------------------------------------------------------------------
// Ablation grid

enum class AblationAxis { Depth, Aggregation, WeightSharing, Head };

inline AblationAxis parse_axis(const std::string& name) {
  if (name == "depth") return AblationAxis::Depth;
  if (name == "aggregation") return AblationAxis::Aggregation;
  if (name == "weight-sharing") return AblationAxis::WeightSharing;
  if (name == "head") return AblationAxis::Head;
  throw ConfigError("unknown ablation axis '" + name +
                    "' (expected depth, aggregation, weight-sharing or head)");
}

struct AblationCell {
  std::string value;
  RunConfig config;
};

/// One config per grid value, validated before anything runs.
inline std::vector<AblationCell> ablation_cells(const RunConfig& base, AblationAxis axis,
                                                const std::vector<std::size_t>& depths) {
  std::vector<AblationCell> cells;
  switch (axis) {
    case AblationAxis::Depth: {
      std::vector<std::size_t> grid = depths;
      if (grid.empty())
        for (std::size_t l = 0; l <= base.model.num_layers; ++l) grid.push_back(l);
      for (std::size_t l : grid) {
        RunConfig c = base;
        c.model.span_depth = l;
        cells.push_back({std::to_string(l), c});
      }
      break;
    }
    case AblationAxis::Aggregation:
      for (auto a : {Aggregation::Max, Aggregation::Mean, Aggregation::MulAttention,
                     Aggregation::AddAttention}) {
        RunConfig c = base;
        c.model.aggregation = a;
        cells.push_back({std::string(to_string(a)), c});
      }
      break;
    case AblationAxis::WeightSharing:
      for (bool share : {false, true}) {
        RunConfig c = base;
        c.model.share_weights = share;
        cells.push_back({share ? "shared" : "separate", c});
      }
      break;
    case AblationAxis::Head:
      for (auto h : {HeadKind::DSpERT, HeadKind::ShallowMax, HeadKind::ShallowMean,
                     HeadKind::ShallowMulAttention, HeadKind::ShallowAddAttention,
                     HeadKind::Biaffine, HeadKind::BiaffineNoProduction}) {
        RunConfig c = base;
        c.model.head = h;
        if (h != HeadKind::DSpERT) {
          c.model.span_depth = 0;
          c.model.share_weights = false;
          c.model.per_width_span_params = false;
        }
        if (is_biaffine(h)) c.model.use_bilstm = false;
        cells.push_back({std::string(to_string(h)), c});
      }
      break;
  }
  for (const auto& cell : cells) {
    try {
      cell.config.model.validate();
    } catch (const ConfigError& e) {
      throw ConfigError("grid value " + cell.value + ": " + e.what());
    }
  }
  return cells;
}

inline std::size_t thread_cap() {
  const char* env = std::getenv("DSPERT_THREADS");
  if (!env || !*env) return 1;
  try {
    std::size_t pos = 0;
    const long v = std::stol(env, &pos);
    if (pos == std::string(env).size() && v >= 1) return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
  }
  throw ConfigError(std::string("DSPERT_THREADS must be a positive integer, got '") + env + "'");
}

struct CellResult {
  std::string value;
  std::uint64_t seed = 0;
  RunOutcome outcome;
};

inline double bucket_f1(const SplitReport& r, NestednessTag tag) {
  auto it = r.by_nestedness.find(tag);
  return it == r.by_nestedness.end() ? std::nan("") : it->second.f1;
}

/// Mean and sample standard deviation, skipping NaNs.
inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
  double sum = 0.0;
  std::size_t n = 0;
  for (double x : xs)
    if (!std::isnan(x)) sum += x, ++n;
  if (n == 0) return {std::nan(""), std::nan("")};
  const double mean = sum / static_cast<double>(n);
  double ss = 0.0;
  for (double x : xs)
    if (!std::isnan(x)) ss += (x - mean) * (x - mean);
  return {mean, n > 1 ? std::sqrt(ss / static_cast<double>(n - 1)) : 0.0};
}

/// Every (value, seed) cell trains from scratch with its own seed and writes
/// into out/<value>/seed-<seed>. Returns results in grid order.
inline std::vector<CellResult> run_ablation(const std::vector<AblationCell>& cells,
                                            const std::vector<std::uint64_t>& seeds,
                                            const Corpus& corpus, const fs::path& out,
                                            std::size_t threads, std::ostream* log) {
  std::vector<CellResult> results(cells.size() * seeds.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  std::exception_ptr failure;
  auto worker = [&] {
    for (std::size_t job = next++; job < results.size(); job = next++) {
      const auto& cell = cells[job / seeds.size()];
      const std::uint64_t seed = seeds[job % seeds.size()];
      try {
        const fs::path dir = out / cell.value / ("seed-" + std::to_string(seed));
        results[job] = {cell.value, seed, train_run(cell.config, seed, corpus, dir, nullptr)};
        if (log) {
          std::lock_guard lock(log_mutex);
          *log << cell.value << " seed " << seed << ": dev f1 " << results[job].outcome.dev.overall.f1
               << '\n';
        }
      } catch (...) {
        std::lock_guard lock(log_mutex);
        if (!failure) failure = std::current_exception();
        next = results.size();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(threads, results.size()));
  std::vector<std::thread> pool;
  for (std::size_t i = 1; i < n; ++i) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return results;
}

inline void write_ablation_reports(const std::string& axis, const std::vector<AblationCell>& cells,
                                   const std::vector<CellResult>& results, const fs::path& out) {
  std::ostringstream runs;
  runs << "axis,value,seed,best_epoch,dev_precision,dev_recall,dev_f1,flat_f1,nested_f1,covering_f1,"
          "both_f1\n";
  for (const auto& r : results) {
    const auto& d = r.outcome.dev;
    runs << axis << ',' << r.value << ',' << r.seed << ',' << r.outcome.best_epoch << ','
         << d.overall.precision << ',' << d.overall.recall << ',' << d.overall.f1 << ','
         << bucket_f1(d, NestednessTag::Flat) << ',' << bucket_f1(d, NestednessTag::Nested) << ','
         << bucket_f1(d, NestednessTag::Covering) << ',' << bucket_f1(d, NestednessTag::Both)
         << '\n';
  }
  write_file(out / "ablation_runs.csv", runs.str());

  std::ostringstream summary;
  summary << "axis,value,runs,mean_f1,std_f1,mean_flat_f1,mean_nested_f1,mean_covering_f1,"
             "mean_both_f1,std_both_f1\n";
  json grid = json::array();
  for (const auto& cell : cells) {
    std::vector<double> f1, flat, nested, covering, both;
    for (const auto& r : results) {
      if (r.value != cell.value) continue;
      f1.push_back(r.outcome.dev.overall.f1);
      flat.push_back(bucket_f1(r.outcome.dev, NestednessTag::Flat));
      nested.push_back(bucket_f1(r.outcome.dev, NestednessTag::Nested));
      covering.push_back(bucket_f1(r.outcome.dev, NestednessTag::Covering));
      both.push_back(bucket_f1(r.outcome.dev, NestednessTag::Both));
    }
    const auto [m, s] = mean_std(f1);
    const auto [mb, sb] = mean_std(both);
    summary << axis << ',' << cell.value << ',' << f1.size() << ',' << m << ',' << s << ','
            << mean_std(flat).first << ',' << mean_std(nested).first << ','
            << mean_std(covering).first << ',' << mb << ',' << sb << '\n';
    auto num = [](double x) { return std::isnan(x) ? json(nullptr) : json(x); };
    grid.push_back({{"value", cell.value},
                    {"runs", f1.size()},
                    {"mean_f1", num(m)},
                    {"std_f1", num(s)},
                    {"mean_both_f1", num(mb)},
                    {"std_both_f1", num(sb)},
                    {"mean_flat_f1", num(mean_std(flat).first)},
                    {"mean_nested_f1", num(mean_std(nested).first)},
                    {"mean_covering_f1", num(mean_std(covering).first)}});
  }
  write_file(out / "ablation_summary.csv", summary.str());
  write_file(out / "ablation.json", json{{"axis", axis}, {"grid", grid}}.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Analysis

struct AnalysisOutput {
  PrelogitReport report;
  std::optional<PcaResult> pca;
  std::vector<LabeledVector> points;  // entities then sampled negatives, PCA input order
};

inline AnalysisOutput analyze_model(const Model& model, const Vocab& vocab,
                                    const std::vector<Sentence>& data, std::uint64_t seed) {
  const PrelogitSet set = collect_prelogits(model, vocab, data);
  AnalysisOutput out;
  PrelogitOptions opt;
  opt.seed = seed;
  out.report = prelogit_report(set.entities, set.negatives, model.classifier().templates, opt);

  out.points = set.entities;
  std::vector<std::size_t> order(set.negatives.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  order.resize(std::min(order.size(), std::max<std::size_t>(set.entities.size(), 1)));
  std::sort(order.begin(), order.end());
  for (std::size_t i : order) out.points.push_back(set.negatives[i]);
  if (out.points.size() >= 3) {
    std::vector<std::vector<double>> vecs;
    for (const auto& p : out.points) vecs.push_back(p.values);
    out.pca = pca_project(vecs, 2);
  }
  return out;
}

inline json report_json(const PrelogitReport& r, const Vocab& vocab) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  json norms = json::object();
  for (std::size_t k = 0; k < r.template_norms.size(); ++k)
    norms[vocab.type_name(k)] = r.template_norms[k];
  return {{"entity_count", r.entity_count},
          {"negative_count", r.negative_count},
          {"entity_l2", r.mean_l2},
          {"cosine_within_class", opt(r.within_class_cosine)},
          {"cosine_pos_pos", opt(r.between_class_cosine)},
          {"cosine_pos_neg", opt(r.pos_neg_cosine)},
          {"template_l2", norms},
          {"template_mean_l2", r.template_mean_norm},
          {"template_abs_cosine", opt(r.template_abs_cosine)},
          {"template_abs_cosine_pos_pos", opt(r.template_abs_cosine_pos_pos)},
          {"template_abs_cosine_pos_neg", opt(r.template_abs_cosine_pos_neg)},
          {"pairs_sampled", r.pairs_sampled}};
}

// ---------------------------------------------------------------------------
// Subcommands

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string data;
  std::string checkpoint;
  std::optional<std::string> format;
  std::string depths;
  std::string seeds;
  std::string axis;
  std::size_t train_size = 50;
  std::size_t dev_size = 20;
  std::size_t test_size = 0;
};

inline RunConfig config_or_default(const Options& o) {
  return o.config.empty() ? RunConfig{} : load_run_config(o.config);
}

inline std::optional<DataFormat> format_flag(const Options& o) {
  if (!o.format) return std::nullopt;
  return parse_data_format(*o.format);
}

inline fs::path out_dir_or(const Options& o, const fs::path& fallback) {
  return o.out.empty() ? fallback : fs::path(o.out);
}

inline int cmd_train(const Options& o) {
  if (o.out.empty()) throw ConfigError("train needs --out");
  RunConfig cfg = config_or_default(o);
  if (!o.data.empty()) cfg.data.train = o.data;
  if (auto f = format_flag(o)) cfg.data.format = *f;
  const std::uint64_t seed = o.seed.value_or(cfg.seeds.front());
  const Corpus corpus = load_corpus(cfg.data);
  const RunOutcome r = train_run(cfg, seed, corpus, o.out, &std::cerr);
  std::cout << "best epoch " << r.best_epoch << "  dev P " << r.dev.overall.precision << "  R "
            << r.dev.overall.recall << "  F1 " << r.dev.overall.f1 << '\n';
  if (r.test) std::cout << "test F1 " << r.test->overall.f1 << '\n';
  return 0;
}

inline int cmd_eval(const Options& o) {
  if (o.checkpoint.empty() || o.data.empty()) throw ConfigError("eval needs --checkpoint and --data");
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const auto data = read_corpus(o.data, format_flag(o));
  const SplitReport r = split_report(ck.model, ck.vocab, data);
  const fs::path out = out_dir_or(o, fs::path(o.checkpoint).parent_path());
  if (!out.empty()) fs::create_directories(out);
  write_file(out / "eval_metrics.json",
             json{{"data", o.data}, {"checkpoint", o.checkpoint}, {"metrics", split_json(r)}}.dump(2) +
                 "\n");
  write_file(out / "eval_f1_by_length.csv", length_csv(r.by_length));
  write_file(out / "eval_f1_by_nestedness.csv", nestedness_csv(r.by_nestedness));
  std::cout << "P " << r.overall.precision << "  R " << r.overall.recall << "  F1 " << r.overall.f1
            << '\n';
  return 0;
}

inline int cmd_predict(const Options& o) {
  if (o.checkpoint.empty() || o.data.empty())
    throw ConfigError("predict needs --checkpoint and --data");
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  auto data = read_corpus(o.data, format_flag(o));
  for (auto& s : data) s.gold = predict_sentence(ck.model, ck.vocab, s);
  const std::string text = serialize_json_spans(data);
  if (o.out.empty()) {
    std::cout << text;
  } else {
    write_file(fs::path(o.out) / "predictions.jsonl", text);
  }
  return 0;
}

inline int cmd_ablate(const Options& o) {
  if (o.out.empty()) throw ConfigError("ablate needs --out");
  const AblationAxis axis = parse_axis(o.axis);
  RunConfig cfg = config_or_default(o);
  if (!o.data.empty()) cfg.data.train = o.data;
  if (auto f = format_flag(o)) cfg.data.format = *f;
  const auto depths = parse_size_list(o.depths, "--depths");
  if (!depths.empty() && axis != AblationAxis::Depth)
    throw ConfigError("--depths only applies to the depth axis");
  std::vector<std::uint64_t> seeds = o.seeds.empty() ? cfg.seeds : parse_seed_list(o.seeds);
  if (o.seed && o.seeds.empty()) seeds = {*o.seed};
  if (seeds.empty()) throw ConfigError("no seeds given");
  const auto cells = ablation_cells(cfg, axis, depths);
  const Corpus corpus = load_corpus(cfg.data);
  const auto results = run_ablation(cells, seeds, corpus, o.out, thread_cap(), &std::cerr);
  write_ablation_reports(o.axis, cells, results, o.out);
  std::cout << read_file(fs::path(o.out) / "ablation_summary.csv");
  return 0;
}

inline int cmd_analyze(const Options& o) {
  if (o.checkpoint.empty() || o.data.empty())
    throw ConfigError("analyze needs --checkpoint and --data");
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const auto data = read_corpus(o.data, format_flag(o));
  const AnalysisOutput a = analyze_model(ck.model, ck.vocab, data, o.seed.value_or(1));
  const fs::path out = out_dir_or(o, fs::path(o.checkpoint).parent_path());
  if (!out.empty()) fs::create_directories(out);

  json report = report_json(a.report, ck.vocab);
  report["pair_cap"] = PrelogitOptions{}.pair_cap;
  report["negative_ratio"] = PrelogitOptions{}.negative_ratio;
  if (a.pca) {
    report["pca_explained_ratio"] = a.pca->explained_ratio;
    report["pca_rank_deficient"] = a.pca->rank_deficient;
  }
  write_file(out / "prelogit_report.json", report.dump(2) + "\n");

  std::ostringstream pts, pca;
  pts.precision(17);
  pts << "label";
  if (!a.points.empty())
    for (std::size_t j = 0; j < a.points.front().values.size(); ++j) pts << ",z" << j;
  pts << '\n';
  pca << "label,pc1,pc2\n";
  for (std::size_t i = 0; i < a.points.size(); ++i) {
    const auto& p = a.points[i];
    const std::string& label = ck.vocab.type_name(p.type_index);
    pts << label;
    for (double v : p.values) pts << ',' << v;
    pts << '\n';
    if (a.pca) {
      pca << label;
      for (std::size_t c = 0; c < 2; ++c)
        pca << ',' << (c < a.pca->projections[i].size() ? a.pca->projections[i][c] : 0.0);
      pca << '\n';
    }
  }
  write_file(out / "prelogits.csv", pts.str());
  write_file(out / "pca.csv", pca.str());
  std::cout << report.dump(2) << '\n';
  return 0;
}

inline int cmd_gen_synth(const Options& o) {
  if (o.out.empty()) throw ConfigError("gen-synth needs --out");
  RunConfig cfg = config_or_default(o);
  DataConfig d = cfg.data;
  if (o.seed) d.synth.seed = *o.seed;
  d.synth_train = o.train_size;
  d.synth_dev = o.dev_size;
  const DataFormat format = format_flag(o).value_or(DataFormat::JsonSpans);
  const Corpus c = synthetic_corpus(d, o.test_size);
  const std::string ext = format == DataFormat::Bio ? ".bio" : ".jsonl";
  const fs::path out(o.out);
  write_file(out / ("train" + ext), serialize_corpus(c.train, format));
  write_file(out / ("dev" + ext), serialize_corpus(c.dev, format));
  if (!c.test.empty()) write_file(out / ("test" + ext), serialize_corpus(c.test, format));
  std::cout << "wrote " << c.train.size() << " train, " << c.dev.size() << " dev, "
            << c.test.size() << " test sentences to " << out.string() << '\n';
  return 0;
}

/// Entry point; returns the process exit code.
inline int run(int argc, const char* const* argv) {
  CLI::App app{"Span-level NER with deep span representations"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "run configuration file")->check(CLI::ExistingFile);
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--seed", o.seed, "random seed");
    sub->add_option("--format", o.format, "corpus format")->check(CLI::IsMember({"bio", "jsonl"}));
  };

  auto* train_cmd = app.add_subcommand("train", "train a model and keep the best dev checkpoint");
  add_common(train_cmd);
  train_cmd->add_option("--data", o.data, "training corpus (overrides data.train)");

  auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint on a corpus");
  add_common(eval_cmd);
  eval_cmd->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("--data", o.data, "evaluation corpus")->required();

  auto* predict_cmd = app.add_subcommand("predict", "write predicted entities as JSONL");
  add_common(predict_cmd);
  predict_cmd->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required();
  predict_cmd->add_option("--data", o.data, "input corpus")->required();

  auto* ablate_cmd = app.add_subcommand("ablate", "train a grid of variants over several seeds");
  add_common(ablate_cmd);
  ablate_cmd->add_option("axis", o.axis, "depth, aggregation, weight-sharing or head")
      ->required()
      ->check(CLI::IsMember({"depth", "aggregation", "weight-sharing", "head"}));
  ablate_cmd->add_option("--data", o.data, "training corpus (overrides data.train)");
  ablate_cmd->add_option("--depths", o.depths, "comma-separated span depths");
  ablate_cmd->add_option("--seeds", o.seeds, "comma-separated seeds");

  auto* analyze_cmd = app.add_subcommand("analyze", "pre-logit statistics and PCA points");
  add_common(analyze_cmd);
  analyze_cmd->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required();
  analyze_cmd->add_option("--data", o.data, "corpus to analyse")->required();

  auto* synth_cmd = app.add_subcommand("gen-synth", "write a synthetic nested corpus");
  add_common(synth_cmd);
  synth_cmd->add_option("--train-size", o.train_size, "training sentences");
  synth_cmd->add_option("--dev-size", o.dev_size, "development sentences");
  synth_cmd->add_option("--test-size", o.test_size, "test sentences");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*train_cmd) return cmd_train(o);
    if (*eval_cmd) return cmd_eval(o);
    if (*predict_cmd) return cmd_predict(o);
    if (*ablate_cmd) return cmd_ablate(o);
    if (*analyze_cmd) return cmd_analyze(o);
    if (*synth_cmd) return cmd_gen_synth(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}

}  // namespace dspert::cli
