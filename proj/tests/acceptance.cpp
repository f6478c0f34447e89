// One PASS/FAIL line per acceptance criterion. Exit status is the number of
// failures.
#include <Eigen/Dense>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "dspert/cli.hpp"
#include "dspert/dspert.hpp"
#include "oracles.hpp"

using namespace dspert;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

int failures = 0;

void report(int id, const std::string& name, bool ok, const std::string& detail) {
  std::cout << (ok ? "PASS" : "FAIL") << "  criterion " << id << "  " << name << "  (" << detail << ")"
            << std::endl;
  if (!ok) ++failures;
}

// Runs a criterion body; an exception counts as failure.
void criterion(int id, const std::string& name, const std::function<std::pair<bool, std::string>()>& body) {
  try {
    const auto [ok, detail] = body();
    report(id, name, ok, detail);
  } catch (const std::exception& e) {
    report(id, name, false, std::string("threw: ") + e.what());
  }
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double x) {
  std::ostringstream os;
  os.precision(4);
  os << x;
  return os.str();
}

Tensor random_tensor(Shape shape, Rng& rng, double sd = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.normal(0.0, sd);
  return Tensor(std::move(shape), std::move(v), true);
}

void spread(Linear& l, Rng& rng) {
  l.weight = random_tensor(l.weight.shape(), rng, 0.5);
  l.bias = random_tensor(l.bias.shape(), rng, 0.1);
}

AttentionParams spread_attention(std::size_t d, std::size_t heads, Rng& rng) {
  AttentionParams p = AttentionParams::create(d, heads, rng);
  for (Linear* l : {&p.query, &p.key, &p.value, &p.output}) spread(*l, rng);
  return p;
}

BlockParams spread_block(std::size_t d, std::size_t heads, Rng& rng) {
  BlockParams b = BlockParams::create(d, heads, 2 * d, 0.0, rng);
  b.attention = spread_attention(d, heads, rng);
  spread(b.ffn_in, rng);
  spread(b.ffn_out, rng);
  return b;
}

AggregatorParams spread_aggregator(Aggregation kind, std::size_t d, Rng& rng) {
  AggregatorParams p = AggregatorParams::create(kind, d, rng);
  if (p.proj.defined()) p.proj = random_tensor(p.proj.shape(), rng, 0.7);
  if (p.u.defined()) p.u = random_tensor(p.u.shape(), rng, 0.7);
  if (p.v.defined()) p.v = random_tensor(p.v.shape(), rng, 0.7);
  return p;
}

constexpr Aggregation kKinds[] = {Aggregation::Max, Aggregation::Mean, Aggregation::MulAttention,
                                  Aggregation::AddAttention};

struct RandomEncoder {
  std::vector<BlockParams> blocks;
  EncoderTrace trace;
};

RandomEncoder random_encoder(std::size_t t, std::size_t d, std::size_t layers, Rng& rng) {
  RandomEncoder e;
  for (std::size_t l = 0; l < layers; ++l) e.blocks.push_back(spread_block(d, 2, rng));
  e.trace = encode(random_tensor({t, d}, rng), e.blocks);
  return e;
}

std::set<Entity> random_entities(Rng& rng, std::size_t t, std::size_t max_n) {
  std::set<Entity> out;
  for (std::size_t n = rng.below(max_n + 1); n > 0; --n) {
    const std::size_t s = rng.below(t);
    const std::size_t e = s + 1 + rng.below(std::min<std::size_t>(t - s, 13));
    out.insert({s, e, rng.bernoulli(0.5) ? "PER" : "ORG"});
  }
  return out;
}

using Split = std::vector<std::set<Entity>>;

std::pair<Split, Split> random_split(Rng& rng) {
  Split preds, golds;
  for (std::size_t s = 1 + rng.below(4); s > 0; --s) {
    const std::size_t t = 3 + rng.below(14);
    auto gold = random_entities(rng, t, 4);
    std::set<Entity> pred;
    for (const auto& g : gold)
      if (rng.bernoulli(0.6)) pred.insert(g);
    for (const auto& e : random_entities(rng, t, 2)) pred.insert(e);
    preds.push_back(pred);
    golds.push_back(gold);
  }
  return {preds, golds};
}

bool same_counts(const PRF& r, const oracle::Counts& c) {
  return r.tp == c.tp && r.fp == c.fp && r.fn == c.fn;
}

RunConfig sample_config() { return load_run_config(DSPERT_SAMPLE_CONFIG); }

std::string slurp(const fs::path& p) { return cli::read_file(p); }

int run_cli(const std::string& args) {
  const std::string cmd = std::string(DSPERT_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  return std::system(cmd.c_str());
}

bool same_report(const PrelogitReport& a, const PrelogitReport& b) {
  return a.entity_count == b.entity_count && a.negative_count == b.negative_count &&
         a.mean_l2 == b.mean_l2 && a.within_class_cosine == b.within_class_cosine &&
         a.between_class_cosine == b.between_class_cosine && a.pos_neg_cosine == b.pos_neg_cosine &&
         a.template_norms == b.template_norms && a.template_abs_cosine == b.template_abs_cosine &&
         a.template_abs_cosine_pos_pos == b.template_abs_cosine_pos_pos &&
         a.template_abs_cosine_pos_neg == b.template_abs_cosine_pos_neg;
}

}  // namespace

int main() {
  const fs::path out = fs::current_path() / "acceptance_out";
  fs::remove_all(out);
  fs::create_directories(out);

  criterion(1, "full-model gradient check", [] {
    const auto t0 = Clock::now();
    ModelConfig c;
    c.vocab_size = 12;
    c.max_len = 10;
    c.num_classes = 3;
    c.num_layers = 2;
    c.hidden_size = 8;
    c.num_heads = 2;
    c.max_span_size = 3;
    c.span_depth = 2;
    c.aggregation = Aggregation::AddAttention;
    c.use_bilstm = true;
    c.lstm_hidden_size = 4;
    c.width_embedding_size = 3;
    c.ffn_hidden_size = 6;
    Rng rng(8);
    const Model m = Model::create(c, rng);
    for (auto& p : m.parameters())
      for (auto& v : p.tensor.mutable_data()) v = rng.normal(0.0, 0.3);
    const std::vector<std::size_t> ids{1, 4, 7, 2, 9, 3};
    const auto grid = build_target_grid({{0, 2, 1}, {1, 2, 2}, {3, 6, 1}}, 6, 3, 3, 0.1, 1);
    const auto checks = finite_diff_check_params(
        [&] { return loss_from_logits(m.forward(ids).logits, grid); }, m.named_parameters());
    double worst = 0.0;
    std::set<std::string> groups;
    for (const auto& ch : checks) {
      worst = std::max(worst, ch.norm_relative_error);
      groups.insert(ch.name.substr(0, ch.name.find('.')));
    }
    const double secs = seconds_since(t0);
    const bool ok = worst < 1e-3 && groups.size() == 5 && secs < 60.0;
    return std::pair{ok, std::to_string(checks.size()) + " tensors in " + std::to_string(groups.size()) +
                             " groups, worst relative error " + fmt(worst) + ", " + fmt(secs) + " s"};
  });

  criterion(2, "width-1 spans are the top token layer", [] {
    Rng rng(2);
    std::size_t mismatches = 0;
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t t = 1 + rng.below(8), d = 4;
      const auto enc = random_encoder(t, d, 2, rng);
      const SpanEncoderConfig cfg{4, rng.below(3), kKinds[trial % 4], false, false};
      const auto params = SpanEncoderParams::create(cfg, d, 2, 8, 0.0, rng);
      const auto spans = encode_spans(enc.trace, cfg, params, enc.blocks);
      for (std::size_t i = 0; i < t; ++i) {
        const Tensor r = span_representation(enc.trace, spans, i, i + 1);
        for (std::size_t j = 0; j < d; ++j) mismatches += r[j] != enc.trace.top().at(i, j);
      }
    }
    return std::pair{mismatches == 0, "100 inputs, " + std::to_string(mismatches) + " differing values"};
  });

  criterion(3, "span depth 0 equals shallow aggregation", [] {
    Rng rng(3);
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t t = 2 + rng.below(7), d = 4;
      const Aggregation kind = kKinds[trial % 4];
      const auto enc = random_encoder(t, d, 2, rng);
      const SpanEncoderConfig cfg{4, 0, kind, false, false};
      auto params = SpanEncoderParams::create(cfg, d, 2, 8, 0.0, rng);
      params.aggregator = spread_aggregator(kind, d, rng);
      const auto spans = encode_spans(enc.trace, cfg, params, enc.blocks);
      for (std::size_t k = 2; k <= std::min<std::size_t>(4, t); ++k)
        for (std::size_t i = 0; i + k <= t; ++i) {
          const Tensor a = span_representation(enc.trace, spans, i, i + k);
          const Tensor b = shallow_aggregate(enc.trace.top(), i, i + k, kind, params.aggregator);
          for (std::size_t j = 0; j < d; ++j) worst = std::max(worst, std::abs(a[j] - b[j]));
        }
    }
    return std::pair{worst <= 1e-12, "50 inputs, max abs diff " + fmt(worst)};
  });

  criterion(4, "batched attention matches the per-row loop", [] {
    Rng rng(4);
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t heads = 1 + rng.below(3);
      const std::size_t d = heads * (1 + rng.below(4));
      const AttentionParams p = spread_attention(d, heads, rng);
      const std::size_t m = 1 + rng.below(6), n = 1 + rng.below(7);
      const Tensor q = random_tensor({m, d}, rng), kv = random_tensor({n, d}, rng);
      worst = std::max(worst, oracle::max_abs_diff(oracle::attention(p, oracle::to_mat(q), oracle::to_mat(kv)),
                                                   multi_head_attention(p, q, kv, kv)));
      const std::size_t t = 2 + rng.below(6), k = 1 + rng.below(t);
      const Tensor sq = random_tensor({t - k + 1, d}, rng), ctx = random_tensor({t, d}, rng);
      worst = std::max(worst, oracle::max_abs_diff(
                                  oracle::windowed_attention(p, oracle::to_mat(sq), oracle::to_mat(ctx), k),
                                  windowed_attention(p, sq, ctx, k)));
    }
    return std::pair{worst <= 1e-10, "50 shapes, token and span paths, max abs diff " + fmt(worst)};
  });

  criterion(5, "metric, nestedness and target-grid oracles", [] {
    constexpr int kCases = 1000;
    Rng rng(5);
    std::size_t bad_micro = 0, bad_length = 0, bad_nest = 0, bad_tag = 0, bad_grid = 0;
    for (int trial = 0; trial < kCases; ++trial) {
      const auto [preds, golds] = random_split(rng);
      bad_micro += !same_counts(micro_prf(preds, golds), oracle::micro(preds, golds));
      const std::size_t merge = trial % 2 ? 10 : 0;
      for (const auto& [w, r] : f1_by_length(preds, golds, merge)) {
        bad_length += !same_counts(r, oracle::counts(preds, golds, [&](std::size_t, const Entity& e) {
          return (merge && e.width() > merge ? merge + 1 : e.width()) == w;
        }));
      }
      for (const auto& [tag, r] : f1_by_nestedness(preds, golds)) {
        bad_nest += !same_counts(r, oracle::counts(preds, golds, [&](std::size_t s, const Entity& e) {
          return oracle::nestedness(e.start, e.end, golds[s]) == tag;
        }));
      }

      const std::size_t t = 2 + rng.below(9);
      const auto gold = random_entities(rng, t, 4);
      const std::size_t s = rng.below(t), e = s + 1 + rng.below(t - s);
      bad_tag += nestedness_tag(s, e, gold) != oracle::nestedness(s, e, gold);

      const std::size_t len = 1 + rng.below(9), k = 2 + rng.below(4), classes = 2 + rng.below(3);
      std::vector<LabeledSpan> spans;
      std::set<std::pair<std::size_t, std::size_t>> used;
      for (std::size_t i = rng.below(5); i > 0; --i) {
        const std::size_t a = rng.below(len), b = a + 1 + rng.below(len - a);
        if (used.insert({a, b}).second) spans.push_back({a, b, 1 + rng.below(classes - 1)});
      }
      const double eps = trial % 3 ? 0.05 * static_cast<double>(trial % 7) : 0.0;
      const std::size_t dist = 1 + trial % 2;
      WarningSink sink;
      const auto grid = build_target_grid(spans, len, k, classes, eps, dist, &sink);
      const auto expected = oracle::target_grid(spans, len, k, classes, eps, dist);
      bool grid_ok = grid.spans.size() == expected.size();
      for (std::size_t n = 0; grid_ok && n < grid.spans.size(); ++n) {
        const auto& row = expected.at({grid.spans[n].start, grid.spans[n].end});
        for (std::size_t c = 0; c < classes; ++c) grid_ok = grid_ok && std::abs(grid.row(n)[c] - row[c]) <= 1e-9;
      }
      bad_grid += !grid_ok;
    }
    const std::size_t bad = bad_micro + bad_length + bad_nest + bad_tag + bad_grid;
    return std::pair{bad == 0, std::to_string(kCases) + " cases each; mismatches micro " +
                                   std::to_string(bad_micro) + ", length " + std::to_string(bad_length) +
                                   ", nestedness " + std::to_string(bad_nest) + ", tag " +
                                   std::to_string(bad_tag) + ", grid " + std::to_string(bad_grid)};
  });

  const fs::path overfit_dir = out / "overfit";
  criterion(6, "overfit the 50/20 synthetic corpus", [&] {
    const auto t0 = Clock::now();
    RunConfig cfg = sample_config();
    cfg.train.eval_train = true;
    const auto corpus = cli::synthetic_corpus(cfg.data);
    const bool shape = corpus.train.size() == 50 && corpus.dev.size() == 20 && cfg.data.synth.seed == 7 &&
                       cfg.data.synth.nest_rate == 0.5 && cfg.model.num_layers == 2 &&
                       cfg.model.hidden_size == 32 && cfg.model.num_heads == 2 && cfg.model.max_span_size == 6 &&
                       cfg.train.epochs <= 200;
    const auto run = cli::train_run(cfg, cfg.seeds.front(), corpus, overfit_dir, nullptr);
    std::size_t first_perfect = 0;
    std::ifstream history(overfit_dir / "history.jsonl");
    for (std::string line; std::getline(history, line);) {
      const auto j = nlohmann::json::parse(line);
      if (!first_perfect && j.contains("train") && j["train"]["f1"].get<double>() == 1.0)
        first_perfect = j["epoch"].get<std::size_t>();
    }
    const double secs = seconds_since(t0);
    const double dev = run.dev.overall.f1;
    const bool ok = shape && first_perfect > 0 && dev >= 0.90 && secs < 600.0;
    return std::pair{ok, "train F1 1.0 first at epoch " + std::to_string(first_perfect) + ", dev F1 " +
                             fmt(dev) + " (best epoch " + std::to_string(run.best_epoch) + "), " + fmt(secs) +
                             " s"};
  });

  criterion(7, "depth grid over 5 seeds", [&] {
    RunConfig cfg = sample_config();
    cfg.train.epochs = 100;
    cfg.train.eval_train = false;
    const auto corpus = cli::synthetic_corpus(cfg.data);
    const auto cells = cli::ablation_cells(cfg, cli::AblationAxis::Depth, {0, 1, 2});
    const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    const fs::path dir = out / "depth_grid";
    const auto results = cli::run_ablation(cells, seeds, corpus, dir, cli::thread_cap(), nullptr);
    cli::write_ablation_reports("depth", cells, results, dir);
    std::map<std::string, std::vector<double>> overall, both;
    for (const auto& r : results) {
      overall[r.value].push_back(r.outcome.dev.overall.f1);
      both[r.value].push_back(cli::bucket_f1(r.outcome.dev, NestednessTag::Both));
    }
    const double f0 = cli::mean_std(overall["0"]).first, f1 = cli::mean_std(overall["1"]).first,
                 f2 = cli::mean_std(overall["2"]).first;
    const double b0 = cli::mean_std(both["0"]).first, b2 = cli::mean_std(both["2"]).first;
    const bool ok = f2 >= f0 - 0.01 && !std::isnan(b0) && !std::isnan(b2) && b2 >= b0;
    return std::pair{ok, "mean dev F1 by depth 0/1/2: " + fmt(f0) + " / " + fmt(f1) + " / " + fmt(f2) +
                             "; Both bucket depth 0 vs 2: " + fmt(b0) + " vs " + fmt(b2) + "; report in " +
                             dir.string()};
  });

  criterion(8, "pre-logit statistics and PCA on the overfit model", [&] {
    const Checkpoint ck = load_checkpoint(overfit_dir / "best.ckpt");
    RunConfig cfg = sample_config();
    const auto corpus = cli::synthetic_corpus(cfg.data);
    std::vector<Sentence> all = corpus.train;
    all.insert(all.end(), corpus.dev.begin(), corpus.dev.end());
    const auto a = cli::analyze_model(ck.model, ck.vocab, all, 7);
    const auto b = cli::analyze_model(ck.model, ck.vocab, all, 7);
    const auto& r = a.report;
    bool finite = std::isfinite(r.mean_l2) && std::isfinite(r.template_mean_norm);
    for (double x : r.template_norms) finite = finite && std::isfinite(x);
    bool in_range = true;
    for (const auto& v : {r.within_class_cosine, r.between_class_cosine, r.pos_neg_cosine}) {
      in_range = in_range && v && std::isfinite(*v) && *v >= -1.0 && *v <= 1.0;
    }
    for (const auto& v : {r.template_abs_cosine, r.template_abs_cosine_pos_pos, r.template_abs_cosine_pos_neg}) {
      in_range = in_range && v && std::isfinite(*v) && *v >= 0.0 && *v <= 1.0;
    }
    const std::size_t c = ck.model_config.num_classes;
    const bool templates = r.template_norms.size() == c && ck.model.classifier().templates.dim(0) == c;
    const bool reproducible = same_report(a.report, b.report) && a.pca && b.pca &&
                              a.pca->projections == b.pca->projections;

    std::vector<std::vector<double>> pts;
    for (const auto& p : a.points) pts.push_back(p.values);
    const auto n = static_cast<Eigen::Index>(pts.size()), d = static_cast<Eigen::Index>(pts[0].size());
    Eigen::MatrixXd x(n, d);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < d; ++j) x(i, j) = pts[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    x.rowwise() -= x.colwise().mean();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(x.transpose() * x / static_cast<double>(n - 1));
    double worst = 0.0;
    for (std::size_t comp = 0; comp < a.pca->components.size(); ++comp) {
      const Eigen::VectorXd v = solver.eigenvectors().col(d - 1 - static_cast<Eigen::Index>(comp));
      const Eigen::VectorXd proj = x * v;
      double sign = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) sign += proj(i) * a.pca->projections[static_cast<std::size_t>(i)][comp];
      sign = sign < 0 ? -1.0 : 1.0;
      for (Eigen::Index i = 0; i < n; ++i)
        worst = std::max(worst, std::abs(sign * proj(i) - a.pca->projections[static_cast<std::size_t>(i)][comp]));
    }
    const bool ok = finite && in_range && templates && reproducible && worst <= 1e-6;
    return std::pair{ok, std::to_string(r.entity_count) + " entities, " + std::to_string(r.negative_count) +
                             " negatives, " + std::to_string(c) + " templates, within/between/pos-neg cosine " +
                             fmt(*r.within_class_cosine) + "/" + fmt(*r.between_class_cosine) + "/" +
                             fmt(*r.pos_neg_cosine) + ", PCA max diff " + fmt(worst) +
                             (reproducible ? ", reproducible" : ", NOT reproducible")};
  });

  criterion(9, "deterministic training runs and bitwise checkpoints", [&] {
    const fs::path dir = out / "determinism";
    fs::create_directories(dir);
    cli::write_file(dir / "tiny.toml",
                    "seeds = 3\n[model]\nnum_layers = 2\nhidden_size = 8\nnum_heads = 2\nmaximum_span_size = 4\n"
                    "span_depth = 2\nwidth_embedding_size = 3\nffn_hidden_size = 6\nuse_bilstm = true\n"
                    "lstm_hidden_size = 4\n[train]\nnumber_of_epochs = 3\nbatch_size = 4\n"
                    "[synth]\ntrain_sentences = 12\ndev_sentences = 6\n");
    int status = 0;
    for (const char* run : {"a", "b"})
      status |= run_cli("train --config " + (dir / "tiny.toml").string() + " --out " + (dir / run).string());
    bool same = status == 0;
    for (const char* f : {"metrics.json", "history.jsonl", "f1_by_length.csv", "f1_by_nestedness.csv", "best.ckpt"})
      same = same && slurp(dir / "a" / f) == slurp(dir / "b" / f);

    const Checkpoint ck = load_checkpoint(dir / "a" / "best.ckpt");
    save_checkpoint(dir / "again.ckpt", ck.model, ck.vocab, ck.run, Rng(ck.rng_seed, ck.rng_position));
    const Checkpoint back = load_checkpoint(dir / "again.ckpt");
    bool bitwise = slurp(dir / "again.ckpt") == slurp(dir / "a" / "best.ckpt");
    Rng rng(9);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<std::size_t> ids(1 + rng.below(ck.model_config.max_len));
      for (auto& id : ids) id = rng.below(ck.model_config.vocab_size);
      bitwise = bitwise && ck.model.forward(ids).logits.data() == back.model.forward(ids).logits.data();
    }
    return std::pair{same && bitwise, std::string("two CLI runs ") + (same ? "identical" : "DIFFER") +
                                          ", checkpoint round-trip " + (bitwise ? "bitwise" : "NOT bitwise")};
  });

  criterion(10, "schedule endpoints and gradient clipping", [] {
    bool schedule = true;
    for (std::size_t total : {10u, 100u, 1000u, 1235u}) {
      const std::size_t peak_step = static_cast<std::size_t>(0.2 * static_cast<double>(total));
      const bool exact_peak = peak_step * 5 == total;
      schedule = schedule && lr_at(0, total, 2e-5, 0.2) == 0.0 && lr_at(total, total, 2e-5, 0.2) == 0.0 &&
                 (!exact_peak || lr_at(peak_step, total, 2e-5, 0.2) == 2e-5);
      for (std::size_t s = 0; s <= total; ++s) schedule = schedule && lr_at(s, total, 2e-5, 0.2) <= 2e-5;
    }
    Rng rng(10);
    std::size_t fired = 0;
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
      std::vector<Tensor> params;
      for (std::size_t i = 1 + rng.below(4); i > 0; --i) {
        Tensor p = Tensor::vector(std::vector<double>(1 + rng.below(20), 0.0), true);
        for (auto& g : p.mutable_grad()) g = rng.normal(0.0, trial % 3 ? 10.0 : 0.5);
        params.push_back(p);
      }
      if (clip_gradients(params, 5.0) < 1.0) {
        ++fired;
        worst = std::max(worst, global_grad_norm(params));
      }
    }
    const bool ok = schedule && fired > 0 && worst <= 5.0 + 1e-9;
    return std::pair{ok, std::string("lr endpoints ") + (schedule ? "exact" : "WRONG") + ", clipping fired " +
                             std::to_string(fired) + " times, max post-clip norm " + fmt(worst)};
  });

  std::cout << (failures ? std::to_string(failures) + " criteria failed" : "all criteria passed") << std::endl;
  return failures;
}
