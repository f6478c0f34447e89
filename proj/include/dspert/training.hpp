#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dspert/data.hpp"
#include "dspert/metrics.hpp"
#include "dspert/model.hpp"
#include "dspert/ops.hpp"

namespace dspert {

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 48;
  double lr_pretrained = 2e-5;
  double lr_fresh = 2e-3;
  double warmup_fraction = 0.2;
  double clip_norm = 5.0;
  double smoothing_epsilon = 0.1;
  std::size_t smoothing_distance = 1;
  double weight_decay = 0.01;
  std::uint64_t seed = 1;
  bool eval_train = false;  // also score the training split after each epoch

  void validate() const {
    if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0))
      throw ConfigError("warmup_fraction must lie in (0, 1)");
    if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
    if (!(smoothing_epsilon >= 0.0 && smoothing_epsilon < 1.0))
      throw ConfigError("boundary_smoothing_epsilon must lie in [0, 1)");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (smoothing_distance == 0) throw ConfigError("smoothing distance must be at least 1");
  }
};

// ---------------------------------------------------------------------------
// Targets

struct LabeledSpan {
  std::size_t start = 0;
  std::size_t end = 0;
  std::size_t type_index = 0;
};

/// Target distribution per candidate span, rows aligned with enumerate_spans.
struct TargetGrid {
  std::vector<Span> spans;
  std::size_t classes = 0;
  std::vector<double> values;  // spans.size() x classes

  std::span<const double> row(std::size_t n) const {
    return std::span<const double>(values).subspan(n * classes, classes);
  }
};

inline std::size_t span_index(std::size_t start, std::size_t end, std::size_t length) {
  // Widths below w contribute sum_{k<w} (length - k + 1) rows.
  const std::size_t w = end - start;
  std::size_t offset = 0;
  for (std::size_t k = 1; k < w; ++k) offset += length - k + 1;
  return offset + start;
}

/// One-hot non-entity rows except at gold spans. With epsilon > 0 each gold
/// span keeps 1 - epsilon on its type and spreads epsilon uniformly over the
/// candidates within boundary distance `distance` (|d start| + |d end|), on the
/// same type coordinate. Rows whose entity mass exceeds 1 are rescaled; the
/// remainder of every row goes to the non-entity class.
inline TargetGrid build_target_grid(const std::vector<LabeledSpan>& gold, std::size_t length,
                                    std::size_t max_width, std::size_t classes,
                                    double epsilon = 0.0, std::size_t distance = 1,
                                    WarningSink* warnings = nullptr) {
  TargetGrid grid;
  grid.spans = enumerate_spans(length, max_width);
  grid.classes = classes;
  const std::size_t n = grid.spans.size();
  std::vector<double> mass(n * classes, 0.0);

  std::map<std::pair<std::size_t, std::size_t>, std::size_t> seen;
  for (const auto& g : gold) {
    if (g.start >= g.end || g.end > length)
      throw DataError("gold span (" + std::to_string(g.start) + ", " + std::to_string(g.end) +
                      ") out of range");
    if (g.type_index == kNonEntity || g.type_index >= classes)
      throw DataError("gold span has invalid type index " + std::to_string(g.type_index));
    auto [it, fresh] = seen.emplace(std::pair{g.start, g.end}, g.type_index);
    if (!fresh) {
      if (it->second != g.type_index)
        throw DataError("span (" + std::to_string(g.start) + ", " + std::to_string(g.end) +
                        ") carries conflicting types");
      continue;
    }
    if (g.end - g.start > max_width) {
      detail::warn(warnings, "gold span (" + std::to_string(g.start) + ", " +
                                 std::to_string(g.end) + ") wider than maximum span size " +
                                 std::to_string(max_width) + " dropped from targets");
      continue;
    }

    std::vector<std::size_t> neighbours;
    if (epsilon > 0.0) {
      const auto lo = static_cast<long>(g.start), hi = static_cast<long>(g.end);
      const auto dist = static_cast<long>(distance);
      for (long ds = -dist; ds <= dist; ++ds)
        for (long de = -dist; de <= dist; ++de) {
          const long step = std::abs(ds) + std::abs(de);
          if (step == 0 || step > dist) continue;
          const long s = lo + ds, e = hi + de;
          if (s < 0 || e > static_cast<long>(length) || e - s < 1 ||
              e - s > static_cast<long>(max_width))
            continue;
          neighbours.push_back(
              span_index(static_cast<std::size_t>(s), static_cast<std::size_t>(e), length));
        }
    }
    const std::size_t self = span_index(g.start, g.end, length);
    if (neighbours.empty()) {
      mass[self * classes + g.type_index] += 1.0;
    } else {
      mass[self * classes + g.type_index] += 1.0 - epsilon;
      const double share = epsilon / static_cast<double>(neighbours.size());
      for (std::size_t nb : neighbours) mass[nb * classes + g.type_index] += share;
    }
  }

  grid.values.assign(n * classes, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    double entity = 0.0;
    for (std::size_t c = 1; c < classes; ++c) entity += mass[r * classes + c];
    const double scale_by = entity > 1.0 ? 1.0 / entity : 1.0;
    double assigned = 0.0;
    for (std::size_t c = 1; c < classes; ++c) {
      grid.values[r * classes + c] = mass[r * classes + c] * scale_by;
      assigned += grid.values[r * classes + c];
    }
    grid.values[r * classes + kNonEntity] = std::max(0.0, 1.0 - assigned);
  }
  return grid;
}

/// Gold entities of a sentence as type indices. Types unknown to the
/// vocabulary are skipped.
inline std::vector<LabeledSpan> labeled_spans(const Sentence& s, const Vocab& vocab) {
  std::vector<LabeledSpan> out;
  for (const auto& e : s.gold)
    if (auto idx = vocab.type_index(e.type)) out.push_back({e.start, e.end, *idx});
  return out;
}

/// -sum over candidates of y^T log(probs) for one sentence's probability grid.
inline Tensor loss_all_spans(const Tensor& probs, const TargetGrid& targets) {
  return cross_entropy(probs, targets.values);
}

/// Same loss from logits through a fused, stable log-softmax.
inline Tensor loss_from_logits(const Tensor& logits, const TargetGrid& targets) {
  return softmax_cross_entropy(logits, targets.values);
}

// ---------------------------------------------------------------------------
// Optimization

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t step = 0;
};

/// Decoupled weight decay (p -= lr * wd * p) followed by a bias-corrected
/// Adam update using the tensor's accumulated gradient.
inline void adamw_step(Tensor& param, AdamMoments& state, double lr, const AdamWHyper& hp) {
  auto& p = param.mutable_data();
  const auto& g = param.grad();
  if (state.m.size() != p.size()) {
    state.m.assign(p.size(), 0.0);
    state.v.assign(p.size(), 0.0);
    state.step = 0;
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] -= lr * hp.weight_decay * p[i];
    state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g[i];
    state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g[i] * g[i];
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    p[i] -= lr * mhat / (std::sqrt(vhat) + hp.eps);
  }
}

/// Linear warmup from 0 to `peak` over the first warmup_fraction of the
/// steps, then linear decay to 0 at total_steps.
inline double lr_at(std::size_t step, std::size_t total_steps, double peak,
                    double warmup_fraction) {
  if (total_steps == 0) return 0.0;
  const double s = static_cast<double>(std::min(step, total_steps));
  const double total = static_cast<double>(total_steps);
  const double warm = warmup_fraction * total;
  if (s < warm) return peak * s / warm;
  if (total <= warm) return peak;
  return peak * (total - s) / (total - warm);
}

inline double global_grad_norm(const std::vector<Tensor>& params) {
  double sq = 0.0;
  for (const auto& p : params)
    for (double g : p.grad()) sq += g * g;
  return std::sqrt(sq);
}

/// Scales all gradients by max_norm / norm when the global l2 norm exceeds
/// max_norm. Returns the applied factor (1 when no clipping happened).
inline double clip_gradients(std::vector<Tensor>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (!(norm > max_norm)) return 1.0;
  const double factor = max_norm / norm;
  for (auto& p : params)
    for (double& g : p.mutable_grad()) g *= factor;
  return factor;
}

// ---------------------------------------------------------------------------
// Evaluation helpers shared by training and the CLI

inline std::vector<std::set<Entity>> predict_corpus(const Model& model, const Vocab& vocab,
                                                    const std::vector<Sentence>& sentences) {
  std::vector<std::set<Entity>> out;
  out.reserve(sentences.size());
  for (const auto& s : sentences) out.push_back(predict_sentence(model, vocab, s));
  return out;
}

inline std::vector<std::set<Entity>> gold_corpus(const std::vector<Sentence>& sentences) {
  std::vector<std::set<Entity>> out;
  out.reserve(sentences.size());
  for (const auto& s : sentences) out.push_back(s.gold);
  return out;
}

inline PRF evaluate_f1(const Model& model, const Vocab& vocab, const std::vector<Sentence>& data) {
  return micro_prf(predict_corpus(model, vocab, data), gold_corpus(data));
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;  // mean batch loss
  PRF dev;
  std::optional<PRF> train;
};

struct TrainResult {
  Model best;
  std::size_t best_epoch = 0;  // 0 = initial model
  double best_dev_f1 = 0.0;
  std::vector<EpochRecord> history;
  std::size_t steps = 0;
};

/// Batches of sentence indices: sentences grouped by length, shuffled within
/// each length, chunked, then the chunk order shuffled.
inline std::vector<std::vector<std::size_t>> bucketed_batches(const std::vector<Sentence>& data,
                                                              std::size_t batch_size, Rng& rng) {
  std::map<std::size_t, std::vector<std::size_t>> by_length;
  for (std::size_t i = 0; i < data.size(); ++i) by_length[data[i].tokens.size()].push_back(i);
  std::vector<std::vector<std::size_t>> batches;
  for (auto& [len, ids] : by_length) {
    rng.shuffle(ids);
    for (std::size_t i = 0; i < ids.size(); i += batch_size)
      batches.emplace_back(ids.begin() + static_cast<std::ptrdiff_t>(i),
                           ids.begin() + static_cast<std::ptrdiff_t>(std::min(ids.size(), i + batch_size)));
  }
  rng.shuffle(batches);
  return batches;
}

inline std::size_t batches_per_epoch(const std::vector<Sentence>& data, std::size_t batch_size) {
  std::map<std::size_t, std::size_t> by_length;
  for (const auto& s : data) ++by_length[s.tokens.size()];
  std::size_t n = 0;
  for (const auto& [len, count] : by_length) n += (count + batch_size - 1) / batch_size;
  return n;
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Epoch loop with per-group learning rates, clipping and AdamW. After every
/// epoch the dev split is scored; the best-F1 model is returned.
inline TrainResult train(const Model& initial, const Vocab& vocab,
                         const std::vector<Sentence>& train_set,
                         const std::vector<Sentence>& dev_set, const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (train_set.empty()) throw ConfigError("training split is empty");
  if (dev_set.empty()) throw ConfigError("development split is empty");

  TrainResult result;
  result.best = initial.clone();
  result.best_dev_f1 = -1.0;
  if (cfg.epochs == 0) {
    result.best_dev_f1 = 0.0;
    return result;
  }

  Model model = initial.clone();
  const ModelConfig& mc = model.config();
  std::vector<std::vector<std::size_t>> ids;
  std::vector<TargetGrid> targets;
  for (const auto& s : train_set) {
    ids.push_back(vocab.encode(s.tokens));
    targets.push_back(build_target_grid(labeled_spans(s, vocab), s.tokens.size(), mc.max_span_size,
                                        mc.num_classes, cfg.smoothing_epsilon,
                                        cfg.smoothing_distance));
  }

  const auto params = model.parameters();
  std::vector<Tensor> tensors;
  for (const auto& p : params) tensors.push_back(p.tensor);
  std::vector<AdamMoments> moments(params.size());
  const AdamWHyper hp{0.9, 0.999, 1e-8, cfg.weight_decay};

  Rng order_rng(cfg.seed);
  Rng dropout_rng = order_rng.fork();
  const std::size_t total_steps = cfg.epochs * batches_per_epoch(train_set, cfg.batch_size);
  std::size_t step = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto batches = bucketed_batches(train_set, cfg.batch_size, order_rng);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto& batch = batches[b];
      const ForwardContext ctx{true, &dropout_rng};
      Tensor total;
      for (std::size_t idx : batch) {
        const SpanScores scores = model.forward(ids[idx], ctx);
        const Tensor loss = loss_from_logits(scores.logits, targets[idx]);
        total = total.defined() ? add(total, loss) : loss;
      }
      total = scale(total, 1.0 / static_cast<double>(batch.size()));
      const double value = total.item();
      if (!std::isfinite(value)) {
        throw NumericError("non-finite loss in epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(b) + " (first sentence index " +
                           std::to_string(batch.front()) + ")");
      }
      loss_sum += value;
      for (auto& t : tensors) t.zero_grad();
      backward(total);
      clip_gradients(tensors, cfg.clip_norm);
      const double lr_pre = lr_at(step, total_steps, cfg.lr_pretrained, cfg.warmup_fraction);
      const double lr_new = lr_at(step, total_steps, cfg.lr_fresh, cfg.warmup_fraction);
      for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor t = params[i].tensor;
        adamw_step(t, moments[i], params[i].group == ParamGroup::Pretrained ? lr_pre : lr_new, hp);
      }
      ++step;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = loss_sum / static_cast<double>(batches.size());
    rec.dev = evaluate_f1(model, vocab, dev_set);
    if (cfg.eval_train) rec.train = evaluate_f1(model, vocab, train_set);
    if (rec.dev.f1 > result.best_dev_f1) {
      result.best_dev_f1 = rec.dev.f1;
      result.best_epoch = epoch;
      result.best.load_state(model.state());
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  for (auto& t : tensors) t.zero_grad();
  result.steps = step;
  return result;
}

}  // namespace dspert
