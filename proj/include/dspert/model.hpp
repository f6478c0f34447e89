#pragma once

#include <algorithm>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dspert/data.hpp"
#include "dspert/heads.hpp"
#include "dspert/span_encoder.hpp"
#include "dspert/transformer.hpp"

namespace dspert {

enum class HeadKind {
  DSpERT,
  ShallowMax,
  ShallowMean,
  ShallowMulAttention,
  ShallowAddAttention,
  Biaffine,
  BiaffineNoProduction,
};

inline std::string_view to_string(HeadKind kind) {
  switch (kind) {
    case HeadKind::DSpERT: return "dspert";
    case HeadKind::ShallowMax: return "shallow-max";
    case HeadKind::ShallowMean: return "shallow-mean";
    case HeadKind::ShallowMulAttention: return "shallow-mulattn";
    case HeadKind::ShallowAddAttention: return "shallow-addattn";
    case HeadKind::Biaffine: return "biaffine";
    case HeadKind::BiaffineNoProduction: return "biaffine-no-prod";
  }
  return "?";
}

inline HeadKind parse_head_kind(std::string_view name) {
  for (auto k : {HeadKind::DSpERT, HeadKind::ShallowMax, HeadKind::ShallowMean,
                 HeadKind::ShallowMulAttention, HeadKind::ShallowAddAttention, HeadKind::Biaffine,
                 HeadKind::BiaffineNoProduction})
    if (to_string(k) == name) return k;
  throw ConfigError("unknown head kind '" + std::string(name) + "'");
}

inline bool is_biaffine(HeadKind k) {
  return k == HeadKind::Biaffine || k == HeadKind::BiaffineNoProduction;
}

inline bool is_shallow(HeadKind k) { return !is_biaffine(k) && k != HeadKind::DSpERT; }

/// Aggregator used by a shallow head.
inline Aggregation shallow_aggregation(HeadKind k) {
  switch (k) {
    case HeadKind::ShallowMax: return Aggregation::Max;
    case HeadKind::ShallowMean: return Aggregation::Mean;
    case HeadKind::ShallowMulAttention: return Aggregation::MulAttention;
    case HeadKind::ShallowAddAttention: return Aggregation::AddAttention;
    default: throw ContractError("not a shallow head");
  }
}

struct ModelConfig {
  std::size_t vocab_size = 2;
  std::size_t max_len = 64;
  std::size_t num_classes = 2;  // entity types + non-entity
  std::size_t num_layers = 2;   // L
  std::size_t hidden_size = 32; // d
  std::size_t num_heads = 2;
  std::size_t ffn_size = 0;     // transformer d_ff; 0 means 4d
  std::size_t max_span_size = 6;  // K
  std::size_t span_depth = 2;     // L-tilde
  Aggregation aggregation = Aggregation::Max;
  bool share_weights = false;
  bool per_width_span_params = false;
  bool use_bilstm = false;
  bool sinusoidal_positions = false;
  std::size_t lstm_hidden_size = 400;
  std::size_t width_embedding_size = 25;  // d_w
  std::size_t ffn_hidden_size = 300;      // d_z
  std::size_t biaffine_size = 150;        // d_b
  HeadKind head = HeadKind::DSpERT;
  double dropout = 0.1;
  double ffn_dropout = 0.4;
  double lstm_dropout = 0.5;

  std::size_t transformer_ffn() const { return ffn_size ? ffn_size : 4 * hidden_size; }

  SpanEncoderConfig span_config() const {
    return {max_span_size, span_depth, aggregation, share_weights, per_width_span_params};
  }

  void validate() const {
    if (vocab_size < 2) throw ConfigError("vocabulary must hold PAD and UNK");
    if (num_classes < 2) throw ConfigError("need at least one entity type");
    if (hidden_size == 0 || num_heads == 0 || hidden_size % num_heads != 0)
      throw ConfigError("hidden_size must be a positive multiple of num_heads");
    if (max_span_size < 2) throw ConfigError("maximum_span_size must be at least 2");
    if (head == HeadKind::DSpERT) {
      span_config().validate(num_layers);
    }
    if (head != HeadKind::DSpERT && (span_depth != 0 || share_weights || per_width_span_params)) {
      throw ConfigError(std::string("head '") + std::string(to_string(head)) +
                        "' does not take span-encoder settings (span_depth, share_weights)");
    }
    if (is_biaffine(head) && use_bilstm) {
      throw ConfigError("the biaffine baseline does not use the BiLSTM");
    }
    for (double p : {dropout, ffn_dropout, lstm_dropout})
      if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout rates must lie in [0, 1)");
  }
};

/// Candidate span, end-exclusive.
struct Span {
  std::size_t start = 0;
  std::size_t end = 0;
  std::size_t width() const { return end - start; }
  auto operator<=>(const Span&) const = default;
};

/// Every span of width <= max_width, ordered by width then start.
inline std::vector<Span> enumerate_spans(std::size_t length, std::size_t max_width) {
  std::vector<Span> spans;
  for (std::size_t k = 1; k <= std::min(max_width, length); ++k)
    for (std::size_t i = 0; i + k <= length; ++i) spans.push_back({i, i + k});
  return spans;
}

inline std::size_t candidate_count(std::size_t length, std::size_t max_width) {
  std::size_t n = 0;
  for (std::size_t k = 1; k <= std::min(max_width, length); ++k) n += length - k + 1;
  return n;
}

/// Logits for every candidate of a sentence, aligned with `spans`.
struct SpanScores {
  std::vector<Span> spans;
  Tensor logits;     // N x c
  Tensor prelogits;  // N x d_z; undefined for biaffine heads
};

enum class ParamGroup { Pretrained, Fresh };

struct NamedParam {
  std::string name;
  Tensor tensor;
  ParamGroup group;
};

class Model {
 public:
  Model() = default;

  static Model create(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    Model m;
    m.cfg_ = cfg;
    const std::size_t d = cfg.hidden_size;
    m.embedding_ = EmbeddingLayer::create(cfg.vocab_size, cfg.max_len, d, cfg.dropout, rng,
                                          cfg.sinusoidal_positions);
    for (std::size_t l = 0; l < cfg.num_layers; ++l)
      m.blocks_.push_back(BlockParams::create(d, cfg.num_heads, cfg.transformer_ffn(), cfg.dropout, rng));
    if (cfg.head == HeadKind::DSpERT) {
      m.span_ = SpanEncoderParams::create(cfg.span_config(), d, cfg.num_heads,
                                          cfg.transformer_ffn(), cfg.dropout, rng);
    } else if (is_shallow(cfg.head)) {
      m.span_.aggregator = AggregatorParams::create(shallow_aggregation(cfg.head), d, rng);
    }
    if (cfg.use_bilstm) m.bilstm_ = BiLstm::create(d, cfg.lstm_hidden_size, cfg.lstm_dropout, rng);
    if (is_biaffine(cfg.head)) {
      m.biaffine_ = BiaffineHead::create(d, cfg.biaffine_size, cfg.num_classes,
                                         cfg.head == HeadKind::Biaffine, rng);
    } else {
      m.classifier_ = ClassifierHead::create(d, cfg.max_span_size, cfg.width_embedding_size,
                                             cfg.ffn_hidden_size, cfg.num_classes,
                                             cfg.ffn_dropout, rng);
    }
    return m;
  }

  const ModelConfig& config() const { return cfg_; }
  const EmbeddingLayer& embedding() const { return embedding_; }
  const std::vector<BlockParams>& blocks() const { return blocks_; }
  const SpanEncoderParams& span_params() const { return span_; }
  const ClassifierHead& classifier() const { return classifier_; }
  const BiaffineHead& biaffine() const { return biaffine_; }
  const BiLstm* bilstm() const { return cfg_.use_bilstm ? &bilstm_ : nullptr; }

  /// All trainable tensors in a stable order. Encoder and span blocks form the
  /// "pretrained" group; aggregators, BiLSTM and heads are "fresh".
  std::vector<NamedParam> parameters() const {
    std::vector<NamedParam> out;
    auto add = [&out](const ParamList& list, ParamGroup g) {
      for (const auto& [name, t] : list) out.push_back({name, t, g});
    };
    ParamList pre;
    embedding_.collect(pre, "embedding");
    for (std::size_t l = 0; l < blocks_.size(); ++l) blocks_[l].collect(pre, "encoder.block" + std::to_string(l));
    for (std::size_t i = 0; i < span_.blocks.size(); ++i)
      span_.blocks[i].collect(pre, "span.block" + std::to_string(i));
    add(pre, ParamGroup::Pretrained);

    ParamList fresh;
    span_.aggregator.collect(fresh, "span.aggregator");
    if (cfg_.use_bilstm) bilstm_.collect(fresh, "bilstm");
    if (is_biaffine(cfg_.head)) {
      biaffine_.collect(fresh, "biaffine");
    } else {
      classifier_.collect(fresh, "classifier");
    }
    add(fresh, ParamGroup::Fresh);
    return out;
  }

  ParamList named_parameters() const {
    ParamList out;
    for (auto& p : parameters()) out.emplace_back(p.name, p.tensor);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.size();
    return n;
  }

  /// Token encoder followed by the configured span path; returns the trace of
  /// token layers as well when `trace_out` is given.
  SpanScores forward(std::span<const std::size_t> token_ids, const ForwardContext& ctx = {},
                     EncoderTrace* trace_out = nullptr) const {
    const EncoderTrace trace = encode(embedding_.embed(token_ids, ctx), blocks_, ctx);
    if (trace_out) *trace_out = trace;
    const std::size_t t = token_ids.size();
    SpanScores scores;
    scores.spans = enumerate_spans(t, cfg_.max_span_size);

    if (is_biaffine(cfg_.head)) {
      const Tensor hs = relu(biaffine_.start(trace.top()));
      const Tensor he = relu(biaffine_.end(trace.top()));
      std::vector<std::size_t> starts, ends;
      for (const auto& s : scores.spans) {
        starts.push_back(s.start);
        ends.push_back(s.end - 1);
      }
      scores.logits = biaffine_scores(biaffine_, embedding_lookup(hs, starts),
                                      embedding_lookup(he, ends));
      return scores;
    }

    std::vector<Tensor> by_width = top_span_layers(trace, ctx);
    by_width = bilstm_refine(by_width, bilstm(), ctx);
    std::vector<std::size_t> widths;
    widths.reserve(scores.spans.size());
    for (const auto& s : scores.spans) widths.push_back(s.width());
    auto out = classify_spans(classifier_, concat_rows(by_width), widths, ctx);
    scores.logits = out.logits;
    scores.prelogits = out.prelogits;
    return scores;
  }

  /// Top representations per width 1..min(K, T): H^L for width 1, then the
  /// span encoder (or shallow aggregation of H^L) for wider spans.
  std::vector<Tensor> top_span_layers(const EncoderTrace& trace, const ForwardContext& ctx = {}) const {
    const std::size_t t = trace.length();
    std::vector<Tensor> by_width{trace.top()};
    if (cfg_.head == HeadKind::DSpERT) {
      const SpanTrace spans = encode_spans(trace, cfg_.span_config(), span_, blocks_, ctx);
      for (std::size_t k = 2; k <= std::min(cfg_.max_span_size, t); ++k) by_width.push_back(spans.top(k));
    } else {
      const Aggregation kind = shallow_aggregation(cfg_.head);
      for (std::size_t k = 2; k <= std::min(cfg_.max_span_size, t); ++k)
        by_width.push_back(aggregate_windows(trace.top(), k, kind, span_.aggregator));
    }
    return by_width;
  }

  /// Detached copy of all parameter values, in parameters() order.
  std::vector<std::vector<double>> state() const {
    std::vector<std::vector<double>> out;
    for (const auto& p : parameters()) out.push_back(p.tensor.data());
    return out;
  }

  void load_state(const std::vector<std::vector<double>>& values) {
    auto params = parameters();
    if (values.size() != params.size()) throw DimensionError("state has wrong parameter count");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (values[i].size() != params[i].tensor.size()) {
        throw DimensionError("state size mismatch for parameter " + params[i].name);
      }
      params[i].tensor.mutable_data() = values[i];
    }
  }

  /// Independent deep copy.
  Model clone() const {
    Rng scratch(0);
    Model copy = Model::create(cfg_, scratch);
    copy.load_state(state());
    return copy;
  }

 private:
  ModelConfig cfg_;
  EmbeddingLayer embedding_;
  std::vector<BlockParams> blocks_;
  SpanEncoderParams span_;
  BiLstm bilstm_;
  ClassifierHead classifier_;
  BiaffineHead biaffine_;
};

/// One classified candidate span.
struct SpanPrediction {
  std::size_t start = 0;
  std::size_t end = 0;
  std::size_t type_index = 0;
  std::vector<double> probs;
  std::optional<std::vector<double>> prelogit;  // absent for biaffine heads
};

inline std::size_t argmax_lowest(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

/// Evaluation-mode scoring of every candidate of width <= K.
inline std::vector<SpanPrediction> score_all_spans(const Model& model,
                                                   std::span<const std::size_t> token_ids) {
  if (token_ids.size() > model.config().max_len) {
    throw DataError("sentence of " + std::to_string(token_ids.size()) +
                    " tokens exceeds maximum length " + std::to_string(model.config().max_len));
  }
  NoGradGuard no_grad;
  const SpanScores scores = model.forward(token_ids);
  const Tensor probs = softmax(scores.logits, 1);
  const std::size_t c = probs.cols();
  std::vector<SpanPrediction> out;
  out.reserve(scores.spans.size());
  for (std::size_t n = 0; n < scores.spans.size(); ++n) {
    SpanPrediction p;
    p.start = scores.spans[n].start;
    p.end = scores.spans[n].end;
    p.probs.assign(probs.data().begin() + static_cast<std::ptrdiff_t>(n * c),
                   probs.data().begin() + static_cast<std::ptrdiff_t>((n + 1) * c));
    p.type_index = argmax_lowest(p.probs);
    if (scores.prelogits.defined()) {
      const std::size_t dz = scores.prelogits.cols();
      p.prelogit = std::vector<double>(
          scores.prelogits.data().begin() + static_cast<std::ptrdiff_t>(n * dz),
          scores.prelogits.data().begin() + static_cast<std::ptrdiff_t>((n + 1) * dz));
    }
    out.push_back(std::move(p));
  }
  return out;
}

/// Spans whose argmax type is not the non-entity class. Overlapping and
/// nested predictions are all kept.
inline std::vector<SpanPrediction> predict_entities(const Model& model,
                                                    std::span<const std::size_t> token_ids) {
  auto all = score_all_spans(model, token_ids);
  std::erase_if(all, [](const SpanPrediction& p) { return p.type_index == kNonEntity; });
  return all;
}

inline std::set<Entity> predict_sentence(const Model& model, const Vocab& vocab,
                                         const Sentence& sentence) {
  std::set<Entity> out;
  const auto ids = vocab.encode(sentence.tokens);
  for (const auto& p : predict_entities(model, ids))
    out.insert({p.start, p.end, vocab.type_name(p.type_index)});
  return out;
}

}  // namespace dspert
