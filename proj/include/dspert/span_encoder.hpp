#pragma once

#include <algorithm>
#include <string>
#include <string_view>
#include <vector>

#include "dspert/errors.hpp"
#include "dspert/ops.hpp"
#include "dspert/transformer.hpp"

namespace dspert {

enum class Aggregation { Max, Mean, MulAttention, AddAttention };

inline std::string_view to_string(Aggregation kind) {
  switch (kind) {
    case Aggregation::Max: return "max";
    case Aggregation::Mean: return "mean";
    case Aggregation::MulAttention: return "mul_attention";
    case Aggregation::AddAttention: return "add_attention";
  }
  return "?";
}

inline Aggregation parse_aggregation(std::string_view name) {
  if (name == "max") return Aggregation::Max;
  if (name == "mean") return Aggregation::Mean;
  if (name == "mul_attention" || name == "mulattn") return Aggregation::MulAttention;
  if (name == "add_attention" || name == "addattn") return Aggregation::AddAttention;
  throw ConfigError("unknown aggregation '" + std::string(name) + "'");
}

/// Learnable parts of the attention aggregators, shared across widths.
///   multiplicative: softmax(u^T tanh(W H^T)) H
///   additive:       softmax(u^T tanh(W (H (+) v)^T)) H, v repeated per row
/// W is stored transposed (input x attention_dim) so rows can be projected
/// with a single matmul.
struct AggregatorParams {
  Tensor proj;  // d x a (multiplicative) or (d + d_v) x a (additive)
  Tensor u;     // a x 1
  Tensor v;     // d_v, additive only

  static AggregatorParams create(Aggregation kind, std::size_t d, Rng& rng) {
    AggregatorParams p;
    if (kind == Aggregation::MulAttention) {
      p.proj = normal_param({d, d}, rng);
      p.u = normal_param({d, 1}, rng);
    } else if (kind == Aggregation::AddAttention) {
      p.proj = normal_param({2 * d, d}, rng);
      p.u = normal_param({d, 1}, rng);
      p.v = normal_param({d}, rng);
    }
    return p;
  }

  void collect(ParamList& out, const std::string& prefix) const {
    if (proj.defined()) out.emplace_back(prefix + ".proj", proj);
    if (u.defined()) out.emplace_back(prefix + ".u", u);
    if (v.defined()) out.emplace_back(prefix + ".v", v);
  }
};

namespace detail {

// Per-token attention logits, T x 1.
inline Tensor aggregator_scores(const Tensor& h, Aggregation kind, const AggregatorParams& p) {
  Tensor input = h;
  if (kind == Aggregation::AddAttention) input = concat(h, repeat_rows(p.v, h.dim(0)));
  return matmul(tanh(matmul(input, p.proj)), p.u);
}

}  // namespace detail

/// Row i aggregates rows i..i+k-1 of `h` (T x d); result is (T-k+1) x d.
inline Tensor aggregate_windows(const Tensor& h, std::size_t k, Aggregation kind,
                                const AggregatorParams& params) {
  switch (kind) {
    case Aggregation::Max: return window_pool(h, k, PoolKind::Max);
    case Aggregation::Mean: return window_pool(h, k, PoolKind::Mean);
    case Aggregation::MulAttention:
    case Aggregation::AddAttention: {
      const Tensor scores = unfold_rows(detail::aggregator_scores(h, kind, params), k);
      return window_weighted_sum(softmax(scores, 1), h);
    }
  }
  throw ContractError("unknown aggregation");
}

/// Initial span representations S^{start,k} from the token layer `h_start`.
/// Requires 2 <= k <= min(max_width, T).
inline Tensor init_aggregate(const Tensor& h_start, std::size_t k, std::size_t max_width,
                             Aggregation kind, const AggregatorParams& params = {}) {
  if (k < 2 || k > max_width || k > h_start.dim(0)) {
    throw ContractError("init_aggregate: width " + std::to_string(k) + " outside [2, " +
                        std::to_string(std::min(max_width, h_start.dim(0))) + "]");
  }
  return aggregate_windows(h_start, k, kind, params);
}

/// One-step span representation of (i, j) from a single token layer; shape (d).
inline Tensor shallow_aggregate(const Tensor& h_top, std::size_t i, std::size_t j,
                                Aggregation kind, const AggregatorParams& params = {}) {
  if (i >= j || j > h_top.dim(0)) {
    throw ContractError("shallow_aggregate: span (" + std::to_string(i) + ", " +
                        std::to_string(j) + ") invalid for " + std::to_string(h_top.dim(0)) +
                        " tokens");
  }
  const Tensor rows = slice_rows(h_top, i, j);
  return reshape(aggregate_windows(rows, j - i, kind, params), {h_top.dim(1)});
}

struct SpanEncoderConfig {
  std::size_t max_width = 2;   // K
  std::size_t depth = 0;       // number of span blocks; aggregation starts at layer L - depth
  Aggregation aggregation = Aggregation::Max;
  bool share_weights = false;  // reuse the token encoder's blocks
  bool per_width_params = false;

  void validate(std::size_t token_layers) const {
    if (max_width < 2) throw ConfigError("maximum span size must be at least 2");
    if (depth > token_layers) {
      throw ConfigError("span depth " + std::to_string(depth) + " exceeds encoder depth " +
                        std::to_string(token_layers));
    }
    if (share_weights && per_width_params) {
      throw ConfigError("share_weights and per-width span parameters are exclusive");
    }
  }
};

/// Span-block parameters. Without sharing there is one set per layer, or one
/// per (layer, width) when per_width_params is on.
struct SpanEncoderParams {
  AggregatorParams aggregator;
  std::vector<BlockParams> blocks;

  static SpanEncoderParams create(const SpanEncoderConfig& cfg, std::size_t d, std::size_t heads,
                                  std::size_t d_ff, double dropout_p, Rng& rng) {
    SpanEncoderParams p;
    p.aggregator = AggregatorParams::create(cfg.aggregation, d, rng);
    if (!cfg.share_weights) {
      const std::size_t sets = cfg.per_width_params ? cfg.depth * (cfg.max_width - 1) : cfg.depth;
      for (std::size_t s = 0; s < sets; ++s)
        p.blocks.push_back(BlockParams::create(d, heads, d_ff, dropout_p, rng));
    }
    return p;
  }

  void collect(ParamList& out, const std::string& prefix) const {
    aggregator.collect(out, prefix + ".aggregator");
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(out, prefix + ".block" + std::to_string(i));
  }
};

/// Block used for span layer `layer` (1-based token layer index it mirrors)
/// at width k.
inline const BlockParams& span_block_params(const SpanEncoderConfig& cfg,
                                            const SpanEncoderParams& params,
                                            const std::vector<BlockParams>& token_blocks,
                                            std::size_t layer, std::size_t k) {
  if (cfg.share_weights) return token_blocks.at(layer - 1);
  const std::size_t offset = layer - 1 - (token_blocks.size() - cfg.depth);
  if (cfg.per_width_params) return params.blocks.at(offset * (cfg.max_width - 1) + (k - 2));
  return params.blocks.at(offset);
}

/// Per width k in [2, K]: S^{l,k} for l = start..L, each (T-k+1) x d.
/// Widths longer than the sentence have empty stacks.
struct SpanTrace {
  std::size_t start_layer = 0;
  std::size_t max_width = 2;
  std::vector<std::vector<Tensor>> by_width;  // index k - 2

  const std::vector<Tensor>& stack(std::size_t k) const { return by_width.at(k - 2); }
  bool has_width(std::size_t k) const {
    return k >= 2 && k <= max_width && !by_width.at(k - 2).empty();
  }
  const Tensor& top(std::size_t k) const { return stack(k).back(); }
};

/// s^{l,k}_i = SpanBlock(s^{l-1,k}_i, H^{l-1}[i..i+k], H^{l-1}[i..i+k]) for a
/// single span; `s_prev` is 1 x d and `h_slice` is k x d.
inline Tensor span_block(const BlockParams& params, const Tensor& s_prev, const Tensor& h_slice,
                         const ForwardContext& ctx = {}) {
  return transformer_block(params, s_prev, h_slice, h_slice, ctx);
}

/// All T-k+1 spans of width k in one call.
inline Tensor span_block_batched(const BlockParams& params, const Tensor& s_prev,
                                 const Tensor& h_prev, std::size_t k,
                                 const ForwardContext& ctx = {}) {
  return windowed_transformer_block(params, s_prev, h_prev, k, ctx);
}

inline SpanTrace encode_spans(const EncoderTrace& trace, const SpanEncoderConfig& cfg,
                              const SpanEncoderParams& params,
                              const std::vector<BlockParams>& token_blocks,
                              const ForwardContext& ctx = {}) {
  const std::size_t depth_l = trace.depth();
  cfg.validate(depth_l);
  SpanTrace spans;
  spans.max_width = cfg.max_width;
  spans.start_layer = depth_l - cfg.depth;
  spans.by_width.resize(cfg.max_width - 1);
  const std::size_t t = trace.length();
  for (std::size_t k = 2; k <= cfg.max_width && k <= t; ++k) {
    auto& stack = spans.by_width[k - 2];
    stack.reserve(cfg.depth + 1);
    stack.push_back(init_aggregate(trace.layers[spans.start_layer], k, cfg.max_width,
                                   cfg.aggregation, params.aggregator));
    for (std::size_t l = spans.start_layer + 1; l <= depth_l; ++l) {
      const BlockParams& block = span_block_params(cfg, params, token_blocks, l, k);
      stack.push_back(span_block_batched(block, stack.back(), trace.layers[l - 1], k, ctx));
    }
  }
  return spans;
}

/// Top representation of span (i, j): H^L row i for width 1, otherwise row i
/// of S^{L, j-i}. Shape (d).
inline Tensor span_representation(const EncoderTrace& trace, const SpanTrace& spans,
                                  std::size_t i, std::size_t j) {
  const std::size_t t = trace.length();
  if (i >= j || j > t) {
    throw ContractError("span (" + std::to_string(i) + ", " + std::to_string(j) +
                        ") invalid for " + std::to_string(t) + " tokens");
  }
  const std::size_t width = j - i;
  const std::size_t d = trace.top().dim(1);
  if (width == 1) return reshape(slice_rows(trace.top(), i, i + 1), {d});
  if (width > spans.max_width) {
    throw UnsupportedSpanError("unsupported span width " + std::to_string(width) +
                        " (maximum span size " + std::to_string(spans.max_width) + ")");
  }
  return reshape(slice_rows(spans.top(width), i, i + 1), {d});
}

}  // namespace dspert
