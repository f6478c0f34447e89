#pragma once

#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dspert/ops.hpp"
#include "dspert/rng.hpp"
#include "dspert/tensor.hpp"

namespace dspert {

/// Named parameter handles; tensors share storage with the owning model.
using ParamList = std::vector<std::pair<std::string, Tensor>>;

inline constexpr double kInitStd = 0.02;

inline Tensor normal_param(Shape shape, Rng& rng, double stddev = kInitStd) {
  std::vector<double> values(numel(shape));
  for (double& v : values) v = rng.normal(0.0, stddev);
  return Tensor(std::move(shape), std::move(values), true);
}

inline Tensor constant_param(Shape shape, double value) {
  return Tensor::full(std::move(shape), value, true);
}

/// Dropout switch and randomness for one forward pass.
struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;

  Tensor dropout(const Tensor& x, double p) const {
    if (!training || p == 0.0) return x;
    if (rng == nullptr) throw ContractError("training forward pass needs an Rng");
    return dspert::dropout(x, p, true, *rng);
  }
};

/// y = x W + b with W stored as in x out.
struct Linear {
  Tensor weight;
  Tensor bias;

  static Linear create(std::size_t in, std::size_t out, Rng& rng) {
    return {normal_param({in, out}, rng), constant_param({out}, 0.0)};
  }

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Tensor operator()(const Tensor& x) const { return add_bias(matmul(x, weight), bias); }

  void collect(ParamList& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;

  static LayerNormParams create(std::size_t d) {
    return {constant_param({d}, 1.0), constant_param({d}, 0.0)};
  }

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }

  void collect(ParamList& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".gain", gain);
    out.emplace_back(prefix + ".bias", bias);
  }
};

struct AttentionParams {
  Linear query, key, value, output;
  std::size_t heads = 1;

  static AttentionParams create(std::size_t d, std::size_t heads, Rng& rng) {
    if (heads == 0 || d % heads != 0) {
      throw ConfigError("hidden size " + std::to_string(d) + " not divisible by " +
                        std::to_string(heads) + " heads");
    }
    AttentionParams p;
    p.query = Linear::create(d, d, rng);
    p.key = Linear::create(d, d, rng);
    p.value = Linear::create(d, d, rng);
    p.output = Linear::create(d, d, rng);
    p.heads = heads;
    return p;
  }

  std::size_t model_dim() const { return query.in_features(); }
  std::size_t head_dim() const { return model_dim() / heads; }

  void collect(ParamList& out, const std::string& prefix) const {
    query.collect(out, prefix + ".query");
    key.collect(out, prefix + ".key");
    value.collect(out, prefix + ".value");
    output.collect(out, prefix + ".output");
  }
};

struct BlockParams {
  AttentionParams attention;
  Linear ffn_in, ffn_out;
  LayerNormParams norm1, norm2;
  double dropout_p = 0.0;

  static BlockParams create(std::size_t d, std::size_t heads, std::size_t d_ff, double dropout_p,
                            Rng& rng) {
    BlockParams b;
    b.attention = AttentionParams::create(d, heads, rng);
    b.ffn_in = Linear::create(d, d_ff, rng);
    b.ffn_out = Linear::create(d_ff, d, rng);
    b.norm1 = LayerNormParams::create(d);
    b.norm2 = LayerNormParams::create(d);
    b.dropout_p = dropout_p;
    return b;
  }

  void collect(ParamList& out, const std::string& prefix) const {
    attention.collect(out, prefix + ".attention");
    ffn_in.collect(out, prefix + ".ffn_in");
    ffn_out.collect(out, prefix + ".ffn_out");
    norm1.collect(out, prefix + ".norm1");
    norm2.collect(out, prefix + ".norm2");
  }
};

namespace detail {

inline Tensor head_columns(const Tensor& x, std::size_t head, std::size_t dh, std::size_t heads) {
  return heads == 1 ? x : slice_cols(x, head * dh, (head + 1) * dh);
}

// Projects, lets `attend` mix each head, then joins heads and projects out.
template <typename Attend>
Tensor attend_heads(const AttentionParams& p, const Tensor& q, const Tensor& k, const Tensor& v,
                    Attend attend, std::vector<Tensor>* weights) {
  const Tensor qp = p.query(q);
  const Tensor kp = p.key(k);
  const Tensor vp = p.value(v);
  const std::size_t dh = p.head_dim();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor joined;
  for (std::size_t h = 0; h < p.heads; ++h) {
    auto [mixed, probs] = attend(head_columns(qp, h, dh, p.heads), head_columns(kp, h, dh, p.heads),
                                 head_columns(vp, h, dh, p.heads), inv_sqrt);
    if (weights) weights->push_back(probs);
    joined = h == 0 ? mixed : concat(joined, mixed);
  }
  return p.output(joined);
}

}  // namespace detail

/// Scaled dot-product attention with `heads` heads. Queries (m x d) and
/// keys/values (n x d) may have different row counts. When `weights` is given
/// it receives one m x n probability matrix per head.
inline Tensor multi_head_attention(const AttentionParams& p, const Tensor& queries,
                                   const Tensor& keys, const Tensor& values,
                                   std::vector<Tensor>* weights = nullptr) {
  if (keys.dim(0) != values.dim(0)) {
    throw DimensionError("attention: keys " + shape_str(keys.shape()) + " vs values " +
                         shape_str(values.shape()));
  }
  return detail::attend_heads(
      p, queries, keys, values,
      [](const Tensor& qh, const Tensor& kh, const Tensor& vh, double s) {
        Tensor probs = softmax(scale(matmul(qh, transpose(kh)), s), 1);
        return std::pair{matmul(probs, vh), probs};
      },
      weights);
}

/// Batched span attention: query row i attends only to rows i..i+width-1 of
/// `context`, which serves as both keys and values. Requires
/// queries.rows() == context.rows() - width + 1. Weights per head are
/// m x width.
inline Tensor windowed_attention(const AttentionParams& p, const Tensor& queries,
                                 const Tensor& context, std::size_t width,
                                 std::vector<Tensor>* weights = nullptr) {
  return detail::attend_heads(
      p, queries, context, context,
      [width](const Tensor& qh, const Tensor& kh, const Tensor& vh, double s) {
        Tensor probs = softmax(scale(window_scores(qh, kh, width), s), 1);
        return std::pair{window_weighted_sum(probs, vh), probs};
      },
      weights);
}

namespace detail {

inline Tensor block_tail(const BlockParams& p, const Tensor& q, const Tensor& attended,
                         const ForwardContext& ctx) {
  const Tensor a = p.norm1(add(q, ctx.dropout(attended, p.dropout_p)));
  const Tensor f = p.ffn_out(relu(p.ffn_in(a)));
  return p.norm2(add(a, ctx.dropout(f, p.dropout_p)));
}

}  // namespace detail

/// Post-norm block: a = LN(q + MHA(q, k, v)); out = LN(a + FFN(a)).
inline Tensor transformer_block(const BlockParams& p, const Tensor& q, const Tensor& k,
                                const Tensor& v, const ForwardContext& ctx = {}) {
  return detail::block_tail(p, q, multi_head_attention(p.attention, q, k, v), ctx);
}

/// transformer_block with windowed attention over `context`.
inline Tensor windowed_transformer_block(const BlockParams& p, const Tensor& q,
                                         const Tensor& context, std::size_t width,
                                         const ForwardContext& ctx = {}) {
  return detail::block_tail(p, q, windowed_attention(p.attention, q, context, width), ctx);
}

struct EmbeddingLayer {
  Tensor token_table;     // V x d
  Tensor position_table;  // T_max x d
  double dropout_p = 0.0;

  /// Sinusoidal positions still draw the normal table first so every later
  /// parameter sees the same RNG stream; the table stays trainable.
  static EmbeddingLayer create(std::size_t vocab, std::size_t max_len, std::size_t d,
                               double dropout_p, Rng& rng, bool sinusoidal_positions = false) {
    EmbeddingLayer e{normal_param({vocab, d}, rng), normal_param({max_len, d}, rng), dropout_p};
    if (sinusoidal_positions) {
      auto& pos = e.position_table.mutable_data();
      for (std::size_t t = 0; t < max_len; ++t)
        for (std::size_t i = 0; i < d; ++i) {
          const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d));
          const double angle = static_cast<double>(t) * freq;
          pos[t * d + i] = i % 2 ? std::cos(angle) : std::sin(angle);
        }
    }
    return e;
  }

  std::size_t max_length() const { return position_table.dim(0); }

  /// H^0 = token rows + position rows 0..T-1, then dropout.
  Tensor embed(std::span<const std::size_t> token_ids, const ForwardContext& ctx = {}) const {
    if (token_ids.empty()) throw BoundsError("embed: empty token sequence");
    if (token_ids.size() > max_length()) {
      throw BoundsError("embed: sequence length " + std::to_string(token_ids.size()) +
                        " exceeds position table of " + std::to_string(max_length()));
    }
    const Tensor tokens = embedding_lookup(token_table, token_ids);
    const Tensor positions = slice_rows(position_table, 0, token_ids.size());
    return ctx.dropout(add(tokens, positions), dropout_p);
  }

  void collect(ParamList& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".token_table", token_table);
    out.emplace_back(prefix + ".position_table", position_table);
  }
};

/// H^0..H^L, all T x d.
struct EncoderTrace {
  std::vector<Tensor> layers;

  std::size_t depth() const { return layers.size() - 1; }
  const Tensor& top() const { return layers.back(); }
  std::size_t length() const { return layers.front().dim(0); }
};

/// H^l = block_l(H^{l-1}, H^{l-1}, H^{l-1}); every layer is retained.
inline EncoderTrace encode(const Tensor& embedded, const std::vector<BlockParams>& blocks,
                           const ForwardContext& ctx = {}) {
  EncoderTrace trace;
  trace.layers.reserve(blocks.size() + 1);
  trace.layers.push_back(embedded);
  for (const auto& block : blocks) {
    const Tensor& h = trace.layers.back();
    trace.layers.push_back(transformer_block(block, h, h, h, ctx));
  }
  return trace;
}

}  // namespace dspert
