#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dspert/errors.hpp"
#include "dspert/ops.hpp"
#include "dspert/transformer.hpp"

namespace dspert {

// ---------------------------------------------------------------------------
// BiLSTM refinement

struct LstmParams {
  Tensor input_weight;   // d x 4H, gate order i, f, g, o
  Tensor hidden_weight;  // H x 4H
  Tensor bias;           // 4H

  static LstmParams create(std::size_t d, std::size_t hidden, Rng& rng) {
    return {normal_param({d, 4 * hidden}, rng), normal_param({hidden, 4 * hidden}, rng),
            constant_param({4 * hidden}, 0.0)};
  }

  std::size_t hidden() const { return hidden_weight.dim(0); }

  void collect(ParamList& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".input_weight", input_weight);
    out.emplace_back(prefix + ".hidden_weight", hidden_weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

/// Runs an LSTM over the rows of `x` (n x d), forward or reversed; returns the
/// hidden states n x H in the original row order.
inline Tensor run_lstm(const LstmParams& p, const Tensor& x, bool reverse) {
  const std::size_t n = x.dim(0), hs = p.hidden();
  const Tensor projected = add_bias(matmul(x, p.input_weight), p.bias);
  Tensor h = Tensor::zeros({1, hs});
  Tensor c = Tensor::zeros({1, hs});
  std::vector<Tensor> outputs(n);
  for (std::size_t step = 0; step < n; ++step) {
    const std::size_t t = reverse ? n - 1 - step : step;
    const Tensor gates = add(slice_rows(projected, t, t + 1), matmul(h, p.hidden_weight));
    const Tensor in = sigmoid(slice_cols(gates, 0, hs));
    const Tensor forget = sigmoid(slice_cols(gates, hs, 2 * hs));
    const Tensor cand = tanh(slice_cols(gates, 2 * hs, 3 * hs));
    const Tensor out = sigmoid(slice_cols(gates, 3 * hs, 4 * hs));
    c = add(mul(forget, c), mul(in, cand));
    h = mul(out, tanh(c));
    outputs[t] = h;
  }
  return concat_rows(outputs);
}

/// One shared bidirectional LSTM run separately along each width's sequence of
/// span representations, projected back to d.
struct BiLstm {
  LstmParams forward, backward;
  Linear projection;  // 2H -> d
  double dropout_p = 0.0;

  static BiLstm create(std::size_t d, std::size_t hidden, double dropout_p, Rng& rng) {
    BiLstm b;
    b.forward = LstmParams::create(d, hidden, rng);
    b.backward = LstmParams::create(d, hidden, rng);
    b.projection = Linear::create(2 * hidden, d, rng);
    b.dropout_p = dropout_p;
    return b;
  }

  Tensor refine(const Tensor& sequence, const ForwardContext& ctx = {}) const {
    const Tensor both = concat(run_lstm(forward, sequence, false), run_lstm(backward, sequence, true));
    return ctx.dropout(projection(both), dropout_p);
  }

  void collect(ParamList& out, const std::string& prefix) const {
    forward.collect(out, prefix + ".forward");
    backward.collect(out, prefix + ".backward");
    projection.collect(out, prefix + ".projection");
  }
};

/// Refines every width's top span representations; with no BiLSTM the input
/// is returned unchanged.
inline std::vector<Tensor> bilstm_refine(const std::vector<Tensor>& by_width,
                                         const BiLstm* lstm, const ForwardContext& ctx = {}) {
  if (lstm == nullptr) return by_width;
  std::vector<Tensor> refined;
  refined.reserve(by_width.size());
  for (const auto& seq : by_width) refined.push_back(lstm->refine(seq, ctx));
  return refined;
}

// ---------------------------------------------------------------------------
// Entity classifier: z = FFN(s (+) w_width), probs = softmax(W z + b)

struct ClassifierHead {
  Tensor width_table;  // K x d_w, row width-1
  Linear reduce;       // (d + d_w) -> d_z, relu
  Tensor templates;    // W: c x d_z
  Tensor bias;         // b: c
  double dropout_p = 0.0;

  static ClassifierHead create(std::size_t d, std::size_t max_width, std::size_t d_w,
                               std::size_t d_z, std::size_t classes, double dropout_p, Rng& rng) {
    ClassifierHead h;
    h.width_table = normal_param({max_width, d_w}, rng);
    h.reduce = Linear::create(d + d_w, d_z, rng);
    h.templates = normal_param({classes, d_z}, rng);
    h.bias = constant_param({classes}, 0.0);
    h.dropout_p = dropout_p;
    return h;
  }

  std::size_t max_width() const { return width_table.dim(0); }
  std::size_t classes() const { return templates.dim(0); }

  void collect(ParamList& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".width_table", width_table);
    reduce.collect(out, prefix + ".reduce");
    out.emplace_back(prefix + ".templates", templates);
    out.emplace_back(prefix + ".bias", bias);
  }
};

struct ClassifierOutput {
  Tensor logits;     // N x c
  Tensor prelogits;  // N x d_z
};

/// Scores N span representations (N x d) with their widths.
inline ClassifierOutput classify_spans(const ClassifierHead& head, const Tensor& spans,
                                       std::span<const std::size_t> widths,
                                       const ForwardContext& ctx = {}) {
  if (widths.size() != spans.rows()) {
    throw DimensionError("classify_spans: " + std::to_string(widths.size()) + " widths for " +
                         std::to_string(spans.rows()) + " spans");
  }
  std::vector<std::size_t> rows(widths.size());
  for (std::size_t i = 0; i < widths.size(); ++i) {
    if (widths[i] < 1 || widths[i] > head.max_width()) {
      throw ContractError("span width " + std::to_string(widths[i]) + " outside [1, " +
                          std::to_string(head.max_width()) + "]");
    }
    rows[i] = widths[i] - 1;
  }
  const Tensor joined = concat(reshape(spans, {spans.rows(), spans.cols()}),
                               embedding_lookup(head.width_table, rows));
  const Tensor z = ctx.dropout(relu(head.reduce(joined)), head.dropout_p);
  return {add_bias(matmul(z, transpose(head.templates)), head.bias), z};
}

struct SpanClassification {
  Tensor probs;     // c
  Tensor prelogit;  // d_z
};

/// Single-span form of classify_spans.
inline SpanClassification classify_span(const ClassifierHead& head, const Tensor& span,
                                        std::size_t width, const ForwardContext& ctx = {}) {
  const std::size_t w[] = {width};
  const auto out = classify_spans(head, reshape(span, {1, span.size()}), w, ctx);
  return {reshape(softmax(out.logits, 1), {head.classes()}),
          reshape(out.prelogits, {out.prelogits.size()})};
}

// ---------------------------------------------------------------------------
// Biaffine decoder: r = h_s^T U h_e + W (h_s (+) h_e) + b

struct BiaffineHead {
  Linear start, end;  // d -> d_b, relu
  Tensor production;  // U: d_b x c x d_b
  Linear additive;    // 2 d_b -> c, carries b
  bool use_production = true;

  static BiaffineHead create(std::size_t d, std::size_t d_b, std::size_t classes,
                             bool use_production, Rng& rng) {
    BiaffineHead h;
    h.start = Linear::create(d, d_b, rng);
    h.end = Linear::create(d, d_b, rng);
    h.production = normal_param({d_b, classes, d_b}, rng);
    h.additive = Linear::create(2 * d_b, classes, rng);
    h.use_production = use_production;
    return h;
  }

  std::size_t classes() const { return production.dim(1); }

  void collect(ParamList& out, const std::string& prefix) const {
    start.collect(out, prefix + ".start");
    end.collect(out, prefix + ".end");
    if (use_production) out.emplace_back(prefix + ".production", production);
    additive.collect(out, prefix + ".additive");
  }
};

/// Logits for N (start, end) representation pairs, each N x d_b.
inline Tensor biaffine_scores(const BiaffineHead& head, const Tensor& h_start,
                              const Tensor& h_end) {
  Tensor logits = head.additive(concat(h_start, h_end));
  if (head.use_production) logits = add(logits, bilinear(h_start, head.production, h_end));
  return logits;
}

/// Single-pair form of biaffine_scores; shape (c).
inline Tensor biaffine_logits(const BiaffineHead& head, const Tensor& h_s, const Tensor& h_e) {
  const Tensor s = reshape(h_s, {1, h_s.size()});
  const Tensor e = reshape(h_e, {1, h_e.size()});
  return reshape(biaffine_scores(head, s, e), {head.classes()});
}

}  // namespace dspert
