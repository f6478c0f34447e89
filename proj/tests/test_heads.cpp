#include <gtest/gtest.h>

#include <set>

#include "dspert/gradcheck.hpp"
#include "dspert/heads.hpp"
#include "dspert/model.hpp"
#include "dspert/training.hpp"
#include "oracles.hpp"

using namespace dspert;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale_by = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.normal(0.0, scale_by);
  return Tensor(std::move(shape), std::move(v), true);
}

double sigmoid_d(double x) { return 1.0 / (1.0 + std::exp(-x)); }

oracle::Mat naive_lstm(const LstmParams& p, const oracle::Mat& x, bool reverse) {
  const std::size_t hs = p.hidden(), n = x.size();
  const auto wi = oracle::to_mat(p.input_weight), wh = oracle::to_mat(p.hidden_weight);
  std::vector<double> h(hs, 0.0), c(hs, 0.0);
  oracle::Mat out(n);
  for (std::size_t step = 0; step < n; ++step) {
    const std::size_t t = reverse ? n - 1 - step : step;
    std::vector<double> g(4 * hs);
    for (std::size_t j = 0; j < 4 * hs; ++j) {
      double acc = p.bias.data()[j];
      for (std::size_t k = 0; k < x[t].size(); ++k) acc += x[t][k] * wi[k][j];
      for (std::size_t k = 0; k < hs; ++k) acc += h[k] * wh[k][j];
      g[j] = acc;
    }
    for (std::size_t j = 0; j < hs; ++j) {
      c[j] = sigmoid_d(g[hs + j]) * c[j] + sigmoid_d(g[j]) * std::tanh(g[2 * hs + j]);
      h[j] = sigmoid_d(g[3 * hs + j]) * std::tanh(c[j]);
    }
    out[t] = h;
  }
  return out;
}

ModelConfig toy_config(HeadKind head = HeadKind::DSpERT) {
  ModelConfig c;
  c.vocab_size = 12;
  c.max_len = 10;
  c.num_classes = 3;
  c.num_layers = 2;
  c.hidden_size = 8;
  c.num_heads = 2;
  c.max_span_size = 3;
  c.span_depth = head == HeadKind::DSpERT ? 2 : 0;
  c.lstm_hidden_size = 4;
  c.width_embedding_size = 3;
  c.ffn_hidden_size = 6;
  c.biaffine_size = 5;
  c.head = head;
  return c;
}

// Re-draws every parameter with a larger spread so gradients are not tiny.
void spread_parameters(const Model& m, Rng& rng, double sd = 0.3) {
  for (auto& p : m.parameters())
    for (auto& v : p.tensor.mutable_data()) v = rng.normal(0.0, sd);
}

}  // namespace

TEST(Lstm, MatchesNaiveRecurrence) {
  Rng rng(1);
  LstmParams p = LstmParams::create(3, 4, rng);
  p.input_weight = random_tensor(p.input_weight.shape(), rng, 0.5);
  p.hidden_weight = random_tensor(p.hidden_weight.shape(), rng, 0.5);
  p.bias = random_tensor(p.bias.shape(), rng, 0.5);
  const Tensor x = random_tensor({5, 3}, rng);
  for (bool rev : {false, true})
    EXPECT_LT(oracle::max_abs_diff(naive_lstm(p, oracle::to_mat(x), rev), run_lstm(p, x, rev)), 1e-12);
}

TEST(Lstm, BiLstmGradientsAndIdentity) {
  Rng rng(2);
  BiLstm b = BiLstm::create(3, 2, 0.0, rng);
  for (auto* l : {&b.forward, &b.backward}) {
    l->input_weight = random_tensor(l->input_weight.shape(), rng, 0.5);
    l->hidden_weight = random_tensor(l->hidden_weight.shape(), rng, 0.5);
  }
  b.projection.weight = random_tensor(b.projection.weight.shape(), rng, 0.5);
  const Tensor x = random_tensor({4, 3}, rng);
  const Tensor probe = random_tensor({4, 3}, rng);
  ParamList params;
  b.collect(params, "bilstm");
  auto loss = [&] { return sum_all(mul(b.refine(x), probe)); };
  for (const auto& c : finite_diff_check_params(loss, params)) EXPECT_LT(c.max_relative_error, 1e-5) << c.name;

  const std::vector<Tensor> seqs{x, slice_rows(x, 0, 3)};
  const auto same = bilstm_refine(seqs, nullptr);
  EXPECT_TRUE(same[0].same_node(seqs[0]));
  EXPECT_TRUE(same[1].same_node(seqs[1]));
  const auto refined = bilstm_refine(seqs, &b);
  EXPECT_EQ(refined[1].shape(), (Shape{3, 3}));
}

TEST(Classifier, MatchesFormula) {
  Rng rng(3);
  ClassifierHead h = ClassifierHead::create(4, 3, 2, 5, 3, 0.0, rng);
  h.reduce.weight = random_tensor(h.reduce.weight.shape(), rng);
  h.templates = random_tensor(h.templates.shape(), rng);
  h.bias = random_tensor(h.bias.shape(), rng);
  const Tensor spans = random_tensor({3, 4}, rng);
  const std::vector<std::size_t> widths{1, 3, 2};
  const auto out = classify_spans(h, spans, widths);
  const auto s = oracle::to_mat(spans), wt = oracle::to_mat(h.width_table), tpl = oracle::to_mat(h.templates);
  for (std::size_t n = 0; n < 3; ++n) {
    std::vector<double> in = s[n];
    in.insert(in.end(), wt[widths[n] - 1].begin(), wt[widths[n] - 1].end());
    auto z = oracle::linear({in}, h.reduce)[0];
    for (auto& v : z) v = std::max(0.0, v);
    for (std::size_t j = 0; j < z.size(); ++j) EXPECT_NEAR(out.prelogits.at(n, j), z[j], 1e-12);
    for (std::size_t c = 0; c < 3; ++c) {
      double logit = h.bias.data()[c];
      for (std::size_t j = 0; j < z.size(); ++j) logit += tpl[c][j] * z[j];
      EXPECT_NEAR(out.logits.at(n, c), logit, 1e-12);
    }
    const auto single = classify_span(h, slice_rows(spans, n, n + 1), widths[n]);
    double total = 0.0;
    for (double p : single.probs.data()) total += p;
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
  EXPECT_THROW(classify_spans(h, spans, std::vector<std::size_t>{1, 4, 2}), ContractError);
  EXPECT_THROW(classify_spans(h, spans, std::vector<std::size_t>{1, 2}), DimensionError);
}

TEST(Biaffine, MatchesFormulaWithAndWithoutProduct) {
  Rng rng(4);
  for (bool prod : {true, false}) {
    BiaffineHead h = BiaffineHead::create(4, 3, 2, prod, rng);
    h.production = random_tensor(h.production.shape(), rng);
    h.additive.weight = random_tensor(h.additive.weight.shape(), rng);
    h.additive.bias = random_tensor(h.additive.bias.shape(), rng);
    const Tensor hs = random_tensor({3}, rng), he = random_tensor({3}, rng);
    const Tensor r = biaffine_logits(h, hs, he);
    std::vector<double> in = hs.data();
    in.insert(in.end(), he.data().begin(), he.data().end());
    const auto add = oracle::linear({in}, h.additive)[0];
    for (std::size_t c = 0; c < 2; ++c) {
      double expected = add[c];
      if (prod)
        for (std::size_t p = 0; p < 3; ++p)
          for (std::size_t q = 0; q < 3; ++q)
            expected += hs[p] * h.production.data()[(p * 2 + c) * 3 + q] * he[q];
      EXPECT_NEAR(r[c], expected, 1e-12);
    }
    ParamList params;
    h.collect(params, "b");
    EXPECT_EQ(params.size(), prod ? 7u : 6u);
  }
}

TEST(Model, SpanEnumerationOrderAndCount) {
  const auto spans = enumerate_spans(4, 3);
  ASSERT_EQ(spans.size(), 9u);
  EXPECT_EQ(spans.front(), (Span{0, 1}));
  EXPECT_EQ(spans[4], (Span{0, 2}));
  EXPECT_EQ(spans.back(), (Span{1, 4}));
  EXPECT_EQ(candidate_count(4, 3), 9u);
  EXPECT_EQ(candidate_count(2, 5), 3u);
  for (std::size_t n = 0; n < spans.size(); ++n) EXPECT_EQ(span_index(spans[n].start, spans[n].end, 4), n);
}

TEST(Model, HeadKindsParseAndValidate) {
  for (auto k : {HeadKind::DSpERT, HeadKind::ShallowMax, HeadKind::ShallowMean, HeadKind::ShallowMulAttention,
                 HeadKind::ShallowAddAttention, HeadKind::Biaffine, HeadKind::BiaffineNoProduction})
    EXPECT_EQ(parse_head_kind(to_string(k)), k);
  EXPECT_THROW(parse_head_kind("crf"), ConfigError);

  ModelConfig c = toy_config(HeadKind::Biaffine);
  c.span_depth = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = toy_config(HeadKind::Biaffine);
  c.share_weights = true;
  EXPECT_THROW(c.validate(), ConfigError);
  c = toy_config(HeadKind::BiaffineNoProduction);
  c.use_bilstm = true;
  EXPECT_THROW(c.validate(), ConfigError);
  c = toy_config();
  c.span_depth = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = toy_config();
  c.num_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = toy_config();
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_NO_THROW(toy_config(HeadKind::ShallowAddAttention).validate());
}

TEST(Model, ForwardShapesForEveryHead) {
  const std::vector<std::size_t> ids{2, 3, 4, 5, 6};
  for (auto k : {HeadKind::DSpERT, HeadKind::ShallowMax, HeadKind::ShallowMean, HeadKind::ShallowMulAttention,
                 HeadKind::ShallowAddAttention, HeadKind::Biaffine, HeadKind::BiaffineNoProduction}) {
    Rng rng(5);
    ModelConfig cfg = toy_config(k);
    cfg.use_bilstm = !is_biaffine(k);
    const Model m = Model::create(cfg, rng);
    const SpanScores s = m.forward(ids);
    EXPECT_EQ(s.spans.size(), candidate_count(5, 3));
    EXPECT_EQ(s.logits.shape(), (Shape{candidate_count(5, 3), 3}));
    EXPECT_EQ(s.prelogits.defined(), !is_biaffine(k)) << to_string(k);
  }
}

TEST(Model, ForwardComposesEncoderSpanPathAndClassifier) {
  Rng rng(6);
  const Model m = Model::create(toy_config(), rng);
  spread_parameters(m, rng);
  const std::vector<std::size_t> ids{1, 4, 7, 2};
  EncoderTrace trace;
  const SpanScores s = m.forward(ids, {}, &trace);
  const ModelConfig& cfg = m.config();
  const SpanTrace spans = encode_spans(trace, cfg.span_config(), m.span_params(), m.blocks());
  for (std::size_t n = 0; n < s.spans.size(); ++n) {
    const auto [i, j] = s.spans[n];
    const auto single = classify_span(m.classifier(), span_representation(trace, spans, i, j), j - i);
    const Tensor probs = softmax(slice_rows(s.logits, n, n + 1), 1);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(probs.at(0, c), single.probs[c], 1e-12);
  }
}

TEST(Model, ShortSentencesUseAvailableWidths) {
  Rng rng(7);
  const Model m = Model::create(toy_config(), rng);
  const SpanScores s = m.forward(std::vector<std::size_t>{3, 4});
  EXPECT_EQ(s.spans.size(), 3u);
  EXPECT_EQ(m.forward(std::vector<std::size_t>{3}).spans.size(), 1u);
}

TEST(Model, FullModelGradientsPerGroup) {
  Rng rng(8);
  ModelConfig cfg = toy_config();
  cfg.use_bilstm = true;
  cfg.aggregation = Aggregation::AddAttention;
  const Model m = Model::create(cfg, rng);
  spread_parameters(m, rng);
  const std::vector<std::size_t> ids{1, 4, 7, 2, 9, 3};
  const auto grid = build_target_grid({{0, 2, 1}, {1, 2, 2}, {3, 6, 1}}, 6, 3, 3, 0.1, 1);
  auto loss = [&] { return loss_from_logits(m.forward(ids).logits, grid); };
  const auto checks = finite_diff_check_params(loss, m.named_parameters());
  std::set<std::string> groups;
  for (const auto& c : checks) {
    EXPECT_LT(c.norm_relative_error, 1e-3) << c.name;
    groups.insert(c.name.substr(0, c.name.find('.')));
  }
  EXPECT_EQ(groups, (std::set<std::string>{"embedding", "encoder", "span", "bilstm", "classifier"}));
}

TEST(Model, ParameterGroups) {
  Rng rng(9);
  ModelConfig cfg = toy_config();
  cfg.aggregation = Aggregation::MulAttention;
  cfg.use_bilstm = true;
  const Model m = Model::create(cfg, rng);
  std::set<std::string> names;
  for (const auto& p : m.parameters()) {
    EXPECT_TRUE(names.insert(p.name).second) << "duplicate " << p.name;
    const bool pretrained = p.name.starts_with("embedding") || p.name.starts_with("encoder") ||
                            p.name.starts_with("span.block");
    EXPECT_EQ(p.group == ParamGroup::Pretrained, pretrained) << p.name;
    EXPECT_TRUE(p.tensor.requires_grad());
  }
  EXPECT_TRUE(names.count("span.aggregator.proj"));
}

TEST(Model, CloneAndStateRoundTrip) {
  Rng rng(10);
  const Model m = Model::create(toy_config(), rng);
  spread_parameters(m, rng);
  const Model copy = m.clone();
  const std::vector<std::size_t> ids{1, 2, 3, 4};
  EXPECT_EQ(m.forward(ids).logits.data(), copy.forward(ids).logits.data());
  copy.parameters().front().tensor.mutable_data()[0] += 1.0;
  EXPECT_NE(m.state().front()[0], copy.state().front()[0]);
  Model other = Model::create(toy_config(), rng);
  other.load_state(m.state());
  EXPECT_EQ(m.forward(ids).logits.data(), other.forward(ids).logits.data());
  auto bad = m.state();
  bad.front().pop_back();
  EXPECT_THROW(other.load_state(bad), DimensionError);
}

TEST(Prediction, ArgmaxTiesGoToLowestIndex) {
  EXPECT_EQ(argmax_lowest(std::vector<double>{0.3, 0.3, 0.4}), 2u);
  EXPECT_EQ(argmax_lowest(std::vector<double>{0.4, 0.2, 0.4}), 0u);
  EXPECT_EQ(argmax_lowest(std::vector<double>{0.2, 0.4, 0.4}), 1u);
}

TEST(Prediction, ScoresEveryCandidateAndRejectsLongInput) {
  Rng rng(11);
  const Model m = Model::create(toy_config(), rng);
  spread_parameters(m, rng, 1.0);
  const std::vector<std::size_t> ids{1, 2, 3, 4, 5};
  const auto all = score_all_spans(m, ids);
  ASSERT_EQ(all.size(), candidate_count(5, 3));
  for (const auto& p : all) {
    double total = 0.0;
    for (double v : p.probs) total += v;
    EXPECT_NEAR(total, 1.0, 1e-12);
    EXPECT_EQ(p.type_index, argmax_lowest(p.probs));
    EXPECT_TRUE(p.prelogit.has_value());
  }
  const auto ents = predict_entities(m, ids);
  for (const auto& p : ents) EXPECT_NE(p.type_index, kNonEntity);
  EXPECT_THROW(score_all_spans(m, std::vector<std::size_t>(11, 1)), DataError);
}
