#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <vector>

#include "dspert/data.hpp"
#include "dspert/model.hpp"
#include "dspert/rng.hpp"

namespace dspert {

// ---------------------------------------------------------------------------
// Pre-logit statistics

struct LabeledVector {
  std::vector<double> values;
  std::size_t type_index = 0;  // 0 = non-entity
};

struct PrelogitOptions {
  std::uint64_t seed = 1;
  std::size_t negative_ratio = 10;   // negatives sampled per entity
  std::size_t pair_cap = 1'000'000;  // beyond this, pairs are sampled
};

struct PrelogitReport {
  std::size_t entity_count = 0;
  std::size_t negative_count = 0;
  double mean_l2 = 0.0;
  std::optional<double> within_class_cosine;
  std::optional<double> between_class_cosine;  // pos vs pos, different types
  std::optional<double> pos_neg_cosine;
  std::vector<double> template_norms;
  double template_mean_norm = 0.0;
  std::optional<double> template_abs_cosine;
  std::optional<double> template_abs_cosine_pos_pos;
  std::optional<double> template_abs_cosine_pos_neg;
  bool pairs_sampled = false;  // true when some population exceeded pair_cap
};

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double l2_norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

/// Cosine similarity; zero vectors give 0.
inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  const double na = l2_norm(a), nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

namespace detail {

// Mean of f(i, j) over the pairs accepted by `keep`, drawn from index ranges
// [0, n) x [0, m) (or i < j when `triangle`). Exhaustive when the population
// fits in `cap`, else `cap` seeded draws.
template <typename Keep, typename F>
std::optional<double> mean_over_pairs(std::size_t n, std::size_t m, bool triangle,
                                      std::size_t population, std::size_t cap, Rng& rng,
                                      bool& sampled, Keep keep, F f) {
  if (population == 0) return std::nullopt;
  double total = 0.0;
  std::size_t count = 0;
  if (population <= cap) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = triangle ? i + 1 : 0; j < m; ++j)
        if (keep(i, j)) {
          total += f(i, j);
          ++count;
        }
  } else {
    sampled = true;
    while (count < cap) {
      std::size_t i = rng.below(n), j = rng.below(m);
      if (triangle) {
        if (i == j) continue;
        if (i > j) std::swap(i, j);
      }
      if (!keep(i, j)) continue;
      total += f(i, j);
      ++count;
    }
  }
  if (count == 0) return std::nullopt;
  return total / static_cast<double>(count);
}

}  // namespace detail

/// Norm and cosine statistics of entity pre-logits, plus the geometry of the
/// classifier's template rows (`templates` is c x d_z, row 0 non-entity).
/// Negatives are sampled from `negative_pool` (negative_ratio per entity).
inline PrelogitReport prelogit_report(const std::vector<LabeledVector>& entities,
                                      const std::vector<LabeledVector>& negative_pool,
                                      const Tensor& templates, const PrelogitOptions& opt = {}) {
  Rng rng(opt.seed);
  PrelogitReport r;
  r.entity_count = entities.size();

  std::vector<const LabeledVector*> negatives;
  const std::size_t want = opt.negative_ratio * entities.size();
  if (negative_pool.size() <= want) {
    for (const auto& v : negative_pool) negatives.push_back(&v);
  } else {
    std::vector<std::size_t> order(negative_pool.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    order.resize(want);
    std::sort(order.begin(), order.end());
    for (std::size_t i : order) negatives.push_back(&negative_pool[i]);
  }
  r.negative_count = negatives.size();

  if (!entities.empty()) {
    double total = 0.0;
    for (const auto& e : entities) total += l2_norm(e.values);
    r.mean_l2 = total / static_cast<double>(entities.size());
  }

  std::map<std::size_t, std::size_t> per_type;
  for (const auto& e : entities) ++per_type[e.type_index];
  std::size_t within = 0, all_pairs = entities.size() * (entities.size() - (entities.empty() ? 0 : 1)) / 2;
  for (const auto& [t, n] : per_type) within += n * (n - 1) / 2;
  const std::size_t ne = entities.size();

  auto entity_cos = [&](std::size_t i, std::size_t j) {
    return cosine(entities[i].values, entities[j].values);
  };
  r.within_class_cosine = detail::mean_over_pairs(
      ne, ne, true, within, opt.pair_cap, rng, r.pairs_sampled,
      [&](std::size_t i, std::size_t j) { return entities[i].type_index == entities[j].type_index; },
      entity_cos);
  r.between_class_cosine = detail::mean_over_pairs(
      ne, ne, true, all_pairs - within, opt.pair_cap, rng, r.pairs_sampled,
      [&](std::size_t i, std::size_t j) { return entities[i].type_index != entities[j].type_index; },
      entity_cos);
  r.pos_neg_cosine = detail::mean_over_pairs(
      ne, negatives.size(), false, ne * negatives.size(), opt.pair_cap, rng, r.pairs_sampled,
      [](std::size_t, std::size_t) { return true; },
      [&](std::size_t i, std::size_t j) { return cosine(entities[i].values, negatives[j]->values); });

  const std::size_t c = templates.dim(0), dz = templates.dim(1);
  std::vector<std::vector<double>> rows(c);
  for (std::size_t k = 0; k < c; ++k) {
    rows[k].assign(templates.data().begin() + static_cast<std::ptrdiff_t>(k * dz),
                   templates.data().begin() + static_cast<std::ptrdiff_t>((k + 1) * dz));
    r.template_norms.push_back(l2_norm(rows[k]));
    r.template_mean_norm += r.template_norms.back() / static_cast<double>(c);
  }
  auto abs_cos_mean = [&](auto keep) -> std::optional<double> {
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t a = 0; a < c; ++a)
      for (std::size_t b = a + 1; b < c; ++b)
        if (keep(a, b)) {
          total += std::abs(cosine(rows[a], rows[b]));
          ++count;
        }
    if (count == 0) return std::nullopt;
    return total / static_cast<double>(count);
  };
  r.template_abs_cosine = abs_cos_mean([](std::size_t, std::size_t) { return true; });
  r.template_abs_cosine_pos_pos = abs_cos_mean([](std::size_t a, std::size_t) { return a != kNonEntity; });
  r.template_abs_cosine_pos_neg = abs_cos_mean([](std::size_t a, std::size_t) { return a == kNonEntity; });
  return r;
}

struct PrelogitSet {
  std::vector<LabeledVector> entities;   // gold spans within the span limit
  std::vector<LabeledVector> negatives;  // every other candidate
};

/// Pre-logit vectors of every candidate span, labelled by the gold set.
inline PrelogitSet collect_prelogits(const Model& model, const Vocab& vocab,
                                     const std::vector<Sentence>& sentences) {
  PrelogitSet out;
  for (const auto& s : sentences) {
    std::map<std::pair<std::size_t, std::size_t>, std::size_t> gold;
    for (const auto& e : s.gold)
      if (auto t = vocab.type_index(e.type)) gold[{e.start, e.end}] = *t;
    for (auto& p : score_all_spans(model, vocab.encode(s.tokens))) {
      if (!p.prelogit) throw ContractError("model does not expose pre-logit representations");
      auto it = gold.find({p.start, p.end});
      if (it != gold.end()) {
        out.entities.push_back({std::move(*p.prelogit), it->second});
      } else {
        out.negatives.push_back({std::move(*p.prelogit), kNonEntity});
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// PCA by power iteration with deflation

struct PcaResult {
  std::vector<std::vector<double>> components;   // k x d, orthonormal
  std::vector<double> eigenvalues;               // covariance eigenvalues
  std::vector<double> explained_ratio;           // eigenvalue / total variance
  std::vector<std::vector<double>> projections;  // n x k
  std::vector<double> mean;
  bool rank_deficient = false;  // fewer than k components had positive variance
};

struct PcaOptions {
  std::size_t max_iterations = 200'000;
  double tolerance = 1e-14;
  std::uint64_t seed = 17;
};

inline PcaResult pca_project(const std::vector<std::vector<double>>& vectors, std::size_t k = 2,
                             const PcaOptions& opt = {}) {
  if (vectors.size() < k + 1) {
    throw ContractError("PCA needs at least " + std::to_string(k + 1) + " vectors, got " +
                        std::to_string(vectors.size()));
  }
  const std::size_t n = vectors.size(), d = vectors.front().size();
  for (const auto& v : vectors)
    if (v.size() != d) throw DimensionError("PCA input vectors differ in length");

  PcaResult r;
  r.mean.assign(d, 0.0);
  for (const auto& v : vectors)
    for (std::size_t j = 0; j < d; ++j) r.mean[j] += v[j] / static_cast<double>(n);

  std::vector<double> cov(d * d, 0.0);
  for (const auto& v : vectors)
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b)
        cov[a * d + b] += (v[a] - r.mean[a]) * (v[b] - r.mean[b]) / static_cast<double>(n - 1);
  double trace = 0.0;
  for (std::size_t a = 0; a < d; ++a) trace += cov[a * d + a];

  Rng rng(opt.seed);
  const std::size_t wanted = std::min(k, d);
  if (wanted < k) r.rank_deficient = true;
  for (std::size_t comp = 0; comp < wanted; ++comp) {
    std::vector<double> v(d);
    for (double& x : v) x = rng.normal();
    double norm = l2_norm(v);
    for (double& x : v) x /= norm;
    std::vector<double> next(d);
    for (std::size_t it = 0; it < opt.max_iterations; ++it) {
      for (std::size_t a = 0; a < d; ++a) {
        double s = 0.0;
        for (std::size_t b = 0; b < d; ++b) s += cov[a * d + b] * v[b];
        next[a] = s;
      }
      norm = l2_norm(next);
      if (norm == 0.0) break;
      double change = 0.0;
      for (std::size_t a = 0; a < d; ++a) {
        next[a] /= norm;
        change = std::max(change, std::abs(next[a] - v[a]));
      }
      v.swap(next);
      if (change < opt.tolerance) break;
    }
    double lambda = 0.0;
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) lambda += v[a] * cov[a * d + b] * v[b];
    if (!(lambda > 1e-12 * std::max(trace, 1e-300))) {
      r.rank_deficient = true;
      break;
    }
    std::size_t big = 0;
    for (std::size_t a = 1; a < d; ++a)
      if (std::abs(v[a]) > std::abs(v[big])) big = a;
    if (v[big] < 0.0)
      for (double& x : v) x = -x;
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) cov[a * d + b] -= lambda * v[a] * v[b];
    r.components.push_back(v);
    r.eigenvalues.push_back(lambda);
    r.explained_ratio.push_back(trace > 0.0 ? lambda / trace : 0.0);
  }

  r.projections.assign(n, std::vector<double>(r.components.size(), 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < r.components.size(); ++c)
      for (std::size_t a = 0; a < d; ++a)
        r.projections[i][c] += (vectors[i][a] - r.mean[a]) * r.components[c][a];
  return r;
}

}  // namespace dspert
