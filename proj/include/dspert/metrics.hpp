#pragma once

#include <array>
#include <map>
#include <set>
#include <vector>

#include "dspert/data.hpp"
#include "dspert/errors.hpp"

namespace dspert {

struct PRF {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;

  /// Zero denominators give zero rates.
  static PRF from_counts(std::size_t tp, std::size_t fp, std::size_t fn) {
    PRF r{0.0, 0.0, 0.0, tp, fp, fn};
    if (tp + fp > 0) r.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    if (tp + fn > 0) r.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
    if (r.precision + r.recall > 0.0)
      r.f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall);
    return r;
  }

  PRF& operator+=(const PRF& other) {
    *this = from_counts(tp + other.tp, fp + other.fp, fn + other.fn);
    return *this;
  }
};

/// Exact (start, end, type) matching.
inline PRF micro_prf(const std::set<Entity>& pred, const std::set<Entity>& gold) {
  std::size_t tp = 0;
  for (const auto& p : pred) tp += gold.count(p);
  return PRF::from_counts(tp, pred.size() - tp, gold.size() - tp);
}

namespace detail {

inline void require_aligned(std::size_t a, std::size_t b) {
  if (a != b) {
    throw DimensionError("prediction/gold sentence counts differ: " + std::to_string(a) + " vs " +
                         std::to_string(b));
  }
}

}  // namespace detail

/// Micro counts pooled over a split.
inline PRF micro_prf(const std::vector<std::set<Entity>>& preds,
                     const std::vector<std::set<Entity>>& golds) {
  detail::require_aligned(preds.size(), golds.size());
  PRF total;
  for (std::size_t s = 0; s < preds.size(); ++s) total += micro_prf(preds[s], golds[s]);
  return total;
}

/// Buckets keyed by span width. With merge_above > 0 every width beyond it
/// lands in bucket merge_above + 1. Empty buckets are omitted.
inline std::map<std::size_t, PRF> f1_by_length(const std::vector<std::set<Entity>>& preds,
                                               const std::vector<std::set<Entity>>& golds,
                                               std::size_t merge_above = 0) {
  detail::require_aligned(preds.size(), golds.size());
  auto bucket = [merge_above](const Entity& e) {
    return merge_above > 0 && e.width() > merge_above ? merge_above + 1 : e.width();
  };
  std::map<std::size_t, std::array<std::size_t, 3>> counts;  // tp, fp, fn
  for (std::size_t s = 0; s < preds.size(); ++s) {
    for (const auto& p : preds[s]) ++counts[bucket(p)][golds[s].count(p) ? 0 : 1];
    for (const auto& g : golds[s])
      if (!preds[s].count(g)) ++counts[bucket(g)][2];
  }
  std::map<std::size_t, PRF> out;
  for (const auto& [w, c] : counts) out[w] = PRF::from_counts(c[0], c[1], c[2]);
  return out;
}

/// Buckets keyed by the nestedness tag of each span against its sentence's
/// gold set. Empty buckets are omitted.
inline std::map<NestednessTag, PRF> f1_by_nestedness(const std::vector<std::set<Entity>>& preds,
                                                     const std::vector<std::set<Entity>>& golds,
                                                     Containment mode = Containment::Strict) {
  detail::require_aligned(preds.size(), golds.size());
  std::map<NestednessTag, std::array<std::size_t, 3>> counts;
  for (std::size_t s = 0; s < preds.size(); ++s) {
    const auto& gold = golds[s];
    for (const auto& p : preds[s])
      ++counts[nestedness_tag(p.start, p.end, gold, mode)][gold.count(p) ? 0 : 1];
    for (const auto& g : gold)
      if (!preds[s].count(g)) ++counts[nestedness_tag(g.start, g.end, gold, mode)][2];
  }
  std::map<NestednessTag, PRF> out;
  for (const auto& [tag, c] : counts) out[tag] = PRF::from_counts(c[0], c[1], c[2]);
  return out;
}

}  // namespace dspert
