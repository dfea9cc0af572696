#pragma once

#include <algorithm>
#include <cstdio>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ptgcn/corpus.hpp"

namespace ptgcn {

using TripletSets = std::map<std::string, std::vector<Triplet>>;

inline TripletSets gold_sets(const DatasetSplit &split) {
  TripletSets out;
  for (const auto &s : split.sentences)
    out[s.id] = split.annotation(s.id).triplets;
  return out;
}

/// Micro-averaged exact-match scores. Empty denominators count as perfect:
/// precision is 1 with no predictions, recall is 1 with no gold items.
struct MetricReport {
  double precision = 1.0;
  double recall = 1.0;
  double f1 = 1.0;
  std::size_t num_pred = 0;
  std::size_t num_gold = 0;
  std::size_t num_correct = 0;

  static MetricReport from_counts(std::size_t pred, std::size_t gold,
                                  std::size_t correct) {
    MetricReport r;
    r.num_pred = pred;
    r.num_gold = gold;
    r.num_correct = correct;
    r.precision = pred == 0 ? 1.0 : double(correct) / double(pred);
    r.recall = gold == 0 ? 1.0 : double(correct) / double(gold);
    double s = r.precision + r.recall;
    r.f1 = s == 0.0 ? 0.0 : 2.0 * r.precision * r.recall / s;
    return r;
  }
};

namespace detail {

inline void require_same_ids(const TripletSets &pred, const TripletSets &gold) {
  if (pred.size() != gold.size())
    throw ValidationError("prediction and gold cover different sentence sets");
  for (auto p = pred.begin(), g = gold.begin(); p != pred.end(); ++p, ++g)
    if (p->first != g->first)
      throw ValidationError("prediction id '" + p->first +
                            "' has no gold counterpart");
}

/// Matches items one-to-one (multiset intersection size).
template <class Item>
std::size_t count_matches(std::vector<Item> pred, std::vector<Item> gold) {
  std::sort(pred.begin(), pred.end());
  std::sort(gold.begin(), gold.end());
  std::vector<Item> common;
  std::set_intersection(pred.begin(), pred.end(), gold.begin(), gold.end(),
                        std::back_inserter(common));
  return common.size();
}

template <class Item, class Project>
MetricReport projected_metrics(const TripletSets &pred, const TripletSets &gold,
                               Project project) {
  require_same_ids(pred, gold);
  std::size_t np = 0, ng = 0, nc = 0;
  for (const auto &[id, gts] : gold) {
    std::set<Item> ps, gs;
    for (const auto &t : pred.at(id))
      ps.insert(project(t));
    for (const auto &t : gts)
      gs.insert(project(t));
    np += ps.size();
    ng += gs.size();
    nc += count_matches(std::vector<Item>(ps.begin(), ps.end()),
                        std::vector<Item>(gs.begin(), gs.end()));
  }
  return MetricReport::from_counts(np, ng, nc);
}

} // namespace detail

/// Exact match on aspect span, opinion span and sentiment.
inline MetricReport triplet_metrics(const TripletSets &pred,
                                    const TripletSets &gold) {
  detail::require_same_ids(pred, gold);
  std::size_t np = 0, ng = 0, nc = 0;
  for (const auto &[id, gts] : gold) {
    const auto &pts = pred.at(id);
    np += pts.size();
    ng += gts.size();
    nc += detail::count_matches(pts, gts);
  }
  return MetricReport::from_counts(np, ng, nc);
}

enum class Subtask { AESC, AOPE };

/// AESC scores (aspect, sentiment) pairs, AOPE (aspect, opinion) pairs;
/// duplicates within a sentence collapse.
inline MetricReport subtask_metrics(const TripletSets &pred,
                                    const TripletSets &gold, Subtask task) {
  if (task == Subtask::AESC)
    return detail::projected_metrics<std::pair<Span, Sentiment>>(
        pred, gold,
        [](const Triplet &t) { return std::make_pair(t.aspect, t.sentiment); });
  return detail::projected_metrics<std::pair<Span, Span>>(
      pred, gold,
      [](const Triplet &t) { return std::make_pair(t.aspect, t.opinion); });
}

/// Percentages of all predicted triplets.
struct ErrorBreakdown {
  double entity_error_rate = 0.0;
  double sentiment_error_rate = 0.0;
  double correct_rate = 0.0;
  std::size_t num_pred = 0;
  std::size_t entity_errors = 0;
  std::size_t sentiment_errors = 0;
  std::size_t correct = 0;
};

/// A wrong prediction is a sentiment error when some gold triplet has the
/// same two spans, an entity error otherwise.
inline ErrorBreakdown error_analysis(const TripletSets &pred,
                                     const TripletSets &gold) {
  detail::require_same_ids(pred, gold);
  ErrorBreakdown e;
  for (const auto &[id, gts] : gold) {
    std::multiset<Triplet> unmatched(gts.begin(), gts.end());
    std::vector<const Triplet *> wrong;
    for (const auto &p : pred.at(id)) {
      ++e.num_pred;
      auto it = unmatched.find(p);
      if (it != unmatched.end()) {
        unmatched.erase(it);
        ++e.correct;
      } else {
        wrong.push_back(&p);
      }
    }
    for (const auto *p : wrong) {
      bool same_spans = std::any_of(gts.begin(), gts.end(), [&](const Triplet &g) {
        return g.aspect == p->aspect && g.opinion == p->opinion;
      });
      ++(same_spans ? e.sentiment_errors : e.entity_errors);
    }
  }
  if (e.num_pred > 0) {
    double scale = 100.0 / double(e.num_pred);
    e.entity_error_rate = scale * double(e.entity_errors);
    e.sentiment_error_rate = scale * double(e.sentiment_errors);
    e.correct_rate = scale * double(e.correct);
  }
  return e;
}

inline nlohmann::json to_json(const MetricReport &r) {
  return {{"precision", r.precision}, {"recall", r.recall}, {"f1", r.f1},
          {"num_pred", r.num_pred},   {"num_gold", r.num_gold},
          {"num_correct", r.num_correct}};
}

inline nlohmann::json to_json(const ErrorBreakdown &e) {
  return {{"entity_error_rate", e.entity_error_rate},
          {"sentiment_error_rate", e.sentiment_error_rate},
          {"correct_rate", e.correct_rate},
          {"num_pred", e.num_pred},
          {"entity_errors", e.entity_errors},
          {"sentiment_errors", e.sentiment_errors},
          {"correct", e.correct}};
}

/// Aligned text table, one metric row per name.
inline std::string format_report_table(
    const std::vector<std::pair<std::string, MetricReport>> &rows) {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-10s %9s %9s %9s %7s %7s %7s\n", "task",
                "precision", "recall", "f1", "pred", "gold", "correct");
  out += buf;
  for (const auto &[name, r] : rows) {
    std::snprintf(buf, sizeof buf, "%-10s %9.4f %9.4f %9.4f %7zu %7zu %7zu\n",
                  name.c_str(), r.precision, r.recall, r.f1, r.num_pred,
                  r.num_gold, r.num_correct);
    out += buf;
  }
  return out;
}

inline std::string format_error_table(const ErrorBreakdown &e) {
  char buf[200];
  std::snprintf(buf, sizeof buf,
                "errors     entity %6.2f%%  sentiment %6.2f%%  correct %6.2f%%  "
                "(of %zu predictions)\n",
                e.entity_error_rate, e.sentiment_error_rate, e.correct_rate,
                e.num_pred);
  return buf;
}

} // namespace ptgcn
