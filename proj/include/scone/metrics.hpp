#ifndef SCONE_METRICS_HPP_
#define SCONE_METRICS_HPP_

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scone/dataset.hpp"
#include "scone/error.hpp"
#include "scone/vocabulary.hpp"

namespace scone {

/// N x C scores and labels, row-major; one row per instance.
struct EvalTable {
  int rows = 0;
  int classes = 0;
  std::vector<double> scores;
  std::vector<Label> labels;
  std::vector<std::string> instance_ids;

  EvalTable() = default;
  EvalTable(int n, int c) : rows(n), classes(c), scores(static_cast<std::size_t>(n) * c, 0.0),
                            labels(static_cast<std::size_t>(n) * c, kMissing), instance_ids(n) {}

  double& score(int i, int c) { return scores[static_cast<std::size_t>(i) * classes + c]; }
  double score(int i, int c) const { return scores[static_cast<std::size_t>(i) * classes + c]; }
  Label& label(int i, int c) { return labels[static_cast<std::size_t>(i) * classes + c]; }
  Label label(int i, int c) const { return labels[static_cast<std::size_t>(i) * classes + c]; }

  std::vector<double> score_column(int c) const {
    std::vector<double> out(rows);
    for (int i = 0; i < rows; ++i) out[i] = score(i, c);
    return out;
  }
  std::vector<Label> label_column(int c) const {
    std::vector<Label> out(rows);
    for (int i = 0; i < rows; ++i) out[i] = label(i, c);
    return out;
  }

  void validate() const {
    if (scores.size() != labels.size() || scores.size() != static_cast<std::size_t>(rows) * classes)
      throw ShapeError("evaluation table shapes disagree");
    for (double s : scores)
      if (!std::isfinite(s)) throw ShapeError("non-finite score in evaluation table");
  }
};

/**
 * Annotated-only average precision: rows labelled -1 are dropped, the rest
 * ranked by descending score (ties by ascending row), and AP is the mean
 * precision at the rank of each positive. nullopt when there is no positive.
 */
inline std::optional<double> average_precision(std::span<const double> scores, std::span<const Label> labels) {
  if (scores.size() != labels.size()) throw ShapeError("average_precision: size mismatch");
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] != kMissing) order.push_back(i);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t hits = 0;
  double sum = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (labels[order[k]] == kPositive) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(k + 1);
    }
  }
  if (hits == 0) return std::nullopt;
  return sum / static_cast<double>(hits);
}

enum class ImbalanceGroup { Head, Medium, Tail };

inline std::string_view to_string(ImbalanceGroup g) {
  switch (g) {
    case ImbalanceGroup::Head: return "head";
    case ImbalanceGroup::Medium: return "medium";
    case ImbalanceGroup::Tail: return "tail";
  }
  return "medium";
}

struct ClassGroups {
  std::vector<ImbalanceGroup> imbalance;
  std::vector<AttributeType> type;
  long long head_min = 500;
  long long tail_max = 50;

  /// Group name -> member classes, imbalance groups first, then types.
  std::map<std::string, std::vector<int>> members() const {
    std::map<std::string, std::vector<int>> out;
    for (std::size_t c = 0; c < imbalance.size(); ++c) out[std::string(to_string(imbalance[c]))].push_back(static_cast<int>(c));
    for (std::size_t c = 0; c < type.size(); ++c) out[std::string(to_string(type[c]))].push_back(static_cast<int>(c));
    return out;
  }
};

/// head if n_pos >= head_min, tail if n_pos < tail_max, otherwise medium.
inline ClassGroups group_classes(const DatasetStats& stats, const AttributeVocabulary& vocab, long long head_min = 500,
                                 long long tail_max = 50) {
  if (!(head_min > tail_max && tail_max >= 0)) throw InvalidConfig("need head_min > tail_max >= 0");
  ClassGroups g;
  g.head_min = head_min;
  g.tail_max = tail_max;
  for (int c = 0; c < stats.num_classes(); ++c) {
    const auto n = stats.n_pos[c];
    g.imbalance.push_back(n >= head_min ? ImbalanceGroup::Head
                                        : (n < tail_max ? ImbalanceGroup::Tail : ImbalanceGroup::Medium));
  }
  g.type = vocab.types();
  return g;
}

struct MapResult {
  double mAP = 0.0;
  std::vector<std::optional<double>> per_class_AP;
  std::map<std::string, double> group_mAP;
  std::vector<std::string> notes;
};

inline MapResult mean_average_precision(const EvalTable& table, const ClassGroups* groups = nullptr) {
  MapResult r;
  r.per_class_AP.resize(table.classes);
  double sum = 0;
  int defined = 0;
  for (int c = 0; c < table.classes; ++c) {
    const auto s = table.score_column(c);
    const auto l = table.label_column(c);
    r.per_class_AP[c] = average_precision(s, l);
    if (r.per_class_AP[c]) {
      sum += *r.per_class_AP[c];
      ++defined;
    } else {
      r.notes.push_back("class " + std::to_string(c) + " has no annotated positive; excluded from mAP");
    }
  }
  if (defined == 0) throw EmptyEvaluation("no class has an annotated positive");
  r.mAP = sum / defined;
  if (groups) {
    for (const auto& [name, members] : groups->members()) {
      double gs = 0;
      int gn = 0;
      for (int c : members)
        if (c < table.classes && r.per_class_AP[c]) {
          gs += *r.per_class_AP[c];
          ++gn;
        }
      if (gn > 0) r.group_mAP[name] = gs / gn;
    }
  }
  return r;
}

struct BalancedAccuracyResult {
  double mA = 0.0;
  int included_classes = 0;
  std::vector<std::string> notes;
};

/// Mean over classes of (TP/P + TN/N) / 2, predicting positive iff score > threshold.
inline BalancedAccuracyResult mean_balanced_accuracy(const EvalTable& table, double threshold = 0.5) {
  BalancedAccuracyResult r;
  double sum = 0;
  for (int c = 0; c < table.classes; ++c) {
    long long P = 0, N = 0, TP = 0, TN = 0;
    for (int i = 0; i < table.rows; ++i) {
      const Label l = table.label(i, c);
      if (l == kMissing) continue;
      const bool pred = table.score(i, c) > threshold;
      if (l == kPositive) {
        ++P;
        TP += pred;
      } else {
        ++N;
        TN += !pred;
      }
    }
    if (P == 0 || N == 0) {
      r.notes.push_back("class " + std::to_string(c) + " lacks annotated positives or negatives; excluded from mA");
      continue;
    }
    sum += (static_cast<double>(TP) / P + static_cast<double>(TN) / N) / 2.0;
    ++r.included_classes;
  }
  if (r.included_classes == 0) throw EmptyEvaluation("no class has both annotated positives and negatives");
  r.mA = sum / r.included_classes;
  return r;
}

struct TopKResult {
  int K = 15;
  double mR_at_K = 0.0;  // per-class recall
  double F1_at_K = 0.0;  // overall F1
  double ov_precision = 0.0, ov_recall = 0.0;
  double pc_precision = 0.0, pc_recall = 0.0, pc_f1 = 0.0;
};

inline double harmonic_mean(double a, double b) { return (a + b) > 0 ? 2.0 * a * b / (a + b) : 0.0; }

/**
 * Top-K metrics. Each row's K highest scores (ties by ascending class) are its
 * positive predictions; predictions on classes the row leaves unannotated are
 * then ignored. Per-class means skip classes without positives (recall) or
 * without predictions (precision).
 */
inline TopKResult topk_metrics(const EvalTable& table, int K = 15) {
  if (K < 1) throw InvalidConfig("K must be >= 1");
  const int C = table.classes;
  std::vector<long long> TP(C, 0), NP(C, 0), P(C, 0);
  std::vector<int> order(C);
  for (int i = 0; i < table.rows; ++i) {
    std::iota(order.begin(), order.end(), 0);
    const int k = std::min(K, C);
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
      const double sa = table.score(i, a), sb = table.score(i, b);
      return sa > sb || (sa == sb && a < b);
    });
    for (int j = 0; j < k; ++j) {
      const int c = order[j];
      const Label l = table.label(i, c);
      if (l == kMissing) continue;
      ++NP[c];
      if (l == kPositive) ++TP[c];
    }
    for (int c = 0; c < C; ++c)
      if (table.label(i, c) == kPositive) ++P[c];
  }
  TopKResult r;
  r.K = K;
  const long long sum_tp = std::accumulate(TP.begin(), TP.end(), 0LL);
  const long long sum_np = std::accumulate(NP.begin(), NP.end(), 0LL);
  const long long sum_p = std::accumulate(P.begin(), P.end(), 0LL);
  r.ov_precision = sum_np > 0 ? static_cast<double>(sum_tp) / sum_np : 0.0;
  r.ov_recall = sum_p > 0 ? static_cast<double>(sum_tp) / sum_p : 0.0;
  r.F1_at_K = harmonic_mean(r.ov_precision, r.ov_recall);
  double rec = 0, prec = 0;
  int n_rec = 0, n_prec = 0;
  for (int c = 0; c < C; ++c) {
    if (P[c] > 0) {
      rec += static_cast<double>(TP[c]) / P[c];
      ++n_rec;
    }
    if (NP[c] > 0) {
      prec += static_cast<double>(TP[c]) / NP[c];
      ++n_prec;
    }
  }
  r.pc_recall = n_rec > 0 ? rec / n_rec : 0.0;
  r.pc_precision = n_prec > 0 ? prec / n_prec : 0.0;
  r.pc_f1 = harmonic_mean(r.pc_precision, r.pc_recall);
  r.mR_at_K = r.pc_recall;
  return r;
}

struct MetricReport {
  double mAP = 0.0, mA = 0.0, mR_at_K = 0.0, F1_at_K = 0.0;
  TopKResult topk;
  std::vector<std::optional<double>> per_class_AP;
  std::map<std::string, double> group_mAP;
  int K = 15;
  double threshold = 0.5;
  long long head_min = 500, tail_max = 50;
  std::vector<std::string> notes;
};

inline MetricReport evaluate_table(const EvalTable& table, const ClassGroups* groups, int K = 15,
                                   double threshold = 0.5) {
  table.validate();
  MetricReport rep;
  auto m = mean_average_precision(table, groups);
  auto a = mean_balanced_accuracy(table, threshold);
  rep.topk = topk_metrics(table, K);
  rep.mAP = m.mAP;
  rep.per_class_AP = std::move(m.per_class_AP);
  rep.group_mAP = std::move(m.group_mAP);
  rep.mA = a.mA;
  rep.mR_at_K = rep.topk.mR_at_K;
  rep.F1_at_K = rep.topk.F1_at_K;
  rep.K = K;
  rep.threshold = threshold;
  if (groups) {
    rep.head_min = groups->head_min;
    rep.tail_max = groups->tail_max;
  }
  rep.notes = std::move(m.notes);
  rep.notes.insert(rep.notes.end(), a.notes.begin(), a.notes.end());
  return rep;
}

inline nlohmann::json report_to_json(const MetricReport& r, const AttributeVocabulary* vocab = nullptr) {
  nlohmann::json j;
  j["mAP"] = r.mAP;
  j["mA"] = r.mA;
  j["mR_at_K"] = r.mR_at_K;
  j["F1_at_K"] = r.F1_at_K;
  j["ov_precision"] = r.topk.ov_precision;
  j["ov_recall"] = r.topk.ov_recall;
  j["pc_precision"] = r.topk.pc_precision;
  j["pc_recall"] = r.topk.pc_recall;
  j["pc_f1"] = r.topk.pc_f1;
  j["group_mAP"] = r.group_mAP;
  nlohmann::json ap = nlohmann::json::object();
  for (std::size_t c = 0; c < r.per_class_AP.size(); ++c) {
    const std::string key = vocab ? vocab->name(static_cast<int>(c)) : std::to_string(c);
    ap[key] = r.per_class_AP[c] ? nlohmann::json(*r.per_class_AP[c]) : nlohmann::json(nullptr);
  }
  j["per_class_AP"] = std::move(ap);
  j["config"] = {{"K", r.K}, {"threshold", r.threshold}, {"head_min", r.head_min}, {"tail_max", r.tail_max}};
  j["notes"] = r.notes;
  return j;
}

inline void write_report_text(std::ostream& out, const MetricReport& r) {
  out << "mAP\t" << r.mAP << '\n'
      << "mA\t" << r.mA << '\n'
      << "mR@" << r.K << '\t' << r.mR_at_K << '\n'
      << "F1@" << r.K << '\t' << r.F1_at_K << '\n';
  for (const auto& [g, v] : r.group_mAP) out << "mAP[" << g << "]\t" << v << '\n';
  out << "# K=" << r.K << " threshold=" << r.threshold << " head_min=" << r.head_min << " tail_max=" << r.tail_max
      << '\n';
}

}  // namespace scone

#endif  // SCONE_METRICS_HPP_
