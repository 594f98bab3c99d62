// Reference implementations used as oracles. Deliberately naive: they follow
// the textbook formulas term by term and share no code with the library.
#ifndef SCONE_TESTS_SUPPORT_HPP_
#define SCONE_TESTS_SUPPORT_HPP_

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "scone/dataset.hpp"
#include "scone/metrics.hpp"
#include "scone/rng.hpp"

namespace scone::testing {

/// Central differences of f at x, one coordinate at a time.
inline std::vector<double> numeric_gradient(const std::function<double(const std::vector<double>&)>& f,
                                            std::vector<double> x, double h = 1e-6) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double fp = f(x);
    x[i] = keep - h;
    const double fm = f(x);
    x[i] = keep;
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

/// max_i |a_i - b_i| / max(|a_i| + |b_i|, floor); the floor keeps tiny entries from dominating.
template <typename A, typename B>
double max_relative_error(const A& a, const B& b, double floor = 1e-4) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max(std::abs(a[i]) + std::abs(b[i]), floor);
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

// Ranking oracle: position of entry i among the annotated rows (1-based),
// counting rows that beat it on score or tie with a smaller index.
inline long rank_of(const EvalTable& t, int c, int i) {
  long r = 1;
  for (int j = 0; j < t.rows; ++j) {
    if (j == i || t.label(j, c) == kMissing) continue;
    if (t.score(j, c) > t.score(i, c) || (t.score(j, c) == t.score(i, c) && j < i)) ++r;
  }
  return r;
}

/// AP_c = (1/P) sum over positives of Precision(rank).
inline double oracle_ap(const EvalTable& t, int c, bool* defined) {
  double P = 0, sum = 0;
  for (int i = 0; i < t.rows; ++i) {
    if (t.label(i, c) != kPositive) continue;
    P += 1;
    const long k = rank_of(t, c, i);
    double hits = 0;
    for (int j = 0; j < t.rows; ++j)
      if (t.label(j, c) == kPositive && rank_of(t, c, j) <= k) hits += 1;
    sum += hits / static_cast<double>(k);
  }
  *defined = P > 0;
  return P > 0 ? sum / P : 0.0;
}

inline double oracle_map(const EvalTable& t) {
  double s = 0;
  int n = 0;
  for (int c = 0; c < t.classes; ++c) {
    bool ok = false;
    const double ap = oracle_ap(t, c, &ok);
    if (ok) {
      s += ap;
      ++n;
    }
  }
  return n ? s / n : std::numeric_limits<double>::quiet_NaN();
}

inline double oracle_ma(const EvalTable& t, double thr = 0.5) {
  double s = 0;
  int n = 0;
  for (int c = 0; c < t.classes; ++c) {
    double tp = 0, tn = 0, p = 0, q = 0;
    for (int i = 0; i < t.rows; ++i) {
      if (t.label(i, c) == kPositive) {
        p += 1;
        if (t.score(i, c) > thr) tp += 1;
      } else if (t.label(i, c) == kNegative) {
        q += 1;
        if (!(t.score(i, c) > thr)) tn += 1;
      }
    }
    if (p > 0 && q > 0) {
      s += 0.5 * (tp / p + tn / q);
      ++n;
    }
  }
  return n ? s / n : std::numeric_limits<double>::quiet_NaN();
}

struct OracleTopK {
  double mR = 0, F1 = 0, ovP = 0, ovR = 0;
};

inline OracleTopK oracle_topk(const EvalTable& t, int K) {
  std::vector<double> tp(t.classes, 0), np(t.classes, 0), pos(t.classes, 0);
  for (int i = 0; i < t.rows; ++i) {
    for (int c = 0; c < t.classes; ++c) {
      int better = 0;
      for (int d = 0; d < t.classes; ++d)
        if (t.score(i, d) > t.score(i, c) || (t.score(i, d) == t.score(i, c) && d < c)) ++better;
      const bool predicted = better < K;
      const Label l = t.label(i, c);
      if (l == kPositive) pos[c] += 1;
      if (predicted && l != kMissing) {
        np[c] += 1;
        if (l == kPositive) tp[c] += 1;
      }
    }
  }
  OracleTopK r;
  double stp = 0, snp = 0, sp = 0, rec = 0;
  int nrec = 0;
  for (int c = 0; c < t.classes; ++c) {
    stp += tp[c];
    snp += np[c];
    sp += pos[c];
    if (pos[c] > 0) {
      rec += tp[c] / pos[c];
      ++nrec;
    }
  }
  r.ovP = snp > 0 ? stp / snp : 0;
  r.ovR = sp > 0 ? stp / sp : 0;
  r.F1 = (r.ovP + r.ovR) > 0 ? 2 * r.ovP * r.ovR / (r.ovP + r.ovR) : 0;
  r.mR = nrec ? rec / nrec : 0;
  return r;
}

/**
 * Single-label supervised contrastive loss over unit-normalized z, summed over
 * anchors: -1/|P(i)| sum_p log(exp(z_i.z_p/tau) / sum_{a != i} exp(z_i.z_a/tau)).
 */
inline double reference_supcon(const std::vector<std::vector<double>>& z, const std::vector<int>& y, double tau) {
  const std::size_t n = z.size();
  std::vector<std::vector<double>> u(n);
  for (std::size_t i = 0; i < n; ++i) {
    double norm = 0;
    for (double v : z[i]) norm += v * v;
    norm = std::sqrt(norm);
    for (double v : z[i]) u[i].push_back(v / norm);
  }
  auto dot = [&](std::size_t a, std::size_t b) {
    double s = 0;
    for (std::size_t k = 0; k < u[a].size(); ++k) s += u[a][k] * u[b][k];
    return s;
  };
  double loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> P;
    for (std::size_t p = 0; p < n; ++p)
      if (p != i && y[p] == y[i]) P.push_back(p);
    if (P.empty()) continue;
    double denom = 0;
    for (std::size_t a = 0; a < n; ++a)
      if (a != i) denom += std::exp(dot(i, a) / tau);
    double inner = 0;
    for (std::size_t p : P) inner += std::log(std::exp(dot(i, p) / tau) / denom);
    loss += -inner / static_cast<double>(P.size());
  }
  return loss;
}

/// Multi-label form, enumerating every (anchor, class, positive, other) term. A holds C row-major d x d probes.
inline double reference_supcon_multilabel(const std::vector<std::vector<double>>& z,
                                          const std::vector<std::vector<Label>>& y, const std::vector<double>& A,
                                          int d, double tau) {
  const std::size_t n = z.size();
  const std::size_t C = y.empty() ? 0 : y[0].size();
  double loss = 0;
  for (std::size_t c = 0; c < C; ++c) {
    std::vector<std::vector<double>> e(n, std::vector<double>(d, 0.0));
    for (std::size_t j = 0; j < n; ++j) {
      double norm = 0;
      for (int r = 0; r < d; ++r) {
        for (int k = 0; k < d; ++k) e[j][r] += A[(c * d + r) * d + k] * z[j][k];
        norm += e[j][r] * e[j][r];
      }
      for (auto& v : e[j]) v /= std::sqrt(norm);
    }
    auto dot = [&](std::size_t a, std::size_t b) {
      double s = 0;
      for (int k = 0; k < d; ++k) s += e[a][k] * e[b][k];
      return s;
    };
    for (std::size_t i = 0; i < n; ++i) {
      if (y[i][c] != kPositive) continue;
      std::vector<std::size_t> P;
      for (std::size_t p = 0; p < n; ++p)
        if (p != i && y[p][c] == kPositive) P.push_back(p);
      if (P.empty()) continue;
      double denom = 0;
      for (std::size_t j = 0; j < n; ++j)
        if (j != i) denom += std::exp(dot(i, j) / tau);
      for (std::size_t p : P) loss -= std::log(std::exp(dot(i, p) / tau) / denom) / static_cast<double>(P.size());
    }
  }
  return loss;
}

inline EvalTable random_table(Rng& rng, int max_rows = 50, int max_classes = 10, bool ties = true) {
  const int n = 1 + static_cast<int>(rng.below(max_rows));
  const int c = 1 + static_cast<int>(rng.below(max_classes));
  EvalTable t(n, c);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < c; ++k) {
      t.score(i, k) = ties ? std::round(rng.uniform() * 20) / 20 : rng.uniform();
      const double u = rng.uniform();
      t.label(i, k) = u < 0.35 ? kPositive : (u < 0.7 ? kNegative : kMissing);
    }
  return t;
}

}  // namespace scone::testing

#endif  // SCONE_TESTS_SUPPORT_HPP_
