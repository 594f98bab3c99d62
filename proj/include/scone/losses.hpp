#ifndef SCONE_LOSSES_HPP_
#define SCONE_LOSSES_HPP_

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "scone/config.hpp"
#include "scone/dataset.hpp"
#include "scone/error.hpp"
#include "scone/nn.hpp"
#include "scone/tensor.hpp"

namespace scone {

inline constexpr double kScoreEpsilon = 1e-7;

struct LossWeights {
  std::vector<double> w, p, n;
  double alpha = 0.0;
  double missing_weight = 0.0;

  int num_classes() const { return static_cast<int>(w.size()); }

  static LossWeights uniform(int classes, double missing_weight = 0.0) {
    return {std::vector<double>(classes, 1.0), std::vector<double>(classes, 1.0), std::vector<double>(classes, 1.0),
            0.0, missing_weight};
  }
};

namespace detail {
inline double floored_count(std::int64_t n, int c, const char* what) {
  if (n > 0) return static_cast<double>(n);
  warn("class " + std::to_string(c) + " has zero " + what + " examples; using count 1");
  return 1.0;
}
}  // namespace detail

/**
 * w_c ~ n_pos^-alpha normalized to sum C; p_c ~ n_pos^-alpha and
 * n_c ~ n_neg^-alpha normalized per class so that p_c + n_c = 2.
 */
inline LossWeights compute_class_weights(const DatasetStats& stats, double alpha, double missing_weight) {
  if (alpha < 0) throw InvalidConfig("alpha must be >= 0");
  if (!(missing_weight >= 0 && missing_weight <= 1)) throw InvalidConfig("missing_weight must be in [0, 1]");
  const int C = stats.num_classes();
  LossWeights lw;
  lw.alpha = alpha;
  lw.missing_weight = missing_weight;
  lw.w.resize(C);
  lw.p.resize(C);
  lw.n.resize(C);
  double total = 0;
  for (int c = 0; c < C; ++c) {
    const double pos = std::pow(detail::floored_count(stats.n_pos[c], c, "positive"), -alpha);
    const double neg = std::pow(detail::floored_count(stats.n_neg[c], c, "negative"), -alpha);
    lw.w[c] = pos;
    total += pos;
    lw.p[c] = 2.0 * pos / (pos + neg);
    lw.n[c] = 2.0 * neg / (pos + neg);
  }
  for (auto& v : lw.w) v *= C / total;
  return lw;
}

template <typename T>
struct LossAndGrad {
  T loss = T(0);
  Vec<T> grad;  // w.r.t. the loss input (scores, logits, ...)
};

/// Reweighted BCE for one instance, with soft negatives on missing labels.
template <typename T>
LossAndGrad<T> rw_bce(const Vec<T>& scores, const LabelVector& labels, const LossWeights& lw) {
  const Eigen::Index C = scores.size();
  check_shape(static_cast<Eigen::Index>(labels.size()) == C && lw.num_classes() == C, "rw_bce size mismatch");
  LossAndGrad<T> out;
  out.grad = Vec<T>::Zero(C);
  const T eps = static_cast<T>(kScoreEpsilon);
  for (Eigen::Index c = 0; c < C; ++c) {
    const T y = std::clamp(scores[c], eps, T(1) - eps);
    const bool clamped = y != scores[c];
    const T w = static_cast<T>(lw.w[c]);
    if (labels[c] == kPositive) {
      const T k = w * static_cast<T>(lw.p[c]);
      out.loss -= k * std::log(y);
      if (!clamped) out.grad[c] = -k / y;
    } else {
      T k = w * static_cast<T>(lw.n[c]);
      if (labels[c] == kMissing) k *= static_cast<T>(lw.missing_weight);
      if (k == T(0)) continue;
      out.loss -= k * std::log(T(1) - y);
      if (!clamped) out.grad[c] = k / (T(1) - y);
    }
  }
  return out;
}

/// Same loss evaluated from logits; the gradient is w.r.t. the logits.
template <typename T>
LossAndGrad<T> rw_bce_from_logits(const Vec<T>& logits, const LabelVector& labels, const LossWeights& lw) {
  const Eigen::Index C = logits.size();
  check_shape(static_cast<Eigen::Index>(labels.size()) == C && lw.num_classes() == C, "rw_bce size mismatch");
  LossAndGrad<T> out;
  out.grad = Vec<T>::Zero(C);
  const T log_eps = static_cast<T>(std::log(kScoreEpsilon));
  for (Eigen::Index c = 0; c < C; ++c) {
    const T x = logits[c];
    // log sigmoid(x) and log(1 - sigmoid(x)), clamped like the score form
    const T log_p = std::max(log_eps, -std::log1p(std::exp(-std::abs(x))) + std::min(x, T(0)));
    const T log_q = std::max(log_eps, -std::log1p(std::exp(-std::abs(x))) - std::max(x, T(0)));
    const T s = sigmoid(x);
    const T w = static_cast<T>(lw.w[c]);
    if (labels[c] == kPositive) {
      const T k = w * static_cast<T>(lw.p[c]);
      out.loss -= k * log_p;
      out.grad[c] = k * (s - T(1));
    } else {
      T k = w * static_cast<T>(lw.n[c]);
      if (labels[c] == kMissing) k *= static_cast<T>(lw.missing_weight);
      if (k == T(0)) continue;
      out.loss -= k * log_q;
      out.grad[c] = k * s;
    }
  }
  return out;
}

/// Batch RW-BCE: mean of the per-instance losses.
template <typename T>
T rw_bce_batch(const std::vector<Vec<T>>& scores, const std::vector<LabelVector>& labels, const LossWeights& lw) {
  check_shape(scores.size() == labels.size() && !scores.empty(), "rw_bce batch size mismatch");
  T total = T(0);
  for (std::size_t i = 0; i < scores.size(); ++i) total += rw_bce(scores[i], labels[i], lw).loss;
  return total / static_cast<T>(scores.size());
}

/**
 * Mask supervision of the localizer: sum G (1 - M) - lambda sum G M. The mask
 * is resampled (nearest) to G's grid when the resolutions differ.
 */
template <typename T>
LossAndGrad<T> rel_loss(const AttentionMap<T>& G, const Tensor<T>& mask, double lambda_rel) {
  Tensor<T> m = (mask.height() == G.height() && mask.width() == G.width()) ? mask
                                                                           : resize_nearest(mask, G.height(), G.width());
  LossAndGrad<T> out;
  out.grad = Vec<T>(static_cast<Eigen::Index>(G.size()));
  const T lam = static_cast<T>(lambda_rel);
  for (std::size_t i = 0; i < G.size(); ++i) {
    const T mi = m[i] > T(0.5) ? T(1) : T(0);
    const T d = (T(1) - mi) - lam * mi;
    out.loss += G[i] * d;
    out.grad[static_cast<Eigen::Index>(i)] = d;
  }
  return out;
}

/// Sum over unordered pairs m < n of cosine(E_m, E_n); gradient per map.
template <typename T>
std::pair<T, std::vector<Tensor<T>>> div_loss(const std::vector<Tensor<T>>& E) {
  const std::size_t M = E.size();
  std::vector<Tensor<T>> grads;
  for (const auto& e : E) grads.emplace_back(e.channels(), e.height(), e.width());
  T loss = T(0);
  std::vector<T> norms(M);
  bool warned = false;
  for (std::size_t m = 0; m < M; ++m) norms[m] = E[m].flat().norm();
  for (std::size_t m = 0; m < M; ++m) {
    for (std::size_t n = m + 1; n < M; ++n) {
      check_shape(E[m].size() == E[n].size(), "attention maps differ in size");
      if (norms[m] == T(0) || norms[n] == T(0)) {
        if (!warned) warn("zero-norm attention logits; pairwise cosine treated as 0");
        warned = true;
        continue;
      }
      const T dot = E[m].flat().dot(E[n].flat());
      const T cos = dot / (norms[m] * norms[n]);
      loss += cos;
      grads[m].flat() += E[n].flat() / (norms[m] * norms[n]) - cos * E[m].flat() / (norms[m] * norms[m]);
      grads[n].flat() += E[m].flat() / (norms[m] * norms[n]) - cos * E[n].flat() / (norms[n] * norms[n]);
    }
  }
  return {loss, std::move(grads)};
}

struct LossComponents {
  double bce = 0.0;
  double rel = 0.0;
  double div = 0.0;
  double sup = 0.0;
};

struct LossHyper {
  double alpha = 0.1;
  double lambda_rel = 0.25;
  double lambda_div = 0.004;
  double lambda_sup = 0.5;
  double temperature = 0.25;
  double missing_weight = 0.05;

  static LossHyper from_config(const KeyValueConfig& kv);
  static LossHyper from_config(const KeyValueConfig& kv, LossHyper h) {
    h.alpha = kv.get("alpha", h.alpha);
    h.lambda_rel = kv.get("lambda_rel", h.lambda_rel);
    h.lambda_div = kv.get("lambda_div", h.lambda_div);
    h.lambda_sup = kv.get("lambda_sup", h.lambda_sup);
    h.temperature = kv.get("temperature", h.temperature);
    h.missing_weight = kv.get("missing_weight", h.missing_weight);
    return h;
  }
};

inline double total_loss(const LossComponents& c, double lambda_div, double lambda_sup, bool joint_supcon) {
  double total = c.bce + c.rel + lambda_div * c.div;
  if (joint_supcon) total += lambda_sup * c.sup;
  return total;
}

/// Read-only view of C square probe matrices laid out contiguously.
template <typename T>
struct ProbeView {
  const T* data = nullptr;
  int classes = 0;
  int dim = 0;
  ConstMatMap<T> operator[](int c) const {
    return ConstMatMap<T>(data + static_cast<std::size_t>(c) * dim * dim, dim, dim);
  }
};

/// l2-normalized A_c z.
template <typename T>
Vec<T> attribute_embedding(const ConstMatMap<T>& A, const Vec<T>& z) {
  Vec<T> u = A * z;
  return u / u.norm();
}

template <typename T>
struct SupConResult {
  T loss = T(0);
  std::vector<Vec<T>> d_z;
  AlignedVector<T> d_probes;  // same layout as the probe view; empty unless requested
  long contributing_terms = 0;
};

/**
 * Attribute-aware multi-label supervised contrastive loss. For each anchor i
 * and each of its positive classes c, embeddings are mapped to
 * normalize(A_c z); positives are the other views positive for c and the
 * denominator runs over all other views. Anchors whose class has no other
 * positive view contribute nothing. The result is the plain sum.
 */
template <typename T>
SupConResult<T> supcon_multilabel(const std::vector<Vec<T>>& z, const std::vector<LabelVector>& labels,
                                  const ProbeView<T>& probes, double temperature, bool want_probe_grad = true) {
  if (!(temperature > 0)) throw InvalidConfig("temperature must be > 0");
  const std::size_t n = z.size();
  check_shape(labels.size() == n, "supcon: labels/embeddings mismatch");
  SupConResult<T> out;
  for (const auto& v : z) out.d_z.push_back(Vec<T>::Zero(v.size()));
  if (want_probe_grad)
    out.d_probes.assign(static_cast<std::size_t>(probes.classes) * probes.dim * probes.dim, T(0));
  if (n < 2) return out;
  const T inv_tau = static_cast<T>(1.0 / temperature);

  for (int c = 0; c < probes.classes; ++c) {
    std::vector<std::size_t> positives;
    for (std::size_t i = 0; i < n; ++i)
      if (labels[i][c] == kPositive) positives.push_back(i);
    if (positives.size() < 2) continue;
    const auto A = probes[c];
    std::vector<Vec<T>> u(n), e(n);
    for (std::size_t j = 0; j < n; ++j) {
      u[j] = A * z[j];
      e[j] = u[j] / u[j].norm();
    }
    std::vector<Vec<T>> de(n, Vec<T>::Zero(probes.dim));
    for (std::size_t i : positives) {
      Vec<T> s(static_cast<Eigen::Index>(n));
      for (std::size_t j = 0; j < n; ++j) s[j] = e[i].dot(e[j]) * inv_tau;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j)
        if (j != i) mx = std::max(mx, s[j]);
      T denom = T(0);
      for (std::size_t j = 0; j < n; ++j)
        if (j != i) denom += std::exp(s[j] - mx);
      const T log_denom = mx + std::log(denom);
      const T inv_p = T(1) / static_cast<T>(positives.size() - 1);
      for (std::size_t p : positives)
        if (p != i) out.loss -= inv_p * (s[p] - log_denom);
      ++out.contributing_terms;
      // dL/ds_ij = (softmax_ij - [j positive] / |P|) / tau
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        T ds = std::exp(s[j] - log_denom);
        if (labels[j][c] == kPositive) ds -= inv_p;
        ds *= inv_tau;
        de[i] += ds * e[j];
        de[j] += ds * e[i];
      }
    }
    const Eigen::Index d = probes.dim;
    for (std::size_t j = 0; j < n; ++j) {
      const T norm = u[j].norm();
      const Vec<T> du = (de[j] - e[j] * e[j].dot(de[j])) / norm;
      out.d_z[j] += A.transpose() * du;
      if (want_probe_grad) {
        MatMap<T> dA(out.d_probes.data() + static_cast<std::size_t>(c) * d * d, d, d);
        dA.noalias() += du * z[j].transpose();
      }
    }
  }
  return out;
}

/// Projection MLP (D -> hidden -> dim) plus one probe matrix per class.
template <typename T>
class ContrastiveHead {
 public:
  ContrastiveHead() = default;
  ContrastiveHead(ParamStore<T>& s, int in, int hidden, int dim, int classes)
      : fc1_(s, "supcon.proj.fc1", in, hidden, ParamGroup::Contrastive),
        fc2_(s, "supcon.proj.fc2", hidden, dim, ParamGroup::Contrastive),
        dim_(dim),
        classes_(classes) {
    probes_ = s.add("supcon.A", {classes, dim, dim}, ParamGroup::Contrastive);
  }

  void init(ParamStore<T>& s, Rng& rng) const {
    fc1_.init(s, rng);
    fc2_.init(s, rng);
    auto& a = s[probes_];
    a.setZero();
    for (int c = 0; c < classes_; ++c)
      for (int k = 0; k < dim_; ++k) a[(static_cast<Eigen::Index>(c) * dim_ + k) * dim_ + k] = T(1);
  }

  ProbeView<T> probes(const ParamStore<T>& s) const { return {s[probes_].data(), classes_, dim_}; }
  std::size_t probe_id() const { return probes_; }

  struct Cache {
    Vec<T> x, hidden;
  };

  Vec<T> project(const ParamStore<T>& s, const Vec<T>& x, Cache* cache) const {
    Vec<T> h = fc1_.forward(s, x).cwiseMax(T(0));
    Vec<T> z = fc2_.forward(s, h);
    if (cache) *cache = {x, h};
    return z;
  }

  Vec<T> backward(const ParamStore<T>& s, const Cache& c, const Vec<T>& dz, ParamStore<T>& g) const {
    Vec<T> dh = fc2_.backward(s, c.hidden, dz, g);
    for (Eigen::Index i = 0; i < dh.size(); ++i)
      if (!(c.hidden[i] > T(0))) dh[i] = T(0);
    return fc1_.backward(s, c.x, dh, g);
  }

 private:
  Linear<T> fc1_, fc2_;
  std::size_t probes_ = 0;
  int dim_ = 0, classes_ = 0;
};

inline LossHyper LossHyper::from_config(const KeyValueConfig& kv) { return from_config(kv, LossHyper{}); }

}  // namespace scone

#endif  // SCONE_LOSSES_HPP_
