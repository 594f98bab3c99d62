#ifndef SCONE_SAMPLING_HPP_
#define SCONE_SAMPLING_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "scone/dataset.hpp"
#include "scone/error.hpp"
#include "scone/rng.hpp"

namespace scone {

struct RepeatPlan {
  std::vector<double> repeat_factor;
  std::vector<std::size_t> epoch_indices;
  double threshold = 0.0006;
  std::uint64_t seed = 0;

  double expected_length() const { return std::accumulate(repeat_factor.begin(), repeat_factor.end(), 0.0); }
};

/**
 * Repeat-factor sampling. r_i = max(1, max over positive classes c of
 * sqrt(t / f_c)); an epoch holds floor(r_i) copies of i plus one more with
 * probability frac(r_i) (or ceil(r_i) copies with deterministic_ceil), shuffled.
 */
inline RepeatPlan compute_repeat_factors(const DatasetStats& stats, const DatasetSplit& split, double t,
                                         std::uint64_t seed, bool deterministic_ceil = false) {
  if (!(t > 0.0 && t <= 1.0)) throw InvalidConfig("RFS threshold must be in (0, 1]");
  RepeatPlan plan;
  plan.threshold = t;
  plan.seed = seed;
  plan.repeat_factor.assign(split.size(), 1.0);
  const int C = stats.num_classes();
  for (std::size_t i = 0; i < split.size(); ++i) {
    double r = 1.0;
    for (int c = 0; c < C; ++c) {
      if (split.records[i].labels[c] != kPositive) continue;
      const double f = stats.image_freq[c];
      if (f > 0) r = std::max(r, std::sqrt(t / f));
    }
    plan.repeat_factor[i] = r;
  }
  Rng rng(seed);
  for (std::size_t i = 0; i < split.size(); ++i) {
    const double r = plan.repeat_factor[i];
    const double whole = std::floor(r);
    std::size_t copies = static_cast<std::size_t>(whole);
    const double frac = r - whole;
    if (frac > 0) {
      if (deterministic_ceil) ++copies;
      else if (rng.bernoulli(frac)) ++copies;
    }
    plan.epoch_indices.insert(plan.epoch_indices.end(), copies, i);
  }
  rng.shuffle(std::span<std::size_t>(plan.epoch_indices));
  return plan;
}

/// Normalizes positive weights so they sum to the class count.
inline std::vector<double> normalize_to_count(std::vector<double> w) {
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  const double scale = static_cast<double>(w.size()) / total;
  for (auto& v : w) v *= scale;
  return w;
}

/// w_c ~ n_pos^-alpha, normalized to sum C (zero counts floored to 1).
inline std::vector<double> inverse_frequency_weights(const DatasetStats& stats, double alpha) {
  if (alpha < 0) throw InvalidConfig("alpha must be >= 0");
  std::vector<double> w(stats.num_classes());
  for (int c = 0; c < stats.num_classes(); ++c)
    w[c] = std::pow(static_cast<double>(std::max<std::int64_t>(stats.n_pos[c], 1)), -alpha);
  return normalize_to_count(std::move(w));
}

/// Effective number of samples (1 - beta^n) / (1 - beta).
inline double effective_number(std::int64_t n, double beta) {
  if (beta == 0.0) return 1.0;
  return (1.0 - std::pow(beta, static_cast<double>(n))) / (1.0 - beta);
}

/// w_c ~ 1 / E_{n_pos}, normalized to sum C.
inline std::vector<double> class_balanced_weights(const DatasetStats& stats, double beta) {
  if (!(beta >= 0.0 && beta < 1.0)) throw InvalidConfig("beta must be in [0, 1)");
  std::vector<double> w(stats.num_classes());
  for (int c = 0; c < stats.num_classes(); ++c)
    w[c] = 1.0 / effective_number(std::max<std::int64_t>(stats.n_pos[c], 1), beta);
  return normalize_to_count(std::move(w));
}

struct ClassAwareDraw {
  int cls;
  std::size_t index;
};

/**
 * @brief Class-aware sampling stream: cycles through the classes that have at
 * least one positive instance and draws a uniformly random positive of each.
 */
class ClassAwareSampler {
 public:
  ClassAwareSampler(const DatasetSplit& split, std::uint64_t seed) : rng_(seed) {
    const int C = split.num_classes();
    members_.resize(C);
    for (std::size_t i = 0; i < split.size(); ++i)
      for (int c = 0; c < C; ++c)
        if (split.records[i].labels[c] == kPositive) members_[c].push_back(i);
    for (int c = 0; c < C; ++c)
      if (!members_[c].empty()) active_.push_back(c);
    if (active_.empty()) throw InvalidConfig("class-aware sampling needs at least one positive label");
  }

  const std::vector<int>& active_classes() const { return active_; }

  ClassAwareDraw next() {
    const int c = active_[cursor_];
    cursor_ = (cursor_ + 1) % active_.size();
    const auto& m = members_[c];
    return {c, m[static_cast<std::size_t>(rng_.below(m.size()))]};
  }

  std::vector<ClassAwareDraw> next_batch(std::size_t batch_size) {
    if (batch_size < 1) throw InvalidConfig("batch_size must be >= 1");
    std::vector<ClassAwareDraw> out;
    out.reserve(batch_size);
    for (std::size_t k = 0; k < batch_size; ++k) out.push_back(next());
    return out;
  }

 private:
  Rng rng_;
  std::vector<std::vector<std::size_t>> members_;
  std::vector<int> active_;
  std::size_t cursor_ = 0;
};

inline std::vector<ClassAwareDraw> class_aware_sample(const DatasetSplit& split, std::size_t batch_size,
                                                      std::uint64_t seed) {
  ClassAwareSampler s(split, seed);
  return s.next_batch(batch_size);
}

}  // namespace scone

#endif  // SCONE_SAMPLING_HPP_
