#pragma once

// Bradley-Terry-Luce pairwise preference probabilities and log-likelihoods.
// All arithmetic is double precision; log sigma saturates far too early in float.

#include <cmath>
#include <concepts>
#include <span>
#include <string>

#include "prefclust/errors.hpp"
#include "prefclust/preference_data.hpp"

namespace prefclust {

struct RewardPair {
  double reward_chosen = 0.0;
  double reward_rejected = 0.0;

  double margin() const noexcept { return reward_chosen - reward_rejected; }
};

/// Logistic function, evaluated without overflow for either sign.
inline double sigmoid(double x) noexcept {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// log sigma(x) = -log1p(exp(-x)), split by sign so exp never overflows.
inline double log_sigmoid(double x) noexcept {
  if (x >= 0.0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

/// P(chosen > rejected) = sigma(r_chosen - r_rejected).
inline double btl_probability(const RewardPair& pair) {
  if (!std::isfinite(pair.reward_chosen) || !std::isfinite(pair.reward_rejected))
    throw DomainError("btl_probability: rewards must be finite");
  return sigmoid(pair.margin());
}

/// Log-probability of one comparison and its derivative with respect to the margin.
struct PairLoss {
  double log_prob = 0.0;
  double grad_wrt_margin = 0.0;  // 1 - sigma(margin)
};

inline PairLoss pair_loss(double margin) noexcept {
  return {log_sigmoid(margin), sigmoid(-margin)};
}

struct LogLikelihood {
  double value = 0.0;
  std::size_t n_records = 0;
  /// Set when the slice had no records; `value` is then 0.
  bool empty = true;
};

template <typename F>
concept RewardPairFn = std::invocable<F, const PreferenceRecord&> &&
    std::convertible_to<std::invoke_result_t<F, const PreferenceRecord&>, RewardPair>;

/// Sum of log sigma(margin) over the slice, accumulated in record order.
template <RewardPairFn F>
LogLikelihood dataset_log_likelihood(std::span<const PreferenceRecord> records, F&& reward_fn) {
  LogLikelihood ll;
  ll.n_records = records.size();
  ll.empty = records.empty();
  for (const auto& r : records) {
    const RewardPair pair = reward_fn(r);
    ll.value += log_sigmoid(pair.margin());
  }
  return ll;
}

}  // namespace prefclust
