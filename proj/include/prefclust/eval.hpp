#pragma once

// Win-rate evaluation and the naive-versus-cluster comparison table.

#include <concepts>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "prefclust/clustering.hpp"
#include "prefclust/errors.hpp"
#include "prefclust/format.hpp"
#include "prefclust/preference_data.hpp"
#include "prefclust/reward_models.hpp"

namespace prefclust {

struct WinRateReport {
  std::string model_label;
  std::size_t n_pairs = 0;
  double wins = 0.0;  // ties count one half
  /// nullopt when there were no pairs.
  std::optional<double> win_rate;
};

template <typename F>
concept RewardFn = std::invocable<F, const FeatureVector&> &&
    std::convertible_to<std::invoke_result_t<F, const FeatureVector&>, double>;

/// A record is won when reward(chosen) > reward(rejected); exact ties earn half credit.
template <RewardFn F>
WinRateReport win_rate(std::span<const PreferenceRecord> records, F&& reward,
                       std::string label = {}) {
  WinRateReport rep{std::move(label), records.size(), 0.0, std::nullopt};
  for (const auto& r : records) {
    const double rc = reward(r.chosen);
    const double rr = reward(r.rejected);
    if (rc > rr) rep.wins += 1.0;
    else if (rc == rr) rep.wins += 0.5;
  }
  if (rep.n_pairs > 0) rep.win_rate = rep.wins / static_cast<double>(rep.n_pairs);
  return rep;
}

struct ComparisonTable {
  /// rows[0] is the naive model, then one row per cluster.
  std::vector<WinRateReport> rows;
};

enum class EvalScope {
  cluster_members,  // cluster k is scored on the test records of its own workers
  all_records,      // every cluster is scored on the whole test corpus
};

inline ComparisonTable compare_models(const Corpus& test, const NaiveModel& naive,
                                      const SharedBackbone& backbone,
                                      std::span<const ClusterModel> clusters,
                                      const ClusterAssignment& assignment,
                                      EvalScope scope = EvalScope::cluster_members) {
  for (const auto& w : test.workers)
    if (!assignment.contains(w.worker_id))
      throw DataError("test worker '" + w.worker_id + "' has no cluster assignment");

  ComparisonTable table;
  const auto all = test.all_records();
  table.rows.push_back(win_rate(
      all, [&](const FeatureVector& x) { return reward_naive(naive, x); }, "Naive RLHF"));

  for (const auto& cluster : clusters) {
    std::vector<PreferenceRecord> subset;
    if (scope == EvalScope::all_records) {
      subset = all;
    } else {
      for (const auto& w : test.workers)
        if (assignment.at(w.worker_id) == cluster.index)
          subset.insert(subset.end(), w.records.begin(), w.records.end());
    }
    table.rows.push_back(win_rate(
        subset,
        [&](const FeatureVector& x) { return reward_personal(backbone, cluster.theta, x); },
        "Group " + std::to_string(cluster.index + 1) + " Model"));
  }
  return table;
}

/// model_label,win_rate_pct with three decimals; "n/a" for rows without pairs.
inline void write_comparison_csv(const ComparisonTable& table, std::ostream& out) {
  out << "model_label,win_rate_pct\n";
  for (const auto& row : table.rows)
    out << row.model_label << ','
        << (row.win_rate ? format_fixed(100.0 * *row.win_rate, 3) : std::string("n/a")) << '\n';
}

inline nlohmann::ordered_json to_json(const ComparisonTable& table) {
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const auto& row : table.rows) {
    nlohmann::ordered_json j;
    j["model_label"] = row.model_label;
    j["n_pairs"] = row.n_pairs;
    j["wins"] = row.wins;
    j["win_rate"] = row.win_rate ? nlohmann::ordered_json(*row.win_rate) : nlohmann::ordered_json();
    rows.push_back(std::move(j));
  }
  return {{"rows", rows}};
}

}  // namespace prefclust
