#pragma once

// KL-regularized policy extraction over finite candidate sets.
//
//   kl_regularized:           J(pi) = sum_a pi(a) [ r(a) - beta log(pi(a) / pi_sft(a)) ]
//   kl_with_reference_bonus:  J(pi) + sum_a mu1(a) log pi(a)
//
// The first has the Gibbs maximizer pi*(a) ~ pi_sft(a) exp(r(a) / beta). Both objectives are
// strictly concave on the simplex and are solved numerically by exponentiated gradient.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "prefclust/errors.hpp"
#include "prefclust/linalg.hpp"
#include "prefclust/parallel.hpp"
#include "prefclust/preference_data.hpp"
#include "prefclust/reward_models.hpp"

namespace prefclust {

struct Candidate {
  std::string action_id;
  FeatureVector features;

  bool operator==(const Candidate&) const = default;
};

struct CandidateSet {
  std::string prompt_id;
  std::vector<Candidate> candidates;
  Vector sft_probs;

  std::size_t size() const noexcept { return candidates.size(); }

  bool operator==(const CandidateSet&) const = default;
};

struct PolicyDistribution {
  std::string prompt_id;
  Vector probs;
};

enum class PolicyObjective { kl_regularized, kl_with_reference_bonus };

struct PolicyConfig {
  double beta = 1.0;
  /// Reference distribution of the bonus term; nullopt means uniform over the candidates.
  std::optional<Vector> mu1;
  double solver_tol = 1e-12;
  std::size_t solver_max_iters = 100000;

  void validate() const {
    if (!(beta > 0.0) || !std::isfinite(beta)) throw ConfigError("beta must be positive");
    if (!(solver_tol > 0.0)) throw ConfigError("solver_tol must be positive");
    if (solver_max_iters == 0) throw ConfigError("solver_max_iters must be positive");
    if (mu1) {
      double s = 0.0;
      for (double p : *mu1) {
        if (!(p >= 0.0)) throw ConfigError("mu1 entries must be non-negative");
        s += p;
      }
      if (std::abs(s - 1.0) > 1e-9) throw ConfigError("mu1 must sum to 1");
    }
  }
};

inline void validate_candidate_set(const CandidateSet& cs) {
  if (cs.candidates.size() < 2)
    throw DataError("candidate set '" + cs.prompt_id + "' needs at least two candidates");
  require_same_size(cs.sft_probs.size(), cs.candidates.size(), "sft_probs");
  double s = 0.0;
  for (double p : cs.sft_probs) {
    if (!(p > 0.0)) throw DataError("candidate set '" + cs.prompt_id + "': sft_probs must be > 0");
    s += p;
  }
  if (std::abs(s - 1.0) > 1e-9)
    throw DataError("candidate set '" + cs.prompt_id + "': sft_probs must sum to 1");
}

namespace detail {

inline Vector reference_distribution(const PolicyConfig& config, std::size_t n) {
  if (!config.mu1) return Vector(n, 1.0 / static_cast<double>(n));
  require_same_size(config.mu1->size(), n, "mu1");
  return *config.mu1;
}

}  // namespace detail

/// Objective value of `pi`; 0 log 0 is taken as 0. The bonus variant returns -infinity when
/// pi puts zero mass on a candidate that mu1 supports.
inline double objective_value(const CandidateSet& cs, std::span<const double> pi,
                              std::span<const double> rewards, const PolicyConfig& config,
                              PolicyObjective variant) {
  const std::size_t n = cs.size();
  require_same_size(pi.size(), n, "policy probabilities");
  require_same_size(rewards.size(), n, "rewards");
  require_same_size(cs.sft_probs.size(), n, "sft_probs");

  double value = 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    if (pi[a] == 0.0) continue;
    value += pi[a] * (rewards[a] - config.beta * std::log(pi[a] / cs.sft_probs[a]));
  }
  if (variant == PolicyObjective::kl_with_reference_bonus) {
    const Vector mu = detail::reference_distribution(config, n);
    for (std::size_t a = 0; a < n; ++a) {
      if (mu[a] == 0.0) continue;
      if (pi[a] == 0.0) return -std::numeric_limits<double>::infinity();
      value += mu[a] * std::log(pi[a]);
    }
  }
  return value;
}

/// softmax(log pi_sft + r / beta), max-shifted.
inline PolicyDistribution optimal_policy_closed_form(const CandidateSet& cs,
                                                     std::span<const double> rewards,
                                                     double beta) {
  if (!(beta > 0.0)) throw ConfigError("beta must be positive");
  require_same_size(rewards.size(), cs.size(), "rewards");
  Vector logits(cs.size());
  for (std::size_t a = 0; a < cs.size(); ++a)
    logits[a] = std::log(cs.sft_probs[a]) + rewards[a] / beta;
  if (!all_finite(logits)) throw DomainError("closed-form policy: reward / beta is not finite");
  const double top = *std::max_element(logits.begin(), logits.end());
  PolicyDistribution out{cs.prompt_id, Vector(cs.size())};
  double z = 0.0;
  for (std::size_t a = 0; a < cs.size(); ++a) z += out.probs[a] = std::exp(logits[a] - top);
  for (auto& p : out.probs) p /= z;
  return out;
}

struct NumericPolicy {
  PolicyDistribution policy;
  double objective = 0.0;
  std::size_t iterations = 0;
  /// False when solver_max_iters ran out first; `policy` is then the best iterate.
  bool converged = false;
};

/// Exponentiated-gradient ascent from pi_sft, carried out in log space. Each iteration tries
/// the step 0.5 / (beta + 1) and halves it until the objective does not decrease. Stops once
/// both the objective gain and the total-variation move fall below solver_tol.
inline NumericPolicy optimal_policy_numeric(const CandidateSet& cs,
                                            std::span<const double> rewards,
                                            const PolicyConfig& config,
                                            PolicyObjective variant) {
  config.validate();
  validate_candidate_set(cs);
  require_same_size(rewards.size(), cs.size(), "rewards");
  if (!all_finite(rewards)) throw DomainError("policy solver: rewards must be finite");
  const std::size_t n = cs.size();
  const Vector mu = variant == PolicyObjective::kl_with_reference_bonus
                        ? detail::reference_distribution(config, n)
                        : Vector(n, 0.0);

  Vector log_sft(n);
  for (std::size_t a = 0; a < n; ++a) log_sft[a] = std::log(cs.sft_probs[a]);

  const auto normalize = [n](Vector& logp, Vector& p) {
    const double top = *std::max_element(logp.begin(), logp.end());
    double z = 0.0;
    for (std::size_t a = 0; a < n; ++a) z += std::exp(logp[a] - top);
    const double lz = top + std::log(z);
    for (std::size_t a = 0; a < n; ++a) {
      logp[a] -= lz;
      p[a] = std::exp(logp[a]);
    }
  };

  Vector logp = log_sft;
  Vector p(n);
  normalize(logp, p);
  double current = objective_value(cs, p, rewards, config, variant);

  NumericPolicy out;
  const double base_step = 0.5 / (config.beta + 1.0);
  Vector grad(n), trial_logp(n), trial_p(n);
  for (std::size_t it = 0; it < config.solver_max_iters; ++it) {
    out.iterations = it + 1;
    for (std::size_t a = 0; a < n; ++a)
      grad[a] = rewards[a] - config.beta * (logp[a] - log_sft[a] + 1.0) +
                (mu[a] > 0.0 ? mu[a] * std::exp(-logp[a]) : 0.0);

    bool accepted = false;
    double trial = current;
    for (double step = base_step; step > base_step * 1e-12; step *= 0.5) {
      for (std::size_t a = 0; a < n; ++a) trial_logp[a] = logp[a] + step * grad[a];
      normalize(trial_logp, trial_p);
      trial = objective_value(cs, trial_p, rewards, config, variant);
      if (trial >= current) {
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      out.converged = true;  // no ascent step left at working precision
      break;
    }

    double moved = 0.0;
    for (std::size_t a = 0; a < n; ++a) moved += std::abs(trial_p[a] - p[a]);
    moved *= 0.5;
    const double gain = trial - current;
    logp.swap(trial_logp);
    p.swap(trial_p);
    current = trial;
    if (gain < config.solver_tol && moved < config.solver_tol) {
      out.converged = true;
      break;
    }
  }

  out.policy = PolicyDistribution{cs.prompt_id, p};
  out.objective = current;
  return out;
}

/// Rewards of every candidate under one cluster's parameter.
inline Vector candidate_rewards(const CandidateSet& cs, const SharedBackbone& backbone,
                                std::span<const double> theta) {
  Vector r(cs.size());
  for (std::size_t a = 0; a < cs.size(); ++a)
    r[a] = reward_personal(backbone, theta, cs.candidates[a].features);
  return r;
}

/// One policy per (cluster, candidate set), solved with the reference-bonus objective unless
/// `variant` says otherwise.
inline std::map<std::size_t, std::vector<PolicyDistribution>> per_cluster_policies(
    std::span<const ClusterModel> clusters, const SharedBackbone& backbone,
    std::span<const CandidateSet> candidate_sets, const PolicyConfig& config,
    PolicyObjective variant = PolicyObjective::kl_with_reference_bonus, std::size_t threads = 1) {
  config.validate();
  const std::size_t n_sets = candidate_sets.size();
  std::vector<PolicyDistribution> flat(clusters.size() * n_sets);
  parallel_for(flat.size(), threads, [&](std::size_t idx) {
    const auto& cluster = clusters[idx / n_sets];
    const auto& cs = candidate_sets[idx % n_sets];
    const Vector r = candidate_rewards(cs, backbone, cluster.theta);
    flat[idx] = optimal_policy_numeric(cs, r, config, variant).policy;
  });
  std::map<std::size_t, std::vector<PolicyDistribution>> out;
  for (std::size_t c = 0; c < clusters.size(); ++c) {
    auto& list = out[clusters[c].index];
    for (std::size_t s = 0; s < n_sets; ++s) list.push_back(std::move(flat[c * n_sets + s]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// I/O

/// {"prompt_id": str, "candidates": [{"action_id": str, "features": [num]}], "sft_probs": [num]}
inline std::vector<CandidateSet> parse_candidate_sets(std::istream& in,
                                                      std::string_view source = "<stream>") {
  std::vector<CandidateSet> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = std::string(source) + ":" + std::to_string(line_no) + ": ";
    try {
      const auto j = nlohmann::json::parse(line);
      CandidateSet cs;
      cs.prompt_id = j.at("prompt_id").get<std::string>();
      for (const auto& c : j.at("candidates"))
        cs.candidates.push_back({c.at("action_id").get<std::string>(), c.at("features").get<Vector>()});
      if (j.contains("sft_probs")) {
        cs.sft_probs = j["sft_probs"].get<Vector>();
      } else {
        cs.sft_probs.assign(cs.candidates.size(), 1.0 / static_cast<double>(cs.candidates.size()));
      }
      validate_candidate_set(cs);
      out.push_back(std::move(cs));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + e.what());
    } catch (const DataError& e) {
      throw DataError(where + e.what());
    }
  }
  return out;
}

inline std::vector<CandidateSet> read_candidate_sets(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  return parse_candidate_sets(in, path.string());
}

inline void write_candidate_sets(std::span<const CandidateSet> sets, std::ostream& out) {
  for (const auto& cs : sets) {
    nlohmann::ordered_json j;
    j["prompt_id"] = cs.prompt_id;
    j["candidates"] = nlohmann::ordered_json::array();
    for (const auto& c : cs.candidates)
      j["candidates"].push_back({{"action_id", c.action_id}, {"features", c.features}});
    j["sft_probs"] = cs.sft_probs;
    out << j.dump() << '\n';
  }
}

/// Array of {"prompt_id", "cluster", "probs": {action_id: p}} in cluster, then set order.
inline nlohmann::ordered_json policies_to_json(
    const std::map<std::size_t, std::vector<PolicyDistribution>>& policies,
    std::span<const CandidateSet> candidate_sets) {
  nlohmann::ordered_json out = nlohmann::ordered_json::array();
  for (const auto& [cluster, list] : policies) {
    for (std::size_t s = 0; s < list.size(); ++s) {
      nlohmann::ordered_json j;
      j["prompt_id"] = list[s].prompt_id;
      j["cluster"] = cluster;
      j["probs"] = nlohmann::ordered_json::object();
      for (std::size_t a = 0; a < list[s].probs.size(); ++a)
        j["probs"][candidate_sets[s].candidates[a].action_id] = list[s].probs[a];
      out.push_back(std::move(j));
    }
  }
  return out;
}

}  // namespace prefclust
