#pragma once

// Synthetic preference corpora with known latent worker groups.
//
// Every group shares a backbone (u*, V*) and differs in its parameter theta*_g; the angle
// between group parameters is set by `group_separation` (0 identical, pi antipodal). Worker
// embeddings are theta*_g plus isotropic noise, candidate features are standard normal, and
// labels are drawn from the BTL probability at the configured temperature (temperature 0
// selects the deterministic argmax labelling).

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "prefclust/btl.hpp"
#include "prefclust/errors.hpp"
#include "prefclust/eval.hpp"
#include "prefclust/linalg.hpp"
#include "prefclust/policy.hpp"
#include "prefclust/preference_data.hpp"
#include "prefclust/random.hpp"

namespace prefclust {

struct SimConfig {
  std::size_t n_workers = 30;
  std::size_t n_latent_groups = 2;
  std::size_t feature_dim = 16;
  std::size_t embedding_dim = 8;
  std::size_t pairs_per_worker = 200;
  double group_separation = std::numbers::pi;
  double worker_noise = 0.1;
  double preference_temperature = 1.0;
  std::uint64_t seed = 0;
  /// Norm of the shared reward direction u*.
  double shared_reward_norm = 0.5;
  /// Norm of every group parameter theta*_g.
  double latent_norm = 2.0;

  void validate() const {
    if (n_workers == 0) throw ConfigError("n_workers must be positive");
    if (n_latent_groups == 0) throw ConfigError("n_latent_groups must be positive");
    if (n_latent_groups > n_workers)
      throw ConfigError("n_latent_groups (" + std::to_string(n_latent_groups) +
                        ") exceeds n_workers (" + std::to_string(n_workers) + ")");
    if (feature_dim == 0 || embedding_dim == 0 || pairs_per_worker == 0)
      throw ConfigError("feature_dim, embedding_dim and pairs_per_worker must be positive");
    if (!(group_separation >= 0.0 && group_separation <= std::numbers::pi))
      throw ConfigError("group_separation must lie in [0, pi]");
    if (!(worker_noise >= 0.0)) throw ConfigError("worker_noise must be non-negative");
    if (!(preference_temperature >= 0.0) || !std::isfinite(preference_temperature))
      throw ConfigError("preference_temperature must be non-negative (0 = argmax labels)");
    if (!(shared_reward_norm >= 0.0) || !(latent_norm >= 0.0))
      throw ConfigError("reward norms must be non-negative");
  }
};

inline nlohmann::ordered_json to_json(const SimConfig& c) {
  nlohmann::ordered_json j;
  j["n_workers"] = c.n_workers;
  j["n_latent_groups"] = c.n_latent_groups;
  j["feature_dim"] = c.feature_dim;
  j["embedding_dim"] = c.embedding_dim;
  j["pairs_per_worker"] = c.pairs_per_worker;
  j["group_separation"] = c.group_separation;
  j["worker_noise"] = c.worker_noise;
  j["preference_temperature"] = c.preference_temperature;
  j["seed"] = c.seed;
  j["shared_reward_norm"] = c.shared_reward_norm;
  j["latent_norm"] = c.latent_norm;
  return j;
}

struct GroundTruth {
  std::string provenance;
  Vector u_star;
  Matrix V_star;
  std::vector<Vector> group_theta;
  std::map<std::string, std::size_t> latent_group_of;
  std::map<std::string, Vector> worker_embedding;

  std::size_t n_groups() const noexcept { return group_theta.size(); }

  double true_reward(std::span<const double> e, std::span<const double> x) const {
    return dot(u_star, x) + dot(e, matvec(V_star, x));
  }

  ClusterAssignment group_labels() const {
    ClusterAssignment a{n_groups(), {}};
    for (const auto& [id, g] : latent_group_of) a.labels[id] = g;
    return a;
  }
};

struct Simulation {
  Corpus corpus;
  GroundTruth truth;
};

namespace detail {

inline constexpr std::uint64_t kLatentStream = 0x6c6174;  // "lat"
inline constexpr std::uint64_t kWorkerStream = 0x776b72;  // "wkr"

inline std::string padded_index(std::size_t i, std::size_t count, int min_width = 2) {
  int width = 1;
  for (std::size_t v = count > 0 ? count - 1 : 0; v >= 10; v /= 10) ++width;
  width = std::max(width, min_width);
  std::string s = std::to_string(i);
  return std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(s.size()))), '0') + s;
}

inline Vector unit(Vector v) {
  const double n = norm(v);
  for (auto& x : v) x /= n;
  return v;
}

}  // namespace detail

inline Simulation generate(const SimConfig& config) {
  config.validate();
  const std::size_t d = config.feature_dim;
  const std::size_t m = config.embedding_dim;

  Simulation sim;
  auto& gt = sim.truth;
  {
    char buf[32];
    std::snprintf(buf, sizeof buf, "sim:%016llx",
                  static_cast<unsigned long long>(fnv1a64(to_json(config).dump())));
    gt.provenance = buf;
  }

  Rng latent(derive_seed(config.seed, detail::kLatentStream));
  gt.u_star = detail::unit(latent.normal_vector(d));
  for (auto& x : gt.u_star) x *= config.shared_reward_norm;
  gt.V_star = Matrix(m, d, latent.normal_vector(m * d, 1.0 / std::sqrt(static_cast<double>(d))));

  const Vector a = detail::unit(latent.normal_vector(m));
  Vector b(m, 0.0);
  if (m >= 2) {
    b = latent.normal_vector(m);
    axpy(-dot(a, b), a, b);
    b = detail::unit(std::move(b));
  }
  const std::size_t k = config.n_latent_groups;
  for (std::size_t g = 0; g < k; ++g) {
    const double angle =
        k > 1 ? config.group_separation * static_cast<double>(g) / static_cast<double>(k - 1) : 0.0;
    Vector theta(m);
    for (std::size_t i = 0; i < m; ++i)
      theta[i] = config.latent_norm * (std::cos(angle) * a[i] + std::sin(angle) * b[i]);
    gt.group_theta.push_back(std::move(theta));
  }

  std::vector<PreferenceRecord> records;
  records.reserve(config.n_workers * config.pairs_per_worker);
  const std::uint64_t worker_base = derive_seed(config.seed, detail::kWorkerStream);
  for (std::size_t i = 0; i < config.n_workers; ++i) {
    const std::string id = "worker_" + detail::padded_index(i, config.n_workers);
    const std::size_t group = i % k;
    Rng rng(derive_seed(worker_base, i));
    Vector e = gt.group_theta[group];
    for (auto& x : e) x += config.worker_noise * rng.normal();

    for (std::size_t j = 0; j < config.pairs_per_worker; ++j) {
      Vector x1 = rng.normal_vector(d);
      Vector x2 = rng.normal_vector(d);
      const double dr = gt.true_reward(e, x1) - gt.true_reward(e, x2);
      const double u = rng.uniform();
      const bool first_wins = config.preference_temperature == 0.0
                                  ? dr >= 0.0
                                  : u < sigmoid(dr / config.preference_temperature);
      PreferenceRecord rec;
      rec.prompt_id = id + "/p" + detail::padded_index(j, config.pairs_per_worker, 4);
      rec.worker_id = id;
      rec.chosen = first_wins ? std::move(x1) : std::move(x2);
      rec.rejected = first_wins ? std::move(x2) : std::move(x1);
      records.push_back(std::move(rec));
    }
    gt.latent_group_of[id] = group;
    gt.worker_embedding[id] = std::move(e);
  }

  sim.corpus = make_corpus(std::move(records), d, SplitTag::unsplit, gt.provenance);
  return sim;
}

namespace detail {

inline void check_provenance(const GroundTruth& gt, const Corpus& corpus) {
  if (corpus.provenance != gt.provenance)
    throw DataError("corpus provenance '" + corpus.provenance +
                    "' does not match ground truth '" + gt.provenance + "'");
}

template <typename ModelFor>
std::vector<std::optional<double>> group_rates(const GroundTruth& gt, const Corpus& corpus,
                                               ModelFor&& embedding_for) {
  check_provenance(gt, corpus);
  std::vector<double> wins(gt.n_groups(), 0.0);
  std::vector<std::size_t> counts(gt.n_groups(), 0);
  for (const auto& w : corpus.workers) {
    const auto it = gt.latent_group_of.find(w.worker_id);
    if (it == gt.latent_group_of.end())
      throw DataError("worker '" + w.worker_id + "' is not in the ground truth");
    const Vector& e = embedding_for(w.worker_id);
    const auto rep = win_rate(w.records, [&](const FeatureVector& x) { return gt.true_reward(e, x); });
    wins[it->second] += rep.wins;
    counts[it->second] += rep.n_pairs;
  }
  std::vector<std::optional<double>> out(gt.n_groups());
  for (std::size_t g = 0; g < out.size(); ++g)
    if (counts[g] > 0) out[g] = wins[g] / static_cast<double>(counts[g]);
  return out;
}

}  // namespace detail

/// Win-rate of each worker's true reward on its own records, aggregated per latent group.
inline std::vector<std::optional<double>> bayes_win_rate(const GroundTruth& gt,
                                                         const Corpus& corpus) {
  return detail::group_rates(gt, corpus, [&](const std::string& id) -> const Vector& {
    return gt.worker_embedding.at(id);
  });
}

/// Win-rate of group `model_group`'s latent reward on every group's records.
inline std::vector<std::optional<double>> group_model_win_rate(const GroundTruth& gt,
                                                               const Corpus& corpus,
                                                               std::size_t model_group) {
  if (model_group >= gt.n_groups()) throw ConfigError("model_group out of range");
  return detail::group_rates(gt, corpus, [&](const std::string&) -> const Vector& {
    return gt.group_theta[model_group];
  });
}

/// Random candidate sets for policy extraction: standard normal features and a random
/// positive reference distribution.
inline std::vector<CandidateSet> sample_candidate_sets(std::size_t feature_dim,
                                                       std::size_t n_sets,
                                                       std::size_t n_candidates,
                                                       std::uint64_t seed) {
  if (n_candidates < 2) throw ConfigError("candidate sets need at least two candidates");
  std::vector<CandidateSet> out;
  for (std::size_t s = 0; s < n_sets; ++s) {
    Rng rng(derive_seed(seed, s));
    CandidateSet cs;
    cs.prompt_id = "prompt_" + detail::padded_index(s, n_sets, 3);
    double z = 0.0;
    for (std::size_t a = 0; a < n_candidates; ++a) {
      cs.candidates.push_back({"a" + std::to_string(a), rng.normal_vector(feature_dim)});
      cs.sft_probs.push_back(std::exp(0.5 * rng.normal()));
      z += cs.sft_probs.back();
    }
    for (auto& p : cs.sft_probs) p /= z;
    out.push_back(std::move(cs));
  }
  return out;
}

inline nlohmann::ordered_json to_json(const GroundTruth& gt) {
  nlohmann::ordered_json j;
  j["provenance"] = gt.provenance;
  j["feature_dim"] = gt.u_star.size();
  j["embedding_dim"] = gt.V_star.rows();
  j["u_star"] = gt.u_star;
  j["V_star"] = gt.V_star.data();
  j["group_theta"] = gt.group_theta;
  nlohmann::ordered_json workers = nlohmann::ordered_json::object();
  for (const auto& [id, g] : gt.latent_group_of)
    workers[id] = {{"group", g}, {"embedding", gt.worker_embedding.at(id)}};
  j["workers"] = std::move(workers);
  return j;
}

inline GroundTruth ground_truth_from_json(const nlohmann::json& j) {
  try {
    GroundTruth gt;
    gt.provenance = j.at("provenance").get<std::string>();
    gt.u_star = j.at("u_star").get<Vector>();
    const auto m = j.at("embedding_dim").get<std::size_t>();
    gt.V_star = Matrix(m, gt.u_star.size(), j.at("V_star").get<Vector>());
    gt.group_theta = j.at("group_theta").get<std::vector<Vector>>();
    for (const auto& [id, w] : j.at("workers").items()) {
      gt.latent_group_of[id] = w.at("group").get<std::size_t>();
      gt.worker_embedding[id] = w.at("embedding").get<Vector>();
    }
    return gt;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("ground truth: ") + e.what());
  }
}

}  // namespace prefclust
