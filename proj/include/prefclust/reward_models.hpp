#pragma once

// Reward parameterizations and their trainers.
//
//   naive:     r(x) = <w, x>
//   personal:  r(x) = <u, x> + e^T V x
//
// The personal form serves both worker embeddings e_i and cluster parameters theta_k, which
// occupy the same slot. Objectives are mean pairwise log-likelihoods over difference vectors
// delta = chosen - rejected, minus an L2 penalty on the shared weights (w, or u and V).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "prefclust/btl.hpp"
#include "prefclust/errors.hpp"
#include "prefclust/linalg.hpp"
#include "prefclust/preference_data.hpp"
#include "prefclust/random.hpp"

namespace prefclust {

struct SharedBackbone {
  Vector u;  // length d
  Matrix V;  // m x d

  SharedBackbone() = default;
  SharedBackbone(std::size_t feature_dim, std::size_t embedding_dim)
      : u(feature_dim, 0.0), V(embedding_dim, feature_dim) {}
  SharedBackbone(Vector u_, Matrix V_) : u(std::move(u_)), V(std::move(V_)) {
    require_same_size(V.cols(), u.size(), "SharedBackbone");
  }

  std::size_t feature_dim() const noexcept { return u.size(); }
  std::size_t embedding_dim() const noexcept { return V.rows(); }

  bool operator==(const SharedBackbone&) const = default;
};

struct WorkerEmbedding {
  std::string worker_id;
  Vector e;

  bool operator==(const WorkerEmbedding&) const = default;
};

struct ClusterModel {
  std::size_t index = 0;
  Vector theta;
  double norm_bound = 5.0;

  bool operator==(const ClusterModel&) const = default;
};

struct NaiveModel {
  Vector w;

  bool operator==(const NaiveModel&) const = default;
};

struct TrainConfig {
  double learning_rate = 0.05;
  std::size_t epochs = 5;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  double norm_bound = 5.0;
  double l2_penalty = 1e-4;

  void validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
      throw ConfigError("learning_rate must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(norm_bound > 0.0) || !std::isfinite(norm_bound))
      throw ConfigError("norm_bound must be positive");
    if (!(l2_penalty >= 0.0) || !std::isfinite(l2_penalty))
      throw ConfigError("l2_penalty must be non-negative");
  }
};

inline double reward_naive(const NaiveModel& model, std::span<const double> x) {
  return dot(model.w, x);
}

inline double reward_personal(const SharedBackbone& backbone, std::span<const double> e,
                              std::span<const double> x) {
  require_same_size(backbone.feature_dim(), x.size(), "reward_personal (features)");
  require_same_size(backbone.embedding_dim(), e.size(), "reward_personal (embedding)");
  return dot(backbone.u, x) + dot(e, matvec(backbone.V, x));
}

/// Radial projection onto the L2 ball of radius `bound`.
inline void project_to_ball(Vector& theta, double bound) noexcept {
  const double n = norm(theta);
  if (n > bound) {
    const double scale = bound / n;
    for (auto& t : theta) t *= scale;
  }
}

// ---------------------------------------------------------------------------
// Difference-vector caches

/// delta = chosen - rejected for each record, plus the owning worker's position in the corpus.
struct PairDeltas {
  std::vector<Vector> delta;
  std::vector<std::size_t> worker;

  std::size_t size() const noexcept { return delta.size(); }
};

inline PairDeltas make_pair_deltas(const Corpus& corpus) {
  PairDeltas out;
  out.delta.reserve(corpus.n_records());
  out.worker.reserve(corpus.n_records());
  for (std::size_t wi = 0; wi < corpus.workers.size(); ++wi) {
    for (const auto& r : corpus.workers[wi].records) {
      out.delta.push_back(subtract(r.chosen, r.rejected));
      out.worker.push_back(wi);
    }
  }
  return out;
}

inline PairDeltas make_pair_deltas(std::span<const PreferenceRecord> records) {
  PairDeltas out;
  out.delta.reserve(records.size());
  out.worker.assign(records.size(), 0);
  for (const auto& r : records) out.delta.push_back(subtract(r.chosen, r.rejected));
  return out;
}

/// With the backbone frozen a cluster margin is offset + <theta, direction>, where
/// offset = <u, delta> and direction = V delta.
struct ProjectedPairs {
  Vector offset;
  std::vector<Vector> direction;

  std::size_t size() const noexcept { return offset.size(); }
};

inline ProjectedPairs project_pairs(std::span<const PreferenceRecord> records,
                                    const SharedBackbone& backbone) {
  ProjectedPairs out;
  out.offset.reserve(records.size());
  out.direction.reserve(records.size());
  for (const auto& r : records) {
    const Vector delta = subtract(r.chosen, r.rejected);
    out.offset.push_back(dot(backbone.u, delta));
    out.direction.push_back(matvec(backbone.V, delta));
  }
  return out;
}

inline double projected_margin(const ProjectedPairs& pairs, std::size_t j,
                               std::span<const double> theta) {
  return pairs.offset[j] + dot(theta, pairs.direction[j]);
}

/// Sum (not mean) of log sigma over the given pairs under theta.
inline double projected_log_likelihood(const ProjectedPairs& pairs,
                                       std::span<const double> theta) {
  double s = 0.0;
  for (std::size_t j = 0; j < pairs.size(); ++j) s += log_sigmoid(projected_margin(pairs, j, theta));
  return s;
}

// ---------------------------------------------------------------------------
// Objectives and analytic gradients. `indices` selects a mini-batch; the full-data
// versions below pass every index.

namespace detail {

inline std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return idx;
}

inline Vector naive_batch_gradient(const PairDeltas& pairs, std::span<const std::size_t> indices,
                                   std::span<const double> w, double l2) {
  Vector acc(w.size(), 0.0);
  for (std::size_t j : indices) {
    const double g = sigmoid(-dot(w, pairs.delta[j]));
    axpy(g, pairs.delta[j], acc);
  }
  const double inv = indices.empty() ? 0.0 : 1.0 / static_cast<double>(indices.size());
  Vector grad(w.size());
  for (std::size_t k = 0; k < w.size(); ++k) grad[k] = acc[k] * inv - 2.0 * l2 * w[k];
  return grad;
}

inline Vector theta_batch_gradient(const ProjectedPairs& pairs,
                                   std::span<const std::size_t> indices,
                                   std::span<const double> theta) {
  Vector acc(theta.size(), 0.0);
  for (std::size_t j : indices) {
    const double g = sigmoid(-projected_margin(pairs, j, theta));
    axpy(g, pairs.direction[j], acc);
  }
  const double inv = indices.empty() ? 0.0 : 1.0 / static_cast<double>(indices.size());
  for (auto& a : acc) a *= inv;
  return acc;
}

}  // namespace detail

inline double naive_objective(const PairDeltas& pairs, std::span<const double> w, double l2) {
  if (pairs.size() == 0) return -l2 * squared_norm(w);
  double s = 0.0;
  for (const auto& d : pairs.delta) s += log_sigmoid(dot(w, d));
  return s / static_cast<double>(pairs.size()) - l2 * squared_norm(w);
}

inline Vector naive_gradient(const PairDeltas& pairs, std::span<const double> w, double l2) {
  const auto idx = detail::all_indices(pairs.size());
  return detail::naive_batch_gradient(pairs, idx, w, l2);
}

/// Mean log-likelihood of the cluster parameter over the pairs (no penalty on theta).
inline double theta_objective(const ProjectedPairs& pairs, std::span<const double> theta) {
  if (pairs.size() == 0) return 0.0;
  return projected_log_likelihood(pairs, theta) / static_cast<double>(pairs.size());
}

inline Vector theta_gradient(const ProjectedPairs& pairs, std::span<const double> theta) {
  const auto idx = detail::all_indices(pairs.size());
  return detail::theta_batch_gradient(pairs, idx, theta);
}

struct JointGradient {
  Vector du;
  Matrix dV;
  std::vector<Vector> de;  // aligned with the embeddings passed in
};

namespace detail {

inline void check_embedding_alignment(const Corpus& corpus,
                                      std::span<const WorkerEmbedding> embeddings,
                                      std::size_t m) {
  if (embeddings.size() != corpus.n_workers())
    throw ConsistencyError("joint model has " + std::to_string(embeddings.size()) +
                           " embeddings for " + std::to_string(corpus.n_workers()) + " workers");
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    if (embeddings[i].worker_id != corpus.workers[i].worker_id)
      throw ConsistencyError("no embedding for worker '" + corpus.workers[i].worker_id + "'");
    if (embeddings[i].e.size() != m)
      throw DimensionError("embedding of worker '" + embeddings[i].worker_id +
                           "' has wrong length");
  }
}

inline JointGradient joint_batch_gradient(const PairDeltas& pairs,
                                          std::span<const std::size_t> indices,
                                          const SharedBackbone& backbone,
                                          std::span<const WorkerEmbedding> embeddings,
                                          double l2) {
  const std::size_t d = backbone.feature_dim();
  const std::size_t m = backbone.embedding_dim();
  JointGradient acc{Vector(d, 0.0), Matrix(m, d), std::vector<Vector>(embeddings.size())};
  for (auto& de : acc.de) de.assign(m, 0.0);

  for (std::size_t j : indices) {
    const auto& delta = pairs.delta[j];
    const std::size_t w = pairs.worker[j];
    if (w >= embeddings.size())
      throw ConsistencyError("pair references unknown worker index " + std::to_string(w));
    const auto& e = embeddings[w].e;
    const Vector v_delta = matvec(backbone.V, delta);
    const double margin = dot(backbone.u, delta) + dot(e, v_delta);
    const double g = sigmoid(-margin);
    axpy(g, delta, acc.du);
    for (std::size_t a = 0; a < m; ++a) axpy(g * e[a], delta, acc.dV.row(a));
    axpy(g, v_delta, acc.de[w]);
  }

  const double inv = indices.empty() ? 0.0 : 1.0 / static_cast<double>(indices.size());
  for (std::size_t k = 0; k < d; ++k) acc.du[k] = acc.du[k] * inv - 2.0 * l2 * backbone.u[k];
  auto& dv = acc.dV.data();
  const auto& v = backbone.V.data();
  for (std::size_t k = 0; k < dv.size(); ++k) dv[k] = dv[k] * inv - 2.0 * l2 * v[k];
  for (auto& de : acc.de)
    for (auto& x : de) x *= inv;
  return acc;
}

}  // namespace detail

inline double joint_objective(const Corpus& corpus, const SharedBackbone& backbone,
                              std::span<const WorkerEmbedding> embeddings, double l2) {
  detail::check_embedding_alignment(corpus, embeddings, backbone.embedding_dim());
  const double penalty = l2 * (squared_norm(backbone.u) + squared_norm(backbone.V.data()));
  const std::size_t n = corpus.n_records();
  if (n == 0) return -penalty;
  double s = 0.0;
  for (std::size_t wi = 0; wi < corpus.workers.size(); ++wi) {
    for (const auto& r : corpus.workers[wi].records) {
      const Vector delta = subtract(r.chosen, r.rejected);
      s += log_sigmoid(dot(backbone.u, delta) +
                       dot(embeddings[wi].e, matvec(backbone.V, delta)));
    }
  }
  return s / static_cast<double>(n) - penalty;
}

inline JointGradient joint_gradient(const Corpus& corpus, const SharedBackbone& backbone,
                                    std::span<const WorkerEmbedding> embeddings, double l2) {
  detail::check_embedding_alignment(corpus, embeddings, backbone.embedding_dim());
  const PairDeltas pairs = make_pair_deltas(corpus);
  const auto idx = detail::all_indices(pairs.size());
  return detail::joint_batch_gradient(pairs, idx, backbone, embeddings, l2);
}

// ---------------------------------------------------------------------------
// Trainers. All use plain mini-batch gradient ascent with a constant learning rate; the
// batch order of every epoch comes from one seeded stream so runs are bit-reproducible.

namespace detail {

inline constexpr std::uint64_t kBatchStream = 0x62617463;      // "batc"
inline constexpr std::uint64_t kEmbeddingStream = 0x656d6264;  // "embd"

template <typename Step>
void for_each_batch(std::size_t n, const TrainConfig& config, std::uint64_t stream, Step&& step) {
  Rng rng(derive_seed(config.seed, stream));
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = rng.permutation(n);
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t end = std::min(n, start + config.batch_size);
      step(std::span<const std::size_t>(order.data() + start, end - start));
    }
  }
}

}  // namespace detail

/// Pooled ("naive RLHF") model trained on every record regardless of worker.
inline NaiveModel train_naive(const Corpus& corpus, const TrainConfig& config) {
  config.validate();
  if (corpus.n_records() == 0) throw DataError("train_naive: empty corpus");
  const PairDeltas pairs = make_pair_deltas(corpus);
  NaiveModel model{Vector(corpus.feature_dim, 0.0)};
  detail::for_each_batch(pairs.size(), config, detail::kBatchStream,
                         [&](std::span<const std::size_t> batch) {
                           const Vector g = detail::naive_batch_gradient(
                               pairs, batch, model.w, config.l2_penalty);
                           axpy(config.learning_rate, g, model.w);
                         });
  return model;
}

struct JointModel {
  SharedBackbone backbone;
  std::vector<WorkerEmbedding> embeddings;  // corpus worker order
};

struct JointOptions {
  /// Pin every embedding at zero; the model then reduces to the shared linear reward.
  bool freeze_embeddings = false;
};

/// Embedding initialization: independent N(0, (0.1/sqrt(m))^2) draws, one stream per worker.
inline std::vector<WorkerEmbedding> initial_embeddings(const Corpus& corpus,
                                                       std::size_t embedding_dim,
                                                       std::uint64_t seed) {
  std::vector<WorkerEmbedding> out;
  out.reserve(corpus.n_workers());
  const double scale = 0.1 / std::sqrt(static_cast<double>(embedding_dim));
  const std::uint64_t base = derive_seed(seed, detail::kEmbeddingStream);
  for (std::size_t wi = 0; wi < corpus.n_workers(); ++wi) {
    Rng rng(derive_seed(base, wi));
    out.push_back({corpus.workers[wi].worker_id, rng.normal_vector(embedding_dim, scale)});
  }
  return out;
}

/// Jointly learns the shared backbone (u, V) and one embedding per worker.
/// u and V start at zero; embeddings start small and random to break symmetry.
inline JointModel train_joint(const Corpus& corpus, const TrainConfig& config,
                              std::size_t embedding_dim, JointOptions options = {}) {
  config.validate();
  if (embedding_dim == 0) throw ConfigError("embedding_dim must be at least 1");
  if (corpus.n_records() == 0) throw DataError("train_joint: empty corpus");

  JointModel model{SharedBackbone(corpus.feature_dim, embedding_dim), {}};
  if (options.freeze_embeddings) {
    for (const auto& w : corpus.workers)
      model.embeddings.push_back({w.worker_id, Vector(embedding_dim, 0.0)});
  } else {
    model.embeddings = initial_embeddings(corpus, embedding_dim, config.seed);
  }

  const PairDeltas pairs = make_pair_deltas(corpus);
  detail::for_each_batch(
      pairs.size(), config, detail::kBatchStream, [&](std::span<const std::size_t> batch) {
        const JointGradient g = detail::joint_batch_gradient(pairs, batch, model.backbone,
                                                             model.embeddings, config.l2_penalty);
        axpy(config.learning_rate, g.du, model.backbone.u);
        axpy(config.learning_rate, g.dV.data(), model.backbone.V.data());
        if (!options.freeze_embeddings)
          for (std::size_t w = 0; w < model.embeddings.size(); ++w)
            axpy(config.learning_rate, g.de[w], model.embeddings[w].e);
      });
  return model;
}

struct ThetaFit {
  ClusterModel model;
  /// Mean log-likelihood at the (projected) starting point, then after each epoch.
  std::vector<double> epoch_objectives;
};

/// Projected gradient ascent on a cluster parameter with the backbone frozen.
/// theta is projected onto the ball of radius config.norm_bound after every step, and the
/// best iterate seen at epoch boundaries (including the start) is returned, so the result
/// never scores below the warm start.
inline ThetaFit fit_cluster_theta_traced(const ProjectedPairs& pairs, Vector init_theta,
                                         const TrainConfig& config,
                                         std::size_t cluster_index = 0) {
  config.validate();
  if (pairs.size() == 0) throw DataError("fit_cluster_theta: no records for cluster");
  if (!all_finite(init_theta)) throw DomainError("fit_cluster_theta: non-finite initial theta");
  if (!pairs.direction.empty()) require_same_size(init_theta.size(), pairs.direction[0].size(),
                                                  "fit_cluster_theta (theta)");

  Vector theta = std::move(init_theta);
  project_to_ball(theta, config.norm_bound);

  ThetaFit fit;
  double best = theta_objective(pairs, theta);
  Vector best_theta = theta;
  fit.epoch_objectives.push_back(best);

  Rng rng(derive_seed(config.seed, detail::kBatchStream + cluster_index));
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = rng.permutation(pairs.size());
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const Vector g = detail::theta_batch_gradient(
          pairs, std::span<const std::size_t>(order.data() + start, end - start), theta);
      axpy(config.learning_rate, g, theta);
      project_to_ball(theta, config.norm_bound);
    }
    const double obj = theta_objective(pairs, theta);
    fit.epoch_objectives.push_back(obj);
    if (obj > best) {
      best = obj;
      best_theta = theta;
    }
  }

  fit.model = ClusterModel{cluster_index, std::move(best_theta), config.norm_bound};
  return fit;
}

inline ClusterModel fit_cluster_theta(std::span<const PreferenceRecord> records,
                                      const SharedBackbone& backbone, Vector init_theta,
                                      const TrainConfig& config, std::size_t cluster_index = 0) {
  if (records.empty()) throw DataError("fit_cluster_theta: no records for cluster");
  return fit_cluster_theta_traced(project_pairs(records, backbone), std::move(init_theta), config,
                                  cluster_index)
      .model;
}

// ---------------------------------------------------------------------------
// Model files: JSON with a shape header and flat row-major arrays.

struct ModelFile {
  std::size_t feature_dim = 0;
  std::size_t embedding_dim = 0;
  std::optional<SharedBackbone> backbone;
  std::vector<WorkerEmbedding> embeddings;
  std::vector<ClusterModel> clusters;
  std::optional<NaiveModel> naive;

  bool operator==(const ModelFile&) const = default;
};

inline nlohmann::ordered_json to_json(const ModelFile& f) {
  nlohmann::ordered_json j;
  j["format"] = "prefclust.model.v1";
  j["feature_dim"] = f.feature_dim;
  j["embedding_dim"] = f.embedding_dim;
  if (f.backbone) {
    j["u"] = f.backbone->u;
    j["V"] = f.backbone->V.data();
  }
  if (!f.embeddings.empty()) {
    nlohmann::ordered_json e = nlohmann::ordered_json::object();
    for (const auto& w : f.embeddings) e[w.worker_id] = w.e;
    j["embeddings"] = std::move(e);
  }
  if (!f.clusters.empty()) {
    j["norm_bound"] = f.clusters.front().norm_bound;
    nlohmann::ordered_json c = nlohmann::ordered_json::object();
    for (const auto& k : f.clusters) c[std::to_string(k.index)] = k.theta;
    j["clusters"] = std::move(c);
  }
  if (f.naive) j["naive_w"] = f.naive->w;
  return j;
}

inline ModelFile model_file_from_json(const nlohmann::ordered_json& j) {
  try {
    ModelFile f;
    f.feature_dim = j.at("feature_dim").get<std::size_t>();
    f.embedding_dim = j.at("embedding_dim").get<std::size_t>();
    const auto check_len = [](const Vector& v, std::size_t n, const std::string& what) {
      if (v.size() != n)
        throw DimensionError("model file: " + what + " has length " + std::to_string(v.size()) +
                             ", expected " + std::to_string(n));
    };
    if (j.contains("u")) {
      Vector u = j["u"].get<Vector>();
      check_len(u, f.feature_dim, "u");
      Vector v = j.at("V").get<Vector>();
      check_len(v, f.feature_dim * f.embedding_dim, "V");
      f.backbone = SharedBackbone(std::move(u), Matrix(f.embedding_dim, f.feature_dim, std::move(v)));
    }
    if (j.contains("embeddings")) {
      for (const auto& [id, arr] : j["embeddings"].items()) {
        Vector e = arr.get<Vector>();
        check_len(e, f.embedding_dim, "embedding '" + id + "'");
        f.embeddings.push_back({id, std::move(e)});
      }
    }
    if (j.contains("clusters")) {
      const double bound = j.at("norm_bound").get<double>();
      for (const auto& [key, arr] : j["clusters"].items()) {
        Vector theta = arr.get<Vector>();
        check_len(theta, f.embedding_dim, "cluster " + key);
        f.clusters.push_back({static_cast<std::size_t>(std::stoul(key)), std::move(theta), bound});
      }
      std::sort(f.clusters.begin(), f.clusters.end(),
                [](const ClusterModel& a, const ClusterModel& b) { return a.index < b.index; });
    }
    if (j.contains("naive_w")) {
      Vector w = j["naive_w"].get<Vector>();
      check_len(w, f.feature_dim, "naive_w");
      f.naive = NaiveModel{std::move(w)};
    }
    return f;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("model file: ") + e.what());
  }
}

inline void write_model_file(const ModelFile& f, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << to_json(f).dump(2) << '\n';
}

inline ModelFile read_model_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return model_file_from_json(nlohmann::ordered_json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace prefclust
