#pragma once

// Worker clustering: the alternating fit/assign procedure over cluster parameters, plus the
// embedding-space tools (cosine similarity, spherical k-means, PCA projection, ARI).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "prefclust/btl.hpp"
#include "prefclust/errors.hpp"
#include "prefclust/format.hpp"
#include "prefclust/linalg.hpp"
#include "prefclust/parallel.hpp"
#include "prefclust/preference_data.hpp"
#include "prefclust/random.hpp"
#include "prefclust/reward_models.hpp"

namespace prefclust {

/// worker_id -> cluster index in [0, k).
struct ClusterAssignment {
  std::size_t k = 1;
  std::map<std::string, std::size_t> labels;

  std::size_t at(const std::string& worker_id) const {
    const auto it = labels.find(worker_id);
    if (it == labels.end()) throw DataError("worker '" + worker_id + "' is not assigned");
    return it->second;
  }

  bool contains(const std::string& worker_id) const { return labels.count(worker_id) != 0; }

  std::vector<std::size_t> cluster_sizes() const {
    std::vector<std::size_t> sizes(k, 0);
    for (const auto& [id, c] : labels) ++sizes.at(c);
    return sizes;
  }

  bool operator==(const ClusterAssignment&) const = default;
};

/// Index of the largest score; the lowest index wins ties.
inline std::size_t argmax_cluster(std::span<const double> scores) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < scores.size(); ++k)
    if (scores[k] > scores[best]) best = k;
  return best;
}

namespace detail {

inline void check_models(const SharedBackbone& backbone, std::span<const ClusterModel> models) {
  if (models.empty()) throw ConfigError("at least one cluster model is required");
  for (const auto& m : models)
    require_same_size(m.theta.size(), backbone.embedding_dim(), "cluster theta");
}

inline std::vector<ProjectedPairs> project_workers(const Corpus& corpus,
                                                   const SharedBackbone& backbone,
                                                   std::size_t threads) {
  require_same_size(corpus.feature_dim, backbone.feature_dim(), "corpus vs backbone");
  std::vector<ProjectedPairs> out(corpus.n_workers());
  parallel_for(corpus.n_workers(), threads, [&](std::size_t i) {
    out[i] = project_pairs(corpus.workers[i].records, backbone);
  });
  return out;
}

/// N x K matrix of per-worker summed log-likelihoods.
inline Matrix score_workers(const std::vector<ProjectedPairs>& pairs,
                            std::span<const Vector> thetas, std::size_t threads) {
  Matrix scores(pairs.size(), thetas.size());
  parallel_for(pairs.size(), threads, [&](std::size_t i) {
    for (std::size_t k = 0; k < thetas.size(); ++k)
      scores(i, k) = projected_log_likelihood(pairs[i], thetas[k]);
  });
  return scores;
}

}  // namespace detail

/// Summed log-likelihood of each worker's records under each cluster model (N x K).
inline Matrix worker_cluster_scores(const Corpus& corpus, const SharedBackbone& backbone,
                                    std::span<const ClusterModel> models,
                                    std::size_t threads = 1) {
  detail::check_models(backbone, models);
  std::vector<Vector> thetas;
  for (const auto& m : models) thetas.push_back(m.theta);
  return detail::score_workers(detail::project_workers(corpus, backbone, threads), thetas,
                               threads);
}

/// Assigns each worker to the cluster whose model gives its records the highest total
/// log-likelihood.
inline ClusterAssignment assign_workers(const Corpus& corpus, const SharedBackbone& backbone,
                                        std::span<const ClusterModel> models,
                                        std::size_t threads = 1) {
  const Matrix scores = worker_cluster_scores(corpus, backbone, models, threads);
  ClusterAssignment out{models.size(), {}};
  for (std::size_t i = 0; i < corpus.n_workers(); ++i)
    out.labels[corpus.workers[i].worker_id] = argmax_cluster(scores.row(i));
  return out;
}

// ---------------------------------------------------------------------------
// Alternating maximization

struct AlternationRound {
  std::size_t round = 0;
  double total_loglik = 0.0;
  std::size_t n_reassigned = 0;
  std::vector<std::size_t> cluster_sizes;
};

struct AlternationTrace {
  /// Total log-likelihood of the initial assignment under the initial parameters.
  double initial_loglik = 0.0;
  std::vector<AlternationRound> rounds;
  /// True when the last round reassigned no worker.
  bool converged = false;
  std::size_t empty_cluster_repairs = 0;
};

struct ClusterInit {
  ClusterAssignment assignment;
  /// Starting cluster parameters; empty means all zeros.
  std::vector<Vector> thetas;
};

struct ClusterFitResult {
  std::vector<ClusterModel> models;
  ClusterAssignment assignment;
  AlternationTrace trace;
};

/// Balanced random start: workers are shuffled and dealt round-robin into k clusters.
inline ClusterInit random_init(const Corpus& corpus, std::size_t k, std::uint64_t seed) {
  if (k == 0 || k > corpus.n_workers()) throw ConfigError("K must lie in [1, N]");
  Rng rng(seed);
  const auto perm = rng.permutation(corpus.n_workers());
  ClusterInit init{{k, {}}, {}};
  for (std::size_t pos = 0; pos < perm.size(); ++pos)
    init.assignment.labels[corpus.workers[perm[pos]].worker_id] = pos % k;
  return init;
}

namespace detail {

inline double total_loglik(const Matrix& scores, std::span<const std::size_t> labels) {
  double s = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) s += scores(i, labels[i]);
  return s;
}

inline ProjectedPairs gather_pairs(const std::vector<ProjectedPairs>& per_worker,
                                   std::span<const std::size_t> labels, std::size_t cluster) {
  ProjectedPairs out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != cluster) continue;
    out.offset.insert(out.offset.end(), per_worker[i].offset.begin(), per_worker[i].offset.end());
    out.direction.insert(out.direction.end(), per_worker[i].direction.begin(),
                         per_worker[i].direction.end());
  }
  return out;
}

}  // namespace detail

/// Alternates cluster fits (each cluster's theta maximizes the likelihood of its current
/// members' records inside the norm ball) with likelihood-argmax reassignment, until a round
/// reassigns nobody or `max_rounds` is reached.
///
/// A cluster left empty by reassignment receives the worker with the lowest log-likelihood
/// under its own cluster (taken from clusters with at least two members) and starts its
/// next fit from that donor cluster's theta. The move leaves the total likelihood unchanged
/// and fits never end below their warm start, so the trace total is non-decreasing.
inline ClusterFitResult fit_clusters(const Corpus& corpus, const SharedBackbone& backbone,
                                       std::size_t k, const TrainConfig& config,
                                       const ClusterInit& init, std::size_t max_rounds = 20,
                                       std::size_t threads = 1) {
  config.validate();
  const std::size_t n = corpus.n_workers();
  const std::size_t m = backbone.embedding_dim();
  if (k == 0) throw ConfigError("K must be at least 1");
  if (k > n)
    throw ConfigError("K = " + std::to_string(k) + " exceeds the number of workers (" +
                      std::to_string(n) + ")");
  if (max_rounds == 0) throw ConfigError("max_rounds must be at least 1");
  if (init.assignment.k != k) throw ConfigError("initial assignment has a different K");

  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = init.assignment.at(corpus.workers[i].worker_id);
    if (labels[i] >= k) throw ConfigError("initial assignment label out of range");
  }

  std::vector<Vector> thetas = init.thetas;
  if (thetas.empty()) thetas.assign(k, Vector(m, 0.0));
  if (thetas.size() != k) throw ConfigError("initial thetas must have one entry per cluster");
  for (auto& t : thetas) {
    require_same_size(t.size(), m, "initial theta");
    project_to_ball(t, config.norm_bound);
  }

  const auto per_worker = detail::project_workers(corpus, backbone, threads);

  ClusterFitResult result;
  Matrix scores = detail::score_workers(per_worker, thetas, threads);
  result.trace.initial_loglik = detail::total_loglik(scores, labels);

  for (std::size_t round = 1; round <= max_rounds; ++round) {
    // Empty-cluster repair.
    for (;;) {
      std::vector<std::size_t> sizes(k, 0);
      for (auto l : labels) ++sizes[l];
      const auto empty = std::find(sizes.begin(), sizes.end(), std::size_t{0});
      if (empty == sizes.end()) break;
      std::optional<std::size_t> donor;
      for (std::size_t i = 0; i < n; ++i) {
        if (sizes[labels[i]] < 2) continue;
        if (!donor || scores(i, labels[i]) < scores(*donor, labels[*donor])) donor = i;
      }
      const auto target = static_cast<std::size_t>(empty - sizes.begin());
      thetas[target] = thetas[labels[*donor]];
      for (std::size_t i = 0; i < n; ++i) scores(i, target) = scores(i, labels[*donor]);
      labels[*donor] = target;
      ++result.trace.empty_cluster_repairs;
    }

    // Fit step: clusters are independent given the assignment.
    TrainConfig round_config = config;
    round_config.seed = derive_seed(config.seed, round);
    parallel_for(k, threads, [&](std::size_t c) {
      const ProjectedPairs pairs = detail::gather_pairs(per_worker, labels, c);
      thetas[c] = fit_cluster_theta_traced(pairs, thetas[c], round_config, c).model.theta;
    });

    // Assignment step.
    scores = detail::score_workers(per_worker, thetas, threads);
    std::size_t moved = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t best = argmax_cluster(scores.row(i));
      if (best != labels[i]) {
        labels[i] = best;
        ++moved;
      }
    }

    AlternationRound entry;
    entry.round = round;
    entry.total_loglik = detail::total_loglik(scores, labels);
    entry.n_reassigned = moved;
    entry.cluster_sizes.assign(k, 0);
    for (auto l : labels) ++entry.cluster_sizes[l];
    result.trace.rounds.push_back(std::move(entry));

    if (moved == 0) {
      result.trace.converged = true;
      break;
    }
  }

  result.assignment.k = k;
  for (std::size_t i = 0; i < n; ++i) result.assignment.labels[corpus.workers[i].worker_id] = labels[i];
  for (std::size_t c = 0; c < k; ++c)
    result.models.push_back(ClusterModel{c, std::move(thetas[c]), config.norm_bound});
  return result;
}

// ---------------------------------------------------------------------------
// Embedding-space analysis

struct SimilarityMatrix {
  std::vector<std::string> worker_ids;
  Matrix values;
};

namespace detail {

inline void require_nonzero(const WorkerEmbedding& w) {
  if (norm(w.e) == 0.0) throw DataError("embedding of worker '" + w.worker_id + "' is zero");
}

}  // namespace detail

inline SimilarityMatrix cosine_similarity_matrix(std::span<const WorkerEmbedding> embeddings) {
  if (embeddings.size() < 2) throw ConfigError("similarity needs at least two embeddings");
  const std::size_t n = embeddings.size();
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    detail::require_nonzero(embeddings[i]);
    require_same_size(embeddings[i].e.size(), embeddings[0].e.size(), "embedding length");
    norms[i] = norm(embeddings[i].e);
  }
  SimilarityMatrix out{{}, Matrix(n, n)};
  for (const auto& w : embeddings) out.worker_ids.push_back(w.worker_id);
  for (std::size_t i = 0; i < n; ++i) {
    out.values(i, i) = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double c =
          std::clamp(dot(embeddings[i].e, embeddings[j].e) / (norms[i] * norms[j]), -1.0, 1.0);
      out.values(i, j) = c;
      out.values(j, i) = c;
    }
  }
  return out;
}

struct SphericalKMeansResult {
  ClusterAssignment assignment;
  std::vector<Vector> centroids;  // unit length
  /// Sum of cosine similarity to the assigned centroid, after each assignment pass.
  std::vector<double> objective_trace;
  std::size_t iterations = 0;
};

/// k-means under cosine geometry. Seeding picks a random first point, then greedily adds the
/// point least similar to every chosen center.
inline SphericalKMeansResult spherical_kmeans(std::span<const WorkerEmbedding> embeddings,
                                              std::size_t k, std::uint64_t seed,
                                              std::size_t max_iters = 100) {
  const std::size_t n = embeddings.size();
  if (k == 0 || k > n) throw ConfigError("K must lie in [1, N] for spherical k-means");
  if (max_iters == 0) throw ConfigError("max_iters must be at least 1");

  std::vector<Vector> x(n);
  for (std::size_t i = 0; i < n; ++i) {
    detail::require_nonzero(embeddings[i]);
    require_same_size(embeddings[i].e.size(), embeddings[0].e.size(), "embedding length");
    x[i] = embeddings[i].e;
    const double nr = norm(x[i]);
    for (auto& v : x[i]) v /= nr;
  }

  Rng rng(seed);
  std::vector<std::size_t> chosen{static_cast<std::size_t>(rng.below(n))};
  std::vector<bool> is_center(n, false);
  is_center[chosen[0]] = true;
  while (chosen.size() < k) {
    std::optional<std::size_t> far;
    double far_sim = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (is_center[i]) continue;
      double closest = -2.0;
      for (auto c : chosen) closest = std::max(closest, dot(x[i], x[c]));
      if (!far || closest < far_sim) {
        far = i;
        far_sim = closest;
      }
    }
    chosen.push_back(*far);
    is_center[*far] = true;
  }

  SphericalKMeansResult out;
  for (auto c : chosen) out.centroids.push_back(x[c]);

  std::vector<std::size_t> labels(n, 0);
  for (std::size_t it = 0; it < max_iters; ++it) {
    std::vector<std::size_t> next(n);
    double objective = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> sims(k);
      for (std::size_t c = 0; c < k; ++c) sims[c] = dot(x[i], out.centroids[c]);
      next[i] = argmax_cluster(sims);
      objective += sims[next[i]];
    }
    out.objective_trace.push_back(objective);
    out.iterations = it + 1;
    const bool changed = it == 0 || next != labels;
    labels = std::move(next);
    if (!changed) break;

    for (std::size_t c = 0; c < k; ++c) {
      Vector sum(x[0].size(), 0.0);
      for (std::size_t i = 0; i < n; ++i)
        if (labels[i] == c) axpy(1.0, x[i], sum);
      const double nr = norm(sum);
      if (nr > 0.0) {
        for (auto& v : sum) v /= nr;
        out.centroids[c] = std::move(sum);
      }
    }
  }

  out.assignment.k = k;
  for (std::size_t i = 0; i < n; ++i) out.assignment.labels[embeddings[i].worker_id] = labels[i];
  return out;
}

/// Starting point for the alternating procedure from a given partition of the embedded
/// workers: each cluster's theta is the mean embedding of its members (zero if it has none).
inline ClusterInit init_from_embeddings(std::span<const WorkerEmbedding> embeddings,
                                           const ClusterAssignment& assignment) {
  if (embeddings.empty()) throw ConfigError("no embeddings to initialize from");
  ClusterInit init{assignment,
                      std::vector<Vector>(assignment.k, Vector(embeddings[0].e.size(), 0.0))};
  std::vector<std::size_t> counts(assignment.k, 0);
  for (const auto& w : embeddings) {
    const auto c = assignment.at(w.worker_id);
    axpy(1.0, w.e, init.thetas[c]);
    ++counts[c];
  }
  for (std::size_t c = 0; c < assignment.k; ++c)
    if (counts[c] > 0)
      for (auto& v : init.thetas[c]) v /= static_cast<double>(counts[c]);
  return init;
}

/// k-means labels on the embeddings, thetas from member means.
inline ClusterInit kmeans_init(std::span<const WorkerEmbedding> embeddings, std::size_t k,
                                  std::uint64_t seed, std::size_t max_iters = 100) {
  return init_from_embeddings(embeddings, spherical_kmeans(embeddings, k, seed, max_iters).assignment);
}

struct PcaProjection {
  std::vector<std::string> worker_ids;
  Matrix coords;      // N x out_dim
  Matrix components;  // out_dim x m, unit rows
  Vector eigenvalues;  // all m covariance eigenvalues, descending
  /// Set when every embedding is identical; coordinates are then all zero.
  bool degenerate = false;
};

/// Projects mean-centred embeddings onto their top principal components (covariance scaled
/// by 1/N). Each component is oriented so its largest-magnitude loading is positive.
inline PcaProjection pca_project(std::span<const WorkerEmbedding> embeddings,
                                 std::size_t out_dim) {
  const std::size_t n = embeddings.size();
  if (n == 0) throw ConfigError("pca_project: no embeddings");
  const std::size_t m = embeddings[0].e.size();
  if (out_dim == 0 || out_dim > m) throw ConfigError("pca_project: out_dim must lie in [1, m]");
  if (n <= out_dim) throw ConfigError("pca_project: need more workers than output dimensions");

  Vector mean(m, 0.0);
  for (const auto& w : embeddings) {
    require_same_size(w.e.size(), m, "embedding length");
    axpy(1.0 / static_cast<double>(n), w.e, mean);
  }
  std::vector<Vector> centred;
  for (const auto& w : embeddings) centred.push_back(subtract(w.e, mean));

  Matrix cov(m, m);
  for (const auto& c : centred)
    for (std::size_t a = 0; a < m; ++a)
      for (std::size_t b = 0; b < m; ++b) cov(a, b) += c[a] * c[b] / static_cast<double>(n);

  PcaProjection out;
  for (const auto& w : embeddings) out.worker_ids.push_back(w.worker_id);
  out.coords = Matrix(n, out_dim);
  out.components = Matrix(out_dim, m);

  const bool identical = std::all_of(embeddings.begin(), embeddings.end(),
                                     [&](const WorkerEmbedding& w) { return w.e == embeddings[0].e; });
  if (identical) {
    out.eigenvalues.assign(m, 0.0);
    out.degenerate = true;
    return out;
  }

  const auto eig = symmetric_eigen(cov);
  out.eigenvalues = eig.values;
  for (std::size_t p = 0; p < out_dim; ++p) {
    std::size_t lead = 0;
    for (std::size_t a = 1; a < m; ++a)
      if (std::abs(eig.vectors(a, p)) > std::abs(eig.vectors(lead, p))) lead = a;
    const double sign = eig.vectors(lead, p) < 0.0 ? -1.0 : 1.0;
    for (std::size_t a = 0; a < m; ++a) out.components(p, a) = sign * eig.vectors(a, p);
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < out_dim; ++p)
      out.coords(i, p) = dot(centred[i], out.components.row(p));
  return out;
}

/// Adjusted Rand index between two partitions of the same workers.
inline double adjusted_rand_index(const ClusterAssignment& a, const ClusterAssignment& b) {
  if (a.labels.size() != b.labels.size())
    throw DataError("adjusted_rand_index: partitions cover different worker sets");
  std::map<std::pair<std::size_t, std::size_t>, double> table;
  std::map<std::size_t, double> rows, cols;
  for (const auto& [id, la] : a.labels) {
    const auto it = b.labels.find(id);
    if (it == b.labels.end())
      throw DataError("adjusted_rand_index: worker '" + id + "' missing from second partition");
    table[{la, it->second}] += 1.0;
    rows[la] += 1.0;
    cols[it->second] += 1.0;
  }
  const auto pairs = [](double x) { return x * (x - 1.0) / 2.0; };
  double index = 0.0, sum_rows = 0.0, sum_cols = 0.0;
  for (const auto& [key, c] : table) index += pairs(c);
  for (const auto& [key, c] : rows) sum_rows += pairs(c);
  for (const auto& [key, c] : cols) sum_cols += pairs(c);
  const double total = pairs(static_cast<double>(a.labels.size()));
  if (total == 0.0) return 1.0;
  const double expected = sum_rows * sum_cols / total;
  const double max_index = 0.5 * (sum_rows + sum_cols);
  // Both partitions trivial in the same way (all singletons or one block): identical.
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

// ---------------------------------------------------------------------------
// Exports

inline void write_similarity_csv(const SimilarityMatrix& s, std::ostream& out) {
  out << "worker_id";
  for (const auto& id : s.worker_ids) out << ',' << id;
  out << '\n';
  for (std::size_t i = 0; i < s.worker_ids.size(); ++i) {
    out << s.worker_ids[i];
    for (std::size_t j = 0; j < s.worker_ids.size(); ++j) out << ',' << format_fixed(s.values(i, j), 6);
    out << '\n';
  }
}

inline nlohmann::ordered_json to_json(const ClusterAssignment& a) {
  nlohmann::ordered_json j;
  j["K"] = a.k;
  j["assignment"] = nlohmann::ordered_json::object();
  for (const auto& [id, c] : a.labels) j["assignment"][id] = c;
  return j;
}

inline ClusterAssignment assignment_from_json(const nlohmann::json& j) {
  try {
    ClusterAssignment a;
    a.k = j.at("K").get<std::size_t>();
    if (a.k == 0) throw DataError("assignment: K must be positive");
    for (const auto& [id, c] : j.at("assignment").items()) {
      const auto label = c.get<std::size_t>();
      if (label >= a.k) throw DataError("assignment: label out of range for '" + id + "'");
      a.labels[id] = label;
    }
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("assignment: ") + e.what());
  }
}

inline void write_projection_csv(const PcaProjection& p, std::ostream& out) {
  static constexpr const char* axes[] = {"x", "y", "z"};
  out << "worker_id";
  for (std::size_t c = 0; c < p.coords.cols(); ++c)
    out << ',' << (c < 3 ? std::string(axes[c]) : "pc" + std::to_string(c + 1));
  out << '\n';
  for (std::size_t i = 0; i < p.worker_ids.size(); ++i) {
    out << p.worker_ids[i];
    for (std::size_t c = 0; c < p.coords.cols(); ++c) out << ',' << format_fixed(p.coords(i, c), 9);
    out << '\n';
  }
}

/// round,total_loglik,n_reassigned,sizes  (sizes joined with ';')
inline void write_trace_csv(const AlternationTrace& t, std::ostream& out) {
  out << "round,total_loglik,n_reassigned,sizes\n";
  for (const auto& r : t.rounds) {
    out << r.round << ',' << format_exact(r.total_loglik) << ',' << r.n_reassigned << ',';
    for (std::size_t c = 0; c < r.cluster_sizes.size(); ++c)
      out << (c ? ";" : "") << r.cluster_sizes[c];
    out << '\n';
  }
}

}  // namespace prefclust
