#include "commands.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

namespace prefclust::cli {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config parsing

namespace {

/// Reads typed fields from one JSON object and rejects keys nobody asked for.
class Block {
public:
  Block(const nlohmann::json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("config: '" + name_ + "' must be an object");
  }

  template <typename T>
  void read(const char* key, T& target) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      target = j_[key].get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config: " + name_ + "." + key + " has the wrong type");
    }
  }

  template <typename T>
  void read(const char* key, std::optional<T>& target) {
    T value{};
    seen_.insert(key);
    if (!j_.contains(key)) return;
    read(key, value);
    target = value;
  }

  void read_path(const char* key, std::optional<fs::path>& target) {
    std::optional<std::string> s;
    read(key, s);
    if (s) target = *s;
  }

  bool has(const char* key) const { return j_.contains(key); }

  /// Declares a key the caller parses by hand.
  void mark(const char* key) { seen_.insert(key); }

  Block sub(const char* key) {
    seen_.insert(key);
    return Block(j_.contains(key) ? j_[key] : empty_object(), name_ + "." + key);
  }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) throw ConfigError("config: unknown key '" + name_ + "." + key + "'");
  }

private:
  static const nlohmann::json& empty_object() {
    static const nlohmann::json e = nlohmann::json::object();
    return e;
  }

  const nlohmann::json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

}  // namespace

RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  Block root(j, "config");
  root.read("seed", c.seed);
  std::optional<std::string> out;
  root.read("out", out);
  if (out) c.out = *out;
  root.read("threads", c.threads);
  root.read("source", c.source);
  if (c.source != "sim" && c.source != "ingest")
    throw ConfigError("config: source must be 'sim' or 'ingest'");

  {
    Block b = root.sub("sim");
    b.read("n_workers", c.sim.n_workers);
    b.read("n_latent_groups", c.sim.n_latent_groups);
    b.read("feature_dim", c.sim.feature_dim);
    b.read("embedding_dim", c.sim.embedding_dim);
    b.read("pairs_per_worker", c.sim.pairs_per_worker);
    b.read("group_separation", c.sim.group_separation);
    b.read("worker_noise", c.sim.worker_noise);
    b.read("preference_temperature", c.sim.preference_temperature);
    b.read("shared_reward_norm", c.sim.shared_reward_norm);
    b.read("latent_norm", c.sim.latent_norm);
    b.read("seed", c.sim_seed);
    b.finish();
  }
  {
    Block b = root.sub("ingest");
    b.read_path("train", c.ingest.train);
    b.read_path("test", c.ingest.test);
    b.read("feature_dim", c.ingest.featurizer.dim);
    b.read("featurizer_seed", c.ingest.featurizer.seed);
    b.finish();
  }
  {
    Block b = root.sub("split");
    b.read("train_fraction", c.train_fraction);
    b.read("seed", c.split_seed);
    b.finish();
  }
  {
    Block b = root.sub("train");
    b.read("learning_rate", c.train.learning_rate);
    b.read("epochs", c.train.epochs);
    b.read("batch_size", c.train.batch_size);
    b.read("norm_bound", c.train.norm_bound);
    b.read("l2_penalty", c.train.l2_penalty);
    b.read("embedding_dim", c.embedding_dim);
    b.read("seed", c.train_seed);
    b.finish();
  }
  {
    Block b = root.sub("cluster");
    b.read("k", c.cluster.k);
    b.read("max_rounds", c.cluster.max_rounds);
    b.read("kmeans_max_iters", c.cluster.kmeans_max_iters);
    b.read("init", c.cluster.init);
    b.read("seed", c.cluster.seed);
    b.finish();
    if (c.cluster.init != "kmeans" && c.cluster.init != "random")
      throw ConfigError("config: cluster.init must be 'kmeans' or 'random'");
  }
  {
    Block b = root.sub("policy");
    b.read("enabled", c.policy.enabled);
    b.read("beta", c.policy.config.beta);
    b.read("solver_tol", c.policy.config.solver_tol);
    b.read("solver_max_iters", c.policy.config.solver_max_iters);
    b.mark("mu1");
    if (b.has("mu1")) {
      const auto& mu = j.at("policy").at("mu1");
      if (mu.is_string() && mu.get<std::string>() == "uniform") {
        c.policy.config.mu1.reset();
      } else if (mu.is_array() && std::all_of(mu.begin(), mu.end(), [](const auto& x) { return x.is_number(); })) {
        c.policy.config.mu1 = mu.get<Vector>();
      } else {
        throw ConfigError("config: policy.mu1 must be \"uniform\" or an array");
      }
    }
    b.read_path("candidates", c.policy.candidates);
    b.read("n_prompts", c.policy.n_prompts);
    b.read("n_candidates", c.policy.n_candidates);
    b.read("seed", c.policy.seed);
    b.finish();
    c.policy.config.validate();
  }
  {
    Block b = root.sub("eval");
    std::string scope = "cluster";
    b.read("scope", scope);
    b.finish();
    if (scope == "cluster") c.eval_scope = EvalScope::cluster_members;
    else if (scope == "all") c.eval_scope = EvalScope::all_records;
    else throw ConfigError("config: eval.scope must be 'cluster' or 'all'");
  }
  root.finish();

  c.train.validate();
  return c;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  try {
    return config_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Helpers

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr);
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md.data(), &len);
  static constexpr char hex[] = "0123456789abcdef";
  std::string s;
  for (unsigned int i = 0; i < len; ++i) {
    s.push_back(hex[md[i] >> 4]);
    s.push_back(hex[md[i] & 15]);
  }
  return s;
}

int exit_code_for(const std::exception& e) {
  if (const auto* stage = dynamic_cast<const StageError*>(&e))
    return stage->config_error() ? 2 : 1;
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  return 1;
}

namespace {

void log(const std::string& stage, const std::string& message) {
  std::clog << "[" << stage << "] " << message << '\n';
}

fs::path prepare_out(const RunConfig& c) {
  std::error_code ec;
  fs::create_directories(c.out, ec);
  if (ec || !fs::is_directory(c.out))
    throw ConfigError("output directory " + c.out.string() + " is not writable");
  return c.out;
}

fs::path require_input(const RunConfig& c, const char* name) {
  const fs::path p = c.out / name;
  if (!fs::exists(p))
    throw ConfigError("missing input " + p.string() + " (run the producing stage first)");
  return p;
}

template <typename Writer>
void write_text(const fs::path& path, Writer&& writer) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  writer(out);
  if (!out) throw DataError("failed writing " + path.string());
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) {
  write_text(path, [&](std::ostream& o) { o << j.dump(2) << '\n'; });
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

TrainConfig train_config(const RunConfig& c) {
  TrainConfig t = c.train;
  t.seed = c.resolved_train_seed();
  return t;
}

SimConfig sim_config(const RunConfig& c) {
  SimConfig s = c.sim;
  s.seed = c.resolved_sim_seed();
  return s;
}

ModelFile read_backbone(const RunConfig& c) {
  ModelFile f = read_model_file(require_input(c, artifact::backbone));
  if (!f.backbone) throw DataError(std::string(artifact::backbone) + " has no backbone");
  return f;
}

std::vector<CandidateSet> load_or_sample_candidates(const RunConfig& c, std::size_t feature_dim,
                                                    std::vector<std::string>& written) {
  if (c.policy.candidates) return read_candidate_sets(*c.policy.candidates);
  const fs::path local = c.out / artifact::candidates;
  if (fs::exists(local)) return read_candidate_sets(local);
  auto sets = sample_candidate_sets(feature_dim, c.policy.n_prompts, c.policy.n_candidates,
                                    c.resolved_policy_seed());
  write_text(local, [&](std::ostream& o) { write_candidate_sets(sets, o); });
  written.push_back(artifact::candidates);
  return sets;
}

}  // namespace

// ---------------------------------------------------------------------------
// Commands

std::vector<std::string> cmd_simulate(const RunConfig& c) {
  const fs::path out = prepare_out(c);
  const Simulation sim = generate(sim_config(c));
  write_corpus(sim.corpus, out / artifact::corpus);
  write_json(out / artifact::ground_truth, to_json(sim.truth));
  log("simulate", std::to_string(sim.corpus.n_workers()) + " workers, " +
                      std::to_string(sim.corpus.n_records()) + " records");
  return {artifact::corpus, artifact::corpus_header, artifact::ground_truth};
}

std::vector<std::string> cmd_ingest(const RunConfig& c) {
  if (!c.ingest.train) throw ConfigError("ingest.train is required");
  const fs::path out = prepare_out(c);
  Corpus first = ingest_jsonl(*c.ingest.train, c.ingest.featurizer);
  if (!c.ingest.test) {
    write_corpus(first, out / artifact::corpus);
    log("ingest", std::to_string(first.n_records()) + " records from " + c.ingest.train->string());
    return {artifact::corpus, artifact::corpus_header};
  }
  Corpus second = ingest_jsonl(*c.ingest.test, c.ingest.featurizer);
  first.split_tag = SplitTag::train;
  second.split_tag = SplitTag::test;
  const FilteredSplits f = filter_common_workers(first, second);
  write_corpus(f.train, out / artifact::train);
  write_corpus(f.test, out / artifact::test);
  write_json(out / artifact::ingest_report, to_json(f.report));
  log("ingest", std::to_string(f.report.final_workers) + " workers common to both splits");
  return {artifact::train, artifact::train_header, artifact::test, artifact::test_header,
          artifact::ingest_report};
}

std::vector<std::string> cmd_split(const RunConfig& c) {
  const fs::path out = prepare_out(c);
  const Corpus corpus = read_corpus(require_input(c, artifact::corpus));
  const SplitCorpus s = split_corpus(corpus, c.train_fraction, c.resolved_split_seed());
  write_corpus(s.train, out / artifact::train);
  write_corpus(s.test, out / artifact::test);
  log("split", std::to_string(s.train.n_records()) + " train / " +
                   std::to_string(s.test.n_records()) + " test records");
  return {artifact::train, artifact::train_header, artifact::test, artifact::test_header};
}

std::vector<std::string> cmd_train_joint(const RunConfig& c) {
  const fs::path out = prepare_out(c);
  const Corpus train = read_corpus(require_input(c, artifact::train));
  const JointModel model = train_joint(train, train_config(c), c.embedding_dim);

  ModelFile f;
  f.feature_dim = train.feature_dim;
  f.embedding_dim = c.embedding_dim;
  f.backbone = model.backbone;
  f.embeddings = model.embeddings;
  write_model_file(f, out / artifact::backbone);

  write_text(out / artifact::embeddings, [&](std::ostream& o) {
    o << "worker_id";
    for (std::size_t a = 0; a < c.embedding_dim; ++a) o << ",e" << a;
    o << '\n';
    for (const auto& w : model.embeddings) {
      o << w.worker_id;
      for (double v : w.e) o << ',' << format_exact(v);
      o << '\n';
    }
  });
  log("train-joint", std::to_string(model.embeddings.size()) + " embeddings of length " +
                         std::to_string(c.embedding_dim));
  return {artifact::backbone, artifact::embeddings};
}

std::vector<std::string> cmd_similarity(const RunConfig& c) {
  const fs::path out = prepare_out(c);
  const ModelFile f = read_backbone(c);
  const SimilarityMatrix sim = cosine_similarity_matrix(f.embeddings);
  write_text(out / artifact::similarity, [&](std::ostream& o) { write_similarity_csv(sim, o); });
  std::vector<std::string> written{artifact::similarity};

  for (std::size_t dim : {std::size_t{2}, std::size_t{3}}) {
    if (dim > f.embedding_dim || f.embeddings.size() <= dim) {
      log("similarity", "skipping " + std::to_string(dim) + "-D projection (too few dimensions or workers)");
      continue;
    }
    const PcaProjection p = pca_project(f.embeddings, dim);
    if (p.degenerate) log("similarity", "warning: all embeddings identical; projection is zero");
    const char* name = dim == 2 ? artifact::projection_2d : artifact::projection_3d;
    write_text(out / name, [&](std::ostream& o) { write_projection_csv(p, o); });
    written.push_back(name);
  }
  return written;
}

std::vector<std::string> cmd_cluster(const RunConfig& c) {
  const fs::path out = prepare_out(c);
  const ModelFile f = read_backbone(c);
  const auto km = spherical_kmeans(f.embeddings, c.cluster.k, c.resolved_cluster_seed(),
                                   c.cluster.kmeans_max_iters);
  write_json(out / artifact::kmeans_assignment, to_json(km.assignment));
  log("cluster", "spherical k-means with K=" + std::to_string(c.cluster.k) + " in " +
                     std::to_string(km.iterations) + " iterations");
  return {artifact::kmeans_assignment};
}

std::vector<std::string> cmd_train_clusters(const RunConfig& c) {
  const fs::path out = prepare_out(c);
  const Corpus train = read_corpus(require_input(c, artifact::train));
  const ModelFile f = read_backbone(c);

  ClusterInit init;
  if (c.cluster.init == "random") {
    init = random_init(train, c.cluster.k, c.resolved_cluster_seed());
  } else {
    const fs::path km = c.out / artifact::kmeans_assignment;
    const ClusterAssignment start =
        fs::exists(km) ? assignment_from_json(read_json(km))
                       : spherical_kmeans(f.embeddings, c.cluster.k, c.resolved_cluster_seed(),
                                          c.cluster.kmeans_max_iters)
                             .assignment;
    if (start.k != c.cluster.k)
      throw ConfigError(std::string(artifact::kmeans_assignment) + " was computed with K=" +
                        std::to_string(start.k) + ", config asks for K=" + std::to_string(c.cluster.k));
    init = init_from_embeddings(f.embeddings, start);
  }

  const ClusterFitResult r = fit_clusters(train, *f.backbone, c.cluster.k, train_config(c), init,
                                            c.cluster.max_rounds, c.threads);

  ModelFile models;
  models.feature_dim = f.feature_dim;
  models.embedding_dim = f.embedding_dim;
  models.clusters = r.models;
  write_model_file(models, out / artifact::clusters);
  write_json(out / artifact::assignment, to_json(r.assignment));
  write_text(out / artifact::trace, [&](std::ostream& o) { write_trace_csv(r.trace, o); });
  log("train-clusters", std::to_string(r.trace.rounds.size()) + " rounds, " +
                            (r.trace.converged ? "converged" : "stopped at max_rounds"));
  return {artifact::clusters, artifact::assignment, artifact::trace};
}

std::vector<std::string> cmd_train_naive(const RunConfig& c) {
  const fs::path out = prepare_out(c);
  const Corpus train = read_corpus(require_input(c, artifact::train));
  ModelFile f;
  f.feature_dim = train.feature_dim;
  f.naive = train_naive(train, train_config(c));
  write_model_file(f, out / artifact::naive);
  log("train-naive", "pooled model over " + std::to_string(train.n_records()) + " records");
  return {artifact::naive};
}

std::vector<std::string> cmd_policy(const RunConfig& c) {
  const fs::path out = prepare_out(c);
  const ModelFile f = read_backbone(c);
  const ModelFile clusters = read_model_file(require_input(c, artifact::clusters));
  std::vector<std::string> written;
  const auto sets = load_or_sample_candidates(c, f.feature_dim, written);
  const auto policies = per_cluster_policies(clusters.clusters, *f.backbone, sets, c.policy.config,
                                             PolicyObjective::kl_with_reference_bonus, c.threads);
  write_json(out / artifact::policies, policies_to_json(policies, sets));
  written.push_back(artifact::policies);
  log("policy", std::to_string(clusters.clusters.size()) + " clusters x " +
                    std::to_string(sets.size()) + " candidate sets");
  return written;
}

std::vector<std::string> cmd_evaluate(const RunConfig& c) {
  const fs::path out = prepare_out(c);
  const Corpus test = read_corpus(require_input(c, artifact::test));
  const ModelFile naive = read_model_file(require_input(c, artifact::naive));
  const ModelFile f = read_backbone(c);
  const ModelFile clusters = read_model_file(require_input(c, artifact::clusters));
  const ClusterAssignment assignment = assignment_from_json(read_json(require_input(c, artifact::assignment)));
  if (!naive.naive) throw DataError(std::string(artifact::naive) + " has no naive model");

  const ComparisonTable table =
      compare_models(test, *naive.naive, *f.backbone, clusters.clusters, assignment, c.eval_scope);
  write_text(out / artifact::comparison_csv, [&](std::ostream& o) { write_comparison_csv(table, o); });
  write_json(out / artifact::comparison_json, to_json(table));
  for (const auto& row : table.rows)
    log("evaluate", row.model_label + ": " +
                        (row.win_rate ? format_fixed(100.0 * *row.win_rate, 3) + "%" : "n/a"));
  return {artifact::comparison_csv, artifact::comparison_json};
}

std::vector<std::string> cmd_pipeline(const RunConfig& c) {
  prepare_out(c);
  std::vector<std::string> artifacts;
  const auto stage = [&](const std::string& name, auto&& fn) {
    try {
      const auto written = fn(c);
      artifacts.insert(artifacts.end(), written.begin(), written.end());
    } catch (const ConfigError& e) {
      throw StageError(name, e.what(), true);
    } catch (const std::exception& e) {
      throw StageError(name, e.what(), false);
    }
  };

  // Artifacts from an earlier run in the same directory must not leak into this one.
  for (const char* stale : {artifact::kmeans_assignment, artifact::candidates})
    fs::remove(c.out / stale);

  if (c.source == "sim") {
    stage("simulate", cmd_simulate);
    stage("split", cmd_split);
  } else if (c.ingest.test) {
    stage("ingest", cmd_ingest);
  } else {
    stage("ingest", cmd_ingest);
    stage("split", cmd_split);
  }
  stage("train-joint", cmd_train_joint);
  stage("similarity", cmd_similarity);
  stage("cluster", cmd_cluster);
  stage("train-clusters", cmd_train_clusters);
  stage("train-naive", cmd_train_naive);
  stage("evaluate", cmd_evaluate);
  if (c.policy.enabled) stage("policy", cmd_policy);

  nlohmann::ordered_json manifest;
  manifest["artifacts"] = nlohmann::ordered_json::array();
  for (const auto& name : artifacts)
    manifest["artifacts"].push_back({{"name", name}, {"sha256", sha256_file(c.out / name)}});
  write_json(c.out / artifact::manifest, manifest);
  log("pipeline", std::to_string(artifacts.size()) + " artifacts listed in " + artifact::manifest);
  artifacts.push_back(artifact::manifest);
  return artifacts;
}

}  // namespace prefclust::cli
