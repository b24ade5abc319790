#pragma once

// Command implementations behind the prefclust CLI. Every command reads its inputs from and
// writes its artifacts to RunConfig::out, so the stages chain when run with the same --out.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "prefclust/prefclust.hpp"

namespace prefclust::cli {

namespace artifact {
inline constexpr const char* corpus = "corpus.jsonl";
inline constexpr const char* corpus_header = "corpus.header.json";
inline constexpr const char* ground_truth = "ground_truth.json";
inline constexpr const char* train = "train.jsonl";
inline constexpr const char* train_header = "train.header.json";
inline constexpr const char* test = "test.jsonl";
inline constexpr const char* test_header = "test.header.json";
inline constexpr const char* ingest_report = "ingest_report.json";
inline constexpr const char* backbone = "backbone.json";
inline constexpr const char* embeddings = "embeddings.csv";
inline constexpr const char* similarity = "similarity.csv";
inline constexpr const char* projection_2d = "projection_2d.csv";
inline constexpr const char* projection_3d = "projection_3d.csv";
inline constexpr const char* kmeans_assignment = "kmeans_assignment.json";
inline constexpr const char* clusters = "clusters.json";
inline constexpr const char* assignment = "assignment.json";
inline constexpr const char* trace = "trace.csv";
inline constexpr const char* naive = "naive.json";
inline constexpr const char* candidates = "candidates.jsonl";
inline constexpr const char* policies = "policies.json";
inline constexpr const char* comparison_csv = "comparison.csv";
inline constexpr const char* comparison_json = "comparison.json";
inline constexpr const char* manifest = "manifest.json";
}  // namespace artifact

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path out = "prefclust_out";
  std::size_t threads = 1;

  /// Corpus source for `pipeline`: "sim" or "ingest".
  std::string source = "sim";

  SimConfig sim;
  std::optional<std::uint64_t> sim_seed;

  struct Ingest {
    std::optional<std::filesystem::path> train;
    std::optional<std::filesystem::path> test;
    FeaturizerConfig featurizer;
  } ingest;

  double train_fraction = 0.7;
  std::optional<std::uint64_t> split_seed;

  TrainConfig train;
  std::optional<std::uint64_t> train_seed;
  std::size_t embedding_dim = 16;

  struct Cluster {
    std::size_t k = 2;
    std::size_t max_rounds = 20;
    std::size_t kmeans_max_iters = 100;
    std::string init = "kmeans";  // or "random"
    std::optional<std::uint64_t> seed;
  } cluster;

  struct Policy {
    bool enabled = true;
    PolicyConfig config;
    std::optional<std::filesystem::path> candidates;
    std::size_t n_prompts = 5;
    std::size_t n_candidates = 4;
    std::optional<std::uint64_t> seed;
  } policy;

  EvalScope eval_scope = EvalScope::cluster_members;

  // Stage seeds: explicit values win, otherwise derived from the global seed.
  std::uint64_t resolved_sim_seed() const { return sim_seed.value_or(seed); }
  std::uint64_t resolved_split_seed() const { return split_seed.value_or(derive_seed(seed, 1)); }
  std::uint64_t resolved_train_seed() const { return train_seed.value_or(derive_seed(seed, 2)); }
  std::uint64_t resolved_cluster_seed() const { return cluster.seed.value_or(derive_seed(seed, 3)); }
  std::uint64_t resolved_policy_seed() const { return policy.seed.value_or(derive_seed(seed, 4)); }
};

/// Builds a RunConfig from the JSON config document. Unknown keys are rejected.
RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);

/// Thrown by `pipeline` when a stage fails; wraps the original message.
class StageError : public Error {
public:
  StageError(std::string stage, const std::string& message, bool config_error)
      : Error("stage '" + stage + "' failed: " + message),
        stage_(std::move(stage)),
        config_error_(config_error) {}
  const std::string& stage() const noexcept { return stage_; }
  bool config_error() const noexcept { return config_error_; }

private:
  std::string stage_;
  bool config_error_;
};

// Each command returns the artifact file names it wrote, relative to config.out.
std::vector<std::string> cmd_simulate(const RunConfig& config);
std::vector<std::string> cmd_ingest(const RunConfig& config);
std::vector<std::string> cmd_split(const RunConfig& config);
std::vector<std::string> cmd_train_joint(const RunConfig& config);
std::vector<std::string> cmd_similarity(const RunConfig& config);
std::vector<std::string> cmd_cluster(const RunConfig& config);
std::vector<std::string> cmd_train_clusters(const RunConfig& config);
std::vector<std::string> cmd_train_naive(const RunConfig& config);
std::vector<std::string> cmd_policy(const RunConfig& config);
std::vector<std::string> cmd_evaluate(const RunConfig& config);
std::vector<std::string> cmd_pipeline(const RunConfig& config);

/// Lowercase hex SHA-256 of a file's contents.
std::string sha256_file(const std::filesystem::path& path);

/// Maps an exception to the process exit code: 2 for configuration/validation, 1 otherwise.
int exit_code_for(const std::exception& e);

}  // namespace prefclust::cli
