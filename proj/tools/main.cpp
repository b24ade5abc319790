#include <iostream>
#include <map>
#include <optional>

#include <CLI11.hpp>

#include "commands.hpp"

using namespace prefclust;
using namespace prefclust::cli;

int main(int argc, char** argv) {
  CLI::App app{"prefclust: clustered preference reward models"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> k;
  std::optional<std::size_t> threads;
  app.add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "global seed");
  app.add_option("--out", out, "output directory");
  app.add_option("--k", k, "number of clusters");
  app.add_option("--threads", threads, "worker threads (results do not depend on it)");

  using Command = std::vector<std::string> (*)(const RunConfig&);
  const std::map<std::string, std::pair<Command, const char*>> commands{
      {"simulate", {cmd_simulate, "generate a synthetic corpus with ground truth"}},
      {"ingest", {cmd_ingest, "read preference JSONL (and filter to common workers)"}},
      {"split", {cmd_split, "per-worker train/test split"}},
      {"train-joint", {cmd_train_joint, "learn the shared backbone and worker embeddings"}},
      {"similarity", {cmd_similarity, "cosine similarity matrix and PCA projections"}},
      {"cluster", {cmd_cluster, "spherical k-means on worker embeddings"}},
      {"train-clusters", {cmd_train_clusters, "alternating cluster fit / reassignment"}},
      {"train-naive", {cmd_train_naive, "pooled reward model"}},
      {"policy", {cmd_policy, "KL-regularized policies per cluster"}},
      {"evaluate", {cmd_evaluate, "win-rate comparison table"}},
      {"pipeline", {cmd_pipeline, "run every stage and write a manifest"}},
  };
  for (const auto& [name, entry] : commands) app.add_subcommand(name, entry.second)->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    RunConfig config = config_path.empty() ? RunConfig{} : load_config(config_path);
    if (seed) config.seed = *seed;
    if (out) config.out = *out;
    if (k) config.cluster.k = *k;
    if (threads) {
      if (*threads == 0) throw ConfigError("--threads must be at least 1");
      config.threads = *threads;
    }
    commands.at(name).first(config);
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "prefclust " << name << ": " << e.what() << '\n';
    return exit_code_for(e);
  }
}
