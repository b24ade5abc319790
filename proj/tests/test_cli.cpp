#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>

#include "commands.hpp"

using namespace prefclust;
using namespace prefclust::cli;
namespace fs = std::filesystem;

namespace {

const fs::path kData = PREFCLUST_TEST_DATA_DIR;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("prefclust_cli_" + name);
  fs::remove_all(p);
  return p;
}

RunConfig small_config(const fs::path& out) {
  RunConfig c;
  c.out = out;
  c.seed = 17;
  c.sim.n_workers = 8;
  c.sim.pairs_per_worker = 40;
  c.sim.feature_dim = 6;
  c.sim.embedding_dim = 3;
  c.embedding_dim = 4;
  return c;
}

nlohmann::json manifest(const fs::path& out) {
  std::ifstream in(out / artifact::manifest);
  return nlohmann::json::parse(in);
}

int run_cli(const std::string& args) {
  const int status = std::system((std::string(PREFCLUST_CLI_PATH) + " " + args + " 2>/dev/null").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("config parsing fills fields and rejects unknown keys", "[cli]") {
  const auto j = nlohmann::json::parse(R"({
    "seed": 3, "out": "o", "threads": 2,
    "sim": {"n_workers": 12, "n_latent_groups": 3, "seed": 9},
    "split": {"train_fraction": 0.6},
    "train": {"epochs": 7, "embedding_dim": 5},
    "cluster": {"k": 3, "init": "random"},
    "policy": {"beta": 0.5, "mu1": "uniform", "enabled": false},
    "eval": {"scope": "all"}
  })");
  const RunConfig c = config_from_json(j);
  CHECK(c.seed == 3);
  CHECK(c.out == "o");
  CHECK(c.threads == 2);
  CHECK(c.sim.n_workers == 12);
  CHECK(c.resolved_sim_seed() == 9);
  CHECK(c.train_fraction == 0.6);
  CHECK(c.train.epochs == 7);
  CHECK(c.embedding_dim == 5);
  CHECK(c.cluster.k == 3);
  CHECK(c.cluster.init == "random");
  CHECK(c.policy.config.beta == 0.5);
  CHECK_FALSE(c.policy.config.mu1);
  CHECK_FALSE(c.policy.enabled);
  CHECK(c.eval_scope == EvalScope::all_records);

  CHECK_THROWS_AS(config_from_json(nlohmann::json::parse(R"({"sedd": 1})")), ConfigError);
  CHECK_THROWS_AS(config_from_json(nlohmann::json::parse(R"({"train": {"lr": 1}})")), ConfigError);
  CHECK_THROWS_AS(config_from_json(nlohmann::json::parse(R"({"train": {"epochs": "five"}})")), ConfigError);
  CHECK_THROWS_AS(config_from_json(nlohmann::json::parse(R"({"cluster": {"init": "magic"}})")), ConfigError);
  CHECK_THROWS_AS(config_from_json(nlohmann::json::parse(R"({"policy": {"mu1": [0.5, 0.6]}})")), ConfigError);
  CHECK(config_from_json(nlohmann::json::parse(R"({"policy": {"mu1": [0.5, 0.5]}})")).policy.config.mu1 ==
        Vector{0.5, 0.5});
}

TEST_CASE("pipeline writes every artifact with matching hashes", "[cli]") {
  const fs::path out = scratch("pipeline");
  const auto written = cmd_pipeline(small_config(out));
  for (const char* name : {artifact::corpus, artifact::embeddings, artifact::similarity,
                           artifact::assignment, artifact::clusters, artifact::naive,
                           artifact::comparison_csv, artifact::policies, artifact::manifest})
    CHECK(fs::exists(out / name));

  const auto m = manifest(out);
  CHECK(m["artifacts"].size() + 1 == written.size());
  for (const auto& a : m["artifacts"])
    CHECK(sha256_file(out / a["name"].get<std::string>()) == a["sha256"].get<std::string>());

  std::ifstream csv(out / artifact::comparison_csv);
  std::string header;
  std::getline(csv, header);
  CHECK(header == "model_label,win_rate_pct");
  fs::remove_all(out);
}

TEST_CASE("pipeline output does not depend on threads or reruns", "[cli]") {
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  RunConfig ca = small_config(a), cb = small_config(b);
  cb.threads = 8;
  cmd_pipeline(ca);
  cmd_pipeline(cb);
  CHECK(manifest(a) == manifest(b));
  cmd_pipeline(ca);
  CHECK(manifest(a) == manifest(b));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("pipeline ingests the bundled fixture", "[cli]") {
  const fs::path out = scratch("ingest");
  RunConfig c = small_config(out);
  c.source = "ingest";
  c.ingest.train = kData / "tldr_train.jsonl";
  c.ingest.test = kData / "tldr_test.jsonl";
  c.ingest.featurizer.dim = 16;
  cmd_pipeline(c);
  std::ifstream in(out / artifact::ingest_report);
  std::ifstream expected(kData / "tldr_expected_report.json");
  CHECK(nlohmann::json::parse(in) == nlohmann::json::parse(expected));
  fs::remove_all(out);
}

TEST_CASE("stages fail with the stage name and exit code", "[cli]") {
  const fs::path out = scratch("fail");
  RunConfig c = small_config(out);
  c.sim.n_latent_groups = 9;
  try {
    cmd_pipeline(c);
    FAIL("expected an error");
  } catch (const StageError& e) {
    CHECK(e.stage() == "simulate");
    CHECK(exit_code_for(e) == 2);
  }

  c = small_config(out);
  fs::create_directories(out);
  CHECK_THROWS_AS(cmd_train_joint(c), ConfigError);  // train.jsonl missing
  fs::remove_all(out);
}

TEST_CASE("binary exit codes", "[cli]") {
  const fs::path out = scratch("bin");
  fs::create_directories(out);
  const fs::path cfg = out / "cfg.json";
  std::ofstream(cfg) << R"({"sim": {"n_workers": 3, "n_latent_groups": 5}})";
  CHECK(run_cli("simulate --config " + cfg.string() + " --out " + out.string()) == 2);

  std::ofstream(cfg) << R"({"sim": {"n_workers": 4, "pairs_per_worker": 10, "feature_dim": 3}})";
  CHECK(run_cli("simulate --config " + cfg.string() + " --out " + out.string()) == 0);
  CHECK(fs::exists(out / artifact::corpus));
  CHECK(run_cli("split --config " + cfg.string() + " --out " + out.string()) == 0);
  CHECK(run_cli("bogus") == 2);
  CHECK(run_cli("simulate --k notanumber") == 2);

  std::ofstream(out / artifact::train) << "{broken\n";
  CHECK(run_cli("train-naive --config " + cfg.string() + " --out " + out.string()) == 1);
  fs::remove_all(out);
}
