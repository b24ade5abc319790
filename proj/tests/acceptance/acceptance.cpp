// Acceptance runner: one PASS/FAIL line per criterion, non-zero exit if any fails.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <sstream>

#include "commands.hpp"
#include "oracles.hpp"
#include "prefclust/prefclust.hpp"

using namespace prefclust;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int decimals = 4) { return format_fixed(v, decimals); }

// ---------------------------------------------------------------------------
// Shared synthetic fixtures: N=30, N_p=200, d=16, m=8.

SimConfig fixture_config(std::size_t groups, double separation, std::uint64_t seed) {
  SimConfig c;
  c.n_workers = 30;
  c.n_latent_groups = groups;
  c.pairs_per_worker = 200;
  c.feature_dim = 16;
  c.embedding_dim = 8;
  c.group_separation = separation;
  c.worker_noise = 0.1;
  c.preference_temperature = 1.0;
  c.seed = seed;
  return c;
}

struct FixtureRun {
  Simulation sim;
  SplitCorpus split;
  JointModel joint;
  NaiveModel naive;
  ClusterFitResult clusters;
  ComparisonTable table;
  ComparisonTable table_all;
};

constexpr std::size_t kEmbeddingDim = 8;

FixtureRun run_fixture(const SimConfig& sc, std::size_t k, std::uint64_t seed) {
  FixtureRun r;
  r.sim = generate(sc);
  r.split = split_corpus(r.sim.corpus, 0.7, derive_seed(seed, 1));
  TrainConfig tc;
  tc.seed = derive_seed(seed, 2);
  r.joint = train_joint(r.split.train, tc, kEmbeddingDim);
  r.naive = train_naive(r.split.train, tc);
  const auto init = kmeans_init(r.joint.embeddings, k, derive_seed(seed, 3));
  r.clusters = fit_clusters(r.split.train, r.joint.backbone, k, tc, init);
  r.table = compare_models(r.split.test, r.naive, r.joint.backbone, r.clusters.models,
                           r.clusters.assignment);
  r.table_all = compare_models(r.split.test, r.naive, r.joint.backbone, r.clusters.models,
                               r.clusters.assignment, EvalScope::all_records);
  return r;
}

const FixtureRun& opposed() {
  static const FixtureRun run = run_fixture(fixture_config(2, std::numbers::pi, 2024), 2, 2024);
  return run;
}

const FixtureRun& homogeneous() {
  static const FixtureRun run = run_fixture(fixture_config(1, 0.0, 7), 2, 7);
  return run;
}

// ---------------------------------------------------------------------------

Outcome btl_correctness() {
  Rng rng(1);
  std::size_t bad = 0;
  const std::size_t n = 20000;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = (rng.uniform() - 0.5) * 2000.0, b = (rng.uniform() - 0.5) * 2000.0;
    const double p = btl_probability({a, b}), q = btl_probability({b, a});
    if (!std::isfinite(p) || std::abs(p + q - 1.0) > 1e-12) ++bad;
    const double ls = log_sigmoid(a);
    if (!std::isfinite(ls) || ls > 0.0) ++bad;
    const double m1 = (rng.uniform() - 0.5) * 60.0, m2 = m1 - 1e-3 - rng.uniform();
    if (!(btl_probability({m1, 0.0}) > btl_probability({m2, 0.0}))) ++bad;
  }
  const double p10 = btl_probability({1.0, 0.0});
  const bool ok = bad == 0 && std::abs(p10 - 0.731059) <= 1e-6;
  return {ok, std::to_string(n) + " random inputs, " + std::to_string(bad) +
                  " violations; P(1,0)=" + format_exact(p10)};
}

Outcome gradient_checks() {
  Rng rng(2);
  double worst = 0.0;
  const int instances = 25;
  for (int t = 0; t < instances; ++t) {
    const std::size_t d = 2 + rng.below(7), m = 1 + rng.below(4);
    const Corpus c = oracle::random_corpus(rng, 1 + rng.below(3), 1 + rng.below(6), d);
    const double l2 = 0.01 * rng.uniform();

    const PairDeltas pairs = make_pair_deltas(c);
    const Vector w = rng.normal_vector(d, 0.5);
    worst = std::max(worst, oracle::relative_error(
                                naive_gradient(pairs, w, l2),
                                oracle::numeric_gradient(
                                    [&](const Vector& v) { return naive_objective(pairs, v, l2); }, w)));

    // Parameters scaled by 1/sqrt(d) keep margins O(1); in deep saturation the gradient is
    // ~1e-9 and the finite-difference quotient is dominated by rounding.
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    Matrix V(m, d);
    for (auto& v : V.data()) v = s * rng.normal();
    const SharedBackbone bb(rng.normal_vector(d, s), V);
    std::vector<WorkerEmbedding> emb;
    for (const auto& wk : c.workers) emb.push_back({wk.worker_id, rng.normal_vector(m)});
    const JointGradient g = joint_gradient(c, bb, emb, l2);

    const auto du = oracle::numeric_gradient([&](const Vector& v) {
      SharedBackbone b = bb;
      b.u = v;
      return joint_objective(c, b, emb, l2);
    }, bb.u);
    const auto dV = oracle::numeric_gradient([&](const Vector& v) {
      SharedBackbone b = bb;
      b.V.data() = v;
      return joint_objective(c, b, emb, l2);
    }, bb.V.data());
    worst = std::max({worst, oracle::relative_error(g.du, du), oracle::relative_error(g.dV.data(), dV)});
    for (std::size_t wi = 0; wi < emb.size(); ++wi) {
      const auto de = oracle::numeric_gradient([&](const Vector& v) {
        auto e = emb;
        e[wi].e = v;
        return joint_objective(c, bb, e, l2);
      }, emb[wi].e);
      worst = std::max(worst, oracle::relative_error(g.de[wi], de));
    }

    const ProjectedPairs pp = project_pairs(c.all_records(), bb);
    const Vector theta = rng.normal_vector(m);
    worst = std::max(worst, oracle::relative_error(
                                theta_gradient(pp, theta),
                                oracle::numeric_gradient(
                                    [&](const Vector& v) { return theta_objective(pp, v); }, theta)));
  }
  return {worst < 1e-4, std::to_string(instances) + " instances (naive, u, V, e_i, theta), max rel err " +
                            format_exact(worst)};
}

Outcome constraint_enforcement() {
  Rng rng(3);
  double worst_excess = -INFINITY;
  const int fits = 200;
  for (int t = 0; t < fits; ++t) {
    const std::size_t d = 2 + rng.below(10), m = 1 + rng.below(6);
    const Corpus c = oracle::random_corpus(rng, 1, 2 + rng.below(60), d);
    Matrix V(m, d);
    for (auto& v : V.data()) v = rng.normal() * (1.0 + 10.0 * rng.uniform());
    const SharedBackbone bb(rng.normal_vector(d), V);
    TrainConfig tc;
    tc.norm_bound = 0.05 + 5.0 * rng.uniform();
    tc.learning_rate = 0.01 + 2.0 * rng.uniform();
    tc.batch_size = 1 + rng.below(32);
    tc.epochs = 1 + rng.below(8);
    tc.seed = static_cast<std::uint64_t>(t);
    const auto recs = c.all_records();
    const auto fit = fit_cluster_theta(recs, bb, rng.normal_vector(m, 10.0 * rng.uniform()), tc);
    worst_excess = std::max(worst_excess, norm(fit.theta) - tc.norm_bound);
  }
  // Fits inside fit_clusters as well.
  for (const auto* run : {&opposed(), &homogeneous()})
    for (const auto& model : run->clusters.models)
      worst_excess = std::max(worst_excess, norm(model.theta) - model.norm_bound);
  return {worst_excess <= 1e-9, std::to_string(fits) + " randomized fits plus fixture clusters, max ||theta||-B = " +
                                    format_exact(worst_excess)};
}

Outcome closed_form_policy() {
  Rng rng(4);
  const auto random_set = [&](std::size_t n) {
    CandidateSet cs;
    cs.prompt_id = "p";
    double z = 0.0;
    for (std::size_t a = 0; a < n; ++a) {
      cs.candidates.push_back({"a" + std::to_string(a), {}});
      cs.sft_probs.push_back(0.05 + rng.uniform());
      z += cs.sft_probs.back();
    }
    for (auto& p : cs.sft_probs) p /= z;
    return cs;
  };
  const auto simplex = [&](std::size_t n) {
    Vector p(n);
    double z = 0.0;
    for (auto& x : p) z += x = -std::log(1.0 - rng.uniform());
    for (auto& x : p) x /= z;
    return p;
  };
  const auto tv = [](const Vector& a, const Vector& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
    return 0.5 * s;
  };

  std::size_t beaten = 0;
  double worst_tv = 0.0;
  for (int inst = 0; inst < 50; ++inst) {
    const std::size_t n = 2 + rng.below(6);
    const CandidateSet cs = random_set(n);
    const Vector r = rng.normal_vector(n, 2.0);
    PolicyConfig cfg;
    cfg.beta = 0.1 + 3.0 * rng.uniform();
    const auto star = optimal_policy_closed_form(cs, r, cfg.beta);
    const double best = objective_value(cs, star.probs, r, cfg, PolicyObjective::kl_regularized);
    for (int t = 0; t < 1000; ++t)
      if (objective_value(cs, simplex(n), r, cfg, PolicyObjective::kl_regularized) > best) ++beaten;
    const auto num = optimal_policy_numeric(cs, r, cfg, PolicyObjective::kl_regularized);
    worst_tv = std::max(worst_tv, tv(num.policy.probs, star.probs));
  }

  double worst_gap = -INFINITY;
  for (int inst = 0; inst < 10; ++inst) {
    const CandidateSet cs = random_set(3);
    const Vector r = rng.normal_vector(3, 2.0);
    PolicyConfig cfg;
    cfg.beta = 0.2 + 2.0 * rng.uniform();
    const auto num = optimal_policy_numeric(cs, r, cfg, PolicyObjective::kl_with_reference_bonus);
    double grid = -INFINITY;
    for (int i = 0; i <= 200; ++i)
      for (int j = 0; i + j <= 200; ++j)
        grid = std::max(grid, objective_value(cs, Vector{i / 200.0, j / 200.0, (200 - i - j) / 200.0}, r,
                                              cfg, PolicyObjective::kl_with_reference_bonus));
    worst_gap = std::max(worst_gap, grid - num.objective);
  }
  const PolicyConfig defaults;
  const bool ok = beaten == 0 && worst_tv <= 1e-6 && worst_gap <= defaults.solver_tol;
  return {ok, "50x1000 random points beat closed form " + std::to_string(beaten) +
                  " times; numeric vs closed TV " + format_exact(worst_tv) +
                  "; grid minus bonus-solver " + format_exact(worst_gap)};
}

Outcome hard_em_monotonicity() {
  std::size_t runs = 0, violations = 0, not_fixed = 0;
  double worst_drop = 0.0;
  const auto check = [&](const Corpus& train, const SharedBackbone& bb, std::size_t k,
                         const ClusterInit& init, const TrainConfig& tc) {
    const auto r = fit_clusters(train, bb, k, tc, init);
    ++runs;
    double prev = r.trace.initial_loglik;
    for (const auto& round : r.trace.rounds) {
      const double drop = prev - round.total_loglik;
      if (drop > 1e-12 * std::abs(prev)) ++violations;
      worst_drop = std::max(worst_drop, drop);
      prev = round.total_loglik;
    }
    if (!r.trace.converged || !(assign_workers(train, bb, r.models) == r.assignment)) ++not_fixed;
  };

  for (const auto* run : {&opposed(), &homogeneous()}) {
    TrainConfig tc;
    tc.seed = 11;
    for (std::size_t k : {2u, 3u, 4u}) {
      check(run->split.train, run->joint.backbone, k, kmeans_init(run->joint.embeddings, k, k), tc);
      check(run->split.train, run->joint.backbone, k, random_init(run->split.train, k, k), tc);
    }
  }
  const auto three = generate(fixture_config(3, 2.0, 99));
  const auto split = split_corpus(three.corpus, 0.7, 5);
  TrainConfig tc;
  const auto joint = train_joint(split.train, tc, kEmbeddingDim);
  for (std::size_t k : {2u, 3u, 4u})
    check(split.train, joint.backbone, k, random_init(split.train, k, 100 + k), tc);

  return {violations == 0 && not_fixed == 0,
          std::to_string(runs) + " runs, " + std::to_string(violations) + " decreases (max drop " +
              format_exact(worst_drop) + "), " + std::to_string(not_fixed) + " not at a fixed point"};
}

Outcome cluster_recovery() {
  const auto& run = opposed();
  const double ari = adjusted_rand_index(run.clusters.assignment, run.sim.truth.group_labels());
  const double naive = *run.table.rows[0].win_rate;
  double min_margin = INFINITY;
  std::ostringstream rows;
  for (std::size_t i = 1; i < run.table.rows.size(); ++i) {
    const auto& row = run.table.rows[i];
    const double rate = row.win_rate.value_or(0.0);
    min_margin = std::min(min_margin, rate - naive);
    rows << ", " << row.model_label << " " << fmt(100 * rate, 2) << "%";
  }
  const auto bayes = bayes_win_rate(run.sim.truth, run.split.test);
  std::ostringstream detail;
  detail << "ARI " << fmt(ari) << "; naive " << fmt(100 * naive, 2) << "%" << rows.str()
         << "; Bayes oracle " << fmt(100 * *bayes[0], 2) << "%/" << fmt(100 * *bayes[1], 2) << "%";
  return {ari >= 0.9 && min_margin >= 0.05, detail.str()};
}

Outcome homogeneity_control() {
  const auto& run = homogeneous();
  double worst = 0.0;
  std::ostringstream detail;
  detail << "naive " << fmt(100 * *run.table.rows[0].win_rate, 2) << "%";
  for (std::size_t i = 1; i < run.table.rows.size(); ++i) {
    const auto& row = run.table.rows[i];
    if (!row.win_rate) continue;
    worst = std::max(worst, std::abs(*row.win_rate - *run.table.rows[0].win_rate));
    detail << ", " << row.model_label << " " << fmt(100 * *row.win_rate, 2) << "% (" << row.n_pairs
           << " pairs)";
  }
  detail << "; max gap " << fmt(100 * worst, 2) << " points";
  return {worst <= 0.02, detail.str()};
}

Outcome embedding_separation() {
  const auto& run = opposed();
  const auto sim = cosine_similarity_matrix(run.joint.embeddings);
  double within = 0.0, cross = 0.0;
  std::size_t nw = 0, nc = 0;
  const auto& groups = run.sim.truth.latent_group_of;
  for (std::size_t i = 0; i < sim.worker_ids.size(); ++i)
    for (std::size_t j = i + 1; j < sim.worker_ids.size(); ++j) {
      if (groups.at(sim.worker_ids[i]) == groups.at(sim.worker_ids[j])) {
        within += sim.values(i, j);
        ++nw;
      } else {
        cross += sim.values(i, j);
        ++nc;
      }
    }
  within /= static_cast<double>(nw);
  cross /= static_cast<double>(nc);
  const auto km = spherical_kmeans(run.joint.embeddings, 2, 5);
  const double ari = adjusted_rand_index(km.assignment, run.sim.truth.group_labels());
  return {cross < 0.0 && within > 0.0 && ari >= 0.9,
          "within-group mean cosine " + fmt(within) + ", cross-group " + fmt(cross) +
              ", k-means ARI " + fmt(ari)};
}

Outcome ingestion_fidelity() {
  const fs::path data = PREFCLUST_TEST_DATA_DIR;
  const FeaturizerConfig fc{32, 0};
  const auto f = filter_common_workers(ingest_jsonl(data / "tldr_train.jsonl", fc),
                                       ingest_jsonl(data / "tldr_test.jsonl", fc));
  std::ifstream in(data / "tldr_expected_report.json");
  const auto expected = nlohmann::json::parse(in);
  const nlohmann::json got = to_json(f.report);
  std::size_t lines = 0;
  for (const char* name : {"tldr_train.jsonl", "tldr_test.jsonl"}) {
    std::ifstream l(data / name);
    std::string s;
    while (std::getline(l, s)) ++lines;
  }
  return {got == expected, std::to_string(lines) + "-line fixture, report " + got.dump()};
}

Outcome pipeline_determinism() {
  const fs::path root = fs::temp_directory_path() / "prefclust_acceptance";
  fs::remove_all(root);
  std::vector<nlohmann::json> manifests;
  for (std::size_t threads : {1u, 1u, 8u, 8u}) {
    cli::RunConfig c;
    c.seed = 42;
    c.threads = threads;
    c.out = root / ("run" + std::to_string(manifests.size()));
    cli::cmd_pipeline(c);
    std::ifstream in(c.out / cli::artifact::manifest);
    manifests.push_back(nlohmann::json::parse(in));
    for (const auto& a : manifests.back()["artifacts"])
      if (cli::sha256_file(c.out / a["name"].get<std::string>()) != a["sha256"].get<std::string>())
        return {false, "manifest hash mismatch for " + a["name"].get<std::string>()};
  }
  fs::remove_all(root);
  bool same = true;
  for (const auto& m : manifests) same = same && m == manifests[0];
  return {same, "4 runs (--threads 1,1,8,8), " + std::to_string(manifests[0]["artifacts"].size()) +
                    " artifacts, manifests " + (same ? "identical" : "differ")};
}

}  // namespace

int main() {
  std::clog.setstate(std::ios::failbit);  // silence stage logs from the pipeline

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"BTL correctness", btl_correctness},
      {"Gradient checks", gradient_checks},
      {"Constraint enforcement", constraint_enforcement},
      {"Closed-form policy", closed_form_policy},
      {"Hard-EM monotonicity", hard_em_monotonicity},
      {"Cluster recovery", cluster_recovery},
      {"Homogeneity control", homogeneity_control},
      {"Embedding separation", embedding_separation},
      {"Ingestion fidelity", ingestion_fidelity},
      {"Determinism", pipeline_determinism},
  };

  int failures = 0;
  for (const auto& [name, fn] : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << name << ": " << o.detail << " ["
              << fmt(secs, 1) << "s]\n";
    failures += !o.pass;
  }
  std::cout << (failures ? "FAILED " : "ALL PASSED ") << criteria.size() - failures << "/"
            << criteria.size() << '\n';
  return failures ? 1 : 0;
}
