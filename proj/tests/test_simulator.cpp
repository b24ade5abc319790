#include <catch_amalgamated.hpp>

#include <numbers>

#include "prefclust/eval.hpp"
#include "prefclust/simulator.hpp"

using namespace prefclust;
using Catch::Approx;

namespace {

SimConfig base(std::uint64_t seed) {
  SimConfig c;
  c.n_workers = 10;
  c.pairs_per_worker = 100;
  c.feature_dim = 6;
  c.embedding_dim = 3;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("generate is a pure function of the config", "[sim]") {
  const auto a = generate(base(1));
  const auto b = generate(base(1));
  CHECK(a.corpus == b.corpus);
  CHECK(to_json(a.truth).dump() == to_json(b.truth).dump());
  CHECK(generate(base(2)).corpus != a.corpus);
  CHECK(a.corpus.n_workers() == 10);
  CHECK(a.corpus.n_records() == 1000);
  CHECK(a.corpus.provenance == a.truth.provenance);
  CHECK(a.truth.latent_group_of.size() == 10);
  for (const auto& theta : a.truth.group_theta) CHECK(theta.size() == 3);
}

TEST_CASE("generate validates the config", "[sim]") {
  SimConfig c = base(0);
  c.n_latent_groups = 11;
  CHECK_THROWS_AS(generate(c), ConfigError);
  c = base(0);
  c.preference_temperature = -1.0;
  CHECK_THROWS_AS(generate(c), ConfigError);
  c = base(0);
  c.feature_dim = 0;
  CHECK_THROWS_AS(generate(c), ConfigError);
}

TEST_CASE("argmax mode chooses the truly better response", "[sim]") {
  SimConfig c = base(3);
  c.preference_temperature = 0.0;
  const auto sim = generate(c);
  for (const auto& w : sim.corpus.workers) {
    const Vector& e = sim.truth.worker_embedding.at(w.worker_id);
    for (const auto& r : w.records)
      CHECK(sim.truth.true_reward(e, r.chosen) > sim.truth.true_reward(e, r.rejected));
  }
  for (const auto& rate : bayes_win_rate(sim.truth, sim.corpus)) CHECK(*rate == 1.0);
}

TEST_CASE("label noise matches the BTL rate", "[sim]") {
  SimConfig c = base(4);
  c.preference_temperature = 2.0;
  c.pairs_per_worker = 500;
  const auto sim = generate(c);
  double correct = 0.0, expected = 0.0, var = 0.0;
  std::size_t n = 0;
  for (const auto& w : sim.corpus.workers) {
    const Vector& e = sim.truth.worker_embedding.at(w.worker_id);
    for (const auto& r : w.records) {
      const double dr = sim.truth.true_reward(e, r.chosen) - sim.truth.true_reward(e, r.rejected);
      const double p = sigmoid(std::abs(dr) / c.preference_temperature);
      correct += dr > 0.0;
      expected += p;
      var += p * (1.0 - p);
      ++n;
    }
  }
  CHECK(std::abs(correct - expected) <= 2.0 * std::sqrt(var));
  CHECK(n == 5000);
}

TEST_CASE("bayes win-rate at known margins", "[sim]") {
  // One feature, margins exactly +-1, labels drawn at temperature 1.
  GroundTruth gt;
  gt.provenance = "hand";
  gt.u_star = {1.0};
  gt.V_star = Matrix(1, 1);
  gt.group_theta = {{0.0}};
  gt.latent_group_of["w"] = 0;
  gt.worker_embedding["w"] = {0.0};
  Rng rng(5);
  std::vector<PreferenceRecord> recs, shuffled;
  const std::size_t n = 20000;
  for (std::size_t j = 0; j < n; ++j) {
    const double hi = rng.normal();
    const bool keep = rng.uniform() < sigmoid(1.0);
    recs.push_back({std::to_string(j), "w", {keep ? hi : hi - 1.0}, {keep ? hi - 1.0 : hi}, {}, {}, {}});
    const bool coin = rng.uniform() < 0.5;
    shuffled.push_back({std::to_string(j), "w", {coin ? hi : hi - 1.0}, {coin ? hi - 1.0 : hi}, {}, {}, {}});
  }
  const Corpus c = make_corpus(recs, 1, SplitTag::unsplit, "hand");
  const double se = std::sqrt(sigmoid(1.0) * (1 - sigmoid(1.0)) / n);
  CHECK(std::abs(*bayes_win_rate(gt, c)[0] - 0.7310585786300049) < 3 * se);
  const Corpus s = make_corpus(shuffled, 1, SplitTag::unsplit, "hand");
  CHECK(std::abs(*bayes_win_rate(gt, s)[0] - 0.5) < 3 * std::sqrt(0.25 / n));

  Corpus other = c;
  other.provenance = "elsewhere";
  CHECK_THROWS_AS(bayes_win_rate(gt, other), DataError);
}

TEST_CASE("antipodal groups disagree", "[sim]") {
  SimConfig c = base(6);
  c.group_separation = std::numbers::pi;
  const auto sim = generate(c);
  const auto cross = group_model_win_rate(sim.truth, sim.corpus, 0);
  CHECK(*cross[0] > 0.5);
  CHECK(*cross[1] < 0.5);
  CHECK(cosine_similarity_matrix(std::vector<WorkerEmbedding>{{"a", sim.truth.group_theta[0]},
                                                             {"b", sim.truth.group_theta[1]}})
            .values(0, 1) == Approx(-1.0).margin(1e-12));
}

TEST_CASE("cross-group win-rate falls as separation grows", "[sim]") {
  double prev = 1.0;
  for (double sep : {0.0, std::numbers::pi / 2, std::numbers::pi}) {
    SimConfig c = base(7);
    c.group_separation = sep;
    const auto sim = generate(c);
    const double cross = *group_model_win_rate(sim.truth, sim.corpus, 0)[1];
    CHECK(cross <= prev);
    prev = cross;
  }
}

TEST_CASE("homogeneous noiseless workers share one embedding", "[sim]") {
  SimConfig c = base(8);
  c.n_latent_groups = 1;
  c.worker_noise = 0.0;
  const auto sim = generate(c);
  const Vector& first = sim.truth.worker_embedding.begin()->second;
  for (const auto& [id, e] : sim.truth.worker_embedding) CHECK(e == first);

  // A model with the true parameters reaches the Bayes rate on every worker's data.
  const auto bayes = bayes_win_rate(sim.truth, sim.corpus);
  const auto fitted = win_rate(sim.corpus.all_records(), [&](const FeatureVector& x) {
    return sim.truth.true_reward(sim.truth.group_theta[0], x);
  });
  CHECK(*fitted.win_rate == Approx(*bayes[0]).margin(1e-12));
}

TEST_CASE("ground truth round-trips through JSON", "[sim][io]") {
  const auto sim = generate(base(9));
  const auto back = ground_truth_from_json(nlohmann::json::parse(to_json(sim.truth).dump()));
  CHECK(back.provenance == sim.truth.provenance);
  CHECK(back.u_star == sim.truth.u_star);
  CHECK(back.V_star == sim.truth.V_star);
  CHECK(back.group_theta == sim.truth.group_theta);
  CHECK(back.latent_group_of == sim.truth.latent_group_of);
  CHECK(back.worker_embedding == sim.truth.worker_embedding);
}

TEST_CASE("candidate sets are valid distributions", "[sim]") {
  const auto sets = sample_candidate_sets(5, 4, 3, 1);
  REQUIRE(sets.size() == 4);
  for (const auto& cs : sets) CHECK_NOTHROW(validate_candidate_set(cs));
  CHECK(sample_candidate_sets(5, 4, 3, 1) == sets);
  CHECK_THROWS_AS(sample_candidate_sets(5, 1, 1, 1), ConfigError);
}
