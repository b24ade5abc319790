#pragma once

// Independent reference computations shared by the unit tests and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "prefclust/prefclust.hpp"

namespace prefclust::oracle {

/// Central finite-difference gradient of f at x.
inline Vector numeric_gradient(const std::function<double(const Vector&)>& f, Vector x,
                               double h = 1e-5) {
  Vector g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = f(x);
    x[i] = saved - h;
    const double down = f(x);
    x[i] = saved;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

/// ||a - b|| / max(||a||, ||b||), 0 when both vanish.
inline double relative_error(const Vector& a, const Vector& b) {
  const double scale = std::max(norm(a), norm(b));
  if (scale == 0.0) return 0.0;
  return norm(subtract(a, b)) / scale;
}

/// Random corpus with `n_workers` workers and `per_worker` records of dimension d.
inline Corpus random_corpus(Rng& rng, std::size_t n_workers, std::size_t per_worker,
                            std::size_t d) {
  std::vector<PreferenceRecord> recs;
  for (std::size_t w = 0; w < n_workers; ++w)
    for (std::size_t j = 0; j < per_worker; ++j)
      recs.push_back({"p" + std::to_string(w) + "_" + std::to_string(j), "w" + std::to_string(w),
                      rng.normal_vector(d), rng.normal_vector(d), {}, {}, {}});
  return make_corpus(std::move(recs), d);
}

/// Brute-force objective of the personalized reward, written out elementwise.
inline double joint_objective_bruteforce(const Corpus& c, const Vector& u, const Matrix& V,
                                         const std::vector<Vector>& e, double l2) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t w = 0; w < c.workers.size(); ++w) {
    for (const auto& r : c.workers[w].records) {
      double m = 0.0;
      for (std::size_t b = 0; b < u.size(); ++b) {
        const double delta = r.chosen[b] - r.rejected[b];
        m += u[b] * delta;
        for (std::size_t a = 0; a < V.rows(); ++a) m += e[w][a] * V(a, b) * delta;
      }
      s += -std::log1p(std::exp(-m));
      ++n;
    }
  }
  double pen = 0.0;
  for (double x : u) pen += x * x;
  for (double x : V.data()) pen += x * x;
  return s / static_cast<double>(n) - l2 * pen;
}

/// Contingency-free ARI: counts agreeing pairs directly, O(n^2).
inline double pair_counting_ari(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  const std::size_t n = a.size();
  double both = 0, only_a = 0, only_b = 0, total = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const bool sa = a[i] == a[j], sb = b[i] == b[j];
      both += sa && sb;
      only_a += sa;
      only_b += sb;
      ++total;
    }
  const double expected = only_a * only_b / total;
  const double max_index = 0.5 * (only_a + only_b);
  if (max_index == expected) return 1.0;
  return (both - expected) / (max_index - expected);
}

}  // namespace prefclust::oracle
