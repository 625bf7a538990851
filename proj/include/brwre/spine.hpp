#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <stdexcept>
#include <vector>

#include "brwre/environment.hpp"
#include "brwre/numerics.hpp"
#include "brwre/offspring_law.hpp"
#include "brwre/simulator.hpp"

namespace brwre {

struct SizeBiasedDraw {
  int count = 0;
  std::vector<double> displacements;
  int spine_index = 0;  // which child continues the spine
};

// One reproduction step under the size-biased measure: the offspring vector X
// is reweighted by (sum_i e^{t L_i}) / m(t), and the spine child is i with
// probability e^{t L_i} / sum_j e^{t L_j} given the vector.
//
// Finite tables: exact categorical sampling over the reweighted (atom, child)
// pairs. Poisson-Gaussian: the reweighted cluster is the original Poisson
// cluster plus one extra point with the exponentially tilted mark
// Gaussian(mu + s^2 t, s^2); the extra point is the spine child. The Gaussian
// construction is validated against a rejection-sampler oracle in the tests.
template <class RNG>
SizeBiasedDraw sample_size_biased_offspring(const OffspringLaw& law, double t, RNG& rng) {
  detail::require_finite_t(t);
  SizeBiasedDraw out;
  if (const auto* pg = std::get_if<PoissonGaussian>(&law)) {
    NormalSampler normal;
    const int n = sample_poisson(rng, pg->lambda);
    out.displacements.reserve(static_cast<std::size_t>(n) + 1);
    for (int i = 0; i < n; ++i) out.displacements.push_back(normal(rng, pg->mu, pg->s));
    out.displacements.push_back(normal(rng, pg->mu + pg->s * pg->s * t, pg->s));
    out.spine_index = n;
    out.count = n + 1;
    return out;
  }
  const auto& ft = std::get<FiniteTable>(law);
  const double log_m = log_laplace_m(law, t);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  const double u = uniform(rng);
  double acc = 0.0;
  for (const auto& a : ft.atoms) {
    for (std::size_t j = 0; j < a.displacements.size(); ++j) {
      acc += a.prob * std::exp(t * a.displacements[j] - log_m);
      if (u < acc) {
        out.displacements = a.displacements;
        out.count = static_cast<int>(a.displacements.size());
        out.spine_index = static_cast<int>(j);
        return out;
      }
    }
  }
  // Rounding pushed u past the total mass; take the last (atom, child) pair.
  for (auto it = ft.atoms.rbegin(); it != ft.atoms.rend(); ++it) {
    if (!it->displacements.empty()) {
      out.displacements = it->displacements;
      out.count = static_cast<int>(it->displacements.size());
      out.spine_index = out.count - 1;
      return out;
    }
  }
  throw std::logic_error("size-biased draw from a childless law");
}

// Exact categorical law of the size-biased (atom, spine child) pairs; test
// oracle surface for finite tables.
inline std::vector<double> size_biased_pair_probabilities(const FiniteTable& ft, double t) {
  const double log_m = log_laplace_m(OffspringLaw{ft}, t);
  std::vector<double> probs;
  for (const auto& a : ft.atoms)
    for (double l : a.displacements) probs.push_back(a.prob * std::exp(t * l - log_m));
  return probs;
}

struct SpineSibling {
  double displacement = 0.0;  // relative to the spine node that spawned it
  double w_subtree = 0.0;     // W_{depth} of the ordinary subtree it roots
  double log_ztilde = kNegInf;  // relative partition of that subtree at depth n-k-1
};

// A realization of the size-biased tree: the spine path, each spine node's
// siblings with their ordinary-subtree summaries, and the spine subtree
// partitions needed to evaluate W_{n-k, omega_k}(t).
struct SpineRealization {
  double t = 0.0;
  int horizon = 0;
  std::vector<double> spine_displacements;     // length n
  std::vector<double> spine_positions;         // length n+1, S_{omega_0..omega_n}
  std::vector<std::vector<SpineSibling>> siblings;  // per level k = 0..n-1
  std::vector<double> tilde_x_spine;           // e^{t S_{omega_k}} / P_k(t), k = 0..n
  std::vector<double> w_spine_subtree;         // W_{n-k, omega_k}(t), k = 0..n
};

// Samples the spine tree: at level k the spine node reproduces size-biased
// with law xi_k, every sibling roots an independent ordinary subtree evolved
// to depth n-k-1 under the shifted environment.
template <class RNG>
SpineRealization sample_spine_tree(const EnvironmentPath& path, const EnvironmentModel& model,
                                   double t, int n, std::size_t cap, RNG& rng) {
  if (n < 0 || static_cast<std::size_t>(n) > path.states.size())
    throw std::invalid_argument("sample_spine_tree: n out of range");
  SpineRealization sr;
  sr.t = t;
  sr.horizon = n;
  sr.spine_positions.assign(1, 0.0);
  sr.siblings.resize(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    const auto& law = model.state(static_cast<std::size_t>(path.states[static_cast<std::size_t>(k)]));
    const SizeBiasedDraw draw = sample_size_biased_offspring(law, t, rng);
    const double spine_disp = draw.displacements[static_cast<std::size_t>(draw.spine_index)];
    sr.spine_displacements.push_back(spine_disp);
    sr.spine_positions.push_back(sr.spine_positions.back() + spine_disp);
    const int sub_depth = n - k - 1;
    EnvironmentPath sub_path;
    sub_path.seed = path.seed;
    sub_path.states.assign(path.states.begin() + k + 1,
                           path.states.begin() + k + 1 + sub_depth);
    for (int i = 0; i < draw.count; ++i) {
      if (i == draw.spine_index) continue;
      SpineSibling sib;
      sib.displacement = draw.displacements[static_cast<std::size_t>(i)];
      double log_z = kNegInf;
      evolve_stream(sub_path, model, sub_depth, cap, rng, [&](const GenerationSnapshot& snap) {
        if (snap.generation == sub_depth) log_z = log_partition(snap, t);
      });
      sib.log_ztilde = log_z;
      const double log_p = log_quenched_mean(sub_path, model, sub_depth, t);
      sib.w_subtree = log_z == kNegInf ? 0.0 : std::exp(log_z - log_p);
      sr.siblings[static_cast<std::size_t>(k)].push_back(sib);
    }
  }
  // tilde X along the spine.
  for (int k = 0; k <= n; ++k)
    sr.tilde_x_spine.push_back(std::exp(t * sr.spine_positions[static_cast<std::size_t>(k)] -
                                        log_quenched_mean(path, model, k, t)));
  // Spine-subtree partitions, bottom up: V_k is log Ztilde of omega_k's
  // subtree relative to omega_k, depth n-k.
  std::vector<double> log_v(static_cast<std::size_t>(n) + 1, 0.0);
  for (int k = n - 1; k >= 0; --k) {
    std::vector<double> terms;
    terms.push_back(t * sr.spine_displacements[static_cast<std::size_t>(k)] +
                    log_v[static_cast<std::size_t>(k) + 1]);
    for (const auto& sib : sr.siblings[static_cast<std::size_t>(k)])
      if (sib.log_ztilde != kNegInf) terms.push_back(t * sib.displacement + sib.log_ztilde);
    log_v[static_cast<std::size_t>(k)] = log_sum_exp(terms);
  }
  for (int k = 0; k <= n; ++k) {
    const double log_p_tail = log_quenched_mean(path, model, n, t) - log_quenched_mean(path, model, k, t);
    sr.w_spine_subtree.push_back(std::exp(log_v[static_cast<std::size_t>(k)] - log_p_tail));
  }
  return sr;
}

struct IdentityReport {
  double lhs_mean = 0.0;
  double lhs_se = 0.0;
  double rhs_mean = 0.0;
  double rhs_se = 0.0;
  bool intervals_overlap = false;
  bool degenerate_g = false;
};

// Checks E_Q g(W_{n-k, omega_k}(t)) = E_{T^k xi} [W_{n-k}(t) g(W_{n-k}(t))].
// Left side from spine replicates, right side from ordinary simulation under
// the shifted environment.
inline IdentityReport verify_w_identity(const EnvironmentPath& path, const EnvironmentModel& model,
                                        double t, int n, int k,
                                        const std::function<double(double)>& g,
                                        std::size_t replicates, std::uint64_t seed,
                                        std::size_t cap = 10'000'000) {
  if (k < 1 || k > n) throw std::invalid_argument("verify_w_identity: requires 1 <= k <= n");
  RunningStats lhs, rhs;
  for (std::size_t r = 0; r < replicates; ++r) {
    auto rng = make_stream(seed, "spine-lhs", r);
    const auto sr = sample_spine_tree(path, model, t, n, cap, rng);
    lhs.add(g(sr.w_spine_subtree[static_cast<std::size_t>(k)]));
  }
  EnvironmentPath shifted;
  shifted.seed = path.seed;
  shifted.states.assign(path.states.begin() + k, path.states.end());
  const int depth = n - k;
  for (std::size_t r = 0; r < replicates; ++r) {
    auto rng = make_stream(seed, "spine-rhs", r);
    double w = 0.0;
    evolve_stream(shifted, model, depth, cap, rng, [&](const GenerationSnapshot& snap) {
      if (snap.generation == depth) w = w_value(snap, shifted, model, t);
    });
    rhs.add(w * g(w));
  }
  IdentityReport rep;
  rep.lhs_mean = lhs.mean();
  rep.lhs_se = lhs.se();
  rep.rhs_mean = rhs.mean();
  rep.rhs_se = rhs.se();
  rep.degenerate_g = lhs.sd() == 0.0 && rhs.sd() == 0.0 && lhs.mean() == 0.0 && rhs.mean() == 0.0;
  const double lo_l = rep.lhs_mean - 1.96 * rep.lhs_se, hi_l = rep.lhs_mean + 1.96 * rep.lhs_se;
  const double lo_r = rep.rhs_mean - 1.96 * rep.rhs_se, hi_r = rep.rhs_mean + 1.96 * rep.rhs_se;
  rep.intervals_overlap = lo_l <= hi_r && lo_r <= hi_l;
  return rep;
}

struct CorrelationReport {
  double correlation = 0.0;
  double bound = 0.0;  // 4 / sqrt(replicates)
  bool within_bound = false;
  bool degenerate = false;  // either marginal is a.s. constant
  std::vector<double> x_samples;  // tilde X_{omega_k}
  std::vector<double> w_samples;  // W_{n-k, omega_k}
};

// Under Q the spine weight tilde X_{omega_k}(t) and the spine-subtree
// martingale W_{n-k, omega_k}(t) are independent; flags |corr| < 4/sqrt(R).
inline CorrelationReport verify_independence(const EnvironmentPath& path,
                                             const EnvironmentModel& model, double t, int n, int k,
                                             std::size_t replicates, std::uint64_t seed,
                                             std::size_t cap = 10'000'000) {
  if (k < 1 || k > n) throw std::invalid_argument("verify_independence: requires 1 <= k <= n");
  CorrelationReport rep;
  rep.x_samples.reserve(replicates);
  rep.w_samples.reserve(replicates);
  for (std::size_t r = 0; r < replicates; ++r) {
    auto rng = make_stream(seed, "spine-indep", r);
    const auto sr = sample_spine_tree(path, model, t, n, cap, rng);
    rep.x_samples.push_back(sr.tilde_x_spine[static_cast<std::size_t>(k)]);
    rep.w_samples.push_back(sr.w_spine_subtree[static_cast<std::size_t>(k)]);
  }
  RunningStats xs, ws;
  for (double x : rep.x_samples) xs.add(x);
  for (double w : rep.w_samples) ws.add(w);
  rep.bound = 4.0 / std::sqrt(static_cast<double>(replicates));
  if (xs.sd() == 0.0 || ws.sd() == 0.0) {
    rep.degenerate = true;
    rep.correlation = 0.0;
    rep.within_bound = true;
    return rep;
  }
  double cov = 0.0;
  for (std::size_t i = 0; i < replicates; ++i)
    cov += (rep.x_samples[i] - xs.mean()) * (rep.w_samples[i] - ws.mean());
  cov /= static_cast<double>(replicates - 1);
  rep.correlation = cov / (xs.sd() * ws.sd());
  rep.within_bound = std::abs(rep.correlation) < rep.bound;
  return rep;
}

}  // namespace brwre
