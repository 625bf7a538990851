#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "brwre/environment.hpp"
#include "brwre/numerics.hpp"
#include "brwre/offspring_law.hpp"

namespace brwre {

// Positions of all generation-n particles. Generation 0 is the single initial
// particle at the origin.
struct GenerationSnapshot {
  int generation = 0;
  std::vector<double> positions;
  bool extinct() const { return positions.empty(); }
};

class PopulationCapExceeded : public std::runtime_error {
 public:
  PopulationCapExceeded(int generation, std::size_t size)
      : std::runtime_error("population cap exceeded at generation " + std::to_string(generation) +
                           " (size " + std::to_string(size) + ")"),
        generation(generation),
        size(size) {}
  int generation;
  std::size_t size;
};

// Drives the branching walk one generation at a time, holding only the
// current and next position arrays. visit(gen) is called for n = 0..n_max
// (or until extinction); throws PopulationCapExceeded rather than subsampling.
template <class RNG, class Visit>
void evolve_stream(const EnvironmentPath& path, const EnvironmentModel& model, int n_max,
                   std::size_t cap, RNG& rng, Visit&& visit) {
  if (n_max < 0) throw std::invalid_argument("evolve: n_max must be >= 0");
  if (cap < 1) throw std::invalid_argument("evolve: cap must be >= 1");
  if (static_cast<std::size_t>(n_max) > path.states.size())
    throw std::invalid_argument("evolve: path shorter than n_max");
  GenerationSnapshot current;
  current.generation = 0;
  current.positions = {0.0};
  std::vector<double> next;
  std::vector<OffspringSampler> samplers;
  samplers.reserve(model.state_count());
  for (const auto& law : model.states()) samplers.emplace_back(law);
  for (int n = 0;; ++n) {
    visit(static_cast<const GenerationSnapshot&>(current));
    if (n == n_max) break;
    // An extinct generation stays extinct: the loop below is a no-op.
    auto& sampler = samplers[static_cast<std::size_t>(path.states[static_cast<std::size_t>(n)])];
    next.clear();
    for (double pos : current.positions) {
      sampler.sample_children(rng, pos, next);
      if (next.size() > cap) throw PopulationCapExceeded(n + 1, next.size());
    }
    current.positions.swap(next);
    current.generation = n + 1;
  }
}

template <class RNG>
std::vector<GenerationSnapshot> evolve(const EnvironmentPath& path, const EnvironmentModel& model,
                                       int n_max, std::size_t cap, RNG& rng) {
  std::vector<GenerationSnapshot> out;
  out.reserve(static_cast<std::size_t>(n_max) + 1);
  evolve_stream(path, model, n_max, cap, rng,
                [&](const GenerationSnapshot& snap) { out.push_back(snap); });
  return out;
}

// log Ztilde_n(t) = log sum_u exp(t S_u); -inf iff extinct.
inline double log_partition(const GenerationSnapshot& snapshot, double t) {
  return log_sum_exp_scaled(snapshot.positions, t);
}

// log P_n(t) = sum_{i<n} log m_{xi_i}(t); zero for n = 0.
inline double log_quenched_mean(const EnvironmentPath& path, const EnvironmentModel& model, int n,
                                double t) {
  if (n < 0 || static_cast<std::size_t>(n) > path.states.size())
    throw std::invalid_argument("log_quenched_mean: n out of range");
  double acc = 0.0;
  for (int i = 0; i < n; ++i)
    acc += log_laplace_m(model.state(static_cast<std::size_t>(path.states[static_cast<std::size_t>(i)])), t);
  return acc;
}

// W_n(t) = Ztilde_n(t) / P_n(t), evaluated in log domain and exponentiated last.
inline double w_value(const GenerationSnapshot& snapshot, const EnvironmentPath& path,
                      const EnvironmentModel& model, double t) {
  const double lz = log_partition(snapshot, t);
  if (lz == kNegInf) return 0.0;
  return std::exp(lz - log_quenched_mean(path, model, snapshot.generation, t));
}

inline std::size_t count_in_interval(const GenerationSnapshot& snapshot, double a, double b) {
  if (a > b) throw std::invalid_argument("count_in_interval: requires a <= b");
  std::size_t c = 0;
  for (double x : snapshot.positions)
    if (x >= a && x <= b) ++c;
  return c;
}

// W_n(t) and log P_n(t) for n = 0..N over a shared t grid.
struct MartingalePath {
  std::vector<double> t_grid;
  std::vector<std::vector<double>> values;  // values[n][k] = W_n(t_grid[k])
  std::vector<std::vector<double>> log_p;   // log_p[n][k]  = log P_n(t_grid[k])

  double w(int n, std::size_t t_index) const {
    return values[static_cast<std::size_t>(n)][t_index];
  }
  int horizon() const { return static_cast<int>(values.size()) - 1; }
};

// One tree traversal filling every (n, t) cell; arithmetic identical to
// w_value on the same snapshots.
template <class RNG>
MartingalePath w_path_on_grid(const EnvironmentPath& path, const EnvironmentModel& model,
                              std::vector<double> t_grid, int n_max, std::size_t cap, RNG& rng) {
  MartingalePath mp;
  mp.t_grid = std::move(t_grid);
  std::vector<double> log_p(mp.t_grid.size(), 0.0);
  evolve_stream(path, model, n_max, cap, rng, [&](const GenerationSnapshot& snap) {
    if (snap.generation > 0) {
      const auto& law =
          model.state(static_cast<std::size_t>(path.states[static_cast<std::size_t>(snap.generation - 1)]));
      for (std::size_t k = 0; k < mp.t_grid.size(); ++k)
        log_p[k] += log_laplace_m(law, mp.t_grid[k]);
    }
    std::vector<double> row(mp.t_grid.size(), 0.0);
    for (std::size_t k = 0; k < mp.t_grid.size(); ++k) {
      const double lz = log_partition(snap, mp.t_grid[k]);
      row[k] = lz == kNegInf ? 0.0 : std::exp(lz - log_p[k]);
    }
    mp.values.push_back(std::move(row));
    mp.log_p.push_back(log_p);
  });
  return mp;
}

// Partial sums A_hat_n = sum_{k<=n} rho^k (W_{k+1} - W_k) for n = 0..N-1.
inline std::vector<double> a_hat_path(const MartingalePath& mp, double t, double rho) {
  if (rho < 1.0) throw std::invalid_argument("a_hat_path: rho must be >= 1");
  std::size_t ti = mp.t_grid.size();
  for (std::size_t k = 0; k < mp.t_grid.size(); ++k)
    if (mp.t_grid[k] == t) ti = k;
  if (ti == mp.t_grid.size()) throw std::invalid_argument("a_hat_path: t not on the grid");
  std::vector<double> out;
  double acc = 0.0;
  double rho_k = 1.0;
  for (std::size_t n = 0; n + 1 < mp.values.size(); ++n) {
    acc += rho_k * (mp.values[n + 1][ti] - mp.values[n][ti]);
    rho_k *= rho;
    out.push_back(acc);
  }
  return out;
}

}  // namespace brwre
