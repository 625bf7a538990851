#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <variant>
#include <vector>

#include "brwre/offspring_law.hpp"
#include "brwre/rng.hpp"

namespace brwre {

struct IIDProcess {
  std::vector<double> weights;  // one per state, sums to 1
};

struct MarkovProcess {
  std::vector<std::vector<double>> matrix;  // row-stochastic, irreducible
};

struct CycleProcess {
  std::vector<int> sequence;  // visited in order from a uniform random offset
};

using EnvironmentProcess = std::variant<IIDProcess, MarkovProcess, CycleProcess>;

struct EnvironmentPath {
  std::uint64_t seed = 0;
  std::vector<int> states;  // realized xi_0 .. xi_{n-1}
};

namespace detail {

// Solve pi P = pi, sum pi = 1 by Gaussian elimination on (P^T - I) with the
// normalization row appended.
inline std::vector<double> solve_stationary(const std::vector<std::vector<double>>& p) {
  const std::size_t n = p.size();
  std::vector<std::vector<double>> a(n, std::vector<double>(n + 1, 0.0));
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < n; ++i) a[j][i] = p[i][j] - (i == j ? 1.0 : 0.0);
  }
  // Replace the last equation (rank n-1 system) by sum pi_i = 1.
  for (std::size_t i = 0; i < n; ++i) a[n - 1][i] = 1.0;
  a[n - 1][n] = 1.0;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
    std::swap(a[col], a[piv]);
    if (std::abs(a[col][col]) < 1e-14)
      throw std::invalid_argument("markov: stationary distribution solve is singular");
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = a[r][col] / a[col][col];
      for (std::size_t c = col; c <= n; ++c) a[r][c] -= f * a[col][c];
    }
  }
  std::vector<double> pi(n);
  for (std::size_t i = 0; i < n; ++i) pi[i] = a[i][n] / a[i][i];
  return pi;
}

inline bool is_irreducible(const std::vector<std::vector<double>>& p) {
  const std::size_t n = p.size();
  // Reachability closure over positive entries, from every start state.
  for (std::size_t start = 0; start < n; ++start) {
    std::vector<bool> seen(n, false);
    std::vector<std::size_t> stack{start};
    seen[start] = true;
    while (!stack.empty()) {
      const std::size_t s = stack.back();
      stack.pop_back();
      for (std::size_t j = 0; j < n; ++j) {
        if (p[s][j] > 0.0 && !seen[j]) {
          seen[j] = true;
          stack.push_back(j);
        }
      }
    }
    for (bool b : seen)
      if (!b) return false;
  }
  return true;
}

}  // namespace detail

// States plus a stationary ergodic selection process. Immutable after
// construction; share freely across threads.
class EnvironmentModel {
 public:
  EnvironmentModel(std::vector<OffspringLaw> states, EnvironmentProcess process)
      : states_(std::move(states)), process_(std::move(process)) {
    if (states_.empty()) throw std::invalid_argument("environment: needs at least one state");
    for (const auto& law : states_) validate(law);
    if (const auto* iid = std::get_if<IIDProcess>(&process_)) {
      if (iid->weights.size() != states_.size())
        throw std::invalid_argument("iid: one weight per state required");
      double total = 0.0;
      for (double w : iid->weights) {
        if (!(w >= 0.0)) throw std::invalid_argument("iid: weights must be nonnegative");
        total += w;
      }
      if (std::abs(total - 1.0) > 1e-12) throw std::invalid_argument("iid: weights must sum to 1");
      stationary_ = iid->weights;
    } else if (const auto* mk = std::get_if<MarkovProcess>(&process_)) {
      const auto& m = mk->matrix;
      if (m.size() != states_.size())
        throw std::invalid_argument("markov: one matrix row per state required");
      for (const auto& row : m) {
        if (row.size() != states_.size())
          throw std::invalid_argument("markov: matrix must be square");
        double total = 0.0;
        for (double x : row) {
          if (!(x >= 0.0)) throw std::invalid_argument("markov: entries must be nonnegative");
          total += x;
        }
        if (std::abs(total - 1.0) > 1e-12)
          throw std::invalid_argument("markov: rows must sum to 1");
      }
      if (!detail::is_irreducible(m)) throw std::invalid_argument("markov: matrix is reducible");
      stationary_ = detail::solve_stationary(m);
      // Balance-equation residual check.
      for (std::size_t j = 0; j < m.size(); ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < m.size(); ++i) acc += stationary_[i] * m[i][j];
        if (std::abs(acc - stationary_[j]) > 1e-10)
          throw std::invalid_argument("markov: stationary solve failed balance check");
      }
    } else {
      const auto& cyc = std::get<CycleProcess>(process_);
      if (cyc.sequence.empty()) throw std::invalid_argument("cycle: sequence must be nonempty");
      std::vector<double> freq(states_.size(), 0.0);
      for (int s : cyc.sequence) {
        if (s < 0 || static_cast<std::size_t>(s) >= states_.size())
          throw std::invalid_argument("cycle: state index out of range");
        freq[static_cast<std::size_t>(s)] += 1.0;
      }
      for (double& f : freq) f /= static_cast<double>(cyc.sequence.size());
      stationary_ = freq;  // law of xi_0 under a uniform offset
    }
  }

  std::size_t state_count() const { return states_.size(); }
  const OffspringLaw& state(std::size_t i) const { return states_[i]; }
  const std::vector<OffspringLaw>& states() const { return states_; }
  const EnvironmentProcess& process() const { return process_; }
  // Law of xi_0 (stationarity makes this the marginal of every xi_n).
  const std::vector<double>& stationary() const { return stationary_; }
  bool is_iid() const { return std::holds_alternative<IIDProcess>(process_); }

 private:
  std::vector<OffspringLaw> states_;
  EnvironmentProcess process_;
  std::vector<double> stationary_;
};

inline EnvironmentPath sample_env_path(const EnvironmentModel& model, std::size_t horizon,
                                       std::uint64_t seed) {
  EnvironmentPath path;
  path.seed = seed;
  path.states.reserve(horizon);
  auto rng = make_stream(seed, "env-path");
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  auto pick = [&](const std::vector<double>& w) {
    const double u = uniform(rng);
    double acc = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      acc += w[i];
      if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(w.size() - 1);
  };
  if (const auto* iid = std::get_if<IIDProcess>(&model.process())) {
    for (std::size_t k = 0; k < horizon; ++k) path.states.push_back(pick(iid->weights));
  } else if (const auto* mk = std::get_if<MarkovProcess>(&model.process())) {
    if (horizon > 0) {
      int s = pick(model.stationary());  // stationary start, no burn-in
      path.states.push_back(s);
      for (std::size_t k = 1; k < horizon; ++k) {
        s = pick(mk->matrix[static_cast<std::size_t>(s)]);
        path.states.push_back(s);
      }
    }
  } else {
    const auto& cyc = std::get<CycleProcess>(model.process());
    std::uniform_int_distribution<std::size_t> offset(0, cyc.sequence.size() - 1);
    std::size_t at = offset(rng);
    for (std::size_t k = 0; k < horizon; ++k) {
      path.states.push_back(cyc.sequence[at]);
      at = (at + 1) % cyc.sequence.size();
    }
  }
  return path;
}

// Rescale every state at t_star; the result satisfies m(1) = 1 per state.
inline EnvironmentModel normalize_at(const EnvironmentModel& model, double t_star) {
  std::vector<OffspringLaw> states;
  states.reserve(model.state_count());
  for (const auto& law : model.states()) states.push_back(normalize(law, t_star));
  return EnvironmentModel(std::move(states), model.process());
}

inline bool is_normalized(const EnvironmentModel& model, double tol = 1e-9) {
  for (const auto& law : model.states())
    if (std::abs(log_laplace_m(law, 1.0)) > tol) return false;
  return true;
}

// True when every state reproduces deterministically (single-atom tables).
inline bool is_deterministic_model(const EnvironmentModel& model) {
  for (const auto& law : model.states())
    if (!is_deterministic(law)) return false;
  return true;
}

}  // namespace brwre
