#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "brwre/environment.hpp"
#include "brwre/numerics.hpp"

namespace brwre {

// Exact position counts for models whose every state reproduces
// deterministically (single-atom tables): the tree is a.s. constant, and the
// generation-n occupation counts are the n-fold convolution of the per-state
// displacement multisets. Displacements must live on a common lattice
// delta * Z. Counts are kept rescaled to stay inside double range; all
// queries are exact up to rounding in the ratio.
class DeterministicLattice {
 public:
  explicit DeterministicLattice(const EnvironmentModel& model) : model_(&model) {
    if (!is_deterministic_model(model))
      throw std::invalid_argument("deterministic lattice: model has random reproduction");
    double delta = 0.0;
    for (const auto& law : model.states()) {
      for (double l : std::get<FiniteTable>(law).atoms[0].displacements) {
        const double a = std::abs(l);
        if (a > 1e-12 && (delta == 0.0 || a < delta)) delta = a;
      }
    }
    if (delta == 0.0) delta = 1.0;  // all displacements zero
    delta_ = delta;
    offsets_.resize(model.state_count());
    for (std::size_t z = 0; z < model.state_count(); ++z) {
      for (double l : std::get<FiniteTable>(model.state(z)).atoms[0].displacements) {
        const double q = l / delta_;
        const long o = std::lround(q);
        if (std::abs(q - static_cast<double>(o)) > 1e-9)
          throw std::invalid_argument("deterministic lattice: displacements not commensurable");
        offsets_[z].push_back(o);
        max_offset_ = std::max(max_offset_, std::labs(o));
      }
    }
  }

  struct Population {
    double delta = 1.0;
    long min_index = 0;               // lattice index of counts[0]
    std::vector<double> counts;       // rescaled occupation counts
    double log_scale = 0.0;           // true count = counts[i] * exp(log_scale)

    // log Z_n([a, b]) - log Z_n(R); -inf when the interval holds no particle.
    double log_interval_fraction(double a, double b) const {
      if (a > b) throw std::invalid_argument("log_interval_fraction: requires a <= b");
      double in = 0.0, total = 0.0;
      for (std::size_t i = 0; i < counts.size(); ++i) {
        const double x = delta * static_cast<double>(min_index + static_cast<long>(i));
        total += counts[i];
        if (x >= a && x <= b) in += counts[i];
      }
      if (in == 0.0) return kNegInf;
      return std::log(in) - std::log(total);
    }
  };

  // Occupation counts of generation n along the given environment path.
  Population generation(const EnvironmentPath& path, int n) const {
    if (n < 0 || static_cast<std::size_t>(n) > path.states.size())
      throw std::invalid_argument("deterministic lattice: n out of range");
    const long span = max_offset_ * static_cast<long>(n) + 1;
    Population pop;
    pop.delta = delta_;
    pop.min_index = -span;
    pop.counts.assign(static_cast<std::size_t>(2 * span + 1), 0.0);
    std::vector<double> next(pop.counts.size(), 0.0);
    pop.counts[static_cast<std::size_t>(span)] = 1.0;  // root at the origin
    for (int g = 0; g < n; ++g) {
      const auto& offs = offsets_[static_cast<std::size_t>(path.states[static_cast<std::size_t>(g)])];
      std::fill(next.begin(), next.end(), 0.0);
      double peak = 0.0;
      for (std::size_t i = 0; i < pop.counts.size(); ++i) {
        const double c = pop.counts[i];
        if (c == 0.0) continue;
        for (long o : offs) {
          next[static_cast<std::size_t>(static_cast<long>(i) + o)] += c;
        }
      }
      for (double c : next) peak = std::max(peak, c);
      if (peak > 1e250) {
        for (double& c : next) c /= 1e250;
        pop.log_scale += std::log(1e250);
      }
      pop.counts.swap(next);
    }
    return pop;
  }

 private:
  const EnvironmentModel* model_;
  double delta_ = 1.0;
  std::vector<std::vector<long>> offsets_;
  long max_offset_ = 0;
};

}  // namespace brwre
