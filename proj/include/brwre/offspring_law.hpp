#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "brwre/numerics.hpp"
#include "brwre/rng.hpp"

namespace brwre {

// One reproduction point process: Poisson(lambda) many children, each with an
// independent Gaussian(mu, s^2) displacement.
struct PoissonGaussian {
  double lambda = 1.0;
  double mu = 0.0;
  double s = 1.0;
};

struct FiniteAtom {
  double prob = 1.0;
  std::vector<double> displacements;  // one entry per child
};

// Finite mixture of deterministic offspring vectors.
struct FiniteTable {
  std::vector<FiniteAtom> atoms;
};

using OffspringLaw = std::variant<PoissonGaussian, FiniteTable>;

struct Offspring {
  int count = 0;
  std::vector<double> displacements;
};

inline void validate(const OffspringLaw& law) {
  if (const auto* pg = std::get_if<PoissonGaussian>(&law)) {
    if (!(pg->lambda > 0.0) || !std::isfinite(pg->lambda))
      throw std::invalid_argument("poisson_gaussian: lambda must be positive");
    if (!std::isfinite(pg->mu)) throw std::invalid_argument("poisson_gaussian: mu must be finite");
    if (!(pg->s >= 0.0) || !std::isfinite(pg->s))
      throw std::invalid_argument("poisson_gaussian: s must be >= 0");
    return;
  }
  const auto& ft = std::get<FiniteTable>(law);
  if (ft.atoms.empty()) throw std::invalid_argument("finite_table: needs at least one atom");
  double total = 0.0;
  double mean_count = 0.0;
  for (const auto& a : ft.atoms) {
    if (!(a.prob >= 0.0) || !std::isfinite(a.prob))
      throw std::invalid_argument("finite_table: atom probabilities must be nonnegative");
    for (double l : a.displacements)
      if (!std::isfinite(l)) throw std::invalid_argument("finite_table: displacements must be finite");
    total += a.prob;
    mean_count += a.prob * static_cast<double>(a.displacements.size());
  }
  if (std::abs(total - 1.0) > 1e-12)
    throw std::invalid_argument("finite_table: atom probabilities must sum to 1");
  if (!(mean_count > 0.0))
    throw std::invalid_argument("finite_table: mean offspring count must be positive");
}

namespace detail {
inline void require_finite_t(double t) {
  if (!std::isfinite(t)) throw std::invalid_argument("t must be finite");
}
}  // namespace detail

// log m(t) = log E sum_i exp(t L_i); closed form for Poisson-Gaussian, shifted
// finite sum for tables. Callers in the simulator always stay in log domain.
inline double log_laplace_m(const OffspringLaw& law, double t) {
  detail::require_finite_t(t);
  if (const auto* pg = std::get_if<PoissonGaussian>(&law))
    return std::log(pg->lambda) + pg->mu * t + 0.5 * pg->s * pg->s * t * t;
  const auto& ft = std::get<FiniteTable>(law);
  std::vector<double> terms;
  for (const auto& a : ft.atoms) {
    if (a.prob == 0.0) continue;
    for (double l : a.displacements) terms.push_back(std::log(a.prob) + t * l);
  }
  return log_sum_exp(terms);
}

inline double laplace_m(const OffspringLaw& law, double t) {
  return std::exp(log_laplace_m(law, t));
}

// m'(t)/m(t).
inline double m_log_derivative(const OffspringLaw& law, double t) {
  detail::require_finite_t(t);
  if (const auto* pg = std::get_if<PoissonGaussian>(&law)) return pg->mu + pg->s * pg->s * t;
  const auto& ft = std::get<FiniteTable>(law);
  double shift = kNegInf;
  for (const auto& a : ft.atoms)
    for (double l : a.displacements) shift = std::max(shift, t * l);
  double num = 0.0, den = 0.0;
  for (const auto& a : ft.atoms) {
    for (double l : a.displacements) {
      const double w = a.prob * std::exp(t * l - shift);
      num += l * w;
      den += w;
    }
  }
  return num / den;
}

// Mean offspring count pi = m(0).
inline double mean_count(const OffspringLaw& law) {
  if (const auto* pg = std::get_if<PoissonGaussian>(&law)) return pg->lambda;
  const auto& ft = std::get<FiniteTable>(law);
  double c = 0.0;
  for (const auto& a : ft.atoms) c += a.prob * static_cast<double>(a.displacements.size());
  return c;
}

// E sum_i L_i.
inline double displacement_sum_mean(const OffspringLaw& law) {
  if (const auto* pg = std::get_if<PoissonGaussian>(&law)) return pg->lambda * pg->mu;
  const auto& ft = std::get<FiniteTable>(law);
  double s = 0.0;
  for (const auto& a : ft.atoms)
    for (double l : a.displacements) s += a.prob * l;
  return s;
}

// E sum_i L_i^2.
inline double displacement_square_sum(const OffspringLaw& law) {
  if (const auto* pg = std::get_if<PoissonGaussian>(&law))
    return pg->lambda * (pg->mu * pg->mu + pg->s * pg->s);
  const auto& ft = std::get<FiniteTable>(law);
  double s = 0.0;
  for (const auto& a : ft.atoms)
    for (double l : a.displacements) s += a.prob * l * l;
  return s;
}

// (1/pi) E sum_i L_i^2.
inline double second_displacement_moment(const OffspringLaw& law) {
  const double pi = mean_count(law);
  if (!(pi > 0.0)) throw std::invalid_argument("second_displacement_moment: law has zero mean count");
  return displacement_square_sum(law) / pi;
}

// (1/pi) E sum_i exp(delta |L_i|). Gaussian case uses the folded-normal
// exponential moment written with the standard normal CDF.
inline double exp_abs_moment(const OffspringLaw& law, double delta) {
  if (!(delta > 0.0) || !std::isfinite(delta))
    throw std::invalid_argument("exp_abs_moment: delta must be positive");
  if (const auto* pg = std::get_if<PoissonGaussian>(&law)) {
    // (1/lambda) * lambda * E exp(delta |L|) for one child L ~ N(mu, s^2).
    const double mu = pg->mu, s = pg->s;
    if (s == 0.0) return std::exp(delta * std::abs(mu));
    const double base = std::exp(0.5 * delta * delta * s * s);
    return base * (std::exp(delta * mu) * normal_cdf(mu / s + delta * s) +
                   std::exp(-delta * mu) * normal_cdf(-mu / s + delta * s));
  }
  const auto& ft = std::get<FiniteTable>(law);
  double s = 0.0;
  for (const auto& a : ft.atoms)
    for (double l : a.displacements) s += a.prob * std::exp(delta * std::abs(l));
  return s / mean_count(law);
}

// E_xi W_1(t)^2 for one environment state. Poisson-Gaussian in closed form,
// finite tables by exact enumeration over atoms.
inline double w1_second_moment(const OffspringLaw& law, double t) {
  detail::require_finite_t(t);
  if (const auto* pg = std::get_if<PoissonGaussian>(&law)) {
    // [EN g(2t) + EN(N-1) g(t)^2] / (lambda g(t))^2 with per-child Laplace g.
    const double log_g_t = pg->mu * t + 0.5 * pg->s * pg->s * t * t;
    const double log_g_2t = pg->mu * 2 * t + 0.5 * pg->s * pg->s * 4 * t * t;
    return std::exp(log_g_2t - std::log(pg->lambda) - 2.0 * log_g_t) + 1.0;
  }
  const auto& ft = std::get<FiniteTable>(law);
  const double log_m = log_laplace_m(law, t);
  double s = 0.0;
  for (const auto& a : ft.atoms) {
    if (a.prob == 0.0) continue;
    std::vector<double> terms;
    for (double l : a.displacements) terms.push_back(t * l);
    const double log_z1 = log_sum_exp(terms);  // -inf when the atom is childless
    s += a.prob * (log_z1 == kNegInf ? 0.0 : std::exp(2.0 * (log_z1 - log_m)));
  }
  return s;
}

// Relative displacements l -> t_star*l - log m(t_star); the rescaled law has
// m(1) = 1 for every state. Poisson-Gaussian stays in family.
inline OffspringLaw normalize(const OffspringLaw& law, double t_star) {
  detail::require_finite_t(t_star);
  const double log_m = log_laplace_m(law, t_star);
  if (!std::isfinite(log_m)) throw std::invalid_argument("normalize: m(t_star) not finite");
  if (const auto* pg = std::get_if<PoissonGaussian>(&law))
    return PoissonGaussian{pg->lambda, t_star * pg->mu - log_m, t_star * pg->s};
  FiniteTable out = std::get<FiniteTable>(law);
  for (auto& a : out.atoms)
    for (double& l : a.displacements) l = t_star * l - log_m;
  return out;
}

// Draws (N, L_1..L_N); reusable so the Gaussian spare carries across calls
// within one replicate stream.
class OffspringSampler {
 public:
  explicit OffspringSampler(const OffspringLaw& law) : law_(&law) {}

  template <class RNG>
  Offspring operator()(RNG& rng) {
    Offspring out;
    sample_children(rng, 0.0, out.displacements);
    out.count = static_cast<int>(out.displacements.size());
    return out;
  }

  // Appends parent_pos + L_i for each child; returns the child count.
  template <class RNG>
  int sample_children(RNG& rng, double parent_pos, std::vector<double>& out) {
    if (const auto* pg = std::get_if<PoissonGaussian>(law_)) {
      const int n = sample_poisson(rng, pg->lambda);
      for (int i = 0; i < n; ++i) out.push_back(parent_pos + normal_(rng, pg->mu, pg->s));
      return n;
    }
    const auto& ft = std::get<FiniteTable>(*law_);
    const double u = uniform_(rng);
    double acc = 0.0;
    const FiniteAtom* chosen = &ft.atoms.back();
    for (const auto& a : ft.atoms) {
      acc += a.prob;
      if (u < acc) {
        chosen = &a;
        break;
      }
    }
    for (double l : chosen->displacements) out.push_back(parent_pos + l);
    return static_cast<int>(chosen->displacements.size());
  }

 private:
  const OffspringLaw* law_;
  NormalSampler normal_;
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

template <class RNG>
Offspring sample_offspring(const OffspringLaw& law, RNG& rng) {
  OffspringSampler sampler(law);
  return sampler(rng);
}

// True when the law produces one fixed offspring vector (used by the exact
// lattice evaluator for degenerate models).
inline bool is_deterministic(const OffspringLaw& law) {
  const auto* ft = std::get_if<FiniteTable>(&law);
  return ft != nullptr && ft->atoms.size() == 1;
}

inline std::string law_kind(const OffspringLaw& law) {
  return std::holds_alternative<PoissonGaussian>(law) ? "poisson_gaussian" : "finite_table";
}

}  // namespace brwre
