#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "brwre/environment.hpp"
#include "brwre/numerics.hpp"
#include "brwre/offspring_law.hpp"

namespace brwre {

// Lambda(t) = E log m_0(t), averaged over the stationary law of xi_0.
inline double lambda_fn(const EnvironmentModel& model, double t) {
  double acc = 0.0;
  for (std::size_t i = 0; i < model.state_count(); ++i)
    acc += model.stationary()[i] * log_laplace_m(model.state(i), t);
  return acc;
}

// Lambda'(t) = E m_0'(t)/m_0(t).
inline double lambda_prime(const EnvironmentModel& model, double t) {
  double acc = 0.0;
  for (std::size_t i = 0; i < model.state_count(); ++i)
    acc += model.stationary()[i] * m_log_derivative(model.state(i), t);
  return acc;
}

struct CriticalInterval {
  double t_minus = kNegInf;
  double t_plus = kPosInf;
  bool minus_unbounded = false;  // g < 0 on the whole searched half-range
  bool plus_unbounded = false;

  bool contains(double t) const { return t > t_minus && t < t_plus; }
};

// Roots of g(t) = t Lambda'(t) - Lambda(t) on both sides of zero. g is
// increasing in |t| (Lambda is convex), so a sign change brackets the root.
inline CriticalInterval critical_interval(const EnvironmentModel& model,
                                          double search_bound = 50.0) {
  if (!(search_bound > 0.0)) throw std::invalid_argument("critical_interval: bound must be > 0");
  if (!(lambda_fn(model, 0.0) > 0.0))
    throw std::invalid_argument("critical_interval: model must be supercritical (Lambda(0) > 0)");
  const auto g = [&](double t) { return t * lambda_prime(model, t) - lambda_fn(model, t); };
  const auto bisect = [&](double lo, double hi) {
    // g(lo) < 0 <= g(hi) or mirrored; bisection to |hi - lo| <= 1e-9.
    while (hi - lo > 1e-9) {
      const double mid = 0.5 * (lo + hi);
      if (g(mid) <= 0.0)
        lo = mid;
      else
        hi = mid;
    }
    return 0.5 * (lo + hi);
  };
  CriticalInterval out;
  if (g(search_bound) <= 0.0) {
    out.plus_unbounded = true;
    out.t_plus = kPosInf;
  } else {
    out.t_plus = bisect(0.0, search_bound);
  }
  if (g(-search_bound) <= 0.0) {
    out.minus_unbounded = true;
    out.t_minus = kNegInf;
  } else {
    double lo = -search_bound, hi = 0.0;
    while (hi - lo > 1e-9) {
      const double mid = 0.5 * (lo + hi);
      if (g(mid) <= 0.0)
        hi = mid;
      else
        lo = mid;
    }
    out.t_minus = 0.5 * (lo + hi);
  }
  return out;
}

namespace detail {
inline void require_normalized(const EnvironmentModel& model, const char* who) {
  if (!is_normalized(model))
    throw std::invalid_argument(std::string(who) + ": model must satisfy m(1) = 1 per state");
}
}  // namespace detail

// Critical rate for quenched L^p convergence: exp(-Lambda(2)/2) of the
// normalized model.
inline double rho_c(const EnvironmentModel& model) {
  detail::require_normalized(model, "rho_c");
  return std::exp(-0.5 * lambda_fn(model, 2.0));
}

// Critical rate for annealed L^p convergence (i.i.d. environments only):
// min{ (E m_0(p))^{-1/p}, (E m_0(2)^{p/2})^{-1/p} }.
inline double rho_0(const EnvironmentModel& model, double p) {
  detail::require_normalized(model, "rho_0");
  if (!model.is_iid()) throw std::invalid_argument("rho_0: requires an i.i.d. environment");
  if (!(p >= 2.0)) throw std::invalid_argument("rho_0: requires p >= 2");
  double e_mp = 0.0, e_m2 = 0.0;
  for (std::size_t i = 0; i < model.state_count(); ++i) {
    const double w = model.stationary()[i];
    e_mp += w * std::exp(log_laplace_m(model.state(i), p));
    e_m2 += w * std::exp(0.5 * p * log_laplace_m(model.state(i), 2.0));
  }
  return std::min(std::pow(e_mp, -1.0 / p), std::pow(e_m2, -1.0 / p));
}

struct RegionFlags {
  bool in_i = false;
  bool in_i_prime = false;
  bool in_omega1_gamma2 = false;
  bool in_omega2 = false;
};

// gamma grid for the "some gamma > 1" scans, dense near 1 where the witness
// lives for t inside the critical interval.
inline const std::vector<double>& gamma_scan_grid() {
  static const std::vector<double> grid{1.01, 1.05, 1.1, 1.25, 1.5, 2.0};
  return grid;
}

inline RegionFlags region_tests(const EnvironmentModel& model, double t) {
  RegionFlags f;
  if (lambda_fn(model, 0.0) > 0.0) {
    const auto ci = critical_interval(model);
    f.in_i = ci.contains(t);
  }
  for (double gamma : gamma_scan_grid()) {
    double e = 0.0;
    for (std::size_t i = 0; i < model.state_count(); ++i)
      e += model.stationary()[i] * std::exp(log_laplace_m(model.state(i), gamma * t) -
                                            gamma * log_laplace_m(model.state(i), t));
    if (e < 1.0) {
      f.in_i_prime = true;
      break;
    }
  }
  // Omega_1 probed at gamma = 2: E log E_xi W_1(t)^2 finite. Both families
  // keep every m(t) finite, so this reduces to finiteness of the per-state
  // second moments.
  f.in_omega1_gamma2 = true;
  for (std::size_t i = 0; i < model.state_count(); ++i) {
    const double w2 = w1_second_moment(model.state(i), t);
    if (!std::isfinite(w2) || !(w2 > 0.0)) f.in_omega1_gamma2 = false;
  }
  // Omega_2: E Ztilde_1(t) log+ Ztilde_1(t) < infty. For Poisson-Gaussian,
  // Ztilde_1(t) has all moments (Poisson count, lognormal marks); for finite
  // tables it is bounded. Finite m in a neighborhood settles it per family.
  f.in_omega2 = std::isfinite(log_laplace_m(model.state(0), t));
  for (std::size_t i = 0; i < model.state_count(); ++i)
    if (!std::isfinite(log_laplace_m(model.state(i), t))) f.in_omega2 = false;
  return f;
}

// sigma^2 = E[(1/pi_0) sum_i L_i^2]; requires per-state centering
// E_xi sum_i L_i = 0 (a.s. in the theorem, i.e. for every state).
inline double sigma2(const EnvironmentModel& model) {
  for (std::size_t i = 0; i < model.state_count(); ++i) {
    if (std::abs(displacement_sum_mean(model.state(i))) > 1e-12)
      throw std::invalid_argument("sigma2: state " + std::to_string(i) +
                                  " violates E_xi sum L_i = 0");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < model.state_count(); ++i)
    acc += model.stationary()[i] * displacement_square_sum(model.state(i)) /
           mean_count(model.state(i));
  return acc;
}

// tilde sigma^2 = E[sum_i L_i^2] / E m_0; requires annealed centering
// E sum_i L_i = 0.
inline double tilde_sigma2(const EnvironmentModel& model) {
  double sum_mean = 0.0, sq = 0.0, pi = 0.0;
  for (std::size_t i = 0; i < model.state_count(); ++i) {
    const double w = model.stationary()[i];
    sum_mean += w * displacement_sum_mean(model.state(i));
    sq += w * displacement_square_sum(model.state(i));
    pi += w * mean_count(model.state(i));
  }
  if (std::abs(sum_mean) > 1e-12)
    throw std::invalid_argument("tilde_sigma2: annealed centering E sum L_i = 0 violated");
  return sq / pi;
}

// Discrete Legendre transform of samples (t_k, v_k): x -> sup_k (t_k x - v_k).
class LegendreTransform {
 public:
  LegendreTransform(std::vector<double> t, std::vector<double> v, bool convexity_warning)
      : t_(std::move(t)), v_(std::move(v)), warning_(convexity_warning) {}

  double operator()(double x) const {
    double best = kNegInf;
    for (std::size_t k = 0; k < t_.size(); ++k) best = std::max(best, t_[k] * x - v_[k]);
    return best;
  }
  bool convexity_warning() const { return warning_; }

 private:
  std::vector<double> t_;
  std::vector<double> v_;
  bool warning_;
};

inline LegendreTransform legendre(const std::vector<std::pair<double, double>>& samples,
                                  double convexity_tol = 1e-9) {
  if (samples.size() < 3) throw std::invalid_argument("legendre: needs at least 3 samples");
  std::vector<double> t, v;
  t.reserve(samples.size());
  v.reserve(samples.size());
  auto sorted = samples;
  std::sort(sorted.begin(), sorted.end());
  for (const auto& [a, b] : sorted) {
    t.push_back(a);
    v.push_back(b);
  }
  if (std::abs(t.front() + t.back()) > 1e-9)
    throw std::invalid_argument("legendre: grid must be symmetric about 0");
  bool warn = false;
  for (std::size_t k = 1; k + 1 < t.size(); ++k) {
    // Midpoint convexity on (possibly uneven) adjacent triples.
    const double lam = (t[k + 1] - t[k]) / (t[k + 1] - t[k - 1]);
    if (v[k] > lam * v[k - 1] + (1.0 - lam) * v[k + 1] + convexity_tol) warn = true;
  }
  return LegendreTransform(std::move(t), std::move(v), warn);
}

struct ConvexityReport {
  bool convex = true;
  double max_violation = 0.0;  // max log f(mid) - (log f(x1)+log f(x2))/2 over triples
};

// Midpoint log-convexity of f(x) = E m_0(t)^x m_0(alpha + beta x) on x_grid.
inline ConvexityReport log_convexity_check(const EnvironmentModel& model, double t, double alpha,
                                           double beta, const std::vector<double>& x_grid,
                                           double tol = 1e-10) {
  if (x_grid.size() < 3) throw std::invalid_argument("log_convexity_check: grid too small");
  auto log_f = [&](double x) {
    std::vector<double> terms;
    terms.reserve(model.state_count());
    for (std::size_t i = 0; i < model.state_count(); ++i) {
      const auto& law = model.state(i);
      terms.push_back(std::log(model.stationary()[i]) + x * log_laplace_m(law, t) +
                      log_laplace_m(law, alpha + beta * x));
    }
    return log_sum_exp(terms);
  };
  auto grid = x_grid;
  std::sort(grid.begin(), grid.end());
  ConvexityReport rep;
  for (std::size_t k = 0; k + 2 < grid.size(); ++k) {
    const double mid = 0.5 * (grid[k] + grid[k + 2]);
    const double gap = log_f(mid) - 0.5 * (log_f(grid[k]) + log_f(grid[k + 2]));
    rep.max_violation = std::max(rep.max_violation, gap);
    if (gap > tol) rep.convex = false;
  }
  return rep;
}

// Analytic critical quantities plus region flags over a t grid.
struct RateReport {
  CriticalInterval interval;
  double rho_c_value = 0.0;
  std::map<double, double> rho_0_by_p;
  double sigma2_value = std::numeric_limits<double>::quiet_NaN();
  double tilde_sigma2_value = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> t_grid;
  std::vector<RegionFlags> flags;
};

inline RateReport build_rate_report(const EnvironmentModel& model, double t_star,
                                    const std::vector<double>& t_grid,
                                    const std::vector<double>& p_list) {
  RateReport rep;
  rep.interval = critical_interval(model);
  const EnvironmentModel normalized = normalize_at(model, t_star);
  rep.rho_c_value = rho_c(normalized);
  if (model.is_iid())
    for (double p : p_list) rep.rho_0_by_p[p] = rho_0(normalized, p);
  try {
    rep.sigma2_value = sigma2(model);
  } catch (const std::invalid_argument&) {
  }
  try {
    rep.tilde_sigma2_value = tilde_sigma2(model);
  } catch (const std::invalid_argument&) {
  }
  rep.t_grid = t_grid;
  for (double t : t_grid) rep.flags.push_back(region_tests(model, t));
  return rep;
}

}  // namespace brwre
