#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

#include "brwre/analytics.hpp"
#include "brwre/environment.hpp"
#include "brwre/lattice.hpp"
#include "brwre/numerics.hpp"
#include "brwre/simulator.hpp"

namespace brwre {

struct ExperimentTable {
  std::string name;
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;
};

// Everything an experiment reports. Wall-clock is informational only and is
// never written to output files, which must regenerate bit-identically.
struct ExperimentReport {
  std::string experiment;
  std::uint64_t seed = 0;
  std::vector<ExperimentTable> tables;
  std::vector<std::pair<std::string, double>> scalars;
  std::vector<std::pair<std::string, bool>> checks;
  bool inconclusive = false;
  bool aborted = false;  // population cap or precondition refusal
  std::string abort_reason;
  double wall_seconds = 0.0;

  void scalar(const std::string& k, double v) { scalars.emplace_back(k, v); }
  void check(const std::string& k, bool v) { checks.emplace_back(k, v); }
  bool passed() const {
    if (aborted) return false;
    for (const auto& [k, v] : checks)
      if (!v) return false;
    return true;
  }
};

// Runs fn(replicate_index, engine) for every replicate. Streams depend only
// on (seed, purpose, index), so results are independent of the thread count
// and of scheduling.
template <class Fn>
void parallel_replicates(std::size_t replicates, int threads, std::uint64_t seed,
                         std::string_view purpose, Fn&& fn) {
  if (threads < 1) threads = 1;
  std::atomic<std::size_t> cursor{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&]() {
    for (;;) {
      const std::size_t r = cursor.fetch_add(1);
      if (r >= replicates) return;
      try {
        auto rng = make_stream(seed, purpose, r);
        fn(r, rng);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        cursor.store(replicates);
        return;
      }
    }
  };
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (int i = 0; i < threads; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (error) std::rethrow_exception(error);
}

namespace detail {

struct WPathResult {
  std::vector<std::vector<double>> w;  // w[n][t_index], completed generations only
  int completed = 0;                   // last generation with a value
  bool capped = false;
};

// W path per replicate, tolerating a population-cap abort: rows up to the
// last completed generation are kept.
template <class RNG>
WPathResult w_path_partial(const EnvironmentPath& path, const EnvironmentModel& model,
                           const std::vector<double>& t_grid, int n_max, std::size_t cap,
                           RNG& rng) {
  WPathResult res;
  std::vector<double> log_p(t_grid.size(), 0.0);
  try {
    evolve_stream(path, model, n_max, cap, rng, [&](const GenerationSnapshot& snap) {
      if (snap.generation > 0) {
        const auto& law = model.state(
            static_cast<std::size_t>(path.states[static_cast<std::size_t>(snap.generation - 1)]));
        for (std::size_t k = 0; k < t_grid.size(); ++k) log_p[k] += log_laplace_m(law, t_grid[k]);
      }
      std::vector<double> row(t_grid.size(), 0.0);
      for (std::size_t k = 0; k < t_grid.size(); ++k) {
        const double lz = log_partition(snap, t_grid[k]);
        row[k] = lz == kNegInf ? 0.0 : std::exp(lz - log_p[k]);
      }
      res.w.push_back(std::move(row));
    });
  } catch (const PopulationCapExceeded&) {
    res.capped = true;
  }
  res.completed = static_cast<int>(res.w.size()) - 1;
  return res;
}

inline std::pair<int, int> thirds_window(int n_max) {
  const int lo = (n_max + 2) / 3;          // ceil(n_max / 3)
  const int hi = (2 * n_max) / 3;          // floor(2 n_max / 3)
  return {lo, hi};
}

}  // namespace detail

struct MartingaleParams {
  int n_max = 10;
  std::vector<double> t_grid{-0.5, 0.0, 0.5, 1.0};
  std::size_t replicates = 10'000;
  std::size_t cap = 10'000'000;
  int threads = 1;
  // Validation fixture: scales the quenched mean P_n by bias^n so the 4*SE
  // gate can be shown to trip on a deliberately wrong normalization.
  double mutant_bias = 1.0;
};

// Checks E_xi W_n(t) = 1 cell by cell on a fixed environment path.
inline ExperimentReport run_martingale_test(const EnvironmentModel& model,
                                            const MartingaleParams& params, std::uint64_t seed) {
  ExperimentReport rep;
  rep.experiment = "martingale";
  rep.seed = seed;
  const auto t0 = std::chrono::steady_clock::now();
  const auto path = sample_env_path(model, static_cast<std::size_t>(params.n_max), seed);
  const std::size_t R = params.replicates;
  std::vector<detail::WPathResult> results(R);
  parallel_replicates(R, params.threads, seed, "martingale-tree", [&](std::size_t r, auto& rng) {
    results[r] = detail::w_path_partial(path, model, params.t_grid, params.n_max, params.cap, rng);
  });
  int completed = params.n_max;
  bool capped = false;
  for (const auto& res : results) {
    completed = std::min(completed, res.completed);
    capped = capped || res.capped;
  }
  ExperimentTable table{"cells", {"n", "t", "mean_w", "se_w", "pass"}, {}};
  bool all_pass = true;
  for (int n = 0; n <= completed; ++n) {
    const double bias = std::pow(params.mutant_bias, -n);
    for (std::size_t k = 0; k < params.t_grid.size(); ++k) {
      RunningStats stats;
      for (const auto& res : results)
        stats.add(bias * res.w[static_cast<std::size_t>(n)][k]);
      const double dev = std::abs(stats.mean() - 1.0);
      const bool pass = stats.se() > 0.0 ? dev < 4.0 * stats.se() : dev == 0.0;
      all_pass = all_pass && pass;
      table.rows.push_back({static_cast<double>(n), params.t_grid[k], stats.mean(), stats.se(),
                            pass ? 1.0 : 0.0});
    }
  }
  rep.tables.push_back(std::move(table));
  rep.scalar("n_completed", completed);
  rep.check("all_cells_within_4se", all_pass);
  if (capped) {
    rep.aborted = true;
    rep.abort_reason = "population cap exceeded; partial report up to n=" +
                       std::to_string(completed);
  }
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

struct LpRateParams {
  double p = 2.0;
  double t_star = 1.0;
  int n_max = 9;
  std::size_t replicates = 10'000;
  std::size_t cap = 10'000'000;
  int threads = 1;
  std::size_t batches = 20;  // batch-mean slope standard error
  std::vector<double> rho_factors{0.9, 1.5};  // A_hat diagnostic multiples of rho_c
};

// Theorem on the quenched L^p rate: on one fixed environment, the L^p error
// e_n = (E_xi |W_n - W|^p)^{1/p} decays like rho_c^{-n}. W is proxied by the
// largest simulated horizon; the regression window drops the last third of n
// where that proxy biases e_n downward.
inline ExperimentReport run_lp_rate(const EnvironmentModel& raw_model, const LpRateParams& params,
                                    std::uint64_t seed) {
  ExperimentReport rep;
  rep.experiment = "lp-rate";
  rep.seed = seed;
  const auto t0 = std::chrono::steady_clock::now();
  const EnvironmentModel model = normalize_at(raw_model, params.t_star);
  const double p = params.p;
  if (!(p >= 2.0)) throw std::invalid_argument("lp-rate: requires p >= 2");
  const auto interval = critical_interval(raw_model);
  if (p > 2.0 && !(p <= interval.t_plus))
    throw std::invalid_argument("lp-rate: requires p = 2 or 2 < p <= t_plus");
  const auto region = region_tests(model, 1.0);
  rep.check("moment_region_omega1", region.in_omega1_gamma2);
  const double rc = rho_c(model);
  rep.scalar("rho_c", rc);
  rep.scalar("neg_log_rho_c", -std::log(rc));

  const int N = params.n_max;
  const auto path = sample_env_path(model, static_cast<std::size_t>(N), seed);
  const std::size_t R = params.replicates;
  std::vector<std::vector<double>> w_paths(R);  // w_paths[r][n] = W_n(1)
  parallel_replicates(R, params.threads, seed, "lp-tree", [&](std::size_t r, auto& rng) {
    auto res = detail::w_path_partial(path, model, {1.0}, N, params.cap, rng);
    if (res.capped)
      throw PopulationCapExceeded(res.completed + 1, 0);
    w_paths[r].resize(res.w.size());
    for (std::size_t n = 0; n < res.w.size(); ++n) w_paths[r][n] = res.w[n][0];
  });

  // e_n = (mean_r |W_n - W_N|^p)^{1/p}.
  std::vector<double> e_p(static_cast<std::size_t>(N) + 1, 0.0);
  for (const auto& w : w_paths)
    for (int n = 0; n <= N; ++n)
      e_p[static_cast<std::size_t>(n)] +=
          std::pow(std::abs(w[static_cast<std::size_t>(n)] - w[static_cast<std::size_t>(N)]), p);
  ExperimentTable errs{"errors", {"n", "e_n"}, {}};
  std::vector<double> e_n(static_cast<std::size_t>(N) + 1, 0.0);
  for (int n = 0; n <= N; ++n) {
    e_n[static_cast<std::size_t>(n)] =
        std::pow(e_p[static_cast<std::size_t>(n)] / static_cast<double>(R), 1.0 / p);
    errs.rows.push_back({static_cast<double>(n), e_n[static_cast<std::size_t>(n)]});
  }
  rep.tables.push_back(std::move(errs));

  const auto [lo, hi] = detail::thirds_window(N);
  bool zero_error = true;
  for (int n = lo; n <= hi; ++n) zero_error = zero_error && e_n[static_cast<std::size_t>(n)] == 0.0;
  rep.check("window_nonempty", hi - lo + 1 >= 2);
  double slope = 0.0, slope_se = 0.0;
  if (!zero_error) {
    std::vector<double> xs, ys;
    for (int n = lo; n <= hi; ++n) {
      xs.push_back(static_cast<double>(n));
      ys.push_back(std::log(e_n[static_cast<std::size_t>(n)]));
    }
    slope = fit_line(xs, ys).slope;
    // Batch means for the slope SE; per-n errors share replicates, so the
    // residual-based OLS SE would be miscalibrated.
    const std::size_t B = std::min(params.batches, R);
    RunningStats batch_slopes;
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t begin = b * R / B, end = (b + 1) * R / B;
      std::vector<double> yb;
      bool usable = true;
      for (int n = lo; n <= hi; ++n) {
        double acc = 0.0;
        for (std::size_t r = begin; r < end; ++r)
          acc += std::pow(std::abs(w_paths[r][static_cast<std::size_t>(n)] -
                                   w_paths[r][static_cast<std::size_t>(N)]),
                          p);
        const double e = std::pow(acc / static_cast<double>(end - begin), 1.0 / p);
        if (e == 0.0) usable = false;
        yb.push_back(std::log(e));
      }
      if (usable) batch_slopes.add(fit_line(xs, yb).slope);
    }
    if (batch_slopes.count() >= 2) slope_se = batch_slopes.se();
  }
  rep.scalar("slope", slope);
  rep.scalar("slope_se", slope_se);
  rep.scalar("zero_error", zero_error ? 1.0 : 0.0);
  if (rc > 1.0) {
    const bool pass = zero_error || (slope < 0.0 && slope <= -std::log(rc) + 3.0 * slope_se);
    rep.check("decay_at_rate_rho_c", pass);
  } else {
    rep.scalar("no_exponential_rate_predicted", 1.0);
  }

  // A_hat(rho) diagnostic paths around rho_c.
  ExperimentTable diag{"a_hat", {"rho", "n", "median_abs_a_hat"}, {}};
  for (double factor : params.rho_factors) {
    const double rho = std::max(1.0, factor * rc);
    std::vector<std::vector<double>> abs_a(static_cast<std::size_t>(N));
    for (const auto& w : w_paths) {
      double acc = 0.0, rho_k = 1.0;
      for (int n = 0; n + 1 <= N; ++n) {
        acc += rho_k * (w[static_cast<std::size_t>(n) + 1] - w[static_cast<std::size_t>(n)]);
        rho_k *= rho;
        abs_a[static_cast<std::size_t>(n)].push_back(std::abs(acc));
      }
    }
    std::vector<double> med(static_cast<std::size_t>(N), 0.0);
    for (int n = 0; n < N; ++n)
      med[static_cast<std::size_t>(n)] = median_of(abs_a[static_cast<std::size_t>(n)]);
    for (int n = 0; n < N; ++n) diag.rows.push_back({rho, static_cast<double>(n), med[static_cast<std::size_t>(n)]});
    // Stability ratio: max median |A_hat| over the last third vs first third.
    double first = 0.0, last = 0.0;
    for (int n = 0; n < N / 3; ++n) first = std::max(first, med[static_cast<std::size_t>(n)]);
    for (int n = 2 * N / 3; n < N; ++n) last = std::max(last, med[static_cast<std::size_t>(n)]);
    const double ratio = first == 0.0 ? (last == 0.0 ? 1.0 : kPosInf) : last / first;
    rep.scalar("a_hat_ratio_rho_x" + std::to_string(factor), ratio);
  }
  rep.tables.push_back(std::move(diag));
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

struct AnnealedLpParams {
  double p = 2.0;
  double t_star = 1.0;
  int n_max = 10;
  std::size_t replicates = 10'000;
  std::size_t cap = 10'000'000;
  int threads = 1;
  double growth_ratio_threshold = 2.0;
};

// Theorem on annealed L^p convergence: E W_n^p stays bounded iff
// E m_0(p) < 1 (normalized model, i.i.d. environment). Classification
// compares last-third to first-third means of the estimated moments.
inline ExperimentReport run_annealed_lp(const EnvironmentModel& raw_model,
                                        const AnnealedLpParams& params, std::uint64_t seed) {
  ExperimentReport rep;
  rep.experiment = "annealed-lp";
  rep.seed = seed;
  const auto t0 = std::chrono::steady_clock::now();
  if (!raw_model.is_iid()) throw std::invalid_argument("annealed-lp: requires an i.i.d. environment");
  if (!(params.p > 1.0)) throw std::invalid_argument("annealed-lp: requires p > 1");
  const EnvironmentModel model = normalize_at(raw_model, params.t_star);
  double e_mp = 0.0;
  for (std::size_t i = 0; i < model.state_count(); ++i)
    e_mp += model.stationary()[i] * std::exp(log_laplace_m(model.state(i), params.p));
  rep.scalar("E_m_p", e_mp);
  if (std::abs(e_mp - 1.0) <= 1e-9) {
    rep.inconclusive = true;
    rep.scalar("boundary_case", 1.0);
    return rep;
  }
  const int N = params.n_max;
  const std::size_t R = params.replicates;
  std::vector<std::vector<double>> wp(R);
  parallel_replicates(R, params.threads, seed, "annealed-tree", [&](std::size_t r, auto& rng) {
    // Fresh environment per replicate: annealed expectation.
    const auto path = sample_env_path(model, static_cast<std::size_t>(N),
                                      derive_seed(seed, "annealed-env", r));
    auto res = detail::w_path_partial(path, model, {1.0}, N, params.cap, rng);
    if (res.capped) throw PopulationCapExceeded(res.completed + 1, 0);
    wp[r].resize(res.w.size());
    for (std::size_t n = 0; n < res.w.size(); ++n)
      wp[r][n] = std::pow(res.w[n][0], params.p);
  });
  ExperimentTable table{"moments", {"n", "mean_wp", "se"}, {}};
  std::vector<double> means(static_cast<std::size_t>(N) + 1, 0.0);
  for (int n = 0; n <= N; ++n) {
    RunningStats stats;
    for (const auto& w : wp) stats.add(w[static_cast<std::size_t>(n)]);
    means[static_cast<std::size_t>(n)] = stats.mean();
    table.rows.push_back({static_cast<double>(n), stats.mean(), stats.se()});
  }
  rep.tables.push_back(std::move(table));
  double first = 0.0, last = 0.0;
  int nf = 0, nl = 0;
  for (int n = 1; n <= N / 3; ++n) {
    first += means[static_cast<std::size_t>(n)];
    ++nf;
  }
  for (int n = (2 * N + 2) / 3; n <= N; ++n) {
    last += means[static_cast<std::size_t>(n)];
    ++nl;
  }
  const double ratio = (last / nl) / (first / nf);
  const bool growing = ratio > params.growth_ratio_threshold;
  rep.scalar("third_ratio", ratio);
  rep.scalar("classified_growing", growing ? 1.0 : 0.0);
  rep.check("classification_matches_moment_condition", growing == (e_mp > 1.0));
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

struct UniformParams {
  double k_lo = -0.3;
  double k_hi = 0.3;
  double grid_step = 0.05;
  int n_max = 16;
  std::size_t replicates = 200;
  std::size_t cap = 10'000'000;
  int threads = 1;
  double epsilon = 0.05;
};

// Uniform convergence of W_n(t) on a compact K inside I intersect Omega_1:
// the sup-distance to the proxy limit must fall below epsilon with a
// decreasing median trend.
inline ExperimentReport run_uniform_convergence(const EnvironmentModel& model,
                                                const UniformParams& params, std::uint64_t seed) {
  ExperimentReport rep;
  rep.experiment = "uniform";
  rep.seed = seed;
  const auto t0 = std::chrono::steady_clock::now();
  if (!(params.k_lo <= params.k_hi)) throw std::invalid_argument("uniform: bad interval K");
  const double mid = 0.5 * (params.k_lo + params.k_hi);
  bool region_ok = true;
  for (double t : {params.k_lo, mid, params.k_hi}) {
    const auto f = region_tests(model, t);
    region_ok = region_ok && f.in_i && f.in_omega1_gamma2;
  }
  rep.check("k_inside_verified_region", region_ok);
  if (!region_ok) {
    rep.aborted = true;
    rep.abort_reason = "K is not inside the verified region I intersect Omega_1";
    return rep;
  }
  std::vector<double> grid;
  for (double t = params.k_lo; t <= params.k_hi + 1e-12; t += params.grid_step) grid.push_back(t);
  const int N = params.n_max;
  const std::size_t R = params.replicates;
  const auto path = sample_env_path(model, static_cast<std::size_t>(N), seed);
  std::vector<std::vector<double>> d(R);  // d[r][n] = sup_t |W_n - W_N|
  parallel_replicates(R, params.threads, seed, "uniform-tree", [&](std::size_t r, auto& rng) {
    auto res = detail::w_path_partial(path, model, grid, N, params.cap, rng);
    if (res.capped) throw PopulationCapExceeded(res.completed + 1, 0);
    d[r].assign(static_cast<std::size_t>(N) + 1, 0.0);
    for (int n = 0; n <= N; ++n) {
      double sup = 0.0;
      for (std::size_t k = 0; k < grid.size(); ++k)
        sup = std::max(sup, std::abs(res.w[static_cast<std::size_t>(n)][k] -
                                     res.w[static_cast<std::size_t>(N)][k]));
      d[r][static_cast<std::size_t>(n)] = sup;
    }
  });
  ExperimentTable table{"sup_distance", {"n", "median_d"}, {}};
  std::vector<double> med(static_cast<std::size_t>(N) + 1, 0.0);
  for (int n = 0; n <= N; ++n) {
    std::vector<double> col;
    col.reserve(R);
    for (const auto& row : d) col.push_back(row[static_cast<std::size_t>(n)]);
    med[static_cast<std::size_t>(n)] = median_of(col);
    table.rows.push_back({static_cast<double>(n), med[static_cast<std::size_t>(n)]});
  }
  rep.tables.push_back(std::move(table));
  // Window [n_max/3, 3 n_max/4]: beyond that the proxy W_N pulls D_n to zero.
  const int lo = (N + 2) / 3;
  const int hi = (3 * N) / 4;
  bool decreasing = true;
  for (int n = lo; n < hi; ++n)
    decreasing = decreasing && med[static_cast<std::size_t>(n) + 1] <= med[static_cast<std::size_t>(n)];
  rep.scalar("final_median", med[static_cast<std::size_t>(hi)]);
  rep.check("median_decreasing_on_window", decreasing);
  rep.check("final_median_below_epsilon", med[static_cast<std::size_t>(hi)] < params.epsilon);
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

struct MdpMeansParams {
  double theta = 0.6;
  std::vector<double> t_grid{-1.0, -0.5, 0.5, 1.0};
  std::vector<int> n_list{100, 1000, 10'000};
  std::optional<double> tolerance;  // applied to the largest n when present
};

// Scaled quenched cumulant: Lambda_hat_n(t) = (n/a_n^2) lambda_n(a_n^2 t / n)
// with lambda_n(t) = log[P_n(t/a_n)/P_n(0)]; evaluated exactly from the
// closed-form per-state log-Laplace along one sampled environment path.
inline ExperimentReport run_mdp_quenched_means(const EnvironmentModel& model,
                                               const MdpMeansParams& params, std::uint64_t seed) {
  ExperimentReport rep;
  rep.experiment = "mdp-quenched";
  rep.seed = seed;
  const auto t0 = std::chrono::steady_clock::now();
  if (!(params.theta > 0.5 && params.theta < 1.0))
    throw std::invalid_argument("mdp: theta must lie in (1/2, 1)");
  for (std::size_t i = 0; i < model.state_count(); ++i)
    if (std::abs(displacement_sum_mean(model.state(i))) > 1e-12)
      throw std::invalid_argument("mdp-quenched: state " + std::to_string(i) +
                                  " violates E_xi sum L_i = 0");
  double worst_exp_moment = 0.0;
  for (std::size_t i = 0; i < model.state_count(); ++i)
    worst_exp_moment = std::max(worst_exp_moment, exp_abs_moment(model.state(i), 1.0));
  rep.scalar("sup_exp_abs_moment_delta1", worst_exp_moment);
  const double s2 = sigma2(model);
  rep.scalar("sigma2", s2);
  int n_top = 0;
  for (int n : params.n_list) n_top = std::max(n_top, n);
  const auto path = sample_env_path(model, static_cast<std::size_t>(n_top), seed);
  ExperimentTable table{"cumulants", {"n", "t", "cumulant", "target", "abs_dev"}, {}};
  double top_dev = 0.0;
  for (int n : params.n_list) {
    const double a_n = std::pow(static_cast<double>(n), params.theta);
    double sup_dev = 0.0;
    for (double t : params.t_grid) {
      const double u = a_n * t / static_cast<double>(n);
      double acc = 0.0;
      for (int i = 0; i < n; ++i) {
        const auto& law = model.state(static_cast<std::size_t>(path.states[static_cast<std::size_t>(i)]));
        acc += log_laplace_m(law, u) - log_laplace_m(law, 0.0);
      }
      const double cumulant = acc * static_cast<double>(n) / (a_n * a_n);
      const double target = 0.5 * s2 * t * t;
      const double dev = std::abs(cumulant - target);
      sup_dev = std::max(sup_dev, dev);
      table.rows.push_back({static_cast<double>(n), t, cumulant, target, dev});
    }
    if (n == n_top) top_dev = sup_dev;
  }
  rep.tables.push_back(std::move(table));
  rep.scalar("sup_dev_largest_n", top_dev);
  if (params.tolerance) rep.check("sup_dev_within_tolerance", top_dev <= *params.tolerance);
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

// Annealed scaled cumulants, both flavors: against sigma^2 (means normalized
// by the quenched population mean) and against tilde sigma^2 (fully annealed
// means). Exact arithmetic, no Monte Carlo.
inline ExperimentReport run_mdp_annealed_means(const EnvironmentModel& model,
                                               const MdpMeansParams& params, std::uint64_t seed) {
  ExperimentReport rep;
  rep.experiment = "mdp-annealed";
  rep.seed = seed;
  const auto t0 = std::chrono::steady_clock::now();
  if (!(params.theta > 0.5 && params.theta < 1.0))
    throw std::invalid_argument("mdp: theta must lie in (1/2, 1)");
  if (!model.is_iid()) throw std::invalid_argument("mdp-annealed: requires an i.i.d. environment");
  const auto& w = model.stationary();
  double center52 = 0.0, center53 = 0.0, s2 = 0.0, sq = 0.0, pi_mean = 0.0;
  for (std::size_t i = 0; i < model.state_count(); ++i) {
    const auto& law = model.state(i);
    center52 += w[i] * displacement_sum_mean(law) / mean_count(law);
    center53 += w[i] * displacement_sum_mean(law);
    s2 += w[i] * displacement_square_sum(law) / mean_count(law);
    sq += w[i] * displacement_square_sum(law);
    pi_mean += w[i] * mean_count(law);
  }
  if (std::abs(center52) > 1e-12)
    throw std::invalid_argument("mdp-annealed: centering E (1/pi_0) sum L_i = 0 violated");
  if (std::abs(center53) > 1e-12)
    throw std::invalid_argument("mdp-annealed: centering E sum L_i = 0 violated");
  const double tilde_s2 = sq / pi_mean;
  rep.scalar("sigma2", s2);
  rep.scalar("tilde_sigma2", tilde_s2);
  ExperimentTable table{"cumulants", {"variant", "n", "t", "cumulant", "target", "abs_dev"}, {}};
  double top_dev52 = 0.0, top_dev53 = 0.0;
  int n_top = 0;
  for (int n : params.n_list) n_top = std::max(n_top, n);
  for (int n : params.n_list) {
    const double a_n = std::pow(static_cast<double>(n), params.theta);
    for (double t : params.t_grid) {
      const double u = a_n * t / static_cast<double>(n);
      double e52 = 0.0, e53 = 0.0;
      for (std::size_t i = 0; i < model.state_count(); ++i) {
        const auto& law = model.state(i);
        e52 += w[i] * std::exp(log_laplace_m(law, u)) / mean_count(law);
        e53 += w[i] * std::exp(log_laplace_m(law, u));
      }
      const double scale = static_cast<double>(n) * static_cast<double>(n) / (a_n * a_n);
      const double c52 = scale * std::log(e52);
      const double c53 = scale * std::log(e53 / pi_mean);
      const double dev52 = std::abs(c52 - 0.5 * s2 * t * t);
      const double dev53 = std::abs(c53 - 0.5 * tilde_s2 * t * t);
      table.rows.push_back({52.0, static_cast<double>(n), t, c52, 0.5 * s2 * t * t, dev52});
      table.rows.push_back({53.0, static_cast<double>(n), t, c53, 0.5 * tilde_s2 * t * t, dev53});
      if (n == n_top) {
        top_dev52 = std::max(top_dev52, dev52);
        top_dev53 = std::max(top_dev53, dev53);
      }
    }
  }
  rep.tables.push_back(std::move(table));
  rep.scalar("sup_dev52_largest_n", top_dev52);
  rep.scalar("sup_dev53_largest_n", top_dev53);
  if (params.tolerance) {
    rep.check("dev52_within_tolerance", top_dev52 <= *params.tolerance);
    rep.check("dev53_within_tolerance", top_dev53 <= *params.tolerance);
  }
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

struct MdpPopulationParams {
  double theta = 0.6;
  double a = 1.0;
  double b = 2.0;
  std::vector<int> n_list{12, 24, 36};
  std::size_t replicates = 200;
  std::size_t cap = 10'000'000;
  int threads = 1;
  double relative_tolerance = 0.30;
  double zero_target_tolerance = 0.10;  // absolute band when the target is 0
};

// Population moderate deviations: Y_n = (n/a_n^2) log(Z_n(a_n A)/Z_n(R))
// against -inf_{x in A^o} x^2 / (2 sigma^2). Deterministic models evaluate
// exactly on the lattice; random models are simulated under the cap.
inline ExperimentReport run_mdp_population(const EnvironmentModel& model,
                                           const MdpPopulationParams& params, std::uint64_t seed) {
  ExperimentReport rep;
  rep.experiment = "mdp-population";
  rep.seed = seed;
  const auto t0 = std::chrono::steady_clock::now();
  if (!(params.theta > 0.5 && params.theta < 1.0))
    throw std::invalid_argument("mdp: theta must lie in (1/2, 1)");
  if (!(params.a <= params.b)) throw std::invalid_argument("mdp-population: requires a <= b");
  for (const auto& law : model.states()) {
    const auto* ft = std::get_if<FiniteTable>(&law);
    bool survives = ft != nullptr;
    if (ft)
      for (const auto& atom : ft->atoms)
        if (atom.prob > 0.0 && atom.displacements.empty()) survives = false;
    if (!survives)
      throw std::invalid_argument(
          "mdp-population: extinction-capable law refused (needs P(N >= 1) = 1)");
  }
  if (!region_tests(model, 0.0).in_omega1_gamma2)
    throw std::invalid_argument("mdp-population: 0 must lie in Omega_1");
  const double s2 = sigma2(model);
  rep.scalar("sigma2", s2);
  double inf_sq = 0.0;
  if (params.a > 0.0)
    inf_sq = params.a * params.a;
  else if (params.b < 0.0)
    inf_sq = params.b * params.b;
  const double target = -inf_sq / (2.0 * s2);
  rep.scalar("target", target);

  std::vector<int> n_list = params.n_list;
  std::sort(n_list.begin(), n_list.end());
  const int n_top = n_list.back();
  ExperimentTable table{"medians", {"n", "median_y", "target", "frac_empty"}, {}};
  std::vector<double> medians;
  const bool exact = is_deterministic_model(model);
  rep.scalar("exact_lattice", exact ? 1.0 : 0.0);
  if (exact) {
    DeterministicLattice lattice(model);
    const auto path = sample_env_path(model, static_cast<std::size_t>(n_top), seed);
    for (int n : n_list) {
      const double a_n = std::pow(static_cast<double>(n), params.theta);
      const auto pop = lattice.generation(path, n);
      const double log_frac = pop.log_interval_fraction(a_n * params.a, a_n * params.b);
      const double y = log_frac == kNegInf
                           ? kNegInf
                           : log_frac * static_cast<double>(n) / (a_n * a_n);
      medians.push_back(y);
      table.rows.push_back({static_cast<double>(n), y, target, log_frac == kNegInf ? 1.0 : 0.0});
    }
  } else {
    const auto path = sample_env_path(model, static_cast<std::size_t>(n_top), seed);
    const std::size_t R = params.replicates;
    std::vector<std::vector<double>> ys(n_list.size());
    for (auto& v : ys) v.assign(R, kNegInf);
    parallel_replicates(R, params.threads, seed, "mdp-tree", [&](std::size_t r, auto& rng) {
      evolve_stream(path, model, n_top, params.cap, rng, [&](const GenerationSnapshot& snap) {
        for (std::size_t j = 0; j < n_list.size(); ++j) {
          const int n = n_list[j];
          if (snap.generation != n || n == 0) continue;
          const double a_n = std::pow(static_cast<double>(n), params.theta);
          const std::size_t inside =
              count_in_interval(snap, a_n * params.a, a_n * params.b);
          if (inside == 0 || snap.positions.empty()) continue;  // stays -inf
          const double y = (std::log(static_cast<double>(inside)) -
                            std::log(static_cast<double>(snap.positions.size()))) *
                           static_cast<double>(n) / (a_n * a_n);
          ys[j][r] = y;
        }
      });
    });
    for (std::size_t j = 0; j < n_list.size(); ++j) {
      std::size_t empties = 0;
      for (double y : ys[j])
        if (y == kNegInf) ++empties;
      const double med = median_of(ys[j]);
      medians.push_back(med);
      table.rows.push_back({static_cast<double>(n_list[j]), med, target,
                            static_cast<double>(empties) / static_cast<double>(R)});
    }
  }
  rep.tables.push_back(std::move(table));
  const double final_median = medians.back();
  rep.scalar("final_median", final_median);
  bool band;
  if (target == 0.0)
    band = std::abs(final_median) <= params.zero_target_tolerance;
  else
    band = std::abs(final_median - target) <= params.relative_tolerance * std::abs(target);
  rep.check("final_median_within_band", band);
  bool trend = medians.size() >= 2;
  const std::size_t m = medians.size();
  for (std::size_t j = m >= 3 ? m - 3 : 0; j + 1 < m; ++j)
    trend = trend && std::abs(medians[j + 1] - target) <= std::abs(medians[j] - target);
  rep.check("monotone_trend_toward_target", trend);
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

struct URecursionParams {
  double t = 1.0;
  double t_star = 1.0;   // recursion is run on the model normalized here
  double s = 0.0;
  double r = 3.0;
  int n_max = 5;
  std::size_t replicates = 100'000;
  std::size_t cap = 10'000'000;
  int threads = 1;
  std::size_t mc_factor_draws = 1'000'000;
};

// Recursive moment inequality for U_n(s, r) = E P_n(t)^s W_n(t)^r:
// U_n^{1/(r-1)} <= [E m_0(t)^{s-r} m_0(t r)]^{1/(r-1)} U_{n-1}(s, r)^{1/(r-1)}
//                + [E m_0(t)^s W_1(t)^r]^{1/(r-1)} U_{n-1}(s, r-1)^{1/(r-1)}.
inline ExperimentReport run_u_recursion_check(const EnvironmentModel& raw_model,
                                              const URecursionParams& params, std::uint64_t seed) {
  ExperimentReport rep;
  rep.experiment = "u-check";
  rep.seed = seed;
  const auto t0 = std::chrono::steady_clock::now();
  if (!(params.r > 2.0)) throw std::invalid_argument("u-check: requires r > 2");
  if (!raw_model.is_iid()) throw std::invalid_argument("u-check: requires an i.i.d. environment");
  const EnvironmentModel model = normalize_at(raw_model, params.t_star);
  const double t = params.t, s = params.s, r = params.r;
  const auto& w = model.stationary();

  double factor_a = 0.0;  // E m_0(t)^{s-r} m_0(t r)
  for (std::size_t i = 0; i < model.state_count(); ++i)
    factor_a += w[i] * std::exp((s - r) * log_laplace_m(model.state(i), t) +
                                log_laplace_m(model.state(i), t * r));
  double factor_b = 0.0;  // E m_0(t)^s W_1(t)^r
  bool factor_b_exact = true;
  for (std::size_t i = 0; i < model.state_count(); ++i) {
    const auto& law = model.state(i);
    const double log_m = log_laplace_m(law, t);
    if (const auto* ft = std::get_if<FiniteTable>(&law)) {
      double e = 0.0;
      for (const auto& atom : ft->atoms) {
        std::vector<double> terms;
        for (double l : atom.displacements) terms.push_back(t * l);
        const double lz = log_sum_exp(terms);
        e += atom.prob * (lz == kNegInf ? 0.0 : std::exp(r * (lz - log_m)));
      }
      factor_b += w[i] * std::exp(s * log_m) * e;
    } else {
      factor_b_exact = false;
      auto rng = make_stream(seed, "u-factor", i);
      OffspringSampler sampler(law);
      RunningStats stats;
      std::vector<double> kids;
      for (std::size_t d = 0; d < params.mc_factor_draws; ++d) {
        kids.clear();
        sampler.sample_children(rng, 0.0, kids);
        const double lz = log_sum_exp_scaled(kids, t);
        stats.add(lz == kNegInf ? 0.0 : std::exp(r * (lz - log_m)));
      }
      factor_b += w[i] * std::exp(s * log_m) * stats.mean();
    }
  }
  rep.scalar("factor_a", factor_a);
  rep.scalar("factor_b", factor_b);
  rep.scalar("factor_b_exact", factor_b_exact ? 1.0 : 0.0);

  const int N = params.n_max;
  const std::size_t R = params.replicates;
  // Per replicate and generation: P_n^s W_n^r and P_n^s W_n^{r-1}.
  std::vector<std::vector<double>> ur(static_cast<std::size_t>(N) + 1),
      ur1(static_cast<std::size_t>(N) + 1);
  for (auto& v : ur) v.assign(R, 0.0);
  for (auto& v : ur1) v.assign(R, 0.0);
  parallel_replicates(R, params.threads, seed, "u-tree", [&](std::size_t rr, auto& rng) {
    const auto path = sample_env_path(model, static_cast<std::size_t>(N),
                                      derive_seed(seed, "u-env", rr));
    std::vector<double> log_p(static_cast<std::size_t>(N) + 1, 0.0);
    for (int n = 1; n <= N; ++n)
      log_p[static_cast<std::size_t>(n)] = log_quenched_mean(path, model, n, t);
    evolve_stream(path, model, N, params.cap, rng, [&](const GenerationSnapshot& snap) {
      const int n = snap.generation;
      const double lz = log_partition(snap, t);
      const double lw = lz == kNegInf ? kNegInf : lz - log_p[static_cast<std::size_t>(n)];
      const double ps = s * log_p[static_cast<std::size_t>(n)];
      ur[static_cast<std::size_t>(n)][rr] = lw == kNegInf ? 0.0 : std::exp(ps + r * lw);
      ur1[static_cast<std::size_t>(n)][rr] = lw == kNegInf ? 0.0 : std::exp(ps + (r - 1.0) * lw);
    });
  });
  ExperimentTable table{"inequality",
                        {"n", "lhs", "rhs", "se_lhs", "se_rhs", "pass", "rel_se"},
                        {}};
  const double q = 1.0 / (r - 1.0);
  bool all_pass = true;
  bool conclusive = true;
  std::vector<MeanSE> u_r(static_cast<std::size_t>(N) + 1), u_r1(static_cast<std::size_t>(N) + 1);
  for (int n = 0; n <= N; ++n) {
    u_r[static_cast<std::size_t>(n)] = mean_se(ur[static_cast<std::size_t>(n)]);
    u_r1[static_cast<std::size_t>(n)] = mean_se(ur1[static_cast<std::size_t>(n)]);
  }
  for (int n = 1; n <= N; ++n) {
    const auto& un = u_r[static_cast<std::size_t>(n)];
    const auto& up = u_r[static_cast<std::size_t>(n) - 1];
    const auto& up1 = u_r1[static_cast<std::size_t>(n) - 1];
    const double lhs = std::pow(un.mean, q);
    const double rhs = std::pow(factor_a, q) * std::pow(up.mean, q) +
                       std::pow(factor_b, q) * std::pow(up1.mean, q);
    // Delta-method SEs, combined conservatively (the two sides share draws).
    const double se_lhs = un.mean > 0.0 ? q * std::pow(un.mean, q - 1.0) * un.se : 0.0;
    const double se_rhs = std::sqrt(
        std::pow(std::pow(factor_a, q) * (up.mean > 0 ? q * std::pow(up.mean, q - 1.0) * up.se : 0.0), 2) +
        std::pow(std::pow(factor_b, q) * (up1.mean > 0 ? q * std::pow(up1.mean, q - 1.0) * up1.se : 0.0), 2));
    const double rel_se = un.mean > 0.0 ? un.se / un.mean : 0.0;
    if (rel_se > 0.2) conclusive = false;
    const bool pass = lhs <= rhs + 2.0 * std::sqrt(se_lhs * se_lhs + se_rhs * se_rhs);
    all_pass = all_pass && pass;
    table.rows.push_back({static_cast<double>(n), lhs, rhs, se_lhs, se_rhs, pass ? 1.0 : 0.0,
                          rel_se});
  }
  rep.tables.push_back(std::move(table));
  rep.check("inequality_holds_all_n", all_pass);
  rep.inconclusive = !conclusive;
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace brwre
