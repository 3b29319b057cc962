#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "omt/errors.hpp"
#include "omt/locfdr.hpp"
#include "omt/math.hpp"
#include "omt/model.hpp"
#include "omt/parallel.hpp"
#include "omt/rng.hpp"

namespace omt {

// ---------------------------------------------------------------------------
// Error criteria
// ---------------------------------------------------------------------------

enum class Criterion { fdr, pfdr, mfdr };

inline const char* to_string(Criterion c) {
  switch (c) {
    case Criterion::fdr: return "fdr";
    case Criterion::pfdr: return "pfdr";
    case Criterion::mfdr: return "mfdr";
  }
  return "?";
}

inline Criterion criterion_from_string(const std::string& s) {
  if (s == "fdr") return Criterion::fdr;
  if (s == "pfdr") return Criterion::pfdr;
  if (s == "mfdr") return Criterion::mfdr;
  throw ConfigError("unknown criterion '" + s + "' (expected fdr, pfdr, or mfdr)");
}

// ---------------------------------------------------------------------------
// Rejection-count linearization
//
// For a fixed vector t of posterior null probabilities sorted ascending,
// rejecting the l smallest statistics earns sum_{k<=l} a_k expected true
// positives and spends sum_{k<=l} b_k of the error budget c_err, where
//   a_k = 1 - t_(k)
//   b_1 = t_(1)           (fdr)   or   t_(1) - alpha   (pfdr)
//   b_k = (t_(k) - mean(t_(1..k-1))) / k        for k >= 2
//   c_err = alpha (fdr) or 0 (pfdr).
// The prefix sums telescope: sum_{k<=l} b_k = mean(t_(1..l)) - (pfdr ? alpha : 0).
// ---------------------------------------------------------------------------

struct CriterionCoefficients {
  std::vector<double> a;  // a[k-1] for k = 1..K
  std::vector<double> b;  // b[k-1] for k = 1..K
  double c_err = 0.0;
};

inline CriterionCoefficients coefficients(std::span<const double> t_sorted,
                                          Criterion crit, double alpha) {
  if (crit == Criterion::mfdr)
    throw ConfigError("the mfdr criterion is enforced by a threshold policy, "
                      "not by the rejection-count linearization");
  if (!(alpha > 0.0 && alpha < 1.0))
    throw ConfigError("alpha must lie strictly between 0 and 1");
  const std::size_t k = t_sorted.size();
  if (k == 0) throw DataError("empty statistic vector");
  CriterionCoefficients out;
  out.a.resize(k);
  out.b.resize(k);
  out.c_err = (crit == Criterion::fdr) ? alpha : 0.0;
  double prefix = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    const double t = t_sorted[i];
    out.a[i] = 1.0 - t;
    if (i == 0) {
      out.b[i] = (crit == Criterion::pfdr) ? t - alpha : t;
    } else {
      out.b[i] = (t - prefix / static_cast<double>(i)) / static_cast<double>(i + 1);
    }
    prefix += t;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Step-down decision rule for a fixed multiplier mu
//
// With r_k = a_k - mu * b_k, hypothesis k (in ascending statistic order) is
// rejected iff all of 1..k-1 are rejected and some partial sum
// sum_{i=k}^{l} r_i is strictly positive.  m_k = max(0, m_{k+1} + r_k) is the
// largest nonnegative partial sum starting at k, so the existence test is
// simply m_k > 0 and the rejections form a prefix of the sorted order.
// ---------------------------------------------------------------------------

struct StepDownTrace {
  std::vector<double> r;  // r[k-1] = a_k - mu * b_k
  std::vector<double> m;  // m[k-1] = max(0, max_l sum_{i=k}^{l} r_i)
  std::vector<int> d;     // decisions in ascending-statistic order (prefix of ones)
  int n_rejected = 0;
};

inline StepDownTrace step_down_decide(std::span<const double> t_sorted, double mu,
                                      Criterion crit, double alpha) {
  const CriterionCoefficients cf = coefficients(t_sorted, crit, alpha);
  const std::size_t k = t_sorted.size();
  StepDownTrace tr;
  tr.r.resize(k);
  tr.m.resize(k);
  tr.d.assign(k, 0);
  for (std::size_t i = 0; i < k; ++i) tr.r[i] = cf.a[i] - mu * cf.b[i];
  double run = 0.0;
  for (std::size_t i = k; i-- > 0;) {
    run = std::max(0.0, run + tr.r[i]);
    tr.m[i] = run;
  }
  bool alive = true;
  for (std::size_t i = 0; i < k && alive; ++i) {
    alive = tr.m[i] > 0.0;
    if (alive) {
      tr.d[i] = 1;
      ++tr.n_rejected;
    }
  }
  return tr;
}

// Same decisions computed straight from the definition: walk the partial sums
// sum_{i=k}^{l} r_i for every k.  Quadratic; kept as a reference
// implementation for cross-checking the linear-time recursion.
inline std::vector<int> step_down_decide_naive(std::span<const double> t_sorted,
                                               double mu, Criterion crit,
                                               double alpha) {
  const CriterionCoefficients cf = coefficients(t_sorted, crit, alpha);
  const std::size_t k = t_sorted.size();
  std::vector<double> r(k);
  for (std::size_t i = 0; i < k; ++i) r[i] = cf.a[i] - mu * cf.b[i];
  std::vector<int> d(k, 0);
  bool alive = true;
  for (std::size_t i = 0; i < k && alive; ++i) {
    bool positive = false;
    double s = 0.0;
    for (std::size_t l = i; l < k; ++l) {
      s += r[l];
      if (s > 0.0) {
        positive = true;
        break;
      }
    }
    alive = positive;
    if (alive) d[i] = 1;
  }
  return d;
}

// Number of rejections only, without materializing the trace.
inline int step_down_count(std::span<const double> t_sorted, double mu,
                           Criterion crit, double alpha) {
  const CriterionCoefficients cf = coefficients(t_sorted, crit, alpha);
  const std::size_t k = t_sorted.size();
  double run = 0.0;
  std::size_t first_nonpos = k;  // smallest k with m_k <= 0
  for (std::size_t i = k; i-- > 0;) {
    run = std::max(0.0, run + cf.a[i] - mu * cf.b[i]);
    if (!(run > 0.0)) first_nonpos = i;
  }
  return static_cast<int>(first_nonpos);
}

// Budget spent by a decision vector (ascending-statistic order): sum d_k b_k.
inline double constraint_value(std::span<const double> t_sorted,
                               std::span<const int> d_sorted, Criterion crit,
                               double alpha) {
  if (d_sorted.size() != t_sorted.size())
    throw DataError("decision vector length does not match statistic vector");
  const CriterionCoefficients cf = coefficients(t_sorted, crit, alpha);
  double s = 0.0;
  for (std::size_t i = 0; i < t_sorted.size(); ++i)
    if (d_sorted[i]) s += cf.b[i];
  return s;
}

// ---------------------------------------------------------------------------
// Per-draw breakpoint representation used by the calibration loop
//
// For one draw with sorted statistics, the step-down rejection count as a
// function of mu is a nonincreasing step function.  Writing
//   A_l = sum_{k<=l} a_k = l - S_l,   B_l = sum_{k<=l} b_k = S_l / l - c,
// (S_l the prefix sum of sorted statistics, c = alpha for pfdr else 0, and
// A_0 = B_0 = 0), hypothesis k is rejected at mu iff 1..k-1 are and
//   mu < mu_bar_k = max_{l >= k} (A_l - A_{k-1}) / (B_l - B_{k-1}),
// strictly, with slope +inf when the denominator vanishes but the numerator
// is positive.  nu_l = min_{k<=l} mu_bar_k is nonincreasing, and the count at
// mu is #{l : nu_l > mu}, found by binary search.  The suffix max-slopes are
// computed in O(K log K) with an upper convex hull grown right to left.
// ---------------------------------------------------------------------------

namespace detail {

// mu_bar[k-1] = max_{l >= k} slope(P_{k-1} -> P_l) for points P_l = (x[l], y[l]),
// l = 0..K, with x nondecreasing over l >= 1 (x[0] = 0 may exceed x[1]).
inline void suffix_max_slopes(std::span<const double> x, std::span<const double> y,
                              std::span<double> mu_bar) {
  const std::size_t n = x.size();  // K + 1
  const std::size_t kk = n - 1;
  auto slope = [&](std::size_t l, double xq, double yq) -> double {
    const double dx = x[l] - xq;
    const double dy = y[l] - yq;
    if (dx > 0.0) return dy / dx;
    if (dy > 0.0) return kInf;
    return kNegInf;
  };
  // Hull points stored right to left (nonincreasing x); hull.back() is the
  // current leftmost vertex.
  std::vector<std::uint32_t> hull;
  hull.reserve(n);
  for (std::size_t k = kk; k >= 1; --k) {
    // Insert P_k.  Points sharing an x keep only the highest y.
    if (!hull.empty() && !(x[hull.back()] > x[k])) {
      if (y[hull.back()] <= y[k]) hull.pop_back();
    }
    if (hull.empty() || x[hull.back()] > x[k] || y[hull.back()] <= y[k]) {
      while (hull.size() >= 2) {
        const std::size_t m = hull[hull.size() - 1];
        const std::size_t rgt = hull[hull.size() - 2];
        const double cross = (x[m] - x[k]) * (y[rgt] - y[k]) -
                             (y[m] - y[k]) * (x[rgt] - x[k]);
        if (cross >= 0.0)
          hull.pop_back();  // middle vertex not strictly above the new chord
        else
          break;
      }
      hull.push_back(static_cast<std::uint32_t>(k));
    }
    // Query from P_{k-1}.
    const double xq = x[k - 1];
    const double yq = y[k - 1];
    if (k == 1 && x[1] < x[0]) {
      // Possible only when b_1 < 0 (pfdr with t_(1) < alpha): the partial sum
      // a_1 - mu b_1 grows with mu, so the first hypothesis is always
      // rejected.
      mu_bar[0] = kInf;
      continue;
    }
    const std::size_t h = hull.size();
    std::size_t lo = 0, hi = h - 1;  // left-to-right hull index
    while (lo < hi) {
      const std::size_t mid = (lo + hi) / 2;
      const double s_mid = slope(hull[h - 1 - mid], xq, yq);
      const double s_next = slope(hull[h - 2 - mid], xq, yq);
      if (s_next >= s_mid)
        lo = mid + 1;
      else
        hi = mid;
    }
    mu_bar[k - 1] = slope(hull[h - 1 - lo], xq, yq);
  }
}

// Quadratic reference for the same quantity, used in tests.
inline void suffix_max_slopes_naive(std::span<const double> x,
                                    std::span<const double> y,
                                    std::span<double> mu_bar) {
  const std::size_t n = x.size();
  for (std::size_t k = 1; k < n; ++k) {
    double best = kNegInf;
    for (std::size_t l = k; l < n; ++l) {
      const double dx = x[l] - x[k - 1];
      const double dy = y[l] - y[k - 1];
      double s;
      if (dx > 0.0)
        s = dy / dx;
      else if (dy > 0.0)
        s = kInf;
      else
        s = kNegInf;
      best = std::max(best, s);
    }
    mu_bar[k - 1] = best;
  }
}

// Compact per-draw summary: rejection-count breakpoints and the running
// posterior false-discovery proportion of each rejection prefix.
struct CalibDraw {
  std::vector<float> nu;   // nu[l-1], l = 1..K, nonincreasing
  std::vector<float> fdp;  // fdp[l], l = 0..K; mean of the l smallest
                           // eval statistics taken in decide order
};

inline CalibDraw make_calib_draw(std::span<const double> decide_stat,
                                 std::span<const double> eval_stat,
                                 Criterion crit, double alpha) {
  const std::size_t k = decide_stat.size();
  if (k == 0) throw DataError("empty statistic vector");
  if (eval_stat.size() != k)
    throw DataError("decide/eval statistic vectors differ in length");
  const std::vector<int> perm = make_sort_perm(decide_stat);
  const double c = (crit == Criterion::pfdr) ? alpha : 0.0;
  std::vector<double> x(k + 1), y(k + 1);
  x[0] = 0.0;
  y[0] = 0.0;
  CalibDraw out;
  out.fdp.resize(k + 1);
  out.fdp[0] = 0.0f;
  double s = 0.0, e = 0.0;
  for (std::size_t l = 1; l <= k; ++l) {
    s += decide_stat[perm[l - 1]];
    e += eval_stat[perm[l - 1]];
    x[l] = s / static_cast<double>(l) - c;
    y[l] = static_cast<double>(l) - s;
    out.fdp[l] = static_cast<float>(e / static_cast<double>(l));
  }
  std::vector<double> mu_bar(k);
  suffix_max_slopes(x, y, mu_bar);
  out.nu.resize(k);
  double run = kInf;
  for (std::size_t l = 0; l < k; ++l) {
    run = std::min(run, mu_bar[l]);
    out.nu[l] = static_cast<float>(run);
  }
  return out;
}

inline int rejection_count(const CalibDraw& d, double mu) {
  auto it = std::partition_point(
      d.nu.begin(), d.nu.end(),
      [mu](float v) { return static_cast<double>(v) > mu; });
  return static_cast<int>(it - d.nu.begin());
}

// Error contribution of one draw when l hypotheses are rejected.
inline double draw_err(const CalibDraw& d, int l, Criterion crit, double alpha) {
  if (crit == Criterion::pfdr)
    return l > 0 ? static_cast<double>(d.fdp[static_cast<std::size_t>(l)]) - alpha
                 : 0.0;
  return static_cast<double>(d.fdp[static_cast<std::size_t>(l)]);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Calibrated policies
// ---------------------------------------------------------------------------

// One calibration draw: the statistic the policy thresholds on (decide) and
// the posterior null probability used to score its error (eval), aligned
// component-wise in the original hypothesis order.
struct StatisticPair {
  std::vector<double> decide;
  std::vector<double> eval;
};

using DrawFn = std::function<StatisticPair(Rng&)>;
// Factory invoked once per worker; each returned DrawFn may carry mutable
// scratch state and is used from a single thread.
using DrawFactory = std::function<DrawFn()>;

struct CalibrationDiagnostics {
  double g_hat = std::numeric_limits<double>::quiet_NaN();  // mean error at the result
  double g_se = std::numeric_limits<double>::quiet_NaN();   // its standard error
  double bracket_lo = 0.0;
  double bracket_hi = 0.0;
  std::size_t n_cal = 0;
  std::uint64_t seed = 0;
  int n_evals = 0;
  bool monotone_ok = true;
  bool grid_fallback = false;
  std::string degenerate;  // "", "slack", "none", or "all"
};

struct CalibratedPolicy {
  Criterion criterion = Criterion::fdr;
  double alpha = 0.0;
  // Step-down multiplier (fdr / pfdr policies).
  double mu = std::numeric_limits<double>::quiet_NaN();
  // Rejection threshold on the statistic (mfdr policies).
  double t_alpha = std::numeric_limits<double>::quiet_NaN();
  CalibrationDiagnostics diag;
};

struct CalibrateOptions {
  std::size_t n_cal = 10000;
  std::uint64_t seed = 0;
  double tol = 1e-4;                                  // bracket width for mu
  double mu_limit = static_cast<double>(1ULL << 40);  // give up beyond this
  int grid_points = 129;
  int workers = 1;
};

namespace detail {

// Label mixed into the per-draw RNG streams so calibration draws never
// collide with evaluation replications derived from the same seed.
inline constexpr std::uint64_t kCalibStreamLabel = 0x63616c6962ULL;  // "calib"

inline std::vector<CalibDraw> build_calib_draws(const DrawFactory& factory,
                                                Criterion crit, double alpha,
                                                const CalibrateOptions& opt) {
  std::vector<CalibDraw> draws(opt.n_cal);
  const Rng root(opt.seed);
  std::vector<DrawFn> per_worker(
      static_cast<std::size_t>(opt.workers < 1 ? 1 : opt.workers));
  parallel_for(opt.n_cal, opt.workers, [&](int w, std::size_t j) {
    auto& fn = per_worker[static_cast<std::size_t>(w)];
    if (!fn) fn = factory();
    Rng rng = root.child(kCalibStreamLabel, j);
    const StatisticPair p = fn(rng);
    draws[j] = make_calib_draw(p.decide, p.eval, crit, alpha);
  });
  return draws;
}

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
};

template <class Fn>
MeanSe mean_se(std::size_t n, Fn&& value) {
  double s = 0.0, s2 = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const double g = value(j);
    s += g;
    s2 += g * g;
  }
  const double mean = s / static_cast<double>(n);
  double var = (s2 - static_cast<double>(n) * mean * mean) /
               (static_cast<double>(n) - 1.0);
  var = std::max(var, 0.0);
  return {mean, std::sqrt(var / static_cast<double>(n))};
}

}  // namespace detail

// Calibrates the step-down multiplier mu so that the Monte Carlo estimate of
// the criterion's error functional meets its budget:
//   fdr  : mean posterior FDP          <= alpha
//   pfdr : mean (posterior FDP - alpha) on draws with rejections <= 0
// The estimate is nonincreasing in mu when eval and decide statistics agree;
// the bisection result is checked for empirical monotonicity on all evaluated
// points and falls back to a conservative grid rule when that fails.
inline CalibratedPolicy calibrate_mu(const DrawFactory& factory, Criterion crit,
                                     double alpha, const CalibrateOptions& opt) {
  if (crit == Criterion::mfdr)
    throw ConfigError("mfdr policies are calibrated by mfdr_policy(), not by "
                      "a step-down multiplier");
  if (!(alpha > 0.0 && alpha < 1.0))
    throw ConfigError("alpha must lie strictly between 0 and 1");
  if (opt.n_cal < 2) throw ConfigError("need at least 2 calibration draws");

  const std::vector<detail::CalibDraw> draws =
      detail::build_calib_draws(factory, crit, alpha, opt);
  const double c_err = (crit == Criterion::fdr) ? alpha : 0.0;

  struct Eval {
    double mu, g, se;
  };
  std::vector<Eval> trace;
  auto eval = [&](double mu) -> Eval {
    const auto ms = detail::mean_se(draws.size(), [&](std::size_t j) {
      return detail::draw_err(draws[j], detail::rejection_count(draws[j], mu),
                              crit, alpha);
    });
    trace.push_back({mu, ms.mean, ms.se});
    return trace.back();
  };

  CalibratedPolicy out;
  out.criterion = crit;
  out.alpha = alpha;
  out.diag.n_cal = opt.n_cal;
  out.diag.seed = opt.seed;

  const Eval at0 = eval(0.0);
  if (at0.g <= c_err) {
    out.mu = 0.0;
    out.diag.g_hat = at0.g;
    out.diag.g_se = at0.se;
    out.diag.n_evals = static_cast<int>(trace.size());
    out.diag.degenerate = "slack";
    return out;
  }

  double lo = 0.0, hi = 1.0;
  while (eval(hi).g > c_err) {
    lo = hi;
    hi *= 2.0;
    if (hi > opt.mu_limit)
      throw CalibrationError(
          "no multiplier up to " + std::to_string(opt.mu_limit) +
          " meets the error budget (estimate " + std::to_string(trace.back().g) +
          " vs budget " + std::to_string(c_err) +
          "); the eval statistic may be incompatible with the decide statistic");
  }
  const double bracket_hi0 = hi;
  while (hi - lo > opt.tol) {
    const double mid = 0.5 * (lo + hi);
    if (eval(mid).g > c_err)
      lo = mid;
    else
      hi = mid;
  }

  // Probe a geometric grid as well, both to strengthen the monotonicity check
  // and to support the fallback rule.
  const int gp = std::max(opt.grid_points, 2);
  std::vector<Eval> grid;
  grid.reserve(static_cast<std::size_t>(gp));
  const double g_lo = std::min(opt.tol, bracket_hi0);
  for (int i = 0; i < gp; ++i) {
    const double f = static_cast<double>(i) / static_cast<double>(gp - 1);
    grid.push_back(eval(g_lo * std::pow(bracket_hi0 / g_lo, f)));
  }

  std::sort(trace.begin(), trace.end(),
            [](const Eval& a, const Eval& b) { return a.mu < b.mu; });
  bool monotone = true;
  for (std::size_t i = 0; i + 1 < trace.size(); ++i) {
    const Eval& u = trace[i];
    const Eval& v = trace[i + 1];
    if (v.g > u.g + 3.0 * std::sqrt(u.se * u.se + v.se * v.se) + 1e-12) {
      monotone = false;
      break;
    }
  }

  double mu_star = hi;
  bool fallback = false;
  if (!monotone) {
    // Smallest grid point from which the whole suffix of the grid meets the
    // budget; the last grid point equals the feasible bracket end, so one
    // always exists.
    std::size_t i_star = grid.size() - 1;
    for (std::size_t i = grid.size(); i-- > 0;) {
      if (grid[i].g <= c_err)
        i_star = i;
      else
        break;
    }
    mu_star = grid[i_star].mu;
    fallback = true;
  }

  const auto final_ms = detail::mean_se(draws.size(), [&](std::size_t j) {
    return detail::draw_err(draws[j], detail::rejection_count(draws[j], mu_star),
                            crit, alpha);
  });
  out.mu = mu_star;
  out.diag.g_hat = final_ms.mean;
  out.diag.g_se = final_ms.se;
  out.diag.bracket_lo = lo;
  out.diag.bracket_hi = hi;
  out.diag.n_evals = static_cast<int>(trace.size());
  out.diag.monotone_ok = monotone;
  out.diag.grid_fallback = fallback;
  return out;
}

// Calibrates a threshold policy  reject {i : T_i <= t_alpha}  so that the
// pooled estimate of E[V] - alpha E[R] is nonpositive:
//   f(t) = sum_draws sum_i (eval_i - alpha) 1{decide_i <= t} <= 0.
// f is nonincreasing then nondecreasing in t, so the feasible thresholds form
// an interval starting at 0; the policy takes its upper end.  Thresholds are
// searched on a fixed dyadic grid over [0, 1] (resolution 2^-16), which keeps
// the calibration single-pass with O(1) memory per draw; draws are
// regenerated once more to attach per-draw diagnostics.
inline CalibratedPolicy mfdr_policy(const DrawFactory& factory, double alpha,
                                    const CalibrateOptions& opt) {
  if (!(alpha > 0.0 && alpha < 1.0))
    throw ConfigError("alpha must lie strictly between 0 and 1");
  if (opt.n_cal < 2) throw ConfigError("need at least 2 calibration draws");

  constexpr int kBins = 1 << 16;
  const int workers = opt.workers < 1 ? 1 : opt.workers;
  const Rng root(opt.seed);

  std::vector<std::vector<double>> acc(
      static_cast<std::size_t>(workers),
      std::vector<double>(static_cast<std::size_t>(kBins), 0.0));
  std::vector<DrawFn> per_worker(static_cast<std::size_t>(workers));
  parallel_for(opt.n_cal, opt.workers, [&](int w, std::size_t j) {
    auto& fn = per_worker[static_cast<std::size_t>(w)];
    if (!fn) fn = factory();
    Rng rng = root.child(detail::kCalibStreamLabel, j);
    const StatisticPair p = fn(rng);
    if (p.eval.size() != p.decide.size() || p.decide.empty())
      throw DataError("calibration draw produced mismatched statistic vectors");
    auto& bins = acc[static_cast<std::size_t>(w)];
    for (std::size_t i = 0; i < p.decide.size(); ++i) {
      double s = p.decide[i];
      if (!(s >= -1e-9 && s <= 1.0 + 1e-9))
        throw DataError("decide statistic outside [0, 1]");
      s = std::min(std::max(s, 0.0), 1.0);
      const int bin = std::min(kBins - 1, static_cast<int>(s * kBins));
      bins[static_cast<std::size_t>(bin)] += p.eval[i] - alpha;
    }
  });
  for (int w = 1; w < workers; ++w)
    for (int b = 0; b < kBins; ++b)
      acc[0][static_cast<std::size_t>(b)] += acc[static_cast<std::size_t>(w)][static_cast<std::size_t>(b)];

  // Largest m with f(left edge of bin m) <= 0.
  int m_star = 0;
  double run = 0.0;
  for (int m = 1; m <= kBins; ++m) {
    run += acc[0][static_cast<std::size_t>(m - 1)];
    if (run <= 0.0) m_star = m;
  }
  const double t_alpha = static_cast<double>(m_star) / static_cast<double>(kBins);

  // Second pass over the same streams for per-draw diagnostics at t_alpha.
  std::vector<double> g(opt.n_cal);
  parallel_for(opt.n_cal, opt.workers, [&](int w, std::size_t j) {
    auto& fn = per_worker[static_cast<std::size_t>(w)];
    if (!fn) fn = factory();
    Rng rng = root.child(detail::kCalibStreamLabel, j);
    const StatisticPair p = fn(rng);
    double s = 0.0;
    for (std::size_t i = 0; i < p.decide.size(); ++i)
      if (p.decide[i] <= t_alpha) s += p.eval[i] - alpha;
    g[j] = s;
  });
  const auto ms = detail::mean_se(opt.n_cal, [&](std::size_t j) { return g[j]; });

  CalibratedPolicy out;
  out.criterion = Criterion::mfdr;
  out.alpha = alpha;
  out.t_alpha = t_alpha;
  out.diag.g_hat = ms.mean;
  out.diag.g_se = ms.se;
  out.diag.bracket_lo = t_alpha;
  out.diag.bracket_hi = std::min(1.0, t_alpha + 1.0 / static_cast<double>(kBins));
  out.diag.n_cal = opt.n_cal;
  out.diag.seed = opt.seed;
  out.diag.n_evals = 2;
  if (m_star == 0) out.diag.degenerate = "none";
  if (m_star == kBins) out.diag.degenerate = "all";
  return out;
}

inline CalibratedPolicy calibrate(const DrawFactory& factory, Criterion crit,
                                  double alpha, const CalibrateOptions& opt) {
  return crit == Criterion::mfdr ? mfdr_policy(factory, alpha, opt)
                                 : calibrate_mu(factory, crit, alpha, opt);
}

// Draws (h, z) from the model and scores them with the exact posterior engine
// for its dependence type; decide and eval statistics coincide.
inline DrawFactory model_draw_factory(TwoGroupModel model, int max_block_size = 20) {
  return [model, max_block_size]() -> DrawFn {
    struct State {
      TwoGroupModel m;
      int cap;
      std::optional<BlockWorkspace> bws;
      std::optional<EquicorrWorkspace> ews;
    };
    auto st = std::make_shared<State>(State{model, max_block_size, {}, {}});
    if (std::holds_alternative<BlockDependence>(st->m.dependence))
      st->bws.emplace(st->m, st->cap);
    else if (std::holds_alternative<Equicorrelated>(st->m.dependence))
      st->ews.emplace(st->m);
    return [st](Rng& rng) -> StatisticPair {
      const Sample s = sample(st->m, rng);
      std::vector<double> t;
      if (st->bws)
        t = locfdr_block(*st->bws, s.z).t;
      else if (st->ews)
        t = locfdr_equicorrelated(*st->ews, s.z).t;
      else
        t = marginal_locfdr(st->m.mixture, s.z).t;
      return {t, t};
    };
  };
}

inline CalibratedPolicy calibrate(const TwoGroupModel& model, Criterion crit,
                                  double alpha, const CalibrateOptions& opt,
                                  int max_block_size = 20) {
  return calibrate(model_draw_factory(model, max_block_size), crit, alpha, opt);
}

// ---------------------------------------------------------------------------
// Applying a calibrated policy
// ---------------------------------------------------------------------------

// Threshold equivalent of a multiplier for a flat statistic profile:
// rejecting a single hypothesis with statistic t is worthwhile at multiplier
// mu iff t <= (1 + mu alpha) / (1 + mu).
inline double mu_to_threshold(double mu, double alpha) {
  if (!(mu >= 0.0)) throw ConfigError("mu must be nonnegative");
  if (std::isinf(mu)) return alpha;
  return (1.0 + mu * alpha) / (1.0 + mu);
}

// Decisions in the original hypothesis order.
inline std::vector<int> decide(const CalibratedPolicy& p,
                               std::span<const double> t) {
  const std::size_t k = t.size();
  std::vector<int> d(k, 0);
  if (p.criterion == Criterion::mfdr) {
    for (std::size_t i = 0; i < k; ++i) d[i] = t[i] <= p.t_alpha ? 1 : 0;
    return d;
  }
  const std::vector<int> perm = make_sort_perm(t);
  std::vector<double> sorted(k);
  for (std::size_t i = 0; i < k; ++i) sorted[i] = t[perm[i]];
  const int n_rej = step_down_count(sorted, p.mu, p.criterion, p.alpha);
  for (int i = 0; i < n_rej; ++i) d[static_cast<std::size_t>(perm[i])] = 1;
  return d;
}

inline std::vector<int> decide(const CalibratedPolicy& p, const LocFdrVector& v) {
  const std::size_t k = v.t.size();
  std::vector<int> d(k, 0);
  if (p.criterion == Criterion::mfdr) {
    for (std::size_t i = 0; i < k; ++i) d[i] = v.t[i] <= p.t_alpha ? 1 : 0;
    return d;
  }
  std::vector<double> sorted(k);
  for (std::size_t i = 0; i < k; ++i)
    sorted[i] = v.t[static_cast<std::size_t>(v.sort_perm[i])];
  const int n_rej = step_down_count(sorted, p.mu, p.criterion, p.alpha);
  for (int i = 0; i < n_rej; ++i)
    d[static_cast<std::size_t>(v.sort_perm[static_cast<std::size_t>(i)])] = 1;
  return d;
}

// ---------------------------------------------------------------------------
// Baseline procedures
// ---------------------------------------------------------------------------

struct RejectionSet {
  std::vector<int> d;  // original order
  int n_rejected = 0;
};

// Step-up p-value procedure with thresholds i * alpha / (K * pi0).
inline RejectionSet bh(std::span<const double> pvalues, double alpha,
                       double pi0 = 1.0) {
  if (!(alpha > 0.0 && alpha < 1.0))
    throw ConfigError("alpha must lie strictly between 0 and 1");
  if (!(pi0 > 0.0)) throw ConfigError("pi0 must be positive");
  const std::size_t k = pvalues.size();
  if (k == 0) throw DataError("empty p-value vector");
  for (double p : pvalues)
    if (!(p >= 0.0 && p <= 1.0)) throw DataError("p-value outside [0, 1]");
  const std::vector<int> perm = make_sort_perm(pvalues);
  std::size_t k_star = 0;
  for (std::size_t i = k; i-- > 0;) {
    const double thr = static_cast<double>(i + 1) * alpha /
                       (static_cast<double>(k) * pi0);
    if (pvalues[perm[i]] <= thr) {
      k_star = i + 1;
      break;
    }
  }
  RejectionSet out;
  out.d.assign(k, 0);
  out.n_rejected = static_cast<int>(k_star);
  for (std::size_t i = 0; i < k_star; ++i) out.d[static_cast<std::size_t>(perm[i])] = 1;
  return out;
}

// Step-up rule on posterior null probabilities: reject the i smallest as long
// as their running mean stays within alpha.
inline RejectionSet est_mfdr_stepup(std::span<const double> t, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0))
    throw ConfigError("alpha must lie strictly between 0 and 1");
  const std::size_t k = t.size();
  if (k == 0) throw DataError("empty statistic vector");
  const std::vector<int> perm = make_sort_perm(t);
  std::size_t k_star = 0;
  double s = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    s += t[perm[i]];
    if (s <= alpha * static_cast<double>(i + 1)) k_star = i + 1;
  }
  RejectionSet out;
  out.d.assign(k, 0);
  out.n_rejected = static_cast<int>(k_star);
  for (std::size_t i = 0; i < k_star; ++i) out.d[static_cast<std::size_t>(perm[i])] = 1;
  return out;
}

}  // namespace omt
