#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "omt/errors.hpp"
#include "omt/locfdr.hpp"
#include "omt/math.hpp"
#include "omt/model.hpp"
#include "omt/parallel.hpp"
#include "omt/rng.hpp"

namespace omt {

// ---------------------------------------------------------------------------
// Penalized normal-mixture fitting
// ---------------------------------------------------------------------------

// Component 0 is the centered component (initialized at the sample median, or
// pinned to N(0,1)); the remaining components start at spread quantiles in
// ascending order.  dirichlet_prior contains per-component pseudo-counts
// added to the responsibilities in the weight update; the conservative
// factory puts one pseudo-count on the centered component and none on the
// others, which nudges the fitted signal fraction downward on null-dominated
// data while leaving the large-sample fit essentially unpenalized.
struct EmConfig {
  int n_components = 2;
  std::vector<double> dirichlet_prior;  // empty = unpenalized
  int max_iter = 500;
  double tol = 1e-8;  // relative penalized log-likelihood change
  int n_restarts = 5;
  std::uint64_t seed = 17;
  bool pin_standard_normal = false;

  static EmConfig conservative(int n_components = 2, bool pin = false) {
    EmConfig c;
    c.n_components = n_components;
    c.pin_standard_normal = pin;
    c.dirichlet_prior.assign(static_cast<std::size_t>(n_components), 0.0);
    c.dirichlet_prior[0] = 1.0;
    return c;
  }
};

// Fitted mixture with components sorted by ascending mean.  A component is
// null unless its mean is clearly negative (the one-sided convention: signals
// pull z-scores toward negative values), and pi_hat sums the remaining
// weights.  The classification uses a small dead band below zero so that a
// centered component whose fitted mean lands at -0.001 by sampling noise is
// not mistaken for signal, which would invert the estimated signal fraction.
inline constexpr double kNullMeanTol = 0.15;

struct FittedMixture {
  std::vector<double> weights;
  std::vector<double> means;
  std::vector<double> sds;
  std::vector<int> null_assignment;  // 1 = null component, 0 = alternative
  double pi_hat = 0.0;
  double loglik = 0.0;  // penalized log-likelihood at the optimum

  int n_components() const { return static_cast<int>(weights.size()); }

  void validate() const {
    const std::size_t c = weights.size();
    if (c < 2 || means.size() != c || sds.size() != c ||
        null_assignment.size() != c)
      throw ConfigError("fitted mixture fields have inconsistent lengths");
    double wsum = 0.0, alt = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      if (!(weights[j] >= 0.0)) throw ConfigError("negative component weight");
      if (!(sds[j] > 0.0)) throw ConfigError("component sd must be positive");
      wsum += weights[j];
      if (!null_assignment[j]) alt += weights[j];
    }
    if (std::abs(wsum - 1.0) > 1e-9)
      throw ConfigError("component weights must sum to 1");
    if (std::abs(alt - pi_hat) > 1e-9)
      throw ConfigError("pi_hat must equal the alternative weight mass");
  }

  // Splits the components into renormalized null / alternative sub-mixtures.
  MarginalMixture to_marginal() const {
    validate();
    if (!(pi_hat > 0.0 && pi_hat < 1.0))
      throw DataError("cannot split mixture: signal fraction is degenerate");
    MarginalMixture mix;
    mix.pi = pi_hat;
    for (std::size_t j = 0; j < weights.size(); ++j) {
      const double denom = null_assignment[j] ? 1.0 - pi_hat : pi_hat;
      auto& dst = null_assignment[j] ? mix.null_components : mix.alt_components;
      dst.push_back({weights[j] / denom, means[j], sds[j]});
    }
    mix.validate();
    return mix;
  }
};

namespace detail {

struct EmState {
  std::vector<double> w, mu, sd;
};

inline double em_penalized_loglik(std::span<const double> x, const EmState& st,
                                  std::span<const double> prior) {
  const std::size_t c = st.w.size();
  std::vector<double> lw(c);
  for (std::size_t j = 0; j < c; ++j) lw[j] = safe_log(st.w[j]);
  double ll = 0.0;
  for (double z : x) {
    double acc = kNegInf;
    for (std::size_t j = 0; j < c; ++j)
      acc = logaddexp(acc, lw[j] + norm_logpdf(z, st.mu[j], st.sd[j]));
    ll += acc;
  }
  for (std::size_t j = 0; j < c; ++j)
    if (prior[j] > 0.0) ll += prior[j] * safe_log(st.w[j]);
  return ll;
}

// One EM run from a given starting point.  Returns false when a component
// collapses (vanishing spread); the caller tries the next restart.
inline bool run_em(std::span<const double> x, const EmConfig& cfg,
                   std::span<const double> prior, EmState& st, double& ll_out) {
  const std::size_t n = x.size();
  const std::size_t c = st.w.size();
  const double prior_mass =
      std::accumulate(prior.begin(), prior.end(), 0.0);
  constexpr double kSdFloor = 1e-4;

  double ll = em_penalized_loglik(x, st, prior);
  for (int iter = 0; iter < cfg.max_iter; ++iter) {
    std::vector<double> lw(c), nc(c, 0.0), sz(c, 0.0), szz(c, 0.0);
    for (std::size_t j = 0; j < c; ++j) lw[j] = safe_log(st.w[j]);
    std::vector<double> lp(c);
    for (double z : x) {
      double lse = kNegInf;
      for (std::size_t j = 0; j < c; ++j) {
        lp[j] = lw[j] + norm_logpdf(z, st.mu[j], st.sd[j]);
        lse = logaddexp(lse, lp[j]);
      }
      for (std::size_t j = 0; j < c; ++j) {
        const double r = std::exp(lp[j] - lse);
        nc[j] += r;
        sz[j] += r * z;
        szz[j] += r * z * z;
      }
    }
    for (std::size_t j = 0; j < c; ++j) {
      st.w[j] = (nc[j] + prior[j]) /
                (static_cast<double>(n) + prior_mass);
      const bool pinned = cfg.pin_standard_normal && j == 0;
      if (pinned || nc[j] < 1e-10) continue;
      st.mu[j] = sz[j] / nc[j];
      const double var = szz[j] / nc[j] - st.mu[j] * st.mu[j];
      st.sd[j] = std::sqrt(std::max(var, 0.0));
      if (!(st.sd[j] > kSdFloor)) return false;
    }
    const double ll_new = em_penalized_loglik(x, st, prior);
    if (ll_new + 1e-7 * (1.0 + std::abs(ll_new)) < ll)
      throw std::logic_error("penalized log-likelihood decreased during EM");
    const bool done = std::abs(ll_new - ll) <= cfg.tol * (1.0 + std::abs(ll_new));
    ll = ll_new;
    if (done) break;
  }
  ll_out = ll;
  return true;
}

inline double sorted_quantile(std::span<const double> x, double q) {
  const double pos = q * static_cast<double>(x.size() - 1);
  const std::size_t i = static_cast<std::size_t>(pos);
  const double f = pos - static_cast<double>(i);
  return i + 1 < x.size() ? x[i] * (1.0 - f) + x[i + 1] * f : x[i];
}

}  // namespace detail

// Penalized maximum-likelihood fit of a normal mixture.  The data are sorted
// internally, so the result is invariant under permutations of the input.
// Restarts jitter the starting point and run independently; the best
// penalized log-likelihood wins, with ties broken by restart index.
inline FittedMixture fit_mixture(std::span<const double> z, const EmConfig& cfg,
                                 int workers = 1) {
  const std::size_t n = z.size();
  const int c = cfg.n_components;
  if (c < 2) throw ConfigError("need at least 2 mixture components");
  if (!cfg.dirichlet_prior.empty() &&
      cfg.dirichlet_prior.size() != static_cast<std::size_t>(c))
    throw ConfigError("dirichlet_prior length must match n_components");
  for (double d : cfg.dirichlet_prior)
    if (!(d >= 0.0)) throw ConfigError("pseudo-counts must be nonnegative");
  if (cfg.max_iter < 1 || cfg.n_restarts < 1 || !(cfg.tol > 0.0))
    throw ConfigError("max_iter, n_restarts and tol must be positive");
  if (n < 10 * static_cast<std::size_t>(c))
    throw DataError("need at least 10 observations per mixture component");
  for (double v : z)
    if (!std::isfinite(v)) throw DataError("z-scores must be finite");

  std::vector<double> x(z.begin(), z.end());
  std::sort(x.begin(), x.end());
  std::vector<double> prior = cfg.dirichlet_prior;
  if (prior.empty()) prior.assign(static_cast<std::size_t>(c), 0.0);

  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  const double pooled_sd =
      std::max(std::sqrt(var / static_cast<double>(n - 1)), 1e-3);

  struct Run {
    detail::EmState st;
    double ll = kNegInf;
    bool ok = false;
  };
  std::vector<Run> runs(static_cast<std::size_t>(cfg.n_restarts));
  const Rng root(cfg.seed);
  parallel_for(static_cast<std::size_t>(cfg.n_restarts), workers,
               [&](int, std::size_t r) {
                 Rng rng = root.child(0x656d2d696e6974ULL, r);  // per-restart stream
                 detail::EmState st;
                 st.w.assign(static_cast<std::size_t>(c),
                             1.0 / static_cast<double>(c));
                 st.mu.resize(static_cast<std::size_t>(c));
                 st.sd.assign(static_cast<std::size_t>(c), pooled_sd);
                 st.mu[0] = cfg.pin_standard_normal
                                ? 0.0
                                : detail::sorted_quantile(x, 0.5);
                 if (cfg.pin_standard_normal) st.sd[0] = 1.0;
                 // Free components start on spread quantiles away from the
                 // center so they can claim the tails; with a single free
                 // component it starts on the left, where signals live under
                 // the one-sided convention.
                 for (int j = 1; j < c; ++j) {
                   const double q =
                       c == 2 ? 0.15
                              : 0.15 + 0.7 * static_cast<double>(j - 1) /
                                           static_cast<double>(c - 2);
                   st.mu[static_cast<std::size_t>(j)] = detail::sorted_quantile(x, q);
                 }
                 if (r > 0) {  // jittered restart
                   for (int j = cfg.pin_standard_normal ? 1 : 0; j < c; ++j) {
                     st.mu[static_cast<std::size_t>(j)] +=
                         0.5 * pooled_sd * rng.normal();
                     st.sd[static_cast<std::size_t>(j)] *=
                         std::exp(0.25 * rng.normal());
                   }
                 }
                 auto& run = runs[r];
                 run.st = st;
                 run.ok = detail::run_em(x, cfg, prior, run.st, run.ll);
               });

  int best = -1;
  for (int r = 0; r < cfg.n_restarts; ++r) {
    const auto& run = runs[static_cast<std::size_t>(r)];
    if (run.ok && (best < 0 || run.ll > runs[static_cast<std::size_t>(best)].ll))
      best = r;
  }
  if (best < 0)
    throw DataError("all EM restarts hit a degenerate component");
  const auto& win = runs[static_cast<std::size_t>(best)];

  std::vector<int> order(static_cast<std::size_t>(c));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int i, int j) {
    const auto a = static_cast<std::size_t>(i), b = static_cast<std::size_t>(j);
    if (win.st.mu[a] != win.st.mu[b]) return win.st.mu[a] < win.st.mu[b];
    if (win.st.sd[a] != win.st.sd[b]) return win.st.sd[a] < win.st.sd[b];
    return i < j;
  });

  FittedMixture out;
  out.loglik = win.ll;
  for (int j : order) {
    const auto s = static_cast<std::size_t>(j);
    out.weights.push_back(win.st.w[s]);
    out.means.push_back(win.st.mu[s]);
    out.sds.push_back(win.st.sd[s]);
    const bool is_null = win.st.mu[s] >= -kNullMeanTol;
    out.null_assignment.push_back(is_null ? 1 : 0);
    if (!is_null) out.pi_hat += win.st.w[s];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Plug-in signal-fraction estimate
// ---------------------------------------------------------------------------

inline double storey_pi(std::span<const double> pvalues, double lambda = 0.05) {
  if (!(lambda > 0.0 && lambda < 1.0))
    throw ConfigError("lambda must lie strictly between 0 and 1");
  if (pvalues.empty()) throw DataError("empty p-value vector");
  std::size_t above = 0;
  for (double p : pvalues) {
    if (!(p >= 0.0 && p <= 1.0)) throw DataError("p-value outside [0, 1]");
    if (p > lambda) ++above;
  }
  const double pi0 = static_cast<double>(above) /
                     ((1.0 - lambda) * static_cast<double>(pvalues.size()));
  return std::min(std::max(1.0 - pi0, 0.0), 1.0);
}

// ---------------------------------------------------------------------------
// Composite posterior statistic under a fitted mixture
// ---------------------------------------------------------------------------

// Posterior probability that z came from the null part of the fitted mixture:
//   (1-pi) g0(z) / [(1-pi) g0(z) + pi g1(z)]
// with g0, g1 the weight-renormalized null / alternative sub-mixtures.  The
// renormalization cancels, so the value is computed from the raw component
// weights in log space.
inline double composite_locfdr(const FittedMixture& fit, double z) {
  bool has_alt = false;
  for (int a : fit.null_assignment)
    if (!a) has_alt = true;
  if (!has_alt) throw DataError("no alternative components");
  if (fit.pi_hat <= 0.0) return 1.0;
  if (fit.pi_hat >= 1.0) return 0.0;
  double l0 = kNegInf, l1 = kNegInf;
  for (std::size_t j = 0; j < fit.weights.size(); ++j) {
    const double lp = detail::safe_log(fit.weights[j]) +
                      norm_logpdf(z, fit.means[j], fit.sds[j]);
    if (fit.null_assignment[j])
      l0 = logaddexp(l0, lp);
    else
      l1 = logaddexp(l1, lp);
  }
  return std::exp(l0 - logaddexp(l0, l1));
}

inline std::vector<double> composite_locfdr(const FittedMixture& fit,
                                            std::span<const double> z) {
  std::vector<double> t(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) t[i] = composite_locfdr(fit, z[i]);
  return t;
}

// ---------------------------------------------------------------------------
// z-score preparation and replication combination
// ---------------------------------------------------------------------------

struct ClampResult {
  std::vector<double> z;
  int n_clamped = 0;
};

// One-sided p-values to z-scores via the inverse normal CDF.  Values that
// would land beyond +-bound (including exact zeros and ones, whose transform
// is infinite) are replaced by draws from a unit normal centered at the
// boundary, and counted.
inline ClampResult clamp_zscores(std::span<const double> pvalues, Rng& rng,
                                 double bound = 6.0) {
  if (!(bound > 0.0)) throw ConfigError("bound must be positive");
  ClampResult out;
  out.z.resize(pvalues.size());
  for (std::size_t i = 0; i < pvalues.size(); ++i) {
    const double p = pvalues[i];
    if (!(p >= 0.0 && p <= 1.0)) throw DataError("p-value outside [0, 1]");
    double z = norm_quantile(p);
    if (z < -bound) {
      z = rng.normal(-bound, 1.0);
      ++out.n_clamped;
    } else if (z > bound) {
      z = rng.normal(bound, 1.0);
      ++out.n_clamped;
    }
    out.z[i] = z;
  }
  return out;
}

// Combined evidence from a discovery and a validation z-score:
// -2 log Phi(zd) - 2 log Phi(zv) against the chi-square(4) upper tail.
inline double fisher_combine(double z_discovery, double z_validation) {
  if (!std::isfinite(z_discovery) || !std::isfinite(z_validation))
    throw DataError("fisher_combine needs finite z-scores");
  const double stat =
      -2.0 * (log_norm_cdf(z_discovery) + log_norm_cdf(z_validation));
  return chisq4_upper_tail(stat);
}

}  // namespace omt
