#pragma once

// Posterior null probabilities ("local FDRs"): T_i(z) = Pr(h_i = 0 | z).
// Engines:
//   marginal_locfdr        — conditions on z_i only (the marginal statistic)
//   locfdr_independent     — full posterior when coordinates are independent
//                            (coincides with the marginal statistic)
//   locfdr_block           — exact posterior under block dependence, one
//                            density per block configuration (2^s per block)
//   locfdr_equicorrelated  — exact posterior under exchangeable correlation,
//                            O(K^2) per coordinate via a log-space recursion
//                            over (prefix length, signal count)
//   locfdr_bruteforce      — exhaustive 2^K enumeration, the test oracle
// All likelihood work is done in log space; ratios are exponentiated last.

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "omt/errors.hpp"
#include "omt/math.hpp"
#include "omt/model.hpp"

namespace omt {

struct LocFdrVector {
  std::vector<double> t;      // posterior null probability per coordinate
  std::vector<int> sort_perm; // ascending t; ties broken by original index
};

inline std::vector<int> make_sort_perm(std::span<const double> t) {
  std::vector<int> perm(t.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::sort(perm.begin(), perm.end(), [&](int i, int j) {
    const auto a = static_cast<std::size_t>(i), b = static_cast<std::size_t>(j);
    return t[a] < t[b] || (t[a] == t[b] && i < j);
  });
  return perm;
}

namespace detail {

// Mixture with per-component constants precomputed for hot loops.
struct LogMixture {
  struct Comp {
    double log_w, mean, inv_sd, log_sd;
  };
  std::vector<Comp> comps;

  explicit LogMixture(std::span<const NormalComponent> cs) {
    comps.reserve(cs.size());
    for (const auto& c : cs)
      comps.push_back({c.weight > 0.0 ? std::log(c.weight) : kNegInf, c.mean,
                       1.0 / c.sd, std::log(c.sd)});
  }

  double logpdf(double z) const {
    double acc = kNegInf;
    for (const auto& c : comps) {
      const double u = (z - c.mean) * c.inv_sd;
      acc = logaddexp(acc, c.log_w - 0.5 * (u * u + kLog2Pi) - c.log_sd);
    }
    return acc;
  }
};

inline double safe_log(double x) { return x > 0.0 ? std::log(x) : kNegInf; }

} // namespace detail

inline double marginal_locfdr_at(const MarginalMixture& mix, double z) {
  const double lp0 = detail::safe_log(1.0 - mix.pi) + mix.null_logpdf(z);
  const double lp1 = detail::safe_log(mix.pi) + mix.alt_logpdf(z);
  return std::exp(lp0 - logaddexp(lp0, lp1));
}

inline LocFdrVector marginal_locfdr(const MarginalMixture& mix,
                                    std::span<const double> z) {
  const detail::LogMixture null_mix(mix.null_components);
  const detail::LogMixture alt_mix(mix.alt_components);
  const double log_pi0 = detail::safe_log(1.0 - mix.pi);
  const double log_pi1 = detail::safe_log(mix.pi);
  LocFdrVector out;
  out.t.resize(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double lp0 = log_pi0 + null_mix.logpdf(z[i]);
    const double lp1 = log_pi1 + alt_mix.logpdf(z[i]);
    out.t[i] = std::exp(lp0 - logaddexp(lp0, lp1));
  }
  out.sort_perm = make_sort_perm(out.t);
  return out;
}

// Under independence the full posterior factorizes into the marginal one.
inline LocFdrVector locfdr_independent(const TwoGroupModel& model,
                                       std::span<const double> z) {
  return marginal_locfdr(model.mixture, z);
}

// ---------------------------------------------------------------------------
// Block dependence
// ---------------------------------------------------------------------------

// Per-model cache: for every block and every h configuration, the Cholesky
// factor, mean and prior weight. Reused across z vectors; keep one workspace
// per thread (evaluation mutates scratch buffers and counters).
struct BlockWorkspace {
  struct Config {
    double log_prior;   // |h| log pi + (s - |h|) log(1 - pi)
    double log_norm;    // MVN normalizing constant for this covariance
    Eigen::MatrixXd l;  // lower Cholesky factor
    Eigen::VectorXd mean;
  };
  struct Block {
    int size = 0;
    std::vector<Config> configs; // indexed by the h bit pattern
  };

  std::vector<Block> blocks;
  std::size_t density_evals = 0; // one per configuration per evaluation

  BlockWorkspace(const TwoGroupModel& model, int max_block_size = 20) {
    const auto* bd = std::get_if<BlockDependence>(&model.dependence);
    if (!bd) throw ConfigError("block posterior: model has no block dependence");
    const double log_pi1 = detail::safe_log(model.mixture.pi);
    const double log_pi0 = detail::safe_log(1.0 - model.mixture.pi);
    blocks.reserve(bd->block_sizes.size());
    for (std::size_t b = 0; b < bd->block_sizes.size(); ++b) {
      const int s = bd->block_sizes[b];
      if (s > max_block_size)
        throw ConfigError("block posterior: block size " + std::to_string(s) +
                          " exceeds the enumeration limit " +
                          std::to_string(max_block_size));
      Block blk;
      blk.size = s;
      const std::uint32_t n_cfg = 1u << s;
      blk.configs.resize(n_cfg);
      std::vector<int> h(static_cast<std::size_t>(s));
      for (std::uint32_t cfg = 0; cfg < n_cfg; ++cfg) {
        detail::decode_config(cfg, h);
        const int ones = std::popcount(cfg);
        Config& c = blk.configs[cfg];
        c.log_prior = (ones ? ones * log_pi1 : 0.0) +
                      (s - ones ? (s - ones) * log_pi0 : 0.0);
        const auto llt = detail::checked_llt(bd->cov(h, static_cast<int>(b)),
                                             static_cast<int>(b));
        c.l = llt.matrixL();
        c.mean = bd->mean(h, static_cast<int>(b));
        double log_det_half = 0.0;
        for (Eigen::Index i = 0; i < c.l.rows(); ++i)
          log_det_half += std::log(c.l(i, i));
        c.log_norm = -0.5 * s * kLog2Pi - log_det_half;
      }
      blocks.push_back(std::move(blk));
    }
  }
};

inline LocFdrVector locfdr_block(BlockWorkspace& ws, std::span<const double> z) {
  LocFdrVector out;
  out.t.resize(z.size());
  std::size_t off = 0;
  Eigen::VectorXd d;
  std::vector<double> logval;
  std::vector<double> num;
  for (const auto& blk : ws.blocks) {
    const auto s = static_cast<std::size_t>(blk.size);
    if (off + s > z.size())
      throw DataError("block posterior: z shorter than the block layout");
    const std::uint32_t n_cfg = 1u << blk.size;
    logval.assign(n_cfg, kNegInf);
    double best = kNegInf;
    for (std::uint32_t cfg = 0; cfg < n_cfg; ++cfg) {
      const auto& c = blk.configs[cfg];
      d.resize(static_cast<Eigen::Index>(s));
      for (std::size_t i = 0; i < s; ++i)
        d(static_cast<Eigen::Index>(i)) = z[off + i] - c.mean(static_cast<Eigen::Index>(i));
      c.l.triangularView<Eigen::Lower>().solveInPlace(d);
      const double lv = c.log_prior + c.log_norm - 0.5 * d.squaredNorm();
      logval[cfg] = lv;
      best = std::max(best, lv);
      ++ws.density_evals;
    }
    // one exponentiation per configuration; numerators accumulate the
    // configurations in which the coordinate is null
    num.assign(s, 0.0);
    double den = 0.0;
    for (std::uint32_t cfg = 0; cfg < n_cfg; ++cfg) {
      const double w = std::exp(logval[cfg] - best);
      den += w;
      for (std::size_t i = 0; i < s; ++i)
        if (!((cfg >> i) & 1u)) num[i] += w;
    }
    for (std::size_t i = 0; i < s; ++i) out.t[off + i] = num[i] / den;
    off += s;
  }
  if (off != z.size())
    throw DataError("block posterior: z longer than the block layout");
  out.sort_perm = make_sort_perm(out.t);
  return out;
}

inline LocFdrVector locfdr_block(const TwoGroupModel& model,
                                 std::span<const double> z,
                                 int max_block_size = 20) {
  BlockWorkspace ws(model, max_block_size);
  return locfdr_block(ws, z);
}

// ---------------------------------------------------------------------------
// Equicorrelated dependence
// ---------------------------------------------------------------------------

// Precision matrix of sigma2 ((1-rho) I + rho 11') has diagonal `a` and
// off-diagonal `b`; the quadratic form of an h vector with n ones is
// s_n = a n + b n (n-1).
struct EquicorrParams {
  int k = 0;
  double rho = 0.0, sigma2 = 1.0, delta = 0.0;
  double a = 0.0, b = 0.0;

  static EquicorrParams from(int k, const Equicorrelated& eq) {
    EquicorrParams p;
    p.k = k;
    p.rho = eq.rho;
    p.sigma2 = eq.sigma2;
    p.delta = eq.delta;
    const double den = eq.sigma2 * (eq.rho * (k - 1) + 1.0) * (eq.rho - 1.0);
    p.a = (-1.0 - eq.rho * (k - 2)) / den;
    p.b = eq.rho / den;
    return p;
  }

  double s_n(int n) const { return a * n + b * static_cast<double>(n) * (n - 1); }
};

// Scratch for the prefix/signal-count recursion. log_s holds the full main
// table log S(L, n) (row L has entries n = 0..L); numerator families reuse
// rows of it up to their skipped coordinate and then roll two buffers.
struct EquicorrWorkspace {
  EquicorrParams params;
  std::vector<double> log_s;      // (k+1) x (k+1), row-major
  std::vector<double> row_a, row_b;
  std::vector<double> c;          // per-coordinate log recursion factor
  std::vector<double> log_prior;  // per signal count, prior x quadratic term
  std::vector<double> terms;
  std::size_t cell_updates = 0;

  explicit EquicorrWorkspace(const TwoGroupModel& model) {
    const auto* eq = std::get_if<Equicorrelated>(&model.dependence);
    if (!eq)
      throw ConfigError("equicorrelated posterior: model has no equicorrelated dependence");
    model.validate();
    params = EquicorrParams::from(model.k, *eq);
    const auto k = static_cast<std::size_t>(model.k);
    log_s.assign((k + 1) * (k + 1), kNegInf);
    row_a.assign(k + 1, kNegInf);
    row_b.assign(k + 1, kNegInf);
    c.assign(k + 1, 0.0);
    log_prior.assign(k + 1, 0.0);
    terms.assign(k + 1, kNegInf);
    const double log_pi1 = detail::safe_log(model.mixture.pi);
    const double log_pi0 = detail::safe_log(1.0 - model.mixture.pi);
    for (std::size_t n = 0; n <= k; ++n)
      log_prior[n] = (n ? n * log_pi1 : 0.0) +
                     (k - n ? (k - n) * log_pi0 : 0.0) -
                     0.5 * params.delta * params.delta * params.s_n(static_cast<int>(n));
  }

  double& at(std::size_t l, std::size_t n) {
    return log_s[l * (static_cast<std::size_t>(params.k) + 1) + n];
  }
};

inline LocFdrVector locfdr_equicorrelated(EquicorrWorkspace& ws,
                                          std::span<const double> z) {
  const auto k = static_cast<std::size_t>(ws.params.k);
  if (z.size() != k)
    throw DataError("equicorrelated posterior: z length does not match k");
  const double a = ws.params.a, b = ws.params.b, delta = ws.params.delta;
  double s_z = 0.0;
  for (double v : z) s_z += v;
  for (std::size_t l = 1; l <= k; ++l)
    ws.c[l] = delta * (b * s_z + (a - b) * z[l - 1]);

  // main table: log S(L, n), S(L, 0) = 1, S(L, n) adds coordinate L as null
  // (carry) or signal (shift by c[L])
  ws.at(0, 0) = 0.0;
  for (std::size_t l = 1; l <= k; ++l) {
    ws.at(l, 0) = 0.0;
    for (std::size_t n = 1; n <= l; ++n) {
      const double carry = n <= l - 1 ? ws.at(l - 1, n) : kNegInf;
      ws.at(l, n) = logaddexp(carry, ws.at(l - 1, n - 1) + ws.c[l]);
      ++ws.cell_updates;
    }
  }
  double log_den = kNegInf;
  for (std::size_t n = 0; n <= k; ++n)
    ws.terms[n] = ws.log_prior[n] + ws.at(k, n);
  log_den = logsumexp(std::span<const double>(ws.terms.data(), k + 1));

  LocFdrVector out;
  out.t.resize(k);
  for (std::size_t i = 1; i <= k; ++i) {
    // numerator family: identical recursion but coordinate i is forced null;
    // rows before i equal the main table, so start from row i-1
    std::vector<double>& prev = ws.row_a;
    std::vector<double>& cur = ws.row_b;
    for (std::size_t n = 0; n <= k; ++n)
      prev[n] = n <= i - 1 ? ws.at(i - 1, n) : kNegInf;
    for (std::size_t l = i + 1; l <= k; ++l) {
      cur[0] = 0.0;
      const std::size_t top = l - 1; // at most l-1 signals with one coordinate skipped
      for (std::size_t n = 1; n <= top; ++n) {
        cur[n] = logaddexp(prev[n], prev[n - 1] + ws.c[l]);
        ++ws.cell_updates;
      }
      // rows only ever read one slot past their predecessor's top
      if (top + 1 <= k) cur[top + 1] = kNegInf;
      std::swap(prev, cur);
    }
    for (std::size_t n = 0; n + 1 <= k; ++n)
      ws.terms[n] = ws.log_prior[n] + prev[n];
    const double log_num =
        logsumexp(std::span<const double>(ws.terms.data(), k));
    out.t[i - 1] = std::exp(log_num - log_den);
  }
  out.sort_perm = make_sort_perm(out.t);
  return out;
}

inline LocFdrVector locfdr_equicorrelated(const TwoGroupModel& model,
                                          std::span<const double> z) {
  EquicorrWorkspace ws(model);
  return locfdr_equicorrelated(ws, z);
}

// ---------------------------------------------------------------------------
// Exhaustive oracle
// ---------------------------------------------------------------------------

namespace detail {

inline double mvn_logpdf(const Eigen::VectorXd& x, const Eigen::VectorXd& mean,
                         const Eigen::MatrixXd& cov, int block) {
  const auto llt = checked_llt(cov, block);
  Eigen::VectorXd d = x - mean;
  llt.matrixL().solveInPlace(d);
  double log_det_half = 0.0;
  const Eigen::MatrixXd l = llt.matrixL();
  for (Eigen::Index i = 0; i < l.rows(); ++i) log_det_half += std::log(l(i, i));
  return -0.5 * x.size() * kLog2Pi - log_det_half - 0.5 * d.squaredNorm();
}

inline double joint_logpdf(const TwoGroupModel& model, std::span<const int> h,
                           std::span<const double> z) {
  if (std::holds_alternative<Independent>(model.dependence)) {
    double acc = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i)
      acc += h[i] ? model.mixture.alt_logpdf(z[i])
                  : model.mixture.null_logpdf(z[i]);
    return acc;
  }
  if (const auto* bd = std::get_if<BlockDependence>(&model.dependence)) {
    double acc = 0.0;
    std::size_t off = 0;
    for (std::size_t b = 0; b < bd->block_sizes.size(); ++b) {
      const auto s = static_cast<std::size_t>(bd->block_sizes[b]);
      std::span<const int> hb(h.data() + off, s);
      Eigen::VectorXd zb(static_cast<Eigen::Index>(s));
      for (std::size_t i = 0; i < s; ++i)
        zb(static_cast<Eigen::Index>(i)) = z[off + i];
      acc += mvn_logpdf(zb, bd->mean(hb, static_cast<int>(b)),
                        bd->cov(hb, static_cast<int>(b)), static_cast<int>(b));
      off += s;
    }
    return acc;
  }
  const auto& eq = std::get<Equicorrelated>(model.dependence);
  const auto p = EquicorrParams::from(model.k, eq);
  double sum_d = 0.0, sum_d2 = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double d = z[i] - eq.delta * h[i];
    sum_d += d;
    sum_d2 += d * d;
  }
  const double quad = p.a * sum_d2 + p.b * (sum_d * sum_d - sum_d2);
  const double log_det = model.k * std::log(eq.sigma2) +
                         (model.k - 1) * std::log1p(-eq.rho) +
                         std::log1p(eq.rho * (model.k - 1));
  return -0.5 * (model.k * kLog2Pi + log_det + quad);
}

} // namespace detail

inline LocFdrVector locfdr_bruteforce(const TwoGroupModel& model,
                                      std::span<const double> z) {
  if (model.k > 20)
    throw ConfigError("bruteforce posterior: k > 20 is not enumerable");
  if (z.size() != static_cast<std::size_t>(model.k))
    throw DataError("bruteforce posterior: z length does not match k");
  const auto k = static_cast<std::size_t>(model.k);
  const double log_pi1 = detail::safe_log(model.mixture.pi);
  const double log_pi0 = detail::safe_log(1.0 - model.mixture.pi);
  std::vector<int> h(k);
  std::vector<double> num(k, kNegInf);
  double den = kNegInf;
  const std::uint32_t n_cfg = 1u << k;
  for (std::uint32_t cfg = 0; cfg < n_cfg; ++cfg) {
    detail::decode_config(cfg, h);
    const int ones = std::popcount(cfg);
    const double lp = (ones ? ones * log_pi1 : 0.0) +
                      (static_cast<int>(k) - ones
                           ? (static_cast<int>(k) - ones) * log_pi0
                           : 0.0);
    if (lp == kNegInf) continue;
    const double lv = lp + detail::joint_logpdf(model, h, z);
    den = logaddexp(den, lv);
    for (std::size_t i = 0; i < k; ++i)
      if (!h[i]) num[i] = logaddexp(num[i], lv);
  }
  LocFdrVector out;
  out.t.resize(k);
  for (std::size_t i = 0; i < k; ++i) out.t[i] = std::exp(num[i] - den);
  out.sort_perm = make_sort_perm(out.t);
  return out;
}

// Dispatch on the model's dependence; builds a transient workspace for the
// dependent engines (hot paths should hold a workspace instead).
inline LocFdrVector locfdr(const TwoGroupModel& model, std::span<const double> z,
                           int max_block_size = 20) {
  if (std::holds_alternative<Independent>(model.dependence))
    return locfdr_independent(model, z);
  if (std::holds_alternative<BlockDependence>(model.dependence))
    return locfdr_block(model, z, max_block_size);
  return locfdr_equicorrelated(model, z);
}

} // namespace omt
