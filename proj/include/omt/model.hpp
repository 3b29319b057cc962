#pragma once

// Two-group model: each hypothesis i carries a latent indicator h_i ~
// Bernoulli(pi) (1 = signal), and the observation vector z is drawn
// conditionally on h. Marginal null/alternative laws are normal mixtures;
// joint dependence is either none, block-wise multivariate normal with
// h-dependent moments, or exchangeable (equicorrelated) multivariate normal
// with a common mean shift per signal.

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "omt/errors.hpp"
#include "omt/math.hpp"
#include "omt/rng.hpp"

namespace omt {

struct NormalComponent {
  double weight = 1.0;
  double mean = 0.0;
  double sd = 1.0;
};

inline double mixture_logpdf(std::span<const NormalComponent> comps, double z) {
  double acc = kNegInf;
  for (const auto& c : comps)
    acc = logaddexp(acc, std::log(c.weight) + norm_logpdf(z, c.mean, c.sd));
  return acc;
}

// Linear-space mixture density; kept as a plain weighted sum so that
// combining sub-mixtures linearly is exact.
inline double mixture_pdf(std::span<const NormalComponent> comps, double z) {
  double s = 0.0;
  for (const auto& c : comps) s += c.weight * norm_pdf(z, c.mean, c.sd);
  return s;
}

inline double mixture_cdf(std::span<const NormalComponent> comps, double z) {
  double s = 0.0;
  for (const auto& c : comps) s += c.weight * norm_cdf(z, c.mean, c.sd);
  return s;
}

inline double sample_mixture(std::span<const NormalComponent> comps, Rng& rng) {
  const double u = rng.uniform();
  double cum = 0.0;
  for (const auto& c : comps) {
    cum += c.weight;
    if (u < cum) return rng.normal(c.mean, c.sd);
  }
  const auto& last = comps.back();
  return rng.normal(last.mean, last.sd); // guards rounding of the weight sum
}

inline void validate_components(std::span<const NormalComponent> comps,
                                const std::string& which) {
  if (comps.empty()) throw ConfigError(which + " mixture has no components");
  double total = 0.0;
  for (const auto& c : comps) {
    if (!(c.weight >= 0.0)) throw ConfigError(which + " component weight < 0");
    if (!(c.sd > 0.0)) throw ConfigError(which + " component sd <= 0");
    total += c.weight;
  }
  if (std::abs(total - 1.0) > 1e-9)
    throw ConfigError(which + " component weights must sum to 1");
}

// Marginal law of one coordinate: z | h=0 ~ null mixture, z | h=1 ~
// alternative mixture, Pr(h=1) = pi.
struct MarginalMixture {
  double pi = 0.0;
  std::vector<NormalComponent> null_components;
  std::vector<NormalComponent> alt_components;

  void validate() const {
    if (!(pi >= 0.0 && pi <= 1.0)) throw ConfigError("pi outside [0,1]");
    validate_components(null_components, "null");
    validate_components(alt_components, "alternative");
  }

  double null_logpdf(double z) const { return mixture_logpdf(null_components, z); }
  double alt_logpdf(double z) const { return mixture_logpdf(alt_components, z); }
  double null_pdf(double z) const { return mixture_pdf(null_components, z); }
  double alt_pdf(double z) const { return mixture_pdf(alt_components, z); }
  double null_cdf(double z) const { return mixture_cdf(null_components, z); }

  double marginal_pdf(double z) const {
    return (1.0 - pi) * null_pdf(z) + pi * alt_pdf(z);
  }
};

// Convenience: single-component null/alternative marginal.
inline MarginalMixture simple_mixture(double pi, double alt_mean,
                                      double null_sd = 1.0,
                                      double alt_sd = 1.0) {
  return MarginalMixture{pi,
                         {{1.0, 0.0, null_sd}},
                         {{1.0, alt_mean, alt_sd}}};
}

struct Independent {};

// Joint law per block: z_block | h_block ~ N(mean(h_block), cov(h_block)).
// Builders receive the block's h-subvector and the block index.
using BlockCovFn =
    std::function<Eigen::MatrixXd(std::span<const int>, int)>;
using BlockMeanFn =
    std::function<Eigen::VectorXd(std::span<const int>, int)>;

struct BlockDependence {
  std::vector<int> block_sizes;
  BlockCovFn cov;
  BlockMeanFn mean;
};

// Exchangeable joint law: z | h ~ N(delta * h, sigma2 * ((1-rho) I + rho 11')).
struct Equicorrelated {
  double rho = 0.0;
  double sigma2 = 1.0;
  double delta = 0.0;
};

using DependenceSpec = std::variant<Independent, BlockDependence, Equicorrelated>;

// Exchangeable-style blocks: covariance has diagonal diag_base + diag_h * h_i
// and constant off-diagonal rho (cycled per block from rho_cycle); the mean
// shifts by delta for each signal coordinate.
inline BlockDependence make_exchangeable_blocks(std::vector<int> sizes,
                                                std::vector<double> rho_cycle,
                                                double diag_base, double diag_h,
                                                double delta) {
  if (rho_cycle.empty()) throw ConfigError("blocks: empty rho list");
  BlockDependence dep;
  dep.block_sizes = std::move(sizes);
  dep.cov = [rho_cycle, diag_base, diag_h](std::span<const int> h,
                                           int block) -> Eigen::MatrixXd {
    const double rho = rho_cycle[static_cast<std::size_t>(block) % rho_cycle.size()];
    const auto s = static_cast<Eigen::Index>(h.size());
    Eigen::MatrixXd m = Eigen::MatrixXd::Constant(s, s, rho);
    for (Eigen::Index i = 0; i < s; ++i)
      m(i, i) = diag_base + diag_h * h[static_cast<std::size_t>(i)];
    return m;
  };
  dep.mean = [delta](std::span<const int> h, int) -> Eigen::VectorXd {
    Eigen::VectorXd v(static_cast<Eigen::Index>(h.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i)
      v(i) = delta * h[static_cast<std::size_t>(i)];
    return v;
  };
  return dep;
}

struct TwoGroupModel {
  int k = 0;
  MarginalMixture mixture;
  DependenceSpec dependence = Independent{};

  bool is_independent() const {
    return std::holds_alternative<Independent>(dependence);
  }

  void validate() const;
};

struct Sample {
  std::vector<int> h;
  std::vector<double> z;
};

namespace detail {

// Enumerate h configurations of one block in lexicographic order (bit i of
// `code` is h over coordinate i). Shared by validation, sampling caches and
// the block posterior engine.
inline void decode_config(std::uint32_t code, std::span<int> h) {
  for (std::size_t i = 0; i < h.size(); ++i)
    h[i] = static_cast<int>((code >> i) & 1u);
}

inline Eigen::LLT<Eigen::MatrixXd> checked_llt(const Eigen::MatrixXd& cov,
                                               int block) {
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success)
    throw ConfigError("block " + std::to_string(block) +
                      ": covariance is not positive definite");
  return llt;
}

} // namespace detail

inline void TwoGroupModel::validate() const {
  if (k <= 0) throw ConfigError("model: k must be positive");
  mixture.validate();
  if (const auto* bd = std::get_if<BlockDependence>(&dependence)) {
    if (!bd->cov || !bd->mean) throw ConfigError("blocks: missing builders");
    const long total =
        std::accumulate(bd->block_sizes.begin(), bd->block_sizes.end(), 0L);
    if (total != k) throw ConfigError("blocks: sizes do not sum to k");
    // Positive definiteness probed at construction: all configurations while
    // the enumeration stays small, the all-null/all-signal extremes otherwise.
    long budget = 65536;
    for (std::size_t b = 0; b < bd->block_sizes.size(); ++b) {
      const int s = bd->block_sizes[b];
      if (s <= 0) throw ConfigError("blocks: non-positive block size");
      if (s >= 31) throw ConfigError("blocks: block size too large");
      std::vector<int> h(static_cast<std::size_t>(s));
      const std::uint32_t n_cfg = 1u << s;
      const bool full = (budget -= n_cfg) >= 0;
      for (std::uint32_t cfg = 0; cfg < n_cfg; ++cfg) {
        if (!full && cfg != 0 && cfg != n_cfg - 1) continue;
        detail::decode_config(cfg, h);
        const Eigen::MatrixXd cov = bd->cov(h, static_cast<int>(b));
        if (cov.rows() != s || cov.cols() != s)
          throw ConfigError("blocks: covariance builder returned wrong shape");
        if (bd->mean(h, static_cast<int>(b)).size() != s)
          throw ConfigError("blocks: mean builder returned wrong shape");
        detail::checked_llt(cov, static_cast<int>(b));
      }
    }
  } else if (const auto* eq = std::get_if<Equicorrelated>(&dependence)) {
    if (!(eq->sigma2 > 0.0)) throw ConfigError("equicorrelated: sigma2 <= 0");
    if (!(eq->rho < 1.0)) throw ConfigError("equicorrelated: rho >= 1");
    if (k >= 2 && !(eq->rho > -1.0 / (k - 1)))
      throw ConfigError("equicorrelated: rho <= -1/(k-1)");
  }
}

inline Sample sample(const TwoGroupModel& model, Rng& rng) {
  Sample s;
  const auto n = static_cast<std::size_t>(model.k);
  s.h.resize(n);
  s.z.resize(n);
  for (auto& hi : s.h) hi = rng.bernoulli(model.mixture.pi) ? 1 : 0;

  if (std::holds_alternative<Independent>(model.dependence)) {
    for (std::size_t i = 0; i < n; ++i)
      s.z[i] = s.h[i] ? sample_mixture(model.mixture.alt_components, rng)
                      : sample_mixture(model.mixture.null_components, rng);
  } else if (const auto* bd = std::get_if<BlockDependence>(&model.dependence)) {
    std::size_t off = 0;
    for (std::size_t b = 0; b < bd->block_sizes.size(); ++b) {
      const auto sz = static_cast<std::size_t>(bd->block_sizes[b]);
      std::span<const int> hb(s.h.data() + off, sz);
      const Eigen::VectorXd mu = bd->mean(hb, static_cast<int>(b));
      const auto llt = detail::checked_llt(bd->cov(hb, static_cast<int>(b)),
                                           static_cast<int>(b));
      Eigen::VectorXd eps(static_cast<Eigen::Index>(sz));
      for (Eigen::Index i = 0; i < eps.size(); ++i) eps(i) = rng.normal();
      const Eigen::VectorXd zb = mu + llt.matrixL() * eps;
      for (std::size_t i = 0; i < sz; ++i) s.z[off + i] = zb(static_cast<Eigen::Index>(i));
      off += sz;
    }
  } else {
    const auto& eq = std::get<Equicorrelated>(model.dependence);
    // Spectral sampler: sqrt(1-rho) on the centered part, sqrt(1+rho(k-1))
    // on the mean direction; O(k) and valid for the whole admissible rho range.
    const double sigma = std::sqrt(eq.sigma2);
    const double a = std::sqrt(1.0 - eq.rho);
    const double b = std::sqrt(1.0 + eq.rho * (model.k - 1));
    std::vector<double> eps(n);
    double mean_eps = 0.0;
    for (auto& e : eps) {
      e = rng.normal();
      mean_eps += e;
    }
    mean_eps /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      s.z[i] = eq.delta * s.h[i] + sigma * (a * (eps[i] - mean_eps) + b * mean_eps);
  }
  return s;
}

} // namespace omt
