#pragma once
// Monte-Carlo experiment harness.  Calibrates a set of procedure variants
// against a data-generating model, evaluates all of them on a shared stream
// of fresh replications (common random numbers), and reports power and
// error-rate estimates with standard errors.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "omt/errors.hpp"
#include "omt/estimate.hpp"
#include "omt/locfdr.hpp"
#include "omt/model.hpp"
#include "omt/parallel.hpp"
#include "omt/policy.hpp"
#include "omt/rng.hpp"

namespace omt {

// ---------------------------------------------------------------------------
// Procedure variants
// ---------------------------------------------------------------------------

// omt          joint-posterior statistic, policy calibrated on the true model
// marg         marginal-posterior statistic, calibrated on the true model
//              (the false-rejection cost of each draw is still evaluated with
//              the joint posterior, so the constraint is honest)
// ind          marginal-posterior statistic, calibrated as if the statistics
//              were independent (misspecified under dependence)
// est          per-replication pipeline: fit a normal mixture to the observed
//              z-scores, calibrate a policy under the fitted model, decide
// est_mfdr     per-replication step-up rule on fitted posterior statistics
// adaptive_bh  BH with the plug-in null-fraction estimate
// bh           plain Benjamini-Hochberg on one-sided p-values
// oracle_bh    BH with the true null fraction
enum class Procedure { omt, marg, ind, est, est_mfdr, adaptive_bh, bh, oracle_bh };

inline std::string to_string(Procedure p) {
  switch (p) {
    case Procedure::omt: return "omt";
    case Procedure::marg: return "marg";
    case Procedure::ind: return "ind";
    case Procedure::est: return "est";
    case Procedure::est_mfdr: return "est_mfdr";
    case Procedure::adaptive_bh: return "adaptive_bh";
    case Procedure::bh: return "bh";
    case Procedure::oracle_bh: return "oracle_bh";
  }
  throw ConfigError("unknown procedure");
}

inline Procedure procedure_from_string(const std::string& s) {
  if (s == "omt") return Procedure::omt;
  if (s == "marg") return Procedure::marg;
  if (s == "ind") return Procedure::ind;
  if (s == "est") return Procedure::est;
  if (s == "est_mfdr") return Procedure::est_mfdr;
  if (s == "adaptive_bh") return Procedure::adaptive_bh;
  if (s == "bh") return Procedure::bh;
  if (s == "oracle_bh") return Procedure::oracle_bh;
  throw ConfigError("unknown procedure: " + s);
}

inline std::string criterion_label(Criterion c) {
  switch (c) {
    case Criterion::fdr: return "FDR";
    case Criterion::pfdr: return "pFDR";
    case Criterion::mfdr: return "mFDR";
  }
  throw ConfigError("unknown criterion");
}

struct ProcedureVariant {
  Procedure procedure = Procedure::omt;
  // Used by omt / marg / ind / est; the remaining procedures carry their own
  // fixed rule and ignore it.
  Criterion criterion = Criterion::fdr;

  bool uses_criterion() const {
    return procedure == Procedure::omt || procedure == Procedure::marg ||
           procedure == Procedure::ind || procedure == Procedure::est;
  }

  std::string label() const {
    switch (procedure) {
      case Procedure::omt: return "OMT-" + criterion_label(criterion);
      case Procedure::marg: return "marg-" + criterion_label(criterion);
      case Procedure::ind: return "ind-" + criterion_label(criterion);
      case Procedure::est: return "est-OMT-" + criterion_label(criterion);
      case Procedure::est_mfdr: return "est-mFDR";
      case Procedure::adaptive_bh: return "adaptive-BH";
      case Procedure::bh: return "BH";
      case Procedure::oracle_bh: return "oracle-BH";
    }
    throw ConfigError("unknown procedure");
  }
};

// ---------------------------------------------------------------------------
// Replication metrics
// ---------------------------------------------------------------------------

struct RepRecord {
  int v = 0;  // false rejections
  int r = 0;  // total rejections
};

struct VariantMetrics {
  std::string label;
  std::size_t n_reps = 0;
  double tp = 0.0;  // mean true positives, E[R - V]
  double tp_se = 0.0;
  double fdr = 0.0;  // mean of V / max(R, 1)
  double fdr_se = 0.0;
  std::optional<double> pfdr;  // mean of V/R over replications with R > 0
  std::optional<double> pfdr_se;
  std::optional<double> mfdr;  // sum V / sum R
  std::optional<double> mfdr_se;
  double pr_no_rejection = 0.0;
  double pr_no_rejection_se = 0.0;
};

// Point estimates use plain means and ratios, so the identity
// fdr = pfdr * (1 - pr_no_rejection) holds exactly on a shared replication
// set.  Standard errors: sample-sd/sqrt(n) for the means, a ratio-estimator
// (delta method) expansion for mfdr, and a shrunken-proportion formula for
// pr_no_rejection so the SE stays positive at the boundaries.
inline VariantMetrics metrics_from_replications(std::span<const RepRecord> reps,
                                                std::string label = {}) {
  const std::size_t n = reps.size();
  if (n == 0) throw DataError("no replication records");
  for (const auto& rec : reps)
    if (rec.v < 0 || rec.r < rec.v)
      throw DataError("replication record must satisfy 0 <= v <= r");

  VariantMetrics m;
  m.label = std::move(label);
  m.n_reps = n;

  const double dn = static_cast<double>(n);
  double sum_tp = 0.0, sum_fdp = 0.0, sum_v = 0.0, sum_r = 0.0, sum_pf = 0.0;
  std::size_t n_pos = 0;
  for (const auto& rec : reps) {
    sum_tp += rec.r - rec.v;
    sum_v += rec.v;
    sum_r += rec.r;
    if (rec.r > 0) {
      sum_fdp += static_cast<double>(rec.v) / rec.r;
      sum_pf += static_cast<double>(rec.v) / rec.r;
      ++n_pos;
    }
  }
  m.tp = sum_tp / dn;
  m.fdr = sum_fdp / dn;
  m.pr_no_rejection = static_cast<double>(n - n_pos) / dn;

  double ss_tp = 0.0, ss_fdp = 0.0, ss_pf = 0.0, ss_u = 0.0;
  const double theta = sum_r > 0.0 ? sum_v / sum_r : 0.0;
  const double pf_mean = n_pos > 0 ? sum_pf / static_cast<double>(n_pos) : 0.0;
  for (const auto& rec : reps) {
    const double tp_d = (rec.r - rec.v) - m.tp;
    ss_tp += tp_d * tp_d;
    const double fdp = rec.r > 0 ? static_cast<double>(rec.v) / rec.r : 0.0;
    ss_fdp += (fdp - m.fdr) * (fdp - m.fdr);
    if (rec.r > 0) ss_pf += (fdp - pf_mean) * (fdp - pf_mean);
    const double u = rec.v - theta * rec.r;
    ss_u += u * u;
  }
  const auto se_of = [](double ss, std::size_t cnt) {
    if (cnt < 2) return 0.0;
    const double c = static_cast<double>(cnt);
    return std::sqrt(std::max(0.0, ss / (c - 1.0)) / c);
  };
  m.tp_se = se_of(ss_tp, n);
  m.fdr_se = se_of(ss_fdp, n);

  if (n_pos > 0) {
    m.pfdr = pf_mean;
    m.pfdr_se = se_of(ss_pf, n_pos);
  }
  if (sum_r > 0.0) {
    m.mfdr = theta;
    // Ratio estimator: Var(V-bar / R-bar) ~ Var(v - theta r) / (n R-bar^2).
    const double r_bar = sum_r / dn;
    m.mfdr_se = n >= 2 ? se_of(ss_u, n) / r_bar : 0.0;
  }
  const double x0 = static_cast<double>(n - n_pos);
  const double p_shrunk = (x0 + 0.5) / (dn + 1.0);
  m.pr_no_rejection_se = std::sqrt(p_shrunk * (1.0 - p_shrunk) / dn);
  return m;
}

// ---------------------------------------------------------------------------
// Experiment harness
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  double alpha = 0.05;
  std::size_t n_reps = 1000;
  std::size_t n_cal = 10000;  // calibration draws for fixed-model policies
  std::uint64_t seed = 0;
  int workers = 1;
  int max_block_size = 20;
  double cal_tol = 1e-4;  // multiplier bracket width for fdr/pfdr calibration
  double mu_limit = static_cast<double>(1ULL << 40);

  // Estimated-model pipeline (est / est_mfdr variants).  Each replication
  // fits its own mixture and, for est, calibrates a policy under the fitted
  // model with est_n_cal fresh draws.
  std::size_t est_n_cal = 2000;
  int est_components = 2;
  bool est_pin_null = true;
  int est_restarts = 2;
};

struct SimulationReport {
  std::vector<VariantMetrics> rows;  // one per requested variant, in order
  // Calibrated policies for the fixed-policy variants (omt / marg / ind);
  // per-replication pipelines leave their slot empty.
  std::vector<std::optional<CalibratedPolicy>> policies;
  double alpha = 0.0;
  std::size_t n_reps = 0;
  std::size_t n_cal = 0;
  std::uint64_t seed = 0;
  double wall_seconds = 0.0;
};

// Plug-in null-fraction smoothing parameter for the adaptive BH baseline.
inline constexpr double kAdaptiveBhLambda = 0.5;

namespace detail {

inline constexpr std::uint64_t kVariantCalLabel = 0x73696d63;  // "simc"
inline constexpr std::uint64_t kRepStreamLabel = 0x7265706c;   // "repl"
inline constexpr std::uint64_t kRepFitLabel = 0x73696d66;      // "simf"
inline constexpr std::uint64_t kRepCalLabel = 0x73696d65;      // "sime"

// Decide statistics are the marginal posteriors; the false-rejection cost of
// each calibration draw is still evaluated with the joint posterior, so the
// calibrated constraint is exact for the sub-optimal statistic.
inline DrawFactory marg_draw_factory(TwoGroupModel model,
                                     int max_block_size = 20) {
  if (model.is_independent())
    return model_draw_factory(std::move(model), max_block_size);
  return [model, max_block_size]() -> DrawFn {
    struct State {
      TwoGroupModel m;
      std::optional<BlockWorkspace> bws;
      std::optional<EquicorrWorkspace> ews;
    };
    auto st = std::make_shared<State>(State{model, {}, {}});
    if (std::holds_alternative<BlockDependence>(st->m.dependence))
      st->bws.emplace(st->m, max_block_size);
    else
      st->ews.emplace(st->m);
    return [st](Rng& rng) -> StatisticPair {
      const Sample s = sample(st->m, rng);
      std::vector<double> full = st->bws ? locfdr_block(*st->bws, s.z).t
                                         : locfdr_equicorrelated(*st->ews, s.z).t;
      std::vector<double> marg = marginal_locfdr(st->m.mixture, s.z).t;
      return {std::move(marg), std::move(full)};
    };
  };
}

inline TwoGroupModel independence_assumed(const TwoGroupModel& model) {
  TwoGroupModel ind = model;
  ind.dependence = Independent{};
  return ind;
}

inline TwoGroupModel fitted_model(const FittedMixture& fit, int k) {
  TwoGroupModel m;
  m.k = k;
  m.mixture = fit.to_marginal();
  m.dependence = Independent{};
  return m;
}

struct RepCounts {
  int v = 0;
  int r = 0;
};

inline RepCounts count_rejections(std::span<const int> d,
                                  std::span<const int> h) {
  RepCounts c;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!d[i]) continue;
    ++c.r;
    if (!h[i]) ++c.v;
  }
  return c;
}

}  // namespace detail

inline SimulationReport run_experiment(
    const TwoGroupModel& model, const std::vector<ProcedureVariant>& variants,
    const ExperimentConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  model.validate();
  if (variants.empty()) throw ConfigError("no procedure variants requested");
  if (cfg.n_reps == 0) throw ConfigError("n_reps must be positive");
  if (!(cfg.alpha > 0.0 && cfg.alpha < 1.0))
    throw ConfigError("alpha must lie strictly between 0 and 1");

  const std::size_t n_var = variants.size();
  const std::size_t k = static_cast<std::size_t>(model.k);
  const int workers = cfg.workers < 1 ? 1 : cfg.workers;

  // --- Phase 1: calibrate the fixed-policy variants, each on its own
  // calibration stream.
  std::vector<std::optional<CalibratedPolicy>> policies(n_var);
  for (std::size_t vi = 0; vi < n_var; ++vi) {
    const ProcedureVariant& v = variants[vi];
    DrawFactory factory;
    switch (v.procedure) {
      case Procedure::omt:
        factory = model_draw_factory(model, cfg.max_block_size);
        break;
      case Procedure::marg:
        factory = detail::marg_draw_factory(model, cfg.max_block_size);
        break;
      case Procedure::ind:
        factory = model_draw_factory(detail::independence_assumed(model),
                                     cfg.max_block_size);
        break;
      default:
        continue;  // calibrated per replication or not at all
    }
    CalibrateOptions opt;
    opt.n_cal = cfg.n_cal;
    opt.seed = derive_seed(cfg.seed, detail::kVariantCalLabel, vi);
    opt.workers = workers;
    opt.tol = cfg.cal_tol;
    opt.mu_limit = cfg.mu_limit;
    try {
      policies[vi] = calibrate(factory, v.criterion, cfg.alpha, opt);
    } catch (const CalibrationError& e) {
      throw CalibrationError(v.label() + ": " + e.what());
    }
  }

  bool need_marg = false, need_pvals = false, need_fit = false;
  for (const auto& v : variants) {
    switch (v.procedure) {
      case Procedure::marg:
      case Procedure::ind:
        need_marg = true;
        break;
      case Procedure::est:
      case Procedure::est_mfdr:
        need_fit = true;
        break;
      case Procedure::adaptive_bh:
      case Procedure::bh:
      case Procedure::oracle_bh:
        need_pvals = true;
        break;
      case Procedure::omt:
        break;
    }
  }

  // --- Phase 2: shared evaluation replications.  Replication j draws from
  // its own child stream, so results are reproducible for any worker count;
  // the per-replication mixture fit and calibration seeds are derived from
  // the replication index for the same reason.
  const Rng root(cfg.seed);
  std::vector<std::vector<detail::RepCounts>> records(
      n_var, std::vector<detail::RepCounts>(cfg.n_reps));

  struct WorkerState {
    bool ready = false;
    std::optional<BlockWorkspace> bws;
    std::optional<EquicorrWorkspace> ews;
  };
  std::vector<WorkerState> wstate(static_cast<std::size_t>(workers));

  parallel_for(cfg.n_reps, workers, [&](int w, std::size_t j) {
    auto& ws = wstate[static_cast<std::size_t>(w)];
    if (!ws.ready) {
      if (std::holds_alternative<BlockDependence>(model.dependence))
        ws.bws.emplace(model, cfg.max_block_size);
      else if (std::holds_alternative<Equicorrelated>(model.dependence))
        ws.ews.emplace(model);
      ws.ready = true;
    }

    Rng rng = root.child(detail::kRepStreamLabel, j);
    const Sample s = sample(model, rng);

    LocFdrVector t_full;
    if (ws.bws)
      t_full = locfdr_block(*ws.bws, s.z);
    else if (ws.ews)
      t_full = locfdr_equicorrelated(*ws.ews, s.z);
    else
      t_full = marginal_locfdr(model.mixture, s.z);

    std::optional<LocFdrVector> t_marg;
    if (need_marg) {
      if (model.is_independent())
        t_marg = t_full;
      else
        t_marg = marginal_locfdr(model.mixture, s.z);
    }

    std::vector<double> pvals;
    if (need_pvals) {
      pvals.resize(k);
      for (std::size_t i = 0; i < k; ++i)
        pvals[i] = model.mixture.null_cdf(s.z[i]);
    }

    // One mixture fit per replication, shared by the estimated variants.
    std::optional<FittedMixture> fit;
    std::optional<LocFdrVector> t_fit;
    if (need_fit) {
      EmConfig em = EmConfig::conservative(cfg.est_components, cfg.est_pin_null);
      em.n_restarts = cfg.est_restarts;
      em.seed = derive_seed(cfg.seed, detail::kRepFitLabel, j);
      fit = fit_mixture(s.z, em);
      if (fit->pi_hat > 1e-12 && fit->pi_hat < 1.0 - 1e-12)
        t_fit = marginal_locfdr(fit->to_marginal(), s.z);
    }

    for (std::size_t vi = 0; vi < n_var; ++vi) {
      const ProcedureVariant& v = variants[vi];
      detail::RepCounts rc;
      switch (v.procedure) {
        case Procedure::omt:
          rc = detail::count_rejections(decide(*policies[vi], t_full), s.h);
          break;
        case Procedure::marg:
        case Procedure::ind:
          rc = detail::count_rejections(decide(*policies[vi], *t_marg), s.h);
          break;
        case Procedure::est: {
          if (!t_fit) {
            // Degenerate fit: no estimated signal means no rejections; an
            // all-signal fit leaves no null component to test against, so
            // everything is rejected.
            if (fit->pi_hat >= 1.0 - 1e-12)
              rc = {static_cast<int>(k) -
                        static_cast<int>(std::count(s.h.begin(), s.h.end(), 1)),
                    static_cast<int>(k)};
            break;
          }
          CalibrateOptions opt;
          opt.n_cal = cfg.est_n_cal;
          opt.seed = derive_seed(cfg.seed, detail::kRepCalLabel + vi, j);
          opt.workers = 1;  // replications already run in parallel
          opt.tol = cfg.cal_tol;
          opt.mu_limit = cfg.mu_limit;
          CalibratedPolicy pol;
          try {
            pol = calibrate(detail::fitted_model(*fit, model.k), v.criterion,
                            cfg.alpha, opt, cfg.max_block_size);
          } catch (const CalibrationError& e) {
            throw CalibrationError(v.label() + " (replication " +
                                   std::to_string(j) + "): " + e.what());
          }
          rc = detail::count_rejections(decide(pol, *t_fit), s.h);
          break;
        }
        case Procedure::est_mfdr: {
          if (!t_fit) break;  // no estimated signal: reject nothing
          const RejectionSet rs = est_mfdr_stepup(t_fit->t, cfg.alpha);
          rc = detail::count_rejections(rs.d, s.h);
          break;
        }
        case Procedure::adaptive_bh: {
          const double pi0 =
              std::max(1.0 - storey_pi(pvals, kAdaptiveBhLambda),
                       1.0 / static_cast<double>(k));
          rc = detail::count_rejections(bh(pvals, cfg.alpha, pi0).d, s.h);
          break;
        }
        case Procedure::bh:
          rc = detail::count_rejections(bh(pvals, cfg.alpha).d, s.h);
          break;
        case Procedure::oracle_bh: {
          const double pi0 = std::max(1.0 - model.mixture.pi,
                                      1.0 / static_cast<double>(k));
          rc = detail::count_rejections(bh(pvals, cfg.alpha, pi0).d, s.h);
          break;
        }
      }
      records[vi][j] = rc;
    }
  });

  // --- Phase 3: fixed-order reduction keyed by replication index.
  SimulationReport report;
  report.alpha = cfg.alpha;
  report.n_reps = cfg.n_reps;
  report.n_cal = cfg.n_cal;
  report.seed = cfg.seed;
  report.policies = std::move(policies);
  report.rows.reserve(n_var);
  std::vector<RepRecord> recs(cfg.n_reps);
  for (std::size_t vi = 0; vi < n_var; ++vi) {
    for (std::size_t j = 0; j < cfg.n_reps; ++j)
      recs[j] = RepRecord{records[vi][j].v, records[vi][j].r};
    report.rows.push_back(metrics_from_replications(recs, variants[vi].label()));
  }
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return report;
}

inline SimulationReport run_experiment(
    const TwoGroupModel& model, const std::vector<ProcedureVariant>& variants,
    double alpha, std::size_t n_reps, std::size_t n_cal, std::uint64_t seed) {
  ExperimentConfig cfg;
  cfg.alpha = alpha;
  cfg.n_reps = n_reps;
  cfg.n_cal = n_cal;
  cfg.seed = seed;
  return run_experiment(model, variants, cfg);
}

}  // namespace omt
