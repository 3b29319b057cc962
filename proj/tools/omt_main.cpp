// Command-line driver for the library. Six subcommands:
//
//   locfdr     model config + z CSV    -> posterior null probability CSV
//   calibrate  model config            -> calibrated policy JSON
//   decide     model + policy + z CSV  -> 0/1 decision CSV
//   simulate   experiment config       -> replication report CSV
//   fit        z or p CSV              -> fitted mixture JSON
//   analyze    z or p CSV              -> per-gene decision table + summary
//
// Exit codes: 0 success, 2 configuration or usage errors, 3 calibration
// failures, 4 data errors. Every successful run writes a manifest.json next
// to its outputs recording the command line, input digests, the seed in
// effect, timestamps, output names, and warnings. Runs that fix the seed
// produce byte-identical CSV and record outputs on repetition; without
// --seed a fresh one is drawn from system entropy and recorded.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "omt/errors.hpp"
#include "omt/estimate.hpp"
#include "omt/io.hpp"
#include "omt/locfdr.hpp"
#include "omt/math.hpp"
#include "omt/model.hpp"
#include "omt/policy.hpp"
#include "omt/rng.hpp"
#include "omt/simulate.hpp"
#include "omt/version.hpp"

namespace {

namespace fs = std::filesystem;

// Labels for per-purpose random streams derived from the user seed.
constexpr std::uint64_t kClampStream = 0x636c616d70;  // "clamp"
constexpr std::uint64_t kAnalyzeCalStream = 0x616e6163616c;  // "anacal"

// Collects inputs/outputs/warnings for one run and writes the manifest last.
struct RunContext {
  fs::path dir;
  omt::RunManifest man;

  RunContext(std::string subcommand, std::string command,
             const std::string& out_dir)
      : dir(out_dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec)
      throw omt::ConfigError("cannot create output directory: " + out_dir);
    man.subcommand = std::move(subcommand);
    man.command = std::move(command);
    man.started = omt::iso_utc_now();
  }

  std::string config_input(const std::string& path) {
    std::string text = omt::read_config_file(path);
    std::string digest = omt::fnv1a_hex(text);
    man.inputs.emplace_back(path, digest);
    if (!man.config_digest) man.config_digest = digest;
    return text;
  }

  std::string data_input(const std::string& path) {
    std::string text = omt::read_data_file(path);
    man.inputs.emplace_back(path, omt::fnv1a_hex(text));
    return text;
  }

  void emit(const std::string& name, std::string_view text) {
    omt::write_text_file((dir / name).string(), text);
    man.outputs.push_back(name);
  }

  void warn(std::string message) { man.warnings.push_back(std::move(message)); }

  void seed_from_flag(const CLI::Option* opt, std::uint64_t value) {
    if (opt->count() > 0) {
      man.seed = value;
      man.seed_source = "flag";
    } else {
      std::random_device rd;
      man.seed = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
      man.seed_source = "system";
    }
  }

  void finish() {
    man.finished = omt::iso_utc_now();
    omt::write_text_file((dir / "manifest.json").string(),
                         omt::manifest_to_json(man).dump(2) + "\n");
  }
};

std::string join_args(int argc, char** argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) {
    if (i) s += ' ';
    s += argv[i];
  }
  return s;
}

void note_calibration_quirks(RunContext& ctx, const std::string& label,
                             const omt::CalibrationDiagnostics& diag) {
  const std::string prefix = label.empty() ? "" : label + ": ";
  if (diag.grid_fallback)
    ctx.warn(prefix + "calibration used the monotone grid fallback");
  else if (!diag.monotone_ok)
    ctx.warn(prefix +
             "calibration error curve was not monotone on the audit grid");
  if (!diag.degenerate.empty())
    ctx.warn(prefix + "calibration hit a degenerate regime: " +
             diag.degenerate);
}

std::vector<double> read_z_vector(RunContext& ctx, const std::string& path,
                                  bool pvalues, std::uint64_t seed) {
  const std::string text = ctx.data_input(path);
  if (!pvalues) return omt::parse_column_csv(text, "z", path);
  const auto p = omt::parse_column_csv(text, "p", path);
  omt::Rng rng(omt::derive_seed(seed, kClampStream));
  auto clamped = omt::clamp_zscores(p, rng);
  if (clamped.n_clamped > 0)
    ctx.warn(std::to_string(clamped.n_clamped) +
             " p-value(s) transformed to z-scores beyond the clamp bound "
             "were replaced by boundary draws");
  return std::move(clamped.z);
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

struct LocfdrOpts {
  std::string config, data, out_dir = ".";
  int max_block_size = 20;
};

int run_locfdr(const LocfdrOpts& o, const std::string& cmdline) {
  RunContext ctx("locfdr", cmdline, o.out_dir);
  const auto model = omt::model_from_json_text(ctx.config_input(o.config));
  const auto z = omt::parse_column_csv(ctx.data_input(o.data), "z", o.data);
  if (std::cmp_not_equal(z.size(), model.k))
    throw omt::DataError("z vector length " + std::to_string(z.size()) +
                         " does not match model k=" + std::to_string(model.k));
  const auto lf = omt::locfdr(model, z, o.max_block_size);
  ctx.emit("t.csv", omt::column_csv("t", lf.t));
  ctx.finish();
  return 0;
}

struct CalibrateOpts {
  std::string config, criterion = "fdr", out_dir = ".";
  double alpha = 0.05;
  std::size_t n_cal = 10000;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
  int max_block_size = 20;
};

int run_calibrate(const CalibrateOpts& o, const std::string& cmdline) {
  RunContext ctx("calibrate", cmdline, o.out_dir);
  const auto model = omt::model_from_json_text(ctx.config_input(o.config));
  ctx.seed_from_flag(o.seed_opt, o.seed);
  omt::CalibrateOptions copt;
  copt.n_cal = o.n_cal;
  copt.seed = *ctx.man.seed;
  const auto policy =
      omt::calibrate(model, omt::criterion_from_string(o.criterion), o.alpha,
                     copt, o.max_block_size);
  note_calibration_quirks(ctx, "", policy.diag);
  ctx.emit("policy.json", omt::policy_to_json(policy).dump(2) + "\n");
  ctx.finish();
  return 0;
}

struct DecideOpts {
  std::string config, policy, data, out_dir = ".";
  int max_block_size = 20;
};

int run_decide(const DecideOpts& o, const std::string& cmdline) {
  RunContext ctx("decide", cmdline, o.out_dir);
  const auto model = omt::model_from_json_text(ctx.config_input(o.config));
  const auto policy = omt::policy_from_json_text(ctx.data_input(o.policy));
  const auto z = omt::parse_column_csv(ctx.data_input(o.data), "z", o.data);
  if (std::cmp_not_equal(z.size(), model.k))
    throw omt::DataError("z vector length " + std::to_string(z.size()) +
                         " does not match model k=" + std::to_string(model.k));
  const auto lf = omt::locfdr(model, z, o.max_block_size);
  const auto d = omt::decide(policy, lf);
  ctx.emit("decisions.csv", omt::column_csv("d", d));
  ctx.finish();
  return 0;
}

struct SimulateOpts {
  std::string config, out_dir = ".";
  std::size_t n_reps = 0, n_cal = 0;
  double alpha = 0.0;
  std::uint64_t seed = 0;
  int workers = 1, max_block_size = 20;
  CLI::Option *reps_opt = nullptr, *cal_opt = nullptr, *alpha_opt = nullptr,
              *seed_opt = nullptr, *workers_opt = nullptr,
              *block_opt = nullptr;
};

int run_simulate(const SimulateOpts& o, const std::string& cmdline) {
  RunContext ctx("simulate", cmdline, o.out_dir);
  const std::string text = ctx.config_input(o.config);
  const auto j = omt::parse_config_json(text, "experiment config");
  auto spec = omt::experiment_from_json(j);

  if (o.reps_opt->count()) spec.config.n_reps = o.n_reps;
  if (o.cal_opt->count()) spec.config.n_cal = o.n_cal;
  if (o.alpha_opt->count()) spec.config.alpha = o.alpha;
  if (o.workers_opt->count()) spec.config.workers = o.workers;
  if (o.block_opt->count()) spec.config.max_block_size = o.max_block_size;
  if (o.seed_opt->count()) {
    spec.config.seed = o.seed;
    ctx.man.seed_source = "flag";
  } else if (j.contains("seed")) {
    ctx.man.seed_source = "config";
  } else {
    std::random_device rd;
    spec.config.seed = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
    ctx.man.seed_source = "system";
  }
  ctx.man.seed = spec.config.seed;
  ctx.man.workers = spec.config.workers;

  const auto report =
      omt::run_experiment(spec.model, spec.variants, spec.config);
  for (std::size_t i = 0; i < report.rows.size(); ++i)
    if (report.policies[i])
      note_calibration_quirks(ctx, report.rows[i].label,
                              report.policies[i]->diag);
  ctx.emit("report.csv", omt::report_csv(report));
  ctx.finish();
  return 0;
}

struct FitOpts {
  std::string data, out_dir = ".";
  bool pvalues = false, free_null = false;
  int components = 2, restarts = 5;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
};

int run_fit(const FitOpts& o, const std::string& cmdline) {
  RunContext ctx("fit", cmdline, o.out_dir);
  ctx.seed_from_flag(o.seed_opt, o.seed);
  const auto z = read_z_vector(ctx, o.data, o.pvalues, *ctx.man.seed);
  auto cfg = omt::EmConfig::conservative(o.components, !o.free_null);
  cfg.n_restarts = o.restarts;
  cfg.seed = *ctx.man.seed;
  const auto fit = omt::fit_mixture(z, cfg);
  ctx.emit("mixture.json", omt::mixture_to_json(fit).dump(2) + "\n");
  ctx.finish();
  return 0;
}

struct AnalyzeOpts {
  std::string data, out_dir = ".";
  bool pvalues = false, free_null = false;
  double alpha = 0.05;
  std::size_t n_cal = 2000;
  int components = 2, restarts = 5;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
};

int run_analyze(const AnalyzeOpts& o, const std::string& cmdline) {
  RunContext ctx("analyze", cmdline, o.out_dir);
  ctx.seed_from_flag(o.seed_opt, o.seed);
  const std::uint64_t seed = *ctx.man.seed;

  // Data: keep the p-values for the p-value procedures; under z input the
  // one-sided p-value is the lower-tail standard normal probability.
  const std::string text = ctx.data_input(o.data);
  std::vector<double> z, p;
  if (o.pvalues) {
    p = omt::parse_column_csv(text, "p", o.data);
    omt::Rng rng(omt::derive_seed(seed, kClampStream));
    auto clamped = omt::clamp_zscores(p, rng);
    if (clamped.n_clamped > 0)
      ctx.warn(std::to_string(clamped.n_clamped) +
               " p-value(s) transformed to z-scores beyond the clamp bound "
               "were replaced by boundary draws");
    z = std::move(clamped.z);
  } else {
    z = omt::parse_column_csv(text, "z", o.data);
    p.resize(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) p[i] = omt::norm_cdf(z[i]);
  }
  const std::size_t k = z.size();

  // Mixture fit and the composite statistic it induces.
  auto cfg = omt::EmConfig::conservative(o.components, !o.free_null);
  cfg.n_restarts = o.restarts;
  cfg.seed = seed;
  const auto fit = omt::fit_mixture(z, cfg);
  ctx.emit("mixture.json", omt::mixture_to_json(fit).dump(2) + "\n");
  const auto t = omt::composite_locfdr(fit, std::span<const double>(z));

  // Calibrated policy under the fitted model; degenerate fits short-circuit.
  std::vector<int> d_omt;
  if (fit.pi_hat <= 1e-12) {
    d_omt.assign(k, 0);
    ctx.warn("fitted signal fraction is zero; the calibrated rule rejects "
             "nothing");
  } else if (fit.pi_hat >= 1.0 - 1e-12) {
    d_omt.assign(k, 1);
    ctx.warn("fitted signal fraction is one; the calibrated rule rejects "
             "everything");
  } else {
    const omt::TwoGroupModel fitted{static_cast<int>(k), fit.to_marginal(),
                                    omt::Independent{}};
    omt::CalibrateOptions copt;
    copt.n_cal = o.n_cal;
    copt.seed = omt::derive_seed(seed, kAnalyzeCalStream);
    const auto policy =
        omt::calibrate(fitted, omt::Criterion::fdr, o.alpha, copt);
    note_calibration_quirks(ctx, "calibrated rule", policy.diag);
    d_omt = omt::decide(policy, std::span<const double>(t));
  }

  const auto d_mfdr = omt::est_mfdr_stepup(t, o.alpha).d;
  const double pi0 = std::max(
      1.0 - omt::storey_pi(p, omt::kAdaptiveBhLambda),
      1.0 / static_cast<double>(k));
  const auto d_abh = omt::bh(p, o.alpha, pi0).d;
  const auto d_bh = omt::bh(p, o.alpha).d;

  std::string genes = "z,t,est_omt_fdr,est_mfdr,adaptive_bh,bh\n";
  for (std::size_t i = 0; i < k; ++i) {
    genes += omt::format_double(z[i]);
    genes += ',' + omt::format_double(t[i]);
    genes += ',' + std::to_string(d_omt[i]);
    genes += ',' + std::to_string(d_mfdr[i]);
    genes += ',' + std::to_string(d_abh[i]);
    genes += ',' + std::to_string(d_bh[i]);
    genes += '\n';
  }
  ctx.emit("genes.csv", genes);

  auto total = [](const std::vector<int>& d) {
    long n = 0;
    for (int x : d) n += x;
    return n;
  };
  std::string summary = "method,rejections\n";
  summary += "est-OMT-FDR," + std::to_string(total(d_omt)) + '\n';
  summary += "est-mFDR," + std::to_string(total(d_mfdr)) + '\n';
  summary += "adaptive-BH," + std::to_string(total(d_abh)) + '\n';
  summary += "BH," + std::to_string(total(d_bh)) + '\n';
  ctx.emit("summary.csv", summary);
  ctx.finish();
  return 0;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Optimal multiple-testing policies in the two-group model"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  app.set_version_flag("--version", std::string(omt::version));

  LocfdrOpts lo;
  auto* c_locfdr = app.add_subcommand(
      "locfdr", "Posterior null probabilities for a z vector under a model");
  c_locfdr->add_option("--config", lo.config, "Model config JSON")->required();
  c_locfdr->add_option("--data", lo.data, "One-column CSV with header 'z'")
      ->required();
  c_locfdr->add_option("--max-block-size", lo.max_block_size,
                       "Largest block the exact engine will enumerate");
  c_locfdr->add_option("--out-dir", lo.out_dir, "Output directory");

  CalibrateOpts co;
  auto* c_cal = app.add_subcommand(
      "calibrate", "Calibrate a rejection policy for a model by simulation");
  c_cal->add_option("--config", co.config, "Model config JSON")->required();
  c_cal->add_option("--alpha", co.alpha, "Error budget");
  c_cal->add_option("--criterion", co.criterion, "fdr, pfdr, or mfdr");
  c_cal->add_option("--cal-samples", co.n_cal, "Calibration draws");
  co.seed_opt = c_cal->add_option("--seed", co.seed, "Calibration RNG seed");
  c_cal->add_option("--max-block-size", co.max_block_size,
                    "Largest block the exact engine will enumerate");
  c_cal->add_option("--out-dir", co.out_dir, "Output directory");

  DecideOpts deo;
  auto* c_dec = app.add_subcommand(
      "decide", "Apply a calibrated policy to a z vector");
  c_dec->add_option("--config", deo.config, "Model config JSON")->required();
  c_dec->add_option("--policy", deo.policy, "Calibrated policy JSON")
      ->required();
  c_dec->add_option("--data", deo.data, "One-column CSV with header 'z'")
      ->required();
  c_dec->add_option("--max-block-size", deo.max_block_size,
                    "Largest block the exact engine will enumerate");
  c_dec->add_option("--out-dir", deo.out_dir, "Output directory");

  SimulateOpts so;
  auto* c_sim = app.add_subcommand(
      "simulate", "Replicated comparison of procedures under a known model");
  c_sim->add_option("--config", so.config, "Experiment config JSON")
      ->required();
  so.reps_opt = c_sim->add_option("--reps", so.n_reps, "Replications");
  so.cal_opt =
      c_sim->add_option("--cal-samples", so.n_cal, "Calibration draws");
  so.alpha_opt = c_sim->add_option("--alpha", so.alpha, "Error budget");
  so.seed_opt = c_sim->add_option("--seed", so.seed, "Experiment RNG seed");
  so.workers_opt = c_sim->add_option("--workers", so.workers,
                                     "Worker threads for the replication loop");
  so.block_opt = c_sim->add_option("--max-block-size", so.max_block_size,
                                   "Largest block the exact engine will "
                                   "enumerate");
  c_sim->add_option("--out-dir", so.out_dir, "Output directory");

  FitOpts fo;
  auto* c_fit = app.add_subcommand(
      "fit", "Fit a two-group normal mixture to z-scores or p-values");
  c_fit->add_option("--data", fo.data, "One-column CSV with header 'z' or 'p'")
      ->required();
  c_fit->add_flag("--pvalues", fo.pvalues,
                  "Input column holds one-sided p-values (header 'p')");
  c_fit->add_option("--components", fo.components, "Mixture components");
  c_fit->add_option("--restarts", fo.restarts, "EM restarts");
  c_fit->add_flag("--free-null", fo.free_null,
                  "Estimate the null component instead of pinning N(0,1)");
  fo.seed_opt = c_fit->add_option("--seed", fo.seed, "EM RNG seed");
  c_fit->add_option("--out-dir", fo.out_dir, "Output directory");

  AnalyzeOpts ao;
  auto* c_ana = app.add_subcommand(
      "analyze", "Fit a mixture and apply the estimated-model procedures");
  c_ana->add_option("--data", ao.data, "One-column CSV with header 'z' or 'p'")
      ->required();
  c_ana->add_flag("--pvalues", ao.pvalues,
                  "Input column holds one-sided p-values (header 'p')");
  c_ana->add_option("--alpha", ao.alpha, "Error budget");
  c_ana->add_option("--cal-samples", ao.n_cal,
                    "Calibration draws under the fitted model");
  c_ana->add_option("--components", ao.components, "Mixture components");
  c_ana->add_option("--restarts", ao.restarts, "EM restarts");
  c_ana->add_flag("--free-null", ao.free_null,
                  "Estimate the null component instead of pinning N(0,1)");
  ao.seed_opt = c_ana->add_option("--seed", ao.seed, "Pipeline RNG seed");
  c_ana->add_option("--out-dir", ao.out_dir, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  const std::string cmdline = join_args(argc, argv);
  try {
    if (app.got_subcommand(c_locfdr)) return run_locfdr(lo, cmdline);
    if (app.got_subcommand(c_cal)) return run_calibrate(co, cmdline);
    if (app.got_subcommand(c_dec)) return run_decide(deo, cmdline);
    if (app.got_subcommand(c_sim)) return run_simulate(so, cmdline);
    if (app.got_subcommand(c_fit)) return run_fit(fo, cmdline);
    if (app.got_subcommand(c_ana)) return run_analyze(ao, cmdline);
  } catch (const omt::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const omt::CalibrationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const omt::DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
