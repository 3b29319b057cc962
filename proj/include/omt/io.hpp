#pragma once
// File formats for the command-line tool.
//
//   - one-column CSV vectors (z-scores, p-values, statistics, decisions)
//   - simulation report tables with stable column names
//   - JSON records: model configs, experiment configs, calibrated policies,
//     fitted mixtures, and per-run manifests
//   - FNV-1a digests so a manifest can pin down exactly which bytes went in
//
// Error discipline: anything wrong with a *configuration* file (missing,
// unparseable, bad keys) throws ConfigError; anything wrong with a *data*
// file (vectors, policies produced by earlier runs) throws DataError. The
// command-line driver maps these to distinct exit codes.

#include <charconv>
#include <cstdint>
#include <ctime>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <json.hpp>

#include "omt/errors.hpp"
#include "omt/estimate.hpp"
#include "omt/model.hpp"
#include "omt/policy.hpp"
#include "omt/simulate.hpp"
#include "omt/version.hpp"

namespace omt {

using ordered_json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Plain-file plumbing
// ---------------------------------------------------------------------------

namespace detail {

inline std::optional<std::string> try_slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  std::ostringstream buf;
  buf << in.rdbuf();
  if (in.bad()) return std::nullopt;
  return buf.str();
}

} // namespace detail

inline std::string read_config_file(const std::string& path) {
  auto text = detail::try_slurp(path);
  if (!text) throw ConfigError("cannot read config file: " + path);
  return *text;
}

inline std::string read_data_file(const std::string& path) {
  auto text = detail::try_slurp(path);
  if (!text) throw DataError("cannot read data file: " + path);
  return *text;
}

inline void write_text_file(const std::string& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open output file: " + path);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw DataError("cannot write output file: " + path);
}

// 64-bit FNV-1a over raw bytes, rendered as 16 hex digits.
inline std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  for (int i = 15; i >= 0; --i) {
    buf[i] = "0123456789abcdef"[h & 0xf];
    h >>= 4;
  }
  buf[16] = '\0';
  return std::string(buf, 16);
}

inline std::string iso_utc_now() {
  std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// ---------------------------------------------------------------------------
// One-column CSV vectors
// ---------------------------------------------------------------------------

namespace detail {

inline std::string_view trim_cell(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t'))
    s.remove_suffix(1);
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t'))
    s.remove_prefix(1);
  return s;
}

inline double parse_double_cell(std::string_view cell, std::size_t line,
                                const std::string& path) {
  double v = 0.0;
  const char* first = cell.data();
  const char* last = first + cell.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc{} || ptr != last)
    throw DataError(path + ": line " + std::to_string(line) +
                    ": not a number: '" + std::string(cell) + "'");
  return v;
}

} // namespace detail

// Shortest representation that round-trips through a double.
inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, ptr);
}

inline std::vector<double> parse_column_csv(std::string_view text,
                                            const std::string& header,
                                            const std::string& path) {
  // Tolerate a UTF-8 byte-order mark and CRLF line endings.
  if (text.substr(0, 3) == "\xef\xbb\xbf") text.remove_prefix(3);
  std::vector<double> values;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  bool saw_header = false;
  while (pos <= text.size()) {
    std::size_t nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos
                                                 ? text.size() - pos
                                                 : nl - pos);
    ++line_no;
    std::string_view cell = detail::trim_cell(line);
    if (!saw_header) {
      if (cell != header)
        throw DataError(path + ": expected header '" + header + "', found '" +
                        std::string(cell) + "'");
      saw_header = true;
    } else if (!cell.empty()) {
      values.push_back(detail::parse_double_cell(cell, line_no, path));
    } else if (nl != std::string_view::npos &&
               text.find_first_not_of("\r\n \t", nl) != std::string_view::npos) {
      throw DataError(path + ": blank line " + std::to_string(line_no) +
                      " inside the data");
    }
    if (nl == std::string_view::npos) break;
    pos = nl + 1;
  }
  if (!saw_header) throw DataError(path + ": empty file");
  if (values.empty()) throw DataError(path + ": no data rows");
  return values;
}

inline std::vector<double> read_column_csv(const std::string& path,
                                           const std::string& header) {
  return parse_column_csv(read_data_file(path), header, path);
}

inline std::string column_csv(const std::string& header,
                              std::span<const double> values) {
  std::string out = header + "\n";
  for (double v : values) {
    out += format_double(v);
    out += '\n';
  }
  return out;
}

inline std::string column_csv(const std::string& header,
                              std::span<const int> values) {
  std::string out = header + "\n";
  for (int v : values) {
    out += std::to_string(v);
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Simulation report table
// ---------------------------------------------------------------------------

// One row per variant; optional columns (pFDR when some replication rejected,
// mFDR when any rejection occurred at all) print as "-" when missing.
inline std::string report_csv(const SimulationReport& report) {
  std::string out =
      "variant,TP,TP_se,FDR,FDR_se,pFDR,pFDR_se,mFDR,mFDR_se,PrR0,PrR0_se,"
      "n_reps\n";
  auto cell = [](const std::optional<double>& v) {
    return v ? format_double(*v) : std::string("-");
  };
  for (const VariantMetrics& m : report.rows) {
    out += m.label;
    out += ',' + format_double(m.tp) + ',' + format_double(m.tp_se);
    out += ',' + format_double(m.fdr) + ',' + format_double(m.fdr_se);
    out += ',' + cell(m.pfdr) + ',' + cell(m.pfdr_se);
    out += ',' + cell(m.mfdr) + ',' + cell(m.mfdr_se);
    out += ',' + format_double(m.pr_no_rejection) + ',' +
           format_double(m.pr_no_rejection_se);
    out += ',' + std::to_string(m.n_reps) + '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON helpers
// ---------------------------------------------------------------------------

inline ordered_json parse_config_json(const std::string& text,
                                      const std::string& what) {
  try {
    return ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(what + ": " + e.what());
  }
}

namespace detail {

inline const ordered_json& require_key(const ordered_json& j, const char* key,
                                       const std::string& what) {
  auto it = j.find(key);
  if (it == j.end()) throw ConfigError(what + ": missing key '" + key + "'");
  return *it;
}

template <typename T>
T json_as(const ordered_json& j, const char* key, const std::string& what) {
  try {
    return require_key(j, key, what).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(what + ": key '" + std::string(key) + "': " + e.what());
  }
}

template <typename T>
T json_or(const ordered_json& j, const char* key, T fallback,
          const std::string& what) {
  auto it = j.find(key);
  if (it == j.end()) return fallback;
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(what + ": key '" + std::string(key) + "': " + e.what());
  }
}

inline void check_object(const ordered_json& j, const std::string& what) {
  if (!j.is_object()) throw ConfigError(what + ": expected a JSON object");
}

} // namespace detail

// ---------------------------------------------------------------------------
// Model configuration
// ---------------------------------------------------------------------------
//
// {
//   "k": 5000,
//   "mixture": {"pi": 0.3, "theta": -2.0},            // or explicit lists:
//       {"pi": .., "null": [{"weight","mean","sd"}..], "alt": [..]}
//   "dependence": {"type": "independent"}             // optional; or
//       {"type": "blocks", "sizes": [..] | "block_size"+"n_blocks",
//        "rho": 0.5 | [..], "diag_base": 1, "diag_h": 0, "delta": ..}
//       {"type": "equicorrelated", "rho": .., "sigma2": 1, "delta": ..}
// }
// "delta" (the mean shift of signal coordinates inside the joint law)
// defaults to the alternative mean when the mixture has a single
// alternative component.

namespace detail {

inline std::vector<NormalComponent> components_from_json(
    const ordered_json& arr, const std::string& what) {
  if (!arr.is_array() || arr.empty())
    throw ConfigError(what + ": expected a non-empty array of components");
  std::vector<NormalComponent> out;
  out.reserve(arr.size());
  for (const auto& c : arr) {
    check_object(c, what);
    NormalComponent comp;
    comp.weight = json_or<double>(c, "weight", 1.0, what);
    comp.mean = json_as<double>(c, "mean", what);
    comp.sd = json_or<double>(c, "sd", 1.0, what);
    out.push_back(comp);
  }
  return out;
}

inline MarginalMixture mixture_from_json(const ordered_json& j) {
  const std::string what = "mixture config";
  check_object(j, what);
  MarginalMixture mix;
  mix.pi = json_as<double>(j, "pi", what);
  if (j.contains("theta")) {
    mix = simple_mixture(mix.pi, json_as<double>(j, "theta", what),
                         json_or<double>(j, "null_sd", 1.0, what),
                         json_or<double>(j, "alt_sd", 1.0, what));
  } else {
    mix.null_components = components_from_json(
        require_key(j, "null", what), what + ": null components");
    mix.alt_components = components_from_json(require_key(j, "alt", what),
                                              what + ": alt components");
  }
  return mix;
}

// The single alternative mean, if there is exactly one alt component.
inline std::optional<double> sole_alt_mean(const MarginalMixture& mix) {
  if (mix.alt_components.size() == 1) return mix.alt_components[0].mean;
  return std::nullopt;
}

inline double delta_or_default(const ordered_json& j,
                               const MarginalMixture& mix,
                               const std::string& what) {
  if (j.contains("delta")) return json_as<double>(j, "delta", what);
  if (auto d = sole_alt_mean(mix)) return *d;
  throw ConfigError(what +
                    ": 'delta' is required when the mixture has more than one "
                    "alternative component");
}

inline DependenceSpec dependence_from_json(const ordered_json& j,
                                           const MarginalMixture& mix) {
  const std::string what = "dependence config";
  check_object(j, what);
  const auto type = json_as<std::string>(j, "type", what);
  if (type == "independent") return Independent{};
  if (type == "blocks") {
    std::vector<int> sizes;
    if (j.contains("sizes")) {
      sizes = json_as<std::vector<int>>(j, "sizes", what);
    } else {
      const int size = json_as<int>(j, "block_size", what);
      const int count = json_as<int>(j, "n_blocks", what);
      if (size <= 0 || count <= 0)
        throw ConfigError(what + ": block_size and n_blocks must be positive");
      sizes.assign(static_cast<std::size_t>(count), size);
    }
    std::vector<double> rho;
    const auto& rho_j = require_key(j, "rho", what);
    if (rho_j.is_array())
      rho = json_as<std::vector<double>>(j, "rho", what);
    else
      rho.push_back(json_as<double>(j, "rho", what));
    return make_exchangeable_blocks(std::move(sizes), std::move(rho),
                                    json_or<double>(j, "diag_base", 1.0, what),
                                    json_or<double>(j, "diag_h", 0.0, what),
                                    delta_or_default(j, mix, what));
  }
  if (type == "equicorrelated") {
    Equicorrelated eq;
    eq.rho = json_as<double>(j, "rho", what);
    eq.sigma2 = json_or<double>(j, "sigma2", 1.0, what);
    eq.delta = delta_or_default(j, mix, what);
    return eq;
  }
  throw ConfigError(what + ": unknown type '" + type + "'");
}

} // namespace detail

inline TwoGroupModel model_from_json(const ordered_json& j) {
  const std::string what = "model config";
  detail::check_object(j, what);
  TwoGroupModel model;
  model.k = detail::json_as<int>(j, "k", what);
  model.mixture =
      detail::mixture_from_json(detail::require_key(j, "mixture", what));
  if (j.contains("dependence"))
    model.dependence = detail::dependence_from_json(j.at("dependence"),
                                                    model.mixture);
  try {
    model.validate();
  } catch (const std::exception& e) {
    throw ConfigError(what + ": " + e.what());
  }
  return model;
}

inline TwoGroupModel model_from_json_text(const std::string& text) {
  return model_from_json(parse_config_json(text, "model config"));
}

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------
//
// {
//   "model": {..},
//   "variants": [{"procedure": "omt", "criterion": "fdr"}, {"procedure":"bh"}],
//   "alpha": 0.05, "n_reps": 1000, "n_cal": 10000, "seed": 1,
//   "workers": 1, "max_block_size": 20, "cal_tol": 1e-4, "mu_limit": ..,
//   "est": {"n_cal": 2000, "components": 2, "pin_null": true, "restarts": 2}
// }

struct ExperimentSpec {
  TwoGroupModel model;
  std::vector<ProcedureVariant> variants;
  ExperimentConfig config;
};

inline ExperimentSpec experiment_from_json(const ordered_json& j) {
  const std::string what = "experiment config";
  detail::check_object(j, what);
  ExperimentSpec spec;
  spec.model = model_from_json(detail::require_key(j, "model", what));

  const auto& variants = detail::require_key(j, "variants", what);
  if (!variants.is_array() || variants.empty())
    throw ConfigError(what + ": 'variants' must be a non-empty array");
  for (const auto& v : variants) {
    detail::check_object(v, what + ": variant");
    ProcedureVariant pv;
    pv.procedure = procedure_from_string(
        detail::json_as<std::string>(v, "procedure", what));
    pv.criterion = criterion_from_string(
        detail::json_or<std::string>(v, "criterion", "fdr", what));
    spec.variants.push_back(pv);
  }

  ExperimentConfig& cfg = spec.config;
  cfg.alpha = detail::json_or<double>(j, "alpha", cfg.alpha, what);
  cfg.n_reps = detail::json_or<std::size_t>(j, "n_reps", cfg.n_reps, what);
  cfg.n_cal = detail::json_or<std::size_t>(j, "n_cal", cfg.n_cal, what);
  cfg.seed = detail::json_or<std::uint64_t>(j, "seed", cfg.seed, what);
  cfg.workers = detail::json_or<int>(j, "workers", cfg.workers, what);
  cfg.max_block_size =
      detail::json_or<int>(j, "max_block_size", cfg.max_block_size, what);
  cfg.cal_tol = detail::json_or<double>(j, "cal_tol", cfg.cal_tol, what);
  cfg.mu_limit = detail::json_or<double>(j, "mu_limit", cfg.mu_limit, what);
  if (j.contains("est")) {
    const auto& est = j.at("est");
    detail::check_object(est, what + ": est");
    cfg.est_n_cal =
        detail::json_or<std::size_t>(est, "n_cal", cfg.est_n_cal, what);
    cfg.est_components =
        detail::json_or<int>(est, "components", cfg.est_components, what);
    cfg.est_pin_null =
        detail::json_or<bool>(est, "pin_null", cfg.est_pin_null, what);
    cfg.est_restarts =
        detail::json_or<int>(est, "restarts", cfg.est_restarts, what);
  }
  return spec;
}

inline ExperimentSpec experiment_from_json_text(const std::string& text) {
  return experiment_from_json(parse_config_json(text, "experiment config"));
}

// ---------------------------------------------------------------------------
// Calibrated policy records
// ---------------------------------------------------------------------------

namespace detail {

// JSON has no NaN literal; absent thresholds round-trip through null.
inline ordered_json json_number_or_null(double v) {
  if (std::isnan(v)) return nullptr;
  return v;
}

inline double json_double_or_nan(const ordered_json& j, const char* key,
                                 const std::string& what) {
  const auto& v = require_key(j, key, what);
  if (v.is_null()) return std::numeric_limits<double>::quiet_NaN();
  try {
    return v.get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(what + ": key '" + std::string(key) + "': " + e.what());
  }
}

} // namespace detail

inline ordered_json policy_to_json(const CalibratedPolicy& p) {
  ordered_json diag{
      {"g_hat", detail::json_number_or_null(p.diag.g_hat)},
      {"g_se", detail::json_number_or_null(p.diag.g_se)},
      {"bracket_lo", p.diag.bracket_lo},
      {"bracket_hi", p.diag.bracket_hi},
      {"n_cal", p.diag.n_cal},
      {"seed", p.diag.seed},
      {"n_evals", p.diag.n_evals},
      {"monotone_ok", p.diag.monotone_ok},
      {"grid_fallback", p.diag.grid_fallback},
      {"degenerate", p.diag.degenerate},
  };
  return ordered_json{
      {"criterion", to_string(p.criterion)},
      {"alpha", p.alpha},
      {"mu", detail::json_number_or_null(p.mu)},
      {"t_alpha", detail::json_number_or_null(p.t_alpha)},
      {"diagnostics", std::move(diag)},
  };
}

// Policy records are produced by earlier runs, so breakage here is a data
// error, not a config error.
inline CalibratedPolicy policy_from_json(const ordered_json& j) {
  const std::string what = "policy record";
  try {
    detail::check_object(j, what);
    CalibratedPolicy p;
    p.criterion =
        criterion_from_string(detail::json_as<std::string>(j, "criterion", what));
    p.alpha = detail::json_as<double>(j, "alpha", what);
    p.mu = detail::json_double_or_nan(j, "mu", what);
    p.t_alpha = detail::json_double_or_nan(j, "t_alpha", what);
    if (j.contains("diagnostics")) {
      const auto& d = j.at("diagnostics");
      detail::check_object(d, what + ": diagnostics");
      p.diag.g_hat = detail::json_double_or_nan(d, "g_hat", what);
      p.diag.g_se = detail::json_double_or_nan(d, "g_se", what);
      p.diag.bracket_lo = detail::json_or<double>(d, "bracket_lo", 0.0, what);
      p.diag.bracket_hi = detail::json_or<double>(d, "bracket_hi", 0.0, what);
      p.diag.n_cal = detail::json_or<std::size_t>(d, "n_cal", 0, what);
      p.diag.seed = detail::json_or<std::uint64_t>(d, "seed", 0, what);
      p.diag.n_evals = detail::json_or<int>(d, "n_evals", 0, what);
      p.diag.monotone_ok = detail::json_or<bool>(d, "monotone_ok", true, what);
      p.diag.grid_fallback =
          detail::json_or<bool>(d, "grid_fallback", false, what);
      p.diag.degenerate =
          detail::json_or<std::string>(d, "degenerate", "", what);
    }
    return p;
  } catch (const ConfigError& e) {
    throw DataError(e.what());
  }
}

inline CalibratedPolicy policy_from_json_text(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("policy record: ") + e.what());
  }
  return policy_from_json(j);
}

// ---------------------------------------------------------------------------
// Fitted mixture records
// ---------------------------------------------------------------------------

inline ordered_json mixture_to_json(const FittedMixture& fit) {
  return ordered_json{
      {"weights", fit.weights},       {"means", fit.means},
      {"sds", fit.sds},               {"null_assignment", fit.null_assignment},
      {"pi_hat", fit.pi_hat},         {"loglik", fit.loglik},
  };
}

// ---------------------------------------------------------------------------
// Run manifests
// ---------------------------------------------------------------------------

// Every run writes one manifest next to its outputs: what was invoked, the
// digests of every input consumed, the seed actually used, when it ran, what
// it produced, and anything worth flagging.
struct RunManifest {
  std::string subcommand;
  std::string command;  // the argv line, verbatim
  std::string started;
  std::string finished;
  std::optional<std::uint64_t> seed;
  std::string seed_source;  // "flag", "config", "system", or "" when unused
  int workers = 1;
  std::optional<std::string> config_digest;
  std::vector<std::pair<std::string, std::string>> inputs;  // path, digest
  std::vector<std::string> outputs;                         // file names
  std::vector<std::string> warnings;
};

inline ordered_json manifest_to_json(const RunManifest& m) {
  ordered_json inputs = ordered_json::array();
  for (const auto& [path, digest] : m.inputs)
    inputs.push_back(ordered_json{{"path", path}, {"digest", digest}});
  ordered_json j{
      {"tool", "omt"},
      {"version", version},
      {"subcommand", m.subcommand},
      {"command", m.command},
      {"started", m.started},
      {"finished", m.finished},
      {"seed", m.seed ? ordered_json(*m.seed) : ordered_json(nullptr)},
      {"seed_source", m.seed_source},
      {"workers", m.workers},
      {"config_digest",
       m.config_digest ? ordered_json(*m.config_digest) : ordered_json(nullptr)},
      {"inputs", std::move(inputs)},
      {"outputs", m.outputs},
      {"warnings", m.warnings},
  };
  return j;
}

} // namespace omt
