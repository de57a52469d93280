#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "qesr/covariance.hpp"
#include "qesr/fit.hpp"
#include "qesr/inference.hpp"
#include "qesr/io.hpp"
#include "qesr/simulation.hpp"

namespace qesr::cli {

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInput = 2;
constexpr int kExitFit = 3;
constexpr int kExitConditioning = 4;
constexpr int kExitSimulation = 5;
constexpr int kExitInternal = 1;

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != ' ') {
      cur.push_back(ch);
    }
  }
  if (!cur.empty() || !out.empty()) out.push_back(cur);
  std::vector<std::string> trimmed;
  for (auto& item : out) {
    if (item.empty()) {
      throw InvalidInputError("empty entry in comma-separated list '" + s +
                              "'");
    }
    trimmed.push_back(item);
  }
  return trimmed;
}

std::vector<double> parse_number_list(const std::string& s,
                                      const std::string& flag) {
  std::vector<double> out;
  for (const std::string& item : split_list(s)) {
    std::size_t pos = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != item.size() || !std::isfinite(v)) {
      throw InvalidInputError(flag + ": '" + item + "' is not a number");
    }
    out.push_back(v);
  }
  if (out.empty()) throw InvalidInputError(flag + " needs at least one value");
  return out;
}

Tail tail_from_name(const std::string& name) {
  if (name == "lower") return Tail::Lower;
  if (name == "upper") return Tail::Upper;
  throw InvalidInputError("--tail must be 'lower' or 'upper', got '" + name +
                          "'");
}

std::string tail_name(Tail t) { return t == Tail::Lower ? "lower" : "upper"; }

std::vector<Method> parse_methods(const std::string& s,
                                  const std::set<Method>& allowed,
                                  const std::string& command) {
  std::vector<Method> out;
  for (const std::string& item : split_list(s)) {
    Method m = method_from_name(item);
    if (!allowed.count(m)) {
      throw InvalidInputError("method '" + item + "' is not available for '" +
                              command + "'");
    }
    if (std::find(out.begin(), out.end(), m) != out.end()) {
      throw InvalidInputError("method '" + item + "' given twice");
    }
    out.push_back(m);
  }
  if (out.empty()) throw InvalidInputError("--methods must not be empty");
  return out;
}

void check_open_unit(double v, const std::string& flag) {
  if (!(v > 0.0 && v < 1.0)) {
    throw InvalidInputError(flag + " must lie strictly between 0 and 1");
  }
}

int resolve_threads(int threads) {
  if (threads < 0) throw InvalidInputError("--threads must be >= 0");
  if (threads == 0) {
    unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
  }
  return threads;
}

void emit_report(const JsonWriter& json, const std::string& out_path) {
  if (out_path.empty()) {
    std::fputs(json.str().c_str(), stdout);
    std::fputc('\n', stdout);
  } else {
    write_text_file(out_path, json.str() + "\n");
    std::fprintf(stdout, "wrote %s\n", out_path.c_str());
  }
}

void write_vector(JsonWriter& json, const Vector& v) {
  json.begin_array();
  for (Eigen::Index i = 0; i < v.size(); ++i) json.value(v[i]);
  json.end_array();
}

void write_names(JsonWriter& json, const std::vector<std::string>& names) {
  json.begin_array();
  for (const auto& name : names) json.value(name);
  json.end_array();
}

struct FitArgs {
  std::string input;
  std::string response;
  std::string covariates;
  std::string test_cols;
  double tau = 0.0;
  std::string tail = "upper";
  std::string family = "logneg";
  std::string methods;
  double level = 0.95;
  int bootstrap_b = 1000;
  std::uint64_t seed = 1;
  std::string out;
  int threads = 1;
};

struct FittedModel {
  Dataset data;
  TwoStepFit fit;
  std::vector<Method> methods;
};

FittedModel load_and_fit(const FitArgs& a, const std::set<Method>& allowed,
                         const std::string& command) {
  check_open_unit(a.tau, "--tau");
  check_open_unit(a.level, "--level");
  FittedModel m;
  m.methods = parse_methods(a.methods, allowed, command);
  std::vector<std::string> covariates;
  if (!a.covariates.empty()) covariates = split_list(a.covariates);
  CsvTable table = read_csv_file(a.input);
  m.data = make_dataset(table, a.response, covariates);
  TauLevel tau{a.tau, tail_from_name(a.tail)};
  m.fit = fit_two_step(m.data, tau, SpecFunctions::from_name(a.family));
  return m;
}

void write_fit_preamble(JsonWriter& json, const FitArgs& a,
                        const FittedModel& m, const char* report) {
  json.key("report").value(report);
  json.key("n").value(static_cast<long long>(m.data.n()));
  json.key("p").value(static_cast<long long>(m.data.p()));
  json.key("response").value(a.response);
  json.key("columns");
  write_names(json, m.data.column_names);
  json.key("tau").value(a.tau);
  json.key("tail").value(a.tail);
  json.key("family").value(m.fit.spec.name());
  json.key("theta_q");
  write_vector(json, m.fit.theta.theta_q);
  json.key("theta_e");
  write_vector(json, m.fit.theta.theta_e);
}

void write_diagnostics(JsonWriter& json, const TwoStepFit& fit) {
  json.key("diagnostics").begin_object();
  json.key("quantile_iterations").value(fit.qfit.iterations);
  json.key("quantile_duality_gap").value(fit.qfit.duality_gap);
  json.key("es_iterations").value(fit.esfit.iterations);
  json.key("es_gradient_norm").value(fit.esfit.gradient_norm);
  json.key("tail_count").value(static_cast<long long>(fit.esfit.tail_count));
  json.key("shift").value(fit.shift);
  json.end_object();
}

int cmd_fit(const FitArgs& a) {
  static const std::set<Method> kAllowed{Method::WaldIID, Method::WaldNID,
                                         Method::Boot};
  FittedModel m = load_and_fit(a, kAllowed, "fit");
  const TwoStepFit& fit = m.fit;

  JsonWriter json;
  json.begin_object();
  write_fit_preamble(json, a, m, "fit");
  json.key("methods").begin_object();
  for (Method method : m.methods) {
    CovarianceEstimate cov;
    switch (method) {
      case Method::WaldIID:
        cov = sandwich_for(fit, psi_iid(fit.qfit.residuals));
        break;
      case Method::WaldNID:
        cov = sandwich_for(fit, psi_nid(fit.internal_data, fit.qfit.residuals,
                                        fit.internal_tau));
        break;
      case Method::Boot:
        cov = bootstrap_cov(fit.internal_data, fit.internal_tau, fit.spec,
                            a.bootstrap_b, a.seed, resolve_threads(a.threads));
        break;
      default:
        throw InvalidInputError("method '" + method_name(method) +
                                "' is not available for 'fit'");
    }
    json.key(method_name(method)).begin_object();
    json.key("se");
    json.begin_array();
    for (Eigen::Index j = 0; j < cov.cov.rows(); ++j) {
      json.value(std::sqrt(cov.cov(j, j)));
    }
    json.end_array();
    if (method == Method::Boot) {
      json.key("replicates").value(a.bootstrap_b);
      json.key("dropped_replicates").value(cov.dropped_replicates);
    }
    json.end_object();
  }
  json.end_object();
  write_diagnostics(json, fit);
  json.end_object();
  emit_report(json, a.out);
  return kExitOk;
}

int cmd_test(const FitArgs& a) {
  static const std::set<Method> kAllowed{Method::WaldIID, Method::WaldNID,
                                         Method::ScoreIID, Method::ScoreNID,
                                         Method::Boot};
  FittedModel m = load_and_fit(a, kAllowed, "test");
  const TwoStepFit& fit = m.fit;

  if (a.test_cols.empty()) {
    throw InvalidInputError("--test-cols must name at least one covariate");
  }
  std::vector<int> cols;
  std::vector<std::string> col_names = split_list(a.test_cols);
  for (const std::string& name : col_names) {
    int idx = m.data.column_index(name);
    if (idx <= 0) {
      throw InvalidInputError("--test-cols: '" + name +
                              "' is not a model covariate");
    }
    cols.push_back(idx);
  }

  const bool need_iid = std::count(m.methods.begin(), m.methods.end(),
                                   Method::WaldIID) ||
                        std::count(m.methods.begin(), m.methods.end(),
                                   Method::ScoreIID);
  const bool need_nid = std::count(m.methods.begin(), m.methods.end(),
                                   Method::WaldNID) ||
                        std::count(m.methods.begin(), m.methods.end(),
                                   Method::ScoreNID);
  PsiEstimate psi_i, psi_n;
  if (need_iid) psi_i = psi_iid(fit.qfit.residuals);
  if (need_nid) {
    psi_n = psi_nid(fit.internal_data, fit.qfit.residuals, fit.internal_tau);
  }
  CovarianceEstimate cov_i, cov_n, cov_b;
  for (Method method : m.methods) {
    if (method == Method::WaldIID) cov_i = sandwich_for(fit, psi_i);
    if (method == Method::WaldNID) cov_n = sandwich_for(fit, psi_n);
    if (method == Method::Boot) {
      cov_b = bootstrap_cov(fit.internal_data, fit.internal_tau, fit.spec,
                            a.bootstrap_b, a.seed, resolve_threads(a.threads));
    }
  }

  JsonWriter json;
  json.begin_object();
  write_fit_preamble(json, a, m, "test");
  json.key("level").value(a.level);
  json.key("tests").begin_object();
  for (std::size_t k = 0; k < cols.size(); ++k) {
    const int col = cols[k];
    json.key(col_names[k]).begin_object();
    for (Method method : m.methods) {
      json.key(method_name(method)).begin_object();
      if (method == Method::ScoreIID || method == Method::ScoreNID) {
        const PsiEstimate& psi =
            method == Method::ScoreIID ? psi_i : psi_n;
        Partition part = Partition::from_z(m.data.p(), {col});
        ScoreParts parts = make_score_parts(fit, part);
        ScoreTestResult st = score_eval(parts, psi, restricted_fitted(parts));
        ScoreCiResult ci = score_ci(fit, col, psi, a.level);
        json.key("statistic").value(st.statistic);
        json.key("df").value(st.df);
        json.key("p_value").value(st.p_value);
        json.key("degenerate").value(st.degenerate);
        json.key("ci");
        json.begin_array().value(ci.interval.lo).value(ci.interval.hi);
        json.end_array();
      } else {
        const CovarianceEstimate& cov =
            method == Method::WaldIID
                ? cov_i
                : (method == Method::WaldNID ? cov_n : cov_b);
        Partition part = Partition::from_z(m.data.p(), {col});
        WaldTestResult wt = wald_test(cov, fit.theta.theta_e, part);
        Interval ci = wald_ci(cov, fit.theta.theta_e, col, a.level);
        json.key("statistic").value(wt.statistic);
        json.key("df").value(wt.df);
        json.key("p_value").value(wt.p_value);
        json.key("ci");
        json.begin_array().value(ci.lo).value(ci.hi);
        json.end_array();
      }
      json.end_object();
    }
    json.end_object();
  }
  json.end_object();
  write_diagnostics(json, fit);
  json.end_object();
  emit_report(json, a.out);
  return kExitOk;
}

struct SimArgs {
  int scenario = 1;
  int n = 100;
  int reps = 600;
  std::string eta;
  double tau = 0.8;
  std::string tail = "upper";
  std::string family = "logneg";
  std::string methods = "w-iid,w-nid,s-iid,s-nid,boot";
  double level = 0.05;
  int bootstrap_b = 200;
  std::uint64_t seed = 1;
  std::string out = "qesr_sim";
  int threads = 1;
};

void write_cell_row(std::string& out, const std::vector<std::string>& cells) {
  for (std::size_t j = 0; j < cells.size(); ++j) {
    if (j) out.push_back(',');
    out += cells[j];
  }
  out.push_back('\n');
}

int cmd_simulate(const SimArgs& a) {
  if (a.scenario < 1 || a.scenario > 4) {
    throw InvalidInputError("--scenario must be 1, 2, 3, or 4");
  }
  check_open_unit(a.tau, "--tau");
  check_open_unit(a.level, "--level");
  if (a.out.empty()) throw InvalidInputError("--out must not be empty");

  static const std::set<Method> kAllowed{Method::WaldIID, Method::WaldNID,
                                         Method::ScoreIID, Method::ScoreNID,
                                         Method::Boot};
  ScenarioConfig cfg;
  cfg.scenario = static_cast<Scenario>(a.scenario);
  cfg.n_per_group = a.n;
  cfg.replications = a.reps;
  cfg.seed = a.seed;
  cfg.methods = parse_methods(a.methods, kAllowed, "simulate");
  cfg.bootstrap_b = a.bootstrap_b;
  cfg.test_level = a.level;
  cfg.ci_level = 1.0 - a.level;
  cfg.tau = TauLevel{a.tau, tail_from_name(a.tail)};
  cfg.spec = SpecFunctions::from_name(a.family);
  cfg.threads = resolve_threads(a.threads);

  std::vector<double> etas = parse_number_list(a.eta, "--eta");
  const bool grid = etas.size() > 1;
  SimulationReport report;
  if (grid) {
    report = run_monte_carlo_grid(cfg, etas);
  } else {
    cfg.eta = etas[0];
    report = run_monte_carlo(cfg);
  }
  for (const SimulationRun& run : report.runs) {
    if (run.flagged_invalid) {
      std::fprintf(stderr, "error: %s\n", run.flag_reason.c_str());
      return kExitSimulation;
    }
  }

  const bool has_boot = std::count(cfg.methods.begin(), cfg.methods.end(),
                                   Method::Boot) > 0;
  JsonWriter json;
  json.begin_object();
  json.key("report").value("simulate");
  json.key("scenario").value(a.scenario);
  json.key("n_per_group").value(cfg.n_per_group);
  json.key("tau").value(cfg.tau.tau);
  json.key("tail").value(tail_name(cfg.tau.tail));
  json.key("family").value(cfg.spec.name());
  json.key("replications").value(cfg.replications);
  json.key("seed").value(static_cast<long long>(cfg.seed));
  json.key("test_level").value(cfg.test_level);
  json.key("ci_level").value(cfg.ci_level);
  json.key("bootstrap_b").value(cfg.bootstrap_b);
  json.key("bootstrap_b_reduced").value(has_boot && cfg.bootstrap_b < 1000);
  json.key("methods");
  json.begin_array();
  for (Method method : cfg.methods) json.value(method_name(method));
  json.end_array();
  json.key("runs").begin_array();
  for (const SimulationRun& run : report.runs) {
    json.begin_object();
    json.key("eta").value(run.eta);
    json.key("true_effect").value(run.eta_tau);
    json.key("failures").value(run.failures_total);
    json.key("results").begin_object();
    for (const MethodSummary& ms : run.methods) {
      json.key(method_name(ms.method)).begin_object();
      json.key("successes").value(ms.successes);
      json.key("failures").value(ms.failures);
      json.key("rejection_rate").value(ms.rejection_rate);
      json.key("mc_se").value(ms.mc_se);
      json.key("coverage").value(ms.coverage);
      json.key("avg_ci_length").value(ms.avg_ci_length);
      json.end_object();
    }
    json.end_object();
    json.end_object();
  }
  json.end_array();
  json.end_object();
  write_text_file(a.out + ".json", json.str() + "\n");

  std::string csv;
  write_cell_row(csv, {"scenario", "n_per_group", "tau", "eta", "true_effect",
                       "method", "successes", "failures", "rejection_rate",
                       "mc_se", "coverage", "avg_ci_length"});
  for (const SimulationRun& run : report.runs) {
    for (const MethodSummary& ms : run.methods) {
      write_cell_row(
          csv, {std::to_string(a.scenario), std::to_string(cfg.n_per_group),
                format_g10(cfg.tau.tau), format_g10(run.eta),
                format_g10(run.eta_tau), method_name(ms.method),
                std::to_string(ms.successes), std::to_string(ms.failures),
                format_g10(ms.rejection_rate), format_g10(ms.mc_se),
                format_g10(ms.coverage), format_g10(ms.avg_ci_length)});
    }
  }
  write_text_file(a.out + ".csv", csv);

  if (grid) {
    std::string power;
    write_cell_row(power, {"eta", "true_effect", "method", "power", "mc_se"});
    for (const SimulationRun& run : report.runs) {
      for (const MethodSummary& ms : run.methods) {
        write_cell_row(power, {format_g10(run.eta), format_g10(run.eta_tau),
                               method_name(ms.method),
                               format_g10(ms.rejection_rate),
                               format_g10(ms.mc_se)});
      }
    }
    write_text_file(a.out + "_power.csv", power);
  }

  for (const SimulationRun& run : report.runs) {
    for (const MethodSummary& ms : run.methods) {
      std::fprintf(stdout,
                   "eta=%g %s: reject %.4f (se %.4f), cover %.4f, len %.4f, "
                   "failures %d\n",
                   run.eta, method_name(ms.method).c_str(), ms.rejection_rate,
                   ms.mc_se, ms.coverage, ms.avg_ci_length, ms.failures);
    }
  }
  std::fprintf(stdout, "wrote %s.json and %s.csv%s (%.1fs)\n", a.out.c_str(),
               a.out.c_str(), grid ? " and power curve" : "",
               report.wall_seconds);
  return kExitOk;
}

void add_common_flags(CLI::App* sub, FitArgs& a, bool is_test) {
  sub->add_option("--input", a.input, "Input CSV file (header + numeric rows)")
      ->required();
  sub->add_option("--response", a.response, "Response column name")
      ->required();
  sub->add_option("--covariates", a.covariates,
                  "Comma-separated covariate columns (empty: intercept only)");
  if (is_test) {
    sub->add_option("--test-cols", a.test_cols,
                    "Comma-separated covariates whose shortfall coefficients "
                    "are tested against zero")
        ->required();
  }
  sub->add_option("--tau", a.tau, "Tail probability level in (0,1)")
      ->required();
  sub->add_option("--tail", a.tail, "Which tail: lower or upper")
      ->capture_default_str();
  sub->add_option("--family", a.family,
                  "Specification family: const or logneg")
      ->capture_default_str();
  sub->add_option("--methods", a.methods,
                  is_test ? "Comma list from w-iid,w-nid,s-iid,s-nid,boot"
                          : "Comma list from w-iid,w-nid,boot")
      ->capture_default_str();
  sub->add_option("--level", a.level, "Confidence level for intervals")
      ->capture_default_str();
  sub->add_option("--B", a.bootstrap_b, "Bootstrap replicates")
      ->capture_default_str();
  sub->add_option("--seed", a.seed, "RNG seed")->capture_default_str();
  sub->add_option("--out", a.out, "Report path (default: stdout)");
  sub->add_option("--threads", a.threads,
                  "Worker threads for bootstrap (0: all cores)")
      ->capture_default_str();
}

int dispatch(const std::vector<std::string>& args) {
  CLI::App app{
      "Joint quantile and expected-shortfall regression with Wald-, score-, "
      "and bootstrap-based inference"};
  app.require_subcommand(1);

  FitArgs fit_args;
  fit_args.methods = "w-iid,w-nid";
  CLI::App* fit_cmd = app.add_subcommand(
      "fit", "Fit the two-step model and report standard errors");
  add_common_flags(fit_cmd, fit_args, false);

  FitArgs test_args;
  test_args.methods = "s-iid,s-nid,w-iid,w-nid";
  CLI::App* test_cmd = app.add_subcommand(
      "test", "Test shortfall coefficients and build confidence intervals");
  add_common_flags(test_cmd, test_args, true);

  SimArgs sim_args;
  CLI::App* sim_cmd = app.add_subcommand(
      "simulate", "Run a seeded Monte Carlo study on a built-in scenario");
  sim_cmd->add_option("--scenario", sim_args.scenario,
                      "Data-generating scenario 1-4")
      ->required();
  sim_cmd->add_option("--n", sim_args.n, "Sample size per treatment group")
      ->capture_default_str();
  sim_cmd->add_option("--reps", sim_args.reps, "Monte Carlo replications")
      ->capture_default_str();
  sim_cmd->add_option("--eta", sim_args.eta,
                      "Treatment effect, scalar or comma grid")
      ->required();
  sim_cmd->add_option("--tau", sim_args.tau, "Tail probability level")
      ->capture_default_str();
  sim_cmd->add_option("--tail", sim_args.tail, "Which tail: lower or upper")
      ->capture_default_str();
  sim_cmd->add_option("--family", sim_args.family,
                      "Specification family: const or logneg")
      ->capture_default_str();
  sim_cmd->add_option("--methods", sim_args.methods,
                      "Comma list from w-iid,w-nid,s-iid,s-nid,boot")
      ->capture_default_str();
  sim_cmd->add_option("--level", sim_args.level,
                      "Test level (intervals use 1 - level)")
      ->capture_default_str();
  sim_cmd->add_option("--B", sim_args.bootstrap_b,
                      "Bootstrap replicates inside each replication")
      ->capture_default_str();
  sim_cmd->add_option("--seed", sim_args.seed, "RNG seed")
      ->capture_default_str();
  sim_cmd->add_option("--out", sim_args.out,
                      "Output base path, writes <out>.json and <out>.csv")
      ->capture_default_str();
  sim_cmd->add_option("--threads", sim_args.threads,
                      "Worker threads across replications (0: all cores)")
      ->capture_default_str();

  std::vector<std::string> rest(args.rbegin(), args.rend());
  rest.pop_back();  // drop the program name; CLI11 wants reversed argv
  try {
    app.parse(rest);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitInput;
  }

  if (fit_cmd->parsed()) return cmd_fit(fit_args);
  if (test_cmd->parsed()) return cmd_test(test_args);
  return cmd_simulate(sim_args);
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  try {
    return dispatch(args);
  } catch (const InvalidInputError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitInput;
  } catch (const ConditioningError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConditioning;
  } catch (const InversionFailureError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConditioning;
  } catch (const SimulationInstabilityError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitSimulation;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitFit;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return kExitInternal;
  }
}

int run_cli(int argc, const char* const* argv) {
  return run_cli(std::vector<std::string>(argv, argv + argc));
}

}  // namespace qesr::cli
