#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "cli.hpp"
#include "qesr/io.hpp"
#include "qesr/rng.hpp"
#include "qesr/simulation.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using qesr::Dataset;
using qesr::cli::run_cli;

namespace {

// Scratch directory removed when the test case ends.
struct TempDir {
  fs::path dir;
  TempDir() {
    static int counter = 0;
    dir = fs::temp_directory_path() /
          ("qesr_cli_" + std::to_string(::getpid()) + "_" +
           std::to_string(counter++));
    fs::create_directories(dir);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(dir, ec);
  }
  std::string path(const std::string& name) const {
    return (dir / name).string();
  }
};

// Redirects one fd into a file for the duration of a CLI call.
struct FdCapture {
  int fd;
  int saved;
  fs::path file;
  FdCapture(int fd_, const fs::path& file_) : fd(fd_), file(file_) {
    std::fflush(nullptr);
    saved = ::dup(fd);
    int sink = ::open(file.c_str(), O_CREAT | O_TRUNC | O_WRONLY, 0644);
    ::dup2(sink, fd);
    ::close(sink);
  }
  std::string finish() {
    std::fflush(nullptr);
    ::dup2(saved, fd);
    ::close(saved);
    return qesr::read_text_file(file.string());
  }
};

struct CliResult {
  int rc = 0;
  std::string out;
  std::string err;
};

CliResult run(const TempDir& tmp, std::vector<std::string> args) {
  args.insert(args.begin(), "qesr");
  FdCapture cout_cap(1, tmp.dir / ".stdout");
  FdCapture cerr_cap(2, tmp.dir / ".stderr");
  CliResult r;
  r.rc = run_cli(args);
  r.out = cout_cap.finish();
  r.err = cerr_cap.finish();
  return r;
}

// Writes a dataset as response + non-intercept covariates.
void write_dataset_csv(const std::string& path, const Dataset& d,
                       const std::string& response) {
  std::vector<std::string> header{response};
  for (Eigen::Index j = 1; j < d.p(); ++j) {
    header.push_back(d.column_names[static_cast<std::size_t>(j)]);
  }
  std::vector<std::vector<double>> rows;
  for (Eigen::Index i = 0; i < d.n(); ++i) {
    std::vector<double> row{d.y[i]};
    for (Eigen::Index j = 1; j < d.p(); ++j) row.push_back(d.X(i, j));
    rows.push_back(std::move(row));
  }
  qesr::write_csv_file(path, header, rows);
}

// Minimal validator for the JSON-schema subset the shipped schemas use.
void schema_check(const json& schema, const json& value, const json& root,
                  const std::string& at, std::vector<std::string>& errors) {
  if (schema.contains("$ref")) {
    const std::string ref = schema["$ref"].get<std::string>();
    const std::string prefix = "#/$defs/";
    REQUIRE_MESSAGE(ref.rfind(prefix, 0) == 0, "unsupported $ref " << ref);
    schema_check(root["$defs"][ref.substr(prefix.size())], value, root, at,
                 errors);
    return;
  }
  for (const auto& item : schema.items()) {
    const std::string& kw = item.key();
    const json& arg = item.value();
    if (kw == "$schema" || kw == "$id" || kw == "title" ||
        kw == "description" || kw == "$defs") {
      continue;
    } else if (kw == "type") {
      const std::string t = arg.get<std::string>();
      bool ok = (t == "object" && value.is_object()) ||
                (t == "array" && value.is_array()) ||
                (t == "string" && value.is_string()) ||
                (t == "boolean" && value.is_boolean()) ||
                (t == "number" && value.is_number()) ||
                (t == "integer" &&
                 (value.is_number_integer() ||
                  (value.is_number() &&
                   value.get<double>() == std::floor(value.get<double>()))));
      if (!ok) errors.push_back(at + ": expected type " + t);
    } else if (kw == "const") {
      if (value != arg) errors.push_back(at + ": const mismatch");
    } else if (kw == "enum") {
      if (std::find(arg.begin(), arg.end(), value) == arg.end()) {
        errors.push_back(at + ": value not in enum");
      }
    } else if (kw == "required") {
      for (const auto& name : arg) {
        if (!value.is_object() || !value.contains(name.get<std::string>())) {
          errors.push_back(at + ": missing required key " +
                           name.get<std::string>());
        }
      }
    } else if (kw == "properties") {
      if (value.is_object()) {
        for (const auto& prop : arg.items()) {
          if (value.contains(prop.key())) {
            schema_check(prop.value(), value[prop.key()], root,
                         at + "." + prop.key(), errors);
          }
        }
      }
    } else if (kw == "additionalProperties") {
      if (!value.is_object()) continue;
      const json props = schema.value("properties", json::object());
      for (const auto& member : value.items()) {
        if (props.contains(member.key())) continue;
        if (arg.is_boolean()) {
          if (!arg.get<bool>()) {
            errors.push_back(at + ": unexpected key " + member.key());
          }
        } else {
          schema_check(arg, member.value(), root, at + "." + member.key(),
                       errors);
        }
      }
    } else if (kw == "minProperties") {
      if (value.is_object() && value.size() < arg.get<std::size_t>()) {
        errors.push_back(at + ": too few keys");
      }
    } else if (kw == "items") {
      if (value.is_array()) {
        for (std::size_t i = 0; i < value.size(); ++i) {
          schema_check(arg, value[i], root,
                       at + "[" + std::to_string(i) + "]", errors);
        }
      }
    } else if (kw == "minItems") {
      if (value.is_array() && value.size() < arg.get<std::size_t>()) {
        errors.push_back(at + ": too few items");
      }
    } else if (kw == "maxItems") {
      if (value.is_array() && value.size() > arg.get<std::size_t>()) {
        errors.push_back(at + ": too many items");
      }
    } else if (kw == "minLength") {
      if (value.is_string() &&
          value.get<std::string>().size() < arg.get<std::size_t>()) {
        errors.push_back(at + ": string too short");
      }
    } else if (kw == "minimum") {
      if (value.is_number() && value.get<double>() < arg.get<double>()) {
        errors.push_back(at + ": below minimum");
      }
    } else if (kw == "maximum") {
      if (value.is_number() && value.get<double>() > arg.get<double>()) {
        errors.push_back(at + ": above maximum");
      }
    } else if (kw == "exclusiveMinimum") {
      if (value.is_number() && value.get<double>() <= arg.get<double>()) {
        errors.push_back(at + ": not above exclusive minimum");
      }
    } else if (kw == "exclusiveMaximum") {
      if (value.is_number() && value.get<double>() >= arg.get<double>()) {
        errors.push_back(at + ": not below exclusive maximum");
      }
    } else {
      FAIL("schema keyword not covered by this validator: " << kw);
    }
  }
}

void expect_valid(const std::string& schema_file, const json& value) {
  const json schema = json::parse(qesr::read_text_file(
      std::string(QESR_REPO_DIR) + "/schemas/" + schema_file));
  std::vector<std::string> errors;
  schema_check(schema, value, schema, "$", errors);
  for (const std::string& e : errors) {
    ADD_FAIL_CHECK_AT(schema_file.c_str(), 1, e.c_str());
  }
  CHECK(errors.empty());
}

json parse_file(const std::string& path) {
  return json::parse(qesr::read_text_file(path));
}

qesr::ScenarioConfig scenario_cfg(qesr::Scenario s, int n_per_group,
                                  double eta, std::uint64_t seed) {
  qesr::ScenarioConfig cfg;
  cfg.scenario = s;
  cfg.n_per_group = n_per_group;
  cfg.eta = eta;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("fit on a tiny file reproduces the closed form and is byte-stable") {
  TempDir tmp;
  qesr::write_csv_file(tmp.path("five.csv"), {"y"},
                       {{1.0}, {2.0}, {3.0}, {4.0}, {5.0}});
  const std::vector<std::string> args{
      "fit",           "--input", tmp.path("five.csv"),
      "--response",    "y",       "--tau",
      "0.3",           "--tail",  "lower",
      "--family",      "const",   "--methods",
      "w-iid",         "--out",   tmp.path("r1.json")};
  CliResult r1 = run(tmp, args);
  CHECK(r1.rc == 0);
  CHECK(r1.err.empty());

  json rep = parse_file(tmp.path("r1.json"));
  CHECK(rep["report"] == "fit");
  CHECK(rep["n"] == 5);
  CHECK(rep["p"] == 1);
  CHECK(rep["columns"] == json::array({"(intercept)"}));
  CHECK(rep["theta_q"][0].get<double>() == 2.0);
  CHECK(rep["theta_e"][0].get<double>() ==
        doctest::Approx(4.0 / 3.0).epsilon(1e-8));
  CHECK(rep["diagnostics"]["tail_count"] == 2);
  CHECK(rep["methods"]["w-iid"]["se"].size() == 1);
  expect_valid("fit_report.schema.json", rep);

  // Same invocation, same bytes.
  std::vector<std::string> again = args;
  again.back() = tmp.path("r2.json");
  CHECK(run(tmp, again).rc == 0);
  CHECK(qesr::read_text_file(tmp.path("r1.json")) ==
        qesr::read_text_file(tmp.path("r2.json")));
}

TEST_CASE("test report carries every requested block and validates") {
  TempDir tmp;
  Dataset d = generate_scenario(scenario_cfg(qesr::Scenario::S1, 60, 1.0, 2),
                                0);
  write_dataset_csv(tmp.path("s1.csv"), d, "y");
  CliResult r = run(tmp, {"test", "--input", tmp.path("s1.csv"),
                          "--response", "y", "--covariates", "D,x1",
                          "--test-cols", "D", "--tau", "0.8", "--methods",
                          "w-iid,w-nid,s-iid,s-nid,boot", "--B", "60",
                          "--seed", "3", "--out", tmp.path("t.json")});
  CHECK(r.rc == 0);
  CHECK(r.err.empty());

  json rep = parse_file(tmp.path("t.json"));
  CHECK(rep["report"] == "test");
  CHECK(rep["level"].get<double>() == 0.95);
  CHECK(rep["columns"] == json::array({"(intercept)", "D", "x1"}));
  const json& blocks = rep["tests"]["D"];
  REQUIRE(blocks.contains("w-iid"));
  REQUIRE(blocks.contains("w-nid"));
  REQUIRE(blocks.contains("s-iid"));
  REQUIRE(blocks.contains("s-nid"));
  REQUIRE(blocks.contains("boot"));
  for (const auto& b : blocks.items()) {
    CHECK(b.value()["ci"].size() == 2);
    CHECK(b.value()["p_value"].get<double>() >= 0.0);
    CHECK(b.value()["p_value"].get<double>() <= 1.0);
    CHECK(b.value()["ci"][0].get<double>() <= b.value()["ci"][1].get<double>());
  }
  CHECK(blocks["s-iid"]["degenerate"].is_boolean());
  CHECK_FALSE(blocks["boot"].contains("degenerate"));
  expect_valid("test_report.schema.json", rep);
}

TEST_CASE("input problems exit with code 2 and a pointed message") {
  TempDir tmp;
  qesr::write_csv_file(tmp.path("ok.csv"), {"y", "x"},
                       {{1.0, 0.1}, {2.0, 0.2}, {3.0, 0.3}, {4.0, 0.4},
                        {5.0, 0.5}, {2.5, 0.6}, {3.5, 0.7}, {1.5, 0.8}});
  auto fit_on = [&](std::vector<std::string> extra) {
    std::vector<std::string> args{"fit", "--input", tmp.path("ok.csv"),
                                  "--response", "y", "--covariates", "x",
                                  "--tau", "0.5"};
    args.insert(args.end(), extra.begin(), extra.end());
    return run(tmp, args);
  };

  CliResult missing = run(tmp, {"fit", "--input", tmp.path("ok.csv"),
                                "--response", "z", "--tau", "0.5"});
  CHECK(missing.rc == 2);
  CHECK(missing.err.find("column 'z' not found") != std::string::npos);

  qesr::write_text_file(tmp.path("bad.csv"), "y,x\n1,2\n3,abc\n");
  CliResult bad = run(tmp, {"fit", "--input", tmp.path("bad.csv"),
                            "--response", "y", "--tau", "0.5"});
  CHECK(bad.rc == 2);
  CHECK(bad.err.find("line 3") != std::string::npos);
  CHECK(bad.err.find("column 2") != std::string::npos);

  CliResult not_cov = run(tmp, {"test", "--input", tmp.path("ok.csv"),
                                "--response", "y", "--covariates", "x",
                                "--test-cols", "q", "--tau", "0.5"});
  CHECK(not_cov.rc == 2);
  CHECK(not_cov.err.find("is not a model covariate") != std::string::npos);

  CHECK(fit_on({"--tau", "1.5"}).rc == 2);
  CHECK(fit_on({"--family", "bogus"}).rc == 2);
  CHECK(fit_on({"--threads", "-1"}).rc == 2);
  CHECK(fit_on({"--methods", "s-iid"}).rc == 2);  // score is test-only

  CliResult reps0 = run(tmp, {"simulate", "--scenario", "1", "--eta", "0",
                              "--reps", "0", "--out", tmp.path("x")});
  CHECK(reps0.rc == 2);
  CliResult badeta = run(tmp, {"simulate", "--scenario", "1", "--eta", "abc",
                               "--out", tmp.path("x")});
  CHECK(badeta.rc == 2);
  CHECK(badeta.err.find("--eta") != std::string::npos);

  CHECK(run(tmp, {}).rc != 0);          // a subcommand is required
  CHECK(run(tmp, {"--help"}).rc == 0);  // help is not an error
}

TEST_CASE("a rank-deficient design exits with the fit error code") {
  TempDir tmp;
  std::vector<std::vector<double>> rows;
  qesr::RngStream rng(6, 0);
  for (int i = 0; i < 30; ++i) {
    const double x = rng.uniform();
    rows.push_back({1.0 + x + 0.2 * rng.normal(), x, x});
  }
  qesr::write_csv_file(tmp.path("dup.csv"), {"y", "a", "b"}, rows);
  CliResult r = run(tmp, {"fit", "--input", tmp.path("dup.csv"),
                          "--response", "y", "--covariates", "a,b",
                          "--tau", "0.5"});
  CHECK(r.rc == 3);
  CHECK_FALSE(r.err.empty());
}

TEST_CASE("simulate flags an impossible tail and writes no files") {
  TempDir tmp;
  CliResult r = run(tmp, {"simulate", "--scenario", "1", "--n", "25",
                          "--reps", "10", "--tau", "0.98", "--eta", "0",
                          "--methods", "w-iid", "--seed", "5", "--out",
                          tmp.path("bad")});
  CHECK(r.rc == 5);
  CHECK(r.err.find("error:") != std::string::npos);
  CHECK_FALSE(fs::exists(tmp.path("bad.json")));
  CHECK_FALSE(fs::exists(tmp.path("bad.csv")));
}

TEST_CASE("simulate writes seeded, thread-independent files") {
  TempDir tmp;
  const std::vector<std::string> base{
      "simulate", "--scenario", "2",    "--n",       "50",
      "--reps",   "40",         "--eta", "0.5",      "--methods",
      "w-iid,s-iid", "--seed",  "11",   "--threads", ""};
  auto go = [&](const std::string& threads, const std::string& out) {
    std::vector<std::string> args = base;
    args.back() = threads;
    args.push_back("--out");
    args.push_back(tmp.path(out));
    return run(tmp, args);
  };
  CHECK(go("1", "t1").rc == 0);
  CHECK(go("3", "t3").rc == 0);
  CHECK(qesr::read_text_file(tmp.path("t1.json")) ==
        qesr::read_text_file(tmp.path("t3.json")));
  CHECK(qesr::read_text_file(tmp.path("t1.csv")) ==
        qesr::read_text_file(tmp.path("t3.csv")));
  CHECK_FALSE(fs::exists(tmp.path("t1_power.csv")));  // scalar eta: no curve

  json rep = parse_file(tmp.path("t1.json"));
  CHECK(rep["report"] == "simulate");
  CHECK(rep["runs"].size() == 1);
  CHECK(rep["runs"][0]["results"].contains("w-iid"));
  CHECK(rep["runs"][0]["results"].contains("s-iid"));
  expect_valid("simulation_report.schema.json", rep);
}

TEST_CASE("an effect grid adds a paired power curve") {
  TempDir tmp;
  CliResult r = run(tmp, {"simulate", "--scenario", "1", "--n", "50",
                          "--reps", "150", "--eta", "0,0.6,1.2",
                          "--methods", "w-iid", "--seed", "13", "--out",
                          tmp.path("grid")});
  CHECK(r.rc == 0);
  REQUIRE(fs::exists(tmp.path("grid_power.csv")));

  json rep = parse_file(tmp.path("grid.json"));
  REQUIRE(rep["runs"].size() == 3);
  std::vector<double> power(3), se(3);
  for (int i = 0; i < 3; ++i) {
    power[i] = rep["runs"][i]["results"]["w-iid"]["rejection_rate"];
    se[i] = rep["runs"][i]["results"]["w-iid"]["mc_se"];
    CHECK(rep["runs"][i]["eta"].get<double>() ==
          doctest::Approx(0.6 * i).epsilon(1e-12));
    CHECK(rep["runs"][i]["true_effect"].get<double>() ==
          doctest::Approx(0.6 * i).epsilon(1e-12));
  }
  CHECK(power[0] <= power[1] + 2.0 * (se[0] + se[1]));
  CHECK(power[1] <= power[2] + 2.0 * (se[1] + se[2]));
  CHECK(power[2] > power[0]);

  const std::string curve = qesr::read_text_file(tmp.path("grid_power.csv"));
  CHECK(curve.rfind("eta,true_effect,method,power,mc_se\n", 0) == 0);
  CHECK(std::count(curve.begin(), curve.end(), '\n') == 4);  // header + 3 rows
  expect_valid("simulation_report.schema.json", rep);
}

TEST_CASE("bootstrap fit block reports its replicate accounting") {
  TempDir tmp;
  Dataset d = generate_scenario(scenario_cfg(qesr::Scenario::S1, 60, 0.5, 9),
                                0);
  write_dataset_csv(tmp.path("s1.csv"), d, "y");
  CliResult r = run(tmp, {"fit", "--input", tmp.path("s1.csv"), "--response",
                          "y", "--covariates", "D,x1", "--tau", "0.8",
                          "--methods", "boot", "--B", "60", "--seed", "4",
                          "--out", tmp.path("b.json")});
  CHECK(r.rc == 0);
  json rep = parse_file(tmp.path("b.json"));
  const json& boot = rep["methods"]["boot"];
  CHECK(boot["se"].size() == 3);
  CHECK(boot["replicates"] == 60);
  CHECK(boot["dropped_replicates"].get<int>() >= 0);
  for (const auto& s : boot["se"]) CHECK(s.get<double>() > 0.0);
  expect_valid("fit_report.schema.json", rep);
}

TEST_CASE("score p-values through the full pipeline are close to uniform") {
  TempDir tmp;
  const int reps = 200;
  std::vector<double> pvals;
  for (int rep = 0; rep < reps; ++rep) {
    Dataset d = generate_scenario(
        scenario_cfg(qesr::Scenario::S1, 50, 0.0, 77), rep);
    write_dataset_csv(tmp.path("r.csv"), d, "y");
    CliResult r = run(tmp, {"test", "--input", tmp.path("r.csv"),
                            "--response", "y", "--covariates", "D,x1",
                            "--test-cols", "D", "--tau", "0.8", "--methods",
                            "s-iid", "--out", tmp.path("r.json")});
    REQUIRE(r.rc == 0);
    const double p =
        parse_file(tmp.path("r.json"))["tests"]["D"]["s-iid"]["p_value"];
    REQUIRE(p >= 0.0);
    REQUIRE(p <= 1.0);
    pvals.push_back(p);
  }
  const double ks = qesr::test::ks_distance(
      pvals, [](double p) { return std::min(1.0, std::max(0.0, p)); });
  CHECK(ks <= 0.12);
}

TEST_CASE("an hourly-wage style extract fits cleanly in the upper tail") {
  // 870 rows shaped like an observational pay dataset: a binary group flag,
  // age with a quadratic term, years of schooling, and an employment flag.
  TempDir tmp;
  qesr::RngStream rng(870, 0);
  std::vector<std::vector<double>> rows;
  for (int i = 0; i < 870; ++i) {
    const double gender = rng.bernoulli(0.55);
    const double age = 18.0 + 47.0 * rng.uniform();
    const double edu = 8.0 + rng.uniform_index(13);
    const double work = rng.bernoulli(0.8);
    const double noise = 0.4 * rng.student_t3();
    const double wage =
        std::exp(1.2 + 0.25 * gender + 0.030 * (age - 40.0) -
                 0.0005 * (age - 40.0) * (age - 40.0) + 0.08 * (edu - 12.0) +
                 0.30 * work + noise);
    rows.push_back({wage, gender, age, age * age, edu, work});
  }
  qesr::write_csv_file(tmp.path("pay.csv"),
                       {"wage", "gender", "age", "agesq", "edu", "work"},
                       rows);
  CliResult r = run(tmp, {"test", "--input", tmp.path("pay.csv"),
                          "--response", "wage", "--covariates",
                          "gender,age,agesq,edu,work", "--test-cols",
                          "gender,work", "--tau", "0.75", "--out",
                          tmp.path("pay.json")});
  CHECK(r.rc == 0);
  json rep = parse_file(tmp.path("pay.json"));
  CHECK(rep["n"] == 870);
  CHECK(rep["p"] == 6);
  REQUIRE(rep["theta_e"].size() == 6);
  for (const auto& v : rep["theta_e"]) CHECK(std::isfinite(v.get<double>()));
  CHECK(rep["tests"].size() == 2);
  expect_valid("test_report.schema.json", rep);
}

TEST_CASE("upper-tail reports are exact negations of the mirrored fit") {
  TempDir tmp;
  qesr::RngStream rng(5, 0);
  std::vector<std::vector<double>> rows_a, rows_b;
  for (int i = 0; i < 80; ++i) {
    const double x = rng.uniform();
    const double y = 1.0 + 2.0 * x + rng.student_t3();
    rows_a.push_back({y, x});
    rows_b.push_back({-y, x});
  }
  qesr::write_csv_file(tmp.path("a.csv"), {"y", "x"}, rows_a);
  qesr::write_csv_file(tmp.path("b.csv"), {"y", "x"}, rows_b);

  CHECK(run(tmp, {"fit", "--input", tmp.path("a.csv"), "--response", "y",
                  "--covariates", "x", "--tau", "0.75", "--tail", "upper",
                  "--out", tmp.path("a.json")})
            .rc == 0);
  CHECK(run(tmp, {"fit", "--input", tmp.path("b.csv"), "--response", "y",
                  "--covariates", "x", "--tau", "0.25", "--tail", "lower",
                  "--out", tmp.path("b.json")})
            .rc == 0);

  json a = parse_file(tmp.path("a.json"));
  json b = parse_file(tmp.path("b.json"));
  for (const char* key : {"theta_q", "theta_e"}) {
    REQUIRE(a[key].size() == b[key].size());
    for (std::size_t j = 0; j < a[key].size(); ++j) {
      CHECK(a[key][j].get<double>() == -b[key][j].get<double>());
    }
  }
  // The mirrored designs share one covariance matrix, hence one se vector.
  const json& sa = a["methods"]["w-iid"]["se"];
  const json& sb = b["methods"]["w-iid"]["se"];
  REQUIRE(sa.size() == sb.size());
  for (std::size_t j = 0; j < sa.size(); ++j) {
    CHECK(sa[j].get<double>() == sb[j].get<double>());
  }
}
