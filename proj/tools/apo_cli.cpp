// apo: command-line front end for runs, grids, self-checks and the PPM demo.
//
// Exit codes: 0 success, 2 config error, 3 divergence, 4 check failure,
// 1 anything else (I/O, unexpected exceptions).

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "apo/harness.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;
constexpr int kExitCheck = 4;

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw apo::ConfigError("cannot open " + path, "");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw apo::ConfigError(path + ": " + e.what(), "");
  }
}

int cmd_run(const std::string& config_path, const std::string& out) {
  apo::ExperimentConfig cfg = apo::load_config(config_path);
  apo::apply_seed_override(cfg);
  std::filesystem::path dir = out.empty() ? std::filesystem::path(cfg.output) : std::filesystem::path(out);
  if (dir.empty()) throw apo::ConfigError("no output directory: pass --out or set \"output\"", "/output");
  const apo::RunResult res = apo::run(cfg, dir);
  if (res.status == "diverged") {
    std::fprintf(stderr, "diverged: %s\n", res.message.c_str());
    return kExitDiverged;
  }
  std::printf("%zu rows, final loss %s, best loss %s -> %s\n", res.rows, apo::format_number(res.final_loss).c_str(),
              apo::format_number(res.best_loss).c_str(), (dir / "metrics.csv").string().c_str());
  return kExitOk;
}

int cmd_grid(const std::string& config_path, const std::string& sweep_path, const std::string& out,
             std::size_t parallel) {
  nlohmann::json base = read_json_file(config_path);
  if (std::getenv("APO_SEED")) {
    apo::ExperimentConfig probe = apo::parse_config(base);
    apo::apply_seed_override(probe);
    base["seed"] = probe.seed;
  }
  const nlohmann::json sweep = read_json_file(sweep_path);
  std::filesystem::create_directories(out);
  const auto rows = apo::grid(base, sweep, out, parallel);
  std::size_t ok = 0;
  for (const auto& r : rows) {
    if (r.result.status == "ok") ++ok;
    if (r.rank == 1) {
      std::printf("best: %s final loss %s %s\n", apo::run_dir_name(r.point).c_str(),
                  apo::format_number(r.result.final_loss).c_str(), r.point.assignments.dump().c_str());
    }
  }
  std::printf("%zu/%zu runs completed -> %s\n", ok, rows.size(), (std::filesystem::path(out) / "summary.csv").string().c_str());
  return kExitOk;
}

int cmd_check(const std::string& json_path) {
  const apo::Report rep = apo::check();
  for (const auto& c : rep.checks) {
    std::printf("%-4s %-48s measured %-12s threshold %s\n", c.pass ? "ok" : "FAIL", c.name.c_str(),
                apo::format_number(c.measured).c_str(), apo::format_number(c.threshold).c_str());
  }
  const nlohmann::json j = apo::to_json(rep);
  if (!json_path.empty()) {
    std::ofstream f(json_path);
    if (!f) throw std::runtime_error("cannot write " + json_path);
    f << j.dump(2) << '\n';
  }
  std::printf("%zu checks, %s\n", rep.checks.size(), rep.all_pass() ? "all passed" : "FAILURES");
  return rep.all_pass() ? kExitOk : kExitCheck;
}

int cmd_ppm_demo(const std::string& out, const std::vector<double>& lf, const std::vector<double>& lw) {
  std::vector<apo::PpmSetting> settings;
  if (lf.empty() && lw.empty()) {
    settings = apo::default_ppm_settings();
  } else if (lf.size() != lw.size()) {
    throw apo::ConfigError("--lambda-fsd and --lambda-wsd need the same number of values", "");
  } else {
    for (std::size_t i = 0; i < lf.size(); ++i) {
      if (lf[i] < 0 || lw[i] < 0) throw apo::ConfigError("lambda values must be nonnegative", "");
      settings.push_back({lf[i], lw[i]});
    }
  }
  const apo::PpmDemo demo = apo::ppm_demo(settings);
  std::ofstream f(out);
  if (!f) throw std::runtime_error("cannot write " + out);
  apo::write_ppm_demo_csv(f, demo);
  for (const auto& c : demo.curves) {
    std::printf("lambda_fsd=%-8s lambda_wsd=%-8s change at example %.4g, mean change outside +-0.5 %.4g, "
                "max change beyond +-1.5 %.4g (%zu iterations)\n",
                apo::format_number(c.setting.lambda_fsd).c_str(), apo::format_number(c.setting.lambda_wsd).c_str(),
                c.change_at_example, c.mean_change_outside, c.max_change_far, c.iterations);
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-learned proximal optimization experiments"};
  app.require_subcommand(1);

  std::string config, out, sweep, json_out;
  std::size_t parallel = 1;
  std::vector<double> lambda_fsd, lambda_wsd;

  auto* run = app.add_subcommand("run", "train one configuration and write metrics.csv");
  run->add_option("--config", config, "experiment JSON")->required()->check(CLI::ExistingFile);
  run->add_option("--out", out, "run directory (defaults to the config's \"output\")");

  auto* grid = app.add_subcommand("grid", "run the Cartesian product of a sweep");
  grid->add_option("--config", config, "base experiment JSON")->required()->check(CLI::ExistingFile);
  grid->add_option("--sweep", sweep, "JSON object of pointer -> values")->required()->check(CLI::ExistingFile);
  grid->add_option("--out", out, "output directory")->required();
  grid->add_option("--parallel", parallel, "concurrent runs")->check(CLI::PositiveNumber);

  auto* check = app.add_subcommand("check", "run every oracle and invariant check");
  check->add_option("--json", json_out, "write the JSON report here");

  auto* ppm = app.add_subcommand("ppm-demo", "exact proximal steps on a 1-D regression fit");
  ppm->add_option("--out", out, "curve CSV")->required();
  ppm->add_option("--lambda-fsd", lambda_fsd, "function-space weights, paired with --lambda-wsd");
  ppm->add_option("--lambda-wsd", lambda_wsd, "weight-space weights");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*run) return cmd_run(config, out);
    if (*grid) return cmd_grid(config, sweep, out, parallel);
    if (*check) return cmd_check(json_out);
    if (*ppm) return cmd_ppm_demo(out, lambda_fsd, lambda_wsd);
  } catch (const apo::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const apo::DivergenceError& e) {
    std::fprintf(stderr, "diverged at step %zu: %s\n", e.step(), e.what());
    return kExitDiverged;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitOther;
  }
  return kExitOther;
}
