#ifndef APO_HARNESS_HPP
#define APO_HARNESS_HPP

// Experiment configs, metric files, grid sweeps, the self-check suite and the
// 1-D proximal point demo. Everything the command-line tool does lives here so
// tests can drive it without a subprocess.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "apo/baseopt.hpp"
#include "apo/diffnet.hpp"
#include "apo/kronprecond.hpp"
#include "apo/meta.hpp"
#include "apo/numkit.hpp"
#include "apo/oracles.hpp"
#include "apo/tasks.hpp"

namespace apo {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

struct ExperimentConfig {
  TaskSpec task;
  BaseOptKind optimizer = BaseOptKind::sgd();
  double lr = 0.01;
  AdaptMode mode = AdaptMode::none;
  ProximalConfig proximal = ProximalConfig::for_lr();
  KfacConfig kfac;
  std::size_t steps = 200;
  std::uint64_t seed = 0;
  std::string output;  // run directory used when the CLI gets no --out
  bool record_wallclock = false;
};

namespace detail {

template <typename E>
E parse_enum(const json& j, const std::string& ptr, std::initializer_list<E> all) {
  if (!j.is_string()) throw ConfigError(ptr + ": expected a string", ptr);
  const std::string s = j.get<std::string>();
  for (E e : all)
    if (to_string(e) == s) return e;
  std::string allowed;
  for (E e : all) allowed += (allowed.empty() ? "" : ", ") + to_string(e);
  throw ConfigError(ptr + ": unknown value '" + s + "' (expected one of " + allowed + ")", ptr);
}

// Reads members of one JSON object and rejects keys nobody asked for.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string ptr) : j_(j), ptr_(std::move(ptr)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object", where());
  }

  const json* find(const std::string& key) {
    seen_.push_back(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  std::string child(const std::string& key) const { return ptr_ + "/" + key; }

  template <typename T>
  void read(const std::string& key, T& out) {
    const json* v = find(key);
    if (!v) return;
    try {
      if constexpr (std::is_same_v<T, double>) {
        if (!v->is_number()) throw json::type_error::create(302, "expected a number", v);
      }
      if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
        // Integers built in code are stored signed even when positive.
        if (!v->is_number_integer() || v->get<std::int64_t>() < 0) {
          throw json::type_error::create(302, "expected a nonnegative integer", v);
        }
      }
      out = v->get<T>();
    } catch (const json::exception&) {
      throw ConfigError(child(key) + ": wrong type", child(key));
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end()) {
        throw ConfigError(child(it.key()) + ": unknown key", child(it.key()));
      }
    }
  }

  std::string where() const { return ptr_.empty() ? "/" : ptr_; }

 private:
  const json& j_;
  std::string ptr_;
  std::vector<std::string> seen_;
};

inline BaseOptKind parse_opt(const json& j, const std::string& ptr, BaseOptKind kind, double* lr) {
  ObjectReader r(j, ptr);
  if (const json* t = r.find("type")) {
    const auto type = parse_enum(*t, r.child("type"), {BaseOptKind::Type::sgd, BaseOptKind::Type::momentum,
                                                       BaseOptKind::Type::rmsprop, BaseOptKind::Type::adam});
    if (type != kind.type) {
      switch (type) {
        case BaseOptKind::Type::sgd: kind = BaseOptKind::sgd(); break;
        case BaseOptKind::Type::momentum: kind = BaseOptKind::momentum(); break;
        case BaseOptKind::Type::rmsprop: kind = BaseOptKind::rmsprop(); break;
        case BaseOptKind::Type::adam: kind = BaseOptKind::adam(); break;
      }
    }
  }
  r.read("beta1", kind.beta1);
  r.read("beta2", kind.beta2);
  r.read("eps", kind.eps);
  if (lr) r.read("lr", *lr);
  r.finish();
  try {
    kind.validate();
  } catch (const ContractError& e) {
    throw ConfigError(ptr + ": " + e.what(), ptr);
  }
  return kind;
}

inline json opt_to_json(const BaseOptKind& k) {
  return {{"type", to_string(k.type)}, {"beta1", k.beta1}, {"beta2", k.beta2}, {"eps", k.eps}};
}

}  // namespace detail

inline ExperimentConfig parse_config(const json& j) {
  ExperimentConfig c;
  detail::ObjectReader r(j, "");
  if (const json* m = r.find("mode")) {
    c.mode = detail::parse_enum(*m, "/mode", {AdaptMode::none, AdaptMode::apo_lr, AdaptMode::apo_precond, AdaptMode::kfac});
  }
  if (c.mode == AdaptMode::apo_precond) {
    c.proximal = ProximalConfig::for_precond();
    c.optimizer = BaseOptKind::momentum();
  }

  if (const json* t = r.find("task")) {
    detail::ObjectReader tr(*t, "/task");
    if (const json* k = tr.find("kind")) {
      c.task.kind = detail::parse_enum(*k, "/task/kind",
                                       {TaskKind::rosenbrock, TaskKind::illcond_linear, TaskKind::synth_regression,
                                        TaskKind::synth_classification, TaskKind::bottleneck_autoencoder, TaskKind::uci_csv});
    }
    tr.read("dim", c.task.dim);
    tr.read("hidden", c.task.hidden);
    tr.read("classes", c.task.classes);
    tr.read("batch_size", c.task.batch_size);
    tr.read("dataset_size", c.task.dataset_size);
    tr.read("kappa", c.task.kappa);
    tr.read("noise", c.task.noise);
    tr.read("separation", c.task.separation);
    tr.read("csv_path", c.task.csv_path);
    tr.finish();
  }
  if (const json* o = r.find("optimizer")) c.optimizer = detail::parse_opt(*o, "/optimizer", c.optimizer, &c.lr);

  if (const json* p = r.find("proximal")) {
    detail::ObjectReader pr(*p, "/proximal");
    auto& x = c.proximal;
    pr.read("lambda_fsd", x.lambda_fsd);
    pr.read("lambda_wsd", x.lambda_wsd);
    if (const json* k = pr.find("fsd_kind")) {
      x.fsd_kind = detail::parse_enum(*k, "/proximal/fsd_kind",
                                      {FsdKind::kl_categorical, FsdKind::kl_gaussian, FsdKind::squared_distance});
    }
    pr.read("interval", x.interval);
    pr.read("meta_lr", x.meta_lr);
    if (const json* mo = pr.find("meta_opt")) x.meta_opt = detail::parse_opt(*mo, "/proximal/meta_opt", x.meta_opt, nullptr);
    pr.read("warmup_steps", x.warmup_steps);
    if (const json* b = pr.find("loss_batch_policy")) {
      x.loss_batch_policy = detail::parse_enum(*b, "/proximal/loss_batch_policy", {BatchPolicy::same, BatchPolicy::fresh});
    }
    if (const json* b = pr.find("fsd_batch_policy")) {
      x.fsd_batch_policy = detail::parse_enum(*b, "/proximal/fsd_batch_policy", {BatchPolicy::same, BatchPolicy::fresh});
    }
    pr.read("scale", x.scale);
    pr.finish();
  }
  if (const json* k = r.find("kfac")) {
    detail::ObjectReader kr(*k, "/kfac");
    kr.read("damping", c.kfac.damping);
    kr.read("ema", c.kfac.ema);
    kr.finish();
  }
  r.read("steps", c.steps);
  r.read("seed", c.seed);
  r.read("output", c.output);
  r.read("record_wallclock", c.record_wallclock);
  r.finish();

  auto invalid = [](const std::string& ptr, const std::string& what) { throw ConfigError(ptr + ": " + what, ptr); };
  if (c.steps < 1) invalid("/steps", "must be >= 1");
  if (!(c.lr > 0.0)) invalid("/optimizer/lr", "must be positive");
  try {
    c.proximal.validate();
  } catch (const ContractError& e) {
    invalid("/proximal", e.what());
  }
  try {
    c.task.validate();
  } catch (const ContractError& e) {
    invalid("/task", e.what());
  }
  if (c.mode == AdaptMode::kfac && (!(c.kfac.damping > 0.0) || !(c.kfac.ema >= 0.0 && c.kfac.ema < 1.0))) {
    invalid("/kfac", "needs damping > 0 and ema in [0, 1)");
  }
  if (c.task.kind == TaskKind::rosenbrock && c.mode == AdaptMode::kfac) invalid("/mode", "kfac needs a layered model");
  return c;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what(), "");
  }
  return parse_config(j);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path, "");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

inline json to_json(const ExperimentConfig& c) {
  const auto& p = c.proximal;
  json opt = detail::opt_to_json(c.optimizer);
  opt["lr"] = c.lr;
  return {
      {"task",
       {{"kind", to_string(c.task.kind)},
        {"dim", c.task.dim},
        {"hidden", c.task.hidden},
        {"classes", c.task.classes},
        {"batch_size", c.task.batch_size},
        {"dataset_size", c.task.dataset_size},
        {"kappa", c.task.kappa},
        {"noise", c.task.noise},
        {"separation", c.task.separation},
        {"csv_path", c.task.csv_path}}},
      {"optimizer", opt},
      {"mode", to_string(c.mode)},
      {"proximal",
       {{"lambda_fsd", p.lambda_fsd},
        {"lambda_wsd", p.lambda_wsd},
        {"fsd_kind", to_string(p.fsd_kind)},
        {"interval", p.interval},
        {"meta_lr", p.meta_lr},
        {"meta_opt", detail::opt_to_json(p.meta_opt)},
        {"warmup_steps", p.warmup_steps},
        {"loss_batch_policy", to_string(p.loss_batch_policy)},
        {"fsd_batch_policy", to_string(p.fsd_batch_policy)},
        {"scale", p.scale}}},
      {"kfac", {{"damping", c.kfac.damping}, {"ema", c.kfac.ema}}},
      {"steps", c.steps},
      {"seed", c.seed},
      {"output", c.output},
      {"record_wallclock", c.record_wallclock},
  };
}

/// APO_SEED, when set to an unsigned integer, replaces the config seed.
inline void apply_seed_override(ExperimentConfig& c) {
  const char* s = std::getenv("APO_SEED");
  if (!s || !*s) return;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(s, &end, 10);
  if (*end != '\0' || s[0] == '-') throw ConfigError(std::string("APO_SEED is not an unsigned integer: ") + s, "/seed");
  c.seed = v;
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string config_hash(const ExperimentConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(to_json(c).dump())));
  return buf;
}

// ---------------------------------------------------------------------------
// Metrics files

inline constexpr const char* kMetricsSchema = "apo-metrics/1";
inline const std::vector<std::string> kMetricsColumns = {"step",   "train_loss",          "eval_loss",
                                                         "meta_objective", "lr", "phi_frobenius_norm",
                                                         "fsd_term", "wsd_term",            "wallclock_ms"};

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

inline std::string format_optional(const std::optional<double>& v) { return v ? format_number(*v) : std::string(); }

inline std::string metrics_header() {
  std::string h;
  for (const auto& c : kMetricsColumns) h += (h.empty() ? "" : ",") + c;
  return h;
}

inline std::string metrics_line(const TrainRow& r, AdaptMode mode, std::optional<double> wallclock_ms) {
  const bool precond = mode == AdaptMode::apo_precond;
  std::string s = std::to_string(r.step);
  for (const std::string& cell :
       {format_number(r.train_loss), format_optional(r.eval_loss), format_optional(r.meta_objective),
        precond ? std::string() : format_number(r.lr_or_phi_norm), precond ? format_number(r.lr_or_phi_norm) : std::string(),
        format_number(r.fsd_term), format_number(r.wsd_term), format_optional(wallclock_ms)}) {
    s += ',';
    s += cell;
  }
  return s;
}

/// Header, column count, numeric cells and strictly increasing steps.
/// Returns the number of data rows.
inline std::size_t validate_metrics_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != metrics_header()) throw ContractError("metrics file: unexpected header");
  std::size_t n = 0;
  long long last = -1;
  while (std::getline(in, line)) {
    ++n;
    const auto cells = detail::split_commas(line);
    if (cells.size() != kMetricsColumns.size()) {
      throw ContractError("metrics file: row " + std::to_string(n) + " has " + std::to_string(cells.size()) + " cells");
    }
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (cells[c].empty() && c != 0 && c != 1) continue;
      if (!detail::parse_number(cells[c])) {
        throw ContractError("metrics file: row " + std::to_string(n) + " column " + kMetricsColumns[c] + " is not numeric");
      }
    }
    const long long step = static_cast<long long>(*detail::parse_number(cells[0]));
    if (step <= last) throw ContractError("metrics file: steps are not strictly increasing at row " + std::to_string(n));
    last = step;
  }
  return n;
}

inline std::size_t validate_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("metrics file: cannot open " + path.string());
  return validate_metrics_csv(in);
}

// ---------------------------------------------------------------------------
// Runs

struct RunResult {
  std::string status = "ok";  // ok, diverged, error
  std::string message;
  std::size_t rows = 0;
  double final_loss = std::numeric_limits<double>::quiet_NaN();
  double best_loss = std::numeric_limits<double>::quiet_NaN();
  std::optional<double> final_eval_loss;
  std::optional<double> final_accuracy;
  std::optional<std::size_t> diverged_step;
  TrainLog log;
};

/// Trains per the config; the task is built from (task spec, seed).
inline RunResult execute(const ExperimentConfig& cfg, const RowSink& sink = {}) {
  TaskSpec spec = cfg.task;
  spec.seed = cfg.seed;
  const Task task = make_task(spec);
  Rng rng = Rng(cfg.seed).split(1);

  RunResult res;
  RowSink track = [&](const TrainRow& r) {
    ++res.rows;
    res.best_loss = std::isnan(res.best_loss) ? r.train_loss : std::min(res.best_loss, r.train_loss);
    if (sink) sink(r);
  };
  try {
    if (cfg.mode == AdaptMode::kfac) {
      KfacConfig k = cfg.kfac;
      k.lr = cfg.lr;
      res.log = kfac_train(task.model, task.init, k, task.source, cfg.steps, rng, track);
    } else {
      TrainConfig tc;
      tc.mode = cfg.mode;
      tc.base_opt = cfg.optimizer;
      tc.lr = cfg.lr;
      tc.prox = cfg.proximal;
      res.log = apo_train(task.model, task.init, tc, task.source, cfg.steps, rng, track);
    }
  } catch (const DivergenceError& e) {
    res.status = "diverged";
    res.message = e.what();
    res.diverged_step = e.step();
    return res;
  }
  const ParamSet& p = res.log.final_params;
  res.final_loss = task.source.objective ? task.source.objective(p) : res.log.rows.back().train_loss;
  res.best_loss = std::min(res.best_loss, res.final_loss);
  if (task.source.held_out) res.final_eval_loss = task.source.held_out(p);
  if (task.model.head == Head::classification && task.test) res.final_accuracy = accuracy(task.model, p, *task.test);
  return res;
}

/// Writes <dir>/metrics.csv and <dir>/config.json. Divergence still leaves the
/// rows up to the failing step on disk.
inline RunResult run(const ExperimentConfig& cfg, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    json side = to_json(cfg);
    side["schema"] = kMetricsSchema;
    side["config_hash"] = config_hash(cfg);
    std::ofstream cj(dir / "config.json");
    cj << side.dump(2) << '\n';
  }
  std::ofstream csv(dir / "metrics.csv", std::ios::binary);
  if (!csv) throw ContractError("cannot write " + (dir / "metrics.csv").string());
  csv << metrics_header() << '\n';
  const auto t0 = std::chrono::steady_clock::now();
  RunResult res = execute(cfg, [&](const TrainRow& r) {
    std::optional<double> ms;
    if (cfg.record_wallclock) ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    csv << metrics_line(r, cfg.mode, ms) << '\n';
  });
  csv.close();
  validate_metrics_csv(dir / "metrics.csv");
  return res;
}

// ---------------------------------------------------------------------------
// Grids

/// A sweep is a JSON object mapping JSON pointers into the config to arrays
/// of values, e.g. {"/optimizer/lr": [1e-3, 1e-2], "/seed": [0, 1, 2]}.
struct SweepPoint {
  std::size_t index = 0;
  json assignments;  // pointer -> value
  ExperimentConfig config;
};

inline std::vector<SweepPoint> expand_sweep(const json& base, const json& sweep) {
  if (!sweep.is_object() || sweep.empty()) throw ConfigError("sweep must be a nonempty object of pointer -> values", "");
  std::vector<std::pair<std::string, json>> axes;
  for (auto it = sweep.begin(); it != sweep.end(); ++it) {
    if (!it.value().is_array() || it.value().empty()) {
      throw ConfigError("sweep axis " + it.key() + " needs a nonempty array", it.key());
    }
    axes.emplace_back(it.key(), it.value());
  }
  std::vector<SweepPoint> points;
  std::vector<std::size_t> pos(axes.size(), 0);
  for (std::size_t idx = 0;; ++idx) {
    json cfg = base;
    json assign = json::object();
    for (std::size_t a = 0; a < axes.size(); ++a) {
      const json& v = axes[a].second[pos[a]];
      try {
        cfg[json::json_pointer(axes[a].first)] = v;
      } catch (const json::exception& e) {
        throw ConfigError("sweep axis " + axes[a].first + ": " + e.what(), axes[a].first);
      }
      assign[axes[a].first] = v;
    }
    points.push_back({idx, assign, parse_config(cfg)});
    std::size_t a = axes.size();
    while (a-- > 0) {
      if (++pos[a] < axes[a].second.size()) break;
      pos[a] = 0;
    }
    if (a == static_cast<std::size_t>(-1)) break;
  }
  return points;
}

struct GridRow {
  SweepPoint point;
  RunResult result;
  std::size_t rank = 0;  // 1 = lowest final loss among completed runs
};

inline std::string run_dir_name(const SweepPoint& p) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "run_%04zu", p.index);
  return buf;
}

/// Runs every point (up to `parallel` at once), writes per-run directories and
/// summary.csv. Failed runs are recorded and the sweep continues.
inline std::vector<GridRow> grid(const json& base, const json& sweep, const std::filesystem::path& out,
                                 std::size_t parallel = 1) {
  std::vector<SweepPoint> points = expand_sweep(base, sweep);
  std::vector<GridRow> rows(points.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < points.size();) {
      rows[i].point = points[i];
      try {
        rows[i].result = run(points[i].config, out / run_dir_name(points[i]));
      } catch (const std::exception& e) {
        rows[i].result.status = "error";
        rows[i].result.message = e.what();
      }
      rows[i].result.log = {};
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t k = 1; k < std::max<std::size_t>(1, parallel); ++k) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();

  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < rows.size(); ++i)
    if (rows[i].result.status == "ok") order.push_back(i);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return rows[a].result.final_loss < rows[b].result.final_loss; });
  for (std::size_t r = 0; r < order.size(); ++r) rows[order[r]].rank = r + 1;

  std::ofstream s(out / "summary.csv");
  s << "run,config_hash";
  for (auto it = sweep.begin(); it != sweep.end(); ++it) s << ',' << it.key();
  s << ",status,final_loss,best_loss,final_eval_loss,final_accuracy,rank\n";
  for (const auto& r : rows) {
    s << run_dir_name(r.point) << ',' << config_hash(r.point.config);
    for (auto it = sweep.begin(); it != sweep.end(); ++it) s << ',' << r.point.assignments.at(it.key()).dump();
    const bool ok = r.result.status == "ok";
    s << ',' << r.result.status << ',' << (ok ? format_number(r.result.final_loss) : "") << ','
      << (std::isnan(r.result.best_loss) ? "" : format_number(r.result.best_loss)) << ','
      << format_optional(r.result.final_eval_loss) << ',' << format_optional(r.result.final_accuracy) << ','
      << (r.rank ? std::to_string(r.rank) : "") << '\n';
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Self-checks

namespace checks {

inline KronBlocks random_blocks(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  return {random_normal(rng, fan_out, fan_out), random_normal(rng, fan_in, fan_in), random_normal(rng, fan_in, fan_out)};
}

using ApplyFn = std::function<Matrix(const KronBlocks&, const Matrix&)>;

/// Worst relative gap between `apply` and the dense Kronecker product over
/// `trials` random block sets with both fan sizes in [1, 8].
inline double precond_equivalence_error(Rng& rng, std::size_t trials, const ApplyFn& apply) {
  double worst = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t fi = 1 + rng.below(8), fo = 1 + rng.below(8);
    const KronBlocks k = random_blocks(rng, fi, fo);
    const Matrix g = random_normal(rng, fi, fo);
    const Matrix efficient = apply(k, g);
    const Matrix ref = unvec_cm<double>(matvec(dense_precond(k), vec_cm(g)), fi, fo);
    worst = std::max(worst, max_rel_diff(efficient, ref));
  }
  return worst;
}

/// Smallest eigenvalue of dense P_S over random block sets (fan sizes <= 8).
inline double precond_min_eigenvalue(Rng& rng, std::size_t trials) {
  double worst = std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t fi = 1 + rng.below(8), fo = 1 + rng.below(8);
    const KronBlocks k = random_blocks(rng, fi, fo);
    const Matrix p = symmetrize(dense_precond(k));
    // Scale-free: relative to the largest eigenvalue.
    const SymEig e = sym_eig(p);
    worst = std::min(worst, e.values.front() / std::max(1.0, e.values.back()));
  }
  return worst;
}

/// Max relative error between meta_gradient and central differences (h=1e-4
/// in phi space) on a random small MLP with the given layer widths.
inline double meta_gradient_fd_error(Rng& rng, bool precond, const std::vector<std::size_t>& widths = {3, 2, 2}) {
  const Model model = make_mlp(widths, Activation::sigmoid, Head::regression);
  const std::size_t in = widths.front(), out = widths.back();
  const ParamSet theta = init_params(model, rng);
  auto make_batch = [&](std::size_t n) {
    Batch b{random_normal(rng, n, in), random_normal(rng, n, out), {}};
    return b;
  };
  const Batch batch = make_batch(5), batch_prime = make_batch(4);
  ProximalConfig cfg;
  cfg.lambda_fsd = 0.5 + rng.uniform();
  cfg.lambda_wsd = 0.5 * rng.uniform();
  const BaseOptKind base = BaseOptKind::momentum();
  OptState state;
  state.m = Vector(model.num_params());
  for (auto& x : state.m) x = 0.1 * rng.normal();
  state.step = 3;

  MetaParams phi = LrPhi{std::log(0.05 + 0.5 * rng.uniform())};
  if (precond) {
    PrecondPhi p = init_identity(model, 0.9);
    for (auto& k : p.blocks) {
      for (Matrix* m : {&k.a, &k.b, &k.s})
        for (auto& x : m->data()) x += 0.3 * rng.normal();
    }
    for (auto& d : p.bias_diag)
      for (auto& x : d) x += 0.3 * rng.normal();
    phi = p;
  }
  const MetaProblem prob = make_meta_problem(model, theta, base, state, batch, batch_prime, cfg);
  const Vector analytic = flatten(meta_gradient(prob, phi).grad);
  const Vector x0 = flatten(phi);
  const double h = 1e-4;
  double worst = 0.0;
  for (std::size_t i = 0; i < x0.size(); ++i) {
    MetaParams plus = phi, minus = phi;
    Vector xp = x0, xm = x0;
    xp[i] += h;
    xm[i] -= h;
    assign(plus, xp);
    assign(minus, xm);
    const double fd = (meta_objective(prob, plus).total - meta_objective(prob, minus).total) / (2.0 * h);
    const double scale = std::max({std::abs(fd), std::abs(analytic[i]), 1e-6});
    worst = std::max(worst, std::abs(fd - analytic[i]) / scale);
  }
  return worst;
}

}  // namespace checks

inline Report check(std::uint64_t seed = 7) {
  Report r;
  Rng rng(seed);

  const double eq = checks::precond_equivalence_error(rng, 120, apply_precond);
  r.add("precond_efficient_matches_dense", eq, 1e-12, eq <= 1e-12, "120 random block sets up to 8x8");

  const double injected = checks::precond_equivalence_error(rng, 20, [](const KronBlocks& k, const Matrix& g) {
    KronBlocks flipped = k;
    flipped.a = transpose(k.a);  // B (S^2 o B^T G A^T) A: a transposition slip
    return apply_precond(flipped, g) * -1.0;
  });
  r.add("negative_control_sign_injection_detected", injected, 1e-12, injected > 1e-12,
        "a sign/transposition error in the efficient path must break the equivalence check");

  const double min_eig = checks::precond_min_eigenvalue(rng, 100);
  r.add("precond_psd", min_eig, -1e-10, min_eig >= -1e-10, "min eigenvalue / max(1, max eigenvalue)");

  {
    const Model m = make_mlp({5, 3, 2}, Activation::relu, Head::regression);
    const PrecondPhi phi = init_identity(m);
    std::size_t expected = 0;
    for (const auto& l : m.layers) expected += l.fan_in * l.fan_in + l.fan_out * l.fan_out + l.fan_in * l.fan_out + l.fan_out;
    r.add("precond_parameter_count", static_cast<double>(phi.num_params()), static_cast<double>(expected),
          phi.num_params() == expected);
  }

  {
    const Model m = make_mlp({4, 3, 2}, Activation::sigmoid, Head::regression);
    Rng local = rng.split(11);
    const ParamSet theta = init_params(m, local);
    const Batch b{random_normal(local, 6, 4), random_normal(local, 6, 2), {}};
    const ParamSet g = grad_params(m, theta, b);
    const Vector precond = apply_precond_update(theta, init_identity(m), g).flatten();
    const Vector sgd = apply_lr_update(theta.flatten(), 0.9, g.flatten());
    double diff = 0.0;
    for (std::size_t i = 0; i < sgd.size(); ++i) diff = std::max(diff, std::abs(precond[i] - sgd[i]));
    r.add("identity_init_is_scaled_sgd", diff, 0.0, diff == 0.0);
  }

  double lr_fd = 0.0, pc_fd = 0.0;
  for (int i = 0; i < 5; ++i) {
    lr_fd = std::max(lr_fd, checks::meta_gradient_fd_error(rng, false));
    pc_fd = std::max(pc_fd, checks::meta_gradient_fd_error(rng, true));
  }
  r.add("meta_gradient_lr_matches_fd", lr_fd, 1e-4, lr_fd < 1e-4);
  r.add("meta_gradient_precond_matches_fd", pc_fd, 1e-4, pc_fd < 1e-4);

  {
    const Matrix g{{2.0, 0.3, 0.0}, {0.3, 4.0, 0.1}, {0.0, 0.1, 1.0}};
    const Matrix samples = random_normal(rng, 64, 3);
    const Report t = verify_thm1(g, samples, 1.0, 0.2, rng);
    r.append(t);
    Matrix off = optimal_dense_precond(g, 1.0, 0.2);
    for (auto& x : off.data()) x += 1e-2;
    const Report neg = verify_thm1(g, samples, 1.0, 0.2, rng, off);
    r.add("negative_control_perturbed_precond_fails", neg.checks[0].measured, 1e-8, !neg.checks[0].pass,
          "P* + 1e-2 must fail the stationarity check");

    const Matrix p = optimal_dense_precond(g, 1.0, 0.2);
    const Matrix id = matmul(p, regularized_curvature(g, 1.0, 0.2));
    const double err = max_abs(id - Matrix::identity(3));
    r.add("optimal_precond_inverts_curvature", err, 1e-8, err <= 1e-8);
  }

  {
    Rng local = rng.split(13);
    r.append(verify_kfac_recovery(random_kfac_instance(local, 4, 3, 20)));
  }

  {
    const Model m = make_mlp({2, 3, 3}, Activation::sigmoid, Head::classification);
    Rng local = rng.split(17);
    const ParamSet theta = init_params(m, local);
    const Matrix g = fsd_hessian_exact(m, theta, random_normal(local, 10, 2), FsdKind::kl_categorical);
    const double e = sym_eig_min(g);
    const bool sym = is_symmetric(g);
    r.add("fsd_hessian_symmetric_psd", e, -1e-8, sym && e >= -1e-8);
  }

  {
    // Closed-form proximal step approaches the exact one as lambda_wsd grows.
    const Model m = make_mlp({1, 4, 1}, Activation::sigmoid, Head::regression);
    Rng local = rng.split(19);
    const ParamSet theta = init_params(m, local);
    const Batch b{Matrix{{0.5}}, Matrix{{2.0}}, {}};
    const Batch fsd_b{random_normal(local, 8, 1), Matrix(8, 1), {}};
    const Matrix gfsd = fsd_hessian_exact(m, theta, fsd_b.inputs, FsdKind::kl_gaussian);
    const ParamSet g = grad_params(m, theta, b);
    std::vector<double> gaps;
    for (double lw : {10.0, 100.0, 1000.0}) {
      const PpmProblem prob{m, theta, b, fsd_b, 1.0, lw, FsdKind::kl_gaussian};
      const Vector exact = exact_ppm_solve(prob).u.flatten();
      const Vector approx = approx_ppm_update(theta, g, gfsd, 1.0, lw).flatten();
      const Vector th = theta.flatten();
      double num = 0.0, den = 0.0;
      for (std::size_t i = 0; i < th.size(); ++i) {
        num += (approx[i] - exact[i]) * (approx[i] - exact[i]);
        den += (exact[i] - th[i]) * (exact[i] - th[i]);
      }
      gaps.push_back(std::sqrt(num / den));
    }
    const bool mono = gaps[0] > gaps[1] && gaps[1] > gaps[2];
    r.add("ppm_closed_form_converges_to_exact", gaps[2], gaps[1], mono,
          "relative step gap at lambda_wsd = 10, 100, 1000 must decrease");
  }

  {
    const Matrix h{{2.0}};
    const Vector u = damped_newton_update(Vector{1.0}, Vector{2.0}, h, 2.0);
    r.add("damped_newton_scalar", u[0], 0.5, u[0] == 0.5);
  }
  return r;
}

// ---------------------------------------------------------------------------
// 1-D proximal point demo

struct PpmSetting {
  double lambda_fsd = 0.0;
  double lambda_wsd = 0.0;
};

struct PpmCurve {
  PpmSetting setting;
  Vector x, before, after;
  double change_at_example = 0.0;  // |f_after - f_before| at the new example
  double mean_change_outside = 0.0;  // mean |f_after - f_before| beyond +-0.5 of it
  double max_change_far = 0.0;       // max |f_after - f_before| beyond +-1.5 of it
  std::size_t iterations = 0;
};

struct PpmDemo {
  Model model;
  ParamSet fitted;
  Dataset data;
  double new_x = 0.0, new_y = 0.0;
  std::vector<PpmCurve> curves;
};

/// Frozen (both penalties large), global (weight-space only) and local
/// (function-space only) regimes.
inline std::vector<PpmSetting> default_ppm_settings() { return {{1e4, 1e4}, {0.0, 0.1}, {10.0, 0.0}}; }

/// Fits a small network to noisy sin(x) on [-3, 3], then applies one exact
/// proximal step toward a single new example per setting. The function-space
/// term is averaged over the 40 training inputs. With lambda_wsd = 0 the
/// infimum is approached by ever sharper bumps, so the inner gradient norm
/// plateaus around 1e-6 and `tol` cannot go much lower.
inline PpmDemo ppm_demo(const std::vector<PpmSetting>& settings, std::uint64_t seed = 3, double tol = 1e-6) {
  PpmDemo d;
  Rng rng(seed);
  d.model = make_mlp({1, 16, 16, 1}, Activation::sigmoid, Head::regression);
  const std::size_t n = 40;
  d.data = Dataset{Matrix(n, 1), Matrix(n, 1), {}};
  for (std::size_t i = 0; i < n; ++i) {
    const double x = -3.0 + 6.0 * (static_cast<double>(i) + 0.5) / static_cast<double>(n);
    d.data.inputs(i, 0) = x;
    d.data.targets(i, 0) = std::sin(x) + 0.05 * rng.normal();
  }
  ParamSet theta = init_params(d.model, rng);
  const Batch all = d.data.all();
  OptState st;
  for (int it = 0; it < 4000; ++it) {
    const ParamSet g = grad_params(d.model, theta, all);
    DirectionResult dir = update_direction(BaseOptKind::adam(), st, g.flatten());
    st = std::move(dir.state);
    theta.assign(apply_lr_update(theta.flatten(), 0.01, dir.direction));
  }
  d.fitted = theta;
  d.new_x = 0.5;
  d.new_y = predict(d.model, theta, Matrix{{d.new_x}})(0, 0) + 1.0;
  const Batch example{Matrix{{d.new_x}}, Matrix{{d.new_y}}, {}};

  const std::size_t grid_n = 241;
  Matrix xs(grid_n, 1);
  for (std::size_t i = 0; i < grid_n; ++i) xs(i, 0) = -3.0 + 6.0 * static_cast<double>(i) / static_cast<double>(grid_n - 1);
  const Matrix before = predict(d.model, theta, xs);
  const double before_at = predict(d.model, theta, example.inputs)(0, 0);

  for (const PpmSetting& s : settings) {
    const PpmProblem prob{d.model, theta, example, all, s.lambda_fsd, s.lambda_wsd, FsdKind::kl_gaussian};
    PpmSolveOptions opt;
    opt.tol = tol;
    opt.method = PpmMethod::lbfgs;
    const PpmResult res = exact_ppm_solve(prob, opt);
    const Matrix after = predict(d.model, res.u, xs);
    PpmCurve c{s, Vector(grid_n), Vector(grid_n), Vector(grid_n)};
    c.iterations = res.iterations;
    c.change_at_example = std::abs(predict(d.model, res.u, example.inputs)(0, 0) - before_at);
    double outside = 0.0;
    std::size_t n_out = 0;
    for (std::size_t i = 0; i < grid_n; ++i) {
      c.x[i] = xs(i, 0);
      c.before[i] = before(i, 0);
      c.after[i] = after(i, 0);
      const double delta = std::abs(after(i, 0) - before(i, 0));
      const double dist = std::abs(xs(i, 0) - d.new_x);
      if (dist > 0.5) {
        outside += delta;
        ++n_out;
      }
      if (dist > 1.5) c.max_change_far = std::max(c.max_change_far, delta);
    }
    c.mean_change_outside = outside / static_cast<double>(n_out);
    d.curves.push_back(std::move(c));
  }
  return d;
}

inline void write_ppm_demo_csv(std::ostream& out, const PpmDemo& d) {
  out << "lambda_fsd,lambda_wsd,x,f_before,f_after\n";
  for (const auto& c : d.curves)
    for (std::size_t i = 0; i < c.x.size(); ++i) {
      out << format_number(c.setting.lambda_fsd) << ',' << format_number(c.setting.lambda_wsd) << ','
          << format_number(c.x[i]) << ',' << format_number(c.before[i]) << ',' << format_number(c.after[i]) << '\n';
    }
}

}  // namespace apo

#endif  // APO_HARNESS_HPP
