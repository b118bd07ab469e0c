#ifndef APO_TASKS_HPP
#define APO_TASKS_HPP

// Small benchmark problems and CSV ingestion.

#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "apo/diffnet.hpp"
#include "apo/meta.hpp"
#include "apo/numkit.hpp"

namespace apo {

enum class TaskKind { rosenbrock, illcond_linear, synth_regression, synth_classification, bottleneck_autoencoder, uci_csv };

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::rosenbrock: return "rosenbrock";
    case TaskKind::illcond_linear: return "illcond-linear";
    case TaskKind::synth_regression: return "synth-regression";
    case TaskKind::synth_classification: return "synth-classification";
    case TaskKind::bottleneck_autoencoder: return "bottleneck-autoencoder";
    case TaskKind::uci_csv: return "uci-csv";
  }
  return "?";
}

struct TaskSpec {
  TaskKind kind = TaskKind::rosenbrock;
  std::size_t dim = 64;           // input dimension
  std::size_t hidden = 32;        // hidden width of the student MLP
  std::size_t classes = 4;
  std::size_t batch_size = 128;
  std::size_t dataset_size = 1000;  // training examples; ignored by streaming tasks
  double kappa = 1e10;
  double noise = 0.1;
  double separation = 3.0;  // norm of each class mean
  std::string csv_path;
  std::uint64_t seed = 0;

  void validate() const {
    if (kind == TaskKind::rosenbrock) return;
    if (dim < 1 || batch_size < 1) throw ContractError("task dims and batch size must be positive");
    if (kind == TaskKind::illcond_linear) {
      if (dim < 2) throw ContractError("illcond-linear needs dim >= 2");
      if (!(kappa >= 1.0)) throw ContractError("illcond-linear needs kappa >= 1");
      return;
    }
    if (kind == TaskKind::uci_csv) {
      if (csv_path.empty()) throw ContractError("uci-csv needs a csv_path");
      return;
    }
    if (batch_size > dataset_size) throw ContractError("batch size exceeds the dataset size");
    if (kind == TaskKind::synth_classification && classes < 2) throw ContractError("classification needs >= 2 classes");
    if (!(noise >= 0.0)) throw ContractError("noise must be >= 0");
  }
};

struct Dataset {
  Matrix inputs;
  Matrix targets;                   // regression targets (empty for classification)
  std::vector<std::size_t> labels;  // class labels (empty for regression)

  std::size_t size() const { return inputs.rows(); }

  Batch rows(const std::vector<std::size_t>& idx) const {
    Batch b{Matrix(idx.size(), inputs.cols()), Matrix(labels.empty() ? idx.size() : 0, targets.cols()), {}};
    for (std::size_t r = 0; r < idx.size(); ++r) {
      for (std::size_t j = 0; j < inputs.cols(); ++j) b.inputs(r, j) = inputs(idx[r], j);
      if (labels.empty())
        for (std::size_t j = 0; j < targets.cols(); ++j) b.targets(r, j) = targets(idx[r], j);
      else
        b.labels.push_back(labels[idx[r]]);
    }
    return b;
  }

  Batch all() const {
    std::vector<std::size_t> idx(size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return rows(idx);
  }
};

/// Uniform minibatch of `n` indices drawn with replacement.
inline Batch sample_batch(const Dataset& data, std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (auto& i : idx) i = rng.below(data.size());
  return data.rows(idx);
}

struct Task {
  TaskSpec spec;
  Model model;
  ParamSet init;
  std::shared_ptr<const Dataset> train;  // null for streaming tasks
  std::shared_ptr<const Dataset> test;
  Matrix target_map;                     // A of the ill-conditioned task
  std::optional<ParamSet> reference;     // parameters known to fit (teacher, exact factorization)
  DataSource source;
};

// ---------------------------------------------------------------------------
// Standardization

struct ColumnStats {
  Vector mean;
  Vector stddev;  // population convention
  std::vector<std::size_t> constant_columns;
};

inline constexpr double kStdFloor = 1e-12;

/// Standardizes columns in place: zero mean, unit population variance. Columns
/// whose deviation is below 1e-12 become all zeros.
inline ColumnStats standardize(Matrix& m) {
  ColumnStats s{Vector(m.cols(), 0.0), Vector(m.cols(), 0.0), {}};
  if (m.rows() == 0) return s;
  const double n = static_cast<double>(m.rows());
  for (std::size_t j = 0; j < m.cols(); ++j) {
    double mu = 0.0;
    for (std::size_t i = 0; i < m.rows(); ++i) mu += m(i, j);
    mu /= n;
    double var = 0.0;
    for (std::size_t i = 0; i < m.rows(); ++i) var += (m(i, j) - mu) * (m(i, j) - mu);
    const double sd = std::sqrt(var / n);
    s.mean[j] = mu;
    s.stddev[j] = sd;
    const bool constant = sd < kStdFloor;
    if (constant) s.constant_columns.push_back(j);
    for (std::size_t i = 0; i < m.rows(); ++i) m(i, j) = constant ? 0.0 : (m(i, j) - mu) / sd;
  }
  return s;
}

inline void apply_standardization(Matrix& m, const ColumnStats& s) {
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j)
      m(i, j) = s.stddev[j] < kStdFloor ? 0.0 : (m(i, j) - s.mean[j]) / s.stddev[j];
}

// ---------------------------------------------------------------------------
// Generators

inline Batch rosenbrock_batch() { return {Matrix(1, 0), Matrix(), {}}; }

/// f(x, y) = (1 - x)^2 + 100 (y - x^2)^2 from (1, -1.5). One deterministic
/// "example"; the model output is f itself.
inline Task rosenbrock_task() {
  Task t;
  t.spec.kind = TaskKind::rosenbrock;
  t.spec.batch_size = 1;
  t.spec.dataset_size = 1;
  t.model = make_rosenbrock_model();
  t.init = zero_params(t.model);
  t.init.layers[0].weight(0, 0) = 1.0;
  t.init.layers[0].weight(0, 1) = -1.5;
  ParamSet opt = t.init;
  opt.layers[0].weight(0, 1) = 1.0;
  t.reference = opt;
  const Model model = t.model;
  t.source.sample = [](Rng&) { return rosenbrock_batch(); };
  t.source.objective = [model](const ParamSet& p) { return batch_loss(model, p, rosenbrock_batch()); };
  return t;
}

/// A = U diag(sigma) V^T with sigma log-spaced from 1 to 1/kappa.
inline Matrix illcond_matrix(std::size_t d, double kappa, Rng& rng) {
  const Matrix u = rand_orthogonal(rng, d);
  const Matrix v = rand_orthogonal(rng, d);
  Matrix us = u;
  for (std::size_t j = 0; j < d; ++j) {
    const double sigma = std::pow(kappa, -static_cast<double>(j) / static_cast<double>(d - 1));
    for (std::size_t i = 0; i < d; ++i) us(i, j) *= sigma;
  }
  return matmul_nt(us, v);
}

inline double condition_number(const Matrix& a) {
  const Vector sv = singular_values(a);
  return sv.front() / sv.back();
}

/// Two-layer linear network x W1 W2 regressing t = A x with x ~ N(0, I),
/// a fresh batch per step. The logged objective is the population loss
/// E|A x - W2^T W1^T x|^2 = |A^T - W1 W2|_F^2.
inline Task illcond_linear_task(std::size_t d, double kappa, std::size_t batch_size, Rng& rng) {
  TaskSpec spec;
  spec.kind = TaskKind::illcond_linear;
  spec.dim = d;
  spec.kappa = kappa;
  spec.batch_size = batch_size;
  spec.validate();
  Task t;
  t.spec = spec;
  t.target_map = illcond_matrix(d, kappa, rng);
  const double measured = condition_number(t.target_map);
  if (std::abs(measured / kappa - 1.0) > 0.01) {
    throw NumericalError("illcond_linear_task: condition number " + std::to_string(measured) + " misses " +
                         std::to_string(kappa) + " by more than 1%");
  }
  t.model = make_mlp({d, d, d}, Activation::linear, Head::regression, false);
  t.init = init_params(t.model, rng);
  ParamSet exact = zero_params(t.model);
  exact.layers[0].weight = Matrix::identity(d);
  exact.layers[1].weight = transpose(t.target_map);
  t.reference = exact;

  const auto at = std::make_shared<const Matrix>(transpose(t.target_map));
  t.source.sample = [at, d, batch_size](Rng& r) {
    Batch b{random_normal(r, batch_size, d), {}, {}};
    b.targets = matmul(b.inputs, *at);
    return b;
  };
  t.source.objective = [at](const ParamSet& p) {
    const Matrix diff = *at - matmul(p.layers[0].weight, p.layers[1].weight);
    const double f = frobenius(diff);
    return f * f;
  };
  return t;
}

namespace detail {

inline void attach_finite_source(Task& t, bool with_held_out) {
  const Model model = t.model;
  const auto train = t.train;
  const std::size_t bs = t.spec.batch_size;
  const auto full_train = std::make_shared<const Batch>(train->all());
  t.source.sample = [train, bs](Rng& r) { return sample_batch(*train, bs, r); };
  t.source.objective = [model, full_train](const ParamSet& p) { return batch_loss(model, p, *full_train); };
  if (with_held_out && t.test && t.test->size() > 0) {
    const auto full_test = std::make_shared<const Batch>(t.test->all());
    t.source.held_out = [model, full_test](const ParamSet& p) { return batch_loss(model, p, *full_test); };
  }
}

inline std::size_t held_out_size(std::size_t n) { return std::max<std::size_t>(1, n / 4); }

}  // namespace detail

/// Inputs x ~ N(0, I); targets from a random ReLU teacher with the student's
/// architecture plus Gaussian noise; inputs and targets standardized with
/// training-set statistics. `reference` holds the teacher re-expressed in the
/// standardized coordinates.
inline Task synth_regression_task(const TaskSpec& spec_in, Rng& rng) {
  TaskSpec spec = spec_in;
  spec.kind = TaskKind::synth_regression;
  spec.validate();
  Task t;
  t.spec = spec;
  t.model = make_mlp({spec.dim, spec.hidden, 1}, Activation::relu, Head::regression);
  ParamSet teacher = zero_params(t.model);
  for (std::size_t l = 0; l < teacher.layers.size(); ++l) {
    const double s = 1.0 / std::sqrt(static_cast<double>(t.model.layers[l].fan_in));
    teacher.layers[l].weight = random_normal(rng, t.model.layers[l].fan_in, t.model.layers[l].fan_out, s);
    for (auto& b : teacher.layers[l].bias) b = 0.1 * rng.normal();
  }
  auto make = [&](std::size_t n) {
    Dataset d{random_normal(rng, n, spec.dim), {}, {}};
    d.targets = predict(t.model, teacher, d.inputs);
    for (auto& y : d.targets.data()) y += spec.noise * rng.normal();
    return d;
  };
  Dataset train = make(spec.dataset_size);
  Dataset test = make(detail::held_out_size(spec.dataset_size));
  const ColumnStats xs = standardize(train.inputs);
  const ColumnStats ys = standardize(train.targets);
  apply_standardization(test.inputs, xs);
  apply_standardization(test.targets, ys);

  // x = x' sd + mu folds into the first layer; (y - mu) / sd into the last.
  ParamSet ref = teacher;
  auto& w0 = ref.layers.front();
  for (std::size_t j = 0; j < w0.weight.cols(); ++j) {
    double shift = 0.0;
    for (std::size_t i = 0; i < w0.weight.rows(); ++i) {
      shift += xs.mean[i] * teacher.layers.front().weight(i, j);
      w0.weight(i, j) *= xs.stddev[i];
    }
    w0.bias[j] += shift;
  }
  auto& wl = ref.layers.back();
  for (auto& x : wl.weight.data()) x /= ys.stddev[0];
  wl.bias[0] = (wl.bias[0] - ys.mean[0]) / ys.stddev[0];
  t.reference = ref;

  t.init = init_params(t.model, rng);
  t.train = std::make_shared<const Dataset>(std::move(train));
  t.test = std::make_shared<const Dataset>(std::move(test));
  detail::attach_finite_source(t, true);
  return t;
}

/// Gaussian blobs with class means of norm `separation`, unit isotropic noise
/// and uniform labels; inputs standardized.
inline Task synth_classification_task(const TaskSpec& spec_in, Rng& rng) {
  TaskSpec spec = spec_in;
  spec.kind = TaskKind::synth_classification;
  spec.validate();
  Task t;
  t.spec = spec;
  t.model = make_mlp({spec.dim, spec.hidden, spec.classes}, Activation::relu, Head::classification);
  // Pairs of classes sit at +-separation along orthogonal random axes, so
  // classes 2c and 2c+1 are 2 * separation apart. Beyond 2 * dim classes the
  // remaining means are random directions.
  Matrix means(spec.classes, spec.dim);
  const Matrix axes = rand_orthogonal(rng, spec.dim);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    if (c / 2 < spec.dim) {
      const double sign = c % 2 == 0 ? 1.0 : -1.0;
      for (std::size_t j = 0; j < spec.dim; ++j) means(c, j) = sign * spec.separation * axes(j, c / 2);
    } else {
      for (auto& x : means.row(c)) x = rng.normal();
      const double n = norm2(means.row(c));
      for (auto& x : means.row(c)) x *= spec.separation / n;
    }
  }
  auto make = [&](std::size_t n) {
    Dataset d{Matrix(n, spec.dim), {}, std::vector<std::size_t>(n)};
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = rng.below(spec.classes);
      d.labels[i] = c;
      for (std::size_t j = 0; j < spec.dim; ++j) d.inputs(i, j) = means(c, j) + rng.normal();
    }
    return d;
  };
  Dataset train = make(spec.dataset_size);
  Dataset test = make(detail::held_out_size(spec.dataset_size));
  const ColumnStats xs = standardize(train.inputs);
  apply_standardization(test.inputs, xs);
  t.target_map = means;
  t.init = init_params(t.model, rng);
  t.train = std::make_shared<const Dataset>(std::move(train));
  t.test = std::make_shared<const Dataset>(std::move(test));
  detail::attach_finite_source(t, true);
  return t;
}

inline double accuracy(const Model& model, const ParamSet& params, const Dataset& data) {
  if (data.labels.empty()) throw ContractError("accuracy: dataset has no labels");
  const Matrix out = predict(model, params, data.inputs);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    const auto r = out.row(i);
    const std::size_t arg = static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
    hit += arg == data.labels[i];
  }
  return static_cast<double>(hit) / static_cast<double>(out.rows());
}

/// 16-8-2-8-16 sigmoid autoencoder on standardized 16-dim data generated from
/// a 4-dim latent through a random tanh map plus noise (full rank, so a 2-dim
/// code cannot reconstruct it exactly).
inline Task bottleneck_autoencoder_task(const TaskSpec& spec_in, Rng& rng) {
  TaskSpec spec = spec_in;
  spec.kind = TaskKind::bottleneck_autoencoder;
  spec.dim = 16;
  spec.validate();
  Task t;
  t.spec = spec;
  t.model = make_mlp({16, 8, 2, 8, 16}, Activation::sigmoid, Head::regression);
  const Matrix mix = random_normal(rng, 4, 16, 0.5);
  auto make = [&](std::size_t n) {
    Matrix x = matmul(random_normal(rng, n, 4), mix);
    for (auto& v : x.data()) v = std::tanh(v) + spec.noise * rng.normal();
    return x;
  };
  Matrix train_x = make(spec.dataset_size);
  Matrix test_x = make(detail::held_out_size(spec.dataset_size));
  const ColumnStats xs = standardize(train_x);
  apply_standardization(test_x, xs);
  t.train = std::make_shared<const Dataset>(Dataset{train_x, train_x, {}});
  t.test = std::make_shared<const Dataset>(Dataset{test_x, test_x, {}});
  t.init = init_params(t.model, rng);
  detail::attach_finite_source(t, true);
  return t;
}

// ---------------------------------------------------------------------------
// CSV

struct CsvDataset {
  Dataset data;  // standardized features and target
  ColumnStats feature_stats;
  ColumnStats target_stats;
  bool had_header = false;
  std::vector<std::string> warnings;
};

namespace detail {

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = line.find(',', start);
    cells.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return cells;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::optional<double> parse_number(std::string_view s) {
  s = trim(s);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

}  // namespace detail

/// Numeric CSV, last column the target. A first line with any non-numeric
/// cell is treated as a header and skipped. Rows and columns in errors are
/// 1-based file positions.
inline CsvDataset uci_csv_load(std::istream& in) {
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t line_no = 0, width = 0;
  CsvDataset out;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_commas(line);
    std::vector<double> vals;
    vals.reserve(cells.size());
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const auto v = detail::parse_number(cells[c]);
      if (!v) {
        if (rows.empty() && !out.had_header) {
          out.had_header = true;
          vals.clear();
          break;
        }
        throw IngestionError("uci_csv_load: cannot parse '" + std::string(detail::trim(cells[c])) + "' at row " +
                                 std::to_string(line_no) + ", column " + std::to_string(c + 1),
                             line_no, c + 1);
      }
      vals.push_back(*v);
    }
    if (vals.empty()) continue;
    if (width == 0) width = vals.size();
    if (vals.size() != width) {
      throw IngestionError("uci_csv_load: row " + std::to_string(line_no) + " has " + std::to_string(vals.size()) +
                               " columns, expected " + std::to_string(width),
                           line_no, std::min(vals.size(), width) + 1);
    }
    rows.push_back(std::move(vals));
  }
  if (rows.empty()) throw ContractError("uci_csv_load: no data rows");
  if (width < 2) throw ContractError("uci_csv_load: need at least one feature column and a target");
  Matrix x(rows.size(), width - 1), y(rows.size(), 1);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j + 1 < width; ++j) x(i, j) = rows[i][j];
    y(i, 0) = rows[i][width - 1];
  }
  out.feature_stats = standardize(x);
  out.target_stats = standardize(y);
  for (std::size_t j : out.feature_stats.constant_columns) {
    out.warnings.push_back("feature column " + std::to_string(j + 1) + " is constant; standardized to zeros");
  }
  if (!out.target_stats.constant_columns.empty()) out.warnings.push_back("target column is constant");
  out.data = Dataset{std::move(x), std::move(y), {}};
  return out;
}

inline CsvDataset uci_csv_load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("uci_csv_load: cannot open " + path, 0, 0);
  CsvDataset d = uci_csv_load(in);
  for (const auto& w : d.warnings) std::cerr << "warning: " << path << ": " << w << '\n';
  return d;
}

/// Features then target (or label), no header, round-trip precision.
inline void write_dataset_csv(std::ostream& out, const Dataset& d) {
  out << std::setprecision(17);
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t j = 0; j < d.inputs.cols(); ++j) out << d.inputs(i, j) << ',';
    if (d.labels.empty()) {
      for (std::size_t j = 0; j < d.targets.cols(); ++j) out << (j ? "," : "") << d.targets(i, j);
    } else {
      out << d.labels[i];
    }
    out << '\n';
  }
}

/// Regression MLP on a standardized CSV, 20% held out.
inline Task uci_csv_task(const TaskSpec& spec_in, Rng& rng) {
  TaskSpec spec = spec_in;
  spec.kind = TaskKind::uci_csv;
  spec.validate();
  const CsvDataset csv = uci_csv_load(spec.csv_path);
  const std::size_t n = csv.data.size();
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  for (std::size_t i = n; i-- > 1;) std::swap(perm[i], perm[rng.below(i + 1)]);
  const std::size_t n_test = n >= 5 ? n / 5 : 0;
  std::vector<std::size_t> test_idx(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<std::size_t> train_idx(perm.begin() + static_cast<std::ptrdiff_t>(n_test), perm.end());
  Task t;
  spec.dim = csv.data.inputs.cols();
  spec.dataset_size = train_idx.size();
  if (spec.batch_size > spec.dataset_size) throw ContractError("uci-csv: batch size exceeds the training rows");
  t.spec = spec;
  t.model = make_mlp({spec.dim, spec.hidden, 1}, Activation::relu, Head::regression);
  auto take = [&](const std::vector<std::size_t>& idx) {
    const Batch b = csv.data.rows(idx);
    return Dataset{b.inputs, b.targets, {}};
  };
  t.train = std::make_shared<const Dataset>(take(train_idx));
  t.test = std::make_shared<const Dataset>(take(test_idx));
  t.init = init_params(t.model, rng);
  detail::attach_finite_source(t, true);
  return t;
}

/// Builds any task from its spec, seeding generation from spec.seed.
inline Task make_task(const TaskSpec& spec) {
  Rng rng(spec.seed);
  switch (spec.kind) {
    case TaskKind::rosenbrock: return rosenbrock_task();
    case TaskKind::illcond_linear: {
      Task t = illcond_linear_task(spec.dim, spec.kappa, spec.batch_size, rng);
      t.spec.seed = spec.seed;
      return t;
    }
    case TaskKind::synth_regression: return synth_regression_task(spec, rng);
    case TaskKind::synth_classification: return synth_classification_task(spec, rng);
    case TaskKind::bottleneck_autoencoder: return bottleneck_autoencoder_task(spec, rng);
    case TaskKind::uci_csv: return uci_csv_task(spec, rng);
  }
  throw ContractError("make_task: unknown task kind");
}

}  // namespace apo

#endif  // APO_TASKS_HPP
