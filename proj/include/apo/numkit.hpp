#ifndef APO_NUMKIT_HPP
#define APO_NUMKIT_HPP

// Dense linear algebra, seeded random numbers and small spectral utilities.
//
// Vectorization convention: vec_cm stacks COLUMNS, so that
//   vec_cm(B * X * A^T) == kron_dense(A, B) * vec_cm(X).
// Every Kronecker-structured routine in the library relies on this.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "apo/errors.hpp"

namespace apo {

using Vector = std::vector<double>;

/// Dense row-major matrix. Vectors that need matrix algebra are n x 1.
template <typename T>
class BasicMatrix {
 public:
  using value_type = T;

  BasicMatrix() = default;
  BasicMatrix(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw DimensionError("matrix data length " + std::to_string(data_.size()) +
                           " does not match " + std::to_string(rows_) + "x" +
                           std::to_string(cols_));
    }
  }
  BasicMatrix(std::initializer_list<std::initializer_list<T>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw DimensionError("ragged matrix initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static BasicMatrix identity(std::size_t n) {
    BasicMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }
  static BasicMatrix column(std::span<const T> v) {
    return BasicMatrix(v.size(), 1, std::vector<T>(v.begin(), v.end()));
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols_ + j]; }
  const T& operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * cols_ + j]; }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }
  std::span<T> row(std::size_t i) noexcept { return {data_.data() + i * cols_, cols_}; }
  std::span<const T> row(std::size_t i) const noexcept { return {data_.data() + i * cols_, cols_}; }

  BasicMatrix& operator+=(const BasicMatrix& o) {
    require_same_shape(o, "+=");
    for (std::size_t k = 0; k < data_.size(); ++k) data_[k] += o.data_[k];
    return *this;
  }
  BasicMatrix& operator-=(const BasicMatrix& o) {
    require_same_shape(o, "-=");
    for (std::size_t k = 0; k < data_.size(); ++k) data_[k] -= o.data_[k];
    return *this;
  }
  BasicMatrix& operator*=(T s) noexcept {
    for (auto& x : data_) x *= s;
    return *this;
  }
  friend BasicMatrix operator+(BasicMatrix a, const BasicMatrix& b) { return a += b; }
  friend BasicMatrix operator-(BasicMatrix a, const BasicMatrix& b) { return a -= b; }
  friend BasicMatrix operator*(BasicMatrix a, T s) { return a *= s; }
  friend BasicMatrix operator*(T s, BasicMatrix a) { return a *= s; }
  friend bool operator==(const BasicMatrix&, const BasicMatrix&) = default;

  /// this += s * o
  void axpy(T s, const BasicMatrix& o) {
    require_same_shape(o, "axpy");
    for (std::size_t k = 0; k < data_.size(); ++k) data_[k] += s * o.data_[k];
  }

  void require_same_shape(const BasicMatrix& o, const char* op) const {
    if (rows_ != o.rows_ || cols_ != o.cols_) {
      throw DimensionError(std::string(op) + ": shape " + shape_string() + " vs " +
                           o.shape_string());
    }
  }
  std::string shape_string() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Matrix = BasicMatrix<double>;
using MatrixF = BasicMatrix<float>;

// ---------------------------------------------------------------------------
// Rng

/// Seeded generator whose stream depends only on the seed and call sequence.
/// Built on mt19937_64, whose output the C++ standard fixes; the
/// distributions are implemented here because std:: distributions are not.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n) {
    if (n == 0) throw ContractError("Rng::below requires n > 0");
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return static_cast<std::size_t>(x % bound);
  }

  /// Standard normal via Box-Muller; the second variate is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(angle);
    has_spare_ = true;
    return r * std::cos(angle);
  }

  /// Independent child stream, deterministic in (parent state, salt).
  Rng split(std::uint64_t salt) {
    std::uint64_t z = next_u64() ^ (salt + 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return Rng(z ^ (z >> 31));
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

inline Matrix random_normal(Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (auto& x : m.data()) x = scale * rng.normal();
  return m;
}

inline Matrix random_uniform(Rng& rng, std::size_t rows, std::size_t cols, double lo, double hi) {
  Matrix m(rows, cols);
  for (auto& x : m.data()) x = rng.uniform(lo, hi);
  return m;
}

// ---------------------------------------------------------------------------
// Products

template <typename T>
BasicMatrix<T> matmul(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + a.shape_string() + " x " + b.shape_string());
  }
  BasicMatrix<T> c(a.rows(), b.cols());
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  for (std::size_t i = 0; i < n; ++i) {
    T* ci = &c(i, 0);
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a(i, p);
      if (aip == T{}) continue;
      const T* bp = &b(p, 0);
      for (std::size_t j = 0; j < m; ++j) ci[j] += aip * bp[j];
    }
  }
  return c;
}

/// a^T * b without forming the transpose.
template <typename T>
BasicMatrix<T> matmul_tn(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("matmul_tn: " + a.shape_string() + "^T x " + b.shape_string());
  }
  BasicMatrix<T> c(a.cols(), b.cols());
  const std::size_t k = a.rows(), n = a.cols(), m = b.cols();
  for (std::size_t p = 0; p < k; ++p) {
    const T* ap = &a(p, 0);
    const T* bp = &b(p, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const T api = ap[i];
      if (api == T{}) continue;
      T* ci = &c(i, 0);
      for (std::size_t j = 0; j < m; ++j) ci[j] += api * bp[j];
    }
  }
  return c;
}

/// a * b^T without forming the transpose.
template <typename T>
BasicMatrix<T> matmul_nt(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: " + a.shape_string() + " x " + b.shape_string() + "^T");
  }
  BasicMatrix<T> c(a.rows(), b.rows());
  const std::size_t k = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const T* ai = &a(i, 0);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const T* bj = &b(j, 0);
      T s{};
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c(i, j) = s;
    }
  }
  return c;
}

template <typename T>
BasicMatrix<T> transpose(const BasicMatrix<T>& a) {
  BasicMatrix<T> t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

template <typename T>
BasicMatrix<T> hadamard(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  a.require_same_shape(b, "hadamard");
  BasicMatrix<T> c = a;
  auto cd = c.data();
  auto bd = b.data();
  for (std::size_t k = 0; k < cd.size(); ++k) cd[k] *= bd[k];
  return c;
}

inline Vector matvec(const Matrix& a, std::span<const double> x) {
  if (a.cols() != x.size()) {
    throw DimensionError("matvec: " + a.shape_string() + " x " + std::to_string(x.size()));
  }
  Vector y(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    const double* ai = &a(i, 0);
    for (std::size_t j = 0; j < a.cols(); ++j) s += ai[j] * x[j];
    y[i] = s;
  }
  return y;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

template <typename T>
double frobenius(const BasicMatrix<T>& a) {
  double s = 0.0;
  for (const T x : a.data()) s += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(s);
}

template <typename T>
double max_abs(const BasicMatrix<T>& a) {
  double m = 0.0;
  for (const T x : a.data()) m = std::max(m, std::abs(static_cast<double>(x)));
  return m;
}

inline double max_abs(std::span<const double> v) {
  double m = 0.0;
  for (const double x : v) m = std::max(m, std::abs(x));
  return m;
}

template <typename T>
bool all_finite(const BasicMatrix<T>& a) {
  return std::all_of(a.data().begin(), a.data().end(), [](T x) { return std::isfinite(x); });
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

/// Largest entrywise |a - b| divided by the largest |b|.
inline double max_rel_diff(const Matrix& a, const Matrix& b) {
  a.require_same_shape(b, "max_rel_diff");
  double num = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) num = std::max(num, std::abs(a.data()[k] - b.data()[k]));
  return num / std::max(1e-300, max_abs(b));
}

// ---------------------------------------------------------------------------
// Kronecker helpers

inline constexpr std::size_t kKronOracleLimit = 256;

/// Dense Kronecker product; oracle use only (pr, qs <= 256).
template <typename T>
BasicMatrix<T> kron_dense(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  const std::size_t rows = a.rows() * b.rows();
  const std::size_t cols = a.cols() * b.cols();
  if (rows > kKronOracleLimit || cols > kKronOracleLimit) {
    throw OracleScaleError("kron_dense: result " + std::to_string(rows) + "x" +
                           std::to_string(cols) + " exceeds oracle limit");
  }
  BasicMatrix<T> k(rows, cols);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) {
      const T aij = a(i, j);
      for (std::size_t r = 0; r < b.rows(); ++r)
        for (std::size_t s = 0; s < b.cols(); ++s)
          k(i * b.rows() + r, j * b.cols() + s) = aij * b(r, s);
    }
  return k;
}

/// Column-stacking vectorization: element (i, j) lands at i + j * rows.
template <typename T>
std::vector<T> vec_cm(const BasicMatrix<T>& m) {
  std::vector<T> v(m.size());
  for (std::size_t j = 0; j < m.cols(); ++j)
    for (std::size_t i = 0; i < m.rows(); ++i) v[i + j * m.rows()] = m(i, j);
  return v;
}

template <typename T>
BasicMatrix<T> unvec_cm(std::span<const T> v, std::size_t rows, std::size_t cols) {
  if (v.size() != rows * cols) {
    throw DimensionError("unvec_cm: length " + std::to_string(v.size()) + " into " +
                         std::to_string(rows) + "x" + std::to_string(cols));
  }
  BasicMatrix<T> m(rows, cols);
  for (std::size_t j = 0; j < cols; ++j)
    for (std::size_t i = 0; i < rows; ++i) m(i, j) = v[i + j * rows];
  return m;
}

// ---------------------------------------------------------------------------
// Symmetric solvers

inline void require_square(const Matrix& m, const char* who) {
  if (m.rows() != m.cols()) {
    throw DimensionError(std::string(who) + ": matrix " + m.shape_string() + " is not square");
  }
}

inline bool is_symmetric(const Matrix& m, double rel_tol = 1e-8) {
  if (m.rows() != m.cols()) return false;
  const double scale = std::max(1.0, max_abs(m));
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = i + 1; j < m.cols(); ++j)
      if (std::abs(m(i, j) - m(j, i)) > rel_tol * scale) return false;
  return true;
}

inline Matrix symmetrize(const Matrix& m) {
  require_square(m, "symmetrize");
  Matrix s = m;
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = i + 1; j < m.cols(); ++j) s(i, j) = s(j, i) = 0.5 * (m(i, j) + m(j, i));
  return s;
}

/// Lower Cholesky factor L with m = L L^T. Throws NumericalError carrying the
/// index of the first non-positive pivot.
inline Matrix cholesky(const Matrix& m) {
  require_square(m, "cholesky");
  const std::size_t n = m.rows();
  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = m(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > 0.0) || !std::isfinite(d)) {
      throw NumericalError("cholesky: matrix is not positive definite (pivot " +
                               std::to_string(j) + ")",
                           static_cast<std::ptrdiff_t>(j));
    }
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = m(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return l;
}

/// Solves L L^T X = rhs for every column of rhs.
inline Matrix cholesky_solve(const Matrix& l, Matrix rhs) {
  const std::size_t n = l.rows();
  if (rhs.rows() != n) throw DimensionError("cholesky_solve: rhs rows mismatch");
  for (std::size_t c = 0; c < rhs.cols(); ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = rhs(i, c);
      for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * rhs(k, c);
      rhs(i, c) = s / l(i, i);
    }
    for (std::size_t ii = n; ii-- > 0;) {
      double s = rhs(ii, c);
      for (std::size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * rhs(k, c);
      rhs(ii, c) = s / l(ii, ii);
    }
  }
  return rhs;
}

inline constexpr std::size_t kSolveLimit = 512;

/// Solves m x = rhs for symmetric positive-definite m (n <= 512).
inline Vector solve_spd(const Matrix& m, std::span<const double> rhs) {
  require_square(m, "solve_spd");
  if (m.rows() > kSolveLimit) throw OracleScaleError("solve_spd: n exceeds 512");
  if (rhs.size() != m.rows()) throw DimensionError("solve_spd: rhs length mismatch");
  if (!is_symmetric(m)) throw ContractError("solve_spd: matrix is not symmetric");
  const Matrix x = cholesky_solve(cholesky(m), Matrix::column(rhs));
  return Vector(x.data().begin(), x.data().end());
}

/// Inverse of an SPD matrix via Cholesky, column by column.
inline Matrix inverse_spd(const Matrix& m) {
  require_square(m, "inverse_spd");
  if (!is_symmetric(m)) throw ContractError("inverse_spd: matrix is not symmetric");
  return symmetrize(cholesky_solve(cholesky(m), Matrix::identity(m.rows())));
}

struct SymEig {
  Vector values;   // ascending
  Matrix vectors;  // column k pairs with values[k]
};

inline constexpr std::size_t kEigLimit = 256;

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (n <= 256).
inline SymEig sym_eig(const Matrix& m) {
  require_square(m, "sym_eig");
  const std::size_t n = m.rows();
  if (n > kEigLimit) throw OracleScaleError("sym_eig: n exceeds 256");
  if (!is_symmetric(m)) throw ContractError("sym_eig: matrix is not symmetric");
  Matrix a = symmetrize(m);
  Matrix v = Matrix::identity(n);
  const double scale = std::max(1e-300, frobenius(a));
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (std::sqrt(off) <= 1e-15 * scale) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (std::abs(apq) <= 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return a(i, i) < a(j, j); });
  SymEig out{Vector(n), Matrix(n, n)};
  for (std::size_t k = 0; k < n; ++k) {
    out.values[k] = a(order[k], order[k]);
    for (std::size_t r = 0; r < n; ++r) out.vectors(r, k) = v(r, order[k]);
  }
  return out;
}

inline double sym_eig_min(const Matrix& m) {
  const SymEig e = sym_eig(m);
  return e.values.empty() ? 0.0 : e.values.front();
}

/// Symmetric matrix function f applied through the eigendecomposition.
template <typename F>
Matrix sym_apply(const Matrix& m, F&& f) {
  const SymEig e = sym_eig(m);
  const std::size_t n = m.rows();
  Matrix out(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    const double fk = f(e.values[k]);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) out(i, j) += fk * e.vectors(i, k) * e.vectors(j, k);
  }
  return out;
}

/// Singular values (descending) by one-sided Jacobi rotations.
inline Vector singular_values(const Matrix& m) {
  Matrix u = m.rows() >= m.cols() ? m : transpose(m);
  const std::size_t rows = u.rows(), n = u.cols();
  for (int sweep = 0; sweep < 80; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < rows; ++i) {
          alpha += u(i, p) * u(i, p);
          beta += u(i, q) * u(i, q);
          gamma += u(i, p) * u(i, q);
        }
        if (std::abs(gamma) <= 1e-15 * std::sqrt(alpha * beta) || gamma == 0.0) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < rows; ++i) {
          const double up = u(i, p), uq = u(i, q);
          u(i, p) = c * up - s * uq;
          u(i, q) = s * up + c * uq;
        }
      }
    }
    if (!rotated) break;
  }
  Vector sv(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < rows; ++i) s += u(i, j) * u(i, j);
    sv[j] = std::sqrt(s);
  }
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

/// Haar-distributed orthogonal matrix: Gram-Schmidt (applied twice) on a
/// Gaussian matrix, i.e. the Q of a QR factorization with positive diag(R).
inline Matrix rand_orthogonal(Rng& rng, std::size_t n) {
  if (n == 0) throw ContractError("rand_orthogonal: n must be >= 1");
  Matrix q = random_normal(rng, n, n);
  for (std::size_t j = 0; j < n; ++j) {
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t k = 0; k < j; ++k) {
        double proj = 0.0;
        for (std::size_t i = 0; i < n; ++i) proj += q(i, k) * q(i, j);
        for (std::size_t i = 0; i < n; ++i) q(i, j) -= proj * q(i, k);
      }
    }
    double nrm = 0.0;
    for (std::size_t i = 0; i < n; ++i) nrm += q(i, j) * q(i, j);
    nrm = std::sqrt(nrm);
    if (nrm < 1e-12) throw NumericalError("rand_orthogonal: degenerate draw", static_cast<std::ptrdiff_t>(j));
    for (std::size_t i = 0; i < n; ++i) q(i, j) /= nrm;
  }
  return q;
}

/// Determinant through partial-pivot LU (small matrices only).
inline double determinant(Matrix a) {
  require_square(a, "determinant");
  const std::size_t n = a.rows();
  double det = 1.0;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a(r, c)) > std::abs(a(piv, c))) piv = r;
    if (a(piv, c) == 0.0) return 0.0;
    if (piv != c) {
      for (std::size_t k = 0; k < n; ++k) std::swap(a(c, k), a(piv, k));
      det = -det;
    }
    det *= a(c, c);
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = a(r, c) / a(c, c);
      for (std::size_t k = c; k < n; ++k) a(r, k) -= f * a(c, k);
    }
  }
  return det;
}

}  // namespace apo

#endif  // APO_NUMKIT_HPP
