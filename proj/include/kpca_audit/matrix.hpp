// Dense row-major matrix and the small set of linear-algebra helpers the audit needs.
#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace kpca_audit {

using Vector = std::vector<double>;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invariant violation on user-supplied data (shapes, finiteness, ranges).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A kernel evaluation left the finite double range.
class RangeError : public Error {
 public:
  RangeError(const std::string& what, double exponent) : Error(what), exponent_(exponent) {}
  /// The offending exponent (x.y / sqrt(d_q)) that overflowed.
  double exponent() const noexcept { return exponent_; }

 private:
  double exponent_;
};

/// Iterative numerical routine failed (e.g. eigensolver did not converge).
class NumericalError : public Error {
 public:
  using Error::Error;
};

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  /// Row-major nested initializer, e.g. Matrix{{1, 2}, {3, 4}}.
  Matrix(std::initializer_list<std::initializer_list<double>> init) {
    rows_ = init.size();
    cols_ = rows_ ? init.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& row : init) {
      if (row.size() != cols_) throw ValidationError("ragged matrix initializer");
      data_.insert(data_.end(), row.begin(), row.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Matrix diagonal(std::span<const double> d) {
    Matrix m(d.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept {
    assert(r < rows_ && c < cols_);
    return data_[r * cols_ + c];
  }
  double operator()(std::size_t r, std::size_t c) const noexcept {
    assert(r < rows_ && c < cols_);
    return data_[r * cols_ + c];
  }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  Vector col(std::size_t c) const {
    Vector out(rows_);
    for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
    return out;
  }
  void set_col(std::size_t c, std::span<const double> v) {
    assert(v.size() == rows_);
    for (std::size_t r = 0; r < rows_; ++r) (*this)(r, c) = v[r];
  }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  Matrix transpose() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline Matrix operator*(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw ValidationError("matmul shape mismatch");
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
    }
  return out;
}

inline Vector operator*(const Matrix& a, std::span<const double> x) {
  if (a.cols() != x.size()) throw ValidationError("matvec shape mismatch");
  Vector out(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * x[k];
    out[i] = s;
  }
  return out;
}

inline Matrix operator-(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ValidationError("subtract shape mismatch");
  Matrix out = a;
  for (std::size_t i = 0; i < out.data().size(); ++i) out.data()[i] -= b.data()[i];
  return out;
}

inline Matrix operator*(double s, Matrix m) {
  for (double& x : m.data()) x *= s;
  return m;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  assert(a.size() == b.size());
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double frobenius(const Matrix& m) { return norm2(m.data()); }

inline double max_abs(std::span<const double> a) {
  double m = 0.0;
  for (double x : a) m = std::max(m, std::abs(x));
  return m;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ValidationError("shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i)
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

/// Subtracts each column's mean in place.
inline void center_columns(Matrix& m) {
  if (m.rows() == 0) return;
  for (std::size_t c = 0; c < m.cols(); ++c) {
    double mean = 0.0;
    for (std::size_t r = 0; r < m.rows(); ++r) mean += m(r, c);
    mean /= static_cast<double>(m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r) m(r, c) -= mean;
  }
}

/// Scales each nonzero column to unit Euclidean norm; zero columns stay zero.
inline Matrix normalize_columns(Matrix m) {
  for (std::size_t c = 0; c < m.cols(); ++c) {
    double n = 0.0;
    for (std::size_t r = 0; r < m.rows(); ++r) n += m(r, c) * m(r, c);
    n = std::sqrt(n);
    if (n == 0.0) continue;
    for (std::size_t r = 0; r < m.rows(); ++r) m(r, c) /= n;
  }
  return m;
}

/// Thin QR via modified Gram-Schmidt with one re-orthogonalization pass.
/// Returns Q (rows x cols) with orthonormal columns; R diagonal is made nonnegative.
/// Throws if the input is numerically rank deficient.
inline Matrix orthonormal_factor(const Matrix& a) {
  const std::size_t n = a.rows(), k = a.cols();
  if (k > n) throw ValidationError("orthonormal_factor: more columns than rows");
  Matrix q(n, k);
  for (std::size_t j = 0; j < k; ++j) {
    Vector v = a.col(j);
    const double original = norm2(v);
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t i = 0; i < j; ++i) {
        double proj = 0.0;
        for (std::size_t r = 0; r < n; ++r) proj += q(r, i) * v[r];
        for (std::size_t r = 0; r < n; ++r) v[r] -= proj * q(r, i);
      }
    }
    const double nv = norm2(v);
    if (!(nv > 1e-14 * std::max(original, 1e-300)))
      throw NumericalError("orthonormal_factor: rank deficient input");
    for (std::size_t r = 0; r < n; ++r) q(r, j) = v[r] / nv;
  }
  return q;
}

}  // namespace kpca_audit
