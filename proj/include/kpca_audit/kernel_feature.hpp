// Exponential kernel, softmax scaling g, feature norms via the kernel trick,
// and the scaled, double-centered key Gram matrix.
#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <string>

#include "matrix.hpp"

namespace kpca_audit {

struct GramBundle {
  Matrix K_phi;    ///< k(k_i,k_j) / (g(k_i) g(k_j))
  Matrix K_tilde;  ///< K_phi double-centered
  Vector g_keys;   ///< g(k_j) = sum_j' k(k_j, k_j')
  bool standardized = false;
};

namespace detail {

inline double kernel_exponent(std::span<const double> x, std::span<const double> y, std::size_t d_q) {
  return dot(x, y) / std::sqrt(static_cast<double>(d_q));
}

inline double checked_exp(double exponent) {
  // exp overflows just past 709.78.
  const double v = std::exp(exponent);
  if (!std::isfinite(v)) {
    std::ostringstream msg;
    msg.precision(17);
    msg << "kernel overflow: exp(" << exponent << ") exceeds the double range";
    throw RangeError(msg.str(), exponent);
  }
  return v;
}

}  // namespace detail

/// k(x, y) = exp(x.y / sqrt(d_q)).
inline double kernel(std::span<const double> x, std::span<const double> y, std::size_t d_q) {
  if (x.size() != y.size()) throw ValidationError("kernel: vector length mismatch");
  if (d_q == 0) throw ValidationError("kernel: d_q must be >= 1");
  return detail::checked_exp(detail::kernel_exponent(x, y, d_q));
}

/// Softmax denominator of a query against all keys: sum_j k(q, k_j).
inline double query_g(std::span<const double> q, const Matrix& K) {
  if (q.size() != K.cols()) throw ValidationError("query_g: dimension mismatch");
  double s = 0.0;
  for (std::size_t j = 0; j < K.rows(); ++j) s += kernel(q, K.row(j), K.cols());
  if (!std::isfinite(s)) throw RangeError("query_g: softmax denominator overflow", s);
  return s;
}

/// g over keys: g[j] = sum_j' k(k_j, k_j').
inline Vector scaling_g(const Matrix& K) {
  if (!K.all_finite()) throw ValidationError("scaling_g: K not finite");
  const std::size_t n = K.rows();
  Matrix kmat(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) kmat(i, j) = kmat(j, i) = kernel(K.row(i), K.row(j), K.cols());
  Vector g(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) g[i] += kmat(i, j);
    if (!std::isfinite(g[i])) throw RangeError("scaling_g: sum overflow", g[i]);
  }
  return g;
}

/// ||phi(q)||^2 = k(q,q) / query_g(q,K)^2, times dv_scale when given.
/// Callers that want the 1/d_v correction pass dv_scale = 1/d_v; pass 1 for the
/// uncorrected value.
inline double phi_sq_norm(std::span<const double> q, const Matrix& K, std::optional<double> dv_scale) {
  const double kqq = kernel(q, q, K.cols());
  const double g = query_g(q, K);
  double v = kqq / (g * g);
  if (dv_scale) v *= *dv_scale;
  return v;
}

/// z-scores each key dimension; zero-variance dimensions are only centered.
inline Matrix standardize_keys(const Matrix& K) {
  Matrix out = K;
  const auto n = static_cast<double>(K.rows());
  for (std::size_t c = 0; c < K.cols(); ++c) {
    double mean = 0.0;
    for (std::size_t r = 0; r < K.rows(); ++r) mean += K(r, c);
    mean /= n;
    double var = 0.0;
    for (std::size_t r = 0; r < K.rows(); ++r) var += (K(r, c) - mean) * (K(r, c) - mean);
    const double sd = std::sqrt(var / n);
    for (std::size_t r = 0; r < K.rows(); ++r) {
      out(r, c) = K(r, c) - mean;
      if (sd > 0.0) out(r, c) /= sd;
    }
  }
  return out;
}

/// Double centering via the four-term expansion M - 1M - M1 + 1M1.
inline Matrix double_center(const Matrix& M) {
  const std::size_t n = M.rows();
  const auto nn = static_cast<double>(n);
  Vector row_mean(n, 0.0), col_mean(n, 0.0);
  double grand = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      row_mean[i] += M(i, j);
      col_mean[j] += M(i, j);
    }
  for (std::size_t i = 0; i < n; ++i) {
    grand += row_mean[i];
    row_mean[i] /= nn;
    col_mean[i] /= nn;
  }
  grand /= nn * nn;
  Matrix out(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) = M(i, j) - col_mean[j] - row_mean[i] + grand;
  // Exact symmetry for symmetric input.
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) out(j, i) = out(i, j) = 0.5 * (out(i, j) + out(j, i));
  return out;
}

inline GramBundle gram(const Matrix& keys, bool standardize) {
  if (keys.rows() < 2) throw ValidationError("gram: need at least 2 keys");
  if (!keys.all_finite()) throw ValidationError("gram: K not finite");
  const Matrix K = standardize ? standardize_keys(keys) : keys;
  const std::size_t n = K.rows();

  GramBundle b;
  b.standardized = standardize;
  Matrix kmat(n, n);
  try {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i; j < n; ++j) kmat(i, j) = kmat(j, i) = kernel(K.row(i), K.row(j), K.cols());
  } catch (const RangeError& e) {
    if (standardize) throw;
    throw RangeError(std::string(e.what()) + "; retry with key standardization enabled", e.exponent());
  }
  b.g_keys.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) b.g_keys[i] += kmat(i, j);
    if (!std::isfinite(b.g_keys[i]))
      throw RangeError("gram: scaling sum overflow; retry with key standardization enabled", b.g_keys[i]);
  }
  b.K_phi = Matrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) b.K_phi(i, j) = kmat(i, j) / (b.g_keys[i] * b.g_keys[j]);
  b.K_tilde = double_center(b.K_phi);
  return b;
}

}  // namespace kpca_audit
