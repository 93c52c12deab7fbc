// Eigenvector-criterion audit through the gamma vector
//   gamma_i = (K a)_i / (N a_i),
// which is constant exactly when a is an eigenvector of K.
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "matrix.hpp"
#include "spectral.hpp"

namespace kpca_audit {

inline constexpr double kGammaMaskFloor = 1e-8;

struct GammaStats {
  Vector gamma;                 ///< NaN where masked
  std::vector<bool> masked;
  double mean_abs_diff = 0.0;
  double std_abs_diff = 0.0;
  double mean_rel_diff = 0.0;   ///< |g_i - g_j| / max(|g_i|, |g_j|)
  std::size_t masked_count = 0;
  std::size_t pair_count = 0;
};

/// Entries with |a_i| <= floor * ||a||_inf are masked; pair statistics run over
/// all unordered unmasked pairs.
inline GammaStats gamma_vector(const Matrix& K_tilde, std::span<const double> a, std::size_t N,
                               double floor = kGammaMaskFloor) {
  if (K_tilde.rows() != K_tilde.cols() || K_tilde.cols() != a.size())
    throw ValidationError("gamma_vector: shape mismatch");
  if (N == 0) throw ValidationError("gamma_vector: N must be >= 1");
  if (!(floor > 0.0)) throw ValidationError("gamma_vector: floor must be > 0");
  const double amax = max_abs(a);
  if (!(amax > 0.0)) throw ValidationError("gamma_vector: a is the zero vector");

  const Vector ka = K_tilde * a;
  GammaStats s;
  const std::size_t n = a.size();
  s.gamma.assign(n, std::nan(""));
  s.masked.assign(n, false);
  std::vector<std::size_t> live;
  for (std::size_t i = 0; i < n; ++i) {
    if (std::abs(a[i]) <= floor * amax) {
      s.masked[i] = true;
      ++s.masked_count;
      continue;
    }
    s.gamma[i] = ka[i] / (static_cast<double>(N) * a[i]);
    live.push_back(i);
  }
  if (live.empty()) throw ValidationError("gamma_vector: every entry of a is masked");

  Vector abs_diffs;
  double rel_sum = 0.0;
  std::size_t rel_count = 0;
  for (std::size_t x = 0; x < live.size(); ++x)
    for (std::size_t y = x + 1; y < live.size(); ++y) {
      const double gi = s.gamma[live[x]], gj = s.gamma[live[y]];
      const double diff = std::abs(gi - gj);
      abs_diffs.push_back(diff);
      const double denom = std::max(std::abs(gi), std::abs(gj));
      if (denom > 0.0) {
        rel_sum += diff / denom;
        ++rel_count;
      }
    }
  s.pair_count = abs_diffs.size();
  const MeanStd ms = mean_std(abs_diffs);
  s.mean_abs_diff = ms.mean;
  s.std_abs_diff = ms.std;
  s.mean_rel_diff = rel_count ? rel_sum / static_cast<double>(rel_count) : 0.0;
  return s;
}

struct GammaRow {
  std::size_t eigen_rank = 0;
  double eigenvalue = 0.0;  ///< Rayleigh quotient a^T K a / a^T a
  GammaStats stats;
};

struct GammaComparison {
  std::vector<GammaRow> true_rows;
  std::vector<GammaRow> perturbed_rows;
};

inline double rayleigh_quotient(const Matrix& K, std::span<const double> a) {
  const Vector ka = K * a;
  return dot(a, ka) / dot(a, a);
}

/// Runs gamma_vector over every column of A and of its perturbed,
/// re-orthonormalized counterpart.
inline GammaComparison gamma_comparison(const Matrix& K_tilde, const Matrix& A, double sigma, std::uint64_t seed,
                                        double floor = kGammaMaskFloor) {
  if (A.rows() != K_tilde.rows()) throw ValidationError("gamma_comparison: A and K disagree on N");
  const Matrix A_random = perturb_orthonormalize(A, sigma, seed);
  const std::size_t N = K_tilde.rows();
  GammaComparison out;
  for (std::size_t d = 0; d < A.cols(); ++d) {
    const Vector a = A.col(d), ar = A_random.col(d);
    out.true_rows.push_back({d, rayleigh_quotient(K_tilde, a), gamma_vector(K_tilde, a, N, floor)});
    out.perturbed_rows.push_back({d, rayleigh_quotient(K_tilde, ar), gamma_vector(K_tilde, ar, N, floor)});
  }
  return out;
}

}  // namespace kpca_audit
