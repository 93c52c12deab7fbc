// Theoretical KPCA value matrix built from the top Gram eigenvectors:
//   V_dot = G A - G 1_N A,  G = diag(1 / g(k_j)),  1_N = all entries 1/N.
#pragma once

#include <cmath>

#include "kernel_feature.hpp"
#include "matrix.hpp"
#include "spectral.hpp"

namespace kpca_audit {

struct KpcaResult {
  Matrix V_dot;             ///< N x d_v
  Matrix A_top;             ///< N x d_v, unit eigenvectors of the d_v largest eigenvalues
  Vector G_diag;            ///< 1 / g(k_j)
  Vector eigenvalues_used;  ///< d_v
};

/// Eigenvectors keep the unit-norm convention from `eigh`; the KPCA
/// normalization ||a_d||^2 = 1/(N lambda_d) is not applied.
inline KpcaResult build_vdot(const GramBundle& bundle, const Spectrum& spectrum, std::size_t d_v) {
  const std::size_t n = bundle.g_keys.size();
  if (d_v == 0) throw ValidationError("build_vdot: d_v must be >= 1");
  if (d_v > n) throw ValidationError("build_vdot: d_v exceeds n_tokens");
  if (spectrum.A.rows() != n || spectrum.eigenvalues.size() < d_v)
    throw ValidationError("build_vdot: spectrum does not match the Gram bundle");

  KpcaResult r;
  r.G_diag.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    if (!std::isfinite(bundle.g_keys[j]) || bundle.g_keys[j] <= 0.0)
      throw ValidationError("build_vdot: non-finite or non-positive g");
    r.G_diag[j] = 1.0 / bundle.g_keys[j];
  }
  // eigenvalues are already non-increasing, so the top d_v are the leading columns.
  r.A_top = Matrix(n, d_v);
  r.eigenvalues_used.assign(spectrum.eigenvalues.begin(), spectrum.eigenvalues.begin() + static_cast<std::ptrdiff_t>(d_v));
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t d = 0; d < d_v; ++d) r.A_top(j, d) = spectrum.A(j, d);

  // G (A - 1_N A): subtract each column mean, then scale row j by 1/g(k_j).
  r.V_dot = r.A_top;
  center_columns(r.V_dot);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t d = 0; d < d_v; ++d) r.V_dot(j, d) *= r.G_diag[j];
  return r;
}

/// gram -> eigh -> build_vdot for a key matrix.
inline KpcaResult kpca_from_keys(const Matrix& keys, std::size_t d_v, bool standardize = false) {
  const GramBundle b = gram(keys, standardize);
  return build_vdot(b, eigh(b.K_tilde), d_v);
}

}  // namespace kpca_audit
