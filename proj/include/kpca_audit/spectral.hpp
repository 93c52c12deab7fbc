// Symmetric eigendecomposition of the centered Gram matrix, rank-wise
// eigenvalue statistics, and the perturbed-eigenvector control.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "kernel_feature.hpp"
#include "matrix.hpp"
#include "random.hpp"
#include "tensor_container.hpp"

namespace kpca_audit {

/// Eigenpairs of a symmetric matrix. `eigenvalues` are the eigenvalues of the
/// matrix itself (for the Gram matrix this is N times the covariance eigenvalue).
struct Spectrum {
  Vector eigenvalues;  ///< non-increasing
  Matrix A;            ///< column d is the unit eigenvector for eigenvalues[d]
  Vector residuals;    ///< ||M a_d - lambda_d a_d|| / max(||M||_F, tiny)
  int sweeps = 0;
};

inline constexpr int kMaxJacobiSweeps = 100;

inline void check_symmetric(const Matrix& m, double rel_tol = 1e-10) {
  if (m.rows() != m.cols()) throw ValidationError("matrix is not square");
  if (!m.all_finite()) throw ValidationError("matrix not finite");
  const double scale = frobenius(m);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = i + 1; j < m.cols(); ++j)
      if (std::abs(m(i, j) - m(j, i)) > rel_tol * scale)
        throw ValidationError("matrix is not symmetric at (" + std::to_string(i) + "," +
                              std::to_string(j) + ")");
}

/// Residual of each eigenpair relative to ||M||_F.
inline Vector eigen_residuals(const Matrix& m, const Vector& values, const Matrix& vectors) {
  const double scale = std::max(frobenius(m), 1e-300);
  Vector res(values.size());
  for (std::size_t d = 0; d < values.size(); ++d) {
    const Vector a = vectors.col(d);
    Vector r = m * a;
    for (std::size_t i = 0; i < r.size(); ++i) r[i] -= values[d] * a[i];
    res[d] = norm2(r) / scale;
  }
  return res;
}

/// Cyclic Jacobi eigensolver for a symmetric matrix.
///
/// Eigenvalues are sorted non-increasing (stable with respect to the original
/// diagonal position on ties) and each eigenvector's largest-magnitude entry is
/// positive.
inline Spectrum eigh(const Matrix& input) {
  check_symmetric(input);
  const std::size_t n = input.rows();
  Matrix a = input;
  Matrix v = Matrix::identity(n);
  const double frob = frobenius(a);

  auto off_norm = [&] {
    double s = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) s += a(p, q) * a(p, q);
    return std::sqrt(2.0 * s);
  };

  int sweep = 0;
  bool converged = false;
  for (; sweep <= kMaxJacobiSweeps; ++sweep) {
    const double off = off_norm();
    if (off == 0.0 || off <= 1e-14 * frob) {
      converged = true;
      break;
    }
    if (sweep == kMaxJacobiSweeps) break;
    // Early sweeps only rotate the larger entries.
    const double threshold = sweep < 3 ? 0.2 * off / static_cast<double>(n * n) : 0.0;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        const double g = 100.0 * std::abs(apq);
        if (sweep > 3 && std::abs(a(p, p)) + g == std::abs(a(p, p)) &&
            std::abs(a(q, q)) + g == std::abs(a(q, q))) {
          a(p, q) = a(q, p) = 0.0;
          continue;
        }
        if (std::abs(apq) <= threshold || apq == 0.0) continue;

        const double h = a(q, q) - a(p, p);
        double t;
        if (std::abs(h) + g == std::abs(h)) {
          t = apq / h;
        } else {
          const double theta = 0.5 * h / apq;
          t = 1.0 / (std::abs(theta) + std::sqrt(1.0 + theta * theta));
          if (theta < 0.0) t = -t;
        }
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = t * c;
        const double tau = s / (1.0 + c);

        a(p, p) -= t * apq;
        a(q, q) += t * apq;
        a(p, q) = a(q, p) = 0.0;
        for (std::size_t r = 0; r < n; ++r) {
          if (r == p || r == q) continue;
          const double arp = a(r, p), arq = a(r, q);
          a(r, p) = a(p, r) = arp - s * (arq + tau * arp);
          a(r, q) = a(q, r) = arq + s * (arp - tau * arq);
        }
        for (std::size_t r = 0; r < n; ++r) {
          const double vrp = v(r, p), vrq = v(r, q);
          v(r, p) = vrp - s * (vrq + tau * vrp);
          v(r, q) = vrq + s * (vrp - tau * vrq);
        }
      }
    }
  }
  if (!converged)
    throw NumericalError("eigh: Jacobi iteration did not converge in " + std::to_string(kMaxJacobiSweeps) +
                         " sweeps; consider standardizing the keys");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });

  Spectrum out;
  out.sweeps = sweep;
  out.eigenvalues.resize(n);
  out.A = Matrix(n, n);
  for (std::size_t d = 0; d < n; ++d) {
    const std::size_t src = order[d];
    out.eigenvalues[d] = a(src, src);
    std::size_t arg = 0;
    for (std::size_t r = 1; r < n; ++r)
      if (std::abs(v(r, src)) > std::abs(v(arg, src))) arg = r;
    const double sign = v(arg, src) < 0.0 ? -1.0 : 1.0;
    for (std::size_t r = 0; r < n; ++r) out.A(r, d) = sign * v(r, src);
  }
  out.residuals = eigen_residuals(input, out.eigenvalues, out.A);
  return out;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

/// Per-model summary of rank-wise eigenvalue statistics, mean +- population std over samples.
struct EigStatSummary {
  MeanStd max, min, mean, median;
  std::size_t n_samples = 0;
};

/// max/min/mean/median of one sample's rank-averaged |eigenvalue| vector.
struct RankStats {
  double max = 0.0, min = 0.0, mean = 0.0, median = 0.0;
};

inline double median_of(Vector v) {
  if (v.empty()) throw ValidationError("median of empty vector");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

inline MeanStd mean_std(const Vector& v) {
  MeanStd r;
  if (v.empty()) return r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(ss / static_cast<double>(v.size()));
  return r;
}

/// Averages absolute eigenvalue vectors (one per head/layer) by sorted rank,
/// then summarizes the rank-wise averages.
inline RankStats rank_stats(const std::vector<Vector>& spectra) {
  if (spectra.empty()) throw ValidationError("rank_stats: no spectra");
  const std::size_t n = spectra.front().size();
  Vector rank_mean(n, 0.0);
  for (const auto& s : spectra) {
    if (s.size() != n) throw ValidationError("rank_stats: inconsistent N within a sample; ranks not alignable");
    Vector abs_sorted(n);
    std::transform(s.begin(), s.end(), abs_sorted.begin(), [](double x) { return std::abs(x); });
    std::sort(abs_sorted.begin(), abs_sorted.end(), std::greater<>());
    for (std::size_t r = 0; r < n; ++r) rank_mean[r] += abs_sorted[r];
  }
  for (double& x : rank_mean) x /= static_cast<double>(spectra.size());

  RankStats st;
  st.max = *std::max_element(rank_mean.begin(), rank_mean.end());
  st.min = *std::min_element(rank_mean.begin(), rank_mean.end());
  st.mean = std::accumulate(rank_mean.begin(), rank_mean.end(), 0.0) / static_cast<double>(n);
  st.median = median_of(rank_mean);
  return st;
}

inline EigStatSummary summarize_samples(const std::vector<RankStats>& per_sample) {
  Vector mx, mn, me, md;
  for (const auto& s : per_sample) {
    mx.push_back(s.max);
    mn.push_back(s.min);
    me.push_back(s.mean);
    md.push_back(s.median);
  }
  EigStatSummary out;
  out.max = mean_std(mx);
  out.min = mean_std(mn);
  out.mean = mean_std(me);
  out.median = mean_std(md);
  out.n_samples = per_sample.size();
  return out;
}

/// Rank-wise eigenvalue statistics over a set of dumps belonging to one model.
/// Samples are processed in sorted sample_id order.
inline EigStatSummary eig_rank_stats(const std::vector<AttentionDump>& dumps, bool standardize) {
  std::map<std::string, std::vector<Vector>> by_sample;
  for (const auto& d : dumps) by_sample[d.sample_id].push_back(eigh(gram(d.K, standardize).K_tilde).eigenvalues);
  std::vector<RankStats> per_sample;
  for (const auto& [sample, spectra] : by_sample) {
    try {
      per_sample.push_back(rank_stats(spectra));
    } catch (const ValidationError& e) {
      throw ValidationError("sample '" + sample + "': " + e.what());
    }
  }
  return summarize_samples(per_sample);
}

inline EigStatSummary eig_rank_stats(const DumpSet& set, bool standardize) {
  return eig_rank_stats(set.dumps, standardize);
}

/// Orthonormal factor of (A + sigma * G), G i.i.d. standard normal, with
/// column signs chosen so diag(A^T A_random) >= 0.
inline Matrix perturb_orthonormalize(const Matrix& A, double sigma, std::uint64_t seed) {
  if (sigma < 0.0) throw ValidationError("perturb_orthonormalize: sigma must be >= 0");
  Rng rng(seed);
  Matrix noisy = A;
  for (double& x : noisy.data()) x += sigma * rng.normal();
  Matrix q = orthonormal_factor(noisy);
  for (std::size_t c = 0; c < q.cols(); ++c) {
    double d = 0.0;
    for (std::size_t r = 0; r < q.rows(); ++r) d += A(r, c) * q(r, c);
    if (d < 0.0)
      for (std::size_t r = 0; r < q.rows(); ++r) q(r, c) = -q(r, c);
  }
  return q;
}

}  // namespace kpca_audit
