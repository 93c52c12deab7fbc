// Similarity battery between a learned value matrix V and the KPCA value
// matrix V_dot: entrywise tolerance test, direct and assignment-optimal
// column cosines, linear CKA and Gaussian-kernel CKA.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "kernel_feature.hpp"
#include "kpca_value.hpp"
#include "matrix.hpp"
#include "tensor_container.hpp"

namespace kpca_audit {

struct EntrywiseResult {
  bool pass = false;
  std::size_t violations = 0;
};

inline constexpr double kEntrywiseAtol = 1e-3;
inline constexpr double kEntrywiseRtol = 1e-5;

/// |v - v_dot| <= 1e-3 + 1e-5 |v_dot| for every entry.
inline EntrywiseResult entrywise_close(const Matrix& V, const Matrix& V_dot) {
  if (V.rows() != V_dot.rows() || V.cols() != V_dot.cols())
    throw ValidationError("entrywise_close: shape mismatch");
  EntrywiseResult r;
  for (std::size_t i = 0; i < V.data().size(); ++i) {
    const double other = V_dot.data()[i];
    if (!(std::abs(V.data()[i] - other) <= kEntrywiseAtol + kEntrywiseRtol * std::abs(other))) ++r.violations;
  }
  r.pass = r.violations == 0;
  return r;
}

/// |cos| between column i of X and column j of Y; zero columns give 0.
inline Matrix abs_cosine_matrix(const Matrix& X, const Matrix& Y) {
  if (X.rows() != Y.rows()) throw ValidationError("cosine: row count mismatch");
  const Matrix xn = normalize_columns(X), yn = normalize_columns(Y);
  Matrix c(X.cols(), Y.cols());
  for (std::size_t i = 0; i < X.cols(); ++i)
    for (std::size_t j = 0; j < Y.cols(); ++j) {
      double s = 0.0;
      for (std::size_t r = 0; r < X.rows(); ++r) s += xn(r, i) * yn(r, j);
      c(i, j) = std::min(1.0, std::abs(s));
    }
  return c;
}

struct DirectCosine {
  Vector cosines;  ///< signed cosine of column d of V against column d of V_dot
  double mdc = 0.0;
};

inline DirectCosine direct_cosine(const Matrix& V, const Matrix& V_dot) {
  if (V.rows() != V_dot.rows() || V.cols() != V_dot.cols())
    throw ValidationError("direct_cosine: shape mismatch");
  const Matrix a = normalize_columns(V), b = normalize_columns(V_dot);
  DirectCosine out;
  out.cosines.resize(V.cols());
  for (std::size_t d = 0; d < V.cols(); ++d) {
    double s = 0.0;
    for (std::size_t r = 0; r < V.rows(); ++r) s += a(r, d) * b(r, d);
    out.cosines[d] = std::clamp(s, -1.0, 1.0);
    out.mdc = std::max(out.mdc, std::abs(out.cosines[d]));
  }
  return out;
}

struct LapResult {
  std::vector<std::size_t> assignment;  ///< row i is matched to column assignment[i]
  double total_cost = 0.0;
};

/// Exact linear assignment by shortest augmenting paths with dual potentials
/// (the Jonker-Volgenant / Hungarian family), O(n^3).
///
/// Accepts rows <= cols; rectangular problems are padded with dummy rows of a
/// constant sentinel cost, which does not change which real assignment is optimal.
inline LapResult lap_solve(const Matrix& cost) {
  const std::size_t rows = cost.rows(), cols = cost.cols();
  if (!cost.all_finite()) throw ValidationError("lap_solve: non-finite cost");
  if (rows > cols) throw ValidationError("lap_solve: more rows than columns; pass the transpose");
  if (rows == 0) return {};

  const std::size_t n = cols;
  const double sentinel = max_abs(cost.data()) + 1.0;
  auto c = [&](std::size_t i, std::size_t j) { return i < rows ? cost(i, j) : sentinel; };

  constexpr double inf = std::numeric_limits<double>::infinity();
  // 1-based potentials; index 0 is the virtual source.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> match_of_col(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);

  for (std::size_t i = 1; i <= n; ++i) {
    match_of_col[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = match_of_col[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = c(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match_of_col[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match_of_col[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match_of_col[j0] = match_of_col[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  LapResult r;
  r.assignment.assign(rows, 0);
  for (std::size_t j = 1; j <= n; ++j)
    if (match_of_col[j] != 0 && match_of_col[j] - 1 < rows) r.assignment[match_of_col[j] - 1] = j - 1;
  // Recompute from the cost matrix rather than the duals for an exact sum.
  for (std::size_t i = 0; i < rows; ++i) r.total_cost += cost(i, r.assignment[i]);
  return r;
}

struct OptimalCosine {
  double moc = 0.0;
  std::vector<std::size_t> assignment;  ///< column i of V is matched to column assignment[i] of V_dot
  Vector matched;                       ///< |cos| of each matched pair
};

/// Matches columns by minimum total cosine distance 1 - |cos|, then reports the
/// largest matched |cos|.
inline OptimalCosine optimal_cosine(const Matrix& V, const Matrix& V_dot) {
  if (V.cols() != V_dot.cols()) throw ValidationError("optimal_cosine: column count mismatch");
  const Matrix sim = abs_cosine_matrix(V, V_dot);
  Matrix cost(sim.rows(), sim.cols());
  for (std::size_t i = 0; i < sim.data().size(); ++i) cost.data()[i] = 1.0 - sim.data()[i];
  const LapResult lap = lap_solve(cost);
  OptimalCosine out;
  out.assignment = lap.assignment;
  out.matched.resize(sim.rows());
  for (std::size_t i = 0; i < sim.rows(); ++i) {
    out.matched[i] = sim(i, lap.assignment[i]);
    out.moc = std::max(out.moc, out.matched[i]);
  }
  return out;
}

/// Linear CKA: ||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F) on column-centered inputs.
/// Returns 0 when either input has no variance.
inline double linear_cka(Matrix X, Matrix Y) {
  if (X.rows() != Y.rows()) throw ValidationError("linear_cka: row count mismatch");
  if (X.rows() < 2) throw ValidationError("linear_cka: need at least 2 rows");
  center_columns(X);
  center_columns(Y);
  const Matrix Xt = X.transpose(), Yt = Y.transpose();
  const double xx = frobenius(Xt * X);
  const double yy = frobenius(Yt * Y);
  if (!(xx > 0.0) || !(yy > 0.0)) return 0.0;
  const double yx = frobenius(Yt * X);
  return (yx * yx) / (xx * yy);
}

/// Gaussian-kernel bandwidth choice for kernel CKA.
struct Bandwidth {
  enum class Policy { MedianHeuristic, Fixed };
  Policy policy = Policy::MedianHeuristic;
  double sigma = 1.0;  ///< used when policy == Fixed

  static Bandwidth median() { return {}; }
  static Bandwidth fixed(double s) { return {Policy::Fixed, s}; }
};

inline Matrix squared_distances(const Matrix& X) {
  const std::size_t n = X.rows();
  Matrix d(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < X.cols(); ++c) {
        const double t = X(i, c) - X(j, c);
        s += t * t;
      }
      d(i, j) = d(j, i) = s;
    }
  return d;
}

/// Median of the nonzero pairwise Euclidean distances; 0 if all rows coincide.
inline double median_pairwise_distance(const Matrix& sq) {
  Vector dist;
  for (std::size_t i = 0; i < sq.rows(); ++i)
    for (std::size_t j = i + 1; j < sq.cols(); ++j)
      if (sq(i, j) > 0.0) dist.push_back(std::sqrt(sq(i, j)));
  if (dist.empty()) return 0.0;
  return median_of(std::move(dist));
}

/// exp(-||x_i - x_j||^2 / (2 sigma^2)); empty matrix when the bandwidth is degenerate.
inline Matrix gaussian_gram(const Matrix& X, const Bandwidth& bw) {
  const Matrix sq = squared_distances(X);
  const double sigma = bw.policy == Bandwidth::Policy::Fixed ? bw.sigma : median_pairwise_distance(sq);
  if (!(sigma > 0.0)) return {};
  Matrix k(X.rows(), X.rows());
  for (std::size_t i = 0; i < sq.data().size(); ++i) k.data()[i] = std::exp(-sq.data()[i] / (2.0 * sigma * sigma));
  return k;
}

/// Unnormalized HSIC: <HKH, HLH>_F. The (n-1)^-2 factor cancels in CKA.
inline double hsic(const Matrix& K, const Matrix& L) {
  const Matrix kc = double_center(K), lc = double_center(L);
  return dot(kc.data(), lc.data());
}

inline double cka_from_grams(const Matrix& K, const Matrix& L) {
  const double kl = hsic(K, L), kk = hsic(K, K), ll = hsic(L, L);
  if (!(kk > 0.0) || !(ll > 0.0)) return 0.0;
  return kl / std::sqrt(kk * ll);
}

/// Gaussian-kernel CKA. Inputs whose rows all coincide score 0.
inline double kernel_cka(const Matrix& X, const Matrix& Y, const Bandwidth& bw = Bandwidth::median()) {
  if (X.rows() != Y.rows()) throw ValidationError("kernel_cka: row count mismatch");
  if (X.rows() < 2) throw ValidationError("kernel_cka: need at least 2 rows");
  const Matrix kx = gaussian_gram(X, bw), ky = gaussian_gram(Y, bw);
  if (kx.empty() || ky.empty()) return 0.0;
  return cka_from_grams(kx, ky);
}

struct SimilarityScores {
  bool entrywise_pass = false;
  std::size_t entrywise_violations = 0;
  double mdc = 0.0;
  double moc = 0.0;
  double lcka = 0.0;
  double kcka = 0.0;
  std::vector<std::size_t> assignment;
};

/// Scores V against V_dot. The entrywise test runs on raw values; cosine and
/// CKA metrics run on column-normalized copies.
inline SimilarityScores score(const Matrix& V, const Matrix& V_dot, const Bandwidth& bw = Bandwidth::median()) {
  SimilarityScores s;
  const auto ew = entrywise_close(V, V_dot);
  s.entrywise_pass = ew.pass;
  s.entrywise_violations = ew.violations;
  const Matrix vn = normalize_columns(V), vdn = normalize_columns(V_dot);
  s.mdc = direct_cosine(vn, vdn).mdc;
  const auto opt = optimal_cosine(vn, vdn);
  s.moc = opt.moc;
  s.assignment = opt.assignment;
  s.lcka = linear_cka(vn, vdn);
  s.kcka = kernel_cka(vn, vdn, bw);
  return s;
}

/// gram -> eigh -> build_vdot -> score for one dump; errors carry the dump key.
inline SimilarityScores compare(const AttentionDump& dump, bool standardize = false,
                                const Bandwidth& bw = Bandwidth::median()) {
  try {
    validate(dump);
    const KpcaResult kpca = kpca_from_keys(dump.K, dump.d_v, standardize);
    return score(dump.V, kpca.V_dot, bw);
  } catch (const RangeError& e) {
    throw RangeError(dump_label(dump) + ": " + e.what(), e.exponent());
  } catch (const ValidationError& e) {
    throw ValidationError(dump_label(dump) + ": " + e.what());
  } catch (const NumericalError& e) {
    throw NumericalError(dump_label(dump) + ": " + e.what());
  }
}

enum class Aggregate { Mean, Max };

struct SimilarityRow {
  std::string model_id;
  std::size_t n_dumps = 0;
  double mdc = 0.0, moc = 0.0, lcka = 0.0, kcka = 0.0;
  double entrywise_pass_fraction = 0.0;
};

/// Per-model reduction of per-dump scores in the given order.
inline SimilarityRow aggregate_scores(const std::string& model_id, const std::vector<SimilarityScores>& scores,
                                      Aggregate how) {
  SimilarityRow row;
  row.model_id = model_id;
  row.n_dumps = scores.size();
  if (scores.empty()) return row;
  std::size_t passes = 0;
  for (const auto& s : scores) {
    if (how == Aggregate::Mean) {
      row.mdc += s.mdc;
      row.moc += s.moc;
      row.lcka += s.lcka;
      row.kcka += s.kcka;
    } else {
      row.mdc = std::max(row.mdc, s.mdc);
      row.moc = std::max(row.moc, s.moc);
      row.lcka = std::max(row.lcka, s.lcka);
      row.kcka = std::max(row.kcka, s.kcka);
    }
    passes += s.entrywise_pass ? 1 : 0;
  }
  if (how == Aggregate::Mean) {
    const auto n = static_cast<double>(scores.size());
    row.mdc /= n;
    row.moc /= n;
    row.lcka /= n;
    row.kcka /= n;
  }
  row.entrywise_pass_fraction = static_cast<double>(passes) / static_cast<double>(scores.size());
  return row;
}

}  // namespace kpca_audit
