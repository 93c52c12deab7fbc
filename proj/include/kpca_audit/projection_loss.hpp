// Projection-error machinery: the MAE proxy over kernel-trick feature norms,
// the full finite-dimensional projection error with its cross term, and
// per-layer norm distributions.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "attention_core.hpp"
#include "kernel_feature.hpp"
#include "matrix.hpp"
#include "tensor_container.hpp"

namespace kpca_audit {

struct ProjStats {
  Vector phi_sq;  ///< ||phi(q_i)||^2 with dv_scale applied
  Vector h_sq;    ///< ||h_i||^2
  double j_mae = 0.0;
  double j_signed = 0.0;
  double rel_err_phi = 0.0;  ///< mean |phi_sq - h_sq| / phi_sq
  double rel_err_h = 0.0;    ///< mean |phi_sq - h_sq| / h_sq over rows with h_sq > 0; +inf if none
};

/// dv_scale == nullopt means 1/d_v.
inline double resolve_dv_scale(std::optional<double> dv_scale, std::size_t d_v) {
  return dv_scale.value_or(1.0 / static_cast<double>(d_v));
}

inline ProjStats proj_stats(const Vector& phi_sq, const Vector& h_sq) {
  if (phi_sq.size() != h_sq.size() || phi_sq.empty()) throw ValidationError("proj_stats: size mismatch");
  ProjStats s;
  s.phi_sq = phi_sq;
  s.h_sq = h_sq;
  const auto n = static_cast<double>(phi_sq.size());
  double rel_h = 0.0;
  std::size_t h_count = 0;
  for (std::size_t i = 0; i < phi_sq.size(); ++i) {
    const double diff = phi_sq[i] - h_sq[i];
    s.j_mae += std::abs(diff);
    s.j_signed += diff;
    s.rel_err_phi += std::abs(diff) / phi_sq[i];
    if (h_sq[i] > 0.0) {
      rel_h += std::abs(diff) / h_sq[i];
      ++h_count;
    }
  }
  s.j_mae /= n;
  s.j_signed /= n;
  s.rel_err_phi /= n;
  s.rel_err_h = h_count ? rel_h / static_cast<double>(h_count) : std::numeric_limits<double>::infinity();
  return s;
}

/// J_proj = (1/N) sum_i | ||phi(q_i)||^2 - ||h_i||^2 |.
/// H is recomputed from Q, K, V when the dump does not carry it.
inline ProjStats j_mae(const AttentionDump& dump, std::optional<double> dv_scale = std::nullopt) {
  validate(dump);
  const double scale = resolve_dv_scale(dv_scale, dump.d_v);
  const Matrix H = output_or_recompute(dump);
  Vector phi(dump.n_tokens), h(dump.n_tokens);
  for (std::size_t i = 0; i < dump.n_tokens; ++i) {
    try {
      phi[i] = phi_sq_norm(dump.Q.row(i), dump.K, scale);
    } catch (const RangeError& e) {
      throw RangeError(dump_label(dump) + " query " + std::to_string(i) + ": " + e.what(), e.exponent());
    }
    h[i] = dot(H.row(i), H.row(i));
  }
  return proj_stats(phi, h);
}

/// Sum_m Sum_n u_m^T u_n h_m h_n for the columns u_m of U.
inline double cross_term(std::span<const double> h, const Matrix& U) {
  if (h.size() != U.cols()) throw ValidationError("cross_term: h length must equal the number of columns of U");
  double s = 0.0;
  for (std::size_t m = 0; m < U.cols(); ++m)
    for (std::size_t n = 0; n < U.cols(); ++n) {
      double umn = 0.0;
      for (std::size_t r = 0; r < U.rows(); ++r) umn += U(r, m) * U(r, n);
      s += umn * h[m] * h[n];
    }
  return s;
}

/// ||phi - sum_d h_d u_d||^2 split into its three terms:
///   total = phi_sq - linear + cross,  linear = 2 sum_d h_d u_d^T phi.
/// When U is orthonormal and h = U^T phi, linear = 2||h||^2 and cross = ||h||^2.
struct FullProjection {
  double total = 0.0;
  double phi_sq = 0.0;
  double linear = 0.0;
  double cross = 0.0;
};

inline FullProjection j_full_toy(std::span<const double> h, const Matrix& U, std::span<const double> phi_q) {
  if (phi_q.size() != U.rows()) throw ValidationError("j_full_toy: phi length must equal the rows of U");
  if (h.size() != U.cols()) throw ValidationError("j_full_toy: h length must equal the columns of U");
  FullProjection f;
  f.phi_sq = dot(phi_q, phi_q);
  for (std::size_t d = 0; d < U.cols(); ++d) {
    double ud_phi = 0.0;
    for (std::size_t r = 0; r < U.rows(); ++r) ud_phi += U(r, d) * phi_q[r];
    f.linear += 2.0 * h[d] * ud_phi;
  }
  f.cross = cross_term(h, U);
  f.total = f.phi_sq - f.linear + f.cross;
  return f;
}

/// Nearest-rank percentile (p in [0, 100]) of an unsorted sample.
inline double nearest_rank(Vector values, double p) {
  if (values.empty()) throw ValidationError("percentile of empty sample");
  std::sort(values.begin(), values.end());
  const auto n = static_cast<double>(values.size());
  auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * n));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  return values[rank - 1];
}

struct NormSeriesRow {
  std::string model_id;
  int layer = 0;
  std::string norm_family;  ///< "phi_sq" or "h_sq"
  double median = 0.0;
  double p2_5 = 0.0;
  double p97_5 = 0.0;
  std::size_t n_values = 0;
};

/// Builds the per-layer table from per-dump statistics already computed.
/// `stats[i]` belongs to `dumps[i]`. Rows ordered by (model, layer, family).
inline std::vector<NormSeriesRow> norm_series_from(const std::vector<AttentionDump>& dumps,
                                                   const std::vector<ProjStats>& stats) {
  if (dumps.size() != stats.size()) throw ValidationError("norm_series: stats/dumps size mismatch");
  std::map<std::pair<std::string, int>, std::pair<Vector, Vector>> groups;
  for (std::size_t i = 0; i < dumps.size(); ++i) {
    auto& g = groups[{dumps[i].model_id, dumps[i].layer}];
    g.first.insert(g.first.end(), stats[i].phi_sq.begin(), stats[i].phi_sq.end());
    g.second.insert(g.second.end(), stats[i].h_sq.begin(), stats[i].h_sq.end());
  }
  std::vector<NormSeriesRow> rows;
  for (const auto& [key, values] : groups) {
    for (const auto& [family, v] : {std::pair{"phi_sq", &values.first}, std::pair{"h_sq", &values.second}}) {
      if (v->empty())
        throw ValidationError("norm_series: empty group for layer " + std::to_string(key.second));
      rows.push_back({key.first, key.second, family, nearest_rank(*v, 50.0), nearest_rank(*v, 2.5),
                      nearest_rank(*v, 97.5), v->size()});
    }
  }
  return rows;
}

inline std::vector<NormSeriesRow> norm_series(const std::vector<AttentionDump>& dumps,
                                              std::optional<double> dv_scale = std::nullopt) {
  if (dumps.empty()) throw ValidationError("norm_series: no dumps");
  std::vector<ProjStats> stats;
  stats.reserve(dumps.size());
  for (const auto& d : dumps) stats.push_back(j_mae(d, dv_scale));
  return norm_series_from(dumps, stats);
}

}  // namespace kpca_audit
