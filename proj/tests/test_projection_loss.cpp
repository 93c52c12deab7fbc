#include <cmath>

#include <gtest/gtest.h>

#include "kpca_audit/attention_core.hpp"
#include "kpca_audit/projection_loss.hpp"
#include "oracles.hpp"

namespace ka = kpca_audit;

namespace {

ka::AttentionDump dump_with_tokens(std::size_t n, std::uint64_t seed) {
  ka::SynthesisConfig cfg;
  cfg.n_tokens = n;
  cfg.d = 12;
  cfg.d_q = 4;
  cfg.d_v = 3;
  cfg.seed = seed;
  return ka::gen_synthetic(cfg).dumps.front();
}

}  // namespace

TEST(JMae, ZeroOutputGivesMeanPhi) {
  auto d = dump_with_tokens(10, 1);
  d.H = ka::Matrix(10, 3);
  const auto s = ka::j_mae(d);
  double mean = 0.0;
  for (double x : s.phi_sq) mean += x;
  EXPECT_DOUBLE_EQ(s.j_mae, mean / 10.0);
  EXPECT_DOUBLE_EQ(s.j_signed, s.j_mae);
  EXPECT_TRUE(std::isinf(s.rel_err_h));
}

TEST(JMae, MatchedNormsGiveZero) {
  auto d = dump_with_tokens(10, 2);
  const auto phi = ka::j_mae(d).phi_sq;
  ka::Matrix H = *d.H;
  for (std::size_t i = 0; i < 10; ++i) {
    const double scale = std::sqrt(phi[i] / ka::dot(H.row(i), H.row(i)));
    for (double& x : H.row(i)) x *= scale;
  }
  d.H = H;
  const auto s = ka::j_mae(d);
  EXPECT_NEAR(s.j_mae, 0.0, 1e-15 * s.phi_sq[0]);
}

TEST(JMae, MatchesNaiveLoop) {
  const auto d = dump_with_tokens(10, 3);
  const auto s = ka::j_mae(d);
  const auto H = oracle::attention(d.Q, d.K, d.V);
  double mae = 0.0;
  for (std::size_t i = 0; i < 10; ++i) {
    double qq = 0.0, hh = 0.0, denom = 0.0;
    for (std::size_t c = 0; c < 4; ++c) qq += d.Q(i, c) * d.Q(i, c);
    for (std::size_t j = 0; j < 10; ++j) denom += oracle::kexp(d.Q, i, d.K, j);
    for (std::size_t c = 0; c < 3; ++c) hh += H(i, c) * H(i, c);
    const double phi = std::exp(qq / 2.0) / (denom * denom) / 3.0;
    EXPECT_NEAR(s.phi_sq[i], phi, 1e-12 * phi);
    mae += std::abs(phi - hh);
  }
  EXPECT_NEAR(s.j_mae, mae / 10.0, 1e-12 * mae);
}

TEST(JMae, RecomputesMissingOutput) {
  auto d = dump_with_tokens(8, 4);
  const auto with = ka::j_mae(d);
  d.H.reset();
  const auto without = ka::j_mae(d);
  EXPECT_NEAR(with.j_mae, without.j_mae, 1e-15);
}

TEST(JMae, Invariants) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto s = ka::j_mae(dump_with_tokens(6 + seed % 5, seed), 1.0);
    EXPECT_GE(s.j_mae, std::abs(s.j_signed));
    EXPECT_GE(s.rel_err_phi, 0.0);
    EXPECT_GE(s.rel_err_h, 0.0);
    for (double p : s.phi_sq) EXPECT_GT(p, 0.0);
  }
}

TEST(JMae, UncorrectedScaleIsDvTimesLarger) {
  const auto d = dump_with_tokens(9, 5);
  const auto a = ka::j_mae(d), b = ka::j_mae(d, 1.0);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(b.phi_sq[i], 3.0 * a.phi_sq[i], 1e-15 * b.phi_sq[i]);
}

TEST(JMae, RelativeErrorsCanDifferByOrdersOfMagnitude) {
  // Tiny outputs against O(1/N^2) feature norms: the error is negligible
  // relative to ||phi||^2 but huge relative to ||h||^2.
  auto d = dump_with_tokens(10, 6);
  ka::Matrix H = *d.H;
  for (double& x : H.data()) x *= 1e-4;
  d.H = H;
  const auto s = ka::j_mae(d);
  EXPECT_GT(s.rel_err_h / s.rel_err_phi, 1e3);
}

TEST(JMae, OverflowPropagates) {
  auto d = dump_with_tokens(4, 7);
  for (double& x : d.Q.data()) x = 30.0;
  EXPECT_THROW(ka::j_mae(d, 1.0), ka::RangeError);
}

TEST(CrossTerm, IdentityGivesSquaredNorm) {
  const ka::Vector h = {0.5, -2.0, 3.0};
  EXPECT_DOUBLE_EQ(ka::cross_term(h, ka::Matrix::identity(3)), 0.25 + 4.0 + 9.0);
}

TEST(CrossTerm, AssignmentSensitivityWitness) {
  const ka::Vector h = {1.0, 2.0};
  // Columns u_1 = [1, 1], u_2 = [-1, 0], then swapped.
  const ka::Matrix A1{{1.0, -1.0}, {1.0, 0.0}};
  const ka::Matrix A2{{-1.0, 1.0}, {0.0, 1.0}};
  EXPECT_EQ(ka::cross_term(h, A1), 2.0);
  EXPECT_EQ(ka::cross_term(h, A2), 5.0);
}

TEST(CrossTerm, EqualsNormOfCombination) {
  ka::Rng rng(8);
  for (int t = 0; t < 100; ++t) {
    const auto U = rng.normal_matrix(7, 4);
    const auto h = rng.normal_matrix(1, 4).data();
    const auto uh = U * std::span<const double>(h);
    EXPECT_NEAR(ka::cross_term(h, U), ka::dot(uh, uh), 1e-12 * ka::dot(uh, uh));
  }
  EXPECT_THROW(ka::cross_term(ka::Vector{1, 2, 3}, ka::Matrix(2, 2)), ka::ValidationError);
}

TEST(FullProjection, OrthonormalReduction) {
  ka::Rng rng(9);
  for (int t = 0; t < 200; ++t) {
    const auto U = ka::orthonormal_factor(rng.normal_matrix(10, 4));
    const auto phi = rng.normal_matrix(1, 10).data();
    const auto h = U.transpose() * std::span<const double>(phi);
    const auto f = ka::j_full_toy(h, U, phi);
    EXPECT_NEAR(f.total, ka::dot(phi, phi) - ka::dot(h, h), 1e-10);
    EXPECT_NEAR(f.linear, 2.0 * ka::dot(h, h), 1e-10);
    EXPECT_NEAR(f.cross, ka::dot(h, h), 1e-10);
    // Against direct subtraction ||phi - U h||^2.
    const auto uh = U * std::span<const double>(h);
    double direct = 0.0;
    for (std::size_t i = 0; i < 10; ++i) direct += (phi[i] - uh[i]) * (phi[i] - uh[i]);
    EXPECT_NEAR(f.total, direct, 1e-10);
  }
}

TEST(FullProjection, NonOrthonormalAssignmentChangesLoss) {
  const ka::Vector h = {1.0, 2.0}, phi = {0.0, 0.0};
  const auto a = ka::j_full_toy(h, ka::Matrix{{1.0, -1.0}, {1.0, 0.0}}, phi);
  const auto b = ka::j_full_toy(h, ka::Matrix{{-1.0, 1.0}, {0.0, 1.0}}, phi);
  EXPECT_NE(a.total, b.total);
}

TEST(NormSeries, NearestRankHandComputed) {
  // Four tokens with known norms: nearest-rank picks ranks ceil(p n / 100).
  const ka::Vector v = {4.0, 1.0, 3.0, 2.0};
  EXPECT_EQ(ka::nearest_rank(v, 50.0), 2.0);
  EXPECT_EQ(ka::nearest_rank(v, 2.5), 1.0);
  EXPECT_EQ(ka::nearest_rank(v, 97.5), 4.0);
  EXPECT_EQ(ka::nearest_rank(v, 0.0), 1.0);
}

TEST(NormSeries, SingleDumpRows) {
  const auto d = dump_with_tokens(4, 10);
  const auto rows = ka::norm_series({d});
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].norm_family, "phi_sq");
  EXPECT_EQ(rows[1].norm_family, "h_sq");
  const auto s = ka::j_mae(d);
  auto sorted = s.h_sq;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(rows[1].median, sorted[1]);
  EXPECT_EQ(rows[1].p2_5, sorted[0]);
  EXPECT_EQ(rows[1].p97_5, sorted[3]);
  EXPECT_EQ(rows[1].n_values, 4u);
}

TEST(NormSeries, EqualOutputNormsGiveZeroWidthBand) {
  auto d = dump_with_tokens(6, 11);
  ka::Matrix H(6, 3);
  for (std::size_t i = 0; i < 6; ++i) H(i, i % 3) = 0.5;
  d.H = H;
  const auto rows = ka::norm_series({d});
  EXPECT_EQ(rows[1].p2_5, rows[1].p97_5);
  EXPECT_EQ(rows[1].median, 0.25);
}

TEST(NormSeries, MatchesIndependentPercentilesTwelveLayers) {
  ka::SynthesisConfig cfg;
  cfg.n_tokens = 9;
  cfg.d = 12;
  cfg.d_q = 4;
  cfg.d_v = 3;
  cfg.layers = 12;
  cfg.heads = 2;
  cfg.samples = 3;
  cfg.seed = 31;
  const auto set = ka::gen_synthetic(cfg);
  const auto rows = ka::norm_series(set.dumps);
  ASSERT_EQ(rows.size(), 24u);
  for (const auto& row : rows) {
    ka::Vector pool;
    for (const auto& d : set.dumps) {
      if (d.layer != row.layer) continue;
      const auto H = oracle::attention(d.Q, d.K, d.V);
      for (std::size_t i = 0; i < d.n_tokens; ++i) {
        if (row.norm_family == "h_sq") {
          pool.push_back(ka::dot(H.row(i), H.row(i)));
        } else {
          pool.push_back(ka::phi_sq_norm(d.Q.row(i), d.K, 1.0 / 3.0));
        }
      }
    }
    EXPECT_EQ(row.n_values, pool.size());
    EXPECT_NEAR(row.median, oracle::percentile_by_count(pool, 50.0), 1e-14 * std::abs(row.median));
    EXPECT_NEAR(row.p2_5, oracle::percentile_by_count(pool, 2.5), 1e-14 * std::abs(row.p2_5));
    EXPECT_NEAR(row.p97_5, oracle::percentile_by_count(pool, 97.5), 1e-14 * std::abs(row.p97_5));
  }
}

TEST(NormSeries, EmptyInputRejected) { EXPECT_THROW(ka::norm_series({}), ka::ValidationError); }
