#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "kpca_audit/gamma_audit.hpp"
#include "oracles.hpp"

namespace ka = kpca_audit;

namespace {

double median_rel(const std::vector<ka::GammaRow>& rows) {
  ka::Vector v;
  for (const auto& r : rows) v.push_back(r.stats.mean_rel_diff);
  return ka::median_of(v);
}

}  // namespace

TEST(GammaVector, ExactEigenpairIsConstant) {
  const auto K = ka::Matrix::diagonal(ka::Vector{2, 2, 2});
  const ka::Vector a = {0.3, -0.5, 0.8};
  const auto s = ka::gamma_vector(K, a, 3);
  for (double g : s.gamma) EXPECT_NEAR(g, 2.0 / 3.0, 1e-15);
  EXPECT_LE(s.mean_abs_diff, 1e-15);
  EXPECT_LE(s.mean_rel_diff, 1e-15);
  EXPECT_EQ(s.pair_count, 3u);
}

TEST(GammaVector, MaskingLeavesNoPairs) {
  const auto K = ka::Matrix::diagonal(ka::Vector{5, 1});
  const auto s = ka::gamma_vector(K, ka::Vector{1.0, 0.0}, 2);
  EXPECT_DOUBLE_EQ(s.gamma[0], 2.5);
  EXPECT_TRUE(std::isnan(s.gamma[1]));
  EXPECT_EQ(s.masked_count, 1u);
  EXPECT_EQ(s.pair_count, 0u);
  EXPECT_EQ(s.mean_abs_diff, 0.0);
  EXPECT_EQ(s.std_abs_diff, 0.0);
}

TEST(GammaVector, TrueEigenvectorsOfRandomPsd) {
  ka::Rng rng(1);
  const auto M = oracle::random_psd(rng, 16);
  const auto s = ka::eigh(M);
  for (std::size_t d = 0; d < 16; ++d) {
    const auto g = ka::gamma_vector(M, s.A.col(d), 16);
    EXPECT_LE(g.mean_rel_diff, 1e-8) << "column " << d;
  }
  // Strongest bound on the leading pair.
  const auto g0 = ka::gamma_vector(M, s.A.col(0), 16);
  double worst = 0.0;
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < 16; ++j)
      if (!g0.masked[i] && !g0.masked[j]) worst = std::max(worst, std::abs(g0.gamma[i] - g0.gamma[j]));
  EXPECT_LE(worst, 1e-8 * std::abs(s.eigenvalues[0]) / 16.0);
}

TEST(GammaVector, ScaleInvariant) {
  ka::Rng rng(2);
  const auto M = oracle::random_psd(rng, 8);
  const auto a = rng.normal_matrix(1, 8).data();
  const auto base = ka::gamma_vector(M, a, 8);
  for (double c : {-2.0, 1e-3, 7.5}) {
    ka::Vector ca = a;
    for (double& x : ca) x *= c;
    const auto s = ka::gamma_vector(M, ca, 8);
    for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(s.gamma[i], base.gamma[i], 1e-12 * std::abs(base.gamma[i]));
    EXPECT_NEAR(s.mean_rel_diff, base.mean_rel_diff, 1e-12);
  }
}

TEST(GammaVector, Errors) {
  const auto K = ka::Matrix::identity(3);
  EXPECT_THROW(ka::gamma_vector(K, ka::Vector(3, 0.0), 3), ka::ValidationError);
  EXPECT_THROW(ka::gamma_vector(K, ka::Vector(2, 1.0), 3), ka::ValidationError);
  EXPECT_THROW(ka::gamma_vector(K, ka::Vector(3, 1.0), 3, 0.0), ka::ValidationError);
}

TEST(GammaComparison, ZeroSigmaTablesAgree) {
  ka::Rng rng(3);
  const auto M = oracle::random_psd(rng, 12);
  const auto s = ka::eigh(M);
  const auto cmp = ka::gamma_comparison(M, s.A, 0.0, 5);
  for (std::size_t d = 0; d < 12; ++d) {
    EXPECT_NEAR(cmp.true_rows[d].stats.mean_rel_diff, cmp.perturbed_rows[d].stats.mean_rel_diff, 1e-10);
    EXPECT_NEAR(cmp.true_rows[d].eigenvalue, cmp.perturbed_rows[d].eigenvalue, 1e-10 * s.eigenvalues[0]);
    EXPECT_NEAR(cmp.true_rows[d].eigenvalue, s.eigenvalues[d], 1e-10 * s.eigenvalues[0]);
  }
}

TEST(GammaComparison, TrueColumnsSatisfyCriterion) {
  ka::Rng rng(4);
  const auto M = oracle::random_psd(rng, 32);
  const auto cmp = ka::gamma_comparison(M, ka::eigh(M).A, 0.1, 1);
  for (const auto& r : cmp.true_rows) EXPECT_LE(r.stats.mean_rel_diff, 1e-8) << "rank " << r.eigen_rank;
}

TEST(GammaComparison, PerturbedSeparationOverSeeds) {
  ka::Rng rng(5);
  const auto M = oracle::random_psd(rng, 32);
  const auto A = ka::eigh(M).A;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto cmp = ka::gamma_comparison(M, A, 0.1, seed);
    EXPECT_GE(median_rel(cmp.perturbed_rows), 1e3 * median_rel(cmp.true_rows)) << "seed " << seed;
  }
}
