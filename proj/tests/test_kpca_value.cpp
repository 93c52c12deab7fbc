#include <cmath>

#include <gtest/gtest.h>

#include "kpca_audit/kpca_value.hpp"
#include "oracles.hpp"

namespace ka = kpca_audit;

TEST(BuildVdot, TwoTokensUnitScaling) {
  ka::GramBundle b;
  b.g_keys = {1.0, 1.0};
  b.K_tilde = ka::Matrix{{0.5, -0.5}, {-0.5, 0.5}};
  const auto s = ka::eigh(b.K_tilde);
  const auto r = ka::build_vdot(b, s, 1);
  const double h = 1.0 / std::sqrt(2.0);
  EXPECT_NEAR(std::abs(r.V_dot(0, 0)), h, 1e-15);
  EXPECT_NEAR(r.V_dot(0, 0), r.A_top(0, 0), 1e-15);
  EXPECT_NEAR(r.V_dot(1, 0), r.A_top(1, 0), 1e-15);
  EXPECT_DOUBLE_EQ(r.eigenvalues_used[0], 1.0);
}

TEST(BuildVdot, ConstantScalingCentersColumns) {
  ka::Rng rng(1);
  const auto M = oracle::random_psd(rng, 6);
  ka::GramBundle b;
  b.g_keys.assign(6, 4.0);
  b.K_tilde = M;
  const auto s = ka::eigh(M);
  const auto r = ka::build_vdot(b, s, 3);
  for (std::size_t d = 0; d < 3; ++d) {
    double mean = 0.0;
    for (std::size_t j = 0; j < 6; ++j) mean += s.A(j, d);
    mean /= 6.0;
    for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(r.V_dot(j, d), (s.A(j, d) - mean) / 4.0, 1e-15);
  }
}

TEST(BuildVdot, MatchesScalarFormOnRandomKeys) {
  ka::Rng rng(2);
  const auto K = rng.normal_matrix(8, 4);
  const auto b = ka::gram(K, false);
  const auto s = ka::eigh(b.K_tilde);
  const auto r = ka::build_vdot(b, s, 4);
  EXPECT_LE(ka::max_abs_diff(r.V_dot, oracle::vdot_scalar(r.A_top, b.g_keys)), 1e-12);
}

TEST(BuildVdot, Invariants) {
  ka::Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 3 + rng.next_u64() % 20;
    const std::size_t dv = 1 + rng.next_u64() % n;
    const auto b = ka::gram(rng.normal_matrix(n, 4), false);
    const auto r = ka::build_vdot(b, ka::eigh(b.K_tilde), dv);
    EXPECT_LE(ka::max_abs_diff(r.A_top.transpose() * r.A_top, ka::Matrix::identity(dv)), 1e-8);
    EXPECT_TRUE(r.V_dot.all_finite());
    // G^{-1} V_dot = (I - 1_N) A has zero column means.
    for (std::size_t d = 0; d < dv; ++d) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += b.g_keys[j] * r.V_dot(j, d);
      EXPECT_LE(std::abs(s), 1e-12 * std::sqrt(static_cast<double>(n)));  // A columns are unit norm
    }
  }
}

TEST(BuildVdot, SignFlipIsLinear) {
  ka::Rng rng(4);
  const auto b = ka::gram(rng.normal_matrix(7, 3), false);
  auto s = ka::eigh(b.K_tilde);
  const auto r1 = ka::build_vdot(b, s, 3);
  for (std::size_t j = 0; j < 7; ++j) s.A(j, 1) = -s.A(j, 1);
  const auto r2 = ka::build_vdot(b, s, 3);
  for (std::size_t j = 0; j < 7; ++j) {
    EXPECT_EQ(r2.V_dot(j, 1), -r1.V_dot(j, 1));
    EXPECT_EQ(r2.V_dot(j, 0), r1.V_dot(j, 0));
  }
}

TEST(BuildVdot, Errors) {
  ka::Rng rng(5);
  auto b = ka::gram(rng.normal_matrix(4, 2), false);
  const auto s = ka::eigh(b.K_tilde);
  EXPECT_THROW(ka::build_vdot(b, s, 5), ka::ValidationError);
  b.g_keys[0] = INFINITY;
  EXPECT_THROW(ka::build_vdot(b, s, 2), ka::ValidationError);
}
