#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include <cmath>
#include <numbers>

#include "st2n/latent_field.hpp"
#include "st2n/random.hpp"

namespace st2n {
namespace {

FieldMatrix random_field(int rows, int cols, Rng& rng) {
  FieldMatrix m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int k = 0; k < cols; ++k) m(i, k) = std_normal(rng);
  return m;
}

KnotSet collinear_knots(int L, double spacing) {
  KnotSet k;
  k.per_dim = {L};
  k.knots.resize(L, 1);
  for (int l = 0; l < L; ++l) k.knots(l, 0) = l * spacing;
  k.bandwidth = spacing;
  return k;
}

Eigen::MatrixXd random_spd(int q, Rng& rng) {
  Eigen::MatrixXd A(q, q);
  for (int i = 0; i < q; ++i)
    for (int k = 0; k < q; ++k) A(i, k) = std_normal(rng);
  return A * A.transpose() + 0.5 * Eigen::MatrixXd::Identity(q, q);
}

}  // namespace

TEST(Grid, RegularLayout) {
  const auto g = SpatialGrid::regular({3, 4});
  EXPECT_EQ(g.p(), 12);
  EXPECT_EQ(g.d(), 2);
  // Last dimension fastest.
  EXPECT_DOUBLE_EQ(g.locations(1, 1), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(g.locations(4, 0), 0.5);
  EXPECT_EQ(g.index(7, 0), 1);
  EXPECT_EQ(g.index(7, 1), 3);
  EXPECT_GE(g.locations.minCoeff(), 0.0);
  EXPECT_LE(g.locations.maxCoeff(), 1.0);
  for (int i = 0; i < g.p(); ++i)
    for (int j = 0; j < i; ++j) EXPECT_GT((g.locations.row(i) - g.locations.row(j)).norm(), 0.0);
}

TEST(Taper, EndpointsAndShape) {
  EXPECT_EQ(taper(0.0, 0.3), 1.0);
  EXPECT_EQ(taper(0.9, 0.3), 0.0);
  EXPECT_EQ(taper(1.0, 0.3), 0.0);
  EXPECT_NEAR(taper(0.3, 0.3), std::exp(-0.5), 1e-15);
  EXPECT_GT(taper(0.899, 0.3), 0.0);
}

TEST(MakeKnots, DefaultsFor20x20) {
  const auto grid = SpatialGrid::regular({20, 20});
  EXPECT_EQ(default_knots_per_dim(grid), (std::vector<int>{10, 10}));
  EXPECT_NEAR(default_bandwidth({10, 10}), 1.0 / 9.0, 1e-15);
  const auto b = make_knots(grid);
  EXPECT_EQ(b.L(), 100);
  EXPECT_EQ(b.p(), 400);
}

TEST(MakeKnots, EveryVoxelSeesAtLeastFourKnots) {
  const auto grid = SpatialGrid::regular({20, 20});
  const double bw = 1.0 / 9.0;
  const auto b = make_knots(grid, {10, 10}, bw);
  // Enumeration oracle: knots at (i/9, k/9); count those strictly within 3b.
  for (int j = 0; j < grid.p(); ++j) {
    int count = 0;
    const double x = grid.index(j, 0) / 19.0, y = grid.index(j, 1) / 19.0;
    for (int i = 0; i < 10; ++i)
      for (int k = 0; k < 10; ++k) {
        const double dx = x - i / 9.0, dy = y - k / 9.0;
        if (std::sqrt(dx * dx + dy * dy) < 3 * bw) ++count;
      }
    int nnz = 0;
    double row_sum = 0.0;
    for (BasisMatrix::InnerIterator it(b.basis, j); it; ++it) {
      ++nnz;
      row_sum += it.value();
      EXPECT_GT(it.value(), 0.0);
      EXPECT_LE(it.value(), 1.0);
    }
    EXPECT_EQ(nnz, count) << "voxel " << j;
    EXPECT_GE(nnz, 4);
    EXPECT_GT(row_sum, 0.0);
  }
}

TEST(MakeKnots, KnotGridIncludesEndpoints) {
  const auto grid = SpatialGrid::regular({9, 7});
  const auto b = make_knots(grid, {3, 4}, 0.5);
  EXPECT_EQ(b.L(), 12);
  EXPECT_EQ(b.knots.knots.col(0).minCoeff(), 0.0);
  EXPECT_EQ(b.knots.knots.col(0).maxCoeff(), 1.0);
  EXPECT_EQ(b.knots.knots.col(1).maxCoeff(), 1.0);
  EXPECT_NEAR(b.knots.knots(1, 1), 1.0 / 3.0, 1e-15);
}

TEST(MakeKnots, Errors) {
  const auto grid = SpatialGrid::regular({20, 20});
  EXPECT_THROW(make_knots(grid, {2, 2}, 0.01), UncoveredVoxelError);
  EXPECT_THROW(make_knots(grid, {1, 10}, 0.2), std::invalid_argument);
  EXPECT_THROW(make_knots(grid, {10}, 0.2), ShapeError);
  EXPECT_THROW(make_knots(grid, {10, 10}, 0.0), std::invalid_argument);
}

TEST(Kernel, DiagonalAndPlugIn) {
  const auto knots = collinear_knots(3, 0.1);
  const Eigen::MatrixXd K = kernel_gram(knots, 1.0);
  for (int l = 0; l < 3; ++l) EXPECT_EQ(K(l, l), 1.0);
  EXPECT_NEAR(K(0, 1), std::exp(-0.01), 1e-15);
  EXPECT_NEAR(K(0, 2), std::exp(-0.04), 1e-15);
  const auto f = kernel_matrix(knots, 1.0, 1e-6);
  const Eigen::MatrixXd rebuilt = f.lower * f.lower.transpose();
  EXPECT_LT((rebuilt - K - 1e-6 * Eigen::MatrixXd::Identity(3, 3)).norm(), 1e-14);
  EXPECT_TRUE(f.lower.isLowerTriangular());
  EXPECT_NEAR(f.log_det, std::log((K + 1e-6 * Eigen::MatrixXd::Identity(3, 3)).determinant()), 1e-9);
}

TEST(Kernel, LargeScaleGivesScaledIdentity) {
  const auto knots = collinear_knots(4, 0.1);
  const auto f = kernel_matrix(knots, 1e3, 0.25);
  EXPECT_LT((f.lower - std::sqrt(1.25) * Eigen::MatrixXd::Identity(4, 4)).norm(), 1e-12);
}

TEST(Kernel, Deterministic) {
  const auto knots = make_knots(SpatialGrid::regular({8, 8})).knots;
  const auto f1 = kernel_matrix(knots, 3.0, 1e-8);
  const auto f2 = kernel_matrix(knots, 3.0, 1e-8);
  EXPECT_EQ(f1.lower, f2.lower);
}

TEST(Kernel, DuplicateKnotsFailWithoutJitter) {
  KnotSet k = collinear_knots(3, 0.1);
  k.knots(2, 0) = k.knots(1, 0);
  EXPECT_THROW(kernel_matrix(k, 1.0, 0.0), DecompositionError);
  const auto f = kernel_matrix_adaptive(k, 1.0);
  EXPECT_GE(f.jitter, kJitterStart);
  EXPECT_LE(f.jitter, kJitterMax);
  EXPECT_THROW(kernel_matrix(k, 0.0, 1e-8), std::invalid_argument);
}

TEST(Kernel, AdaptiveStartsAtSmallestJitter) {
  const auto knots = make_knots(SpatialGrid::regular({20, 20})).knots;
  EXPECT_EQ(kernel_matrix_adaptive(knots, 7.0).jitter, kJitterStart);
}

TEST(Kernel, PositiveSemidefiniteOnRandomKnots) {
  Rng rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    KnotSet k;
    const int L = 5 + trial;
    k.knots.resize(L, 2);
    for (int l = 0; l < L; ++l) k.knots.row(l) << u(rng), u(rng);
    const double a = 0.5 + 10 * u(rng);
    const double jitter = 1e-6;
    Eigen::MatrixXd K = kernel_gram(k, a);
    K.diagonal().array() += jitter;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(K);
    EXPECT_GE(es.eigenvalues().minCoeff(), jitter - 1e-10);
  }
}

TEST(KernelCacheTest, RecomputesOnlyOnChange) {
  const auto knots = collinear_knots(5, 0.2);
  KernelCache cache(&knots);
  const KernelFactor* first = &cache.get(2.0);
  EXPECT_TRUE(cache.has(2.0));
  EXPECT_EQ(&cache.get(2.0), first);
  EXPECT_EQ(cache.get(2.0).a, 2.0);
  cache.get(3.0);
  EXPECT_FALSE(cache.has(2.0));
  EXPECT_TRUE(cache.has(3.0));
}

TEST(ExpandField, ZeroAndConstant) {
  const auto b = make_knots(SpatialGrid::regular({6, 6}), {3, 3}, 0.5);
  EXPECT_EQ(expand_field(b.basis, FieldMatrix::Zero(9, 2)).norm(), 0.0);

  BasisMatrix ones(5, 1);
  for (int j = 0; j < 5; ++j) ones.insert(j, 0) = 1.0;
  FieldMatrix c(1, 2);
  c << 1.5, -2.0;
  const FieldMatrix out = expand_field(ones, c);
  for (int j = 0; j < 5; ++j) {
    EXPECT_EQ(out(j, 0), 1.5);
    EXPECT_EQ(out(j, 1), -2.0);
  }
  EXPECT_THROW(expand_field(b.basis, FieldMatrix::Zero(8, 2)), ShapeError);
}

TEST(ExpandField, MatchesNaiveLoop) {
  const auto b = make_knots(SpatialGrid::regular({12, 10}), {6, 5}, 0.25);
  Rng rng(3);
  const FieldMatrix c = random_field(b.L(), 3, rng);
  const FieldMatrix out = expand_field(b.basis, c);
  const Eigen::MatrixXd dense = Eigen::MatrixXd(b.basis);
  for (int j = 0; j < b.p(); ++j)
    for (int k = 0; k < 3; ++k) {
      double s = 0.0;
      for (int l = 0; l < b.L(); ++l) s += dense(j, l) * c(l, k);
      EXPECT_NEAR(out(j, k), s, 1e-12);
    }
}

TEST(ExpandField, BasisLocality) {
  const auto grid = SpatialGrid::regular({15, 15});
  const double bw = 0.1;
  const auto b = make_knots(grid, {8, 8}, bw);
  Rng rng(4);
  const FieldMatrix c = random_field(b.L(), 2, rng);
  const FieldMatrix base = expand_field(b.basis, c);
  for (int l : {0, 9, 27, 63}) {
    FieldMatrix c2 = c;
    c2(l, 0) += 1.0;
    c2(l, 1) -= 2.0;
    const FieldMatrix moved = expand_field(b.basis, c2);
    for (int j = 0; j < grid.p(); ++j) {
      const double dist = (grid.locations.row(j) - b.knots.knots.row(l)).norm();
      if (dist >= 3 * bw) {
        EXPECT_EQ(moved(j, 0), base(j, 0));
        EXPECT_EQ(moved(j, 1), base(j, 1));
      }
    }
  }
}

TEST(GpPrior, StandardNormalCase) {
  KernelFactor k;
  k.a = 1.0;
  k.lower = Eigen::MatrixXd::Ones(1, 1);
  k.log_det = 0.0;
  FieldMatrix c(1, 1);
  c << 1.7;
  const auto e = gp_log_prior(c, k, Eigen::MatrixXd::Ones(1, 1));
  EXPECT_NEAR(e.value, -0.5 * 1.7 * 1.7 - 0.5 * std::log(2 * std::numbers::pi), 1e-14);
  EXPECT_NEAR(e.grad(0, 0), -1.7, 1e-14);
}

TEST(GpPrior, ZeroFieldHasZeroGradient) {
  const auto knots = collinear_knots(4, 0.2);
  const auto k = kernel_matrix(knots, 2.0, 1e-8);
  Rng rng(2);
  const auto e = gp_log_prior(FieldMatrix::Zero(4, 3), k, random_spd(3, rng));
  EXPECT_EQ(e.grad.norm(), 0.0);
}

TEST(GpPrior, GradientMatchesFiniteDifference) {
  const auto knots = make_knots(SpatialGrid::regular({6, 6}), {3, 3}, 0.5).knots;
  const auto k = kernel_matrix(knots, 2.5, 1e-8);
  Rng rng(8);
  const Eigen::MatrixXd S = random_spd(2, rng);
  const FieldMatrix c = random_field(knots.L(), 2, rng);
  const auto e = gp_log_prior(c, k, S);
  const double h = 1e-6;
  for (int l = 0; l < knots.L(); ++l)
    for (int m = 0; m < 2; ++m) {
      FieldMatrix cp = c, cm = c;
      cp(l, m) += h;
      cm(l, m) -= h;
      const double fd = (gp_log_prior(cp, k, S).value - gp_log_prior(cm, k, S).value) / (2 * h);
      EXPECT_LT(std::abs(fd - e.grad(l, m)) / std::max(std::abs(e.grad(l, m)), 1.0), 1e-6);
    }
}

TEST(GpPrior, KroneckerConsistency) {
  Rng rng(9);
  for (const auto& [L, q] : std::vector<std::pair<int, int>>{{3, 2}, {4, 3}, {6, 2}, {12, 1}}) {
    const auto knots = collinear_knots(L, 0.15);
    const auto k = kernel_matrix(knots, 3.0, 1e-6);
    const Eigen::MatrixXd S = random_spd(q, rng);
    const FieldMatrix c = random_field(L, q, rng);
    Eigen::MatrixXd K = kernel_gram(knots, 3.0);
    K.diagonal().array() += 1e-6;
    // vec(C) stacked row-wise: entry (l, m) at l*q + m, covariance K (x) Sigma.
    Eigen::MatrixXd cov(L * q, L * q);
    for (int l = 0; l < L; ++l)
      for (int l2 = 0; l2 < L; ++l2) cov.block(l * q, l2 * q, q, q) = K(l, l2) * S;
    Eigen::VectorXd x(L * q);
    for (int l = 0; l < L; ++l)
      for (int m = 0; m < q; ++m) x(l * q + m) = c(l, m);
    const Eigen::LDLT<Eigen::MatrixXd> ldlt(cov);
    const double logdet = ldlt.vectorD().array().log().sum();
    const double expect = -0.5 * L * q * std::log(2 * std::numbers::pi) - 0.5 * logdet -
                          0.5 * x.dot(ldlt.solve(x));
    EXPECT_NEAR(gp_log_prior(c, k, S).value, expect, 1e-8) << "L=" << L << " q=" << q;
  }
}

TEST(Whitening, RoundTripAndGradientChainRule) {
  const auto knots = make_knots(SpatialGrid::regular({8, 8}), {4, 4}, 0.4).knots;
  const auto k = kernel_matrix(knots, 3.0, 1e-8);
  Rng rng(10);
  const CovFactor S(random_spd(2, rng));
  const FieldMatrix z = random_field(knots.L(), 2, rng);
  const FieldMatrix c = colour_field(z, k, S);
  EXPECT_LT((whiten_field(c, k, S) - z).norm(), 1e-9);
  // d/dt f(C(z + t dz)) with f(C) = <G, C> equals <whiten_gradient(G), dz>.
  const FieldMatrix G = random_field(knots.L(), 2, rng);
  const FieldMatrix dz = random_field(knots.L(), 2, rng);
  const double lhs = (G.array() * colour_field(dz, k, S).array()).sum();
  const double rhs = (whiten_gradient(G, k, S).array() * dz.array()).sum();
  EXPECT_NEAR(lhs, rhs, 1e-10 * (1 + std::abs(lhs)));
}

TEST(CovFactorTest, RejectsIndefinite) {
  Eigen::MatrixXd S(2, 2);
  S << 1, 2, 2, 1;
  EXPECT_THROW(CovFactor{S}, DecompositionError);
}

}  // namespace st2n
