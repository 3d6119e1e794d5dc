#pragma once

// Synthetic datasets: von Mises-Fisher direction predictors (case 1),
// correlated-GP predictors (case 2), a small i.i.d. Gaussian fixture (toy),
// ground-truth coefficient fields beta0_g(v) = r_g(v) eta(v), and response
// synthesis.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "st2n/errors.hpp"
#include "st2n/latent_field.hpp"
#include "st2n/model.hpp"
#include "st2n/random.hpp"

namespace st2n {

struct SimTruth {
  std::vector<FieldMatrix> beta0;  // G of p x q
  FieldMatrix eta;                 // p x q unit vectors
  Eigen::MatrixXd r;               // G x p magnitudes
  Eigen::VectorXd b0_true;
  double sigma2_true = 1.0;

  int G() const { return static_cast<int>(beta0.size()); }
};

struct SimDataset {
  VectorImageDataset data;
  SimTruth truth;
  std::string case_name;
  int n_per_group = 0;
  std::uint64_t seed = 0;
};

/// Draw from vMF(kappa, mu) on the unit 2-sphere. The cosine to mu is drawn by
/// inversion, w = 1 + log(u + (1-u) e^{-2 kappa}) / kappa, and the tangent
/// direction uniformly.
inline Eigen::Vector3d sample_vmf(const Eigen::Vector3d& mu, double kappa, Rng& rng) {
  require(kappa > 0.0, "vMF concentration must be positive");
  require(std::abs(mu.norm() - 1.0) < 1e-9, "vMF mean direction must be a unit vector");
  const double u = uniform_open(rng);
  double w = 1.0 + std::log(u + (1.0 - u) * std::exp(-2.0 * kappa)) / kappa;
  w = std::clamp(w, -1.0, 1.0);
  const double theta = 2.0 * std::numbers::pi * uniform_open(rng);

  // Orthonormal basis of the tangent plane at mu.
  Eigen::Vector3d helper = std::abs(mu.x()) < 0.9 ? Eigen::Vector3d::UnitX() : Eigen::Vector3d::UnitY();
  Eigen::Vector3d e1 = (helper - helper.dot(mu) * mu).normalized();
  Eigen::Vector3d e2 = mu.cross(e1);
  const double s = std::sqrt(std::max(0.0, 1.0 - w * w));
  Eigen::Vector3d x = w * mu + s * (std::cos(theta) * e1 + std::sin(theta) * e2);
  return x.normalized();
}

/// Smooth mean direction for case-1 predictors: unit vector along
/// (cos(pi v1), sin(pi v1), v2).
inline Eigen::Vector3d case1_mean_direction(double v1, double v2) {
  return Eigen::Vector3d(std::cos(std::numbers::pi * v1), std::sin(std::numbers::pi * v1), v2)
      .normalized();
}

/// Smoothly rotating unit field for the true coefficient directions.
inline Eigen::VectorXd truth_direction(double v1, double v2, int q) {
  Eigen::VectorXd eta = Eigen::VectorXd::Zero(q);
  if (q == 1) {
    eta(0) = 1.0;
  } else if (q == 2) {
    const double angle = std::numbers::pi * (v1 + v2) / 4.0;
    eta << std::cos(angle), std::sin(angle);
  } else {
    const double theta = std::numbers::pi * v1 / 2.0;
    const double phi = std::numbers::pi * (v2 - 0.5) / 3.0;
    eta(0) = std::cos(theta) * std::cos(phi);
    eta(1) = std::sin(theta) * std::cos(phi);
    eta(2) = std::sin(phi);
  }
  return eta;
}

enum class TruthLayout {
  // Four disjoint blocks A, B, C, S on a 2-d grid. Group g is active on S
  // and on two of {A, B, C}: g = 0 -> {A, B}, 1 -> {B, C}, 2 -> {A, C}, then
  // cycling. S is the all-group block.
  FourBlock,
  // One block in the top-left corner, for single-group fixtures.
  Toy,
};

namespace detail {

struct Block {
  int row0, rows, col0, cols;

  /// Chebyshev distance in voxels from (i, k) to the block.
  int distance(int i, int k) const {
    const int di = i < row0 ? row0 - i : (i >= row0 + rows ? i - (row0 + rows - 1) : 0);
    const int dk = k < col0 ? col0 - k : (k >= col0 + cols ? k - (col0 + cols - 1) : 0);
    return std::max(di, dk);
  }
};

/// Plateau 1 inside the block, 0.5 on the one-voxel margin, 0 beyond.
inline double block_magnitude(const Block& b, int i, int k) {
  const int dist = b.distance(i, k);
  return dist == 0 ? 1.0 : (dist == 1 ? 0.5 : 0.0);
}

}  // namespace detail

inline SimTruth make_truth(TruthLayout layout, int G, const SpatialGrid& grid, int q) {
  require(grid.d() == 2, "truth layouts are defined on 2-d grids");
  require(G >= 1 && q >= 1, "truth: need G >= 1 and q >= 1");
  const int n0 = grid.dims[0];
  const int n1 = grid.dims[1];
  const int p = grid.p();

  std::vector<std::vector<detail::Block>> active(static_cast<std::size_t>(G));
  if (layout == TruthLayout::FourBlock) {
    const int len0 = std::max(1, n0 / 5);
    const int len1 = std::max(1, n1 / 5);
    auto at = [&](double f0, double f1) {
      return detail::Block{static_cast<int>(f0 * n0), len0, static_cast<int>(f1 * n1), len1};
    };
    const detail::Block A = at(0.15, 0.15), B = at(0.15, 0.65), C = at(0.65, 0.15),
                        S = at(0.65, 0.65);
    const detail::Block pairs[3][2] = {{A, B}, {B, C}, {A, C}};
    for (int g = 0; g < G; ++g) {
      auto& blocks = active[static_cast<std::size_t>(g)];
      blocks.push_back(pairs[g % 3][0]);
      blocks.push_back(pairs[g % 3][1]);
      blocks.push_back(S);
    }
  } else {
    const detail::Block T{0, std::max(1, 2 * n0 / 5), 0, std::max(1, 3 * n1 / 5)};
    for (auto& blocks : active) blocks.push_back(T);
  }

  SimTruth truth;
  truth.eta.resize(p, q);
  truth.r = Eigen::MatrixXd::Zero(G, p);
  for (int j = 0; j < p; ++j) {
    truth.eta.row(j) = truth_direction(grid.locations(j, 0), grid.locations(j, 1), q).transpose();
    const int i = grid.index(j, 0);
    const int k = grid.index(j, 1);
    for (int g = 0; g < G; ++g) {
      double r = 0.0;
      for (const auto& b : active[static_cast<std::size_t>(g)])
        r = std::max(r, detail::block_magnitude(b, i, k));
      truth.r(g, j) = r;
    }
  }
  for (int g = 0; g < G; ++g) {
    FieldMatrix beta(p, q);
    for (int j = 0; j < p; ++j) {
      if (truth.r(g, j) > 0.0) beta.row(j) = truth.r(g, j) * truth.eta.row(j);
      else beta.row(j).setZero();
    }
    truth.beta0.push_back(std::move(beta));
  }
  truth.b0_true = Eigen::VectorXd::Zero(G);
  return truth;
}

/// Noise-free mean p^{-1/2} sum_j <D_i(v_j), beta0_g(v_j)> + b0_true[g].
inline Eigen::VectorXd true_mean(const PredictorMatrix& D, const std::vector<int>& group_of,
                                 const SimTruth& truth) {
  const Eigen::Index n = D.rows();
  const Eigen::Index pq = D.cols();
  const double s = image_scale(static_cast<int>(truth.r.cols()));
  Eigen::VectorXd mu(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int g = group_of[static_cast<std::size_t>(i)];
    const auto& beta = truth.beta0[static_cast<std::size_t>(g)];
    require_shape(beta.size() == pq, "true_mean: truth vs predictors");
    const Eigen::Map<const Eigen::VectorXd> b(beta.data(), pq);
    mu(i) = truth.b0_true(g) + s * D.row(i).dot(b.transpose());
  }
  return mu;
}

/// Responses from the model with noise from its own seed stream, so y can be
/// regenerated exactly from stored predictors, truth and noise seed.
inline Eigen::VectorXd synthesize_response(const PredictorMatrix& D,
                                           const std::vector<int>& group_of,
                                           const SimTruth& truth, double sigma2,
                                           std::uint64_t noise_seed) {
  require(sigma2 >= 0.0, "synthesize_response: sigma2 must be nonnegative");
  Eigen::VectorXd y = true_mean(D, group_of, truth);
  Rng rng(noise_seed);
  const double sd = std::sqrt(sigma2);
  for (Eigen::Index i = 0; i < y.size(); ++i) y(i) += sd * std_normal(rng);
  return y;
}

inline std::uint64_t predictor_seed(std::uint64_t seed) { return derive_seed(seed, 1); }
inline std::uint64_t noise_seed(std::uint64_t seed) { return derive_seed(seed, 2); }

namespace detail {

inline SimDataset assemble(std::string name, const SpatialGrid& grid, int q, int G,
                           int n_per_group, double sigma2, std::uint64_t seed,
                           PredictorMatrix D, SimTruth truth) {
  SimDataset out;
  out.case_name = std::move(name);
  out.n_per_group = n_per_group;
  out.seed = seed;
  auto& data = out.data;
  data.grid = grid;
  data.q = q;
  data.G = G;
  for (int g = 0; g < G; ++g)
    for (int i = 0; i < n_per_group; ++i) data.group_of.push_back(g);
  data.D = std::move(D);
  truth.sigma2_true = sigma2;
  data.y = synthesize_response(data.D, data.group_of, truth, sigma2, noise_seed(seed));
  data.X.resize(data.y.size(), 0);
  out.truth = std::move(truth);
  return out;
}

}  // namespace detail

/// Case 1: D_i(v) ~ vMF(30, eta_D(v)), q = 3.
inline SimDataset gen_case1(int n_per_group, double sigma2, std::uint64_t seed, int G = 3,
                            std::vector<int> dims = {20, 20}, double kappa = 30.0) {
  require(n_per_group >= 1, "gen_case1: n_per_group must be >= 1");
  const SpatialGrid grid = SpatialGrid::regular(std::move(dims));
  const int p = grid.p();
  const int n = n_per_group * G;
  std::vector<Eigen::Vector3d> means(static_cast<std::size_t>(p));
  for (int j = 0; j < p; ++j)
    means[static_cast<std::size_t>(j)] = case1_mean_direction(grid.locations(j, 0), grid.locations(j, 1));
  PredictorMatrix D(n, 3 * p);
  Rng rng(predictor_seed(seed));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < p; ++j)
      D.row(i).segment<3>(3 * j) = sample_vmf(means[static_cast<std::size_t>(j)], kappa, rng).transpose();
  return detail::assemble("case1", grid, 3, G, n_per_group, sigma2, seed, std::move(D),
                          make_truth(TruthLayout::FourBlock, G, grid, 3));
}

/// Fixed mixing matrix Psi = A A^T / ||A A^T||_op + 0.5 I, A a seeded 3x3
/// standard-normal draw.
inline Eigen::Matrix3d case2_mixing() {
  Rng rng(0x5eed2c25ULL);
  Eigen::Matrix3d A;
  fill_normal(A, rng);
  const Eigen::Matrix3d M = A * A.transpose();
  const Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(M);
  return M / eig.eigenvalues().maxCoeff() + 0.5 * Eigen::Matrix3d::Identity();
}

/// Independent zero-mean GPs with kernels exp(-dist/3), exp(-dist/5),
/// exp(-dist/7) on grid-index distances, mixed by Psi.
class Case2Generator {
 public:
  explicit Case2Generator(const SpatialGrid& grid) : grid_(grid), psi_(case2_mixing()) {
    const int p = grid.p();
    const int d = grid.d();
    const double bandwidths[3] = {3.0, 5.0, 7.0};
    for (double bw : bandwidths) {
      Eigen::MatrixXd K(p, p);
      for (int j = 0; j < p; ++j)
        for (int m = 0; m <= j; ++m) {
          double d2 = 0.0;
          for (int k = 0; k < d; ++k) {
            const double diff = grid.index(j, k) - grid.index(m, k);
            d2 += diff * diff;
          }
          K(j, m) = K(m, j) = std::exp(-std::sqrt(d2) / bw);
        }
      Eigen::LLT<Eigen::MatrixXd> llt(K);
      if (llt.info() != Eigen::Success) throw DecompositionError("case-2 kernel not PD");
      chol_.push_back(llt.matrixL());
    }
  }

  const Eigen::Matrix3d& mixing() const { return psi_; }

  /// Unmixed p x 3 draw (one column per component).
  Eigen::MatrixXd sample_latent(Rng& rng) const {
    const int p = grid_.p();
    Eigen::MatrixXd out(p, 3);
    Eigen::VectorXd xi(p);
    for (int k = 0; k < 3; ++k) {
      fill_normal(xi, rng);
      out.col(k) = chol_[static_cast<std::size_t>(k)].triangularView<Eigen::Lower>() * xi;
    }
    return out;
  }

  /// Mixed draw D(v) = Psi D'(v) as a p x 3 row-major field.
  FieldMatrix sample(Rng& rng) const {
    return sample_latent(rng) * psi_.transpose();
  }

 private:
  SpatialGrid grid_;
  Eigen::Matrix3d psi_;
  std::vector<Eigen::MatrixXd> chol_;
};

/// Case 2: correlated Gaussian-process predictors, q = 3.
inline SimDataset gen_case2(int n_per_group, double sigma2, std::uint64_t seed, int G = 3,
                            std::vector<int> dims = {20, 20}) {
  require(n_per_group >= 1, "gen_case2: n_per_group must be >= 1");
  const SpatialGrid grid = SpatialGrid::regular(std::move(dims));
  const int p = grid.p();
  const int n = n_per_group * G;
  const Case2Generator gen(grid);
  PredictorMatrix D(n, 3 * p);
  Rng rng(predictor_seed(seed));
  for (int i = 0; i < n; ++i) {
    const FieldMatrix field = gen.sample(rng);
    D.row(i) = Eigen::Map<const Eigen::RowVectorXd>(field.data(), 3 * p);
  }
  return detail::assemble("case2", grid, 3, G, n_per_group, sigma2, seed, std::move(D),
                          make_truth(TruthLayout::FourBlock, G, grid, 3));
}

/// Toy fixture: 5x5 grid, q = 2, G = 1, i.i.d. standard normal predictors.
inline SimDataset gen_toy(int n, double sigma2, std::uint64_t seed) {
  require(n >= 1, "gen_toy: n must be >= 1");
  const SpatialGrid grid = SpatialGrid::regular({5, 5});
  const int q = 2;
  PredictorMatrix D(n, q * grid.p());
  Rng rng(predictor_seed(seed));
  fill_normal(D, rng);
  return detail::assemble("toy", grid, q, 1, n, sigma2, seed, std::move(D),
                          make_truth(TruthLayout::Toy, 1, grid, q));
}

}  // namespace st2n
