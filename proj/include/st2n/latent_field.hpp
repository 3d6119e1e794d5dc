#pragma once

// Low-rank spatial latent fields: voxel grids, knot grids, the tapered
// Gaussian basis that maps knot coefficients to voxels, the squared
// exponential knot kernel and the matrix-normal GP prior over knot fields.

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "st2n/errors.hpp"

namespace st2n {

/// Row-major so that a p x q voxel field maps onto a length p*q vector with
/// index j*q + k, matching the predictor layout.
using FieldMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using BasisMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

/// Regular grid on [0,1]^d. Voxel index is row-major over `dims` (last
/// dimension fastest).
struct SpatialGrid {
  std::vector<int> dims;
  Eigen::MatrixXd locations;  // p x d

  int d() const { return static_cast<int>(dims.size()); }
  int p() const { return static_cast<int>(locations.rows()); }

  static SpatialGrid regular(std::vector<int> dims) {
    require(!dims.empty(), "grid needs at least one dimension");
    int p = 1;
    for (int n : dims) {
      require(n >= 1, "grid dimensions must be positive");
      p *= n;
    }
    SpatialGrid grid;
    grid.dims = std::move(dims);
    const int d = grid.d();
    grid.locations.resize(p, d);
    for (int j = 0; j < p; ++j) {
      int rem = j;
      for (int k = d - 1; k >= 0; --k) {
        const int n = grid.dims[static_cast<std::size_t>(k)];
        const int idx = rem % n;
        rem /= n;
        grid.locations(j, k) = n > 1 ? static_cast<double>(idx) / (n - 1) : 0.0;
      }
    }
    return grid;
  }

  /// Integer index of voxel j along dimension k.
  int index(int j, int k) const {
    int rem = j;
    for (int m = d() - 1; m > k; --m) rem /= dims[static_cast<std::size_t>(m)];
    return rem % dims[static_cast<std::size_t>(k)];
  }
};

struct KnotSet {
  std::vector<int> per_dim;
  Eigen::MatrixXd knots;  // L x d
  double bandwidth = 0.0;

  int L() const { return static_cast<int>(knots.rows()); }
};

/// Knot set plus the p x L tapered basis built on it.
struct LowRankBasis {
  KnotSet knots;
  BasisMatrix basis;

  int p() const { return static_cast<int>(basis.rows()); }
  int L() const { return static_cast<int>(basis.cols()); }
};

/// Tapered Gaussian kernel F(x) = exp(-x^2 / 2b^2) I{x < 3b}.
inline double taper(double distance, double bandwidth) {
  if (!(distance < 3.0 * bandwidth)) return 0.0;
  return std::exp(-distance * distance / (2.0 * bandwidth * bandwidth));
}

inline std::vector<int> default_knots_per_dim(const SpatialGrid& grid) {
  std::vector<int> out;
  for (int n : grid.dims) out.push_back(std::max(2, (n + 1) / 2));
  return out;
}

/// Largest knot spacing over the dimensions, in [0,1] coordinates.
inline double default_bandwidth(const std::vector<int>& knots_per_dim) {
  double spacing = 0.0;
  for (int k : knots_per_dim) spacing = std::max(spacing, 1.0 / (k - 1));
  return spacing;
}

inline LowRankBasis make_knots(const SpatialGrid& grid, const std::vector<int>& knots_per_dim,
                               double bandwidth) {
  require_shape(static_cast<int>(knots_per_dim.size()) == grid.d(),
                "knots_per_dim must have one entry per grid dimension");
  require(bandwidth > 0.0 && std::isfinite(bandwidth), "bandwidth must be positive");
  for (int k : knots_per_dim) require(k >= 2, "need at least two knots per dimension");

  LowRankBasis out;
  out.knots.per_dim = knots_per_dim;
  out.knots.bandwidth = bandwidth;
  const SpatialGrid knot_grid = SpatialGrid::regular(knots_per_dim);
  out.knots.knots = knot_grid.locations;

  const int p = grid.p();
  const int L = knot_grid.p();
  std::vector<Eigen::Triplet<double>> entries;
  for (int j = 0; j < p; ++j) {
    bool covered = false;
    for (int l = 0; l < L; ++l) {
      const double dist = (grid.locations.row(j) - knot_grid.locations.row(l)).norm();
      const double w = taper(dist, bandwidth);
      if (w > 0.0) {
        entries.emplace_back(j, l, w);
        covered = true;
      }
    }
    if (!covered)
      throw UncoveredVoxelError("voxel " + std::to_string(j) +
                                " has no knot within 3*bandwidth; increase the bandwidth");
  }
  out.basis.resize(p, L);
  out.basis.setFromTriplets(entries.begin(), entries.end());
  out.basis.makeCompressed();
  return out;
}

inline LowRankBasis make_knots(const SpatialGrid& grid) {
  const auto per_dim = default_knots_per_dim(grid);
  return make_knots(grid, per_dim, default_bandwidth(per_dim));
}

/// Knot-level to voxel-level field: B * C.
inline FieldMatrix expand_field(const BasisMatrix& basis, const FieldMatrix& knot_field) {
  require_shape(basis.cols() == knot_field.rows(), "expand_field: basis/knot field mismatch");
  return basis * knot_field;
}

/// Lower Cholesky factor of K_a + jitter*I with
/// K_a(l, m) = exp(-a^2 ||v_l - v_m||^2).
struct KernelFactor {
  double a = 0.0;
  double jitter = 0.0;
  Eigen::MatrixXd lower;
  double log_det = 0.0;

  int L() const { return static_cast<int>(lower.rows()); }
};

inline Eigen::MatrixXd kernel_gram(const KnotSet& knots, double a) {
  const int L = knots.L();
  Eigen::MatrixXd K(L, L);
  const double a2 = a * a;
  for (int l = 0; l < L; ++l) {
    K(l, l) = 1.0;
    for (int m = 0; m < l; ++m) {
      const double d2 = (knots.knots.row(l) - knots.knots.row(m)).squaredNorm();
      K(l, m) = K(m, l) = std::exp(-a2 * d2);
    }
  }
  return K;
}

inline KernelFactor kernel_matrix(const KnotSet& knots, double a, double jitter) {
  require(a > 0.0 && std::isfinite(a), "kernel inverse length-scale must be positive");
  require(jitter >= 0.0, "jitter must be nonnegative");
  Eigen::MatrixXd K = kernel_gram(knots, a);
  K.diagonal().array() += jitter;
  Eigen::LLT<Eigen::MatrixXd> llt(K);
  if (llt.info() != Eigen::Success) throw DecompositionError("kernel Cholesky failed");
  KernelFactor f;
  f.a = a;
  f.jitter = jitter;
  f.lower = llt.matrixL();
  if (!(f.lower.diagonal().array() > 0.0).all() || !f.lower.allFinite())
    throw DecompositionError("kernel Cholesky produced a non-positive pivot");
  f.log_det = 2.0 * f.lower.diagonal().array().log().sum();
  return f;
}

inline constexpr double kJitterStart = 1e-8;
inline constexpr double kJitterMax = 1e-4;

/// kernel_matrix with jitter starting at 1e-8 and doubling on failure up to 1e-4.
inline KernelFactor kernel_matrix_adaptive(const KnotSet& knots, double a) {
  for (double jitter = kJitterStart; jitter <= kJitterMax * (1.0 + 1e-12); jitter *= 2.0) {
    try {
      return kernel_matrix(knots, a, jitter);
    } catch (const DecompositionError&) {
    }
  }
  throw DecompositionError("kernel Cholesky failed even with jitter 1e-4 (a = " +
                           std::to_string(a) + ")");
}

/// One kernel factor per latent field, recomputed only when `a` changes.
class KernelCache {
 public:
  explicit KernelCache(const KnotSet* knots) : knots_(knots) {}

  const KernelFactor& get(double a) {
    if (!factor_ || factor_->a != a) factor_ = kernel_matrix_adaptive(*knots_, a);
    return *factor_;
  }

  void set(KernelFactor f) { factor_ = std::move(f); }
  bool has(double a) const { return factor_ && factor_->a == a; }

 private:
  const KnotSet* knots_;
  std::optional<KernelFactor> factor_;
};

/// Cholesky of a small q x q covariance, with log-determinant.
struct CovFactor {
  Eigen::MatrixXd lower;
  double log_det = 0.0;

  explicit CovFactor(const Eigen::MatrixXd& sigma) {
    Eigen::LLT<Eigen::MatrixXd> llt(sigma);
    if (llt.info() != Eigen::Success) throw DecompositionError("covariance is not positive definite");
    lower = llt.matrixL();
    log_det = 2.0 * lower.diagonal().array().log().sum();
  }

  int q() const { return static_cast<int>(lower.rows()); }
};

struct GpPriorEval {
  double value = 0.0;
  FieldMatrix grad;
};

/// Matrix-normal log-density of an L x q knot field with row covariance K
/// (via its factor) and column covariance Sigma, normalizing constant
/// included, and its gradient -K^{-1} C Sigma^{-1}.
inline GpPriorEval gp_log_prior(const FieldMatrix& coeffs, const KernelFactor& kernel,
                                const CovFactor& sigma) {
  require_shape(coeffs.rows() == kernel.L() && coeffs.cols() == sigma.q(),
                "gp_log_prior: knot field shape mismatch");
  const double L = static_cast<double>(coeffs.rows());
  const double q = static_cast<double>(coeffs.cols());
  const auto lk = kernel.lower.triangularView<Eigen::Lower>();
  const auto ls = sigma.lower.triangularView<Eigen::Lower>();

  Eigen::MatrixXd w = lk.solve(Eigen::MatrixXd(coeffs));          // L_K^{-1} C
  Eigen::MatrixXd v = ls.solve(w.transpose());                     // L_S^{-1} W^T
  Eigen::MatrixXd kinv_c = kernel.lower.transpose().triangularView<Eigen::Upper>().solve(w);
  // K^{-1} C Sigma^{-1} = ((Sigma^{-1}) (K^{-1}C)^T)^T
  Eigen::MatrixXd tmp = ls.solve(kinv_c.transpose());
  Eigen::MatrixXd right = sigma.lower.transpose().triangularView<Eigen::Upper>().solve(tmp);

  GpPriorEval out;
  out.value = -0.5 * L * q * std::log(2.0 * std::numbers::pi) - 0.5 * q * kernel.log_det -
              0.5 * L * sigma.log_det - 0.5 * v.squaredNorm();
  out.grad = -right.transpose();
  return out;
}

inline GpPriorEval gp_log_prior(const FieldMatrix& coeffs, const KernelFactor& kernel,
                                const Eigen::MatrixXd& sigma) {
  return gp_log_prior(coeffs, kernel, CovFactor(sigma));
}

/// Whitening map used by the sampler: C = L_K Z L_S^T and its inverse.
inline FieldMatrix colour_field(const FieldMatrix& z, const KernelFactor& kernel,
                                const CovFactor& sigma) {
  return kernel.lower * (z * sigma.lower.transpose());
}

inline FieldMatrix whiten_field(const FieldMatrix& c, const KernelFactor& kernel,
                                const CovFactor& sigma) {
  Eigen::MatrixXd w = kernel.lower.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd(c));
  Eigen::MatrixXd zt = sigma.lower.triangularView<Eigen::Lower>().solve(w.transpose());
  return zt.transpose();
}

/// Gradient with respect to Z given the gradient with respect to C = L_K Z L_S^T.
inline FieldMatrix whiten_gradient(const FieldMatrix& grad_c, const KernelFactor& kernel,
                                   const CovFactor& sigma) {
  return kernel.lower.transpose() * (grad_c * sigma.lower);
}

}  // namespace st2n
