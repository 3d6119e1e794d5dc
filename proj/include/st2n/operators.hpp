#pragma once

// Soft-thresholded l2-norm operator h_lambda(x) = (1 - lambda/||x||)_+ x and
// the quantities built from it: the double-threshold composition used for
// multi-group coefficient fields, its hand-derived Jacobian, the adaptive
// similar-effect threshold and the cross-group cosine summary.
//
// Everything here is pure and re-entrant.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "st2n/errors.hpp"

namespace st2n {

struct ThresholdParams {
  double lambda_shared = 0.0;
  std::vector<double> lambda_group;

  int groups() const { return static_cast<int>(lambda_group.size()); }
};

namespace detail {

template <class Derived>
void require_finite(const Eigen::MatrixBase<Derived>& x, const char* what) {
  if (!x.allFinite()) throw std::invalid_argument(std::string(what) + ": non-finite input");
}

inline void require_lambda(double lambda) {
  if (!(lambda >= 0.0) || !std::isfinite(lambda))
    throw std::invalid_argument("threshold must be a finite nonnegative number");
}

}  // namespace detail

/// Shrinkage factor (1 - lambda/norm)_+; exactly 0 when norm <= lambda.
inline double st2n_factor(double norm, double lambda) {
  return norm > lambda ? 1.0 - lambda / norm : 0.0;
}

/// Applies h_lambda to x in place. Vectors inside the closed ball are set to
/// bitwise +0 (not multiplied by zero, which would leave -0 entries).
template <class Derived>
void st2n_inplace(Eigen::MatrixBase<Derived>& x, double lambda) {
  const double norm = x.norm();
  if (norm > lambda) {
    x *= 1.0 - lambda / norm;
  } else {
    x.setZero();
  }
}

/// h_lambda(x).
template <class Derived>
Eigen::VectorXd st2n(const Eigen::MatrixBase<Derived>& x, double lambda) {
  detail::require_lambda(lambda);
  detail::require_finite(x, "st2n");
  Eigen::VectorXd out = x;
  st2n_inplace(out, lambda);
  return out;
}

/// Jacobian-vector product J_lambda(x) v without forming J.
/// At ||x|| = lambda the zero subgradient is used.
template <class DX, class DV>
Eigen::VectorXd st2n_jvp(const Eigen::MatrixBase<DX>& x, double lambda,
                         const Eigen::MatrixBase<DV>& v) {
  const double norm = x.norm();
  if (!(norm > lambda)) return Eigen::VectorXd::Zero(x.size());
  if (lambda == 0.0) return v;
  const double inv = 1.0 / norm;
  return (1.0 - lambda * inv) * v + (lambda * inv * inv * inv * x.dot(v)) * x;
}

/// Dense Jacobian of h_lambda at x:
///   (1 - lambda/||x||) I + (lambda/||x||^3) x x^T   for ||x|| > lambda,
///   0                                              otherwise.
template <class Derived>
Eigen::MatrixXd st2n_jacobian(const Eigen::MatrixBase<Derived>& x, double lambda) {
  detail::require_lambda(lambda);
  detail::require_finite(x, "st2n_jacobian");
  const Eigen::Index q = x.size();
  const double norm = x.norm();
  if (!(norm > lambda)) return Eigen::MatrixXd::Zero(q, q);
  Eigen::MatrixXd jac = (1.0 - lambda / norm) * Eigen::MatrixXd::Identity(q, q);
  if (lambda > 0.0) jac += (lambda / (norm * norm * norm)) * (x * x.transpose());
  return jac;
}

/// beta_g = h_lambda(beta_shared + h_{lambda_g}(alpha_latent)).
template <class DB, class DA>
Eigen::VectorXd double_threshold(const Eigen::MatrixBase<DB>& beta_shared,
                                 const Eigen::MatrixBase<DA>& alpha_latent,
                                 const ThresholdParams& params, int g) {
  if (g < 0 || g >= params.groups()) throw std::out_of_range("double_threshold: bad group index");
  Eigen::VectorXd alpha = alpha_latent;
  st2n_inplace(alpha, params.lambda_group[static_cast<std::size_t>(g)]);
  Eigen::VectorXd u = beta_shared + alpha;
  st2n_inplace(u, params.lambda_shared);
  return u;
}

/// Spatially varying threshold
///   lambda_S = sqrt(-max_{g : a_g'(a_g + 2b) < 0} a_g'(a_g + 2b)),
/// with lambda_S = 0 when no group qualifies. `alphas` are the already
/// thresholded group fields at the voxel.
inline double adaptive_threshold_lambda_s(const Eigen::VectorXd& beta_shared,
                                          std::span<const Eigen::VectorXd> alphas) {
  bool any = false;
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& alpha : alphas) {
    const double c = alpha.dot(alpha + 2.0 * beta_shared);
    if (c < 0.0) {
      any = true;
      best = std::max(best, c);
    }
  }
  return any ? std::sqrt(-best) : 0.0;
}

/// F(h_lambda(beta_shared)) = (1 - lambda_S/||h_lambda(beta_shared)||)_+ h_lambda(beta_shared).
inline Eigen::VectorXd similar_effect_f(const Eigen::VectorXd& beta_shared,
                                        std::span<const Eigen::VectorXd> alphas,
                                        double lambda) {
  detail::require_lambda(lambda);
  Eigen::VectorXd shared = beta_shared;
  st2n_inplace(shared, lambda);
  st2n_inplace(shared, adaptive_threshold_lambda_s(beta_shared, alphas));
  return shared;
}

/// Minimum pairwise cosine across groups. std::nullopt if any vector is zero
/// (no direction) or fewer than two groups are given (no pair to compare).
inline std::optional<double> psi_similarity(std::span<const Eigen::VectorXd> betas) {
  if (betas.size() < 2) return std::nullopt;
  std::vector<double> norms;
  norms.reserve(betas.size());
  for (const auto& b : betas) {
    const double n = b.norm();
    if (n == 0.0) return std::nullopt;
    norms.push_back(n);
  }
  double psi = std::numeric_limits<double>::infinity();
  for (std::size_t g = 0; g < betas.size(); ++g)
    for (std::size_t h = g + 1; h < betas.size(); ++h)
      psi = std::min(psi, betas[g].dot(betas[h]) / (norms[g] * norms[h]));
  return std::clamp(psi, -1.0, 1.0);
}

}  // namespace st2n
