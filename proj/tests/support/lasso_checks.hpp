#pragma once

// Independent LASSO oracles: KKT residuals recomputed from scratch and a
// brute-force grid search for two-coefficient problems.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

#include "st2n/lasso.hpp"
#include "st2n/random.hpp"

namespace st2n::testing {

/// Column population standard deviations.
inline Eigen::VectorXd column_sd(const Eigen::MatrixXd& X) {
  const Eigen::MatrixXd c = X.rowwise() - X.colwise().mean();
  return (c.colwise().squaredNorm() / static_cast<double>(X.rows())).array().sqrt().transpose();
}

/// Largest KKT residual of (intercept, coef) for
///   (1/2n)||y - b - X w||^2 + lambda sum_j sd_j |w_j|
/// expressed on the standardized scale w~_j = sd_j w_j.
inline double kkt_residual(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double intercept,
                           const Eigen::VectorXd& coef, double lambda) {
  const double n = static_cast<double>(X.rows());
  const Eigen::VectorXd sd = column_sd(X);
  const Eigen::VectorXd r = y - X * coef - Eigen::VectorXd::Constant(y.size(), intercept);
  double worst = std::abs(r.sum() / n);  // intercept stationarity
  const Eigen::MatrixXd c = X.rowwise() - X.colwise().mean();
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    if (sd(j) == 0.0) continue;
    const double g = c.col(j).dot(r) / (n * sd(j));
    const double v = coef(j) == 0.0 ? std::max(0.0, std::abs(g) - lambda)
                                    : std::abs(g - lambda * (coef(j) > 0 ? 1.0 : -1.0));
    worst = std::max(worst, v);
  }
  return worst;
}

/// Objective with the intercept profiled out.
inline double lasso_objective(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const Eigen::VectorXd& coef,
                              double lambda) {
  const Eigen::VectorXd r = y - X * coef;
  const double n = static_cast<double>(X.rows());
  const double rss = (r.array() - r.mean()).square().sum();
  return rss / (2 * n) + lambda * column_sd(X).cwiseProduct(coef).lpNorm<1>();
}

struct GridSearch {
  double best_objective = std::numeric_limits<double>::infinity();
  Eigen::Vector2d best_coef;
};

/// Exhaustive search over coef in [-3, 3]^2 at the given resolution, using the
/// expanded quadratic form of the profiled residual sum of squares.
inline GridSearch brute_force_2d(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double lambda,
                                 double resolution = 1e-3) {
  const double n = static_cast<double>(X.rows());
  const Eigen::MatrixXd c = X.rowwise() - X.colwise().mean();
  const Eigen::VectorXd yc = y.array() - y.mean();
  const Eigen::Matrix2d A = c.transpose() * c;
  const Eigen::Vector2d b = c.transpose() * yc;
  const double yy = yc.squaredNorm();
  const Eigen::VectorXd sd = column_sd(X);
  const int steps = static_cast<int>(std::lround(6.0 / resolution));
  GridSearch out;
  for (int a = 0; a <= steps; ++a) {
    const double w0 = -3.0 + a * resolution;
    for (int k = 0; k <= steps; ++k) {
      const double w1 = -3.0 + k * resolution;
      const double rss = yy - 2 * (w0 * b(0) + w1 * b(1)) + A(0, 0) * w0 * w0 + 2 * A(0, 1) * w0 * w1 + A(1, 1) * w1 * w1;
      const double f = rss / (2 * n) + lambda * (sd(0) * std::abs(w0) + sd(1) * std::abs(w1));
      if (f < out.best_objective) {
        out.best_objective = f;
        out.best_coef = {w0, w1};
      }
    }
  }
  return out;
}

struct ToyLasso {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
};

/// n = 5, m = 2 problem with a solution well inside [-3, 3]^2.
inline ToyLasso toy_lasso(std::uint64_t seed) {
  Rng rng(seed);
  ToyLasso t;
  t.X.resize(5, 2);
  t.y.resize(5);
  for (int i = 0; i < 5; ++i) {
    t.X(i, 0) = std_normal(rng);
    t.X(i, 1) = 0.5 * t.X(i, 0) + std_normal(rng);
    t.y(i) = 1.0 + 1.2 * t.X(i, 0) - 0.7 * t.X(i, 1) + 0.3 * std_normal(rng);
  }
  return t;
}

}  // namespace st2n::testing
