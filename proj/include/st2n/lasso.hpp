#pragma once

// LASSO baseline: cyclic coordinate descent with an unpenalized intercept on
// internally standardized columns, and a K-fold cross-validated lambda path.
//
// The solved problem is
//   min_{b, w} (1/2n) ||y - b - X w||^2 + lambda * sum_j s_j |w_j|,
// s_j the population standard deviation of column j, i.e. an ordinary l1
// penalty on the standardized coefficients w~_j = s_j w_j.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

#include "st2n/errors.hpp"
#include "st2n/random.hpp"

namespace st2n {

struct LassoFit {
  Eigen::VectorXd coef;      // original scale
  double intercept = 0.0;
  double lambda_reg = 0.0;
  double max_change = 0.0;   // largest standardized coordinate update in the final sweep
  int sweeps = 0;
  Eigen::VectorXd coef_std;  // standardized scale
  std::vector<double> objective_trace;  // after every full sweep
};

struct LassoOptions {
  double tol = 1e-10;
  int max_iter = 1000000;
  bool record_objective = false;
};

namespace detail {

struct Standardized {
  Eigen::MatrixXd X;  // centred and scaled
  Eigen::VectorXd y;  // centred
  Eigen::VectorXd x_mean, x_scale;
  double y_mean = 0.0;
};

inline Standardized standardize(const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
  require_shape(X.rows() == y.size(), "lasso: X rows vs y");
  require(X.rows() >= 1, "lasso: need at least one observation");
  const double n = static_cast<double>(X.rows());
  Standardized s;
  s.x_mean = X.colwise().mean().transpose();
  s.X = X.rowwise() - s.x_mean.transpose();
  s.x_scale = (s.X.colwise().squaredNorm() / n).array().sqrt().transpose();
  for (Eigen::Index j = 0; j < s.X.cols(); ++j) {
    if (s.x_scale(j) > 0.0) s.X.col(j) /= s.x_scale(j);
    else s.X.col(j).setZero();
  }
  s.y_mean = y.mean();
  s.y = y.array() - s.y_mean;
  return s;
}

inline double soft(double z, double t) {
  if (z > t) return z - t;
  if (z < -t) return z + t;
  return 0.0;
}

inline double std_objective(const Standardized& s, const Eigen::VectorXd& r, const Eigen::VectorXd& w,
                            double lambda) {
  const double n = static_cast<double>(s.X.rows());
  return r.squaredNorm() / (2.0 * n) + lambda * w.lpNorm<1>();
}

/// Coordinate descent on a standardized problem, warm-started from `w`.
/// Active-set passes between full sweeps; converged when a full sweep moves
/// no coordinate by more than tol.
inline LassoFit solve_standardized(const Standardized& s, double lambda, Eigen::VectorXd w,
                                   const LassoOptions& opt) {
  const Eigen::Index n = s.X.rows();
  const Eigen::Index m = s.X.cols();
  const double inv_n = 1.0 / static_cast<double>(n);
  Eigen::VectorXd r = s.y - s.X * w;
  LassoFit fit;
  fit.lambda_reg = lambda;

  auto update = [&](Eigen::Index j) {
    if (s.x_scale(j) <= 0.0) return 0.0;
    const double old = w(j);
    const double z = old + inv_n * s.X.col(j).dot(r);
    const double next = soft(z, lambda);
    if (next != old) {
      r.noalias() -= (next - old) * s.X.col(j);
      w(j) = next;
    }
    return std::abs(next - old);
  };

  int sweeps = 0;
  while (true) {
    double full_change = 0.0;
    for (Eigen::Index j = 0; j < m; ++j) full_change = std::max(full_change, update(j));
    ++sweeps;
    if (opt.record_objective) fit.objective_trace.push_back(std_objective(s, r, w, lambda));
    fit.max_change = full_change;
    if (full_change < opt.tol) break;
    if (sweeps >= opt.max_iter)
      throw ConvergenceError("lasso: no convergence after " + std::to_string(opt.max_iter) + " sweeps");
    // Iterate on the active set until it settles, then re-check with a full sweep.
    std::vector<Eigen::Index> active;
    for (Eigen::Index j = 0; j < m; ++j)
      if (w(j) != 0.0) active.push_back(j);
    while (!opt.record_objective) {
      double change = 0.0;
      for (Eigen::Index j : active) change = std::max(change, update(j));
      ++sweeps;
      if (change < opt.tol) break;
      if (sweeps >= opt.max_iter)
        throw ConvergenceError("lasso: no convergence after " + std::to_string(opt.max_iter) + " sweeps");
    }
  }
  fit.sweeps = sweeps;
  fit.coef_std = w;
  fit.coef.resize(m);
  for (Eigen::Index j = 0; j < m; ++j) fit.coef(j) = s.x_scale(j) > 0.0 ? w(j) / s.x_scale(j) : 0.0;
  fit.intercept = s.y_mean - s.x_mean.dot(fit.coef);
  return fit;
}

}  // namespace detail

inline LassoFit lasso_fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double lambda_reg,
                          const LassoOptions& opt = {}) {
  require(lambda_reg >= 0.0, "lasso: lambda must be nonnegative");
  const auto s = detail::standardize(X, y);
  return detail::solve_standardized(s, lambda_reg, Eigen::VectorXd::Zero(X.cols()), opt);
}

/// Smallest lambda with an all-zero solution: max_j |x~_j^T (y - ybar)| / n.
inline double lasso_lambda_max(const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
  const auto s = detail::standardize(X, y);
  return (s.X.transpose() * s.y).cwiseAbs().maxCoeff() / static_cast<double>(X.rows());
}

/// Largest KKT violation of a fit on the standardized problem:
///   w~_j = 0  : max(0, |g_j| - lambda)
///   w~_j != 0 : |g_j - lambda sign(w~_j)|
/// with g_j = x~_j^T r / n.
inline double lasso_kkt_violation(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                  const LassoFit& fit) {
  const auto s = detail::standardize(X, y);
  const Eigen::VectorXd r = s.y - s.X * fit.coef_std;
  const Eigen::VectorXd g = s.X.transpose() * r / static_cast<double>(X.rows());
  double worst = 0.0;
  for (Eigen::Index j = 0; j < g.size(); ++j) {
    if (s.x_scale(j) <= 0.0) continue;
    const double w = fit.coef_std(j);
    const double v = w == 0.0 ? std::max(0.0, std::abs(g(j)) - fit.lambda_reg)
                              : std::abs(g(j) - fit.lambda_reg * (w > 0.0 ? 1.0 : -1.0));
    worst = std::max(worst, v);
  }
  return worst;
}

struct LassoPath {
  std::vector<double> lambdas;  // decreasing
  std::vector<double> cv_mse;   // mean held-out MSE per lambda
  std::vector<int> fold_of;
  std::size_t best = 0;
  double best_lambda = 0.0;
  LassoFit fit;  // refit on all data at best_lambda
};

/// Fold labels 0..k-1 from a seeded shuffle.
inline std::vector<int> lasso_folds(int n, int k_folds, std::uint64_t seed) {
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<int> fold(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) fold[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = i % k_folds;
  return fold;
}

/// Log-spaced lambda grid from lambda_max down four decades, K-fold CV with
/// warm starts along the path, refit at the CV-minimizing lambda.
inline LassoPath lasso_cv_path(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, int k_folds,
                               int n_lambdas, std::uint64_t seed = 1,
                               const LassoOptions& opt = {.tol = 1e-8, .max_iter = 1000000}) {
  require(k_folds >= 2, "lasso_cv_path: need at least two folds");
  require(n_lambdas >= 2, "lasso_cv_path: need at least two lambdas");
  const int n = static_cast<int>(X.rows());
  require(n >= k_folds, "lasso_cv_path: fewer observations than folds");
  LassoPath path;
  const double lmax = lasso_lambda_max(X, y);
  for (int k = 0; k < n_lambdas; ++k)
    path.lambdas.push_back(lmax * std::pow(10.0, -4.0 * k / (n_lambdas - 1)));
  path.cv_mse.assign(path.lambdas.size(), 0.0);
  path.fold_of = lasso_folds(n, k_folds, seed);

  for (int f = 0; f < k_folds; ++f) {
    std::vector<int> train, test;
    for (int i = 0; i < n; ++i) (path.fold_of[static_cast<std::size_t>(i)] == f ? test : train).push_back(i);
    Eigen::MatrixXd Xtr(static_cast<Eigen::Index>(train.size()), X.cols());
    Eigen::VectorXd ytr(static_cast<Eigen::Index>(train.size()));
    for (std::size_t r = 0; r < train.size(); ++r) {
      Xtr.row(static_cast<Eigen::Index>(r)) = X.row(train[r]);
      ytr(static_cast<Eigen::Index>(r)) = y(train[r]);
    }
    const auto s = detail::standardize(Xtr, ytr);
    Eigen::VectorXd w = Eigen::VectorXd::Zero(X.cols());
    for (std::size_t k = 0; k < path.lambdas.size(); ++k) {
      const LassoFit fit = detail::solve_standardized(s, path.lambdas[k], w, opt);
      w = fit.coef_std;
      double sse = 0.0;
      for (int i : test) {
        const double e = y(i) - fit.intercept - X.row(i).dot(fit.coef);
        sse += e * e;
      }
      path.cv_mse[k] += sse / static_cast<double>(n);
    }
  }
  path.best = static_cast<std::size_t>(
      std::min_element(path.cv_mse.begin(), path.cv_mse.end()) - path.cv_mse.begin());
  path.best_lambda = path.lambdas[path.best];

  const auto s = detail::standardize(X, y);
  Eigen::VectorXd w = Eigen::VectorXd::Zero(X.cols());
  for (std::size_t k = 0; k <= path.best; ++k) {
    path.fit = detail::solve_standardized(s, path.lambdas[k], w, opt);
    w = path.fit.coef_std;
  }
  return path;
}

}  // namespace st2n
