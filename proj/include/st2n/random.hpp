#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>

#include "st2n/errors.hpp"

namespace st2n {

using Rng = std::mt19937_64;

/// splitmix64 finalizer; turns (seed, stream) into an independent seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline double std_normal(Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  return dist(rng);
}

/// Uniform on the open interval (0, 1).
inline double uniform_open(Rng& rng) {
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  double u = 0.0;
  do {
    u = dist(rng);
  } while (u <= 0.0);
  return u;
}

/// Gamma(shape, rate), mean shape/rate.
inline double gamma_draw(Rng& rng, double shape, double rate) {
  std::gamma_distribution<double> dist(shape, 1.0 / rate);
  return dist(rng);
}

template <class Derived>
void fill_normal(Eigen::MatrixBase<Derived>& m, Rng& rng) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = std_normal(rng);
}

/// Sigma ~ InvWishart(df, scale), density proportional to
/// |Sigma|^{-(df+q+1)/2} exp(-tr(scale Sigma^{-1})/2). Drawn as the inverse of a
/// Bartlett-factored Wishart(df, scale^{-1}).
inline Eigen::MatrixXd inverse_wishart_draw(Rng& rng, double df, const Eigen::MatrixXd& scale) {
  const Eigen::Index q = scale.rows();
  require(df > static_cast<double>(q) - 1.0, "inverse Wishart needs df > q - 1");
  const Eigen::MatrixXd scale_inv = scale.llt().solve(Eigen::MatrixXd::Identity(q, q));
  Eigen::LLT<Eigen::MatrixXd> llt(0.5 * (scale_inv + scale_inv.transpose()));
  if (llt.info() != Eigen::Success) throw DecompositionError("inverse Wishart scale not PD");
  const Eigen::MatrixXd chol = llt.matrixL();
  Eigen::MatrixXd bartlett = Eigen::MatrixXd::Zero(q, q);
  for (Eigen::Index i = 0; i < q; ++i) {
    bartlett(i, i) = std::sqrt(2.0 * gamma_draw(rng, 0.5 * (df - static_cast<double>(i)), 1.0));
    for (Eigen::Index j = 0; j < i; ++j) bartlett(i, j) = std_normal(rng);
  }
  // W = (chol A)(chol A)^T; Sigma = W^{-1} = (chol A)^{-T} (chol A)^{-1}
  const Eigen::MatrixXd la = chol * bartlett;
  const Eigen::MatrixXd la_inv =
      la.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd::Identity(q, q));
  Eigen::MatrixXd sigma = la_inv.transpose() * la_inv;
  return 0.5 * (sigma + sigma.transpose());
}

}  // namespace st2n
