#pragma once

// Small random datasets and model states shared by the unit and acceptance
// tests.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "st2n/latent_field.hpp"
#include "st2n/model.hpp"
#include "st2n/random.hpp"

namespace st2n::testing {

inline VectorImageDataset random_dataset(std::vector<int> dims, int q, int G, int n_per_group, int c,
                                         std::uint64_t seed) {
  Rng rng(seed);
  VectorImageDataset d;
  d.grid = SpatialGrid::regular(std::move(dims));
  d.q = q;
  d.G = G;
  const int n = G * n_per_group;
  for (int i = 0; i < n; ++i) d.group_of.push_back(i % G);
  d.D.resize(n, static_cast<Eigen::Index>(d.p()) * q);
  for (Eigen::Index i = 0; i < d.D.rows(); ++i)
    for (Eigen::Index k = 0; k < d.D.cols(); ++k) d.D(i, k) = std_normal(rng);
  d.X.resize(n, c);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < c; ++k) d.X(i, k) = std_normal(rng);
  for (int k = 0; k < c; ++k) d.covariate_names.push_back("z" + std::to_string(k + 1));
  d.y.resize(n);
  for (int i = 0; i < n; ++i) d.y(i) = std_normal(rng);
  return d;
}

inline FieldMatrix random_knot_field(int L, int q, double scale, Rng& rng) {
  FieldMatrix m(L, q);
  for (int l = 0; l < L; ++l)
    for (int k = 0; k < q; ++k) m(l, k) = scale * std_normal(rng);
  return m;
}

inline ModelState random_state(const VectorImageDataset& data, const LowRankBasis& basis, double lambda,
                               double lambda_g, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.5, 1.5);
  ModelState s;
  const int L = basis.L(), q = data.q;
  s.beta_shared_knots = random_knot_field(L, q, scale, rng);
  for (int g = 0; g < data.G; ++g) s.alpha_knots.push_back(random_knot_field(L, q, scale, rng));
  s.a_shared = 2.0 * u(rng);
  for (int g = 0; g < data.G; ++g) s.a_group.push_back(2.0 * u(rng));
  s.thresholds.lambda_shared = lambda;
  s.thresholds.lambda_group.assign(static_cast<std::size_t>(data.G), lambda_g);
  Eigen::MatrixXd A(q, q);
  for (int i = 0; i < q; ++i)
    for (int k = 0; k < q; ++k) A(i, k) = 0.3 * std_normal(rng);
  s.Sigma = A * A.transpose() + Eigen::MatrixXd::Identity(q, q);
  s.sigma2 = u(rng);
  s.b0.resize(data.G);
  for (int g = 0; g < data.G; ++g) s.b0(g) = std_normal(rng);
  s.b_cov.resize(data.c());
  for (int k = 0; k < data.c(); ++k) s.b_cov(k) = std_normal(rng);
  return s;
}

/// Smallest distance of any voxel-level latent norm to its threshold:
/// min over voxels and groups of | |u_gj| - lambda | and | |a_gj| - lambda_g |.
inline double boundary_margin(const ModelState& s, const LowRankBasis& basis) {
  const LatentVoxels lat = expand_latents(s, basis);
  double margin = std::numeric_limits<double>::infinity();
  for (int g = 0; g < s.G(); ++g) {
    const auto gi = static_cast<std::size_t>(g);
    const double lg = s.thresholds.lambda_group[gi];
    for (Eigen::Index j = 0; j < lat.shared.rows(); ++j) {
      Eigen::VectorXd a = lat.group[gi].row(j).transpose();
      margin = std::min(margin, std::abs(a.norm() - lg));
      st2n_inplace(a, lg);
      const Eigen::VectorXd u = lat.shared.row(j).transpose() + a;
      margin = std::min(margin, std::abs(u.norm() - s.thresholds.lambda_shared));
    }
  }
  return margin;
}

struct GradientCheck {
  int tested = 0;
  int skipped = 0;
  double max_rel_error = 0.0;
};

/// Central differences (step h) of the full log-posterior value against the
/// analytic gradient at randomly drawn knot coordinates. A coordinate is
/// skipped when either perturbed state brings some latent norm within 1e-3
/// of its threshold.
inline GradientCheck gradient_check(const LogPosterior& post, const ModelState& s, int n_coords,
                                    std::uint64_t seed, double h = 1e-6) {
  const auto f = make_prior_factors(s, post.basis().knots);
  const auto eval = post.log_posterior_and_grad(s, f);
  Rng rng(seed);
  std::uniform_int_distribution<int> block(-1, s.G() - 1), row(0, s.L() - 1), col(0, s.q() - 1);
  GradientCheck out;
  int attempts = 0;
  while (out.tested < n_coords && attempts < 50 * n_coords) {
    ++attempts;
    const int b = block(rng), l = row(rng), k = col(rng);
    auto coeff = [&](ModelState& st) -> double& {
      return b == kSharedBlock ? st.beta_shared_knots(l, k) : st.alpha_knots[static_cast<std::size_t>(b)](l, k);
    };
    ModelState plus = s, minus = s;
    coeff(plus) += h;
    coeff(minus) -= h;
    if (boundary_margin(plus, post.basis()) < 1e-3 || boundary_margin(minus, post.basis()) < 1e-3) {
      ++out.skipped;
      continue;
    }
    const double fd =
        (post.log_posterior_and_grad(plus, f).value - post.log_posterior_and_grad(minus, f).value) / (2 * h);
    const double an = b == kSharedBlock ? eval.grad_shared(l, k) : eval.grad_group[static_cast<std::size_t>(b)](l, k);
    const double rel = std::abs(fd - an) / std::max(std::abs(an), 1.0);
    out.max_rel_error = std::max(out.max_rel_error, rel);
    ++out.tested;
  }
  return out;
}

}  // namespace st2n::testing
