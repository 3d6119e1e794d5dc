#pragma once

// Multi-group scalar-on-vector-image regression
//
//   y_i = b0[g(i)] + X_i b_cov + p^{-1/2} sum_j <D_i(v_j), beta_g(v_j)> + e_i,
//   e_i ~ Normal(0, sigma2),
//   beta_g(v) = h_lambda(beta~(v) + h_{lambda_g}(alpha~_g(v))),
//
// with beta~ and alpha~_g low-rank GP fields. This header holds the dataset
// and state types, coefficient materialization, the likelihood and the
// log-posterior with exact gradients with respect to every knot coefficient.

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "st2n/errors.hpp"
#include "st2n/latent_field.hpp"
#include "st2n/operators.hpp"

namespace st2n {

using PredictorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct VectorImageDataset {
  SpatialGrid grid;
  int q = 0;
  int G = 0;
  std::vector<int> group_of;  // 0-based group per subject
  Eigen::VectorXd y;
  PredictorMatrix D;  // n x (p*q), column j*q + k
  Eigen::MatrixXd X;  // n x c scalar covariates (c may be 0)
  std::vector<std::string> covariate_names;

  int n() const { return static_cast<int>(y.size()); }
  int p() const { return grid.p(); }
  int c() const { return static_cast<int>(X.cols()); }

  std::vector<int> group_sizes() const {
    std::vector<int> sizes(static_cast<std::size_t>(G), 0);
    for (int g : group_of) ++sizes[static_cast<std::size_t>(g)];
    return sizes;
  }

  void validate() const {
    require(q >= 1, "dataset: q must be >= 1");
    require(G >= 1, "dataset: G must be >= 1");
    const int n_ = n();
    require_shape(static_cast<int>(group_of.size()) == n_, "dataset: group labels vs responses");
    require_shape(D.rows() == n_ && D.cols() == static_cast<Eigen::Index>(p()) * q,
                  "dataset: predictor tensor must be n x p*q");
    require_shape(X.rows() == n_ || (X.rows() == 0 && X.cols() == 0),
                  "dataset: covariate rows vs responses");
    require_shape(static_cast<int>(covariate_names.size()) == c(), "dataset: covariate names");
    for (int g : group_of) require(g >= 0 && g < G, "dataset: group label out of range");
    for (int s : group_sizes()) require(s > 0, "dataset: every group must be nonempty");
    require(y.allFinite() && D.allFinite() && X.allFinite(), "dataset: non-finite values");
  }
};

struct Hyper {
  double c1 = 0.1;  // sigma^{-2} ~ Ga(c1, c2)
  double c2 = 0.1;
  double d1 = 0.1;  // a^d ~ Ga(d1, d2)
  double d2 = 0.1;
  double sigma_b2 = 100.0;
  double nu = 4.0;
  Eigen::MatrixXd S;  // inverse-Wishart scale; empty means I_q
  double R = 5.0;     // lambda, lambda_g ~ Unif(0, R)

  Eigen::MatrixXd scale(int q) const {
    if (S.size() == 0) return Eigen::MatrixXd::Identity(q, q);
    require_shape(S.rows() == q && S.cols() == q, "inverse-Wishart scale must be q x q");
    return S;
  }
};

struct ModelState {
  FieldMatrix beta_shared_knots;          // L x q
  std::vector<FieldMatrix> alpha_knots;   // G of L x q
  double a_shared = 1.0;
  std::vector<double> a_group;
  ThresholdParams thresholds;
  Eigen::MatrixXd Sigma;
  double sigma2 = 1.0;
  Eigen::VectorXd b0;
  Eigen::VectorXd b_cov;

  int G() const { return static_cast<int>(alpha_knots.size()); }
  int L() const { return static_cast<int>(beta_shared_knots.rows()); }
  int q() const { return static_cast<int>(beta_shared_knots.cols()); }
};

/// Throws std::invalid_argument when an invariant is broken.
inline void validate_state(const ModelState& s, double R) {
  const int G = s.G();
  require(G >= 1, "state: no groups");
  require(static_cast<int>(s.a_group.size()) == G && s.thresholds.groups() == G &&
              s.b0.size() == G,
          "state: per-group parameter counts disagree");
  for (const auto& a : s.alpha_knots)
    require_shape(a.rows() == s.L() && a.cols() == s.q(), "state: group knot field shape");
  require(s.sigma2 > 0.0 && std::isfinite(s.sigma2), "state: sigma2 must be positive");
  auto in_range = [R](double l) { return l >= 0.0 && l <= R; };
  require(in_range(s.thresholds.lambda_shared), "state: lambda outside [0, R]");
  for (double l : s.thresholds.lambda_group) require(in_range(l), "state: lambda_g outside [0, R]");
  require(s.a_shared > 0.0, "state: a must be positive");
  for (double a : s.a_group) require(a > 0.0, "state: a_g must be positive");
  require_shape(s.Sigma.rows() == s.q() && s.Sigma.cols() == s.q(), "state: Sigma shape");
  Eigen::LLT<Eigen::MatrixXd> llt(s.Sigma);
  require(llt.info() == Eigen::Success, "state: Sigma not positive definite");
  require(s.beta_shared_knots.allFinite() && s.b0.allFinite() && s.b_cov.allFinite(),
          "state: non-finite entries");
}

struct CoefficientField {
  std::vector<FieldMatrix> beta;  // G of p x q, exact zeros where thresholded
  Eigen::MatrixXd norms;          // G x p
  FieldMatrix f_values;           // p x q
  std::vector<std::optional<double>> psi;

  int G() const { return static_cast<int>(beta.size()); }
  int p() const { return static_cast<int>(norms.cols()); }
};

/// Voxel-level latent fields B*C for the shared and every group field.
struct LatentVoxels {
  FieldMatrix shared;
  std::vector<FieldMatrix> group;
};

inline LatentVoxels expand_latents(const ModelState& state, const LowRankBasis& basis) {
  LatentVoxels out;
  out.shared = expand_field(basis.basis, state.beta_shared_knots);
  out.group.reserve(state.alpha_knots.size());
  for (const auto& a : state.alpha_knots) out.group.push_back(expand_field(basis.basis, a));
  return out;
}

/// beta_g for every voxel from voxel-level latents.
inline FieldMatrix group_beta(const FieldMatrix& shared_latent, const FieldMatrix& group_latent,
                              double lambda, double lambda_g) {
  FieldMatrix beta(shared_latent.rows(), shared_latent.cols());
  for (Eigen::Index j = 0; j < beta.rows(); ++j) {
    auto row = beta.row(j);
    row = group_latent.row(j);
    st2n_inplace(row, lambda_g);
    row += shared_latent.row(j);
    st2n_inplace(row, lambda);
  }
  return beta;
}

inline CoefficientField materialize_coefficients(const LatentVoxels& latents,
                                                 const ThresholdParams& thresholds) {
  const int G = static_cast<int>(latents.group.size());
  require_shape(thresholds.groups() == G, "materialize: threshold count vs groups");
  const Eigen::Index p = latents.shared.rows();
  const Eigen::Index q = latents.shared.cols();
  CoefficientField field;
  field.beta.reserve(static_cast<std::size_t>(G));
  field.norms.resize(G, p);
  for (int g = 0; g < G; ++g) {
    require_shape(latents.group[static_cast<std::size_t>(g)].rows() == p,
                  "materialize: latent field shapes");
    field.beta.push_back(group_beta(latents.shared, latents.group[static_cast<std::size_t>(g)],
                                    thresholds.lambda_shared,
                                    thresholds.lambda_group[static_cast<std::size_t>(g)]));
    field.norms.row(g) = field.beta.back().rowwise().norm().transpose();
  }
  field.f_values.resize(p, q);
  field.psi.resize(static_cast<std::size_t>(p));
  std::vector<Eigen::VectorXd> alphas(static_cast<std::size_t>(G));
  std::vector<Eigen::VectorXd> betas(static_cast<std::size_t>(G));
  for (Eigen::Index j = 0; j < p; ++j) {
    const Eigen::VectorXd shared = latents.shared.row(j).transpose();
    for (int g = 0; g < G; ++g) {
      const auto gi = static_cast<std::size_t>(g);
      alphas[gi] = latents.group[gi].row(j).transpose();
      st2n_inplace(alphas[gi], thresholds.lambda_group[gi]);
      betas[gi] = field.beta[gi].row(j).transpose();
    }
    field.f_values.row(j) =
        similar_effect_f(shared, alphas, thresholds.lambda_shared).transpose();
    field.psi[static_cast<std::size_t>(j)] = psi_similarity(betas);
  }
  return field;
}

inline CoefficientField materialize_coefficients(const ModelState& state,
                                                 const LowRankBasis& basis) {
  require_shape(state.L() == basis.L(), "materialize: knot count vs basis");
  return materialize_coefficients(expand_latents(state, basis), state.thresholds);
}

inline double image_scale(int p) { return 1.0 / std::sqrt(static_cast<double>(p)); }

/// mu_i = b0[g(i)] + X_i b_cov + p^{-1/2} sum_j <D_i(v_j), beta_{g(i)}(v_j)>.
inline Eigen::VectorXd predict_mean(const CoefficientField& field, const VectorImageDataset& data,
                                    const ModelState& state) {
  require_shape(field.G() == data.G && field.p() == data.p(), "predict_mean: field vs dataset");
  const double s = image_scale(data.p());
  const Eigen::Index pq = static_cast<Eigen::Index>(data.p()) * data.q;
  Eigen::VectorXd mu(data.n());
  for (int i = 0; i < data.n(); ++i) {
    const int g = data.group_of[static_cast<std::size_t>(i)];
    const Eigen::Map<const Eigen::VectorXd> beta(field.beta[static_cast<std::size_t>(g)].data(), pq);
    double m = state.b0(g) + s * data.D.row(i).dot(beta.transpose());
    if (data.c() > 0) m += data.X.row(i).dot(state.b_cov);
    mu(i) = m;
  }
  return mu;
}

inline double log_likelihood(const VectorImageDataset& data, const Eigen::VectorXd& mu,
                             double sigma2) {
  require(sigma2 > 0.0, "log_likelihood: sigma2 must be positive");
  require_shape(mu.size() == data.y.size(), "log_likelihood: mean vs responses");
  const double n = static_cast<double>(data.n());
  return -0.5 * n * std::log(2.0 * std::numbers::pi * sigma2) -
         (data.y - mu).squaredNorm() / (2.0 * sigma2);
}

/// Log densities of the scalar priors. Each returns -inf outside the support.
namespace prior {

inline double log_gamma_pdf(double x, double shape, double rate) {
  if (!(x > 0.0)) return -std::numeric_limits<double>::infinity();
  return shape * std::log(rate) - std::lgamma(shape) + (shape - 1.0) * std::log(x) - rate * x;
}

inline double log_normal_pdf(double x, double var) {
  return -0.5 * std::log(2.0 * std::numbers::pi * var) - 0.5 * x * x / var;
}

/// Density of a when a^d ~ Ga(d1, d2).
inline double log_kernel_scale(double a, int d, double d1, double d2) {
  if (!(a > 0.0)) return -std::numeric_limits<double>::infinity();
  const double dd = static_cast<double>(d);
  return log_gamma_pdf(std::pow(a, dd), d1, d2) + std::log(dd) + (dd - 1.0) * std::log(a);
}

inline double log_uniform(double x, double R) {
  return (x >= 0.0 && x <= R) ? -std::log(R) : -std::numeric_limits<double>::infinity();
}

inline double log_multi_gamma(double x, int q) {
  double out = 0.25 * q * (q - 1) * std::log(std::numbers::pi);
  for (int j = 0; j < q; ++j) out += std::lgamma(x - 0.5 * j);
  return out;
}

inline double log_inverse_wishart(const Eigen::MatrixXd& sigma, double nu,
                                  const Eigen::MatrixXd& scale) {
  const int q = static_cast<int>(sigma.rows());
  const CovFactor sf(sigma);
  const CovFactor scf(scale);
  const Eigen::MatrixXd sigma_inv = sigma.llt().solve(Eigen::MatrixXd::Identity(q, q));
  return 0.5 * nu * scf.log_det - 0.5 * nu * q * std::log(2.0) - log_multi_gamma(0.5 * nu, q) -
         0.5 * (nu + q + 1.0) * sf.log_det - 0.5 * (scale * sigma_inv).trace();
}

}  // namespace prior

/// Cholesky factors of every kernel and of Sigma for the current state.
struct PriorFactors {
  KernelFactor shared;
  std::vector<KernelFactor> group;
  CovFactor sigma;
};

inline PriorFactors make_prior_factors(const ModelState& state, const KnotSet& knots) {
  std::vector<KernelFactor> group;
  for (double a : state.a_group) group.push_back(kernel_matrix_adaptive(knots, a));
  return PriorFactors{kernel_matrix_adaptive(knots, state.a_shared), std::move(group),
                      CovFactor(state.Sigma)};
}

/// Block of knot coefficients: kSharedBlock or a group index.
inline constexpr int kSharedBlock = -1;

struct LogPosteriorEval {
  double value = 0.0;
  FieldMatrix grad_shared;
  std::vector<FieldMatrix> grad_group;
};

/// Log-posterior evaluator. Holds per-group copies of the predictors so the
/// likelihood and its gradient for one group touch only that group's rows.
class LogPosterior {
 public:
  LogPosterior(const VectorImageDataset& data, const LowRankBasis& basis, Hyper hyper,
               bool likelihood_enabled = true)
      : data_(&data), basis_(&basis), hyper_(std::move(hyper)),
        likelihood_enabled_(likelihood_enabled) {
    data.validate();
    require_shape(basis.p() == data.p(), "posterior: basis voxels vs dataset grid");
    scale_ = image_scale(data.p());
    const int G = data.G;
    groups_.resize(static_cast<std::size_t>(G));
    for (int i = 0; i < data.n(); ++i)
      groups_[static_cast<std::size_t>(data.group_of[static_cast<std::size_t>(i)])].rows.push_back(i);
    for (auto& grp : groups_) {
      const auto m = static_cast<Eigen::Index>(grp.rows.size());
      grp.D.resize(m, data.D.cols());
      grp.y.resize(m);
      grp.X.resize(m, data.c());
      for (Eigen::Index r = 0; r < m; ++r) {
        const int i = grp.rows[static_cast<std::size_t>(r)];
        grp.D.row(r) = data.D.row(i);
        grp.y(r) = data.y(i);
        if (data.c() > 0) grp.X.row(r) = data.X.row(i);
      }
    }
  }

  const VectorImageDataset& data() const { return *data_; }
  const LowRankBasis& basis() const { return *basis_; }
  const Hyper& hyper() const { return hyper_; }
  bool likelihood_enabled() const { return likelihood_enabled_; }
  int G() const { return data_->G; }
  int n_group(int g) const { return static_cast<int>(groups_[static_cast<std::size_t>(g)].rows.size()); }
  const std::vector<int>& group_rows(int g) const { return groups_[static_cast<std::size_t>(g)].rows; }

  /// b0[g] + X_i b_cov for the subjects of group g.
  Eigen::VectorXd group_offset(int g, const ModelState& s) const {
    const auto& grp = groups_[static_cast<std::size_t>(g)];
    Eigen::VectorXd off = Eigen::VectorXd::Constant(grp.y.size(), s.b0(g));
    if (grp.X.cols() > 0) off += grp.X * s.b_cov;
    return off;
  }

  /// p^{-1/2} D_g vec(beta_g).
  Eigen::VectorXd group_image_term(int g, const FieldMatrix& beta_g) const {
    const auto& grp = groups_[static_cast<std::size_t>(g)];
    const Eigen::Map<const Eigen::VectorXd> b(beta_g.data(), beta_g.size());
    return scale_ * (grp.D * b);
  }

  const Eigen::VectorXd& group_y(int g) const { return groups_[static_cast<std::size_t>(g)].y; }
  const Eigen::MatrixXd& group_X(int g) const { return groups_[static_cast<std::size_t>(g)].X; }

  /// Group-g log-likelihood; if grad_beta is non-null it receives d/d beta_g.
  double group_log_likelihood(int g, const FieldMatrix& beta_g, const ModelState& s,
                              FieldMatrix* grad_beta = nullptr) const {
    if (!likelihood_enabled_) {
      if (grad_beta) grad_beta->setZero(beta_g.rows(), beta_g.cols());
      return 0.0;
    }
    const auto& grp = groups_[static_cast<std::size_t>(g)];
    const Eigen::VectorXd resid = grp.y - group_offset(g, s) - group_image_term(g, beta_g);
    const double m = static_cast<double>(grp.y.size());
    if (grad_beta) {
      grad_beta->resize(beta_g.rows(), beta_g.cols());
      Eigen::Map<Eigen::VectorXd> out(grad_beta->data(), grad_beta->size());
      out.noalias() = grp.D.transpose() * resid;
      out *= scale_ / s.sigma2;
    }
    return -0.5 * m * std::log(2.0 * std::numbers::pi * s.sigma2) -
           resid.squaredNorm() / (2.0 * s.sigma2);
  }

  double log_likelihood(const ModelState& s, const LatentVoxels& latents) const {
    double total = 0.0;
    for (int g = 0; g < G(); ++g) total += group_log_likelihood(g, beta_for(g, s, latents), s);
    return total;
  }

  double log_likelihood(const ModelState& s) const {
    return log_likelihood(s, expand_latents(s, *basis_));
  }

  FieldMatrix beta_for(int g, const ModelState& s, const LatentVoxels& latents) const {
    return group_beta(latents.shared, latents.group[static_cast<std::size_t>(g)],
                      s.thresholds.lambda_shared,
                      s.thresholds.lambda_group[static_cast<std::size_t>(g)]);
  }

  /// Sum of all prior log-densities except the GP priors of the knot fields.
  double log_scalar_prior(const ModelState& s) const {
    const Hyper& h = hyper_;
    const int d = data_->grid.d();
    double out = prior::log_gamma_pdf(1.0 / s.sigma2, h.c1, h.c2);
    for (Eigen::Index g = 0; g < s.b0.size(); ++g) out += prior::log_normal_pdf(s.b0(g), h.sigma_b2);
    for (Eigen::Index k = 0; k < s.b_cov.size(); ++k)
      out += prior::log_normal_pdf(s.b_cov(k), h.sigma_b2);
    out += prior::log_uniform(s.thresholds.lambda_shared, h.R);
    for (double l : s.thresholds.lambda_group) out += prior::log_uniform(l, h.R);
    out += prior::log_kernel_scale(s.a_shared, d, h.d1, h.d2);
    for (double a : s.a_group) out += prior::log_kernel_scale(a, d, h.d1, h.d2);
    out += prior::log_inverse_wishart(s.Sigma, h.nu, h.scale(s.q()));
    return out;
  }

  /// Full log-posterior and its gradient with respect to every knot field.
  LogPosteriorEval log_posterior_and_grad(const ModelState& s, const PriorFactors& f) const {
    const LatentVoxels latents = expand_latents(s, *basis_);
    LogPosteriorEval out;
    FieldMatrix grad_shared_vox = FieldMatrix::Zero(latents.shared.rows(), latents.shared.cols());
    out.grad_group.resize(static_cast<std::size_t>(G()));
    double value = 0.0;
    for (int g = 0; g < G(); ++g) {
      FieldMatrix grad_group_vox;
      value += chain_group(g, s, latents, &grad_shared_vox, &grad_group_vox);
      const auto prior_g = gp_log_prior(s.alpha_knots[static_cast<std::size_t>(g)],
                                        f.group[static_cast<std::size_t>(g)], f.sigma);
      value += prior_g.value;
      out.grad_group[static_cast<std::size_t>(g)] =
          basis_->basis.transpose() * grad_group_vox + prior_g.grad;
    }
    const auto prior_shared = gp_log_prior(s.beta_shared_knots, f.shared, f.sigma);
    value += prior_shared.value + log_scalar_prior(s);
    out.grad_shared = basis_->basis.transpose() * grad_shared_vox + prior_shared.grad;
    out.value = value;
    return out;
  }

  /// Terms of the log-posterior that depend on one knot block, with the
  /// gradient with respect to that block. Differences of this quantity equal
  /// differences of the full log-posterior when only the block moves.
  double block_log_target(int block, const ModelState& s, const PriorFactors& f,
                          const LatentVoxels& latents, FieldMatrix* grad) const {
    const Eigen::Index p = latents.shared.rows();
    const Eigen::Index q = latents.shared.cols();
    if (block == kSharedBlock) {
      FieldMatrix grad_vox = FieldMatrix::Zero(p, q);
      double value = 0.0;
      for (int g = 0; g < G(); ++g) value += chain_group(g, s, latents, &grad_vox, nullptr);
      const auto pr = gp_log_prior(s.beta_shared_knots, f.shared, f.sigma);
      if (grad) *grad = basis_->basis.transpose() * grad_vox + pr.grad;
      return value + pr.value;
    }
    FieldMatrix grad_vox;
    const double value = chain_group(block, s, latents, nullptr, &grad_vox);
    const auto pr = gp_log_prior(s.alpha_knots[static_cast<std::size_t>(block)],
                                 f.group[static_cast<std::size_t>(block)], f.sigma);
    if (grad) *grad = basis_->basis.transpose() * grad_vox + pr.grad;
    return value + pr.value;
  }

 private:
  struct GroupData {
    std::vector<int> rows;
    PredictorMatrix D;
    Eigen::VectorXd y;
    Eigen::MatrixXd X;
  };

  /// Group-g log-likelihood with the gradient chained back to the voxel-level
  /// shared latent (accumulated) and group latent (overwritten).
  double chain_group(int g, const ModelState& s, const LatentVoxels& latents,
                     FieldMatrix* grad_shared_vox, FieldMatrix* grad_group_vox) const {
    const auto gi = static_cast<std::size_t>(g);
    const double lambda = s.thresholds.lambda_shared;
    const double lambda_g = s.thresholds.lambda_group[gi];
    const FieldMatrix& shared = latents.shared;
    const FieldMatrix& group = latents.group[gi];
    const Eigen::Index p = shared.rows();
    const Eigen::Index q = shared.cols();

    FieldMatrix beta = group_beta(shared, group, lambda, lambda_g);
    FieldMatrix gamma;
    const bool want_grad = grad_shared_vox || grad_group_vox;
    const double value = group_log_likelihood(g, beta, s, want_grad ? &gamma : nullptr);
    if (!want_grad) return value;
    if (grad_group_vox) grad_group_vox->setZero(p, q);
    if (!likelihood_enabled_) return value;

    Eigen::VectorXd alpha(q), u(q), gu(q);
    for (Eigen::Index j = 0; j < p; ++j) {
      const auto a_lat = group.row(j).transpose();
      const double na = a_lat.norm();
      alpha = a_lat;
      st2n_inplace(alpha, lambda_g);
      u = shared.row(j).transpose() + alpha;
      if (!(u.norm() > lambda)) continue;
      gu = st2n_jvp(u, lambda, gamma.row(j).transpose());
      if (grad_shared_vox) grad_shared_vox->row(j) += gu.transpose();
      if (grad_group_vox && na > lambda_g)
        grad_group_vox->row(j) = st2n_jvp(a_lat, lambda_g, gu).transpose();
    }
    return value;
  }

  const VectorImageDataset* data_;
  const LowRankBasis* basis_;
  Hyper hyper_;
  bool likelihood_enabled_ = true;
  double scale_ = 1.0;
  std::vector<GroupData> groups_;
};

}  // namespace st2n
