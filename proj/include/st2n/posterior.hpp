#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "st2n/errors.hpp"
#include "st2n/model.hpp"
#include "st2n/sampler.hpp"
#include "st2n/simulate.hpp"

namespace st2n {

struct ScalarInterval {
  std::string name;
  double mean = 0.0;
  double lower = 0.0;  // 2.5%
  double upper = 0.0;  // 97.5%
};

struct PosteriorSummary {
  std::vector<int> dims;
  int G = 0, p = 0, q = 0;
  int n_records = 0;
  std::vector<FieldMatrix> mean_beta;   // G of p x q
  Eigen::MatrixXd mean_norm;            // G x p
  Eigen::MatrixXd inclusion_prob;       // G x p
  Eigen::VectorXd f_norm_mean;          // p
  Eigen::VectorXd f_prob;               // p, fraction of records with ||F|| > 0
  std::vector<std::optional<double>> psi_mean;
  std::vector<ScalarInterval> intercepts;
  std::vector<ScalarInterval> covariates;
  ScalarInterval sigma2;
  Eigen::VectorXd b0_mean;
  Eigen::VectorXd b_cov_mean;
};

/// Linear-interpolation percentile of unsorted values (prob in [0,1]):
/// with sorted x and h = (N-1) prob, x[floor h] + frac(h) (x[floor h + 1] - x[floor h]).
inline double percentile(std::vector<double> values, double prob) {
  require(!values.empty(), "percentile of an empty sample");
  require(prob >= 0.0 && prob <= 1.0, "percentile: prob must be in [0,1]");
  std::sort(values.begin(), values.end());
  const double h = prob * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= values.size()) return values.back();
  return values[lo] + (h - static_cast<double>(lo)) * (values[lo + 1] - values[lo]);
}

inline ScalarInterval interval_of(std::string name, const std::vector<double>& draws) {
  ScalarInterval out;
  out.name = std::move(name);
  double sum = 0.0;
  for (double v : draws) sum += v;
  out.mean = sum / static_cast<double>(draws.size());
  out.lower = percentile(draws, 0.025);
  out.upper = percentile(draws, 0.975);
  return out;
}

/// Single-pass accumulator over saved records.
class PosteriorAccumulator {
 public:
  PosteriorAccumulator(const LowRankBasis& basis, std::vector<int> dims,
                       std::vector<std::string> covariate_names = {})
      : basis_(&basis), dims_(std::move(dims)), covariate_names_(std::move(covariate_names)) {}

  void add(const ChainRecord& rec) { add(rec.state, materialize_coefficients(rec.state, *basis_)); }

  void add(const ModelState& s, const CoefficientField& field) {
    const int G = field.G();
    const int p = field.p();
    const int q = static_cast<int>(field.f_values.cols());
    if (n_ == 0) {
      G_ = G;
      p_ = p;
      q_ = q;
      sum_beta_.assign(static_cast<std::size_t>(G), FieldMatrix::Zero(p, q));
      sum_norm_ = Eigen::MatrixXd::Zero(G, p);
      count_nz_ = Eigen::MatrixXd::Zero(G, p);
      sum_f_norm_ = Eigen::VectorXd::Zero(p);
      count_f_ = Eigen::VectorXd::Zero(p);
      sum_psi_.assign(static_cast<std::size_t>(p), 0.0);
      count_psi_.assign(static_cast<std::size_t>(p), 0);
      b0_draws_.assign(static_cast<std::size_t>(G), {});
      cov_draws_.assign(static_cast<std::size_t>(s.b_cov.size()), {});
    }
    require_shape(G == G_ && p == p_ && q == q_ && s.b_cov.size() == static_cast<Eigen::Index>(cov_draws_.size()),
                  "summary: record shape differs from earlier records");
    for (int g = 0; g < G; ++g) {
      const auto gi = static_cast<std::size_t>(g);
      sum_beta_[gi] += field.beta[gi];
      for (int j = 0; j < p; ++j) {
        const double nrm = field.norms(g, j);
        sum_norm_(g, j) += nrm;
        if (nrm > 0.0) count_nz_(g, j) += 1.0;
      }
      b0_draws_[gi].push_back(s.b0(g));
    }
    for (int j = 0; j < p; ++j) {
      const double fn = field.f_values.row(j).norm();
      sum_f_norm_(j) += fn;
      if (fn > 0.0) count_f_(j) += 1.0;
      const auto& psi = field.psi[static_cast<std::size_t>(j)];
      if (psi) {
        sum_psi_[static_cast<std::size_t>(j)] += *psi;
        ++count_psi_[static_cast<std::size_t>(j)];
      }
    }
    for (std::size_t k = 0; k < cov_draws_.size(); ++k)
      cov_draws_[k].push_back(s.b_cov(static_cast<Eigen::Index>(k)));
    sigma2_draws_.push_back(s.sigma2);
    ++n_;
  }

  int count() const { return n_; }

  PosteriorSummary finalize() const {
    if (n_ == 0) throw std::invalid_argument("summary: chain has no saved records");
    const double n = static_cast<double>(n_);
    PosteriorSummary out;
    out.dims = dims_;
    out.G = G_;
    out.p = p_;
    out.q = q_;
    out.n_records = n_;
    for (const auto& b : sum_beta_) out.mean_beta.push_back(b / n);
    out.mean_norm = sum_norm_ / n;
    out.inclusion_prob = count_nz_ / n;
    out.f_norm_mean = sum_f_norm_ / n;
    out.f_prob = count_f_ / n;
    for (int j = 0; j < p_; ++j) {
      const auto ji = static_cast<std::size_t>(j);
      if (count_psi_[ji] > 0) out.psi_mean.emplace_back(sum_psi_[ji] / count_psi_[ji]);
      else out.psi_mean.emplace_back(std::nullopt);
    }
    out.b0_mean.resize(G_);
    for (int g = 0; g < G_; ++g) {
      out.intercepts.push_back(interval_of("b0_" + std::to_string(g + 1), b0_draws_[static_cast<std::size_t>(g)]));
      out.b0_mean(g) = out.intercepts.back().mean;
    }
    out.b_cov_mean.resize(static_cast<Eigen::Index>(cov_draws_.size()));
    for (std::size_t k = 0; k < cov_draws_.size(); ++k) {
      const std::string name =
          k < covariate_names_.size() ? covariate_names_[k] : "x" + std::to_string(k + 1);
      out.covariates.push_back(interval_of(name, cov_draws_[k]));
      out.b_cov_mean(static_cast<Eigen::Index>(k)) = out.covariates.back().mean;
    }
    out.sigma2 = interval_of("sigma2", sigma2_draws_);
    return out;
  }

 private:
  const LowRankBasis* basis_;
  std::vector<int> dims_;
  std::vector<std::string> covariate_names_;
  int n_ = 0, G_ = 0, p_ = 0, q_ = 0;
  std::vector<FieldMatrix> sum_beta_;
  Eigen::MatrixXd sum_norm_, count_nz_;
  Eigen::VectorXd sum_f_norm_, count_f_;
  std::vector<double> sum_psi_;
  std::vector<int> count_psi_;
  std::vector<std::vector<double>> b0_draws_;
  std::vector<std::vector<double>> cov_draws_;
  std::vector<double> sigma2_draws_;
};

inline PosteriorSummary summarize(std::span<const ChainRecord> chain, const LowRankBasis& basis,
                                  std::vector<int> dims, std::vector<std::string> covariate_names = {}) {
  if (chain.empty()) throw std::invalid_argument("summary: chain has no saved records");
  PosteriorAccumulator acc(basis, std::move(dims), std::move(covariate_names));
  for (const auto& rec : chain) acc.add(rec);
  return acc.finalize();
}

/// (1/(G p)) sum_{g,j} ||est_g(j) - truth_g(j)||^2
inline double mse_coefficients(const std::vector<FieldMatrix>& est, const std::vector<FieldMatrix>& truth) {
  require_shape(est.size() == truth.size() && !est.empty(), "mse: group count");
  double total = 0.0;
  for (std::size_t g = 0; g < est.size(); ++g) {
    require_shape(est[g].rows() == truth[g].rows() && est[g].cols() == truth[g].cols(), "mse: field shape");
    total += (est[g] - truth[g]).squaredNorm();
  }
  return total / (static_cast<double>(est.size()) * static_cast<double>(est.front().rows()));
}

inline double mse_coefficients(const PosteriorSummary& summary, const SimTruth& truth) {
  return mse_coefficients(summary.mean_beta, truth.beta0);
}

struct SelectionRates {
  double tpr = 0.0;  // NaN when the group has no true nonzeros
  double fpr = 0.0;  // NaN when the group has no true zeros
  int positives = 0;
  int negatives = 0;
};

inline std::vector<SelectionRates> selection_metrics(const Eigen::MatrixXd& inclusion_prob,
                                                     const SimTruth& truth, double prob_threshold) {
  require(prob_threshold > 0.0 && prob_threshold < 1.0, "selection: threshold must be in (0,1)");
  require_shape(inclusion_prob.rows() == truth.G(), "selection: group count");
  std::vector<SelectionRates> out;
  for (int g = 0; g < truth.G(); ++g) {
    const FieldMatrix& b0 = truth.beta0[static_cast<std::size_t>(g)];
    require_shape(inclusion_prob.cols() == b0.rows(), "selection: voxel count");
    int tp = 0, fp = 0;
    SelectionRates r;
    for (Eigen::Index j = 0; j < b0.rows(); ++j) {
      const bool truly = b0.row(j).norm() > 0.0;
      const bool chosen = inclusion_prob(g, j) > prob_threshold;
      if (truly) {
        ++r.positives;
        tp += chosen;
      } else {
        ++r.negatives;
        fp += chosen;
      }
    }
    constexpr double nan = std::numeric_limits<double>::quiet_NaN();
    r.tpr = r.positives > 0 ? static_cast<double>(tp) / r.positives : nan;
    r.fpr = r.negatives > 0 ? static_cast<double>(fp) / r.negatives : nan;
    out.push_back(r);
  }
  return out;
}

inline std::vector<SelectionRates> selection_metrics(const PosteriorSummary& summary, const SimTruth& truth,
                                                     double prob_threshold = 0.5) {
  return selection_metrics(summary.inclusion_prob, truth, prob_threshold);
}

/// Voxels flagged as similar-effect locations: P(||F|| > 0) > threshold.
inline std::vector<bool> similar_effect_mask(const PosteriorSummary& summary, double prob_threshold = 0.5) {
  require(prob_threshold > 0.0 && prob_threshold < 1.0, "mask: threshold must be in (0,1)");
  std::vector<bool> mask(static_cast<std::size_t>(summary.p));
  for (int j = 0; j < summary.p; ++j) mask[static_cast<std::size_t>(j)] = summary.f_prob(j) > prob_threshold;
  return mask;
}

struct PredictionError {
  std::vector<double> per_group;  // NaN for groups without held-out subjects
  double pooled = 0.0;
};

/// Held-out MSE of the plug-in mean b0_g + X b_cov + p^{-1/2} <D_i, beta_g>
/// at posterior-mean parameters.
inline PredictionError oos_prediction_mse(const PosteriorSummary& summary, const VectorImageDataset& heldout) {
  heldout.validate();
  if (heldout.grid.dims != summary.dims || heldout.q != summary.q)
    throw ShapeError("prediction: held-out grid does not match the training grid");
  require_shape(heldout.G == summary.G, "prediction: group count");
  require_shape(heldout.c() == summary.b_cov_mean.size(), "prediction: covariate count");
  const double s = image_scale(summary.p);
  const Eigen::Index pq = static_cast<Eigen::Index>(summary.p) * summary.q;
  std::vector<double> sse(static_cast<std::size_t>(summary.G), 0.0);
  std::vector<int> count(static_cast<std::size_t>(summary.G), 0);
  double total = 0.0;
  for (int i = 0; i < heldout.n(); ++i) {
    const int g = heldout.group_of[static_cast<std::size_t>(i)];
    const FieldMatrix& beta = summary.mean_beta[static_cast<std::size_t>(g)];
    const Eigen::Map<const Eigen::RowVectorXd> b(beta.data(), pq);
    double mu = summary.b0_mean(g) + s * heldout.D.row(i).dot(b);
    if (heldout.c() > 0) mu += heldout.X.row(i).dot(summary.b_cov_mean);
    const double e = heldout.y(i) - mu;
    sse[static_cast<std::size_t>(g)] += e * e;
    ++count[static_cast<std::size_t>(g)];
    total += e * e;
  }
  PredictionError out;
  for (std::size_t g = 0; g < sse.size(); ++g)
    out.per_group.push_back(count[g] > 0 ? sse[g] / count[g] : std::numeric_limits<double>::quiet_NaN());
  out.pooled = heldout.n() > 0 ? total / heldout.n() : std::numeric_limits<double>::quiet_NaN();
  return out;
}

}  // namespace st2n
