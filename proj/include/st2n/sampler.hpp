#pragma once

// Posterior sampler. One iteration updates, in this order:
//   HMC on the shared knot field, HMC on each group knot field,
//   MH on a and each a_g, MH on lambda and each lambda_g,
//   Gibbs on sigma2, on the intercepts/covariate effects, and on Sigma.
//
// HMC runs in whitened coordinates Z with C = L_K Z L_Sigma^T, i.e. with the
// GP prior covariance as inverse mass matrix. The Metropolis correction is on
// the Hamiltonian of the block.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <algorithm>
#include <functional>
#include <memory>
#include <limits>
#include <string>
#include <vector>

#include "st2n/errors.hpp"
#include "st2n/latent_field.hpp"
#include "st2n/model.hpp"
#include "st2n/random.hpp"

namespace st2n {

struct SamplerConfig {
  int n_iter = 10000;
  int n_burnin = 5000;
  int thin = 1;
  int leapfrog_steps = 30;
  double hmc_step_init = 0.1;
  double target_accept = 0.65;
  double mh_scale_a = 0.2;
  double mh_scale_lambda = 0.25;
  double mh_target_accept = 0.35;
  int adapt_interval = 100;
  double step_jitter = 0.1;        // step drawn uniformly in step*(1 +- jitter)
  double max_energy_error = 1000.0;
  bool initial_step_search = true;  // per-block step search before burn-in
  std::uint64_t seed = 1;
  Hyper hyper;
  bool likelihood_enabled = true;

  void validate() const {
    require(n_iter >= 1, "config: n_iter must be >= 1");
    require(n_burnin >= 0 && n_burnin < n_iter, "config: need 0 <= n_burnin < n_iter");
    require(thin >= 1, "config: thin must be >= 1");
    require(leapfrog_steps >= 1, "config: leapfrog_steps must be >= 1");
    require(hmc_step_init > 0.0, "config: hmc_step_init must be positive");
    require(target_accept > 0.0 && target_accept < 1.0, "config: target_accept in (0,1)");
    require(mh_target_accept > 0.0 && mh_target_accept < 1.0, "config: mh_target_accept in (0,1)");
    require(mh_scale_a > 0.0 && mh_scale_lambda > 0.0, "config: MH scales must be positive");
    require(adapt_interval >= 1, "config: adapt_interval must be >= 1");
    require(step_jitter >= 0.0 && step_jitter < 1.0, "config: step_jitter in [0,1)");
    require(hyper.R > 0.0, "config: R must be positive");
    require(hyper.c1 > 0.0 && hyper.c2 > 0.0 && hyper.d1 > 0.0 && hyper.d2 > 0.0,
            "config: gamma hyperparameters must be positive");
    require(hyper.sigma_b2 > 0.0, "config: sigma_b2 must be positive");
  }
};

/// Acceptance flag layout of a ChainRecord.
struct FlagLayout {
  int G = 1;
  int size() const { return 3 * (G + 1); }
  int hmc(int block) const { return block == kSharedBlock ? 0 : 1 + block; }
  int a(int block) const { return block == kSharedBlock ? 1 + G : 2 + G + block; }
  int lambda(int block) const { return block == kSharedBlock ? 2 + 2 * G : 3 + 2 * G + block; }
};

struct ChainRecord {
  int iteration = 0;
  ModelState state;
  double log_posterior = 0.0;
  std::vector<std::uint8_t> accepted;  // see FlagLayout
};

// ---- Conjugate full conditionals ------------------------------------------

struct GammaParams {
  double shape = 0.0;
  double rate = 0.0;
};

struct NormalParams {
  double mean = 0.0;
  double var = 0.0;
};

struct MvNormalParams {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

struct InvWishartParams {
  double df = 0.0;
  Eigen::MatrixXd scale;
};

/// sigma^{-2} | rest ~ Ga(c1 + n/2, c2 + rss/2).
inline GammaParams sigma2_conditional(double rss, int n, double c1, double c2) {
  return {c1 + 0.5 * n, c2 + 0.5 * rss};
}

/// b0[g] | rest, from the sum of the n_g residuals that exclude b0[g].
inline NormalParams intercept_conditional(double resid_sum, int n_g, double sigma2,
                                          double sigma_b2) {
  const double precision = n_g / sigma2 + 1.0 / sigma_b2;
  return {(resid_sum / sigma2) / precision, 1.0 / precision};
}

/// b_cov | rest with residuals r that exclude X b_cov.
inline MvNormalParams covariate_conditional(const Eigen::MatrixXd& X, const Eigen::VectorXd& r,
                                            double sigma2, double sigma_b2) {
  const Eigen::Index c = X.cols();
  Eigen::MatrixXd precision = X.transpose() * X / sigma2;
  precision.diagonal().array() += 1.0 / sigma_b2;
  Eigen::LLT<Eigen::MatrixXd> llt(precision);
  MvNormalParams out;
  out.cov = llt.solve(Eigen::MatrixXd::Identity(c, c));
  out.mean = llt.solve(X.transpose() * r / sigma2);
  return out;
}

/// Sigma | knot fields ~ IW(nu + L(G+1), S + sum_f C_f^T K_f^{-1} C_f).
inline InvWishartParams sigma_mat_conditional(const ModelState& s, const PriorFactors& f,
                                              const Hyper& h) {
  const int q = s.q();
  Eigen::MatrixXd scatter = h.scale(q);
  auto add = [&](const FieldMatrix& c, const KernelFactor& k) {
    const Eigen::MatrixXd w = k.lower.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd(c));
    scatter += w.transpose() * w;
  };
  add(s.beta_shared_knots, f.shared);
  for (int g = 0; g < s.G(); ++g)
    add(s.alpha_knots[static_cast<std::size_t>(g)], f.group[static_cast<std::size_t>(g)]);
  return {h.nu + static_cast<double>(s.L()) * (s.G() + 1), 0.5 * (scatter + scatter.transpose())};
}

/// Reflects x into [0, R].
inline double reflect(double x, double R) {
  const double period = 2.0 * R;
  double y = std::fmod(x, period);
  if (y < 0.0) y += period;
  return y > R ? period - y : y;
}

/// Standard leapfrog for a log-target with gradient. `grad_fn(position,
/// grad_out)` returns the log-target. Returns the log-target at the end point
/// and leaves the end gradient in `grad`; stops early and returns NaN when
/// the trajectory goes non-finite.
template <class GradFn>
double leapfrog(FieldMatrix& position, FieldMatrix& momentum, FieldMatrix& grad, double step,
                int n_steps, GradFn&& grad_fn) {
  double value = std::numeric_limits<double>::quiet_NaN();
  momentum += 0.5 * step * grad;
  for (int k = 0; k < n_steps; ++k) {
    position += step * momentum;
    value = grad_fn(position, grad);
    if (!std::isfinite(value) || !grad.allFinite()) return std::numeric_limits<double>::quiet_NaN();
    momentum += (k + 1 < n_steps ? 1.0 : 0.5) * step * grad;
  }
  return value;
}

/// Kernel scale at which knots one spacing apart have correlation 1/2.
inline double initial_kernel_scale(const KnotSet& knots) {
  int widest = 1;
  for (int k : knots.per_dim) widest = std::max(widest, k);
  const double spacing = widest > 1 ? 1.0 / (widest - 1) : 1.0;
  return std::sqrt(std::log(2.0)) / spacing;
}

inline ModelState initial_state(const VectorImageDataset& data, const LowRankBasis& basis,
                                const SamplerConfig& cfg, Rng& rng) {
  const int L = basis.L();
  const int q = data.q;
  const int G = data.G;
  ModelState s;
  s.beta_shared_knots.resize(L, q);
  fill_normal(s.beta_shared_knots, rng);
  s.beta_shared_knots *= 0.1;
  for (int g = 0; g < G; ++g) {
    FieldMatrix a(L, q);
    fill_normal(a, rng);
    s.alpha_knots.push_back(0.1 * a);
  }
  // Start with no thresholding so the likelihood gradient reaches every voxel,
  // and with neighbouring knots correlated at 1/2.
  const double a0 = initial_kernel_scale(basis.knots);
  s.a_shared = a0;
  s.a_group.assign(static_cast<std::size_t>(G), a0);
  s.thresholds.lambda_shared = 0.0;
  s.thresholds.lambda_group.assign(static_cast<std::size_t>(G), 0.0);
  s.Sigma = cfg.hyper.scale(q);
  const int n = data.n();
  double var = 1.0;
  if (n >= 2) {
    const double mean = data.y.mean();
    var = (data.y.array() - mean).square().sum() / (n - 1);
    if (!(var > 0.0)) var = 1.0;
  }
  s.sigma2 = var;
  s.b0 = Eigen::VectorXd::Zero(G);
  const auto sizes = data.group_sizes();
  for (int i = 0; i < n; ++i) s.b0(data.group_of[static_cast<std::size_t>(i)]) += data.y(i);
  for (int g = 0; g < G; ++g) s.b0(g) /= std::max(1, sizes[static_cast<std::size_t>(g)]);
  s.b_cov = Eigen::VectorXd::Zero(data.c());
  return s;
}

enum class ScalarParam { KernelScale, Threshold };

class Sampler {
 public:
  Sampler(const LogPosterior& post, SamplerConfig cfg, ModelState init)
      : post_(&post), cfg_(std::move(cfg)), state_(std::move(init)), rng_(cfg_.seed),
        layout_{post.G()} {
    cfg_.validate();
    validate_state(state_, cfg_.hyper.R);
    require_shape(state_.L() == post.basis().L() && state_.q() == post.data().q &&
                      state_.G() == post.G() && state_.b_cov.size() == post.data().c(),
                  "sampler: initial state does not match dataset/basis");
    const int G = post.G();
    steps_.assign(static_cast<std::size_t>(G + 1), cfg_.hmc_step_init);
    a_scales_.assign(static_cast<std::size_t>(G + 1), cfg_.mh_scale_a);
    lambda_scales_.assign(static_cast<std::size_t>(G + 1), cfg_.mh_scale_lambda);
    window_.assign(static_cast<std::size_t>(layout_.size()), 0);
    post_accept_.assign(static_cast<std::size_t>(layout_.size()), 0);
    factors_ = std::make_unique<PriorFactors>(make_prior_factors(state_, post.basis().knots));
    latents_ = expand_latents(state_, post.basis());
  }

  const ModelState& state() const { return state_; }
  const SamplerConfig& config() const { return cfg_; }
  const PriorFactors& factors() const { return *factors_; }
  Rng& rng() { return rng_; }
  double step_size(int block) const { return steps_[slot(block)]; }
  void set_step_size(int block, double step) { steps_[slot(block)] = step; }

  /// Post-burn-in acceptance rate of one flag slot.
  double acceptance_rate(int flag) const {
    return saved_iters_ > 0 ? static_cast<double>(post_accept_[static_cast<std::size_t>(flag)]) /
                                  saved_iters_
                            : 0.0;
  }
  const FlagLayout& layout() const { return layout_; }

  double log_posterior() const {
    return post_->log_likelihood(state_, latents_) + gp_priors() + post_->log_scalar_prior(state_);
  }

  /// One HMC trajectory on a knot block.
  bool hmc_update_block(int block, double step, int n_leapfrog) {
    require(step > 0.0, "hmc: step must be positive");
    const FieldMatrix coeffs0 = coeffs_for(block);
    const FieldMatrix latent0 = latent_for(block);
    const double jitter = 2.0 * std::uniform_real_distribution<double>(0.0, 1.0)(rng_) - 1.0;
    const double log_ratio = trajectory(block, step * (1.0 + cfg_.step_jitter * jitter), n_leapfrog);
    const double log_u = std::log(uniform_open(rng_));
    const bool ok = std::isfinite(log_ratio) && -log_ratio <= cfg_.max_energy_error && log_u < log_ratio;
    if (!ok) {
      coeffs_for(block) = coeffs0;
      latent_for(block) = latent0;
    }
    return ok;
  }

  /// Doubles or halves the block's step until the acceptance probability of
  /// a single trajectory crosses 1/2. State is left unchanged.
  double find_initial_step(int block) {
    const FieldMatrix coeffs0 = coeffs_for(block);
    const FieldMatrix latent0 = latent_for(block);
    auto accept_prob_high = [&](double eps) {
      const double lr = trajectory(block, eps, cfg_.leapfrog_steps);
      coeffs_for(block) = coeffs0;
      latent_for(block) = latent0;
      return std::isfinite(lr) && lr > std::log(0.5);
    };
    double eps = steps_[slot(block)];
    const bool grow = accept_prob_high(eps);
    for (int k = 0; k < 40; ++k) {
      const double next = grow ? 2.0 * eps : 0.5 * eps;
      const bool high = accept_prob_high(next);
      if (grow && !high) break;
      eps = next;
      if (!grow && high) break;
    }
    steps_[slot(block)] = eps;
    return eps;
  }

  /// Random-walk MH on a/a_g (log scale) or lambda/lambda_g (reflected).
  bool mh_update_scalar(ScalarParam param, int block, double scale) {
    require(scale > 0.0, "mh: scale must be positive");
    if (param == ScalarParam::KernelScale) return mh_kernel_scale(block, scale);
    return mh_threshold(block, scale);
  }

  void gibbs_sigma2() {
    double rss = 0.0;
    int n = 0;
    if (post_->likelihood_enabled()) {
      for (int g = 0; g < post_->G(); ++g) {
        const FieldMatrix beta = post_->beta_for(g, state_, latents_);
        rss += (post_->group_y(g) - post_->group_offset(g, state_) -
                post_->group_image_term(g, beta))
                   .squaredNorm();
        n += post_->n_group(g);
      }
    }
    const auto par = sigma2_conditional(rss, n, cfg_.hyper.c1, cfg_.hyper.c2);
    state_.sigma2 = 1.0 / gamma_draw(rng_, par.shape, par.rate);
  }

  void gibbs_intercepts_covariates() {
    const int G = post_->G();
    const bool lik = post_->likelihood_enabled();
    std::vector<Eigen::VectorXd> image(static_cast<std::size_t>(G));
    for (int g = 0; g < G; ++g)
      image[static_cast<std::size_t>(g)] =
          post_->group_image_term(g, post_->beta_for(g, state_, latents_));
    for (int g = 0; g < G; ++g) {
      double resid_sum = 0.0;
      int n_g = 0;
      if (lik) {
        Eigen::VectorXd r = post_->group_y(g) - image[static_cast<std::size_t>(g)];
        if (post_->group_X(g).cols() > 0) r -= post_->group_X(g) * state_.b_cov;
        resid_sum = r.sum();
        n_g = post_->n_group(g);
      }
      const auto par = intercept_conditional(resid_sum, n_g, state_.sigma2, cfg_.hyper.sigma_b2);
      state_.b0(g) = par.mean + std::sqrt(par.var) * std_normal(rng_);
    }
    const int c = post_->data().c();
    if (c == 0) return;
    Eigen::MatrixXd X(0, c);
    Eigen::VectorXd r(0);
    if (lik) {
      const int n = post_->data().n();
      X.resize(n, c);
      r.resize(n);
      Eigen::Index row = 0;
      for (int g = 0; g < G; ++g) {
        const auto m = post_->n_group(g);
        X.middleRows(row, m) = post_->group_X(g);
        r.segment(row, m) = post_->group_y(g) - image[static_cast<std::size_t>(g)] -
                            Eigen::VectorXd::Constant(m, state_.b0(g));
        row += m;
      }
    }
    const auto par = covariate_conditional(X, r, state_.sigma2, cfg_.hyper.sigma_b2);
    Eigen::LLT<Eigen::MatrixXd> llt(par.cov);
    Eigen::VectorXd z(c);
    fill_normal(z, rng_);
    state_.b_cov = par.mean + Eigen::MatrixXd(llt.matrixL()) * z;
  }

  void gibbs_sigma_mat() {
    const auto par = sigma_mat_conditional(state_, *factors_, cfg_.hyper);
    state_.Sigma = inverse_wishart_draw(rng_, par.df, par.scale);
    factors_->sigma = CovFactor(state_.Sigma);
  }

  /// One full sweep. Flags follow FlagLayout.
  std::vector<std::uint8_t> iterate(int iteration) {
    const int G = post_->G();
    std::vector<std::uint8_t> flags(static_cast<std::size_t>(layout_.size()), 0);
    for (int b = kSharedBlock; b < G; ++b)
      flags[static_cast<std::size_t>(layout_.hmc(b))] =
          hmc_update_block(b, steps_[slot(b)], cfg_.leapfrog_steps);
    for (int b = kSharedBlock; b < G; ++b)
      flags[static_cast<std::size_t>(layout_.a(b))] =
          mh_update_scalar(ScalarParam::KernelScale, b, a_scales_[slot(b)]);
    for (int b = kSharedBlock; b < G; ++b)
      flags[static_cast<std::size_t>(layout_.lambda(b))] =
          mh_update_scalar(ScalarParam::Threshold, b, lambda_scales_[slot(b)]);
    gibbs_sigma2();
    gibbs_intercepts_covariates();
    gibbs_sigma_mat();

    for (std::size_t k = 0; k < flags.size(); ++k) window_[k] += flags[k];
    if (iteration < cfg_.n_burnin && (iteration + 1) % cfg_.adapt_interval == 0) adapt();
    if (iteration >= cfg_.n_burnin) {
      ++saved_iters_;
      for (std::size_t k = 0; k < flags.size(); ++k) post_accept_[k] += flags[k];
    }
    return flags;
  }

  /// Runs the configured schedule; `sink(const ChainRecord&)` receives every
  /// saved record.
  template <class Sink>
  void run(Sink&& sink) {
    if (cfg_.initial_step_search && cfg_.n_burnin > 0)
      for (int b = kSharedBlock; b < post_->G(); ++b) find_initial_step(b);
    for (int it = 0; it < cfg_.n_iter; ++it) {
      auto flags = iterate(it);
      if (it >= cfg_.n_burnin && (it - cfg_.n_burnin) % cfg_.thin == 0) {
        ChainRecord rec;
        rec.iteration = it;
        rec.state = state_;
        rec.log_posterior = log_posterior();
        rec.accepted = std::move(flags);
        sink(static_cast<const ChainRecord&>(rec));
      }
    }
  }

 private:
  std::size_t slot(int block) const { return static_cast<std::size_t>(block + 1); }

  FieldMatrix& coeffs_for(int block) {
    return block == kSharedBlock ? state_.beta_shared_knots
                                 : state_.alpha_knots[static_cast<std::size_t>(block)];
  }
  FieldMatrix& latent_for(int block) {
    return block == kSharedBlock ? latents_.shared : latents_.group[static_cast<std::size_t>(block)];
  }
  KernelFactor& kernel_for(int block) {
    return block == kSharedBlock ? factors_->shared : factors_->group[static_cast<std::size_t>(block)];
  }
  double& a_for(int block) {
    return block == kSharedBlock ? state_.a_shared : state_.a_group[static_cast<std::size_t>(block)];
  }
  double& lambda_for(int block) {
    return block == kSharedBlock ? state_.thresholds.lambda_shared
                                 : state_.thresholds.lambda_group[static_cast<std::size_t>(block)];
  }

  /// Runs a leapfrog trajectory from fresh momentum in whitened coordinates
  /// and leaves the end point in the state. Returns H(start) - H(end), NaN on
  /// divergence.
  double trajectory(int block, double eps, int n_leapfrog) {
    const KernelFactor& kernel = kernel_for(block);
    const CovFactor& sigma = factors_->sigma;
    FieldMatrix& coeffs = coeffs_for(block);
    FieldMatrix& latent = latent_for(block);
    auto target = [&](const FieldMatrix& z, FieldMatrix& grad_z) {
      coeffs = colour_field(z, kernel, sigma);
      latent = expand_field(post_->basis().basis, coeffs);
      FieldMatrix grad_c;
      const double v = post_->block_log_target(block, state_, *factors_, latents_, &grad_c);
      grad_z = whiten_gradient(grad_c, kernel, sigma);
      return v;
    };
    FieldMatrix z = whiten_field(coeffs, kernel, sigma);
    FieldMatrix momentum(z.rows(), z.cols());
    fill_normal(momentum, rng_);
    FieldMatrix grad;
    const double v0 = target(z, grad);
    const double h0 = -v0 + 0.5 * momentum.squaredNorm();
    const double v1 = leapfrog(z, momentum, grad, eps, n_leapfrog, target);
    const double h1 = -v1 + 0.5 * momentum.squaredNorm();
    return h0 - h1;
  }

  double gp_priors() const {
    double v = gp_log_prior(state_.beta_shared_knots, factors_->shared, factors_->sigma).value;
    for (int g = 0; g < state_.G(); ++g)
      v += gp_log_prior(state_.alpha_knots[static_cast<std::size_t>(g)],
                        factors_->group[static_cast<std::size_t>(g)], factors_->sigma)
               .value;
    return v;
  }

  bool mh_kernel_scale(int block, double scale) {
    const int d = post_->data().grid.d();
    const Hyper& h = cfg_.hyper;
    double& a = a_for(block);
    const FieldMatrix& coeffs = coeffs_for(block);
    const double a_new = std::exp(std::log(a) + scale * std_normal(rng_));
    const double log_u = std::log(uniform_open(rng_));
    if (!(a_new > 0.0) || !std::isfinite(a_new)) return false;
    KernelFactor proposed;
    try {
      proposed = kernel_matrix_adaptive(post_->basis().knots, a_new);
    } catch (const DecompositionError&) {
      return false;
    }
    // Target on log a: prior density of a times the log-transform Jacobian a.
    auto log_target = [&](double av, const KernelFactor& k) {
      return prior::log_kernel_scale(av, d, h.d1, h.d2) + std::log(av) +
             gp_log_prior(coeffs, k, factors_->sigma).value;
    };
    const double diff = log_target(a_new, proposed) - log_target(a, kernel_for(block));
    if (std::isfinite(diff) && log_u < diff) {
      a = a_new;
      kernel_for(block) = std::move(proposed);
      return true;
    }
    return false;
  }

  bool mh_threshold(int block, double scale) {
    double& lambda = lambda_for(block);
    const double old = lambda;
    const double proposed = reflect(old + scale * std_normal(rng_), cfg_.hyper.R);
    const double log_u = std::log(uniform_open(rng_));
    if (!post_->likelihood_enabled()) {
      lambda = proposed;
      return true;
    }
    auto loglik = [&]() {
      if (block != kSharedBlock)
        return post_->group_log_likelihood(block, post_->beta_for(block, state_, latents_), state_);
      return post_->log_likelihood(state_, latents_);
    };
    const double before = loglik();
    lambda = proposed;
    const double after = loglik();
    const double diff = after - before;
    if (std::isfinite(diff) && log_u < diff) return true;
    lambda = old;
    return false;
  }

  void adapt() {
    const double interval = static_cast<double>(cfg_.adapt_interval);
    auto tune = [&](double& value, int flag, double target) {
      const double rate = window_[static_cast<std::size_t>(flag)] / interval;
      if (rate > target + 0.1) value *= 1.1;
      else if (rate < target - 0.1) value /= 1.1;
    };
    for (int b = kSharedBlock; b < post_->G(); ++b) {
      tune(steps_[slot(b)], layout_.hmc(b), cfg_.target_accept);
      tune(a_scales_[slot(b)], layout_.a(b), cfg_.mh_target_accept);
      tune(lambda_scales_[slot(b)], layout_.lambda(b), cfg_.mh_target_accept);
    }
    std::fill(window_.begin(), window_.end(), 0);
  }

  const LogPosterior* post_;
  SamplerConfig cfg_;
  ModelState state_;
  Rng rng_;
  FlagLayout layout_;
  std::unique_ptr<PriorFactors> factors_;
  LatentVoxels latents_;
  std::vector<double> steps_;
  std::vector<double> a_scales_;
  std::vector<double> lambda_scales_;
  std::vector<int> window_;
  std::vector<long> post_accept_;
  long saved_iters_ = 0;
};

/// Runs one chain from `init`; deterministic given cfg.seed.
template <class Sink>
void run_chain(const SamplerConfig& cfg, const VectorImageDataset& data, const LowRankBasis& basis,
               const ModelState& init, Sink&& sink) {
  cfg.validate();
  const LogPosterior post(data, basis, cfg.hyper, cfg.likelihood_enabled);
  Sampler sampler(post, cfg, init);
  sampler.run(std::forward<Sink>(sink));
}

/// Initial state drawn from a seed stream separate from the sampler's.
inline ModelState initial_state(const VectorImageDataset& data, const LowRankBasis& basis,
                                const SamplerConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, 0x1417));
  return initial_state(data, basis, cfg, rng);
}

}  // namespace st2n
