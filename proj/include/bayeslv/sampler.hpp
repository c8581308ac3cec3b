#pragma once

#include <atomic>
#include <functional>
#include <memory>
#include <optional>
#include <utility>
#include <vector>

#include "bayeslv/covariance.hpp"
#include "bayeslv/dupire.hpp"
#include "bayeslv/gp.hpp"
#include "bayeslv/kernels.hpp"

namespace bayeslv {

// Hyperparameter state. The latent xi vector lives in the scaled-sigmoid
// domain; layout [l_T, l_K, (l_t,) signal_sd, mean_level, noise_sd].
struct HyperState {
  KernelSpec kernel;
  double mean_level = 0.0;
  double noise_sd = 0.1;
  VectorXd xi;

  int n_kappa() const { return kernel.length_scale_t ? 4 : 3; }
  int dim() const { return n_kappa() + 2; }
};

inline HyperState hyper_from_xi(const VectorXd& xi, const HyperpriorSpec& bounds,
                                KernelFamily family, bool time_augmented) {
  bounds.validate();
  const int n_kappa = time_augmented ? 4 : 3;
  if (xi.size() != n_kappa + 2)
    throw DataError("hyper_from_xi: xi length does not match parameter count");
  HyperState h;
  h.kernel.family = family;
  int k = 0;
  h.kernel.length_scale_T = ssg(xi(k++), bounds.length_scale_T);
  h.kernel.length_scale_K = ssg(xi(k++), bounds.length_scale_K);
  if (time_augmented) h.kernel.length_scale_t = ssg(xi(k++), bounds.length_scale_t);
  h.kernel.signal_sd = ssg(xi(k++), bounds.signal_sd);
  h.mean_level = ssg(xi(k++), bounds.mean_level);
  h.noise_sd = ssg(xi(k++), bounds.noise_sd);
  h.xi = xi;
  return h;
}

struct ChainConfig {
  int n_iterations = 5000;
  int burn_in = 1000;
  int thin = 1;
  int cheap_per_expensive = 3;     // latent updates per hyperparameter update
  double sdss_probability = 0.5;   // surrogate-data vs whitened kappa move
  double surrogate_scale = 0.1;    // S = scale * signal_sd^2 * I
  int max_shrink = 64;             // slice-shrink cap per elliptical step
  std::uint64_t seed = 1;

  void validate() const {
    if (burn_in >= n_iterations)
      throw DataError("ChainConfig: burn_in must be below n_iterations");
    if (thin < 1) throw DataError("ChainConfig: thin must be >= 1");
    if (cheap_per_expensive < 1)
      throw DataError("ChainConfig: cheap_per_expensive must be >= 1");
    if (!(sdss_probability >= 0.0 && sdss_probability <= 1.0))
      throw DataError("ChainConfig: sdss_probability must lie in [0,1]");
    if (!(surrogate_scale > 0.0)) throw DataError("ChainConfig: surrogate_scale > 0");
  }
};

struct SampleState {
  VectorXd latent;
  HyperState hyper;
  double log_lik = 0.0;
  double log_post = 0.0;
};

struct PosteriorSample {
  std::vector<SampleState> states;
  InputGrid grid;
  KernelFamily family = KernelFamily::SE;
  bool time_augmented = false;
  HyperpriorSpec hyperprior;
  ChainConfig config;
};

inline double log_likelihood_from_sse(double sse_value, int n_obs, double noise_sd) {
  return -sse_value / (2.0 * sqr(noise_sd)) -
         0.5 * n_obs * std::log(2.0 * M_PI * sqr(noise_sd));
}

/// Wraps one date's calibration data: maps a latent surface to the Gaussian
/// log-likelihood of the observed mid prices through the forward solver.
/// A failed solve yields -inf (the proposal is rejected) and is counted.
class CalibrationProblem {
 public:
  using PriceMap = std::function<MatrixXd(const MatrixXd& sigma)>;

  CalibrationProblem(MarketSnapshot snapshot, InputGrid grid, SolverConfig solver = {})
      : snapshot_(std::move(snapshot)),
        grid_(std::move(grid)),
        solver_(solver),
        solver_failures_(std::make_shared<std::atomic<long>>(0)) {}

  const MarketSnapshot& snapshot() const { return snapshot_; }
  const InputGrid& grid() const { return grid_; }
  const SolverConfig& solver() const { return solver_; }
  int n_obs() const { return static_cast<int>(grid_.market_index.size()); }

  MatrixXd sigma_of(const VectorXd& latent, double mean_level) const {
    MatrixXd sig(grid_.n_maturities(), grid_.n_strikes());
    for (int i = 0; i < grid_.n_maturities(); ++i)
      for (int j = 0; j < grid_.n_strikes(); ++j)
        sig(i, j) = std::exp(latent(grid_.node(i, j)) + mean_level);
    return sig;
  }

  MatrixXd price(const MatrixXd& sigma) const {
    if (price_map_) return price_map_(sigma);
    return solve_dupire(sigma, snapshot_.context, grid_, solver_).values;
  }

  double sse_of(const VectorXd& latent, double mean_level) const {
    if (grid_.market_index.empty()) return 0.0;  // no data: flat likelihood
    const MatrixXd prices = price(sigma_of(latent, mean_level));
    double total = 0.0;
    for (const auto& [qi, node] : grid_.market_index)
      total += sqr(prices(grid_.mat_of(node), grid_.strike_of(node)) -
                   snapshot_.quotes[qi].mid);
    return total;
  }

  double log_likelihood(const VectorXd& latent, double mean_level,
                        double noise_sd) const {
    try {
      return log_likelihood_from_sse(sse_of(latent, mean_level), n_obs(), noise_sd);
    } catch (const std::exception&) {
      ++*solver_failures_;
      return kNegInf;
    }
  }

  void set_price_map(PriceMap map) { price_map_ = std::move(map); }
  long solver_failures() const { return solver_failures_->load(); }

 private:
  MarketSnapshot snapshot_;
  InputGrid grid_;
  SolverConfig solver_;
  PriceMap price_map_;  // test hook; the forward solver when unset
  std::shared_ptr<std::atomic<long>> solver_failures_;
};

inline double log_std_normal(const VectorXd& x) {
  return -0.5 * x.squaredNorm() - 0.5 * x.size() * std::log(2.0 * M_PI);
}

/// Unnormalised log posterior: likelihood + zero-mean GP density of the
/// latent + standard-normal density of xi.
inline double log_joint(const CalibrationProblem& problem, const CovarianceOp& prior,
                        const VectorXd& latent, const HyperState& hyper) {
  const double lik = problem.log_likelihood(latent, hyper.mean_level, hyper.noise_sd);
  if (!std::isfinite(lik)) return kNegInf;
  return lik + prior.log_density(latent) + log_std_normal(hyper.xi);
}

// --- elliptical slice sampling ----------------------------------------------

struct EssResult {
  VectorXd state;
  double log_lik = 0.0;
  int n_evaluations = 0;
  bool shrink_capped = false;
};

/// One elliptical slice step for a zero-mean Gaussian prior. `prior_draw`
/// must be a fresh draw from that prior. Always terminates: the bracket
/// shrinks towards angle zero, which reproduces the current state; if the
/// shrink cap is hit the current state is returned and flagged.
inline EssResult ess_step(const VectorXd& current, double current_log_lik,
                          const VectorXd& prior_draw,
                          const std::function<double(const VectorXd&)>& log_lik,
                          Rng& rng, int max_shrink = 64) {
  EssResult out;
  const double threshold = current_log_lik + std::log(rng.uniform());
  double angle = rng.uniform(0.0, 2.0 * M_PI);
  double lo = angle - 2.0 * M_PI, hi = angle;
  for (int it = 0; it < max_shrink; ++it) {
    VectorXd proposal = current * std::cos(angle) + prior_draw * std::sin(angle);
    const double ll = log_lik(proposal);
    ++out.n_evaluations;
    if (ll > threshold) {
      out.state = std::move(proposal);
      out.log_lik = ll;
      return out;
    }
    (angle < 0.0 ? lo : hi) = angle;
    angle = rng.uniform(lo, hi);
  }
  out.state = current;
  out.log_lik = current_log_lik;
  out.shrink_capped = true;
  return out;
}

// --- blocked Gibbs updates ---------------------------------------------------

struct ChainState {
  VectorXd latent;
  HyperState hyper;
  std::shared_ptr<const CovarianceOp> prior;
  double log_lik = 0.0;
};

// Generic chain context: any log-likelihood of (latent, mean_level, noise_sd)
// paired with a prior builder. The single-date calibration and the joint
// multi-date reference sampler both drive the same updates through this.
struct ChainContext {
  std::function<double(const VectorXd&, double, double)> log_likelihood;
  std::function<std::shared_ptr<const CovarianceOp>(const KernelSpec&)> build_prior;
  Eigen::Index latent_dim = 0;
  HyperpriorSpec hyperprior;
  KernelFamily family = KernelFamily::SE;
  bool time_augmented = false;

  HyperState hyper_at(const VectorXd& xi) const {
    return hyper_from_xi(xi, hyperprior, family, time_augmented);
  }
};

inline ChainContext make_context(const CalibrationProblem& problem,
                                 const HyperpriorSpec& hyperprior, KernelFamily family,
                                 bool time_augmented = false,
                                 CovarianceMode mode = CovarianceMode::Kronecker) {
  ChainContext ctx;
  ctx.log_likelihood = [&problem](const VectorXd& f, double m, double s) {
    return problem.log_likelihood(f, m, s);
  };
  ctx.build_prior = [&problem, mode](const KernelSpec& spec) {
    return build_covariance(spec, problem.grid(), mode);
  };
  ctx.latent_dim = problem.grid().size();
  ctx.hyperprior = hyperprior;
  ctx.family = family;
  ctx.time_augmented = time_augmented;
  return ctx;
}

/// Elliptical slice update of the latent surface; hyperparameters fixed.
inline void latent_update(ChainState& state, const ChainContext& ctx, Rng& rng,
                          int max_shrink = 64) {
  const VectorXd draw = sample_prior(*state.prior, rng);
  const auto ll = [&](const VectorXd& f) {
    return ctx.log_likelihood(f, state.hyper.mean_level, state.hyper.noise_sd);
  };
  auto res = ess_step(state.latent, state.log_lik, draw, ll, rng, max_shrink);
  state.latent = std::move(res.state);
  state.log_lik = res.log_lik;
}

namespace detail {

inline bool same_vec(const VectorXd& a, const VectorXd& b) {
  return a.size() == b.size() && (a.array() == b.array()).all();
}

// Replace the kappa sub-block (leading n_kappa entries) of xi.
inline VectorXd with_kappa(const VectorXd& xi, const VectorXd& kappa_block) {
  VectorXd out = xi;
  out.head(kappa_block.size()) = kappa_block;
  return out;
}

struct KappaEvalCache {
  VectorXd xi_kappa;
  std::shared_ptr<const CovarianceOp> prior;
  VectorXd latent;
  HyperState hyper;
  bool valid = false;
};

}  // namespace detail

/// Whitened kappa update: holds nu = L^{-1} f fixed, proposes kappa through
/// its xi-coordinates by elliptical slice sampling against the likelihood of
/// f(kappa, nu) = L_kappa nu. The latent surface moves implicitly.
inline void whitened_kappa_update(ChainState& state, const ChainContext& ctx, Rng& rng,
                                  int max_shrink = 64) {
  const VectorXd whitened = state.prior->chol_solve(state.latent);
  const int n_kappa = state.hyper.n_kappa();

  detail::KappaEvalCache cache;
  const auto ll = [&](const VectorXd& xi_kappa) {
    const VectorXd xi = detail::with_kappa(state.hyper.xi, xi_kappa);
    HyperState hyper = ctx.hyper_at(xi);
    std::shared_ptr<const CovarianceOp> prior;
    try {
      prior = ctx.build_prior(hyper.kernel);
    } catch (const NumericalError&) {
      return kNegInf;
    }
    VectorXd latent = prior->chol_multiply(whitened);
    const double lik = ctx.log_likelihood(latent, hyper.mean_level, hyper.noise_sd);
    cache = {xi_kappa, std::move(prior), std::move(latent), std::move(hyper),
             std::isfinite(lik)};
    return lik;
  };

  const VectorXd current = state.hyper.xi.head(n_kappa);
  auto res = ess_step(current, state.log_lik, rng.normal_vector(n_kappa), ll, rng,
                      max_shrink);
  if (detail::same_vec(res.state, current)) return;  // shrink cap hit
  if (!cache.valid || !detail::same_vec(cache.xi_kappa, res.state)) {
    ll(res.state);  // repopulate the cache with the accepted point
    if (!cache.valid) return;
  }
  state.hyper = cache.hyper;
  state.prior = cache.prior;
  state.latent = cache.latent;
  state.log_lik = res.log_lik;
}

struct SdssDiagnostics {
  VectorXd surrogate;       // g
  VectorXd implied_white;   // eta
  double surrogate_var = 0.0;
};

/// Surrogate-data slice sampling update of kappa: conditions the latent on a
/// noisy copy g ~ N(f, S) with S = surrogate_var * I, holds
/// eta = R^{-1/2}(f - m_g) fixed, and targets
/// likelihood(f(kappa,eta,g)) * N(g | 0, K_kappa + S) * p(xi).
/// `surrogate_var` must not depend on the chain state, or the move loses the
/// prior as its invariant distribution.
inline void sdss_kappa_update(ChainState& state, const ChainContext& ctx,
                              double surrogate_var, Rng& rng, int max_shrink = 64,
                              SdssDiagnostics* diag = nullptr) {
  const int n_kappa = state.hyper.n_kappa();
  const double s = surrogate_var;

  const VectorXd noise = rng.normal_vector(state.latent.size());
  const VectorXd surrogate = state.latent + std::sqrt(s) * noise;
  const VectorXd cond_mean = state.prior->sdss_mean(s, surrogate);
  const VectorXd eta = state.prior->sdss_sqrt_solve(s, state.latent - cond_mean);

  detail::KappaEvalCache cache;
  const auto ll = [&](const VectorXd& xi_kappa) {
    const VectorXd xi = detail::with_kappa(state.hyper.xi, xi_kappa);
    HyperState hyper = ctx.hyper_at(xi);
    std::shared_ptr<const CovarianceOp> prior;
    try {
      prior = ctx.build_prior(hyper.kernel);
    } catch (const NumericalError&) {
      return kNegInf;
    }
    VectorXd latent =
        prior->sdss_sqrt_multiply(s, eta) + prior->sdss_mean(s, surrogate);
    double value = ctx.log_likelihood(latent, hyper.mean_level, hyper.noise_sd);
    if (std::isfinite(value)) value += prior->log_density_plus(s, surrogate);
    cache = {xi_kappa, std::move(prior), std::move(latent), std::move(hyper),
             std::isfinite(value)};
    return value;
  };

  const VectorXd current = state.hyper.xi.head(n_kappa);
  const double current_target = state.log_lik + state.prior->log_density_plus(s, surrogate);
  auto res = ess_step(current, current_target, rng.normal_vector(n_kappa), ll, rng,
                      max_shrink);
  if (diag) *diag = {surrogate, eta, s};
  if (detail::same_vec(res.state, current)) return;
  if (!cache.valid || !detail::same_vec(cache.xi_kappa, res.state)) {
    ll(res.state);
    if (!cache.valid) return;
  }
  state.hyper = cache.hyper;
  state.prior = cache.prior;
  state.latent = cache.latent;
  // the slice target included log N(g | 0, K+S); strip it back off
  state.log_lik = res.log_lik - state.prior->log_density_plus(s, surrogate);
}

/// Elliptical slice update of (mean_level, noise_sd) through their
/// xi-coordinates; the latent surface and kappa stay untouched.
inline void likelihood_hyper_update(ChainState& state, const ChainContext& ctx,
                                    Rng& rng, int max_shrink = 64) {
  HyperState cached;
  bool cache_ok = false;
  const auto ll = [&](const VectorXd& xi_tail) {
    VectorXd xi = state.hyper.xi;
    xi.tail(2) = xi_tail;
    HyperState hyper = ctx.hyper_at(xi);
    const double lik =
        ctx.log_likelihood(state.latent, hyper.mean_level, hyper.noise_sd);
    cached = std::move(hyper);
    cache_ok = std::isfinite(lik);
    return lik;
  };

  const VectorXd current = state.hyper.xi.tail(2);
  auto res = ess_step(current, state.log_lik, rng.normal_vector(2), ll, rng, max_shrink);
  if (detail::same_vec(res.state, current)) return;
  if (!cache_ok || !detail::same_vec(cached.xi.tail(2), res.state)) {
    ll(res.state);
    if (!cache_ok) return;
  }
  state.hyper = cached;
  state.log_lik = res.log_lik;
}

// --- the blocked Gibbs chain --------------------------------------------------

inline ChainState make_initial_state(const ChainContext& ctx) {
  const int dim = (ctx.time_augmented ? 4 : 3) + 2;
  ChainState state;
  state.hyper = ctx.hyper_at(VectorXd::Zero(dim));
  state.prior = ctx.build_prior(state.hyper.kernel);
  state.latent = VectorXd::Zero(ctx.latent_dim);
  state.log_lik = ctx.log_likelihood(state.latent, state.hyper.mean_level,
                                     state.hyper.noise_sd);
  return state;
}

/// Drive the blocked Gibbs loop over a generic context; returns retained
/// states only (no grid attached).
inline std::vector<SampleState> run_chain_states(const ChainContext& ctx,
                                                 const ChainConfig& config) {
  config.validate();
  ChainState state = make_initial_state(ctx);
  if (!std::isfinite(state.log_lik))
    throw NumericalError("run_chain: infeasible initialisation");

  Rng rng(config.seed);
  const double surrogate_var =
      config.surrogate_scale * sqr(ssg(0.0, ctx.hyperprior.signal_sd));
  std::vector<SampleState> states;
  for (int iter = 0; iter < config.n_iterations; ++iter) {
    for (int c = 0; c < config.cheap_per_expensive; ++c)
      latent_update(state, ctx, rng, config.max_shrink);
    if (rng.uniform() < config.sdss_probability)
      sdss_kappa_update(state, ctx, surrogate_var, rng, config.max_shrink);
    else
      whitened_kappa_update(state, ctx, rng, config.max_shrink);
    likelihood_hyper_update(state, ctx, rng, config.max_shrink);

    if (iter < config.burn_in) continue;
    if ((iter - config.burn_in) % config.thin != 0) continue;
    SampleState rec;
    rec.latent = state.latent;
    rec.hyper = state.hyper;
    rec.log_lik = state.log_lik;
    rec.log_post = state.log_lik + state.prior->log_density(state.latent) +
                   log_std_normal(state.hyper.xi);
    states.push_back(std::move(rec));
  }
  return states;
}

/// Blocked Gibbs sampler: per iteration, `cheap_per_expensive` latent
/// updates, one kappa update (surrogate-data with the configured
/// probability, whitened otherwise), then one likelihood-hyperparameter
/// update. Burn-in dropped, thinning applied. Deterministic given the seed.
inline PosteriorSample run_chain(const CalibrationProblem& problem,
                                 KernelFamily family, const HyperpriorSpec& hyperprior,
                                 const ChainConfig& config, bool time_augmented = false,
                                 CovarianceMode mode = CovarianceMode::Kronecker) {
  const ChainContext ctx = make_context(problem, hyperprior, family, time_augmented, mode);
  PosteriorSample out;
  out.states = run_chain_states(ctx, config);
  out.grid = problem.grid();
  out.family = family;
  out.time_augmented = time_augmented;
  out.hyperprior = hyperprior;
  out.config = config;
  return out;
}

inline const SampleState& map_estimate(const PosteriorSample& sample) {
  if (sample.states.empty()) throw DataError("map_estimate: empty sample");
  int best = 0;
  for (int i = 1; i < static_cast<int>(sample.states.size()); ++i)
    if (sample.states[i].log_post > sample.states[best].log_post) best = i;
  return sample.states[best];
}

struct PosteriorBand {
  VectorXd mean;  // per node, of sigma = exp(f + m)
  VectorXd sd;    // population convention (divisor M), so one state gives 0
};

inline PosteriorBand posterior_band(const PosteriorSample& sample) {
  if (sample.states.empty()) throw DataError("posterior_band: empty sample");
  const Eigen::Index n = sample.states.front().latent.size();
  const double m_count = static_cast<double>(sample.states.size());
  VectorXd sum = VectorXd::Zero(n), sum_sq = VectorXd::Zero(n);
  for (const auto& st : sample.states) {
    const VectorXd sigma =
        (st.latent.array() + st.hyper.mean_level).exp().matrix();
    sum += sigma;
    sum_sq += sigma.cwiseProduct(sigma);
  }
  PosteriorBand band;
  band.mean = sum / m_count;
  band.sd = (sum_sq / m_count - band.mean.cwiseProduct(band.mean))
                .cwiseMax(0.0)
                .cwiseSqrt();
  return band;
}

}  // namespace bayeslv
