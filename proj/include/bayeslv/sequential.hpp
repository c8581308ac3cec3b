#pragma once

#include <memory>
#include <utility>
#include <vector>

#include "bayeslv/gp.hpp"
#include "bayeslv/predictor.hpp"
#include "bayeslv/sampler.hpp"

namespace bayeslv {

struct SequentialConfig {
  int window_latent = 2;   // history depth conditioning the latent update
  int window_hyper = 1;    // history depth inside the hyperparameter update
  int n_chains = 100;      // independent chains carried across dates
  int sweeps_per_date = 20;  // elliptical slice sweeps per chain per date
  ChainConfig initial;     // full calibration at the first date
  SolverConfig solver;
  HyperpriorSpec hyperprior;
  KernelFamily family = KernelFamily::Matern32;
  std::uint64_t seed = 1;

  void validate() const {
    if (window_latent < 1 || window_hyper < 1)
      throw DataError("SequentialConfig: windows must be >= 1");
    if (n_chains < 2) throw DataError("SequentialConfig: need at least two chains");
    if (sweeps_per_date < 1)
      throw DataError("SequentialConfig: sweeps_per_date must be >= 1");
  }
};

struct HistoryBlock {
  double time_coord = 0.0;  // scaled calendar time
  InputGrid grid;
  VectorXd latent;
};

struct SequentialChain {
  std::vector<HistoryBlock> history;  // most recent last; trimmed to the window
  HyperState hyper;
  double log_lik = 0.0;
};

struct HyperApprox {
  VectorXd mean;
  MatrixXd cov;
};

struct SequentialState {
  std::vector<SequentialChain> chains;
  HyperApprox approx;  // Gaussian fit to the xi sample, refreshed per date
  int n_dates = 0;
  double last_time_coord = 0.0;
};

inline std::vector<ScaledPoint> scaled_points_at(const InputGrid& grid,
                                                 double time_coord) {
  auto pts = grid_scaled_points(grid);
  for (auto& p : pts) p.time = time_coord;
  return pts;
}

namespace detail {

inline std::vector<ScaledPoint> history_points(const std::vector<HistoryBlock>& blocks,
                                               int window) {
  std::vector<ScaledPoint> pts;
  const int start = std::max<int>(0, static_cast<int>(blocks.size()) - window);
  for (size_t b = start; b < blocks.size(); ++b) {
    auto block_pts = scaled_points_at(blocks[b].grid, blocks[b].time_coord);
    pts.insert(pts.end(), block_pts.begin(), block_pts.end());
  }
  return pts;
}

inline VectorXd history_latent(const std::vector<HistoryBlock>& blocks, int window) {
  const int start = std::max<int>(0, static_cast<int>(blocks.size()) - window);
  Eigen::Index total = 0;
  for (size_t b = start; b < blocks.size(); ++b) total += blocks[b].latent.size();
  VectorXd out(total);
  Eigen::Index at = 0;
  for (size_t b = start; b < blocks.size(); ++b) {
    out.segment(at, blocks[b].latent.size()) = blocks[b].latent;
    at += blocks[b].latent.size();
  }
  return out;
}

struct ConditionalGaussian {
  VectorXd mean;
  Eigen::LLT<MatrixXd> chol;

  VectorXd draw(Rng& rng) const {
    return mean + chol.matrixL() * rng.normal_vector(mean.size());
  }
  VectorXd whiten(const VectorXd& x) const { return chol.matrixL().solve(x - mean); }
  VectorXd colour(const VectorXd& nu) const { return mean + chol.matrixL() * nu; }
};

inline Eigen::LLT<MatrixXd> factor_with_jitter(MatrixXd cov,
                                               double floor_scale = 1e-12) {
  const double scale = std::max(cov.diagonal().maxCoeff(), 1e-300);
  double jitter = 0.0;
  for (int attempt = 0; attempt < 12; ++attempt) {
    Eigen::LLT<MatrixXd> llt(cov);
    if (llt.info() == Eigen::Success) return llt;
    jitter = jitter == 0.0 ? floor_scale * scale : 10.0 * jitter;
    cov.diagonal().array() += jitter;
  }
  throw NumericalError("sequential: conditional covariance not factorisable");
}

/// Windowed conditional prior of the new date's latent block given a chain's
/// history, under the chain's (time-augmented) kernel.
inline ConditionalGaussian conditional_prior(const SequentialChain& chain,
                                             const KernelSpec& kernel,
                                             const std::vector<ScaledPoint>& targets,
                                             int window) {
  ConditionalGaussian out;
  if (chain.history.empty()) throw DataError("sequential: empty history");
  const auto train_pts = history_points(chain.history, window);
  const VectorXd train_f = history_latent(chain.history, window);
  DenseCovariance prior(kernel, train_pts);
  const GpMoments moments = gp_predict(prior, kernel, train_pts, train_f, targets);
  out.mean = moments.mean;
  out.chol = factor_with_jitter(moments.covariance);
  return out;
}

}  // namespace detail

/// Refit the Gaussian approximation of the hyperparameter posterior from the
/// chains' xi states; mean and covariance are the exact sample moments.
inline HyperApprox fit_hyper_approx(const std::vector<SequentialChain>& chains) {
  const int m = static_cast<int>(chains.size());
  const Eigen::Index d = chains.front().hyper.xi.size();
  HyperApprox approx;
  approx.mean = VectorXd::Zero(d);
  for (const auto& c : chains) approx.mean += c.hyper.xi;
  approx.mean /= m;
  approx.cov = MatrixXd::Zero(d, d);
  for (const auto& c : chains) {
    const VectorXd dlt = c.hyper.xi - approx.mean;
    approx.cov.noalias() += dlt * dlt.transpose();
  }
  approx.cov /= static_cast<double>(m - 1);
  return approx;
}

/// First date: a full time-augmented calibration; chains are seeded with
/// evenly spaced posterior states.
inline std::pair<SequentialState, PosteriorSample> sequential_start(
    const CalibrationProblem& problem, double time_coord, const SequentialConfig& cfg) {
  cfg.validate();
  PosteriorSample sample = run_chain(problem, cfg.family, cfg.hyperprior, cfg.initial,
                                     /*time_augmented=*/true);
  const int m = static_cast<int>(sample.states.size());
  if (m < cfg.n_chains)
    throw DataError("sequential_start: posterior sample smaller than n_chains");

  SequentialState state;
  for (int l = 0; l < cfg.n_chains; ++l) {
    const auto& st = sample.states[(l * m) / cfg.n_chains];
    SequentialChain chain;
    chain.history.push_back({time_coord, problem.grid(), st.latent});
    chain.hyper = st.hyper;
    chain.log_lik = st.log_lik;
    state.chains.push_back(std::move(chain));
  }
  state.approx = fit_hyper_approx(state.chains);
  state.n_dates = 1;
  state.last_time_coord = time_coord;
  return {std::move(state), std::move(sample)};
}

/// Advance every chain by one date: elliptical slice sweeps of the new
/// latent block against its windowed conditional prior, then a whitened
/// hyperparameter move against the Gaussian approximation, then a refresh of
/// that approximation from the new xi sample.
inline PosteriorSample sequential_step(SequentialState& state,
                                       const CalibrationProblem& problem,
                                       double time_coord, const SequentialConfig& cfg) {
  cfg.validate();
  if (state.n_dates < 1) throw DataError("sequential_step: call sequential_start first");
  const auto targets = scaled_points_at(problem.grid(), time_coord);
  Rng master(splitmix64(cfg.seed) ^ static_cast<std::uint64_t>(state.n_dates));

  const Eigen::LLT<MatrixXd> approx_chol = detail::factor_with_jitter(state.approx.cov);

  PosteriorSample out;
  out.grid = problem.grid();
  out.family = cfg.family;
  out.time_augmented = true;
  out.hyperprior = cfg.hyperprior;

  for (auto& chain : state.chains) {
    Rng rng = master.child(static_cast<std::uint64_t>(&chain - state.chains.data()));

    // (a) latent block: ancestral start from the windowed conditional prior,
    // then slice sweeps against the current date's likelihood only
    auto cond = detail::conditional_prior(chain, chain.hyper.kernel, targets,
                                          cfg.window_latent);
    VectorXd delta = VectorXd::Zero(cond.mean.size());
    double log_lik = kNegInf;
    for (int attempt = 0; attempt < 20 && !std::isfinite(log_lik); ++attempt) {
      delta = cond.chol.matrixL() * rng.normal_vector(cond.mean.size());
      log_lik = problem.log_likelihood(cond.mean + delta, chain.hyper.mean_level,
                                       chain.hyper.noise_sd);
    }
    if (!std::isfinite(log_lik))
      throw NumericalError("sequential_step: no feasible latent initialisation");
    const auto ll_delta = [&](const VectorXd& d) {
      return problem.log_likelihood(cond.mean + d, chain.hyper.mean_level,
                                    chain.hyper.noise_sd);
    };
    for (int sweep = 0; sweep < cfg.sweeps_per_date; ++sweep) {
      const VectorXd nu = cond.chol.matrixL() * rng.normal_vector(cond.mean.size());
      auto res = ess_step(delta, log_lik, nu, ll_delta, rng);
      delta = std::move(res.state);
      log_lik = res.log_lik;
    }
    VectorXd latent_t = cond.mean + delta;

    // (b) hyperparameters: whitened move against the Gaussian approximation,
    // conditioning the latent block on a short history window
    {
      auto cond_h = detail::conditional_prior(chain, chain.hyper.kernel, targets,
                                              cfg.window_hyper);
      const VectorXd nu_latent = cond_h.whiten(latent_t);

      HyperState cached_hyper;
      VectorXd cached_latent;
      bool cache_ok = false;
      const auto ll_xi = [&](const VectorXd& xi_centered) {
        const VectorXd xi = state.approx.mean + xi_centered;
        HyperState hyper;
        try {
          hyper = hyper_from_xi(xi, cfg.hyperprior, cfg.family, true);
          auto cond_prop = detail::conditional_prior(chain, hyper.kernel, targets,
                                                     cfg.window_hyper);
          VectorXd latent_prop = cond_prop.colour(nu_latent);
          const double lik = problem.log_likelihood(latent_prop, hyper.mean_level,
                                                    hyper.noise_sd);
          cached_hyper = std::move(hyper);
          cached_latent = std::move(latent_prop);
          cache_ok = std::isfinite(lik);
          return lik;
        } catch (const std::exception&) {
          return kNegInf;
        }
      };

      const VectorXd centered = chain.hyper.xi - state.approx.mean;
      const VectorXd fresh = approx_chol.matrixL() *
                             rng.normal_vector(state.approx.mean.size());
      const double current_ll = problem.log_likelihood(
          latent_t, chain.hyper.mean_level, chain.hyper.noise_sd);
      auto res = ess_step(centered, current_ll, fresh, ll_xi, rng);
      if (!detail::same_vec(res.state, centered) && cache_ok) {
        chain.hyper = cached_hyper;
        latent_t = cached_latent;
        log_lik = res.log_lik;
      } else {
        log_lik = current_ll;
      }
    }

    chain.history.push_back({time_coord, problem.grid(), latent_t});
    const int keep = std::max(cfg.window_latent, cfg.window_hyper);
    while (static_cast<int>(chain.history.size()) > keep)
      chain.history.erase(chain.history.begin());
    chain.log_lik = log_lik;

    SampleState rec;
    rec.latent = latent_t;
    rec.hyper = chain.hyper;
    rec.log_lik = log_lik;
    rec.log_post = log_lik;  // per-date conditional density reported separately
    out.states.push_back(std::move(rec));
  }

  state.approx = fit_hyper_approx(state.chains);
  state.n_dates += 1;
  state.last_time_coord = time_coord;
  return out;
}

/// s-step-ahead predictive draws of the latent surface at `targets`
/// (maturity, strike) and scaled time `time_coord`, conditioning each chain
/// on only its most recent block.
inline PredictiveSample forward_predict(const SequentialState& state,
                                        const std::vector<ScaledPoint>& targets,
                                        Rng& rng) {
  if (state.chains.empty()) throw DataError("forward_predict: no chains");
  PredictiveSample out;
  out.targets = targets;
  const int m = static_cast<int>(state.chains.size());
  out.draws.resize(m, static_cast<int>(targets.size()));
  out.weights = VectorXd::Constant(m, 1.0 / m);
  out.state_index.resize(m);
  double best = kNegInf;
  for (int l = 0; l < m; ++l) {
    out.state_index[l] = l;
    const auto& chain = state.chains[l];
    const auto& block = chain.history.back();
    const auto train_pts = scaled_points_at(block.grid, block.time_coord);
    DenseCovariance prior(chain.hyper.kernel, train_pts);
    const auto moments = gp_predict(prior, chain.hyper.kernel, train_pts,
                                    block.latent, targets);
    out.draws.row(l) = sample_gaussian(moments, rng).transpose();
    if (chain.log_lik > best) {
      best = chain.log_lik;
      out.map_prediction = moments.mean;
    }
  }
  return out;
}

/// Root mean squared error between model and market implied volatilities
/// over the observed quotes; pairs without an implied volatility on either
/// side are skipped and counted.
struct RmseResult {
  double rmse = 0.0;
  int n_used = 0;
  int n_skipped = 0;
};

inline RmseResult rmse_implied(const CalibrationProblem& problem,
                               const VectorXd& latent, double mean_level) {
  const auto& grid = problem.grid();
  const auto& snap = problem.snapshot();
  const MatrixXd prices = problem.price(problem.sigma_of(latent, mean_level));
  RmseResult out;
  double acc = 0.0;
  for (const auto& [qi, node] : grid.market_index) {
    const auto& q = snap.quotes[qi];
    try {
      const double model_iv =
          implied_vol(prices(grid.mat_of(node), grid.strike_of(node)), snap.spot(),
                      q.strike, q.maturity, snap.rate(), snap.dividend());
      const double market_iv = implied_vol(q.mid, snap.spot(), q.strike, q.maturity,
                                           snap.rate(), snap.dividend());
      acc += sqr(model_iv - market_iv);
      ++out.n_used;
    } catch (const DataError&) {
      ++out.n_skipped;
    }
  }
  out.rmse = out.n_used > 0 ? std::sqrt(acc / out.n_used) : kNaN;
  return out;
}

/// Reference sampler for small problems: the exact joint posterior over all
/// dates' latent blocks with a dense time-augmented covariance. Used to
/// validate the windowed sequential scheme.
struct JointSample {
  std::vector<SampleState> states;
  std::vector<Eigen::Index> offsets;  // start of each date's block
};

inline JointSample run_joint_chain(const std::vector<CalibrationProblem>& problems,
                                   const std::vector<double>& time_coords,
                                   KernelFamily family,
                                   const HyperpriorSpec& hyperprior,
                                   const ChainConfig& config) {
  if (problems.size() != time_coords.size() || problems.empty())
    throw DataError("run_joint_chain: need one time coordinate per date");
  std::vector<ScaledPoint> all_points;
  std::vector<Eigen::Index> offsets;
  for (size_t t = 0; t < problems.size(); ++t) {
    offsets.push_back(static_cast<Eigen::Index>(all_points.size()));
    const auto pts = scaled_points_at(problems[t].grid(), time_coords[t]);
    all_points.insert(all_points.end(), pts.begin(), pts.end());
  }
  const Eigen::Index total = static_cast<Eigen::Index>(all_points.size());

  ChainContext ctx;
  ctx.latent_dim = total;
  ctx.hyperprior = hyperprior;
  ctx.family = family;
  ctx.time_augmented = true;
  ctx.build_prior = [all_points](const KernelSpec& spec) {
    return std::static_pointer_cast<const CovarianceOp>(
        std::make_shared<DenseCovariance>(spec, all_points));
  };
  ctx.log_likelihood = [&problems, offsets](const VectorXd& f, double m, double s) {
    double acc = 0.0;
    for (size_t t = 0; t < problems.size(); ++t) {
      const Eigen::Index n = problems[t].grid().size();
      const double term = problems[t].log_likelihood(f.segment(offsets[t], n), m, s);
      if (!std::isfinite(term)) return kNegInf;
      acc += term;
    }
    return acc;
  };

  JointSample out;
  out.states = run_chain_states(ctx, config);
  out.offsets = offsets;
  return out;
}

}  // namespace bayeslv
