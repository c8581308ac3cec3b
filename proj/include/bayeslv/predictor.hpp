#pragma once

#include <algorithm>
#include <optional>
#include <utility>
#include <vector>

#include "bayeslv/black_scholes.hpp"
#include "bayeslv/gp.hpp"
#include "bayeslv/sampler.hpp"

namespace bayeslv {

struct PredictiveSample {
  std::vector<ScaledPoint> targets;   // scaled coordinates
  MatrixXd draws;                     // n_states x n_targets latent values
  VectorXd weights;                   // normalised; uniform unless reweighted
  VectorXd map_prediction;            // conditional mean under the MAP state
  std::vector<int> state_index;       // provenance per draw (post-resampling)
};

/// Original grid extended by the targets' strikes/maturities. Scaling maps
/// are inherited from the source grid so scaled coordinates stay comparable.
struct UnionGrid {
  InputGrid grid;
  std::vector<int> original_node;  // union node -> source node, -1 if new
  std::vector<int> new_nodes;      // union node indices with no source node
};

inline UnionGrid make_union_grid(
    const InputGrid& source, const MarketSnapshot& snapshot,
    const std::vector<std::pair<double, double>>& targets) {  // (maturity, strike)
  UnionGrid out;
  std::vector<double> mats = source.maturities, strikes = source.strikes;
  for (const auto& [t, k] : targets) {
    if (std::find(mats.begin(), mats.end(), t) == mats.end()) mats.push_back(t);
    if (std::find(strikes.begin(), strikes.end(), k) == strikes.end())
      strikes.push_back(k);
  }
  std::sort(mats.begin(), mats.end());
  std::sort(strikes.begin(), strikes.end());
  out.grid.maturities = mats;
  out.grid.strikes = strikes;
  out.grid.maturity_scale = source.maturity_scale;
  out.grid.strike_scale = source.strike_scale;
  out.grid.scaled = source.scaled;
  build_market_index(snapshot, out.grid);

  out.original_node.assign(out.grid.size(), -1);
  for (int i = 0; i < source.n_maturities(); ++i) {
    const auto mi = std::find(mats.begin(), mats.end(), source.maturities[i]);
    for (int j = 0; j < source.n_strikes(); ++j) {
      const auto sj = std::find(strikes.begin(), strikes.end(), source.strikes[j]);
      out.original_node[out.grid.node(static_cast<int>(mi - mats.begin()),
                                      static_cast<int>(sj - strikes.begin()))] =
          source.node(i, j);
    }
  }
  for (int n = 0; n < out.grid.size(); ++n)
    if (out.original_node[n] < 0) out.new_nodes.push_back(n);
  return out;
}

/// Systematic resampling of normalised weights; with exactly uniform weights
/// this returns the identity selection.
inline std::vector<int> systematic_resample(const VectorXd& weights, Rng& rng) {
  const int m = static_cast<int>(weights.size());
  std::vector<int> picks(m);
  const double step = 1.0 / m;
  double position = rng.uniform() * step;
  double cumulative = weights(0);
  int idx = 0;
  for (int j = 0; j < m; ++j) {
    while (cumulative < position && idx + 1 < m) cumulative += weights(++idx);
    picks[j] = idx;
    position += step;
  }
  return picks;
}

/// Ancestral-pass predictive draws of the latent surface: one conditional
/// draw per posterior state (equally weighted Gaussian mixture). With
/// `reweight`, importance weights p(data | f*, f, noise)/p(data | f, noise)
/// are evaluated through one extra forward solve per state on the union
/// grid, followed by systematic resampling. Weights are exactly uniform when
/// every target lies beyond the latest data maturity.
inline PredictiveSample predict_latent(const PosteriorSample& sample,
                                       const std::vector<ScaledPoint>& targets,
                                       bool reweight, Rng& rng,
                                       const CalibrationProblem* problem = nullptr,
                                       const UnionGrid* union_grid = nullptr) {
  if (sample.states.empty()) throw DataError("predict_latent: empty sample");
  const int n_states = static_cast<int>(sample.states.size());
  const int n_targets = static_cast<int>(targets.size());
  const auto train_points = grid_scaled_points(sample.grid);

  PredictiveSample out;
  out.targets = targets;
  out.draws.resize(n_states, n_targets);
  out.weights = VectorXd::Constant(n_states, 1.0 / n_states);
  out.state_index.resize(n_states);

  for (int i = 0; i < n_states; ++i) {
    out.state_index[i] = i;
    const auto& st = sample.states[i];
    const auto prior = build_covariance(st.hyper.kernel, sample.grid);
    const auto moments = gp_predict(*prior, st.hyper.kernel, train_points,
                                    st.latent, targets);
    out.draws.row(i) = sample_gaussian(moments, rng).transpose();
  }

  {  // MAP-state prediction: the conditional mean, deterministic
    const auto& st = map_estimate(sample);
    const auto prior = build_covariance(st.hyper.kernel, sample.grid);
    out.map_prediction =
        gp_predict(*prior, st.hyper.kernel, train_points, st.latent, targets).mean;
  }

  if (!reweight) return out;

  // likelihood ratio cancels when all targets sit beyond the data
  double latest_data_maturity = 0.0;
  for (const auto& [qi, node] : sample.grid.market_index)
    latest_data_maturity = std::max(
        latest_data_maturity, sample.grid.maturities[sample.grid.mat_of(node)]);
  const double latest_scaled = sample.grid.maturity_scale.to_unit(latest_data_maturity);
  bool all_beyond = true;
  for (const auto& pt : targets) all_beyond &= pt.maturity > latest_scaled;
  if (all_beyond) return out;

  if (!problem || !union_grid)
    throw DataError("predict_latent: reweighting needs the pricing problem and union grid");
  if (problem->grid().size() != union_grid->grid.size())
    throw DataError("predict_latent: reweighting problem must live on the union grid");
  if (static_cast<int>(union_grid->new_nodes.size()) != n_targets)
    throw DataError("predict_latent: reweighting requires targets equal to the union grid's new nodes");
  const CalibrationProblem& extended = *problem;
  std::vector<double> log_w(n_states);
  for (int i = 0; i < n_states; ++i) {
    const auto& st = sample.states[i];
    VectorXd joint(union_grid->grid.size());
    int next_new = 0;
    for (int n = 0; n < union_grid->grid.size(); ++n) {
      const int src = union_grid->original_node[n];
      joint(n) = src >= 0 ? st.latent(src) : out.draws(i, next_new++);
    }
    const double lik_joint =
        extended.log_likelihood(joint, st.hyper.mean_level, st.hyper.noise_sd);
    log_w[i] = lik_joint - st.log_lik;
  }
  const double norm = logsumexp(log_w);
  if (!std::isfinite(norm))
    throw NumericalError("predict_latent: all importance weights vanished");
  for (int i = 0; i < n_states; ++i) out.weights(i) = std::exp(log_w[i] - norm);

  const auto picks = systematic_resample(out.weights, rng);
  MatrixXd resampled(n_states, n_targets);
  std::vector<int> provenance(n_states);
  for (int j = 0; j < n_states; ++j) {
    resampled.row(j) = out.draws.row(picks[j]);
    provenance[j] = picks[j];
  }
  out.draws = std::move(resampled);
  out.state_index = std::move(provenance);
  out.weights = VectorXd::Constant(n_states, 1.0 / n_states);
  return out;
}

/// Note: this call requires predict_latent to have been run on exactly the
/// union grid's new nodes (in node order).
struct PricePrediction {
  MatrixXd draws;          // n_surviving_states x n_targets, fair prices
  VectorXd mean;           // over surviving draws
  MatrixXd covariance;     // mean(noise^2) I + sample covariance, divisor M
  std::vector<int> target_nodes;  // union-grid node of each column
  int n_dropped = 0;
};

inline PricePrediction predict_prices(
    const PredictiveSample& pred, const PosteriorSample& sample,
    const MarketSnapshot& snapshot, const UnionGrid& union_grid,
    const SolverConfig& solver,
    const std::vector<std::pair<double, double>>& report_targets) {
  const int n_states = static_cast<int>(pred.draws.rows());
  if (static_cast<int>(union_grid.new_nodes.size()) != pred.draws.cols())
    throw DataError("predict_prices: predictive sample does not cover the union grid");

  PricePrediction out;
  for (const auto& [t, k] : report_targets) {
    const auto mi = std::find(union_grid.grid.maturities.begin(),
                              union_grid.grid.maturities.end(), t);
    const auto sj = std::find(union_grid.grid.strikes.begin(),
                              union_grid.grid.strikes.end(), k);
    if (mi == union_grid.grid.maturities.end() || sj == union_grid.grid.strikes.end())
      throw DataError("predict_prices: report target not on the union grid");
    out.target_nodes.push_back(union_grid.grid.node(
        static_cast<int>(mi - union_grid.grid.maturities.begin()),
        static_cast<int>(sj - union_grid.grid.strikes.begin())));
  }
  const int n_targets = static_cast<int>(out.target_nodes.size());

  std::vector<VectorXd> rows;
  double noise_var_sum = 0.0;
  for (int i = 0; i < n_states; ++i) {
    const auto& st = sample.states[pred.state_index[i]];
    VectorXd joint(union_grid.grid.size());
    for (int n = 0, next_new = 0; n < union_grid.grid.size(); ++n) {
      const int src = union_grid.original_node[n];
      joint(n) = src >= 0 ? st.latent(src) : pred.draws(i, next_new++);
    }
    MatrixXd sigma(union_grid.grid.n_maturities(), union_grid.grid.n_strikes());
    for (int r = 0; r < sigma.rows(); ++r)
      for (int c = 0; c < sigma.cols(); ++c)
        sigma(r, c) = std::exp(joint(union_grid.grid.node(r, c)) + st.hyper.mean_level);
    try {
      const PriceSurface surf = solve_dupire(sigma, snapshot.context,
                                             union_grid.grid, solver);
      VectorXd row(n_targets);
      for (int c = 0; c < n_targets; ++c) {
        const int node = out.target_nodes[c];
        row(c) = surf.values(union_grid.grid.mat_of(node),
                             union_grid.grid.strike_of(node));
      }
      rows.push_back(std::move(row));
      noise_var_sum += sqr(st.hyper.noise_sd);
    } catch (const std::exception&) {
      ++out.n_dropped;
    }
  }
  if (rows.size() < static_cast<size_t>(0.9 * n_states))
    throw NumericalError("predict_prices: more than 10% of draws failed to price");

  const int m = static_cast<int>(rows.size());
  out.draws.resize(m, n_targets);
  for (int i = 0; i < m; ++i) out.draws.row(i) = rows[i].transpose();
  out.mean = out.draws.colwise().mean();
  MatrixXd centred = out.draws.rowwise() - out.mean.transpose();
  // population divisor M for the fair-price spread
  out.covariance = (centred.transpose() * centred) / static_cast<double>(m);
  out.covariance.diagonal().array() += noise_var_sum / m;
  return out;
}

/// Per-draw implied volatilities; NaN where the price violates no-arbitrage.
inline MatrixXd predict_implied_vols(
    const PricePrediction& prices, const MarketSnapshot& snapshot,
    const std::vector<std::pair<double, double>>& targets) {
  MatrixXd vols(prices.draws.rows(), prices.draws.cols());
  for (int i = 0; i < prices.draws.rows(); ++i) {
    for (int c = 0; c < prices.draws.cols(); ++c) {
      const auto& [t, k] = targets[c];
      try {
        vols(i, c) = implied_vol(prices.draws(i, c), snapshot.spot(), k, t,
                                 snapshot.rate(), snapshot.dividend());
      } catch (const DataError&) {
        vols(i, c) = kNaN;
      }
    }
  }
  return vols;
}

}  // namespace bayeslv
