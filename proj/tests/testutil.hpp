#pragma once

// Shared helpers for the test suites: synthetic market fixtures, chain
// diagnostics, and a Kolmogorov-Smirnov test against an analytic CDF.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "bayeslv/dupire.hpp"
#include "bayeslv/market_data.hpp"

namespace testutil {

using namespace bayeslv;

// Snapshot + Cartesian grid with quotes priced from a given local-vol
// surface through the forward solver, plus optional additive noise.
struct SyntheticMarket {
  MarketSnapshot snapshot;
  InputGrid grid;
  MatrixXd sigma_true;
};

inline SyntheticMarket make_synthetic_market(
    const std::vector<double>& maturities, const std::vector<double>& strikes,
    const std::function<double(double, double)>& sigma_fn, const MarketContext& ctx,
    double noise_sd, Rng& rng, const SolverConfig& cfg = {}) {
  SyntheticMarket mk;
  mk.snapshot.observation_date = "2024-01-02";
  mk.snapshot.context = ctx;
  mk.grid.maturities = maturities;
  mk.grid.strikes = strikes;
  const int n_mat = mk.grid.n_maturities(), n_str = mk.grid.n_strikes();
  mk.sigma_true.resize(n_mat, n_str);
  for (int i = 0; i < n_mat; ++i)
    for (int j = 0; j < n_str; ++j)
      mk.sigma_true(i, j) = sigma_fn(maturities[i], strikes[j]);
  const PriceSurface fair = solve_dupire(mk.sigma_true, ctx, mk.grid, cfg);
  for (int i = 0; i < n_mat; ++i) {
    for (int j = 0; j < n_str; ++j) {
      MarketQuote q;
      q.maturity = maturities[i];
      q.strike = strikes[j];
      const double mid = fair.values(i, j) + noise_sd * rng.normal();
      q.bid = std::max(mid - 0.5, 0.0);
      q.ask = q.bid + 1.0;
      q.mid = mid;
      // keep mid exact: quotes carry mid = (bid+ask)/2, so re-center
      q.bid = mid - 0.5;
      q.ask = mid + 0.5;
      mk.snapshot.quotes.push_back(q);
    }
  }
  mk.grid = scale_to_unit([&] {
    InputGrid g = mk.grid;
    build_market_index(mk.snapshot, g);
    return g;
  }());
  return mk;
}

inline double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double variance(const std::vector<double>& v) {
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

// Batch-means standard error of the mean of a correlated chain.
inline double batch_se(const std::vector<double>& chain, int n_batches = 30) {
  const int n = static_cast<int>(chain.size());
  const int b = std::max(1, n / n_batches);
  std::vector<double> bm;
  for (int s = 0; s + b <= n; s += b) {
    double acc = 0.0;
    for (int i = s; i < s + b; ++i) acc += chain[i];
    bm.push_back(acc / b);
  }
  return std::sqrt(variance(bm) / static_cast<double>(bm.size()));
}

// Asymptotic Kolmogorov-Smirnov p-value of a sample against a CDF.
inline double ks_pvalue(std::vector<double> sample,
                        const std::function<double(double)>& cdf) {
  std::sort(sample.begin(), sample.end());
  const double n = static_cast<double>(sample.size());
  double d = 0.0;
  for (size_t i = 0; i < sample.size(); ++i) {
    const double f = cdf(sample[i]);
    d = std::max(d, std::abs(f - static_cast<double>(i) / n));
    d = std::max(d, std::abs(static_cast<double>(i + 1) / n - f));
  }
  const double lambda = (std::sqrt(n) + 0.12 + 0.11 / std::sqrt(n)) * d;
  double p = 0.0;
  for (int k = 1; k <= 100; ++k)
    p += 2.0 * std::pow(-1.0, k - 1) * std::exp(-2.0 * k * k * lambda * lambda);
  return std::clamp(p, 0.0, 1.0);
}

inline double norm_cdf_mu(double x, double mu, double sd) {
  return 0.5 * std::erfc(-(x - mu) / (sd * std::sqrt(2.0)));
}

}  // namespace testutil
