#pragma once

#include <algorithm>
#include <cmath>

#include "bayeslv/common.hpp"

namespace bayeslv {

inline double norm_cdf(double x) { return 0.5 * std::erfc(-x * M_SQRT1_2); }

/// European call under constant volatility. maturity <= 0 returns intrinsic.
inline double bs_price(double spot, double strike, double maturity, double rate,
                       double dividend, double vol) {
  if (maturity <= 0.0) return std::max(spot - strike, 0.0);
  const double fwd_disc = spot * std::exp(-dividend * maturity);
  const double strike_disc = strike * std::exp(-rate * maturity);
  const double sd = vol * std::sqrt(maturity);
  if (sd <= 0.0) return std::max(fwd_disc - strike_disc, 0.0);
  const double d1 = (std::log(spot / strike) +
                     (rate - dividend + 0.5 * vol * vol) * maturity) / sd;
  const double d2 = d1 - sd;
  return fwd_disc * norm_cdf(d1) - strike_disc * norm_cdf(d2);
}

/// No-arbitrage band for a call price: (lower, upper) exclusive.
inline std::pair<double, double> call_price_band(double spot, double strike,
                                                 double maturity, double rate,
                                                 double dividend) {
  const double lower = std::max(
      spot * std::exp(-dividend * maturity) - strike * std::exp(-rate * maturity),
      0.0);
  const double upper = spot * std::exp(-dividend * maturity);
  return {lower, upper};
}

/// Black-Scholes implied volatility by bracketed bisection on [1e-6, 5].
/// Throws DataError when the price sits outside the no-arbitrage band.
inline double implied_vol(double price, double spot, double strike,
                          double maturity, double rate, double dividend) {
  const auto [lower, upper] = call_price_band(spot, strike, maturity, rate, dividend);
  if (!(price > lower && price < upper))
    throw DataError("implied_vol: no implied vol, price outside no-arbitrage band");
  double lo = 1e-6, hi = 5.0;
  const double p_lo = bs_price(spot, strike, maturity, rate, dividend, lo);
  const double p_hi = bs_price(spot, strike, maturity, rate, dividend, hi);
  if (price <= p_lo) return lo;
  if (price >= p_hi) return hi;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double p = bs_price(spot, strike, maturity, rate, dividend, mid);
    if (std::abs(p - price) < 1e-11) return mid;
    (p < price ? lo : hi) = mid;
    if (hi - lo < 1e-13) break;
  }
  return 0.5 * (lo + hi);
}

}  // namespace bayeslv
