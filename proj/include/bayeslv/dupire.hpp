#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "bayeslv/common.hpp"
#include "bayeslv/market_data.hpp"

namespace bayeslv {

struct SolverConfig {
  double moneyness_lo = 0.1;  // spot/K at the far out-of-money strike bound
  double moneyness_hi = 4.0;  // spot/K at the deep in-the-money strike bound
  int n_extension_nodes_per_side = 15;
  double max_time_step = 1.0 / 365.0;  // years, internal sub-stepping bound
  double jitter = 1e-12;               // tridiagonal pivot guard

  void validate() const {
    if (!(moneyness_lo > 0.0 && moneyness_lo < 1.0 && moneyness_hi > 1.0))
      throw DataError("SolverConfig: need 0 < moneyness_lo < 1 < moneyness_hi");
    if (!(max_time_step > 0.0)) throw DataError("SolverConfig: max_time_step must be > 0");
    if (n_extension_nodes_per_side < 0)
      throw DataError("SolverConfig: negative extension node count");
  }
};

struct PriceSurface {
  MatrixXd values;  // maturity-major, n_maturities x n_strikes
};

namespace detail {

// Extended strike axis: grid strikes plus geometrically spaced nodes out to
// the moneyness bounds. `grid_offset` locates the first grid strike.
struct ExtendedAxis {
  std::vector<double> strikes;
  int grid_offset = 0;
  int grid_count = 0;
};

inline ExtendedAxis extend_strike_axis(const std::vector<double>& strikes,
                                       double spot, const SolverConfig& cfg) {
  const double k_lo = spot / cfg.moneyness_hi;
  const double k_hi = spot / cfg.moneyness_lo;
  std::vector<double> left, right;
  const int n = cfg.n_extension_nodes_per_side;
  if (n > 0 && strikes.front() > k_lo) {
    const double ratio = std::pow(k_lo / strikes.front(), 1.0 / n);
    for (int j = 1; j <= n; ++j) left.push_back(strikes.front() * std::pow(ratio, j));
    std::reverse(left.begin(), left.end());
  }
  if (n > 0 && strikes.back() < k_hi) {
    const double ratio = std::pow(k_hi / strikes.back(), 1.0 / n);
    for (int j = 1; j <= n; ++j) right.push_back(strikes.back() * std::pow(ratio, j));
  }
  ExtendedAxis axis;
  axis.strikes = left;
  axis.strikes.insert(axis.strikes.end(), strikes.begin(), strikes.end());
  axis.strikes.insert(axis.strikes.end(), right.begin(), right.end());
  axis.grid_offset = static_cast<int>(left.size());
  axis.grid_count = static_cast<int>(strikes.size());
  return axis;
}

// Three-point first/second derivative weights on a non-uniform axis.
struct Stencil {
  std::vector<double> d1m, d1c, d1p;  // first derivative
  std::vector<double> d2m, d2c, d2p;  // second derivative
};

inline Stencil make_stencil(const std::vector<double>& x) {
  const int m = static_cast<int>(x.size());
  Stencil s;
  s.d1m.assign(m, 0.0); s.d1c.assign(m, 0.0); s.d1p.assign(m, 0.0);
  s.d2m.assign(m, 0.0); s.d2c.assign(m, 0.0); s.d2p.assign(m, 0.0);
  for (int i = 1; i + 1 < m; ++i) {
    const double hm = x[i] - x[i - 1];
    const double hp = x[i + 1] - x[i];
    s.d1m[i] = -hp / (hm * (hm + hp));
    s.d1c[i] = (hp - hm) / (hm * hp);
    s.d1p[i] = hm / (hp * (hm + hp));
    s.d2m[i] = 2.0 / (hm * (hm + hp));
    s.d2c[i] = -2.0 / (hm * hp);
    s.d2p[i] = 2.0 / (hp * (hm + hp));
  }
  return s;
}

// Thomas algorithm; lower/diag/upper of size n. Overwrites rhs with solution.
inline void solve_tridiagonal(std::vector<double>& lower, std::vector<double>& diag,
                              std::vector<double>& upper, std::vector<double>& rhs,
                              double pivot_guard, int step_index) {
  const int n = static_cast<int>(diag.size());
  for (int i = 1; i < n; ++i) {
    if (std::abs(diag[i - 1]) < pivot_guard)
      throw NumericalError("solve_dupire: tridiagonal pivot breakdown at step " +
                           std::to_string(step_index));
    const double w = lower[i] / diag[i - 1];
    diag[i] -= w * upper[i - 1];
    rhs[i] -= w * rhs[i - 1];
  }
  if (std::abs(diag[n - 1]) < pivot_guard)
    throw NumericalError("solve_dupire: tridiagonal pivot breakdown at step " +
                         std::to_string(step_index));
  rhs[n - 1] /= diag[n - 1];
  for (int i = n - 2; i >= 0; --i) rhs[i] = (rhs[i] - upper[i] * rhs[i + 1]) / diag[i];
}

}  // namespace detail

/// Solve Dupire's forward equation
///   dC/dT + (r-q) K dC/dK - (1/2) K^2 sigma^2 d2C/dK2 + q C = 0,
///   C(0,K) = (spot - K)^+,
/// by Crank-Nicolson on the extended strike axis, with implicit-Euler
/// (Rannacher) startup to damp the payoff kink. `sigma` is maturity-major
/// (n_maturities x n_strikes); its values are extended flat in strike and
/// interpolated linearly in maturity between grid rows (flat before the
/// first row). Returns prices restricted to the grid nodes.
inline PriceSurface solve_dupire(const MatrixXd& sigma, const MarketContext& ctx,
                                 const InputGrid& grid, const SolverConfig& cfg) {
  cfg.validate();
  const int n_mat = grid.n_maturities();
  const int n_str = grid.n_strikes();
  if (sigma.rows() != n_mat || sigma.cols() != n_str)
    throw DataError("solve_dupire: sigma shape does not match grid");
  if ((sigma.array() <= 0.0).any() || !sigma.allFinite())
    throw DataError("solve_dupire: sigma must be positive and finite");
  if (ctx.spot <= 0.0) throw DataError("solve_dupire: spot must be positive");

  const auto axis = detail::extend_strike_axis(grid.strikes, ctx.spot, cfg);
  const int m = static_cast<int>(axis.strikes.size());
  const auto st = detail::make_stencil(axis.strikes);
  const double r = ctx.rate, q = ctx.dividend;

  // sigma rows on the extended axis (flat extrapolation in strike)
  MatrixXd sig_ext(n_mat, m);
  for (int i = 0; i < n_mat; ++i) {
    for (int j = 0; j < m; ++j) {
      const int jj = std::clamp(j - axis.grid_offset, 0, n_str - 1);
      sig_ext(i, j) = sigma(i, jj);
    }
  }
  const auto sigma_at = [&](double t, VectorXd& out) {
    if (t <= grid.maturities.front()) { out = sig_ext.row(0).transpose(); return; }
    if (t >= grid.maturities.back()) { out = sig_ext.row(n_mat - 1).transpose(); return; }
    const auto it = std::upper_bound(grid.maturities.begin(), grid.maturities.end(), t);
    const int hi = static_cast<int>(it - grid.maturities.begin());
    const double t0 = grid.maturities[hi - 1], t1 = grid.maturities[hi];
    const double w = (t - t0) / (t1 - t0);
    out = ((1.0 - w) * sig_ext.row(hi - 1) + w * sig_ext.row(hi)).transpose();
  };

  // Payoff sampled pointwise except in the cell containing the kink at the
  // spot, which is cell-averaged; pointwise sampling there carries a large
  // second-order error constant at short maturities.
  std::vector<double> price(m);
  const auto payoff_integral = [&](double a, double b) {
    const double top = std::min(b, ctx.spot);
    if (top <= a) return 0.0;
    return ctx.spot * (top - a) - 0.5 * (top * top - a * a);
  };
  for (int j = 0; j < m; ++j) {
    const double a = j == 0 ? axis.strikes[0]
                            : 0.5 * (axis.strikes[j - 1] + axis.strikes[j]);
    const double b = j == m - 1 ? axis.strikes[m - 1]
                                : 0.5 * (axis.strikes[j] + axis.strikes[j + 1]);
    const bool kink_cell = a < ctx.spot && ctx.spot < b && b > a;
    price[j] = kink_cell ? payoff_integral(a, b) / (b - a)
                         : std::max(ctx.spot - axis.strikes[j], 0.0);
  }

  const auto boundary_low = [&](double t) {
    return ctx.spot * std::exp(-q * t) - axis.strikes.front() * std::exp(-r * t);
  };

  // One theta-step from time t over dt. Interior unknowns are 1..m-2.
  VectorXd sig_old(m), sig_new(m);
  std::vector<double> lower(m - 2), diag(m - 2), upper(m - 2), rhs(m - 2);
  const auto op_coeffs = [&](const VectorXd& sig, int i, double& a, double& b, double& c) {
    const double k = axis.strikes[i];
    const double diff = 0.5 * sig(i) * sig(i) * k * k;
    const double conv = (r - q) * k;
    a = diff * st.d2m[i] - conv * st.d1m[i];
    b = diff * st.d2c[i] - conv * st.d1c[i] - q;
    c = diff * st.d2p[i] - conv * st.d1p[i];
  };
  int global_step = 0;
  const auto theta_step = [&](double t, double dt, double theta) {
    sigma_at(t, sig_old);
    sigma_at(t + dt, sig_new);
    const double boundary_new = boundary_low(t + dt);
    for (int i = 1; i + 1 < m; ++i) {
      double ao, bo, co, an, bn, cn;
      op_coeffs(sig_old, i, ao, bo, co);
      op_coeffs(sig_new, i, an, bn, cn);
      const double expl = (1.0 - theta) * dt;
      rhs[i - 1] = price[i] + expl * (ao * price[i - 1] + bo * price[i] + co * price[i + 1]);
      lower[i - 1] = -theta * dt * an;
      diag[i - 1] = 1.0 - theta * dt * bn;
      upper[i - 1] = -theta * dt * cn;
      if (i == 1) rhs[i - 1] += theta * dt * an * boundary_new;
      // high-strike boundary is zero; no correction needed
    }
    detail::solve_tridiagonal(lower, diag, upper, rhs, cfg.jitter, global_step);
    for (int i = 1; i + 1 < m; ++i) price[i] = rhs[i - 1];
    price[0] = boundary_new;
    price[m - 1] = 0.0;
    ++global_step;
  };

  PriceSurface out;
  out.values.resize(n_mat, n_str);
  double t = 0.0;
  constexpr int kRannacherSteps = 2;  // leading sub-steps run as two BE halves
  for (int p = 0; p < n_mat; ++p) {
    const double t_end = grid.maturities[p];
    const double seg = t_end - t;
    if (seg < 0.0) throw DataError("solve_dupire: maturities not ascending");
    if (seg > 0.0) {
      const int n_sub = std::max(1, static_cast<int>(std::ceil(seg / cfg.max_time_step)));
      const double dt = seg / n_sub;
      for (int s = 0; s < n_sub; ++s) {
        if (global_step < kRannacherSteps) {
          const int base = global_step;
          theta_step(t, 0.5 * dt, 1.0);
          theta_step(t + 0.5 * dt, 0.5 * dt, 1.0);
          global_step = base + 1;  // the pair counts as one scheme step
        } else {
          theta_step(t, dt, 0.5);
        }
        t += dt;
      }
      t = t_end;  // guard against drift
    }
    for (int j = 0; j < n_str; ++j) out.values(p, j) = price[axis.grid_offset + j];
  }
  return out;
}

/// Local volatility backed out of a price surface by inverting the forward
/// equation with finite differences:
///   sigma^2 = (dC/dT + (r-q) K dC/dK + q C) / ((1/2) K^2 d2C/dK2).
/// Nodes where the ratio is non-positive (butterfly/calendar arbitrage in
/// the discrete surface) are flagged NaN rather than failing.
inline MatrixXd dupire_extract(const PriceSurface& surface, const MarketContext& ctx,
                               const InputGrid& grid) {
  const int n_mat = grid.n_maturities();
  const int n_str = grid.n_strikes();
  if (n_mat < 3 || n_str < 3)
    throw DataError("dupire_extract: need at least a 3x3 grid");
  const MatrixXd& c = surface.values;
  if (c.rows() != n_mat || c.cols() != n_str)
    throw DataError("dupire_extract: surface shape does not match grid");
  const auto st_k = detail::make_stencil(grid.strikes);
  const double r = ctx.rate, q = ctx.dividend;

  MatrixXd sig(n_mat, n_str);
  for (int i = 0; i < n_mat; ++i) {
    for (int j = 0; j < n_str; ++j) {
      double c_t;
      if (i == 0)
        c_t = (c(1, j) - c(0, j)) / (grid.maturities[1] - grid.maturities[0]);
      else if (i == n_mat - 1)
        c_t = (c(i, j) - c(i - 1, j)) / (grid.maturities[i] - grid.maturities[i - 1]);
      else {
        const double hm = grid.maturities[i] - grid.maturities[i - 1];
        const double hp = grid.maturities[i + 1] - grid.maturities[i];
        c_t = (-hp / (hm * (hm + hp))) * c(i - 1, j) +
              ((hp - hm) / (hm * hp)) * c(i, j) +
              (hm / (hp * (hm + hp))) * c(i + 1, j);
      }
      const int jc = std::clamp(j, 1, n_str - 2);  // edge columns reuse adjacent stencil
      const double c_k = st_k.d1m[jc] * c(i, jc - 1) + st_k.d1c[jc] * c(i, jc) +
                         st_k.d1p[jc] * c(i, jc + 1);
      const double c_kk = st_k.d2m[jc] * c(i, jc - 1) + st_k.d2c[jc] * c(i, jc) +
                          st_k.d2p[jc] * c(i, jc + 1);
      const double k = grid.strikes[j];
      const double numer = c_t + (r - q) * k * c_k + q * c(i, j);
      const double denom = 0.5 * k * k * c_kk;
      sig(i, j) = (denom > 0.0 && numer / denom > 0.0) ? std::sqrt(numer / denom) : kNaN;
    }
  }
  return sig;
}

/// Sum of squared model-to-mid errors over the observed quotes.
inline double sse(const PriceSurface& surface, const MarketSnapshot& snapshot,
                  const InputGrid& grid) {
  double total = 0.0;
  for (const auto& [qi, node] : grid.market_index) {
    const double model = surface.values(grid.mat_of(node), grid.strike_of(node));
    total += sqr(model - snapshot.quotes[qi].mid);
  }
  return total;
}

}  // namespace bayeslv
