#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "bayeslv/black_scholes.hpp"
#include "bayeslv/common.hpp"

namespace bayeslv {

struct MarketQuote {
  double strike = 0.0;
  double maturity = 0.0;  // years, ACT/365 from the observation date
  double bid = 0.0;
  double ask = 0.0;
  double mid = 0.0;  // (bid+ask)/2
};

struct MarketContext {
  double spot = 0.0;
  double rate = 0.0;
  double dividend = 0.0;
};

struct MarketSnapshot {
  std::string observation_date;  // ISO-8601
  MarketContext context;
  std::vector<MarketQuote> quotes;

  double spot() const { return context.spot; }
  double rate() const { return context.rate; }
  double dividend() const { return context.dividend; }
};

struct AffineMap {
  double lo = 0.0;
  double hi = 1.0;
  double to_unit(double x) const { return (x - lo) / (hi - lo); }
  double from_unit(double u) const { return lo + u * (hi - lo); }
};

/// One point of the (scaled) GP input space. `time` is the calendar-time
/// coordinate used only in the time-augmented model; 0 otherwise.
struct ScaledPoint {
  double maturity = 0.0;
  double strike = 0.0;
  double time = 0.0;
};

// Cartesian calibration grid. Node index = maturity_index * n_strikes + strike_index.
struct InputGrid {
  std::vector<double> maturities;  // ascending, years
  std::vector<double> strikes;     // ascending, currency
  std::vector<std::pair<int, int>> market_index;  // (quote index, node index)
  AffineMap maturity_scale;
  AffineMap strike_scale;
  bool scaled = false;

  int n_maturities() const { return static_cast<int>(maturities.size()); }
  int n_strikes() const { return static_cast<int>(strikes.size()); }
  int size() const { return n_maturities() * n_strikes(); }
  int node(int mat_idx, int strike_idx) const { return mat_idx * n_strikes() + strike_idx; }
  int mat_of(int node_idx) const { return node_idx / n_strikes(); }
  int strike_of(int node_idx) const { return node_idx % n_strikes(); }

  ScaledPoint scaled_node(int node_idx) const {
    return {maturity_scale.to_unit(maturities[mat_of(node_idx)]),
            strike_scale.to_unit(strikes[strike_of(node_idx)]), 0.0};
  }

  ScaledPoint scale_point(double maturity, double strike) const {
    return {maturity_scale.to_unit(maturity), strike_scale.to_unit(strike), 0.0};
  }

  double coverage() const {
    return size() == 0 ? 0.0 : static_cast<double>(market_index.size()) / size();
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(trim(field));
  return out;
}

// Days since civil epoch 1970-01-01 (proleptic Gregorian).
inline long days_from_civil(int y, int m, int d) {
  y -= m <= 2;
  const long era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153u * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<long>(doe) - 719468;
}

inline long parse_iso_date(const std::string& s, int line_no) {
  int y = 0, m = 0, d = 0;
  if (std::sscanf(s.c_str(), "%d-%d-%d", &y, &m, &d) != 3 || m < 1 || m > 12 ||
      d < 1 || d > 31)
    throw DataError("parse_quotes: malformed date '" + s + "' at line " +
                    std::to_string(line_no));
  return days_from_civil(y, m, d);
}

inline double parse_number(const std::string& s, int line_no, const char* what) {
  try {
    size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError(std::string("parse_quotes: malformed ") + what + " '" + s +
                    "' at line " + std::to_string(line_no));
  }
}

}  // namespace detail

/// Parse a quote CSV with header `date,expiry,strike,bid,ask` into one
/// snapshot per observation date (ascending by date). Maturities are ACT/365.
inline std::vector<MarketSnapshot> parse_quotes(const std::string& path,
                                                const MarketContext& context) {
  if (context.spot <= 0.0) throw DataError("parse_quotes: missing or non-positive spot");
  std::ifstream in(path);
  if (!in) throw DataError("parse_quotes: cannot open '" + path + "'");

  std::map<long, MarketSnapshot> by_date;
  std::map<long, std::string> date_str;
  std::string line;
  int line_no = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    auto fields = detail::split_csv_line(line);
    if (!header_seen) {
      header_seen = true;
      if (fields.size() >= 1 && fields[0] == "date") continue;  // header row
    }
    if (fields.size() != 5)
      throw DataError("parse_quotes: expected 5 columns at line " + std::to_string(line_no));
    const long obs = detail::parse_iso_date(fields[0], line_no);
    const long exp = detail::parse_iso_date(fields[1], line_no);
    MarketQuote q;
    q.strike = detail::parse_number(fields[2], line_no, "strike");
    q.bid = detail::parse_number(fields[3], line_no, "bid");
    q.ask = detail::parse_number(fields[4], line_no, "ask");
    q.maturity = static_cast<double>(exp - obs) / 365.0;
    q.mid = 0.5 * (q.bid + q.ask);
    if (q.bid < 0.0)
      throw DataError("parse_quotes: negative bid at line " + std::to_string(line_no));
    if (q.ask < q.bid)
      throw DataError("parse_quotes: ask < bid at line " + std::to_string(line_no));
    if (q.maturity <= 0.0)
      throw DataError("parse_quotes: expiry not after observation date at line " +
                      std::to_string(line_no));
    auto& snap = by_date[obs];
    snap.context = context;
    snap.quotes.push_back(q);
    date_str[obs] = fields[0];
  }
  if (by_date.empty()) throw DataError("parse_quotes: no quotes in '" + path + "'");

  std::vector<MarketSnapshot> out;
  for (auto& [obs, snap] : by_date) {
    snap.observation_date = date_str[obs];
    // reject duplicate (strike, maturity) pairs within a date
    std::set<std::pair<double, double>> seen;
    for (const auto& q : snap.quotes)
      if (!seen.insert({q.strike, q.maturity}).second)
        throw DataError("parse_quotes: duplicate (strike, expiry) on " + snap.observation_date);
    out.push_back(std::move(snap));
  }
  return out;
}

inline MarketSnapshot parse_single_snapshot(const std::string& path,
                                            const MarketContext& context) {
  auto snaps = parse_quotes(path, context);
  if (snaps.size() != 1)
    throw DataError("parse_quotes: expected a single observation date in '" + path + "'");
  return std::move(snaps.front());
}

/// Drop quotes with zero bid, maturity below 7 days, or mid-price implied
/// volatility outside [0.05, 1]. Quotes whose mid admits no implied
/// volatility at all are dropped too. Order preserved; idempotent.
inline MarketSnapshot filter_quotes(const MarketSnapshot& snapshot) {
  MarketSnapshot out = snapshot;
  out.quotes.clear();
  for (const auto& q : snapshot.quotes) {
    if (q.bid <= 0.0) continue;
    if (q.maturity < 7.0 / 365.0) continue;
    double iv;
    try {
      iv = implied_vol(q.mid, snapshot.spot(), q.strike, q.maturity,
                       snapshot.rate(), snapshot.dividend());
    } catch (const DataError&) {
      continue;
    }
    if (iv < 0.05 || iv > 1.0) continue;
    out.quotes.push_back(q);
  }
  return out;
}

/// Attach every quote sitting exactly on a grid node (float equality of the
/// axis values, which are taken verbatim from the data).
inline void build_market_index(const MarketSnapshot& snapshot, InputGrid& grid) {
  grid.market_index.clear();
  for (int qi = 0; qi < static_cast<int>(snapshot.quotes.size()); ++qi) {
    const auto& q = snapshot.quotes[qi];
    const auto mi = std::find(grid.maturities.begin(), grid.maturities.end(), q.maturity);
    const auto si = std::find(grid.strikes.begin(), grid.strikes.end(), q.strike);
    if (mi == grid.maturities.end() || si == grid.strikes.end()) continue;
    grid.market_index.emplace_back(
        qi, grid.node(static_cast<int>(mi - grid.maturities.begin()),
                      static_cast<int>(si - grid.strikes.begin())));
  }
}

/// Greedy subgrid selection. Strikes are added by quote count, candidates
/// restricted to strikes outside the currently selected strike range; ties
/// go to the lower strike. Maturities are then pruned by dropping the one
/// with the fewest quotes among selected strikes; ties drop the later one.
inline InputGrid select_subgrid(const MarketSnapshot& snapshot, int n_strikes,
                                int n_maturities) {
  std::map<double, int> strike_counts;  // quotes per distinct strike
  std::set<double> all_maturities;
  for (const auto& q : snapshot.quotes) {
    strike_counts[q.strike]++;
    all_maturities.insert(q.maturity);
  }
  if (static_cast<int>(strike_counts.size()) < n_strikes)
    throw DataError("select_subgrid: fewer distinct strikes than requested");
  if (static_cast<int>(all_maturities.size()) < n_maturities)
    throw DataError("select_subgrid: fewer distinct maturities than requested");

  std::set<double> chosen_strikes;
  double lo = 0.0, hi = 0.0;
  for (int pick = 0; pick < n_strikes; ++pick) {
    double best_strike = kNaN;
    int best_count = -1;
    for (const auto& [strike, count] : strike_counts) {
      if (!chosen_strikes.empty() && strike >= lo && strike <= hi) continue;
      if (count > best_count) {  // std::map iterates ascending, ties keep lower
        best_count = count;
        best_strike = strike;
      }
    }
    if (best_count < 0)
      throw DataError("select_subgrid: ran out of candidate strikes");
    chosen_strikes.insert(best_strike);
    lo = *chosen_strikes.begin();
    hi = *chosen_strikes.rbegin();
  }

  // quote count per maturity restricted to the chosen strikes
  std::map<double, int> maturity_counts;
  for (double t : all_maturities) maturity_counts[t] = 0;
  for (const auto& q : snapshot.quotes)
    if (chosen_strikes.count(q.strike)) maturity_counts[q.maturity]++;
  while (static_cast<int>(maturity_counts.size()) > n_maturities) {
    auto worst = maturity_counts.begin();
    for (auto it = maturity_counts.begin(); it != maturity_counts.end(); ++it)
      if (it->second <= worst->second) worst = it;  // ties: later maturity wins the drop
    maturity_counts.erase(worst);
  }

  InputGrid grid;
  grid.strikes.assign(chosen_strikes.begin(), chosen_strikes.end());
  for (const auto& [t, cnt] : maturity_counts) grid.maturities.push_back(t);

  build_market_index(snapshot, grid);
  return grid;
}

/// Record affine maps taking each grid axis onto [0,1].
inline InputGrid scale_to_unit(const InputGrid& grid) {
  if (grid.maturities.size() < 2 || grid.strikes.size() < 2)
    throw DataError("scale_to_unit: need at least two distinct values per axis");
  InputGrid out = grid;
  out.maturity_scale = {grid.maturities.front(), grid.maturities.back()};
  out.strike_scale = {grid.strikes.front(), grid.strikes.back()};
  if (out.maturity_scale.hi <= out.maturity_scale.lo ||
      out.strike_scale.hi <= out.strike_scale.lo)
    throw DataError("scale_to_unit: zero range on an axis");
  out.scaled = true;
  return out;
}

/// Grid whose axes are all distinct maturities/strikes in the snapshot.
inline InputGrid full_cartesian_grid(const MarketSnapshot& snapshot) {
  std::set<double> ts, ks;
  for (const auto& q : snapshot.quotes) {
    ts.insert(q.maturity);
    ks.insert(q.strike);
  }
  InputGrid grid;
  grid.maturities.assign(ts.begin(), ts.end());
  grid.strikes.assign(ks.begin(), ks.end());
  build_market_index(snapshot, grid);
  return grid;
}

}  // namespace bayeslv
