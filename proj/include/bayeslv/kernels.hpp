#pragma once

#include <cmath>
#include <optional>
#include <string>

#include "bayeslv/common.hpp"
#include "bayeslv/market_data.hpp"

namespace bayeslv {

enum class KernelFamily { SE, Matern32 };

inline std::string to_string(KernelFamily f) {
  return f == KernelFamily::SE ? "se" : "matern32";
}

inline KernelFamily kernel_family_from_string(const std::string& s) {
  if (s == "se") return KernelFamily::SE;
  if (s == "matern32") return KernelFamily::Matern32;
  throw DataError("unknown kernel family '" + s + "'");
}

/// Product kernel over scaled (maturity, strike[, calendar-time]) inputs.
struct KernelSpec {
  KernelFamily family = KernelFamily::SE;
  double length_scale_T = 0.5;
  double length_scale_K = 0.5;
  double signal_sd = 0.5;
  std::optional<double> length_scale_t;  // set in time-augmented mode

  void validate() const {
    if (!(length_scale_T > 0.0 && length_scale_K > 0.0 && signal_sd > 0.0))
      throw DataError("KernelSpec: length scales and signal sd must be positive");
    if (length_scale_t && !(*length_scale_t > 0.0))
      throw DataError("KernelSpec: time length scale must be positive");
  }
};

namespace detail {

inline double se_factor(double dist, double l) {
  return std::exp(-0.5 * sqr(dist / l));
}

inline double matern32_factor(double dist, double l) {
  const double s = std::sqrt(3.0) * std::abs(dist) / l;
  return (1.0 + s) * std::exp(-s);
}

inline double axis_factor(KernelFamily family, double dist, double l) {
  return family == KernelFamily::SE ? se_factor(dist, l) : matern32_factor(dist, l);
}

}  // namespace detail

/// Unit-variance correlation: the product of per-axis factors without the
/// signal variance. The calendar-time factor applies only when configured.
inline double kernel_correlation(const KernelSpec& spec, const ScaledPoint& a,
                                 const ScaledPoint& b) {
  double corr =
      detail::axis_factor(spec.family, a.maturity - b.maturity, spec.length_scale_T) *
      detail::axis_factor(spec.family, a.strike - b.strike, spec.length_scale_K);
  if (spec.length_scale_t)
    corr *= detail::axis_factor(spec.family, a.time - b.time, *spec.length_scale_t);
  return corr;
}

inline double kernel_eval(const KernelSpec& spec, const ScaledPoint& a,
                          const ScaledPoint& b) {
  return sqr(spec.signal_sd) * kernel_correlation(spec, a, b);
}

// --- scaled-sigmoid hyperprior transform ------------------------------------

struct Bounds {
  double lo = 0.0;
  double hi = 1.0;
};

/// theta = lo + (hi - lo) / (1 + exp(-xi)); bijection from R onto (lo, hi).
inline double ssg(double xi, const Bounds& b) {
  if (!(b.lo < b.hi)) throw DataError("ssg: bounds must satisfy lo < hi");
  return b.lo + (b.hi - b.lo) / (1.0 + std::exp(-xi));
}

inline double ssg_inverse(double theta, const Bounds& b) {
  if (!(b.lo < b.hi)) throw DataError("ssg_inverse: bounds must satisfy lo < hi");
  if (!(theta > b.lo && theta < b.hi))
    throw DataError("ssg_inverse: value on or outside bounds");
  const double u = (theta - b.lo) / (b.hi - b.lo);
  return std::log(u / (1.0 - u));
}

/// Per-parameter bounds of the scaled-sigmoid hyperpriors (xi ~ N(0,1)).
struct HyperpriorSpec {
  Bounds length_scale_T{0.0, 1.0};
  Bounds length_scale_K{0.0, 1.0};
  Bounds length_scale_t{0.0, 1.0};
  Bounds signal_sd{0.0, 1.0};
  Bounds mean_level{-6.0, std::log(0.5)};
  Bounds noise_sd{0.0, 0.75};

  void validate() const {
    for (const Bounds* b : {&length_scale_T, &length_scale_K, &length_scale_t,
                            &signal_sd, &mean_level, &noise_sd})
      if (!(b->lo < b->hi) || !std::isfinite(b->lo) || !std::isfinite(b->hi))
        throw DataError("HyperpriorSpec: bounds must be finite with lo < hi");
  }
};

}  // namespace bayeslv
