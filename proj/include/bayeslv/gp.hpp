#pragma once

#include <memory>
#include <vector>

#include "bayeslv/covariance.hpp"

namespace bayeslv {

struct GpMoments {
  VectorXd mean;
  MatrixXd covariance;
};

inline std::vector<ScaledPoint> grid_scaled_points(const InputGrid& grid) {
  std::vector<ScaledPoint> pts;
  pts.reserve(grid.size());
  for (int n = 0; n < grid.size(); ++n) pts.push_back(grid.scaled_node(n));
  return pts;
}

/// Conditional moments of the zero-mean GP at `targets` given latent values
/// at `train_points`:
///   mean = K_*f K^{-1} f,   cov = K_** - K_*f K^{-1} K_f*  (symmetrised).
/// The constant mean level enters only through the volatility link, so it
/// does not appear here.
inline GpMoments gp_predict(const CovarianceOp& prior, const KernelSpec& spec,
                            const std::vector<ScaledPoint>& train_points,
                            const VectorXd& latent,
                            const std::vector<ScaledPoint>& targets) {
  const Eigen::Index n_train = static_cast<Eigen::Index>(train_points.size());
  const Eigen::Index n_out = static_cast<Eigen::Index>(targets.size());
  if (latent.size() != n_train || prior.dim() != n_train)
    throw DataError("gp_predict: latent size does not match training points");

  MatrixXd cross(n_out, n_train);
  for (Eigen::Index i = 0; i < n_out; ++i)
    for (Eigen::Index j = 0; j < n_train; ++j)
      cross(i, j) = kernel_eval(spec, targets[i], train_points[j]);

  GpMoments out;
  out.mean = cross * prior.solve(latent);

  MatrixXd kinv_cross_t(n_train, n_out);
  for (Eigen::Index i = 0; i < n_out; ++i)
    kinv_cross_t.col(i) = prior.solve(cross.row(i).transpose());

  MatrixXd cov(n_out, n_out);
  for (Eigen::Index i = 0; i < n_out; ++i)
    for (Eigen::Index j = 0; j < n_out; ++j)
      cov(i, j) = kernel_eval(spec, targets[i], targets[j]);
  cov -= cross * kinv_cross_t;
  out.covariance = 0.5 * (cov + cov.transpose());
  return out;
}

/// Draw f = L nu with nu standard normal.
inline VectorXd sample_prior(const CovarianceOp& prior, Rng& rng) {
  return prior.chol_multiply(rng.normal_vector(prior.dim()));
}

/// Draw from N(mean, cov) with escalating diagonal jitter on failure.
inline VectorXd sample_gaussian(const GpMoments& moments, Rng& rng,
                                double jitter_floor = 1e-12) {
  const Eigen::Index n = moments.mean.size();
  MatrixXd cov = moments.covariance;
  const double scale = std::max(cov.diagonal().maxCoeff(), 1.0);
  double jitter = 0.0;
  for (int attempt = 0; attempt < 8; ++attempt) {
    Eigen::LLT<MatrixXd> llt(cov);
    if (llt.info() == Eigen::Success)
      return moments.mean + llt.matrixL() * rng.normal_vector(n);
    jitter = jitter == 0.0 ? jitter_floor * scale : jitter * 10.0;
    cov = moments.covariance;
    cov.diagonal().array() += jitter;
  }
  throw NumericalError("sample_gaussian: covariance not factorisable");
}

}  // namespace bayeslv
