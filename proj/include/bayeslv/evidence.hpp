#pragma once

#include <string>

#include "bayeslv/covariance.hpp"
#include "bayeslv/sampler.hpp"

namespace bayeslv {

struct EvidenceReport {
  double log_evidence = 0.0;
  double log_best_fit_likelihood = 0.0;
  double log_occam_gp = 0.0;
  double log_occam_hyper = 0.0;
  KernelFamily family = KernelFamily::SE;
  // posterior covariances are MCMC sample covariances, not Hessian-based
  std::string covariance_estimator = "mcmc_sample_covariance";

  double occam_gp() const { return std::exp(log_occam_gp); }
  double occam_hyper() const { return std::exp(log_occam_hyper); }
};

namespace detail {

// log-determinant of a symmetric PSD matrix with an eigenvalue floor
inline double floored_log_det(const MatrixXd& m, double floor_value) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(m);
  if (es.info() != Eigen::Success)
    throw NumericalError("laplace_evidence: eigendecomposition of sample covariance failed");
  double acc = 0.0;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double lam = es.eigenvalues()(i);
    if (!std::isfinite(lam))
      throw NumericalError("laplace_evidence: singular sample covariance");
    acc += std::log(std::max(lam, floor_value));
  }
  return acc;
}

inline MatrixXd sample_covariance(const std::vector<VectorXd>& rows) {
  const int m = static_cast<int>(rows.size());
  const Eigen::Index n = rows.front().size();
  VectorXd mean = VectorXd::Zero(n);
  for (const auto& r : rows) mean += r;
  mean /= m;
  MatrixXd cov = MatrixXd::Zero(n, n);
  for (const auto& r : rows) {
    const VectorXd d = r - mean;
    cov.noalias() += d * d.transpose();
  }
  return cov / static_cast<double>(m - 1);
}

}  // namespace detail

/// Laplace-style model evidence from a posterior sample:
///   log p(data | family) ~ best-fit log-likelihood
///     + (1/2) [log|K_post(f)| - log|K_prior(kappa_map)|]      (GP Occam)
///     + (1/2) [log|K_post(xi)| - log|I|]                      (hyper Occam)
/// Posterior covariances come from the MCMC sample with an eigenvalue floor
/// of 1e-10 for log-determinant stability.
inline EvidenceReport laplace_evidence(const PosteriorSample& sample,
                                       double eigen_floor = 1e-10) {
  if (sample.states.empty()) throw DataError("laplace_evidence: empty sample");
  const int d = sample.states.front().hyper.dim();
  if (static_cast<int>(sample.states.size()) < 10 * d)
    throw DataError("laplace_evidence: need at least 10 states per hyperparameter");

  const auto& map_state = map_estimate(sample);

  std::vector<VectorXd> latents, xis;
  for (const auto& st : sample.states) {
    latents.push_back(st.latent);
    xis.push_back(st.hyper.xi);
  }
  const double log_det_post_f =
      detail::floored_log_det(detail::sample_covariance(latents), eigen_floor);
  const double log_det_post_xi =
      detail::floored_log_det(detail::sample_covariance(xis), eigen_floor);

  const auto prior = build_covariance(map_state.hyper.kernel, sample.grid);
  const double log_det_prior_f = prior->log_det();

  EvidenceReport report;
  report.family = sample.family;
  report.log_best_fit_likelihood = map_state.log_lik;
  report.log_occam_gp = 0.5 * (log_det_post_f - log_det_prior_f);
  report.log_occam_hyper = 0.5 * log_det_post_xi;  // prior is standard normal
  report.log_evidence = report.log_best_fit_likelihood + report.log_occam_gp +
                        report.log_occam_hyper;
  return report;
}

}  // namespace bayeslv
