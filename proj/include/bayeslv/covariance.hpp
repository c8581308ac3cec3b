#pragma once

#include <memory>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "bayeslv/common.hpp"
#include "bayeslv/kernels.hpp"
#include "bayeslv/market_data.hpp"

namespace bayeslv {

// Zero-mean Gaussian prior operator over latent grid values. Implementations
// expose the Cholesky factor L (K = L L^T), the log-determinant, and the
// spectral operations needed by the surrogate-data hyperparameter move with
// surrogate covariance S = s*I:
//   R = S - S (S + K)^{-1} S,   mean factor  R S^{-1} = K (K + sI)^{-1}.
class CovarianceOp {
 public:
  virtual ~CovarianceOp() = default;
  virtual Eigen::Index dim() const = 0;
  virtual VectorXd multiply(const VectorXd& x) const = 0;       // K x
  virtual VectorXd solve(const VectorXd& x) const = 0;          // K^{-1} x
  virtual VectorXd chol_multiply(const VectorXd& x) const = 0;  // L x
  virtual VectorXd chol_solve(const VectorXd& x) const = 0;     // L^{-1} x
  virtual double log_det() const = 0;

  virtual double log_det_plus(double s) const = 0;                        // log|K+sI|
  virtual VectorXd solve_plus(double s, const VectorXd& x) const = 0;     // (K+sI)^{-1} x
  virtual VectorXd sdss_mean(double s, const VectorXd& g) const = 0;      // K(K+sI)^{-1} g
  virtual VectorXd sdss_sqrt_multiply(double s, const VectorXd& x) const = 0;  // R^{1/2} x
  virtual VectorXd sdss_sqrt_solve(double s, const VectorXd& x) const = 0;     // R^{-1/2} x

  /// log N(x | 0, K)
  double log_density(const VectorXd& x) const {
    const VectorXd w = chol_solve(x);
    return -0.5 * w.squaredNorm() - 0.5 * log_det() -
           0.5 * static_cast<double>(dim()) * std::log(2.0 * M_PI);
  }

  /// log N(x | 0, K + sI)
  double log_density_plus(double s, const VectorXd& x) const {
    return -0.5 * x.dot(solve_plus(s, x)) - 0.5 * log_det_plus(s) -
           0.5 * static_cast<double>(dim()) * std::log(2.0 * M_PI);
  }
};

struct JitterPolicy {
  double initial = 1e-8;  // relative to signal variance
  double max = 1e-4;
  double growth = 10.0;
};

namespace detail {

inline double chol_log_det(const Eigen::LLT<MatrixXd>& llt) {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

// r(lambda) = s*lambda/(s+lambda), the SDSS conditional-covariance spectrum.
inline double sdss_spectrum(double s, double lambda) { return s * lambda / (s + lambda); }

}  // namespace detail

/// Dense covariance over an arbitrary point set, with diagonal jitter
/// escalated until the Cholesky succeeds.
class DenseCovariance : public CovarianceOp {
 public:
  DenseCovariance(const KernelSpec& spec, const std::vector<ScaledPoint>& points,
                  const JitterPolicy& policy = {})
      : spec_(spec) {
    const Eigen::Index n = static_cast<Eigen::Index>(points.size());
    matrix_.resize(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j <= i; ++j)
        matrix_(i, j) = matrix_(j, i) = kernel_eval(spec, points[i], points[j]);
    factorise(policy);
  }

  /// Takes an explicit (already jittered) covariance matrix.
  DenseCovariance(const KernelSpec& spec, MatrixXd matrix)
      : spec_(spec), matrix_(std::move(matrix)) {
    llt_.compute(matrix_);
    if (llt_.info() != Eigen::Success)
      throw NumericalError("DenseCovariance: Cholesky factorisation failed");
  }

  Eigen::Index dim() const override { return matrix_.rows(); }
  VectorXd multiply(const VectorXd& x) const override { return matrix_ * x; }
  VectorXd solve(const VectorXd& x) const override { return llt_.solve(x); }
  VectorXd chol_multiply(const VectorXd& x) const override {
    return llt_.matrixL() * x;
  }
  VectorXd chol_solve(const VectorXd& x) const override {
    return llt_.matrixL().solve(x);
  }
  double log_det() const override { return detail::chol_log_det(llt_); }

  double log_det_plus(double s) const override {
    double acc = 0.0;
    for (double lam : eigenvalues()) acc += std::log(lam + s);
    return acc;
  }
  VectorXd solve_plus(double s, const VectorXd& x) const override {
    return spectral_apply(x, [s](double lam) { return 1.0 / (lam + s); });
  }
  VectorXd sdss_mean(double s, const VectorXd& g) const override {
    return spectral_apply(g, [s](double lam) { return lam / (lam + s); });
  }
  VectorXd sdss_sqrt_multiply(double s, const VectorXd& x) const override {
    return spectral_apply(
        x, [s](double lam) { return std::sqrt(detail::sdss_spectrum(s, lam)); });
  }
  VectorXd sdss_sqrt_solve(double s, const VectorXd& x) const override {
    return spectral_apply(
        x, [s](double lam) { return 1.0 / std::sqrt(detail::sdss_spectrum(s, lam)); });
  }

  const MatrixXd& matrix() const { return matrix_; }

 private:
  void factorise(const JitterPolicy& policy) {
    const double scale = sqr(spec_.signal_sd);
    double jitter = policy.initial;
    while (true) {
      MatrixXd jittered = matrix_;
      jittered.diagonal().array() += jitter * scale;
      llt_.compute(jittered);
      if (llt_.info() == Eigen::Success) {
        matrix_ = std::move(jittered);
        return;
      }
      if (jitter >= policy.max)
        throw NumericalError("DenseCovariance: Cholesky failed after jitter escalation");
      jitter *= policy.growth;
    }
  }

  const std::vector<double>& eigenvalues() const {
    ensure_eig();
    return eigvals_;
  }

  void ensure_eig() const {
    if (!eigvecs_.size()) {
      Eigen::SelfAdjointEigenSolver<MatrixXd> es(matrix_);
      if (es.info() != Eigen::Success)
        throw NumericalError("DenseCovariance: eigendecomposition failed");
      eigvecs_ = es.eigenvectors();
      eigvals_.assign(es.eigenvalues().data(), es.eigenvalues().data() + dim());
      for (double& lam : eigvals_) lam = std::max(lam, 0.0);
    }
  }

  template <class Fn>
  VectorXd spectral_apply(const VectorXd& x, Fn fn) const {
    ensure_eig();
    VectorXd u = eigvecs_.transpose() * x;
    for (Eigen::Index i = 0; i < u.size(); ++i) u(i) *= fn(eigvals_[i]);
    return eigvecs_ * u;
  }

  KernelSpec spec_;
  MatrixXd matrix_;
  Eigen::LLT<MatrixXd> llt_;
  mutable MatrixXd eigvecs_;
  mutable std::vector<double> eigvals_;
};

/// Kronecker-factored covariance on a Cartesian grid:
///   K = signal_sd^2 * (C_T + d*I) (x) (C_K + d*I)
/// with per-axis jitter d chosen so both factors stay positive definite.
/// Work is O(I^3 + J^3) for factorisations and O(N(I+J)) per apply; the
/// `flops()` counter tracks an estimate for the complexity tests.
class KroneckerCovariance : public CovarianceOp {
 public:
  KroneckerCovariance(const KernelSpec& spec, const InputGrid& grid,
                      const JitterPolicy& policy = {})
      : spec_(spec),
        n_mat_(grid.n_maturities()),
        n_str_(grid.n_strikes()) {
    MatrixXd corr_t(n_mat_, n_mat_), corr_k(n_str_, n_str_);
    KernelSpec unit = spec;
    unit.signal_sd = 1.0;
    for (int i = 0; i < n_mat_; ++i)
      for (int j = 0; j <= i; ++j) {
        ScaledPoint a{grid.maturity_scale.to_unit(grid.maturities[i]), 0.0, 0.0};
        ScaledPoint b{grid.maturity_scale.to_unit(grid.maturities[j]), 0.0, 0.0};
        corr_t(i, j) = corr_t(j, i) = kernel_correlation(unit, a, b);
      }
    for (int i = 0; i < n_str_; ++i)
      for (int j = 0; j <= i; ++j) {
        ScaledPoint a{0.0, grid.strike_scale.to_unit(grid.strikes[i]), 0.0};
        ScaledPoint b{0.0, grid.strike_scale.to_unit(grid.strikes[j]), 0.0};
        corr_k(i, j) = corr_k(j, i) = kernel_correlation(unit, a, b);
      }
    factorise(std::move(corr_t), std::move(corr_k), policy);
  }

  Eigen::Index dim() const override {
    return static_cast<Eigen::Index>(n_mat_) * n_str_;
  }

  VectorXd multiply(const VectorXd& x) const override {
    return apply_pair(factor_t_, factor_k_, x, sqr(spec_.signal_sd));
  }

  VectorXd solve(const VectorXd& x) const override {
    // K^{-1} = s^-2 * A_T^{-1} (x) A_K^{-1} via the factor Choleskys
    const auto X = as_matrix(x);
    MatrixXd z = llt_t_.solve(X);
    MatrixXd y = llt_k_.solve(z.transpose()).transpose();
    count_apply(4);
    return from_matrix(y / sqr(spec_.signal_sd));
  }

  VectorXd chol_multiply(const VectorXd& x) const override {
    const auto X = as_matrix(x);
    MatrixXd y = llt_t_.matrixL() * X;
    y = (llt_k_.matrixL() * y.transpose()).transpose();
    count_apply(2);
    return from_matrix(y * spec_.signal_sd);
  }

  VectorXd chol_solve(const VectorXd& x) const override {
    const auto X = as_matrix(x);
    MatrixXd z = llt_t_.matrixL().solve(X);
    MatrixXd y = llt_k_.matrixL().solve(z.transpose()).transpose();
    count_apply(2);
    return from_matrix(y / spec_.signal_sd);
  }

  double log_det() const override {
    return static_cast<double>(dim()) * std::log(sqr(spec_.signal_sd)) +
           n_str_ * detail::chol_log_det(llt_t_) + n_mat_ * detail::chol_log_det(llt_k_);
  }

  double log_det_plus(double s) const override {
    ensure_eig();
    double acc = 0.0;
    for (int i = 0; i < n_mat_; ++i)
      for (int j = 0; j < n_str_; ++j) acc += std::log(lambda(i, j) + s);
    return acc;
  }
  VectorXd solve_plus(double s, const VectorXd& x) const override {
    return spectral_apply(x, [s](double lam) { return 1.0 / (lam + s); });
  }
  VectorXd sdss_mean(double s, const VectorXd& g) const override {
    return spectral_apply(g, [s](double lam) { return lam / (lam + s); });
  }
  VectorXd sdss_sqrt_multiply(double s, const VectorXd& x) const override {
    return spectral_apply(
        x, [s](double lam) { return std::sqrt(detail::sdss_spectrum(s, lam)); });
  }
  VectorXd sdss_sqrt_solve(double s, const VectorXd& x) const override {
    return spectral_apply(
        x, [s](double lam) { return 1.0 / std::sqrt(detail::sdss_spectrum(s, lam)); });
  }

  /// Densely expanded covariance (for oracle comparisons).
  MatrixXd dense_matrix() const {
    MatrixXd out(dim(), dim());
    for (int i1 = 0; i1 < n_mat_; ++i1)
      for (int j1 = 0; j1 < n_str_; ++j1)
        for (int i2 = 0; i2 < n_mat_; ++i2)
          for (int j2 = 0; j2 < n_str_; ++j2)
            out(i1 * n_str_ + j1, i2 * n_str_ + j2) =
                sqr(spec_.signal_sd) * factor_t_(i1, i2) * factor_k_(j1, j2);
    return out;
  }

  std::uint64_t flops() const { return flops_; }
  void reset_flops() { flops_ = 0; }

 private:
  void factorise(MatrixXd corr_t, MatrixXd corr_k, const JitterPolicy& policy) {
    double jitter = 0.5 * policy.initial;  // per-axis half so the product diagonal
    while (true) {                         // carries ~policy.initial in total
      factor_t_ = corr_t;
      factor_t_.diagonal().array() += jitter;
      factor_k_ = corr_k;
      factor_k_.diagonal().array() += jitter;
      llt_t_.compute(factor_t_);
      llt_k_.compute(factor_k_);
      if (llt_t_.info() == Eigen::Success && llt_k_.info() == Eigen::Success) break;
      if (jitter >= 0.5 * policy.max)
        throw NumericalError("KroneckerCovariance: Cholesky failed after jitter escalation");
      jitter *= policy.growth;
    }
    eig_done_ = false;
    flops_ += static_cast<std::uint64_t>(n_mat_) * n_mat_ * n_mat_ / 3 +
              static_cast<std::uint64_t>(n_str_) * n_str_ * n_str_ / 3;
  }

  using RowMajorMap = Eigen::Map<
      const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

  RowMajorMap as_matrix(const VectorXd& x) const {
    if (x.size() != dim()) throw DataError("KroneckerCovariance: size mismatch");
    return RowMajorMap(x.data(), n_mat_, n_str_);
  }

  VectorXd from_matrix(const MatrixXd& y) const {
    VectorXd out(dim());
    for (int i = 0; i < n_mat_; ++i)
      for (int j = 0; j < n_str_; ++j) out(i * n_str_ + j) = y(i, j);
    return out;
  }

  VectorXd apply_pair(const MatrixXd& a_t, const MatrixXd& a_k, const VectorXd& x,
                      double scale) const {
    const auto X = as_matrix(x);
    MatrixXd y = a_t * X;
    y = (a_k * y.transpose()).transpose();
    count_apply(2);
    return from_matrix(y * scale);
  }

  void ensure_eig() const {
    if (eig_done_) return;
    Eigen::SelfAdjointEigenSolver<MatrixXd> es_t(factor_t_), es_k(factor_k_);
    if (es_t.info() != Eigen::Success || es_k.info() != Eigen::Success)
      throw NumericalError("KroneckerCovariance: eigendecomposition failed");
    eigvecs_t_ = es_t.eigenvectors();
    eigvals_t_ = es_t.eigenvalues().cwiseMax(0.0);
    eigvecs_k_ = es_k.eigenvectors();
    eigvals_k_ = es_k.eigenvalues().cwiseMax(0.0);
    eig_done_ = true;
    flops_ += 15 * (static_cast<std::uint64_t>(n_mat_) * n_mat_ * n_mat_ +
                    static_cast<std::uint64_t>(n_str_) * n_str_ * n_str_);
  }

  double lambda(int i, int j) const {
    return sqr(spec_.signal_sd) * eigvals_t_(i) * eigvals_k_(j);
  }

  template <class Fn>
  VectorXd spectral_apply(const VectorXd& x, Fn fn) const {
    ensure_eig();
    const auto X = as_matrix(x);
    MatrixXd u = eigvecs_t_.transpose() * X;
    u = (eigvecs_k_.transpose() * u.transpose()).transpose();
    for (int i = 0; i < n_mat_; ++i)
      for (int j = 0; j < n_str_; ++j) u(i, j) *= fn(lambda(i, j));
    MatrixXd y = eigvecs_t_ * u;
    y = (eigvecs_k_ * y.transpose()).transpose();
    count_apply(4);
    return from_matrix(y);
  }

  void count_apply(int n_gemm) const {
    flops_ += static_cast<std::uint64_t>(n_gemm) * dim() * (n_mat_ + n_str_);
  }

  KernelSpec spec_;
  int n_mat_;
  int n_str_;
  MatrixXd factor_t_, factor_k_;
  Eigen::LLT<MatrixXd> llt_t_, llt_k_;
  mutable bool eig_done_ = false;
  mutable MatrixXd eigvecs_t_, eigvecs_k_;
  mutable VectorXd eigvals_t_, eigvals_k_;
  mutable std::uint64_t flops_ = 0;
};

enum class CovarianceMode { Dense, Kronecker };

/// Build the prior covariance operator over the grid's nodes. The dense path
/// expands the same per-axis jittered factors the Kronecker path uses, so the
/// two represent an identical matrix.
inline std::shared_ptr<const CovarianceOp> build_covariance(
    const KernelSpec& spec, const InputGrid& grid,
    CovarianceMode mode = CovarianceMode::Kronecker, const JitterPolicy& policy = {}) {
  spec.validate();
  auto kron = std::make_shared<KroneckerCovariance>(spec, grid, policy);
  if (mode == CovarianceMode::Kronecker) return kron;
  return std::make_shared<DenseCovariance>(spec, kron->dense_matrix());
}

}  // namespace bayeslv
