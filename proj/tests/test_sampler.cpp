#include <catch2/catch_amalgamated.hpp>

#include "bayeslv/sampler.hpp"
#include "testutil.hpp"

using namespace bayeslv;

namespace {

// Tiny 2x2 problem with a cheap linear stub pricer: price = 2 * sigma.
CalibrationProblem make_stub_problem(double quote_mid = 1.0) {
  MarketSnapshot snap;
  snap.context = {100.0, 0.0, 0.0};
  MarketQuote q;
  q.strike = 100.0;
  q.maturity = 0.5;
  q.mid = quote_mid;
  q.bid = quote_mid - 0.1;
  q.ask = quote_mid + 0.1;
  snap.quotes = {q};

  InputGrid grid;
  grid.maturities = {0.5, 1.0};
  grid.strikes = {90.0, 100.0};
  grid = scale_to_unit(grid);
  build_market_index(snap, grid);

  CalibrationProblem problem(std::move(snap), std::move(grid));
  problem.set_price_map([](const MatrixXd& sigma) { return MatrixXd(2.0 * sigma); });
  return problem;
}

ChainContext make_ctx(const CalibrationProblem& problem) {
  return make_context(problem, {}, KernelFamily::SE);
}

}  // namespace

TEST_CASE("log_likelihood_from_sse values") {
  CHECK(log_likelihood_from_sse(0.0, 4, 1.0) ==
        Catch::Approx(-2.0 * std::log(2.0 * M_PI)).epsilon(1e-14));
  const double expected =
      -(10.0 / (2.0 * 0.2025)) - 50.0 * std::log(2.0 * M_PI * 0.2025);
  CHECK(log_likelihood_from_sse(10.0, 100, 0.45) == Catch::Approx(expected).epsilon(1e-14));
  // with zero SSE, doubling the noise sd strictly lowers the value
  CHECK(log_likelihood_from_sse(0.0, 10, 0.4) > log_likelihood_from_sse(0.0, 10, 0.8));
}

TEST_CASE("log_joint assembles likelihood, GP and hyperprior terms") {
  const auto problem = make_stub_problem(1.3);
  const auto ctx = make_ctx(problem);
  ChainState state = make_initial_state(ctx);
  Rng rng(3);
  state.latent = rng.normal_vector(4) * 0.3;

  const double joint = log_joint(problem, *state.prior, state.latent, state.hyper);

  // hand assembly of the three terms
  const double sigma_obs = std::exp(state.latent(1) + state.hyper.mean_level);
  const double resid = 2.0 * sigma_obs - 1.3;
  const double lik = -resid * resid / (2.0 * sqr(state.hyper.noise_sd)) -
                     0.5 * std::log(2.0 * M_PI * sqr(state.hyper.noise_sd));
  const auto* kron = dynamic_cast<const KroneckerCovariance*>(state.prior.get());
  REQUIRE(kron != nullptr);
  const MatrixXd k_dense = kron->dense_matrix();
  const double gp = -0.5 * state.latent.dot(k_dense.inverse() * state.latent) -
                    0.5 * std::log(k_dense.determinant()) - 2.0 * std::log(2.0 * M_PI);
  const double hyper = -0.5 * state.hyper.xi.squaredNorm() -
                       2.5 * std::log(2.0 * M_PI);
  CHECK(joint == Catch::Approx(lik + gp + hyper).margin(1e-10));

  // xi = 0 for all parameters: hyperprior term is -(d/2) log(2pi)
  CHECK(log_std_normal(VectorXd::Zero(5)) == Catch::Approx(-2.5 * std::log(2.0 * M_PI)));
}

TEST_CASE("ess_step returns the current state when every proposal is rejected") {
  Rng rng(17);
  const VectorXd current = rng.normal_vector(3);
  const VectorXd draw = rng.normal_vector(3);
  const auto reject_all = [](const VectorXd&) { return kNegInf; };
  const auto res = ess_step(current, 0.0, draw, reject_all, rng, 64);
  CHECK(res.shrink_capped);
  CHECK((res.state.array() == current.array()).all());
  CHECK(res.log_lik == 0.0);
}

TEST_CASE("ess_step accepts somewhere on the ellipse and improves the slice") {
  Rng rng(18);
  const VectorXd current = VectorXd::Zero(2);
  const VectorXd draw = rng.normal_vector(2);
  const auto ll = [](const VectorXd& x) { return -0.5 * x.squaredNorm(); };
  const auto res = ess_step(current, ll(current), draw, ll, rng, 64);
  CHECK_FALSE(res.shrink_capped);
  CHECK(res.log_lik == Catch::Approx(ll(res.state)));
}

TEST_CASE("whitened update holds nu fixed: reconstruction identity") {
  const auto problem = make_stub_problem();
  const auto ctx = make_ctx(problem);
  ChainState state = make_initial_state(ctx);
  Rng rng(5);
  state.latent = sample_prior(*state.prior, rng);
  state.log_lik = problem.log_likelihood(state.latent, state.hyper.mean_level,
                                         state.hyper.noise_sd);

  const VectorXd nu = state.prior->chol_solve(state.latent);
  const VectorXd xi_before = state.hyper.xi;
  whitened_kappa_update(state, ctx, rng);
  REQUIRE_FALSE((state.hyper.xi.array() == xi_before.array()).all());

  // f' = L_{kappa'} nu within 1e-10
  const VectorXd rebuilt = state.prior->chol_multiply(nu);
  CHECK((rebuilt - state.latent).lpNorm<Eigen::Infinity>() < 1e-10);
  // m and noise sd untouched by the kappa block
  CHECK(state.hyper.xi.tail(2) == xi_before.tail(2));
}

TEST_CASE("whitened update leaves the state alone under total rejection") {
  auto problem = make_stub_problem();
  const auto ctx = make_ctx(problem);
  ChainState state = make_initial_state(ctx);
  Rng rng(6);
  state.latent = sample_prior(*state.prior, rng);
  state.log_lik = 0.0;
  problem.set_price_map([](const MatrixXd&) -> MatrixXd {
    throw NumericalError("stub breakdown");
  });
  const VectorXd f_before = state.latent;
  const VectorXd xi_before = state.hyper.xi;
  whitened_kappa_update(state, ctx, rng);
  CHECK((state.latent.array() == f_before.array()).all());
  CHECK((state.hyper.xi.array() == xi_before.array()).all());
}

TEST_CASE("sdss update reconstruction identity") {
  const auto problem = make_stub_problem();
  const auto ctx = make_ctx(problem);
  ChainState state = make_initial_state(ctx);
  Rng rng(7);
  state.latent = sample_prior(*state.prior, rng);
  state.log_lik = problem.log_likelihood(state.latent, state.hyper.mean_level,
                                         state.hyper.noise_sd);

  SdssDiagnostics diag;
  sdss_kappa_update(state, ctx, 0.1, rng, 64, &diag);

  // with the new kappa: f = R^{1/2} eta + R S^{-1} g within 1e-8
  const VectorXd rebuilt =
      state.prior->sdss_sqrt_multiply(diag.surrogate_var, diag.implied_white) +
      state.prior->sdss_mean(diag.surrogate_var, diag.surrogate);
  CHECK((rebuilt - state.latent).lpNorm<Eigen::Infinity>() < 1e-8);
}

TEST_CASE("likelihood_hyper_update changes only the likelihood parameters") {
  const auto problem = make_stub_problem();
  const auto ctx = make_ctx(problem);
  ChainState state = make_initial_state(ctx);
  Rng rng(8);
  state.latent = sample_prior(*state.prior, rng);
  state.log_lik = problem.log_likelihood(state.latent, state.hyper.mean_level,
                                         state.hyper.noise_sd);

  const VectorXd f_before = state.latent;
  const VectorXd xi_before = state.hyper.xi;
  const auto prior_before = state.prior;
  likelihood_hyper_update(state, ctx, rng);
  CHECK((state.latent.array() == f_before.array()).all());
  CHECK(state.hyper.xi.head(3) == xi_before.head(3));
  CHECK(state.prior == prior_before);
  CHECK(state.log_lik == Catch::Approx(problem.log_likelihood(
      state.latent, state.hyper.mean_level, state.hyper.noise_sd)));
}

TEST_CASE("run_chain is deterministic given the seed") {
  const auto problem = make_stub_problem();
  ChainConfig cfg;
  cfg.n_iterations = 60;
  cfg.burn_in = 10;
  cfg.thin = 2;
  cfg.seed = 99;
  const auto a = run_chain(problem, KernelFamily::SE, {}, cfg);
  const auto b = run_chain(problem, KernelFamily::SE, {}, cfg);
  REQUIRE(a.states.size() == b.states.size());
  REQUIRE(a.states.size() == 25);  // (60-10)/2
  for (size_t i = 0; i < a.states.size(); ++i) {
    CHECK((a.states[i].latent.array() == b.states[i].latent.array()).all());
    CHECK((a.states[i].hyper.xi.array() == b.states[i].hyper.xi.array()).all());
    CHECK(a.states[i].log_post == b.states[i].log_post);
  }
  for (const auto& st : a.states) {
    CHECK(std::isfinite(st.log_post));
    CHECK(st.latent.allFinite());
  }
}

TEST_CASE("run_chain rejects an infeasible start") {
  auto problem = make_stub_problem();
  problem.set_price_map([](const MatrixXd&) -> MatrixXd {
    throw NumericalError("always fails");
  });
  ChainConfig cfg;
  cfg.n_iterations = 10;
  cfg.burn_in = 1;
  CHECK_THROWS_WITH(run_chain(problem, KernelFamily::SE, {}, cfg),
                    Catch::Matchers::ContainsSubstring("infeasible"));
}

TEST_CASE("map_estimate and posterior_band") {
  PosteriorSample sample;
  SampleState s1, s2;
  s1.latent = VectorXd::Constant(2, 0.1);
  s1.hyper.mean_level = -1.0;
  s1.log_post = 1.0;
  s2.latent = VectorXd::Constant(2, 0.3);
  s2.hyper.mean_level = -1.0;
  s2.log_post = 2.0;

  sample.states = {s1};
  CHECK(&map_estimate(sample) == &sample.states[0]);
  auto band1 = posterior_band(sample);
  CHECK(band1.sd.lpNorm<Eigen::Infinity>() == 0.0);
  CHECK(band1.mean(0) == Catch::Approx(std::exp(0.1 - 1.0)));

  sample.states = {s1, s2};
  CHECK(map_estimate(sample).log_post == 2.0);

  // band from synthetic states matches direct moment formulas
  Rng rng(12);
  PosteriorSample big;
  for (int i = 0; i < 1000; ++i) {
    SampleState st;
    st.latent = rng.normal_vector(3) * 0.2;
    st.hyper.mean_level = -1.5;
    st.log_post = 0.0;
    big.states.push_back(st);
  }
  const auto band = posterior_band(big);
  for (int node = 0; node < 3; ++node) {
    double sum = 0.0, sum_sq = 0.0;
    for (const auto& st : big.states) {
      const double sigma = std::exp(st.latent(node) - 1.5);
      sum += sigma;
      sum_sq += sigma * sigma;
    }
    const double mean = sum / 1000.0;
    const double sd = std::sqrt(sum_sq / 1000.0 - mean * mean);
    CHECK(band.mean(node) == Catch::Approx(mean).margin(1e-12));
    CHECK(band.sd(node) == Catch::Approx(sd).margin(1e-12));
  }
}
