// Distributional checks of the elliptical slice machinery: these run chains
// and compare sample moments (or the full CDF) against analytic targets.
#include <catch2/catch_amalgamated.hpp>

#include "bayeslv/sampler.hpp"
#include "testutil.hpp"

using namespace bayeslv;
using testutil::batch_se;
using testutil::ks_pvalue;

namespace {

// 3x3 grid with no quotes at all: the likelihood is identically zero and the
// chain must sample the joint prior.
CalibrationProblem flat_problem() {
  MarketSnapshot snap;
  snap.context = {100.0, 0.0, 0.0};
  InputGrid grid;
  grid.maturities = {0.2, 0.6, 1.0};
  grid.strikes = {90.0, 100.0, 110.0};
  grid = scale_to_unit(grid);
  CalibrationProblem problem(std::move(snap), std::move(grid));
  return problem;
}

}  // namespace

TEST_CASE("ess_step with flat likelihood samples the prior") {
  KernelSpec spec{KernelFamily::SE, 0.4, 0.4, 0.8, std::nullopt};
  std::vector<ScaledPoint> pts = {{0.0, 0.0, 0.0}, {0.5, 0.2, 0.0}, {1.0, 0.9, 0.0}};
  DenseCovariance prior(spec, pts);
  Rng rng(2024);

  const auto flat = [](const VectorXd&) { return 0.0; };
  VectorXd x = VectorXd::Constant(3, 2.0);  // deliberately off-centre start
  const int n_draws = 10000;
  std::vector<std::vector<double>> coord(3), coord_sq(3);
  for (int i = 0; i < n_draws; ++i) {
    x = ess_step(x, 0.0, sample_prior(prior, rng), flat, rng).state;
    for (int c = 0; c < 3; ++c) {
      coord[c].push_back(x(c));
      coord_sq[c].push_back(x(c) * x(c));
    }
  }
  for (int c = 0; c < 3; ++c) {
    const double var_target = prior.matrix()(c, c);
    CHECK(std::abs(testutil::mean(coord[c])) < 4.0 * batch_se(coord[c]));
    CHECK(std::abs(testutil::mean(coord_sq[c]) - var_target) < 4.0 * batch_se(coord_sq[c]));
  }
}

TEST_CASE("ess_step recovers a 1-D conjugate Gaussian posterior") {
  // prior N(0,1), observation y = 0.8 with noise sd 0.6:
  // posterior N(y/(1+s^2), s^2/(1+s^2))
  const double y = 0.8, s = 0.6;
  const double post_mean = y / (1.0 + s * s);
  const double post_sd = std::sqrt(s * s / (1.0 + s * s));

  Rng rng(77);
  const auto ll = [&](const VectorXd& x) {
    return -0.5 * sqr((x(0) - y) / s);
  };
  VectorXd x = VectorXd::Zero(1);
  double cur = ll(x);
  std::vector<double> draws;
  const int thin = 5;
  for (int i = 0; i < 20000 * thin; ++i) {
    VectorXd nu(1);
    nu(0) = rng.normal();
    auto res = ess_step(x, cur, nu, ll, rng);
    x = res.state;
    cur = res.log_lik;
    if (i % thin == 0) draws.push_back(x(0));
  }
  const double p = ks_pvalue(draws, [&](double v) {
    return testutil::norm_cdf_mu(v, post_mean, post_sd);
  });
  INFO("KS p-value " << p);
  CHECK(p > 0.01);
}

TEST_CASE("whitened kappa update leaves the hyperprior invariant under flat likelihood") {
  const auto problem = flat_problem();
  ChainConfig cfg;
  cfg.n_iterations = 6000;
  cfg.burn_in = 500;
  cfg.sdss_probability = 0.0;  // whitened only
  cfg.seed = 31;
  const auto sample = run_chain(problem, KernelFamily::SE, {}, cfg);

  const int dim = 5;
  for (int c = 0; c < dim; ++c) {
    std::vector<double> xs, xs_sq;
    for (const auto& st : sample.states) {
      xs.push_back(st.hyper.xi(c));
      xs_sq.push_back(sqr(st.hyper.xi(c)));
    }
    INFO("xi coordinate " << c);
    CHECK(std::abs(testutil::mean(xs)) < 4.0 * batch_se(xs));
    CHECK(std::abs(testutil::mean(xs_sq) - 1.0) < 4.0 * batch_se(xs_sq));
  }
}

TEST_CASE("sdss kappa update leaves the hyperprior invariant under flat likelihood") {
  const auto problem = flat_problem();
  ChainConfig cfg;
  cfg.n_iterations = 6000;
  cfg.burn_in = 500;
  cfg.sdss_probability = 1.0;  // surrogate-data only
  cfg.seed = 37;
  const auto sample = run_chain(problem, KernelFamily::SE, {}, cfg);

  for (int c = 0; c < 3; ++c) {  // the kappa block
    std::vector<double> xs, xs_sq;
    for (const auto& st : sample.states) {
      xs.push_back(st.hyper.xi(c));
      xs_sq.push_back(sqr(st.hyper.xi(c)));
    }
    INFO("xi coordinate " << c);
    CHECK(std::abs(testutil::mean(xs)) < 4.0 * batch_se(xs));
    CHECK(std::abs(testutil::mean(xs_sq) - 1.0) < 4.0 * batch_se(xs_sq));
  }
}

TEST_CASE("noise sd concentrates at its lower bound when residuals vanish") {
  auto problem = [] {
    MarketSnapshot snap;
    snap.context = {100.0, 0.0, 0.0};
    MarketQuote q;
    q.strike = 100.0;
    q.maturity = 0.5;
    q.mid = 2.0;
    q.bid = 1.9;
    q.ask = 2.1;
    snap.quotes = {q, q, q, q};
    snap.quotes[1].strike = 90.0;
    snap.quotes[2].strike = 110.0;
    snap.quotes[3].maturity = 1.0;
    InputGrid grid;
    grid.maturities = {0.5, 1.0};
    grid.strikes = {90.0, 100.0, 110.0};
    grid = scale_to_unit(grid);
    build_market_index(snap, grid);
    CalibrationProblem p(std::move(snap), std::move(grid));
    p.set_price_map([](const MatrixXd& sigma) {
      return MatrixXd(MatrixXd::Constant(sigma.rows(), sigma.cols(), 2.0));
    });
    return p;
  }();
  REQUIRE(problem.n_obs() == 4);

  const auto ctx = make_context(problem, {}, KernelFamily::SE);
  ChainState state = make_initial_state(ctx);
  Rng rng(41);
  std::vector<double> noise_draws;
  for (int i = 0; i < 4000; ++i) {
    likelihood_hyper_update(state, ctx, rng);
    if (i > 500) noise_draws.push_back(state.hyper.noise_sd);
  }
  CHECK(testutil::mean(noise_draws) < 0.1);  // bounds are (0, 0.75)
}

TEST_CASE("noise sd recovers an injected truth") {
  // residuals drawn with sd 0.5; bounds (0, 0.75); posterior mean of the
  // noise sd should land within [0.35, 0.65]
  Rng gen(55);
  const int n = 100;
  std::vector<double> residuals;
  for (int i = 0; i < n; ++i) residuals.push_back(0.5 * gen.normal());

  auto problem = [&] {
    MarketSnapshot snap;
    snap.context = {100.0, 0.0, 0.0};
    InputGrid grid;
    std::vector<double> strikes;
    for (int j = 0; j < n; ++j) strikes.push_back(50.0 + j);
    grid.maturities = {0.5, 1.0};
    grid.strikes = strikes;
    grid = scale_to_unit(grid);
    for (int j = 0; j < n; ++j) {
      MarketQuote q;
      q.strike = strikes[j];
      q.maturity = 0.5;
      q.mid = 2.0 + residuals[j];
      q.bid = q.mid - 0.1;
      q.ask = q.mid + 0.1;
      snap.quotes.push_back(q);
    }
    build_market_index(snap, grid);
    CalibrationProblem p(std::move(snap), std::move(grid));
    p.set_price_map([](const MatrixXd& sigma) {
      return MatrixXd(MatrixXd::Constant(sigma.rows(), sigma.cols(), 2.0));
    });
    return p;
  }();
  REQUIRE(problem.n_obs() == n);

  const auto ctx = make_context(problem, {}, KernelFamily::SE);
  ChainState state = make_initial_state(ctx);
  Rng rng(56);
  std::vector<double> noise_draws;
  for (int i = 0; i < 5500; ++i) {
    likelihood_hyper_update(state, ctx, rng);
    if (i >= 500) noise_draws.push_back(state.hyper.noise_sd);
  }
  const double post_mean = testutil::mean(noise_draws);
  INFO("posterior mean of the noise sd " << post_mean);
  CHECK(post_mean > 0.35);
  CHECK(post_mean < 0.65);
}

TEST_CASE("short chain on synthetic quotes beats the generating surface") {
  // end-to-end: quotes priced from a known smooth surface + noise; the MAP
  // state must reach at least the generating surface's SSE
  Rng gen(2025);
  const MarketContext ctx{100.0, 0.02, 0.0};
  SolverConfig solver;
  solver.max_time_step = 4.0 / 365.0;
  auto market = testutil::make_synthetic_market(
      {0.25, 0.5, 0.8, 1.2}, {85, 92, 100, 108, 116, 124},
      [](double t, double k) {
        return 0.18 + 0.08 * std::exp(-t) * sqr(k / 100.0 - 1.0) * 4.0;
      },
      ctx, 0.3, gen, solver);

  CalibrationProblem problem(market.snapshot, market.grid, solver);
  ChainConfig cfg;
  cfg.n_iterations = 400;
  cfg.burn_in = 100;
  cfg.seed = 17;
  const auto sample = run_chain(problem, KernelFamily::SE, {}, cfg);
  REQUIRE(sample.states.size() == 300);

  const auto& map_state = map_estimate(sample);
  const double map_sse = problem.sse_of(map_state.latent, map_state.hyper.mean_level);

  // SSE of the generating surface itself
  const PriceSurface truth_prices =
      solve_dupire(market.sigma_true, ctx, market.grid, solver);
  const double truth_sse = sse(truth_prices, market.snapshot, market.grid);
  INFO("map_sse " << map_sse << " truth_sse " << truth_sse);
  CHECK(map_sse <= truth_sse);
  CHECK(std::isfinite(map_state.log_post));
}
