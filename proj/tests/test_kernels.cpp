#include <catch2/catch_amalgamated.hpp>

#include "bayeslv/kernels.hpp"

using namespace bayeslv;

TEST_CASE("kernel values at zero and unit distance") {
  KernelSpec se{KernelFamily::SE, 1.0, 1.0, 0.7, std::nullopt};
  const ScaledPoint a{0.3, 0.4, 0.0};
  CHECK(kernel_eval(se, a, a) == Catch::Approx(0.49));

  KernelSpec unit_se{KernelFamily::SE, 1.0, 1.0, 1.0, std::nullopt};
  const ScaledPoint p{0.0, 0.0, 0.0}, q{1.0, 0.0, 0.0};
  CHECK(kernel_eval(unit_se, p, q) == Catch::Approx(std::exp(-0.5)).epsilon(1e-12));

  KernelSpec mat{KernelFamily::Matern32, 1.0, 1.0, 1.0, std::nullopt};
  const double expected = (1.0 + std::sqrt(3.0)) * std::exp(-std::sqrt(3.0));
  CHECK(kernel_eval(mat, p, q) == Catch::Approx(expected).epsilon(1e-12));
  CHECK(expected == Catch::Approx(0.4834).margin(5e-5));
}

TEST_CASE("kernel symmetry and diagonal, random points") {
  Rng rng(7);
  for (KernelFamily fam : {KernelFamily::SE, KernelFamily::Matern32}) {
    KernelSpec spec{fam, 0.3, 0.6, 0.9, 0.4};
    for (int i = 0; i < 200; ++i) {
      const ScaledPoint a{rng.uniform(), rng.uniform(), rng.uniform()};
      const ScaledPoint b{rng.uniform(), rng.uniform(), rng.uniform()};
      CHECK(kernel_eval(spec, a, b) == kernel_eval(spec, b, a));
      CHECK(kernel_eval(spec, a, a) == sqr(spec.signal_sd));
    }
  }
}

TEST_CASE("time factor reduces to 2-D kernel at zero time lag") {
  KernelSpec flat{KernelFamily::Matern32, 0.4, 0.5, 0.8, std::nullopt};
  KernelSpec timed = flat;
  timed.length_scale_t = 0.3;
  const ScaledPoint a{0.2, 0.7, 0.55}, b{0.6, 0.1, 0.55};
  CHECK(kernel_eval(timed, a, b) == Catch::Approx(kernel_eval(flat, a, b)).epsilon(1e-14));

  // |dt| = l_t multiplies the 2-D value by the Matern-3/2 unit factor
  ScaledPoint c = b;
  c.time = a.time + 0.3;
  const double factor = (1.0 + std::sqrt(3.0)) * std::exp(-std::sqrt(3.0));
  CHECK(kernel_eval(timed, a, c) ==
        Catch::Approx(kernel_eval(flat, a, b) * factor).epsilon(1e-12));
}

TEST_CASE("gram matrices are positive semidefinite before jitter") {
  Rng rng(99);
  for (KernelFamily fam : {KernelFamily::SE, KernelFamily::Matern32}) {
    for (int rep = 0; rep < 5; ++rep) {
      const int n = 10 + static_cast<int>(rng.uniform() * 40);
      KernelSpec spec{fam, rng.uniform(0.1, 1.0), rng.uniform(0.1, 1.0),
                      rng.uniform(0.2, 1.0), std::nullopt};
      std::vector<ScaledPoint> pts;
      for (int i = 0; i < n; ++i)
        pts.push_back({rng.uniform(), rng.uniform(), 0.0});
      MatrixXd gram(n, n);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) gram(i, j) = kernel_eval(spec, pts[i], pts[j]);
      Eigen::SelfAdjointEigenSolver<MatrixXd> es(gram);
      CHECK(es.eigenvalues().minCoeff() >= -1e-9 * sqr(spec.signal_sd));
    }
  }
}

TEST_CASE("ssg transform") {
  const Bounds b{0.0, 1.0};
  CHECK(ssg(0.0, b) == Catch::Approx(0.5));
  CHECK(ssg(std::log(3.0), b) == Catch::Approx(0.75).epsilon(1e-12));
  const Bounds wide{-6.0, std::log(0.5)};
  CHECK(ssg(0.0, wide) == Catch::Approx(0.5 * (-6.0 + std::log(0.5))));

  for (double xi = -10.0; xi <= 10.0; xi += 0.5)
    CHECK(ssg_inverse(ssg(xi, b), b) == Catch::Approx(xi).margin(1e-12));

  CHECK_THROWS_AS(ssg_inverse(0.0, b), DataError);
  CHECK_THROWS_AS(ssg_inverse(1.5, b), DataError);
}
