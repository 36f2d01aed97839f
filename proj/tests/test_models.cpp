#include <doctest.h>

#include "coslas/models.hpp"

using namespace coslas;

TEST_CASE("clock_read evaluates the affine map") {
  CHECK(clock_read(0.0, {1.0, 0.0}) == 0.0);
  CHECK(clock_read(2.0, {2.0, 3.0}) == 7.0);
  CHECK(clock_read(1.0, {1.0 + 1e-5, 1e-6}) == doctest::Approx(1.00001100).epsilon(1e-12));
}

TEST_CASE("clock_invert is the inverse map") {
  CHECK(clock_invert(7.0, {2.0, 3.0}) == 2.0);
  CHECK(clock_invert(0.0, {1.0, 0.0}) == 0.0);
  CHECK(clock_invert(1.00001100, {1.0 + 1e-5, 1e-6}) ==
        doctest::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("clock round trips over the operating range") {
  RngStream rng(21, {});
  for (int k = 0; k < 200; ++k) {
    ClockParams p{0.9 + 0.2 * rng.uniform(), -10.0 + 20.0 * rng.uniform()};
    const double t = -5.0 + 40.0 * rng.uniform();
    const double local = clock_read(t, p);
    CHECK(clock_invert(local, p) ==
          doctest::Approx(t).epsilon(1e-12).scale(std::max(1.0, std::abs(t))));
  }
}

TEST_CASE("clock state transform and inverse") {
  const ClockState s = params_to_state({2.0, 3.0});
  CHECK(s.nu == doctest::Approx(1.5));
  CHECK(s.lambda == doctest::Approx(0.5));

  const ClockState ref = params_to_state({1.0, 0.0});
  CHECK(ref.nu == 0.0);
  CHECK(ref.lambda == 1.0);

  const ClockParams back = state_to_params({1.5, 0.5});
  CHECK(back.alpha == doctest::Approx(2.0));
  CHECK(back.beta == doctest::Approx(3.0));

  RngStream rng(22, {});
  for (int k = 0; k < 200; ++k) {
    ClockParams p{0.9 + 0.2 * rng.uniform(), -10.0 + 20.0 * rng.uniform()};
    ClockParams q = state_to_params(params_to_state(p));
    CHECK(q.alpha == doctest::Approx(p.alpha).epsilon(1e-12));
    CHECK(q.beta == doctest::Approx(p.beta).epsilon(1e-12).scale(
                        std::max(1.0, std::abs(p.beta))));
  }

  CHECK_THROWS_AS(params_to_state({-1.0, 0.0}), std::domain_error);
  CHECK_THROWS_AS(state_to_params({0.0, -2.0}), std::domain_error);
}

TEST_CASE("evolve_clock is a random walk with the configured covariance") {
  EvolutionParams zero{0.0, 0.0, 0.0, 1.0};
  RngStream rng(5, {});
  const ClockState prev{0.3, 1.0};
  const ClockState same = evolve_clock(prev, zero, rng);
  CHECK(same.nu == prev.nu);
  CHECK(same.lambda == prev.lambda);

  EvolutionParams evo{1e-3, 2e-4, 0.0, 1.0};
  const int n = 100000;
  double m_nu = 0.0, m_la = 0.0, v_nu = 0.0, v_la = 0.0;
  RngStream rng2(7, {});
  for (int k = 0; k < n; ++k) {
    const ClockState s = evolve_clock(prev, evo, rng2);
    m_nu += s.nu;
    m_la += s.lambda;
    v_nu += (s.nu - prev.nu) * (s.nu - prev.nu);
    v_la += (s.lambda - prev.lambda) * (s.lambda - prev.lambda);
  }
  m_nu /= n;
  m_la /= n;
  v_nu /= n;
  v_la /= n;
  CHECK(std::abs(m_nu - prev.nu) < 4.0 * evo.sigma1 / std::sqrt(double(n)));
  CHECK(std::abs(m_la - prev.lambda) < 4.0 * evo.sigma2 / std::sqrt(double(n)));
  CHECK(v_nu == doctest::Approx(evo.sigma1 * evo.sigma1).epsilon(0.05));
  CHECK(v_la == doctest::Approx(evo.sigma2 * evo.sigma2).epsilon(0.05));
}

TEST_CASE("kinematic matrices") {
  Eigen::Matrix4d g1, g2;
  kinematic_matrices(1.0, g1, g2);
  CHECK(g1.topRightCorner<2, 2>().isApprox(Eigen::Matrix2d::Identity()));
  CHECK(g2.topLeftCorner<2, 2>().isApprox(Eigen::Matrix2d::Identity() / 3.0));
  CHECK(g2.topRightCorner<2, 2>().isApprox(Eigen::Matrix2d::Identity() / 2.0));
  CHECK(g2.bottomRightCorner<2, 2>().isApprox(Eigen::Matrix2d::Identity()));

  kinematic_matrices(1e-9, g1, g2);
  CHECK(g1.isApprox(Eigen::Matrix4d::Identity(), 1e-8));
  CHECK(g2.norm() < 1e-8);

  for (double t : {0.1, 1.0, 10.0}) {
    kinematic_matrices(t, g1, g2);
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> es(g2);
    CHECK(es.eigenvalues().minCoeff() >= -1e-12);
  }
}

TEST_CASE("evolve_location noiseless constant velocity") {
  EvolutionParams evo{0.0, 0.0, 0.0, 1.0};
  RngStream rng(3, {});
  LocationState prev{{0.0, 0.0}, {1.0, 0.0}};
  const LocationState next = evolve_location(prev, evo, rng);
  CHECK(next.p.x() == doctest::Approx(1.0));
  CHECK(next.p.y() == doctest::Approx(0.0));
  CHECK(next.pdot.x() == doctest::Approx(1.0));

  LocationState still{{2.0, 5.0}, {0.0, 0.0}};
  const LocationState same = evolve_location(still, evo, rng);
  CHECK(same.p.isApprox(still.p));
}

TEST_CASE("noiseless evolution forms a semigroup in the position block") {
  EvolutionParams one{0.0, 0.0, 0.0, 1.0};
  EvolutionParams two{0.0, 0.0, 0.0, 2.0};
  RngStream rng(4, {});
  LocationState s{{1.0, -2.0}, {0.5, 0.25}};
  const LocationState twice =
      evolve_location(evolve_location(s, one, rng), one, rng);
  const LocationState once = evolve_location(s, two, rng);
  CHECK(twice.p.isApprox(once.p, 1e-12));
  CHECK(twice.pdot.isApprox(once.pdot, 1e-12));
}

TEST_CASE("evolve_location sample covariance matches sigma_u2^2 G2") {
  EvolutionParams evo{0.0, 0.0, 0.7, 1.0};
  Eigen::Matrix4d g1, g2;
  kinematic_matrices(evo.T, g1, g2);
  const Eigen::Matrix4d target = evo.sigma_u2 * evo.sigma_u2 * g2;

  LocationState prev{{0.0, 0.0}, {0.0, 0.0}};
  const int n = 100000;
  Eigen::Matrix4d acc = Eigen::Matrix4d::Zero();
  RngStream rng(11, {});
  for (int k = 0; k < n; ++k) {
    const Eigen::Vector4d v = evolve_location(prev, evo, rng).vec();
    acc += v * v.transpose();
  }
  acc /= n;
  for (int a = 0; a < 4; ++a) {
    for (int b = 0; b < 4; ++b) {
      CHECK(acc(a, b) == doctest::Approx(target(a, b))
                             .epsilon(0.05)
                             .scale(std::max(0.1, std::abs(target(a, b)))));
    }
  }
}

TEST_CASE("sample_prior pins references and matches the prior spread") {
  PriorSpec spec;
  spec.pinned_clock = Eigen::Vector2d(0.0, 1.0);
  RngStream a(1, {}), b(2, {});
  const AgentState ref = sample_prior(spec, a, b);
  CHECK(ref.clock.nu == 0.0);
  CHECK(ref.clock.lambda == 1.0);

  PriorSpec zero;
  zero.sigma_nu = 0.0;
  zero.sigma_lambda = 0.0;
  zero.sigma_x = 0.0;
  zero.sigma_xdot = 0.0;
  zero.clock_mean = Eigen::Vector2d(0.25, 1.5);
  zero.loc_mean = Eigen::Vector4d(1, 2, 3, 4);
  RngStream c(3, {}), d(4, {});
  const AgentState det = sample_prior(zero, c, d);
  CHECK(det.clock.nu == 0.25);
  CHECK(det.clock.lambda == 1.5);
  CHECK(det.loc.vec().isApprox(zero.loc_mean));

  PriorSpec wide;
  wide.sigma_nu = 2.0;
  const int n = 100000;
  double ssq = 0.0;
  for (int k = 0; k < n; ++k) {
    RngStream cr(9, {0, static_cast<std::uint64_t>(k), 0, Draw::PriorClock});
    RngStream lr(9, {0, static_cast<std::uint64_t>(k), 0, Draw::PriorLocation});
    const AgentState s = sample_prior(wide, cr, lr);
    ssq += (s.clock.nu - wide.clock_mean[0]) * (s.clock.nu - wide.clock_mean[0]);
  }
  CHECK(std::sqrt(ssq / n) == doctest::Approx(wide.sigma_nu).epsilon(0.03));
}
