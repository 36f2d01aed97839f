#include <doctest.h>

#include "coslas/messages.hpp"
#include "coslas/rng.hpp"

using namespace coslas;

namespace {

Eigen::Matrix2d random_spd(RngStream& rng) {
  Eigen::Matrix2d a;
  a << 1.0 + rng.uniform(), rng.uniform() - 0.5, 0.0, 1.0 + rng.uniform();
  a(1, 0) = a(0, 1);
  return a * a.transpose() + 0.1 * Eigen::Matrix2d::Identity();
}

Gaussian g1d(double mean, double var) {
  Eigen::VectorXd m(1);
  m << mean;
  Eigen::MatrixXd c(1, 1);
  c << var;
  return Gaussian::from_moments(m, c);
}

}  // namespace

TEST_CASE("gaussian_product basics") {
  RngStream rng(1, {});

  const Gaussian zero = Gaussian::from_information(Eigen::Matrix2d::Zero(),
                                                   Eigen::Vector2d::Zero());
  const Gaussian g = Gaussian::from_moments(Eigen::Vector2d(1.0, -2.0),
                                            random_spd(rng));
  const Gaussian same = gaussian_product(g, zero);
  CHECK(same.mean().isApprox(g.mean(), 1e-12));
  CHECK(same.cov().isApprox(g.cov(), 1e-12));

  const Gaussian a = g1d(0.0, 1.0);
  const Gaussian p = gaussian_product(a, a);
  CHECK(p.mean()[0] == doctest::Approx(0.0));
  CHECK(p.cov()(0, 0) == doctest::Approx(0.5));

  const Gaussian b = gaussian_product(g1d(1.0, 1.0), g1d(3.0, 1.0));
  CHECK(b.mean()[0] == doctest::Approx(2.0));
  CHECK(b.cov()(0, 0) == doctest::Approx(0.5));
}

TEST_CASE("gaussian_product is commutative and associative in information form") {
  RngStream rng(2, {});
  for (int trial = 0; trial < 50; ++trial) {
    const Gaussian a = Gaussian::from_moments(
        Eigen::Vector2d(rng.normal(), rng.normal()), random_spd(rng));
    const Gaussian b = Gaussian::from_moments(
        Eigen::Vector2d(rng.normal(), rng.normal()), random_spd(rng));
    const Gaussian c = Gaussian::from_moments(
        Eigen::Vector2d(rng.normal(), rng.normal()), random_spd(rng));
    const Gaussian ab_c = gaussian_product(gaussian_product(a, b), c);
    const Gaussian a_bc = gaussian_product(a, gaussian_product(b, c));
    const Gaussian ba_c = gaussian_product(gaussian_product(b, a), c);
    CHECK(ab_c.lambda().isApprox(a_bc.lambda(), 1e-12));
    CHECK(ab_c.eta().isApprox(a_bc.eta(), 1e-12));
    CHECK(ab_c.lambda().isApprox(ba_c.lambda(), 1e-12));
  }

  Eigen::VectorXd m3 = Eigen::VectorXd::Zero(3);
  CHECK_THROWS_AS(
      gaussian_product(Gaussian::from_moments(m3, Eigen::MatrixXd::Identity(3, 3)),
                       g1d(0.0, 1.0)),
      NumericalError);
}

TEST_CASE("annulus_eval") {
  AnnulusMixture ring;
  ring.radius = 5.0;
  ring.components.push_back({1.0, Eigen::Vector2d(1.0, 2.0), 1.0});

  // on the circle the exponent vanishes
  CHECK(annulus_eval(ring, Eigen::Vector2d(6.0, 2.0)) == doctest::Approx(1.0));
  // at the center the deviation is the full radius
  CHECK(annulus_eval(ring, Eigen::Vector2d(1.0, 2.0)) ==
        doctest::Approx(std::exp(-12.5)));

  RngStream rng(3, {});
  for (int k = 0; k < 20; ++k) {
    const double phi = 2.0 * M_PI * rng.uniform();
    const double rho = 10.0 * rng.uniform();
    const Eigen::Vector2d p =
        ring.components[0].center + rho * Eigen::Vector2d(std::sin(phi), std::cos(phi));
    const Eigen::Vector2d q =
        ring.components[0].center +
        rho * Eigen::Vector2d(std::sin(phi + 1.0), std::cos(phi + 1.0));
    CHECK(annulus_eval(ring, p) == doctest::Approx(annulus_eval(ring, q)).epsilon(1e-12));
  }
}

TEST_CASE("moment_match_mixture") {
  RngStream rng(4, {});
  const Gaussian single = Gaussian::from_moments(
      Eigen::Vector2d(3.0, -1.0), random_spd(rng));
  GaussianMixture one({{1.0, single}});
  const Gaussian matched = moment_match_mixture(one);
  CHECK(matched.mean().isApprox(single.mean(), 1e-12));
  CHECK(matched.cov().isApprox(single.cov(), 1e-12));

  GaussianMixture deltas({{0.5, g1d(-1.0, 0.0)}, {0.5, g1d(1.0, 0.0)}});
  const Gaussian dm = moment_match_mixture(deltas);
  CHECK(dm.mean()[0] == doctest::Approx(0.0));
  CHECK(dm.cov()(0, 0) == doctest::Approx(1.0));

  GaussianMixture two({{0.25, g1d(0.0, 1.0)}, {0.75, g1d(4.0, 1.0)}});
  const Gaussian tm = moment_match_mixture(two);
  CHECK(tm.mean()[0] == doctest::Approx(3.0));
  CHECK(tm.cov()(0, 0) == doctest::Approx(4.0));
}

TEST_CASE("moment match preserves the exact first two moments") {
  RngStream rng(5, {});
  for (int trial = 0; trial < 50; ++trial) {
    const double w = 0.05 + 0.9 * rng.uniform();
    const Gaussian a = Gaussian::from_moments(
        Eigen::Vector2d(rng.normal(), rng.normal()), random_spd(rng));
    const Gaussian b = Gaussian::from_moments(
        Eigen::Vector2d(rng.normal(), rng.normal()), random_spd(rng));
    GaussianMixture mix({{w, a}, {1.0 - w, b}});
    const Gaussian m = moment_match_mixture(mix);

    const Eigen::Vector2d mean = w * a.mean() + (1.0 - w) * b.mean();
    Eigen::Matrix2d cov =
        w * (Eigen::Matrix2d(a.cov()) +
             (a.mean() - mean) * (a.mean() - mean).transpose()) +
        (1.0 - w) * (Eigen::Matrix2d(b.cov()) +
                     (b.mean() - mean) * (b.mean() - mean).transpose());
    CHECK(m.mean().isApprox(mean, 1e-12));
    CHECK(m.cov().isApprox(cov, 1e-12));
  }
}

TEST_CASE("trace_of_cov") {
  Eigen::Matrix2d d;
  d << 1.0, 0.0, 0.0, 2.0;
  CHECK(trace_of_cov(Gaussian::from_moments(Eigen::Vector2d::Zero(), d)) ==
        doctest::Approx(3.0));

  const Gaussian flat = Gaussian::from_information(Eigen::Matrix2d::Zero(),
                                                   Eigen::Vector2d::Zero());
  CHECK(std::isinf(trace_of_cov(flat)));

  RngStream rng(6, {});
  for (int trial = 0; trial < 30; ++trial) {
    const Eigen::Matrix2d spd = random_spd(rng);
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(spd);
    const double eig_sum = es.eigenvalues().sum();
    CHECK(trace_of_cov(Gaussian::from_moments(Eigen::Vector2d::Zero(), spd)) ==
          doctest::Approx(eig_sum).epsilon(1e-12));
  }
}

TEST_CASE("mixture weights are normalized on construction") {
  GaussianMixture m({{2.0, g1d(0.0, 1.0)}, {6.0, g1d(1.0, 1.0)}});
  CHECK(m[0].weight == doctest::Approx(0.25));
  CHECK(m[1].weight == doctest::Approx(0.75));
  CHECK_THROWS_AS(GaussianMixture(std::vector<MixtureComponent>{}),
                  NumericalError);
}

TEST_CASE("zero information detection and serialization tags") {
  CHECK(is_zero_information(Message(Uninformative{})));
  CHECK(is_zero_information(Message(Gaussian::from_information(
      Eigen::Matrix2d::Zero(), Eigen::Vector2d::Zero()))));
  CHECK_FALSE(is_zero_information(
      Message(Gaussian::from_moments(Eigen::Vector2d::Zero(),
                                     Eigen::Matrix2d::Identity()))));

  const std::vector<double> rec = serialize_message(Message(Uninformative{}));
  REQUIRE(rec.size() == 2);
  CHECK(rec[0] == 0.0);

  AnnulusMixture ring;
  ring.radius = 4.0;
  ring.components.push_back({1.0, Eigen::Vector2d(1.0, 1.0), 2.0});
  const std::vector<double> arec = serialize_message(Message(ring));
  REQUIRE(arec.size() == 3 + 4);
  CHECK(arec[0] == 3.0);
  CHECK(arec[2] == 4.0);
}
