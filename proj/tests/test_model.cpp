#include <doctest.h>

#include <cmath>
#include <random>

#include "helpers.hpp"
#include "ndm/model.hpp"
#include "oracles.hpp"

using namespace ndm;

namespace {

LatentPoint random_point(Eigen::Index n, int k, Eigen::Index m,
                         std::uint64_t seed) {
  const VariationalState s = testing::random_state(n, k, m, seed);
  Rng rng(seed + 1);
  return sample_q(s, rng);
}

}  // namespace

TEST_CASE("link functions") {
  CHECK(apply_link(Link::kSoftplus, 0.0) == doctest::Approx(0.6931471805599453).epsilon(1e-15));
  CHECK(std::abs(apply_link(Link::kSigmoid, 0.5) - 0.5) < 1e-15);
  CHECK(apply_link(Link::kIdentity, -3.2) == -3.2);
  CHECK(std::abs(apply_link(Link::kSoftplus, 40.0) -
                 static_cast<double>(oracle::softplus(40.0L))) < 1e-12);
  CHECK(std::isfinite(apply_link(Link::kSoftplus, 1000.0)));
  for (double x : {-700.0, -30.0, -1.0, 0.3, 5.0, 60.0}) {
    CHECK(apply_link(Link::kSoftplus, x) > 0.0);
    CHECK(apply_link(Link::kExponential, x) > 0.0);
    const double s = apply_link(Link::kSigmoid, x);
    CHECK(s > 0.0);
    CHECK(s < 1.0);
  }
  for (double x : {-3.0, -0.2, 0.4, 0.9, 2.5}) {
    for (Link l : {Link::kIdentity, Link::kSoftplus, Link::kExponential,
                   Link::kSigmoid, Link::kInverseExponential}) {
      CHECK(apply_link(l, x) == doctest::Approx(oracle::link(l, x)).epsilon(1e-13));
      // The sigmoid saturates at its floor far from its midpoint.
      if (l != Link::kSigmoid || std::abs(x - 0.5) <= 1.0)
        CHECK(inverse_link(l, apply_link(l, x)) == doctest::Approx(x).epsilon(1e-8));
    }
  }
}

TEST_CASE("family and link compatibility") {
  CHECK(compatible(ObsFamily::kNormal, Link::kIdentity));
  CHECK(compatible(ObsFamily::kPoisson, Link::kSoftplus));
  CHECK(compatible(ObsFamily::kGamma, Link::kSoftplus));
  CHECK(compatible(ObsFamily::kBeta, Link::kSigmoid));
  CHECK_FALSE(compatible(ObsFamily::kBeta, Link::kIdentity));
  CHECK_FALSE(compatible(ObsFamily::kPoisson, Link::kIdentity));
  Hyperparameters hp = Hyperparameters::defaults(2);
  hp.family = ObsFamily::kBeta;
  hp.link = Link::kIdentity;
  CHECK_THROWS_AS(hp.validate(), std::invalid_argument);
  hp.link = Link::kSigmoid;
  CHECK_NOTHROW(hp.validate());
  hp.nu0 = 0.5;
  CHECK_THROWS_AS(hp.validate(), std::invalid_argument);
}

TEST_CASE("parsers name the offending text") {
  CHECK(parse_domain("unit") == Domain::kUnit);
  CHECK(parse_link("soft-plus") == Link::kSoftplus);
  try {
    parse_domain("complex");
    FAIL("expected a throw");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("complex") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_obs_family("cauchy"), std::invalid_argument);
}

TEST_CASE("dataset domain validation") {
  Dataset d;
  d.y = Eigen::MatrixXd::Constant(2, 2, 0.5);
  d.domain = Domain::kUnit;
  CHECK_NOTHROW(d.validate());
  d.domain = Domain::kInteger;
  CHECK_THROWS_AS(d.validate(), std::invalid_argument);
  d.y(1, 1) = 2.0;
  d.y(0, 0) = 1.0;
  d.y(0, 1) = 0.0;
  d.y(1, 0) = 7.0;
  CHECK_NOTHROW(d.validate());
  d.y(1, 0) = -1.0;
  CHECK_THROWS_AS(d.validate(), std::invalid_argument);
}

TEST_CASE("observation likelihood") {
  const int m = 4;
  Hyperparameters hp = Hyperparameters::defaults(m);
  hp.eta = Eigen::VectorXd::Ones(m);
  const Eigen::VectorXd y = Eigen::VectorXd::LinSpaced(m, -1.0, 2.0);
  const Eigen::VectorXd pi1 = Eigen::VectorXd::Ones(1);
  CHECK(log_lik_obs(hp, y, pi1, y.transpose()) ==
        doctest::Approx(-m * 0.9189385332046727).epsilon(1e-14));

  hp.family = ObsFamily::kPoisson;
  hp.link = Link::kSoftplus;
  CHECK(log_lik_obs(hp, Eigen::VectorXd::Zero(m), pi1, Eigen::MatrixXd::Zero(1, m)) ==
        doctest::Approx(-m * 0.6931471805599453).epsilon(1e-14));

  std::mt19937_64 gen(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    const int k = 3;
    Eigen::VectorXd pi(k);
    for (int j = 0; j < k; ++j) pi[j] = 0.1 + u(gen);
    pi /= pi.sum();
    // Means stay inside the range where no spread clamping applies.
    const Eigen::MatrixXd xbar =
        (0.5 + 0.2 * Eigen::ArrayXXd::Random(k, m)).matrix();
    Eigen::VectorXd yb(m), yg(m), yp(m);
    for (int j = 0; j < m; ++j) {
      yb[j] = 0.05 + 0.9 * u(gen);
      yg[j] = 0.1 + 3 * u(gen);
      yp[j] = std::floor(5 * u(gen));
    }
    hp.eta = Eigen::VectorXd::Constant(m, 0.05 + 0.1 * u(gen));
    hp.family = ObsFamily::kBeta;
    hp.link = Link::kSigmoid;
    CHECK(log_lik_obs(hp, yb, pi, xbar) ==
          doctest::Approx(oracle::observation(hp, yb, pi, xbar)).epsilon(1e-10));
    hp.family = ObsFamily::kGamma;
    hp.link = Link::kSoftplus;
    CHECK(log_lik_obs(hp, yg, pi, xbar) ==
          doctest::Approx(oracle::observation(hp, yg, pi, xbar)).epsilon(1e-10));
    hp.family = ObsFamily::kPoisson;
    CHECK(log_lik_obs(hp, yp, pi, xbar) ==
          doctest::Approx(oracle::observation(hp, yp, pi, xbar)).epsilon(1e-10));
    hp.family = ObsFamily::kNormal;
    hp.link = Link::kIdentity;
    CHECK(log_lik_obs(hp, yg, pi, xbar) ==
          doctest::Approx(oracle::observation(hp, yg, pi, xbar)).epsilon(1e-10));
  }
  hp.family = ObsFamily::kPoisson;
  hp.link = Link::kSoftplus;
  CHECK_THROWS_AS(log_lik_obs(hp, Eigen::VectorXd::Constant(m, 0.5), pi1,
                              Eigen::MatrixXd::Zero(1, m)),
                  std::domain_error);
}

TEST_CASE("log joint with no observations keeps the global terms") {
  const Hyperparameters hp = testing::small_hp(2);
  LatentPoint z = random_point(0, 3, 2, 4);
  Dataset data;
  data.y.resize(0, 2);
  double expect = log_beta_prior(hp, z.beta);
  for (int k = 0; k < 3; ++k)
    expect += log_mu_prior(hp, z.mu.row(k).transpose()) + log_sigma_prior(hp, z.sigma[k]);
  CHECK(log_joint(hp, data, z) == doctest::Approx(expect).epsilon(1e-14));
  CHECK(partial_log_joint(Block::beta(), hp, data, z) ==
        doctest::Approx(oracle::dirichlet(z.beta, oracle::alpha0(hp, 3))).epsilon(1e-12));
}

TEST_CASE("unit particle scaling leaves the factor covariance unchanged") {
  std::mt19937_64 gen(6);
  const Eigen::MatrixXd sigma = oracle::random_spd(3, gen);
  const Eigen::VectorXd x = Eigen::VectorXd::Random(3);
  const Eigen::VectorXd mu = Eigen::VectorXd::Random(3);
  CHECK(log_xbar_prior(x, mu, FactorCovariance::from(sigma), 1.0) ==
        doctest::Approx(oracle::mvn(x, mu, sigma)).epsilon(1e-12));
  CHECK(log_xbar_prior(x, mu, FactorCovariance::from(sigma), 4.0) ==
        doctest::Approx(oracle::mvn(x, mu, sigma / 4.0)).epsilon(1e-12));
}

TEST_CASE("log joint and partial log joints against term-by-term oracle") {
  for (ObsFamily fam : {ObsFamily::kNormal, ObsFamily::kGamma}) {
    Hyperparameters hp = testing::small_hp(2);
    hp.family = fam;
    hp.link = fam == ObsFamily::kNormal ? Link::kIdentity : Link::kSoftplus;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const LatentPoint z = random_point(3, 2, 2, seed);
      Dataset data = testing::random_data(3, 2, seed);
      data.y = data.y.cwiseAbs().array() + 0.1;
      const oracle::Terms t = oracle::log_joint_terms(hp, data.y, z);
      const double joint = log_joint(hp, data, z);
      CHECK(joint == doctest::Approx(t.total()).epsilon(1e-11));

      const double pb = partial_log_joint(Block::beta(), hp, data, z);
      double pb_expect = t.beta;
      for (double v : t.pi) pb_expect += v;
      CHECK(pb == doctest::Approx(pb_expect).epsilon(1e-11));

      // Reassemble the joint from the partial groups, removing the x-bar
      // priors that both pi(n) and P(n) contain.
      double rebuilt = pb + t.mu + t.sigma;
      for (int n = 0; n < 3; ++n) {
        const double ppi = partial_log_joint(Block::pi(n), hp, data, z);
        const double pp = partial_log_joint(Block::particles(n), hp, data, z);
        double xsum = 0.0;
        for (int k = 0; k < 2; ++k) {
          xsum += t.xbar[n][k];
          CHECK(partial_log_joint(Block::xbar(n, k), hp, data, z) ==
                doctest::Approx(t.xbar[n][k] + t.lik[n]).epsilon(1e-11));
        }
        CHECK(ppi == doctest::Approx(xsum + t.lik[n] + t.pi[n]).epsilon(1e-11));
        CHECK(pp == doctest::Approx(xsum + t.particles[n]).epsilon(1e-11));
        rebuilt += (ppi - t.pi[n]) + pp - xsum;
      }
      CHECK(rebuilt == doctest::Approx(joint).epsilon(1e-11));
    }
  }
}

TEST_CASE("partial log joint of x-bar is local") {
  const Hyperparameters hp = testing::small_hp(2);
  LatentPoint z = random_point(3, 2, 2, 12);
  const Dataset data = testing::random_data(3, 2, 12);
  const double before = partial_log_joint(Block::xbar(0, 1), hp, data, z);
  z.xbar[1](0, 0) += 3.0;
  z.xbar[2](1, 1) -= 2.0;
  CHECK(partial_log_joint(Block::xbar(0, 1), hp, data, z) == before);
  z.xbar[0](0, 1) += 1.0;  // same observation, other factor: likelihood moves
  CHECK(partial_log_joint(Block::xbar(0, 1), hp, data, z) != before);
}

TEST_CASE("ELBO is zero when q equals the prior and there is no data") {
  const int m = 2, k = 3;
  Hyperparameters hp = Hyperparameters::defaults(m);
  hp.sigma0 = kMuScale;
  hp.mu0 = 0.7;
  hp.alpha0 = Eigen::Vector3d(1.5, 2.0, 0.7);
  hp.psi0 = Eigen::Matrix2d::Identity() * 2.0;
  hp.nu0 = 5.0;
  VariationalState s;
  s.K = k;
  s.lam_beta = hp.alpha0;
  s.lam_pi.resize(0, k);
  s.lam_mu_mean = Eigen::MatrixXd::Constant(k, m, hp.mu0);
  s.lam_sigma_nu = Eigen::VectorXd::Constant(k, hp.nu0);
  s.lam_sigma_psi.assign(k, hp.psi0);
  s.lam_p.resize(0);
  Dataset data;
  data.y.resize(0, m);
  const ElboEstimate e = elbo(hp, data, s, 200, 9);
  CHECK(std::abs(e.value) < 1e-9 + 3 * e.std_error);
}

TEST_CASE("ELBO matches an independent brute-force estimate") {
  const Hyperparameters hp = testing::small_hp(2);
  const VariationalState s = testing::random_state(5, 2, 2, 31);
  const Dataset data = testing::random_data(5, 2, 31);
  const ElboEstimate e = elbo(hp, data, s, 20000, 123);
  const oracle::McEstimate o = oracle::elbo(hp, data.y, s, 1000000, 77);
  const double se = std::hypot(e.std_error, o.std_error);
  CHECK(std::abs(e.value - o.mean) < 3 * se);
}

TEST_CASE("ELBO estimator spread shrinks with the sample count") {
  const Hyperparameters hp = testing::small_hp(2);
  const VariationalState s = testing::random_state(4, 2, 2, 8);
  const Dataset data = testing::random_data(4, 2, 8);
  auto spread = [&](int samples) {
    const int reps = 200;
    Eigen::VectorXd v(reps);
    for (int r = 0; r < reps; ++r) v[r] = elbo(hp, data, s, samples, 1000 + r).value;
    return std::sqrt((v.array() - v.mean()).square().sum() / (reps - 1));
  };
  const double ratio = spread(10) / spread(1000);
  CHECK(ratio > 7.0);
  CHECK(ratio < 14.0);
}

TEST_CASE("ELBO does not exceed the log evidence") {
  // One observation, one factor, one feature: the evidence integral over
  // (mu, x-bar) is Gaussian, leaving an expectation over (Sigma, P).
  const int m = 1;
  Hyperparameters hp = Hyperparameters::defaults(m);
  hp.eta = Eigen::VectorXd::Constant(1, 0.5);
  hp.sigma0 = 2.0;
  hp.mu0 = 0.3;
  hp.rho = 30.0;
  hp.nu0 = 4.0;
  Dataset data;
  data.y = Eigen::MatrixXd::Constant(1, 1, 1.1);

  std::mt19937_64 gen(3);
  const int draws = 400000;
  long double acc = 0.0L;
  for (int i = 0; i < draws; ++i) {
    const double sigma = oracle::draw_inverse_wishart(4, hp.psi0, gen)(0, 0);
    const double p = std::poisson_distribution<long>(hp.rho)(gen);
    const double var = hp.sigma0 * hp.sigma0 + sigma / std::max(p, 1e-10) + 0.25;
    acc += std::exp(oracle::normal(1.1, hp.mu0, std::sqrt(var)));
  }
  const double log_evidence = std::log(static_cast<double>(acc / draws));

  VariationalState s;
  s.K = 1;
  s.lam_beta = Eigen::VectorXd::Ones(1);
  s.lam_pi = Eigen::MatrixXd::Ones(1, 1);
  s.lam_sigma_nu = Eigen::VectorXd::Constant(1, 5.0);
  s.lam_sigma_psi.assign(1, Eigen::MatrixXd::Identity(1, 1));
  s.lam_p = Eigen::VectorXd::Constant(1, 30.0);
  s.lam_xbar_scale.assign(1, Eigen::MatrixXd::Constant(1, 1, 0.3));
  for (double centre : {0.0, 0.5, 0.9, 1.1}) {
    s.lam_mu_mean = Eigen::MatrixXd::Constant(1, 1, centre);
    s.lam_xbar_mean.assign(1, Eigen::MatrixXd::Constant(1, 1, centre));
    const ElboEstimate e = elbo(hp, data, s, 20000, 5);
    CHECK(e.value < log_evidence + 3 * e.std_error);
  }
}

TEST_CASE("state invariants are checked") {
  VariationalState s = testing::random_state(3, 2, 2, 1);
  CHECK_NOTHROW(s.check_invariants());
  VariationalState bad = s;
  bad.lam_sigma_nu[0] = 2.5;
  CHECK_THROWS_AS(bad.check_invariants(), std::logic_error);
  bad = s;
  bad.lam_pi(1, 1) = 0.0;
  CHECK_THROWS_AS(bad.check_invariants(), std::logic_error);
  bad = s;
  bad.remainder = true;
  CHECK_THROWS_AS(bad.check_invariants(), std::logic_error);
}
