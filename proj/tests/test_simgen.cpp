#include <doctest.h>

#include <cmath>

#include "ndm/simgen.hpp"

using namespace ndm;

namespace {

SimSpec tiny(int procedure, Domain domain, std::uint64_t seed) {
  SimSpec s;
  s.procedure = procedure;
  s.domain = domain;
  s.K = 3;
  s.N = 40;
  s.M = 4;
  s.rho = 50.0;
  s.seed = seed;
  return s;
}

double mean_abs_xbar_error(const SimOutput& out) {
  const GroundTruth& t = *out.data.truth;
  double total = 0.0;
  int count = 0;
  for (std::size_t n = 0; n < t.xbar.size(); ++n)
    for (Eigen::Index k = 0; k < t.factors(); ++k) {
      if (t.xbar_mask(n, k)) continue;
      total += (t.xbar[n].row(k) - t.mu.row(k)).cwiseAbs().sum();
      count += static_cast<int>(t.mu.cols());
    }
  return total / count;
}

}  // namespace

TEST_CASE("domain_f examples") {
  const auto real = std::get<dist::Normal>(domain_f(Domain::kReal, 1.5, 0.3));
  CHECK(real.mean() == 1.5);
  CHECK(real.scale() == 0.3);

  const auto pos =
      std::get<dist::GammaMeanShape>(domain_f(Domain::kPositive, 0.0, 0.2));
  CHECK(pos.mean() == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK(pos.spread() == 0.2);

  const auto count = std::get<dist::Poisson>(domain_f(Domain::kInteger, 1.0, 9.0));
  CHECK(count.rate() == doctest::Approx(std::log1p(std::exp(1.0))).epsilon(1e-14));

  bool clamped = true;
  const auto narrow =
      std::get<dist::BetaMeanSpread>(domain_f(Domain::kUnit, 0.5, 0.1, &clamped));
  CHECK_FALSE(clamped);
  CHECK(narrow.mean() == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(narrow.spread() == 0.1);
  const auto wide =
      std::get<dist::BetaMeanSpread>(domain_f(Domain::kUnit, 0.5, 0.6, &clamped));
  CHECK(clamped);
  CHECK(wide.spread() == doctest::Approx(0.495).epsilon(1e-14));
}

TEST_CASE("family and link per domain") {
  CHECK(family_for(Domain::kReal) == ObsFamily::kNormal);
  CHECK(family_for(Domain::kPositive) == ObsFamily::kGamma);
  CHECK(family_for(Domain::kInteger) == ObsFamily::kPoisson);
  CHECK(family_for(Domain::kUnit) == ObsFamily::kBeta);
  CHECK(link_for(Domain::kReal) == Link::kIdentity);
  CHECK(link_for(Domain::kPositive) == Link::kSoftplus);
  CHECK(link_for(Domain::kInteger) == Link::kSoftplus);
  CHECK(link_for(Domain::kUnit) == Link::kSigmoid);
}

TEST_CASE("spec validation") {
  SimSpec s;
  s.procedure = 5;
  CHECK_THROWS_AS(simulate(s), std::invalid_argument);
  s = SimSpec{};
  s.K = 0;
  CHECK_THROWS_AS(simulate(s), std::invalid_argument);
  s = SimSpec{};
  s.rho = -1.0;
  CHECK_THROWS_AS(simulate(s), std::invalid_argument);
}

TEST_CASE("simulated data lie in their domain") {
  for (int proc = 1; proc <= 4; ++proc)
    for (Domain d : {Domain::kReal, Domain::kPositive, Domain::kInteger, Domain::kUnit}) {
      CAPTURE(proc);
      CAPTURE(static_cast<int>(d));
      const SimOutput out = simulate(tiny(proc, d, 10 + proc));
      CHECK(out.data.y.rows() == 40);
      CHECK(out.data.y.cols() == 4);
      CHECK_NOTHROW(out.data.validate());
      CHECK(out.data.y.allFinite());
      const Eigen::ArrayXXd y = out.data.y.array();
      if (d == Domain::kPositive) CHECK((y > 0.0).all());
      if (d == Domain::kUnit) CHECK(((y > 0.0) && (y < 1.0)).all());
      if (d == Domain::kInteger && proc <= 2) {
        CHECK((y >= 0.0).all());
        CHECK((y == y.round()).all());
        CHECK(out.data.domain == Domain::kInteger);
      }
      if (d == Domain::kInteger && proc >= 3) CHECK(out.data.domain == Domain::kReal);
      const GroundTruth& t = *out.data.truth;
      CHECK_NOTHROW(t.validate(40, 4));
      for (Eigen::Index n = 0; n < 40; ++n) {
        CHECK(t.pi.row(n).sum() == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(t.particles[n] >= 1.0);
      }
    }
}

TEST_CASE("procedure 4 draws at least one mode per factor") {
  SimSpec s = tiny(4, Domain::kReal, 3);
  s.mode_rate = 0.5;  // zero draws are common and must be redrawn
  const SimOutput out = simulate(s);
  REQUIRE(out.data.truth->modes.size() == 3);
  for (const auto& m : out.data.truth->modes) {
    CHECK(m.rows() >= 1);
    CHECK(m.cols() == 4);
  }
}

TEST_CASE("proportions and factor features match the particles") {
  for (int proc : {1, 2, 3, 4}) {
    SimSpec s = tiny(proc, Domain::kReal, 7);
    s.keep_particles = true;
    const SimOutput out = simulate(s);
    const GroundTruth& t = *out.data.truth;
    REQUIRE(out.particles.size() == 40);
    for (int n = 0; n < 40; ++n) {
      const Eigen::MatrixXd& x = out.particles[n];
      const auto& z = out.assignments[n];
      REQUIRE(static_cast<double>(x.rows()) == t.particles[n]);
      REQUIRE(z.size() == static_cast<std::size_t>(x.rows()));
      Eigen::VectorXd counts = Eigen::VectorXd::Zero(3);
      Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(3, 4);
      for (std::size_t p = 0; p < z.size(); ++p) {
        counts[z[p]] += 1.0;
        sums.row(z[p]) += x.row(static_cast<Eigen::Index>(p));
      }
      for (int k = 0; k < 3; ++k) {
        CHECK(t.pi(n, k) == doctest::Approx(counts[k] / t.particles[n]).epsilon(1e-14));
        CHECK(t.xbar_mask(n, k) == (counts[k] == 0.0));
        if (counts[k] > 0.0)
          CHECK(t.xbar[n].row(k).isApprox(sums.row(k) / counts[k], 1e-12));
      }
      if (proc >= 3) {
        // y is the particle average.
        const Eigen::RowVectorXd avg = x.colwise().mean();
        CHECK(out.data.y.row(n).isApprox(avg, 1e-12));
        CHECK(out.data.y.row(n).isApprox(t.pi.row(n) * t.xbar[n], 1e-10));
      }
    }
  }
}

TEST_CASE("factor features concentrate as particle counts grow") {
  SimSpec s = tiny(2, Domain::kReal, 5);
  s.N = 20;
  s.alpha = 100.0;
  s.rho = 100.0;
  const double small = mean_abs_xbar_error(simulate(s));
  s.rho = 10000.0;
  const double large = mean_abs_xbar_error(simulate(s));
  // Standard error scales as 1/sqrt(P): a hundredfold increase gives ~10x.
  CHECK(small / large > 5.0);
  CHECK(small / large < 20.0);
}

TEST_CASE("large alpha makes each proportion vector follow beta") {
  SimSpec s = tiny(2, Domain::kReal, 8);
  s.N = 5;
  s.M = 2;
  s.alpha = 1e6;
  s.rho = 1e5;
  const SimOutput out = simulate(s);
  const GroundTruth& t = *out.data.truth;
  for (int n = 0; n < 5; ++n)
    CHECK((t.pi.row(n).transpose() - t.beta).cwiseAbs().maxCoeff() < 1e-2);
}

TEST_CASE("particle assignments pass a chi-square test against beta") {
  SimSpec s = tiny(2, Domain::kReal, 12);
  s.N = 50;
  s.alpha = 1e6;
  s.rho = 100.0;
  s.alpha0 = 5.0;
  const SimOutput out = simulate(s);
  const GroundTruth& t = *out.data.truth;
  Eigen::VectorXd observed = Eigen::VectorXd::Zero(3);
  double total = 0.0;
  for (int n = 0; n < 50; ++n) {
    observed += t.pi.row(n).transpose() * t.particles[n];
    total += t.particles[n];
  }
  double chi2 = 0.0;
  for (int k = 0; k < 3; ++k) {
    const double expected = total * t.beta[k];
    chi2 += (observed[k] - expected) * (observed[k] - expected) / expected;
  }
  CHECK(chi2 < 9.21034);  // 99th percentile, two degrees of freedom
}

TEST_CASE("simulation is deterministic in the seed") {
  for (int proc = 1; proc <= 4; ++proc) {
    const SimOutput a = simulate(tiny(proc, Domain::kPositive, 21));
    const SimOutput b = simulate(tiny(proc, Domain::kPositive, 21));
    const SimOutput c = simulate(tiny(proc, Domain::kPositive, 22));
    CHECK(a.data.y == b.data.y);
    CHECK(a.data.truth->mu == b.data.truth->mu);
    CHECK(a.data.truth->pi == b.data.truth->pi);
    CHECK(a.data.y != c.data.y);
  }
}

TEST_CASE("wide unit-interval spreads are clamped with a warning") {
  SimSpec s = tiny(2, Domain::kUnit, 4);
  s.spread_a = 3.0;
  s.spread_b = 10.0;  // spreads far above 0.5
  const SimOutput out = simulate(s);
  REQUIRE_FALSE(out.warnings.empty());
  CHECK(out.warnings.front().find("clamped") != std::string::npos);
}

TEST_CASE("minimum separation is enforced") {
  SimSpec s = tiny(2, Domain::kReal, 6);
  s.sigma = 5.0;
  s.min_separation = 4.0;
  const SimOutput out = simulate(s);
  const Eigen::MatrixXd& mu = out.data.truth->mu;
  for (int a = 0; a < 3; ++a)
    for (int b = a + 1; b < 3; ++b) CHECK((mu.row(a) - mu.row(b)).norm() >= 4.0);
}
