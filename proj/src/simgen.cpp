#include "ndm/simgen.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace ndm {

Eigen::MatrixXd SimSpec::psi_or_identity() const {
  if (psi.size() == 0) return Eigen::MatrixXd::Identity(M, M);
  return psi;
}

double SimSpec::nu_or_default() const {
  return nu > 0.0 ? nu : static_cast<double>(M) + 2.0;
}

void SimSpec::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument(what); };
  if (procedure < 1 || procedure > 4) fail("procedure must be 1, 2, 3 or 4");
  if (K < 1 || N < 1 || M < 1) fail("K, N and M must be at least 1");
  if (!(alpha0 > 0.0) || !(alpha > 0.0)) fail("alpha0 and alpha must be positive");
  if (!(sigma > 0.0)) fail("sigma must be positive");
  if (!(rho > 0.0)) fail("rho must be positive");
  if (!(spread_a > 0.0) || !(spread_b > 0.0))
    fail("spread_a and spread_b must be positive");
  if (!(mode_rate > 0.0)) fail("mode_rate must be positive");
  if (psi.size() != 0 && (psi.rows() != M || psi.cols() != M))
    fail("psi must be M x M");
  if (!(nu_or_default() > static_cast<double>(M) - 1.0))
    fail("nu must exceed M - 1");
  if (min_separation < 0.0) fail("min_separation must be non-negative");
}

ObsFamily family_for(Domain domain) {
  switch (domain) {
    case Domain::kReal: return ObsFamily::kNormal;
    case Domain::kPositive: return ObsFamily::kGamma;
    case Domain::kInteger: return ObsFamily::kPoisson;
    case Domain::kUnit: return ObsFamily::kBeta;
  }
  return ObsFamily::kNormal;
}

Link link_for(Domain domain) {
  switch (domain) {
    case Domain::kReal: return Link::kIdentity;
    case Domain::kPositive:
    case Domain::kInteger: return Link::kSoftplus;
    case Domain::kUnit: return Link::kSigmoid;
  }
  return Link::kIdentity;
}

dist::DistParams domain_f(Domain domain, double mu, double sigma,
                          bool* clamped) {
  if (clamped) *clamped = false;
  switch (domain) {
    case Domain::kReal: return dist::Normal(mu, sigma);
    case Domain::kPositive:
      return dist::GammaMeanShape(apply_link(Link::kSoftplus, mu), sigma);
    case Domain::kInteger:
      return dist::Poisson(apply_link(Link::kSoftplus, mu));
    case Domain::kUnit: {
      const double m = apply_link(Link::kSigmoid, mu);
      const double limit = 0.99 * std::sqrt(m * (1.0 - m));
      if (sigma >= limit) {
        if (clamped) *clamped = true;
        sigma = limit;
      }
      return dist::BetaMeanSpread(m, sigma);
    }
  }
  throw std::invalid_argument("unknown domain");
}

namespace {

Eigen::VectorXd draw_gaussian(const Eigen::VectorXd& mean,
                              const Eigen::MatrixXd& chol, double scale,
                              Rng& rng) {
  std::normal_distribution<double> std_normal(0.0, 1.0);
  Eigen::VectorXd eps(mean.size());
  for (Eigen::Index j = 0; j < eps.size(); ++j) eps[j] = std_normal(rng);
  const Eigen::VectorXd step = chol.triangularView<Eigen::Lower>() * eps;
  return mean + scale * step;
}

double draw_f(Domain domain, double mu, double sigma, Rng& rng, bool& clamped) {
  bool c = false;
  const auto params = domain_f(domain, mu, sigma, &c);
  clamped = clamped || c;
  return std::get<double>(dist::sample(params, rng));
}

struct Globals {
  Eigen::VectorXd beta;
  Eigen::MatrixXd mu;
  std::vector<Eigen::MatrixXd> sigma;
  std::vector<Eigen::MatrixXd> chol;
  std::vector<Eigen::MatrixXd> modes;
  Eigen::VectorXd spreads;
};

bool separated(const Eigen::MatrixXd& mu, double min_dist) {
  for (Eigen::Index a = 0; a < mu.rows(); ++a)
    for (Eigen::Index b = a + 1; b < mu.rows(); ++b)
      if ((mu.row(a) - mu.row(b)).norm() < min_dist) return false;
  return true;
}

Globals draw_globals(const SimSpec& spec, Rng& rng) {
  Globals g;
  g.beta = dist::sample(
      dist::Dirichlet(Eigen::VectorXd::Constant(spec.K, spec.alpha0)), rng);
  const dist::InverseWishart iw(spec.nu_or_default(), spec.psi_or_identity());
  const dist::Normal mu_prior(spec.mu0, spec.sigma);
  constexpr int kMaxAttempts = 10000;
  for (int attempt = 0;; ++attempt) {
    if (attempt == kMaxAttempts)
      throw std::runtime_error(
          "could not draw factor means satisfying min_separation");
    g.mu.resize(spec.K, spec.M);
    g.sigma.clear();
    g.modes.clear();
    for (int k = 0; k < spec.K; ++k) {
      for (int m = 0; m < spec.M; ++m) g.mu(k, m) = dist::sample(mu_prior, rng);
      g.sigma.push_back(dist::sample(iw, rng));
      if (spec.procedure == 4) {
        const dist::Poisson mode_count(spec.mode_rate);
        double count = 0.0;
        while (count < 1.0) count = dist::sample(mode_count, rng);
        const dist::MultivariateNormal around(g.mu.row(k).transpose(),
                                              g.sigma.back());
        Eigen::MatrixXd modes(static_cast<Eigen::Index>(count), spec.M);
        for (Eigen::Index s = 0; s < modes.rows(); ++s)
          modes.row(s) = dist::sample(around, rng).transpose();
        g.modes.push_back(std::move(modes));
      }
    }
    if (spec.min_separation <= 0.0 || separated(g.mu, spec.min_separation))
      break;
  }
  g.chol.reserve(spec.K);
  for (const auto& s : g.sigma)
    g.chol.push_back(dist::MultivariateNormal(
                         Eigen::VectorXd::Zero(spec.M), s).cholesky());
  if (spec.domain != Domain::kInteger) {
    const dist::GammaShapeScale precision(spec.spread_a, 1.0 / spec.spread_b);
    g.spreads.resize(spec.M);
    for (int m = 0; m < spec.M; ++m)
      g.spreads[m] = 1.0 / dist::sample(precision, rng);
  }
  return g;
}

struct LocalDraw {
  Eigen::VectorXd pi;
  Eigen::MatrixXd xbar;
  std::vector<bool> empty;
  double particles = 0.0;
  Eigen::VectorXd y;
  bool clamped = false;
  Eigen::MatrixXd particle_features;
  std::vector<int> labels;
};

LocalDraw draw_local(const SimSpec& spec, const Globals& g, Rng& rng) {
  const int K = spec.K;
  const int M = spec.M;
  LocalDraw out;
  const Eigen::VectorXd conc =
      spec.procedure == 4 ? g.beta : Eigen::VectorXd(spec.alpha * g.beta);
  const Eigen::VectorXd pi =
      dist::sample(dist::Dirichlet(conc.cwiseMax(1e-300)), rng);

  Eigen::MatrixXd local(K, M);
  const bool explicit_local = spec.procedure == 1 || spec.procedure == 3;
  if (explicit_local)
    for (int k = 0; k < K; ++k)
      local.row(k) = draw_gaussian(g.mu.row(k).transpose(), g.chol[k], 1.0, rng)
                         .transpose();

  const dist::Poisson count_prior(spec.rho);
  double count = 0.0;
  while (count < 1.0) count = dist::sample(count_prior, rng);
  const auto P = static_cast<Eigen::Index>(count);
  out.particles = count;

  auto spread = [&](int m) { return g.spreads.size() ? g.spreads[m] : 1.0; };
  std::discrete_distribution<int> assign(pi.data(), pi.data() + K);
  Eigen::MatrixXd x(P, M);
  std::vector<int> z(P);
  for (Eigen::Index p = 0; p < P; ++p) {
    const int k = assign(rng);
    z[p] = k;
    switch (spec.procedure) {
      case 1:
        x.row(p) = draw_gaussian(local.row(k).transpose(), g.chol[k], 1e-3, rng)
                       .transpose();
        break;
      case 2:
        x.row(p) =
            draw_gaussian(g.mu.row(k).transpose(), g.chol[k], 1.0, rng).transpose();
        break;
      case 3:
        for (int m = 0; m < M; ++m)
          x(p, m) = draw_f(spec.domain, local(k, m), spread(m), rng, out.clamped);
        break;
      case 4: {
        const auto& modes = g.modes[k];
        std::uniform_int_distribution<Eigen::Index> pick(0, modes.rows() - 1);
        const Eigen::Index s = pick(rng);
        for (int m = 0; m < M; ++m)
          x(p, m) = draw_f(spec.domain, modes(s, m), spread(m), rng, out.clamped);
        break;
      }
    }
  }

  const Eigen::VectorXd particle_mean = x.colwise().mean().transpose();
  if (spec.procedure <= 2) {
    out.y.resize(M);
    for (int m = 0; m < M; ++m)
      out.y[m] = draw_f(spec.domain, particle_mean[m], spread(m), rng, out.clamped);
  } else {
    out.y = particle_mean;
  }

  Eigen::VectorXd counts = Eigen::VectorXd::Zero(K);
  Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(K, M);
  for (Eigen::Index p = 0; p < P; ++p) {
    counts[z[p]] += 1.0;
    sums.row(z[p]) += x.row(p);
  }
  out.pi = counts / count;
  out.xbar.resize(K, M);
  out.empty.assign(K, false);
  for (int k = 0; k < K; ++k) {
    if (counts[k] > 0.0) {
      out.xbar.row(k) = sums.row(k) / counts[k];
    } else {
      out.empty[k] = true;
      if (explicit_local)
        out.xbar.row(k) = local.row(k);
      else
        out.xbar.row(k) = g.mu.row(k);
    }
  }
  if (spec.keep_particles) {
    out.particle_features = std::move(x);
    out.labels = std::move(z);
  }
  return out;
}

}  // namespace

SimOutput simulate(const SimSpec& spec) {
  spec.validate();
  Rng global_rng = substream(spec.seed, {stream::kSim, 0});
  const Globals g = draw_globals(spec, global_rng);

  std::vector<LocalDraw> locals(spec.N);
  for (int n = 0; n < spec.N; ++n) {
    Rng rng = substream(spec.seed, {stream::kSim, 1, static_cast<std::uint64_t>(n)});
    locals[n] = draw_local(spec, g, rng);
  }

  SimOutput out;
  GroundTruth truth;
  truth.beta = g.beta;
  truth.mu = g.mu;
  truth.sigma = g.sigma;
  truth.spreads = g.spreads;
  truth.modes = g.modes;
  truth.pi.resize(spec.N, spec.K);
  truth.particles.resize(spec.N);
  truth.xbar_mask.resize(spec.N, spec.K);
  truth.xbar.reserve(spec.N);
  Eigen::MatrixXd y(spec.N, spec.M);
  bool clamped = false;
  for (int n = 0; n < spec.N; ++n) {
    auto& l = locals[n];
    truth.pi.row(n) = l.pi.transpose();
    truth.particles[n] = l.particles;
    for (int k = 0; k < spec.K; ++k) truth.xbar_mask(n, k) = l.empty[k];
    truth.xbar.push_back(std::move(l.xbar));
    y.row(n) = l.y.transpose();
    clamped = clamped || l.clamped;
    if (spec.keep_particles) {
      out.particles.push_back(std::move(l.particle_features));
      out.assignments.push_back(std::move(l.labels));
    }
  }
  if (clamped)
    out.warnings.push_back(
        "Beta spread exceeded the admissible maximum for some means and was "
        "clamped to 0.99 sqrt(m (1 - m))");

  out.data.y = std::move(y);
  out.data.domain = spec.domain;
  if (spec.procedure >= 3 && spec.domain == Domain::kInteger) {
    out.data.domain = Domain::kReal;
    out.warnings.push_back(
        "averages of integer draws are not integral; dataset declared real");
  }
  out.data.feature_names.reserve(spec.M);
  for (int m = 0; m < spec.M; ++m)
    out.data.feature_names.push_back("f" + std::to_string(m));
  out.data.truth = std::move(truth);
  return out;
}

}  // namespace ndm
