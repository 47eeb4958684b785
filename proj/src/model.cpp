#include "ndm/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace ndm {

namespace {

constexpr double kLogTwoPi = 1.8378770664093454836;
constexpr double kSigmoidFloor = 1e-6;
constexpr double kSigmoidGrowth = 10.0;
constexpr double kSigmoidMidpoint = 0.5;
constexpr double kUnitClamp = 1e-6;

[[noreturn]] void invalid(const std::string& what) {
  throw std::invalid_argument(what);
}

}  // namespace

// -------------------------------------------------------------- enums

std::string_view to_string(ObsFamily f) {
  switch (f) {
    case ObsFamily::kNormal: return "normal";
    case ObsFamily::kPoisson: return "poisson";
    case ObsFamily::kGamma: return "gamma";
    case ObsFamily::kBeta: return "beta";
  }
  return "?";
}

std::string_view to_string(Link l) {
  switch (l) {
    case Link::kIdentity: return "identity";
    case Link::kSoftplus: return "softplus";
    case Link::kExponential: return "exponential";
    case Link::kSigmoid: return "sigmoid";
    case Link::kInverseExponential: return "inverse-exponential";
  }
  return "?";
}

std::string_view to_string(Domain d) {
  switch (d) {
    case Domain::kReal: return "real";
    case Domain::kPositive: return "positive";
    case Domain::kInteger: return "integer";
    case Domain::kUnit: return "unit";
  }
  return "?";
}

ObsFamily parse_obs_family(std::string_view s) {
  if (s == "normal") return ObsFamily::kNormal;
  if (s == "poisson") return ObsFamily::kPoisson;
  if (s == "gamma") return ObsFamily::kGamma;
  if (s == "beta") return ObsFamily::kBeta;
  invalid("unknown observation family '" + std::string(s) + "'");
}

Link parse_link(std::string_view s) {
  if (s == "identity") return Link::kIdentity;
  if (s == "softplus" || s == "soft-plus") return Link::kSoftplus;
  if (s == "exponential" || s == "exp") return Link::kExponential;
  if (s == "sigmoid") return Link::kSigmoid;
  if (s == "inverse-exponential") return Link::kInverseExponential;
  invalid("unknown link function '" + std::string(s) + "'");
}

Domain parse_domain(std::string_view s) {
  if (s == "real") return Domain::kReal;
  if (s == "positive") return Domain::kPositive;
  if (s == "integer") return Domain::kInteger;
  if (s == "unit") return Domain::kUnit;
  invalid("unknown domain '" + std::string(s) + "'");
}

bool compatible(ObsFamily family, Link link) {
  switch (family) {
    case ObsFamily::kNormal: return link == Link::kIdentity;
    case ObsFamily::kPoisson:
    case ObsFamily::kGamma:
      return link == Link::kSoftplus || link == Link::kExponential;
    case ObsFamily::kBeta: return link == Link::kSigmoid;
  }
  return false;
}

bool accepts(ObsFamily family, Domain domain) {
  switch (family) {
    case ObsFamily::kNormal: return true;
    case ObsFamily::kPoisson: return domain == Domain::kInteger;
    case ObsFamily::kGamma:
      return domain == Domain::kPositive || domain == Domain::kInteger;
    case ObsFamily::kBeta: return domain == Domain::kUnit;
  }
  return false;
}

bool in_domain(Domain domain, double y) {
  if (!std::isfinite(y)) return false;
  switch (domain) {
    case Domain::kReal: return true;
    case Domain::kPositive: return y > 0.0;
    case Domain::kInteger: return y >= 0.0 && y == std::floor(y);
    case Domain::kUnit: return y >= 0.0 && y <= 1.0;
  }
  return false;
}

// --------------------------------------------------------------- links

double apply_link(Link link, double x) {
  switch (link) {
    case Link::kIdentity: return x;
    case Link::kSoftplus:
      return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    case Link::kExponential: return std::exp(x);
    case Link::kSigmoid:
      return kSigmoidFloor +
             (1.0 - 2.0 * kSigmoidFloor) /
                 (1.0 + std::exp(-kSigmoidGrowth * (x - kSigmoidMidpoint)));
    case Link::kInverseExponential: return std::exp(-x);
  }
  return x;
}

double inverse_link(Link link, double y) {
  constexpr double tiny = 1e-300;
  switch (link) {
    case Link::kIdentity: return y;
    case Link::kSoftplus:
      if (y > 20.0) return y + std::log1p(-std::exp(-y));
      return std::log(std::expm1(std::max(y, tiny)));
    case Link::kExponential: return std::log(std::max(y, tiny));
    case Link::kSigmoid: {
      double p = (y - kSigmoidFloor) / (1.0 - 2.0 * kSigmoidFloor);
      p = std::clamp(p, 1e-12, 1.0 - 1e-12);
      return kSigmoidMidpoint - std::log(1.0 / p - 1.0) / kSigmoidGrowth;
    }
    case Link::kInverseExponential: return -std::log(std::max(y, tiny));
  }
  return y;
}

// ------------------------------------------------------ hyperparameters

Hyperparameters Hyperparameters::defaults(Eigen::Index features) {
  Hyperparameters hp;
  hp.psi0 = Eigen::MatrixXd::Identity(features, features);
  hp.nu0 = static_cast<double>(features) + 2.0;
  hp.eta = Eigen::VectorXd::Constant(features, 0.01);
  return hp;
}

Eigen::VectorXd Hyperparameters::alpha0_for(Eigen::Index dims) const {
  if (alpha0.size() == 1) return Eigen::VectorXd::Constant(dims, alpha0[0]);
  if (alpha0.size() != dims)
    invalid("alpha0 has " + std::to_string(alpha0.size()) +
            " entries but the global proportions have " +
            std::to_string(dims));
  return alpha0;
}

void Hyperparameters::validate() const {
  const Eigen::Index m = features();
  if (m < 1) invalid("psi0 must be a non-empty M x M matrix");
  if (alpha0.size() < 1 || !(alpha0.array() > 0.0).all() || !alpha0.allFinite())
    invalid("alpha0 must be positive");
  if (!(alpha > 0.0) || !std::isfinite(alpha)) invalid("alpha must be positive");
  if (!std::isfinite(mu0)) invalid("mu0 must be finite");
  if (!(sigma0 > 0.0) || !std::isfinite(sigma0))
    invalid("sigma0 must be positive");
  if (!(rho > 0.0) || !std::isfinite(rho)) invalid("rho must be positive");
  if (!(nu0 > static_cast<double>(m) + 1.0))
    invalid("nu0 must exceed M + 1 so that E[Sigma] exists");
  if (eta.size() != m) invalid("eta must have one entry per feature");
  if (!(eta.array() > 0.0).all() || !eta.allFinite())
    invalid("eta must be positive");
  if (!compatible(family, link))
    invalid("link '" + std::string(to_string(link)) +
            "' is not compatible with family '" +
            std::string(to_string(family)) + "'");
  dist::InverseWishart(nu0, psi0);  // SPD check
}

// ------------------------------------------------------------- datasets

void GroundTruth::validate(Eigen::Index observations,
                           Eigen::Index features) const {
  const Eigen::Index k = factors();
  if (k < 1) invalid("ground truth has no factors");
  if (beta.size() != k) invalid("ground truth beta has wrong length");
  if (std::abs(beta.sum() - 1.0) > 1e-8) invalid("ground truth beta not on simplex");
  if (pi.rows() != observations || pi.cols() != k)
    invalid("ground truth pi has wrong shape");
  for (Eigen::Index n = 0; n < observations; ++n)
    if (std::abs(pi.row(n).sum() - 1.0) > 1e-8)
      invalid("ground truth pi row " + std::to_string(n) + " not on simplex");
  if (mu.cols() != features) invalid("ground truth mu has wrong width");
  if (!sigma.empty() && static_cast<Eigen::Index>(sigma.size()) != k)
    invalid("ground truth sigma has wrong length");
  if (!xbar.empty()) {
    if (static_cast<Eigen::Index>(xbar.size()) != observations)
      invalid("ground truth xbar has wrong length");
    for (const auto& x : xbar)
      if (x.rows() != k || x.cols() != features)
        invalid("ground truth xbar has wrong shape");
  }
  if (particles.size() != 0 && particles.size() != observations)
    invalid("ground truth particle counts have wrong length");
}

void Dataset::validate() const {
  if (!feature_names.empty() &&
      static_cast<Eigen::Index>(feature_names.size()) != features())
    invalid("feature name count does not match column count");
  for (Eigen::Index n = 0; n < y.rows(); ++n)
    for (Eigen::Index m = 0; m < y.cols(); ++m)
      if (!in_domain(domain, y(n, m)))
        invalid("value " + std::to_string(y(n, m)) + " at row " +
                std::to_string(n) + ", feature " +
                (feature_names.empty() ? std::to_string(m) : feature_names[m]) +
                " lies outside the '" + std::string(to_string(domain)) +
                "' domain");
  if (truth) truth->validate(observations(), features());
}

// --------------------------------------------------- variational state

Eigen::VectorXd VariationalState::expected_beta() const {
  return lam_beta / lam_beta.sum();
}

Eigen::MatrixXd VariationalState::expected_pi() const {
  Eigen::VectorXd totals = lam_pi.rowwise().sum();
  return totals.cwiseInverse().asDiagonal() * lam_pi;
}

Eigen::MatrixXd VariationalState::expected_sigma(int k) const {
  const double denom =
      lam_sigma_nu[k] - static_cast<double>(features()) - 1.0;
  return lam_sigma_psi[k] / denom;
}

Eigen::MatrixXd VariationalState::expected_sigma_inverse(int k) const {
  const Eigen::Index m = features();
  Eigen::MatrixXd inv = Eigen::LLT<Eigen::MatrixXd>(lam_sigma_psi[k]).solve(
      Eigen::MatrixXd::Identity(m, m));
  return lam_sigma_nu[k] * 0.5 * (inv + inv.transpose());
}

LatentPoint VariationalState::expectations() const {
  LatentPoint z;
  z.beta = expected_beta();
  z.pi = expected_pi();
  z.mu = lam_mu_mean;
  z.sigma.reserve(K);
  for (int k = 0; k < K; ++k) z.sigma.push_back(expected_sigma(k));
  z.xbar = lam_xbar_mean;
  z.particles = lam_p;
  return z;
}

void VariationalState::check_invariants() const {
  auto fail = [](const std::string& what) { throw std::logic_error(what); };
  const Eigen::Index n_obs = observations();
  const Eigen::Index m = features();
  if (K < 1) fail("K must be positive");
  if (lam_beta.size() != K + (remainder ? 1 : 0))
    fail("lam_beta has " + std::to_string(lam_beta.size()) +
         " entries for K = " + std::to_string(K));
  if (!lam_beta.allFinite() || !(lam_beta.array() > 0.0).all())
    fail("lam_beta must be positive");
  if (lam_pi.cols() != K) fail("lam_pi has wrong width");
  if (!lam_pi.allFinite() || (n_obs > 0 && !(lam_pi.array() > 0.0).all()))
    fail("lam_pi must be positive");
  if (lam_mu_mean.rows() != K || !lam_mu_mean.allFinite())
    fail("lam_mu_mean has wrong shape or non-finite entries");
  if (lam_sigma_nu.size() != K ||
      !(lam_sigma_nu.array() > static_cast<double>(m) + 1.0).all())
    fail("lam_sigma_nu must exceed M + 1");
  if (static_cast<int>(lam_sigma_psi.size()) != K) fail("lam_sigma_psi length");
  for (int k = 0; k < K; ++k) {
    const auto& psi = lam_sigma_psi[k];
    if (psi.rows() != m || psi.cols() != m || !psi.allFinite())
      fail("lam_sigma_psi has wrong shape");
    if (Eigen::LLT<Eigen::MatrixXd>(psi).info() != Eigen::Success)
      fail("lam_sigma_psi[" + std::to_string(k) + "] is not SPD");
  }
  if (static_cast<Eigen::Index>(lam_xbar_mean.size()) != n_obs ||
      static_cast<Eigen::Index>(lam_xbar_scale.size()) != n_obs)
    fail("local feature arrays have wrong length");
  for (Eigen::Index n = 0; n < n_obs; ++n) {
    const auto& mean = lam_xbar_mean[n];
    const auto& scale = lam_xbar_scale[n];
    if (mean.rows() != K || mean.cols() != m || !mean.allFinite())
      fail("lam_xbar_mean has wrong shape or non-finite entries");
    if (scale.rows() != K || scale.cols() != m || !scale.allFinite() ||
        !(scale.array() > 0.0).all())
      fail("lam_xbar_scale must be positive");
  }
  if (lam_p.size() != n_obs || !lam_p.allFinite() ||
      (n_obs > 0 && !(lam_p.array() > 0.0).all()))
    fail("lam_p must be positive");
}

// ----------------------------------------------------------- log terms

FactorCovariance FactorCovariance::from(const Eigen::MatrixXd& sigma) {
  Eigen::LLT<Eigen::MatrixXd> llt(sigma);
  if (llt.info() != Eigen::Success)
    throw std::domain_error("factor covariance is not SPD");
  FactorCovariance out;
  out.chol = llt.matrixL();
  out.log_det = 2.0 * out.chol.diagonal().array().log().sum();
  return out;
}

std::vector<FactorCovariance> factor_covariances(
    const std::vector<Eigen::MatrixXd>& sigma) {
  std::vector<FactorCovariance> out;
  out.reserve(sigma.size());
  for (const auto& s : sigma) out.push_back(FactorCovariance::from(s));
  return out;
}

double log_xbar_prior(const Eigen::Ref<const Eigen::VectorXd>& x,
                      const Eigen::Ref<const Eigen::VectorXd>& mu,
                      const FactorCovariance& sigma, double scale) {
  const double c = std::max(scale, kParamFloor);
  const double m = static_cast<double>(x.size());
  Eigen::VectorXd r = sigma.chol.triangularView<Eigen::Lower>().solve(x - mu);
  return -0.5 * (m * kLogTwoPi + sigma.log_det - m * std::log(c) +
                 c * r.squaredNorm());
}

double log_lik_obs(const Hyperparameters& hp,
                   const Eigen::Ref<const Eigen::VectorXd>& y_n,
                   const Eigen::Ref<const Eigen::VectorXd>& pi_n,
                   const Eigen::Ref<const Eigen::MatrixXd>& xbar_n) {
  const Eigen::VectorXd lin = xbar_n.transpose() * pi_n;
  double total = 0.0;
  for (Eigen::Index m = 0; m < y_n.size(); ++m) {
    const double mean = apply_link(hp.link, lin[m]);
    const double y = y_n[m];
    switch (hp.family) {
      case ObsFamily::kNormal:
        total += dist::log_pdf(dist::Normal(mean, hp.eta[m]), y);
        break;
      case ObsFamily::kPoisson:
        total += dist::log_pdf(dist::Poisson(std::max(mean, kParamFloor)), y);
        break;
      case ObsFamily::kGamma:
        total += dist::log_pdf(
            dist::GammaMeanShape(std::max(mean, kParamFloor), hp.eta[m]), y);
        break;
      case ObsFamily::kBeta: {
        if (!(y >= 0.0 && y <= 1.0))
          throw std::domain_error("Beta observation outside [0, 1]");
        const double mu = std::clamp(mean, kUnitClamp, 1.0 - kUnitClamp);
        const double spread =
            std::min(hp.eta[m], 0.99 * std::sqrt(mu * (1.0 - mu)));
        total += dist::log_pdf(dist::BetaMeanSpread(mu, spread),
                               std::clamp(y, kUnitClamp, 1.0 - kUnitClamp));
        break;
      }
    }
  }
  return total;
}

double log_pi_prior(const Hyperparameters& hp,
                    const Eigen::Ref<const Eigen::VectorXd>& beta,
                    const Eigen::Ref<const Eigen::VectorXd>& pi_n) {
  Eigen::VectorXd conc = hp.alpha * beta.head(pi_n.size());
  return dist::log_pdf(dist::Dirichlet(conc.cwiseMax(kParamFloor)),
                       Eigen::VectorXd(pi_n));
}

double log_beta_prior(const Hyperparameters& hp,
                      const Eigen::Ref<const Eigen::VectorXd>& beta) {
  return dist::log_pdf(dist::Dirichlet(hp.alpha0_for(beta.size())),
                       Eigen::VectorXd(beta));
}

double log_mu_prior(const Hyperparameters& hp,
                    const Eigen::Ref<const Eigen::VectorXd>& mu_k) {
  const dist::Normal prior(hp.mu0, hp.sigma0);
  double total = 0.0;
  for (double v : mu_k) total += dist::log_pdf(prior, v);
  return total;
}

double log_sigma_prior(const Hyperparameters& hp, const Eigen::MatrixXd& sigma) {
  return dist::log_pdf(dist::InverseWishart(hp.nu0, hp.psi0), sigma);
}

double log_count_prior(const Hyperparameters& hp, double particles) {
  return dist::log_pdf(dist::Poisson(hp.rho), particles);
}

namespace {

double xbar_prior_sum(const LatentPoint& z,
                      const std::vector<FactorCovariance>& cov, int n) {
  double total = 0.0;
  for (Eigen::Index k = 0; k < z.factors(); ++k)
    total += log_xbar_prior(z.xbar[n].row(k).transpose(),
                            z.mu.row(k).transpose(), cov[k],
                            z.particles[n] * z.pi(n, k));
  return total;
}

void check_shapes(const Dataset& data, const LatentPoint& z) {
  const Eigen::Index k = z.factors();
  if (z.observations() != data.observations() || z.pi.cols() != k ||
      static_cast<Eigen::Index>(z.sigma.size()) != k ||
      static_cast<Eigen::Index>(z.xbar.size()) != data.observations() ||
      z.particles.size() != data.observations() || z.beta.size() < k ||
      z.beta.size() > k + 1 || z.mu.cols() != data.features())
    throw std::invalid_argument("latent point does not match the dataset");
}

}  // namespace

double log_joint(const Hyperparameters& hp, const Dataset& data,
                 const LatentPoint& z) {
  check_shapes(data, z);
  const auto cov = factor_covariances(z.sigma);
  double total = log_beta_prior(hp, z.beta);
  for (Eigen::Index k = 0; k < z.factors(); ++k) {
    total += log_mu_prior(hp, z.mu.row(k).transpose());
    total += log_sigma_prior(hp, z.sigma[k]);
  }
  for (Eigen::Index n = 0; n < data.observations(); ++n) {
    const int ni = static_cast<int>(n);
    total += log_pi_prior(hp, z.beta, z.pi.row(n).transpose());
    total += log_count_prior(hp, z.particles[n]);
    total += xbar_prior_sum(z, cov, ni);
    total += log_lik_obs(hp, data.y.row(n).transpose(), z.pi.row(n).transpose(),
                         z.xbar[n]);
  }
  return total;
}

double partial_log_joint(const Block& which, const Hyperparameters& hp,
                         const Dataset& data, const LatentPoint& z) {
  check_shapes(data, z);
  const int n = which.n;
  switch (which.kind) {
    case Block::Kind::kXbar: {
      const int k = which.k;
      const auto cov = FactorCovariance::from(z.sigma[k]);
      return log_xbar_prior(z.xbar[n].row(k).transpose(),
                            z.mu.row(k).transpose(), cov,
                            z.particles[n] * z.pi(n, k)) +
             log_lik_obs(hp, data.y.row(n).transpose(),
                         z.pi.row(n).transpose(), z.xbar[n]);
    }
    case Block::Kind::kParticles: {
      const auto cov = factor_covariances(z.sigma);
      return xbar_prior_sum(z, cov, n) + log_count_prior(hp, z.particles[n]);
    }
    case Block::Kind::kPi: {
      const auto cov = factor_covariances(z.sigma);
      return xbar_prior_sum(z, cov, n) +
             log_lik_obs(hp, data.y.row(n).transpose(),
                         z.pi.row(n).transpose(), z.xbar[n]) +
             log_pi_prior(hp, z.beta, z.pi.row(n).transpose());
    }
    case Block::Kind::kBeta: {
      double total = log_beta_prior(hp, z.beta);
      for (Eigen::Index i = 0; i < data.observations(); ++i)
        total += log_pi_prior(hp, z.beta, z.pi.row(i).transpose());
      return total;
    }
  }
  return 0.0;
}

// --------------------------------------------------------------- q and ELBO

double log_q(const VariationalState& state, const LatentPoint& z) {
  double total = dist::log_pdf(dist::Dirichlet(state.lam_beta), z.beta);
  const Eigen::Index m = state.features();
  for (int k = 0; k < state.K; ++k) {
    for (Eigen::Index j = 0; j < m; ++j)
      total += dist::log_pdf(dist::Normal(state.lam_mu_mean(k, j), kMuScale),
                             z.mu(k, j));
    total += dist::log_pdf(
        dist::InverseWishart(state.lam_sigma_nu[k], state.lam_sigma_psi[k]),
        z.sigma[k]);
  }
  for (Eigen::Index n = 0; n < state.observations(); ++n) {
    total += dist::log_pdf(dist::Dirichlet(state.lam_pi.row(n).transpose()),
                           Eigen::VectorXd(z.pi.row(n).transpose()));
    total += dist::log_pdf(dist::Poisson(state.lam_p[n]), z.particles[n]);
    const auto& mean = state.lam_xbar_mean[n];
    const auto& scale = state.lam_xbar_scale[n];
    for (int k = 0; k < state.K; ++k)
      for (Eigen::Index j = 0; j < m; ++j)
        total += dist::log_pdf(dist::Normal(mean(k, j), scale(k, j)),
                               z.xbar[n](k, j));
  }
  return total;
}

LatentPoint sample_q(const VariationalState& state, Rng& rng) {
  const Eigen::Index n_obs = state.observations();
  const Eigen::Index m = state.features();
  LatentPoint z;
  z.beta = dist::sample(dist::Dirichlet(state.lam_beta), rng);
  z.mu.resize(state.K, m);
  z.sigma.reserve(state.K);
  std::normal_distribution<double> std_normal(0.0, 1.0);
  for (int k = 0; k < state.K; ++k) {
    for (Eigen::Index j = 0; j < m; ++j)
      z.mu(k, j) = state.lam_mu_mean(k, j) + kMuScale * std_normal(rng);
    z.sigma.push_back(dist::sample(
        dist::InverseWishart(state.lam_sigma_nu[k], state.lam_sigma_psi[k]),
        rng));
  }
  z.pi.resize(n_obs, state.K);
  z.particles.resize(n_obs);
  z.xbar.resize(n_obs);
  for (Eigen::Index n = 0; n < n_obs; ++n) {
    z.pi.row(n) =
        dist::sample(dist::Dirichlet(state.lam_pi.row(n).transpose()), rng)
            .transpose();
    z.particles[n] = dist::sample(dist::Poisson(state.lam_p[n]), rng);
    Eigen::MatrixXd x(state.K, m);
    const auto& mean = state.lam_xbar_mean[n];
    const auto& scale = state.lam_xbar_scale[n];
    for (int k = 0; k < state.K; ++k)
      for (Eigen::Index j = 0; j < m; ++j)
        x(k, j) = mean(k, j) + scale(k, j) * std_normal(rng);
    z.xbar[n] = std::move(x);
  }
  return z;
}

ElboEstimate elbo(const Hyperparameters& hp, const Dataset& data,
                  const VariationalState& state, int samples,
                  std::uint64_t seed) {
  if (samples < 1) throw std::invalid_argument("elbo: samples must be >= 1");
  double sum = 0.0;
  double sum_sq = 0.0;
  for (int s = 0; s < samples; ++s) {
    Rng rng = substream(seed, {stream::kElbo, static_cast<std::uint64_t>(s)});
    const LatentPoint z = sample_q(state, rng);
    const double v = log_joint(hp, data, z) - log_q(state, z);
    sum += v;
    sum_sq += v * v;
  }
  ElboEstimate out;
  out.value = sum / samples;
  if (samples > 1) {
    const double var =
        std::max(0.0, (sum_sq - samples * out.value * out.value) / (samples - 1));
    out.std_error = std::sqrt(var / samples);
  }
  return out;
}

}  // namespace ndm
