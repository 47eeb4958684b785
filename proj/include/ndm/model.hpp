#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ndm/dist.hpp"
#include "ndm/rng.hpp"

namespace ndm {

// Local features are stored per observation: xbar[n] is a K x M matrix.
using FactorFeatures = std::vector<Eigen::MatrixXd>;

enum class ObsFamily { kNormal, kPoisson, kGamma, kBeta };
enum class Link {
  kIdentity,
  kSoftplus,
  kExponential,
  kSigmoid,
  kInverseExponential
};
enum class Domain { kReal, kPositive, kInteger, kUnit };

std::string_view to_string(ObsFamily f);
std::string_view to_string(Link l);
std::string_view to_string(Domain d);
// Parsers throw std::invalid_argument naming the offending text.
ObsFamily parse_obs_family(std::string_view s);
Link parse_link(std::string_view s);
Domain parse_domain(std::string_view s);

// True for the (family, link) pairs of the link-function table.
bool compatible(ObsFamily family, Link link);
// True when data declared in `domain` can be scored by `family`.
bool accepts(ObsFamily family, Domain domain);
bool in_domain(Domain domain, double y);

// The unit-interval link is a steep logistic kept away from 0 and 1:
//   g(x) = 1e-6 + (1 - 2e-6) / (1 + exp(-10 (x - 0.5)))
double apply_link(Link link, double x);
// Inverse of apply_link; arguments outside the link's range are clamped to it.
double inverse_link(Link link, double y);

// Fixed model constants. alpha0 of size 1 means a symmetric Dirichlet.
struct Hyperparameters {
  Eigen::VectorXd alpha0 = Eigen::VectorXd::Ones(1);
  double alpha = 10.0;
  double mu0 = 0.0;
  double sigma0 = 1.0;  // prior standard deviation of each mu_{k,m}
  Eigen::MatrixXd psi0;
  double nu0 = 0.0;
  double rho = 100.0;
  Eigen::VectorXd eta;  // per-feature observation spread; unused by Poisson
  ObsFamily family = ObsFamily::kNormal;
  Link link = Link::kIdentity;

  // Defaults for M features: psi0 = I, nu0 = M + 2, eta = 0.01.
  static Hyperparameters defaults(Eigen::Index features);

  Eigen::Index features() const { return psi0.rows(); }
  // Concentration vector of length `dims` for the global Dirichlet.
  Eigen::VectorXd alpha0_for(Eigen::Index dims) const;
  // Throws std::invalid_argument on any violated constraint.
  void validate() const;
};

// Simulation ground truth. Entries of xbar whose factor received no particle
// are flagged in xbar_mask (true = masked) and skipped by evaluation.
struct GroundTruth {
  Eigen::VectorXd beta;
  Eigen::MatrixXd pi;
  Eigen::MatrixXd mu;
  std::vector<Eigen::MatrixXd> sigma;
  FactorFeatures xbar;
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> xbar_mask;
  Eigen::VectorXd particles;
  Eigen::VectorXd spreads;  // per-feature sigma_m; empty when unused
  std::vector<Eigen::MatrixXd> modes;  // procedure 4: S_k x M per factor

  Eigen::Index factors() const { return mu.rows(); }
  void validate(Eigen::Index observations, Eigen::Index features) const;
};

struct Dataset {
  Eigen::MatrixXd y;
  Domain domain = Domain::kReal;
  std::vector<std::string> feature_names;
  std::optional<GroundTruth> truth;

  Eigen::Index observations() const { return y.rows(); }
  Eigen::Index features() const { return y.cols(); }
  // Throws std::invalid_argument naming the first offending row/feature.
  void validate() const;
};

// One realization of every latent variable. beta may carry one extra
// remainder entry (nonparametric states); local terms read its first K.
struct LatentPoint {
  Eigen::VectorXd beta;
  Eigen::MatrixXd pi;
  Eigen::MatrixXd mu;
  std::vector<Eigen::MatrixXd> sigma;
  FactorFeatures xbar;
  Eigen::VectorXd particles;

  Eigen::Index factors() const { return mu.rows(); }
  Eigen::Index observations() const { return pi.rows(); }
};

// Fixed standard deviation of q(mu); q(mu) is nearly a point mass.
inline constexpr double kMuScale = 1e-4;
// Floor applied to positive variational parameters after every update.
inline constexpr double kParamFloor = 1e-10;

// Mean-field variational parameters.
struct VariationalState {
  int K = 0;
  bool remainder = false;  // lam_beta has K + 1 entries when set
  Eigen::VectorXd lam_beta;
  Eigen::MatrixXd lam_pi;
  Eigen::MatrixXd lam_mu_mean;
  Eigen::VectorXd lam_sigma_nu;
  std::vector<Eigen::MatrixXd> lam_sigma_psi;
  FactorFeatures lam_xbar_mean;
  FactorFeatures lam_xbar_scale;
  Eigen::VectorXd lam_p;

  Eigen::Index observations() const { return lam_pi.rows(); }
  Eigen::Index features() const { return lam_mu_mean.cols(); }

  Eigen::VectorXd expected_beta() const;
  Eigen::MatrixXd expected_pi() const;
  Eigen::MatrixXd expected_sigma(int k) const;
  Eigen::MatrixXd expected_sigma_inverse(int k) const;
  LatentPoint expectations() const;

  // Throws std::logic_error describing the first violated invariant.
  void check_invariants() const;
};

// Cholesky factor and log-determinant of one factor covariance.
struct FactorCovariance {
  Eigen::MatrixXd chol;
  double log_det = 0.0;
  static FactorCovariance from(const Eigen::MatrixXd& sigma);
};

std::vector<FactorCovariance> factor_covariances(
    const std::vector<Eigen::MatrixXd>& sigma);

// log N(x | mu, sigma / scale); scale is floored at kParamFloor.
double log_xbar_prior(const Eigen::Ref<const Eigen::VectorXd>& x,
                      const Eigen::Ref<const Eigen::VectorXd>& mu,
                      const FactorCovariance& sigma, double scale);

// sum_m log f(y_m | g(sum_k pi_k xbar_{k,m}), eta_m).
double log_lik_obs(const Hyperparameters& hp,
                   const Eigen::Ref<const Eigen::VectorXd>& y_n,
                   const Eigen::Ref<const Eigen::VectorXd>& pi_n,
                   const Eigen::Ref<const Eigen::MatrixXd>& xbar_n);

// log Dirichlet(pi_n | alpha * beta_{1..K}).
double log_pi_prior(const Hyperparameters& hp,
                    const Eigen::Ref<const Eigen::VectorXd>& beta,
                    const Eigen::Ref<const Eigen::VectorXd>& pi_n);

double log_beta_prior(const Hyperparameters& hp,
                      const Eigen::Ref<const Eigen::VectorXd>& beta);
double log_mu_prior(const Hyperparameters& hp,
                    const Eigen::Ref<const Eigen::VectorXd>& mu_k);
double log_sigma_prior(const Hyperparameters& hp, const Eigen::MatrixXd& sigma);
double log_count_prior(const Hyperparameters& hp, double particles);

double log_joint(const Hyperparameters& hp, const Dataset& data,
                 const LatentPoint& z);

// Blocks of the partial log-joint, i.e. all terms containing one latent.
struct Block {
  enum class Kind { kXbar, kParticles, kPi, kBeta };
  Kind kind;
  int n = 0;
  int k = 0;

  static Block xbar(int n, int k) { return {Kind::kXbar, n, k}; }
  static Block particles(int n) { return {Kind::kParticles, n, 0}; }
  static Block pi(int n) { return {Kind::kPi, n, 0}; }
  static Block beta() { return {Kind::kBeta, 0, 0}; }
};

//   xbar(n,k):  log p(xbar_nk | .) + log p(y_n | .)
//   P(n):       sum_k log p(xbar_nk | .) + log p(P_n | rho)
//   pi(n):      sum_k log p(xbar_nk | .) + log p(y_n | .) + log p(pi_n | .)
//   beta:       log p(beta | alpha0) + sum_n log p(pi_n | alpha, beta)
double partial_log_joint(const Block& which, const Hyperparameters& hp,
                         const Dataset& data, const LatentPoint& z);

// log q(z) under the mean-field family.
double log_q(const VariationalState& state, const LatentPoint& z);
LatentPoint sample_q(const VariationalState& state, Rng& rng);

struct ElboEstimate {
  double value = 0.0;
  double std_error = 0.0;
};

// Monte-Carlo ELBO. Sample s draws from substream (seed, s), so the estimate
// is a deterministic function of (state, seed, samples).
ElboEstimate elbo(const Hyperparameters& hp, const Dataset& data,
                  const VariationalState& state, int samples,
                  std::uint64_t seed);

}  // namespace ndm
