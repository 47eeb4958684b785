#pragma once

#include <Eigen/Dense>

#include <variant>

#include "ndm/rng.hpp"

// Distribution kernels used by the model and the inference engine.
//
// Every parameter type validates its arguments on construction and throws
// std::invalid_argument when a positivity, PSD or domain constraint fails.
// Densities throw std::domain_error when evaluated outside the support.
namespace ndm::dist {

class Normal {
 public:
  Normal(double mean, double scale);
  double mean() const { return mean_; }
  double scale() const { return scale_; }

 private:
  double mean_;
  double scale_;
};

// Full-covariance Gaussian; the Cholesky factor is computed once.
class MultivariateNormal {
 public:
  MultivariateNormal(Eigen::VectorXd mean, Eigen::MatrixXd covariance);
  const Eigen::VectorXd& mean() const { return mean_; }
  const Eigen::MatrixXd& covariance() const { return covariance_; }
  const Eigen::MatrixXd& cholesky() const { return chol_; }
  double log_det() const { return log_det_; }
  Eigen::Index dim() const { return mean_.size(); }

 private:
  Eigen::VectorXd mean_;
  Eigen::MatrixXd covariance_;
  Eigen::MatrixXd chol_;
  double log_det_;
};

class Dirichlet {
 public:
  explicit Dirichlet(Eigen::VectorXd concentration);
  const Eigen::VectorXd& concentration() const { return concentration_; }

 private:
  Eigen::VectorXd concentration_;
};

class GammaShapeScale {
 public:
  GammaShapeScale(double shape, double scale);
  double shape() const { return shape_; }
  double scale() const { return scale_; }

 private:
  double shape_;
  double scale_;
};

class Poisson {
 public:
  explicit Poisson(double rate);
  double rate() const { return rate_; }

 private:
  double rate_;
};

class InverseWishart {
 public:
  InverseWishart(double dof, Eigen::MatrixXd scale);
  double dof() const { return dof_; }
  const Eigen::MatrixXd& scale() const { return scale_; }
  double log_det_scale() const { return log_det_scale_; }
  // Lower Cholesky factor of scale^{-1}.
  const Eigen::MatrixXd& inverse_scale_cholesky() const {
    return inv_scale_chol_;
  }
  Eigen::Index dim() const { return scale_.rows(); }
  // E[Sigma] = scale / (dof - M - 1); requires dof > M + 1.
  Eigen::MatrixXd mean() const;

 private:
  double dof_;
  Eigen::MatrixXd scale_;
  Eigen::MatrixXd inv_scale_chol_;
  double log_det_scale_;
};

class BetaShapes {
 public:
  BetaShapes(double a, double b);
  double a() const { return a_; }
  double b() const { return b_; }

 private:
  double a_;
  double b_;
};

// Gamma with the given mean and standard deviation ("spread").
class GammaMeanShape {
 public:
  GammaMeanShape(double mean, double spread);
  double mean() const { return mean_; }
  double spread() const { return spread_; }
  GammaShapeScale shape_scale() const { return shape_scale_; }

 private:
  double mean_;
  double spread_;
  GammaShapeScale shape_scale_;
};

// Beta with the given mean and standard deviation; spread^2 < mean (1 - mean).
class BetaMeanSpread {
 public:
  BetaMeanSpread(double mean, double spread);
  double mean() const { return mean_; }
  double spread() const { return spread_; }
  BetaShapes shapes() const { return shapes_; }

 private:
  double mean_;
  double spread_;
  BetaShapes shapes_;
};

using DistParams =
    std::variant<Normal, MultivariateNormal, Dirichlet, GammaShapeScale,
                 Poisson, InverseWishart, BetaShapes, GammaMeanShape,
                 BetaMeanSpread>;

// Scalar families take a double, vector families a VectorXd and the
// inverse-Wishart a MatrixXd. Poisson points are integral-valued doubles.
using Point = std::variant<double, Eigen::VectorXd, Eigen::MatrixXd>;

double log_pdf(const Normal& d, double x);
double log_pdf(const MultivariateNormal& d, const Eigen::VectorXd& x);
double log_pdf(const Dirichlet& d, const Eigen::VectorXd& x);
double log_pdf(const GammaShapeScale& d, double x);
double log_pdf(const Poisson& d, double x);
double log_pdf(const InverseWishart& d, const Eigen::MatrixXd& x);
double log_pdf(const BetaShapes& d, double x);
double log_pdf(const GammaMeanShape& d, double x);
double log_pdf(const BetaMeanSpread& d, double x);
double log_pdf(const DistParams& d, const Point& x);

double sample(const Normal& d, Rng& rng);
Eigen::VectorXd sample(const MultivariateNormal& d, Rng& rng);
// Components that underflow are clamped to the smallest normal double so
// that log x stays finite.
Eigen::VectorXd sample(const Dirichlet& d, Rng& rng);
double sample(const GammaShapeScale& d, Rng& rng);
double sample(const Poisson& d, Rng& rng);
// Bartlett decomposition of the Wishart of the inverse scale.
Eigen::MatrixXd sample(const InverseWishart& d, Rng& rng);
double sample(const BetaShapes& d, Rng& rng);
double sample(const GammaMeanShape& d, Rng& rng);
double sample(const BetaMeanSpread& d, Rng& rng);
Point sample(const DistParams& d, Rng& rng);

// Score of the variational families: gradient of log q with respect to the
// family's own parameters.
//   Normal    -> (d/d mean, d/d scale)
//   Poisson   -> d/d rate
//   Dirichlet -> d/d concentration
Eigen::Vector2d grad_log_q(const Normal& d, double x);
double grad_log_q(const Poisson& d, double x);
Eigen::VectorXd grad_log_q(const Dirichlet& d, const Eigen::VectorXd& x);
// Flattened score; throws std::invalid_argument for families never used as q.
Eigen::VectorXd grad_log_q(const DistParams& d, const Point& x);

// Digamma via upward recurrence and the asymptotic series; x > 0.
double digamma(double x);

// log of the multivariate gamma function Gamma_p(a).
double lmvgamma(double a, int p);

}  // namespace ndm::dist
