#include "ndm/dist.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

namespace ndm::dist {

namespace {

constexpr double kLogTwoPi = 1.8378770664093454836;
constexpr double kSimplexTol = 1e-6;

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

void require_support(bool ok, const char* what) {
  if (!ok) throw std::domain_error(what);
}

bool positive_finite(double v) { return std::isfinite(v) && v > 0.0; }

// Returns the lower Cholesky factor, or throws if `m` is not SPD.
Eigen::MatrixXd cholesky_or_throw(const Eigen::MatrixXd& m, const char* what) {
  require(m.rows() == m.cols() && m.rows() > 0, what);
  require(m.allFinite(), what);
  require((m - m.transpose()).cwiseAbs().maxCoeff() <=
              1e-9 * (1.0 + m.cwiseAbs().maxCoeff()),
          what);
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  require(llt.info() == Eigen::Success, what);
  return llt.matrixL();
}

double log_det_from_chol(const Eigen::MatrixXd& l) {
  return 2.0 * l.diagonal().array().log().sum();
}

// log Gamma(shape, 1) draw; stays finite for tiny shapes.
double sample_log_gamma(double shape, Rng& rng) {
  if (shape >= 1.0) {
    std::gamma_distribution<double> g(shape, 1.0);
    double v = g(rng);
    return std::log(std::max(v, std::numeric_limits<double>::min()));
  }
  std::gamma_distribution<double> g(shape + 1.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double gv = std::max(g(rng), std::numeric_limits<double>::min());
  double uv = std::max(u(rng), std::numeric_limits<double>::min());
  return std::log(gv) + std::log(uv) / shape;
}

}  // namespace

Normal::Normal(double mean, double scale) : mean_(mean), scale_(scale) {
  require(std::isfinite(mean), "Normal: mean must be finite");
  require(positive_finite(scale), "Normal: scale must be positive");
}

MultivariateNormal::MultivariateNormal(Eigen::VectorXd mean,
                                       Eigen::MatrixXd covariance)
    : mean_(std::move(mean)), covariance_(std::move(covariance)) {
  require(mean_.allFinite(), "MultivariateNormal: mean must be finite");
  require(covariance_.rows() == mean_.size(),
          "MultivariateNormal: dimension mismatch");
  chol_ = cholesky_or_throw(covariance_,
                            "MultivariateNormal: covariance must be SPD");
  log_det_ = log_det_from_chol(chol_);
}

Dirichlet::Dirichlet(Eigen::VectorXd concentration)
    : concentration_(std::move(concentration)) {
  require(concentration_.size() >= 1, "Dirichlet: empty concentration");
  for (double a : concentration_)
    require(positive_finite(a), "Dirichlet: concentration must be positive");
}

GammaShapeScale::GammaShapeScale(double shape, double scale)
    : shape_(shape), scale_(scale) {
  require(positive_finite(shape), "Gamma: shape must be positive");
  require(positive_finite(scale), "Gamma: scale must be positive");
}

Poisson::Poisson(double rate) : rate_(rate) {
  require(positive_finite(rate), "Poisson: rate must be positive");
}

InverseWishart::InverseWishart(double dof, Eigen::MatrixXd scale)
    : dof_(dof), scale_(std::move(scale)) {
  Eigen::MatrixXd l =
      cholesky_or_throw(scale_, "InverseWishart: scale must be SPD");
  require(std::isfinite(dof) && dof > static_cast<double>(scale_.rows()) - 1.0,
          "InverseWishart: dof must exceed M - 1");
  log_det_scale_ = log_det_from_chol(l);
  Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(scale_.rows(), scale_.rows());
  Eigen::MatrixXd inv = Eigen::LLT<Eigen::MatrixXd>(scale_).solve(eye);
  inv = 0.5 * (inv + inv.transpose());
  inv_scale_chol_ = Eigen::LLT<Eigen::MatrixXd>(inv).matrixL();
}

Eigen::MatrixXd InverseWishart::mean() const {
  double denom = dof_ - static_cast<double>(scale_.rows()) - 1.0;
  if (!(denom > 0.0))
    throw std::domain_error("InverseWishart: mean requires dof > M + 1");
  return scale_ / denom;
}

BetaShapes::BetaShapes(double a, double b) : a_(a), b_(b) {
  require(positive_finite(a) && positive_finite(b),
          "Beta: shapes must be positive");
}

GammaMeanShape::GammaMeanShape(double mean, double spread)
    : mean_(mean),
      spread_(spread),
      shape_scale_((require(positive_finite(mean) && positive_finite(spread),
                            "Gamma*: mean and spread must be positive"),
                    (mean / spread) * (mean / spread)),
                   spread * spread / mean) {}

namespace {
BetaShapes beta_from_mean_spread(double m, double s) {
  require(std::isfinite(m) && m > 0.0 && m < 1.0,
          "Beta*: mean must lie in (0, 1)");
  require(positive_finite(s), "Beta*: spread must be positive");
  require(s * s < m * (1.0 - m), "Beta*: spread^2 must be below mean(1-mean)");
  double a = ((1.0 - m) / (s * s) - 1.0 / m) * m * m;
  return BetaShapes(a, a * (1.0 / m - 1.0));
}
}  // namespace

BetaMeanSpread::BetaMeanSpread(double mean, double spread)
    : mean_(mean), spread_(spread), shapes_(beta_from_mean_spread(mean, spread)) {}

// ---------------------------------------------------------------- log_pdf

double log_pdf(const Normal& d, double x) {
  require_support(std::isfinite(x), "Normal: x must be finite");
  double z = (x - d.mean()) / d.scale();
  return -0.5 * kLogTwoPi - std::log(d.scale()) - 0.5 * z * z;
}

double log_pdf(const MultivariateNormal& d, const Eigen::VectorXd& x) {
  require_support(x.size() == d.dim() && x.allFinite(),
                  "MultivariateNormal: bad point");
  Eigen::VectorXd r = d.cholesky().triangularView<Eigen::Lower>().solve(
      x - d.mean());
  return -0.5 * (static_cast<double>(d.dim()) * kLogTwoPi + d.log_det() +
                 r.squaredNorm());
}

double log_pdf(const Dirichlet& d, const Eigen::VectorXd& x) {
  const auto& a = d.concentration();
  require_support(x.size() == a.size(), "Dirichlet: dimension mismatch");
  require_support((x.array() > 0.0).all() && x.allFinite(),
                  "Dirichlet: components must be positive");
  require_support(std::abs(x.sum() - 1.0) < kSimplexTol,
                  "Dirichlet: point not on the simplex");
  double lp = std::lgamma(a.sum());
  for (Eigen::Index k = 0; k < a.size(); ++k)
    lp += (a[k] - 1.0) * std::log(x[k]) - std::lgamma(a[k]);
  return lp;
}

double log_pdf(const GammaShapeScale& d, double x) {
  require_support(std::isfinite(x) && x > 0.0, "Gamma: x must be positive");
  return (d.shape() - 1.0) * std::log(x) - x / d.scale() -
         std::lgamma(d.shape()) - d.shape() * std::log(d.scale());
}

double log_pdf(const Poisson& d, double x) {
  require_support(std::isfinite(x) && x >= 0.0 && x == std::floor(x),
                  "Poisson: x must be a non-negative integer");
  return x * std::log(d.rate()) - d.rate() - std::lgamma(x + 1.0);
}

double log_pdf(const InverseWishart& d, const Eigen::MatrixXd& x) {
  const Eigen::Index m = d.dim();
  require_support(x.rows() == m && x.cols() == m && x.allFinite(),
                  "InverseWishart: bad point");
  Eigen::LLT<Eigen::MatrixXd> llt(x);
  require_support(llt.info() == Eigen::Success,
                  "InverseWishart: point must be SPD");
  Eigen::MatrixXd l = llt.matrixL();
  double log_det_x = log_det_from_chol(l);
  double trace = llt.solve(d.scale()).trace();
  const double nu = d.dof();
  const double md = static_cast<double>(m);
  return 0.5 * nu * d.log_det_scale() - 0.5 * nu * md * std::numbers::ln2 -
         lmvgamma(0.5 * nu, static_cast<int>(m)) -
         0.5 * (nu + md + 1.0) * log_det_x - 0.5 * trace;
}

double log_pdf(const BetaShapes& d, double x) {
  require_support(std::isfinite(x) && x > 0.0 && x < 1.0,
                  "Beta: x must lie in (0, 1)");
  return (d.a() - 1.0) * std::log(x) + (d.b() - 1.0) * std::log1p(-x) +
         std::lgamma(d.a() + d.b()) - std::lgamma(d.a()) - std::lgamma(d.b());
}

double log_pdf(const GammaMeanShape& d, double x) {
  return log_pdf(d.shape_scale(), x);
}

double log_pdf(const BetaMeanSpread& d, double x) {
  return log_pdf(d.shapes(), x);
}

namespace {
template <class T>
const T& point_as(const Point& x, const char* what) {
  if (const T* p = std::get_if<T>(&x)) return *p;
  throw std::domain_error(what);
}
}  // namespace

double log_pdf(const DistParams& d, const Point& x) {
  return std::visit(
      [&](const auto& dist) -> double {
        using D = std::decay_t<decltype(dist)>;
        if constexpr (std::is_same_v<D, MultivariateNormal> ||
                      std::is_same_v<D, Dirichlet>) {
          return log_pdf(dist, point_as<Eigen::VectorXd>(x, "expected vector"));
        } else if constexpr (std::is_same_v<D, InverseWishart>) {
          return log_pdf(dist, point_as<Eigen::MatrixXd>(x, "expected matrix"));
        } else {
          return log_pdf(dist, point_as<double>(x, "expected scalar"));
        }
      },
      d);
}

// ----------------------------------------------------------------- sample

double sample(const Normal& d, Rng& rng) {
  std::normal_distribution<double> n(d.mean(), d.scale());
  return n(rng);
}

Eigen::VectorXd sample(const MultivariateNormal& d, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::VectorXd z(d.dim());
  for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = n(rng);
  return d.mean() + d.cholesky().triangularView<Eigen::Lower>() * z;
}

Eigen::VectorXd sample(const Dirichlet& d, Rng& rng) {
  const auto& a = d.concentration();
  Eigen::VectorXd lg(a.size());
  for (Eigen::Index k = 0; k < a.size(); ++k) lg[k] = sample_log_gamma(a[k], rng);
  double mx = lg.maxCoeff();
  double lse = mx + std::log((lg.array() - mx).exp().sum());
  Eigen::VectorXd x = (lg.array() - lse).exp();
  return x.cwiseMax(std::numeric_limits<double>::min());
}

double sample(const GammaShapeScale& d, Rng& rng) {
  std::gamma_distribution<double> g(d.shape(), d.scale());
  return std::max(g(rng), std::numeric_limits<double>::min());
}

double sample(const Poisson& d, Rng& rng) {
  std::poisson_distribution<long long> p(d.rate());
  return static_cast<double>(p(rng));
}

Eigen::MatrixXd sample(const InverseWishart& d, Rng& rng) {
  const Eigen::Index m = d.dim();
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(m, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    std::gamma_distribution<double> chi2(0.5 * (d.dof() - static_cast<double>(i)),
                                         2.0);
    a(i, i) = std::sqrt(chi2(rng));
    for (Eigen::Index j = 0; j < i; ++j) a(i, j) = n(rng);
  }
  // W = B B^T with B = L A lower triangular, and Sigma = W^{-1} = B^{-T} B^{-1}.
  Eigen::MatrixXd b = d.inverse_scale_cholesky() * a;
  Eigen::MatrixXd b_inv = b.triangularView<Eigen::Lower>().solve(
      Eigen::MatrixXd::Identity(m, m));
  Eigen::MatrixXd sigma = b_inv.transpose() * b_inv;
  return 0.5 * (sigma + sigma.transpose());
}

double sample(const BetaShapes& d, Rng& rng) {
  double la = sample_log_gamma(d.a(), rng);
  double lb = sample_log_gamma(d.b(), rng);
  // x = ga / (ga + gb) evaluated in log space.
  double mx = std::max(la, lb);
  double x = std::exp(la - mx) / (std::exp(la - mx) + std::exp(lb - mx));
  return std::clamp(x, std::numeric_limits<double>::min(),
                    1.0 - std::numeric_limits<double>::epsilon());
}

double sample(const GammaMeanShape& d, Rng& rng) {
  return sample(d.shape_scale(), rng);
}

double sample(const BetaMeanSpread& d, Rng& rng) {
  return sample(d.shapes(), rng);
}

Point sample(const DistParams& d, Rng& rng) {
  return std::visit([&](const auto& dist) -> Point { return sample(dist, rng); },
                    d);
}

// ------------------------------------------------------------------ score

Eigen::Vector2d grad_log_q(const Normal& d, double x) {
  const double r = x - d.mean();
  const double s = d.scale();
  return {r / (s * s), -1.0 / s + r * r / (s * s * s)};
}

double grad_log_q(const Poisson& d, double x) {
  require_support(std::isfinite(x) && x >= 0.0, "Poisson: x must be >= 0");
  return x / d.rate() - 1.0;
}

Eigen::VectorXd grad_log_q(const Dirichlet& d, const Eigen::VectorXd& x) {
  const auto& a = d.concentration();
  require_support(x.size() == a.size() && (x.array() > 0.0).all(),
                  "Dirichlet: bad point");
  const double psi_sum = digamma(a.sum());
  Eigen::VectorXd g(a.size());
  for (Eigen::Index k = 0; k < a.size(); ++k)
    g[k] = std::log(x[k]) + psi_sum - digamma(a[k]);
  return g;
}

Eigen::VectorXd grad_log_q(const DistParams& d, const Point& x) {
  if (const auto* n = std::get_if<Normal>(&d)) {
    Eigen::Vector2d g = grad_log_q(*n, point_as<double>(x, "expected scalar"));
    return Eigen::VectorXd(g);
  }
  if (const auto* p = std::get_if<Poisson>(&d)) {
    return Eigen::VectorXd::Constant(
        1, grad_log_q(*p, point_as<double>(x, "expected scalar")));
  }
  if (const auto* dir = std::get_if<Dirichlet>(&d)) {
    return grad_log_q(*dir, point_as<Eigen::VectorXd>(x, "expected vector"));
  }
  throw std::invalid_argument(
      "grad_log_q: family is not a variational family (Normal, Poisson, "
      "Dirichlet)");
}

// ------------------------------------------------------------ special fns

double digamma(double x) {
  if (!(x > 0.0) || !std::isfinite(x))
    throw std::domain_error("digamma: x must be positive and finite");
  double acc = 0.0;
  while (x < 10.0) {
    acc -= 1.0 / x;
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  // Bernoulli-number series; truncation error below 1e-16 for x >= 10.
  double series =
      inv2 * (1.0 / 12.0 -
              inv2 * (1.0 / 120.0 -
                      inv2 * (1.0 / 252.0 -
                              inv2 * (1.0 / 240.0 -
                                      inv2 * (1.0 / 132.0 -
                                              inv2 * (691.0 / 32760.0 -
                                                      inv2 / 12.0))))));
  return acc + std::log(x) - 0.5 * inv - series;
}

double lmvgamma(double a, int p) {
  double r = 0.25 * p * (p - 1) * std::log(std::numbers::pi);
  for (int j = 0; j < p; ++j) r += std::lgamma(a - 0.5 * j);
  return r;
}

}  // namespace ndm::dist
