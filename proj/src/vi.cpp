#include "ndm/vi.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <mutex>
#include <numbers>
#include <stdexcept>
#include <thread>

namespace ndm {

// ------------------------------------------------------------ schedules

double LearningRateSchedule::at(long t) const {
  return std::pow(static_cast<double>(t) + delay, rate);
}

Schedules Schedules::reference(ObsFamily family) {
  Schedules s;
  if (family == ObsFamily::kBeta) s.xbar_mean.delay = 1024.0;
  return s;
}

Schedules Schedules::defaults_for(ObsFamily family) {
  Schedules s = reference(family);
  s.pi.delay = 64.0;
  s.xbar_mean.delay = 256.0;
  s.xbar_scale.delay = 256.0;
  return s;
}

// ------------------------------------------------------------ estimator

GradientEstimatorState GradientEstimatorState::zeros_like(
    const VariationalState& state) {
  GradientEstimatorState est;
  est.acc_beta = Eigen::VectorXd::Zero(state.lam_beta.size());
  est.acc_pi = Eigen::MatrixXd::Zero(state.lam_pi.rows(), state.lam_pi.cols());
  est.acc_xbar_mean.assign(
      state.lam_xbar_mean.size(),
      Eigen::MatrixXd::Zero(state.K, state.features()));
  est.acc_xbar_scale = est.acc_xbar_mean;
  est.acc_p = Eigen::VectorXd::Zero(state.lam_p.size());
  return est;
}

void GradientEstimatorState::check_shape(const VariationalState& state) const {
  bool ok = acc_beta.size() == state.lam_beta.size() &&
            acc_pi.rows() == state.lam_pi.rows() &&
            acc_pi.cols() == state.lam_pi.cols() &&
            acc_xbar_mean.size() == state.lam_xbar_mean.size() &&
            acc_xbar_scale.size() == state.lam_xbar_scale.size() &&
            acc_p.size() == state.lam_p.size();
  for (std::size_t n = 0; ok && n < acc_xbar_mean.size(); ++n)
    ok = acc_xbar_mean[n].rows() == state.K &&
         acc_xbar_scale[n].rows() == state.K;
  if (!ok)
    throw std::logic_error("gradient estimator does not match the state");
}

double ConvergenceMonitor::observe(double value) {
  double change = std::numeric_limits<double>::infinity();
  if (last_elbo) {
    change = std::abs(value - *last_elbo) / std::max(std::abs(*last_elbo), 1e-300);
    if (change < delta)
      ++hits;
    else
      hits = 0;
  }
  last_elbo = value;
  return change;
}

// ------------------------------------------------------------- threads

void parallel_for(long count, int threads,
                  const std::function<void(long)>& body) {
  const long workers = std::clamp<long>(threads, 1, std::max<long>(count, 1));
  if (workers == 1) {
    for (long i = 0; i < count; ++i) body(i);
    return;
  }
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (long w = 0; w < workers; ++w) {
    const long begin = count * w / workers;
    const long end = count * (w + 1) / workers;
    pool.emplace_back([&, begin, end] {
      try {
        for (long i = begin; i < end; ++i) body(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

// ------------------------------------------------------- initialization

FuzzyClustering fuzzy_cmeans(const Eigen::MatrixXd& points, int K, Rng& rng,
                             double tol, int max_iters) {
  const Eigen::Index n_obs = points.rows();
  if (K < 1 || n_obs < 1)
    throw std::invalid_argument("fuzzy_cmeans: need K >= 1 and points");
  FuzzyClustering out;
  out.centroids.resize(K, points.cols());

  // k-means++ seeding.
  std::uniform_int_distribution<Eigen::Index> pick(0, n_obs - 1);
  out.centroids.row(0) = points.row(pick(rng));
  Eigen::VectorXd d2 = (points.rowwise() - out.centroids.row(0))
                           .rowwise()
                           .squaredNorm();
  for (int k = 1; k < K; ++k) {
    const double total = d2.sum();
    Eigen::Index chosen = 0;
    if (total > 0.0) {
      double u = std::uniform_real_distribution<double>(0.0, total)(rng);
      for (chosen = 0; chosen < n_obs - 1; ++chosen) {
        u -= d2[chosen];
        if (u < 0.0) break;
      }
    } else {
      chosen = pick(rng);
    }
    out.centroids.row(k) = points.row(chosen);
    d2 = d2.cwiseMin(
        (points.rowwise() - out.centroids.row(k)).rowwise().squaredNorm());
  }

  Eigen::MatrixXd u = Eigen::MatrixXd::Zero(n_obs, K);
  Eigen::MatrixXd dist2(n_obs, K);
  for (int it = 0; it < max_iters; ++it) {
    for (int k = 0; k < K; ++k)
      dist2.col(k) =
          (points.rowwise() - out.centroids.row(k)).rowwise().squaredNorm();
    Eigen::MatrixXd next(n_obs, K);
    for (Eigen::Index n = 0; n < n_obs; ++n) {
      Eigen::Index zero_at = -1;
      for (int k = 0; k < K; ++k)
        if (dist2(n, k) <= 1e-300) {
          zero_at = k;
          break;
        }
      if (zero_at >= 0) {
        next.row(n).setZero();
        next(n, zero_at) = 1.0;
      } else {
        next.row(n) = dist2.row(n).cwiseInverse();
        next.row(n) /= next.row(n).sum();
      }
    }
    const double change = (next - u).cwiseAbs().maxCoeff();
    u = std::move(next);
    out.iterations = it + 1;
    const Eigen::MatrixXd w = u.array().square();
    for (int k = 0; k < K; ++k) {
      const double mass = w.col(k).sum();
      if (mass > 0.0)
        out.centroids.row(k) = (w.col(k).transpose() * points) / mass;
    }
    if (change < tol) break;
  }
  out.memberships = std::move(u);
  return out;
}

namespace {

double clamp_to_link_range(Link link, double y) {
  switch (link) {
    case Link::kSoftplus:
    case Link::kExponential:
    case Link::kInverseExponential: return std::max(y, 1e-2);
    case Link::kSigmoid: return std::clamp(y, 1e-3, 1.0 - 1e-3);
    case Link::kIdentity: return y;
  }
  return y;
}

constexpr double kLabelScale = 10.0;
constexpr double kRemainderInit = 0.1;
constexpr double kMembershipFloor = 1e-3;
constexpr double kVarianceFloor = 1e-6;

}  // namespace

VariationalState initialize(const Hyperparameters& hp, const Dataset& data,
                            int K, bool remainder, std::uint64_t seed) {
  if (K < 1) throw std::invalid_argument("initialize: K must be >= 1");
  const Eigen::Index n_obs = data.observations();
  const Eigen::Index m = data.features();
  if (n_obs < 1) throw std::invalid_argument("initialize: empty dataset");
  Rng rng = substream(seed, {stream::kInit});

  Eigen::MatrixXd noisy = data.y;
  std::normal_distribution<double> std_normal(0.0, 1.0);
  for (Eigen::Index j = 0; j < m; ++j) {
    const auto col = data.y.col(j).array();
    const double sd = std::sqrt(std::max(
        (col - col.mean()).square().sum() / std::max<Eigen::Index>(n_obs - 1, 1),
        kVarianceFloor));
    for (Eigen::Index n = 0; n < n_obs; ++n)
      noisy(n, j) += 0.01 * sd * std_normal(rng);
  }

  const FuzzyClustering fcm = fuzzy_cmeans(noisy, K, rng);

  Eigen::MatrixXd latent = noisy.unaryExpr(
      [&](double v) { return inverse_link(hp.link, clamp_to_link_range(hp.link, v)); });
  Eigen::MatrixXd centers = fcm.centroids.unaryExpr(
      [&](double v) { return inverse_link(hp.link, clamp_to_link_range(hp.link, v)); });

  VariationalState s;
  s.K = K;
  s.remainder = remainder;
  s.lam_pi = hp.rho * fcm.memberships.cwiseMax(kMembershipFloor);
  const Eigen::VectorXd mean_labels = fcm.memberships.colwise().mean().transpose();
  s.lam_beta.resize(K + (remainder ? 1 : 0));
  s.lam_beta.head(K) = (kLabelScale * mean_labels).cwiseMax(kMembershipFloor);
  if (remainder) s.lam_beta[K] = kRemainderInit;
  s.lam_mu_mean = centers;

  Eigen::VectorXd var(m);
  for (Eigen::Index j = 0; j < m; ++j) {
    const auto col = latent.col(j).array();
    var[j] = std::max((col - col.mean()).square().sum() /
                          std::max<Eigen::Index>(n_obs - 1, 1),
                      kVarianceFloor);
  }
  const double nu = hp.nu0 + static_cast<double>(m) + 1.0;
  s.lam_sigma_nu = Eigen::VectorXd::Constant(K, nu);
  const Eigen::MatrixXd psi =
      Eigen::MatrixXd(var.asDiagonal()) * (nu - static_cast<double>(m) - 1.0);
  s.lam_sigma_psi.assign(K, psi);

  s.lam_p = Eigen::VectorXd::Constant(n_obs, hp.rho);
  const Eigen::MatrixXd pi_mean = s.expected_pi();
  // Each factor's local mean is its centroid shifted by the observation's
  // residual, so the mixture reproduces the (noisy) latent observation.
  s.lam_xbar_mean.resize(n_obs);
  for (Eigen::Index n = 0; n < n_obs; ++n) {
    const Eigen::RowVectorXd residual =
        latent.row(n) - pi_mean.row(n) * centers;
    s.lam_xbar_mean[n] = centers.rowwise() + residual;
  }
  s.lam_xbar_scale.resize(n_obs);
  for (Eigen::Index n = 0; n < n_obs; ++n) {
    Eigen::MatrixXd scale(K, m);
    for (int k = 0; k < K; ++k)
      scale.row(k) =
          (var.array() / (hp.rho * pi_mean(n, k))).sqrt().transpose();
    s.lam_xbar_scale[n] = std::move(scale);
  }
  return s;
}

// ------------------------------------------------------ analytic updates

namespace {

// E[P_n] E[pi_nk] for every n.
Eigen::VectorXd factor_weights(const VariationalState& state,
                               const Eigen::MatrixXd& pi_mean, int k) {
  return state.lam_p.cwiseProduct(pi_mean.col(k));
}

}  // namespace

void update_mu(const Hyperparameters& hp, VariationalState& state, int k) {
  const Eigen::Index m = state.features();
  const Eigen::MatrixXd pi_mean = state.expected_pi();
  const Eigen::VectorXd w = factor_weights(state, pi_mean, k);
  const Eigen::MatrixXd prec_sigma = state.expected_sigma_inverse(k);
  Eigen::VectorXd weighted = Eigen::VectorXd::Zero(m);
  for (Eigen::Index n = 0; n < state.observations(); ++n)
    weighted += w[n] * state.lam_xbar_mean[n].row(k).transpose();
  const double prior_prec = 1.0 / (hp.sigma0 * hp.sigma0);
  Eigen::MatrixXd prec = w.sum() * prec_sigma;
  prec.diagonal().array() += prior_prec;
  const Eigen::VectorXd rhs =
      prec_sigma * weighted +
      Eigen::VectorXd::Constant(m, prior_prec * hp.mu0);
  Eigen::LLT<Eigen::MatrixXd> llt(prec);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("mu update: precision of factor " +
                             std::to_string(k) + " is not invertible");
  state.lam_mu_mean.row(k) = llt.solve(rhs).transpose();
}

void update_sigma(const Hyperparameters& hp, VariationalState& state, int k) {
  const Eigen::Index m = state.features();
  const Eigen::MatrixXd pi_mean = state.expected_pi();
  const Eigen::VectorXd w = factor_weights(state, pi_mean, k);
  Eigen::MatrixXd psi = hp.psi0;
  const Eigen::RowVectorXd mu = state.lam_mu_mean.row(k);
  for (Eigen::Index n = 0; n < state.observations(); ++n) {
    const Eigen::VectorXd d =
        (state.lam_xbar_mean[n].row(k) - mu).transpose();
    psi.noalias() += w[n] * d * d.transpose();
    psi.diagonal() +=
        w[n] * state.lam_xbar_scale[n].row(k).array().square().matrix().transpose();
  }
  psi.diagonal().array() += w.sum() * kMuScale * kMuScale;
  state.lam_sigma_psi[k] = 0.5 * (psi + psi.transpose());
  state.lam_sigma_nu[k] = hp.nu0 + static_cast<double>(state.observations());
  (void)m;
}

void update_mu_sigma(const Hyperparameters& hp, const Dataset& data,
                     VariationalState& state) {
  if (data.observations() != state.observations())
    throw std::invalid_argument("update_mu_sigma: dataset/state mismatch");
  constexpr int kMaxSweeps = 50;
  for (int k = 0; k < state.K; ++k) {
    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
      const Eigen::RowVectorXd before = state.lam_mu_mean.row(k);
      update_mu(hp, state, k);
      update_sigma(hp, state, k);
      const double moved =
          (state.lam_mu_mean.row(k) - before).cwiseAbs().maxCoeff();
      if (moved <= 1e-12 * (1.0 + before.cwiseAbs().maxCoeff())) break;
    }
  }
}

// ------------------------------------------------------ block gradients

namespace {

// Expectations of the Markov blanket that the block objectives need.
struct BlockContext {
  Eigen::VectorXd beta_mean;
  std::vector<Eigen::MatrixXd> sigma_inv;  // E[Sigma_k^-1]
  Eigen::MatrixXd elog_pi;                 // E[log pi_nk]
  Eigen::VectorXd elog_det;                // E[log |Sigma_k|]

  explicit BlockContext(const VariationalState& state)
      : beta_mean(state.expected_beta()) {
    sigma_inv.reserve(state.K);
    elog_det.resize(state.K);
    const Eigen::Index m = state.features();
    for (int k = 0; k < state.K; ++k) {
      sigma_inv.push_back(state.expected_sigma_inverse(k));
      double total = FactorCovariance::from(state.lam_sigma_psi[k]).log_det -
                     static_cast<double>(m) * std::log(2.0);
      for (Eigen::Index i = 0; i < m; ++i)
        total -= dist::digamma(0.5 * (state.lam_sigma_nu[k] - static_cast<double>(i)));
      elog_det[k] = total;
    }
    elog_pi.resize(state.observations(), state.K);
    for (Eigen::Index n = 0; n < state.observations(); ++n) {
      const double total = dist::digamma(state.lam_pi.row(n).sum());
      for (int k = 0; k < state.K; ++k)
        elog_pi(n, k) = dist::digamma(state.lam_pi(n, k)) - total;
    }
  }
};

// E over q(mu_k), q(Sigma_k) of (x - mu_k)' Sigma_k^-1 (x - mu_k).
double expected_quad(const VariationalState& state, const BlockContext& ctx,
                     int k, const Eigen::Ref<const Eigen::VectorXd>& x) {
  const Eigen::VectorXd d = x - state.lam_mu_mean.row(k).transpose();
  return d.dot(ctx.sigma_inv[k] * d) +
         ctx.sigma_inv[k].trace() * kMuScale * kMuScale;
}

// Same, additionally averaged over q(xbar_nk).
double expected_quad_xbar(const VariationalState& state,
                          const BlockContext& ctx, int n, int k) {
  const Eigen::RowVectorXd s = state.lam_xbar_scale[n].row(k);
  return expected_quad(state, ctx, k, state.lam_xbar_mean[n].row(k).transpose()) +
         ctx.sigma_inv[k].diagonal().dot(s.array().square().matrix().transpose());
}

Eigen::VectorXd pi_mean_row(const VariationalState& state, int n) {
  return state.lam_pi.row(n).transpose() / state.lam_pi.row(n).sum();
}

// Draws the xbar rows of observation n from q, leaving row `skip` as is.
void sample_xbar_rows(const VariationalState& state, int n, int skip,
                      Eigen::MatrixXd& xbar, Rng& rng) {
  std::normal_distribution<double> std_normal(0.0, 1.0);
  for (int k = 0; k < state.K; ++k) {
    if (k == skip) continue;
    for (Eigen::Index j = 0; j < state.features(); ++j)
      xbar(k, j) = state.lam_xbar_mean[n](k, j) +
                   state.lam_xbar_scale[n](k, j) * std_normal(rng);
  }
}

// Score-function estimate from per-sample scores H (S x D) and objectives f.
Eigen::VectorXd combine_samples(const Eigen::MatrixXd& h,
                                const Eigen::VectorXd& f,
                                bool control_variates) {
  const Eigen::Index s_count = h.rows();
  const Eigen::Index dims = h.cols();
  Eigen::VectorXd grad(dims);
  if (!control_variates || s_count < 3) {
    grad = (h.transpose() * f) / static_cast<double>(s_count);
    return grad;
  }
  const double others = static_cast<double>(s_count - 1);
  for (Eigen::Index j = 0; j < dims; ++j) {
    const auto hj = h.col(j).array();
    const Eigen::ArrayXd hf = hj * f.array();
    const double a_tot = (hj * hf).sum();
    const double b_tot = hf.sum();
    const double c_tot = hj.sum();
    const double d_tot = hj.square().sum();
    double acc = 0.0;
    for (Eigen::Index s = 0; s < s_count; ++s) {
      const double a = a_tot - hj[s] * hf[s];
      const double b = b_tot - hf[s];
      const double c = c_tot - hj[s];
      const double d = d_tot - hj[s] * hj[s];
      const double var = d - c * c / others;
      const double cov = a - b * c / others;
      const double coef = var > 1e-300 ? cov / var : 0.0;
      acc += hj[s] * (f[s] - coef);
    }
    grad[j] = acc / static_cast<double>(s_count);
  }
  return grad;
}


Eigen::VectorXd xbar_gradient(int n, int k, const Hyperparameters& hp,
                              const Dataset& data,
                              const VariationalState& state,
                              const BlockContext& ctx, int samples, bool cv,
                              Rng& rng) {
  const Eigen::Index m = state.features();
  const dist::Dirichlet q_pi(state.lam_pi.row(n).transpose());
  const Eigen::VectorXd y_n = data.y.row(n).transpose();
  const double prior_scale = state.lam_p[n] * pi_mean_row(state, n)[k];
  const Eigen::RowVectorXd mean = state.lam_xbar_mean[n].row(k);
  const Eigen::RowVectorXd scale = state.lam_xbar_scale[n].row(k);
  Eigen::MatrixXd xbar_n = state.lam_xbar_mean[n];
  Eigen::MatrixXd h(samples, 2 * m);
  Eigen::VectorXd f(samples);
  std::normal_distribution<double> std_normal(0.0, 1.0);
  for (int s = 0; s < samples; ++s) {
    double log_q = 0.0;
    for (Eigen::Index j = 0; j < m; ++j) {
      const double eps = std_normal(rng);
      const double x = mean[j] + scale[j] * eps;
      xbar_n(k, j) = x;
      const double sd = scale[j];
      h(s, j) = eps / sd;
      h(s, m + j) = (eps * eps - 1.0) / sd;
      log_q += dist::log_pdf(dist::Normal(mean[j], sd), x);
    }
    sample_xbar_rows(state, n, k, xbar_n, rng);
    const Eigen::VectorXd pi_n = dist::sample(q_pi, rng);
    f[s] = -0.5 * prior_scale *
               expected_quad(state, ctx, k, xbar_n.row(k).transpose()) +
           log_lik_obs(hp, y_n, pi_n, xbar_n) - log_q;
  }
  return combine_samples(h, f, cv);
}

Eigen::VectorXd pi_gradient(int n, const Hyperparameters& hp,
                            const Dataset& data, const VariationalState& state,
                            const BlockContext& ctx, int samples, bool cv,
                            Rng& rng) {
  const dist::Dirichlet q(state.lam_pi.row(n).transpose());
  const double half_m = 0.5 * static_cast<double>(state.features());
  Eigen::VectorXd quad(state.K);
  for (int k = 0; k < state.K; ++k) quad[k] = expected_quad_xbar(state, ctx, n, k);
  const Eigen::VectorXd y_n = data.y.row(n).transpose();
  Eigen::MatrixXd xbar_n = state.lam_xbar_mean[n];
  Eigen::MatrixXd h(samples, state.K);
  Eigen::VectorXd f(samples);
  for (int s = 0; s < samples; ++s) {
    const Eigen::VectorXd x = dist::sample(q, rng);
    h.row(s) = dist::grad_log_q(q, x).transpose();
    sample_xbar_rows(state, n, -1, xbar_n, rng);
    double total = log_lik_obs(hp, y_n, x, xbar_n) +
                   log_pi_prior(hp, ctx.beta_mean, x) - dist::log_pdf(q, x);
    for (int k = 0; k < state.K; ++k)
      total += half_m * std::log(std::max(x[k], kParamFloor)) -
               0.5 * state.lam_p[n] * x[k] * quad[k];
    f[s] = total;
  }
  return combine_samples(h, f, cv);
}

Eigen::VectorXd particles_gradient(int n, const Hyperparameters& hp,
                                   const VariationalState& state,
                                   const BlockContext& ctx, int samples,
                                   bool cv, Rng& rng) {
  const dist::Poisson q(state.lam_p[n]);
  const Eigen::VectorXd pi_n = pi_mean_row(state, n);
  const double half_m = 0.5 * static_cast<double>(state.features());
  // pi_n was updated earlier in this pass, so E[log pi_n] is recomputed.
  const double digamma_total = dist::digamma(state.lam_pi.row(n).sum());
  Eigen::VectorXd quad(state.K), elog_pi(state.K);
  for (int k = 0; k < state.K; ++k)
    elog_pi[k] = dist::digamma(state.lam_pi(n, k)) - digamma_total;
  for (int k = 0; k < state.K; ++k) quad[k] = expected_quad_xbar(state, ctx, n, k);
  Eigen::MatrixXd h(samples, 1);
  Eigen::VectorXd f(samples);
  for (int s = 0; s < samples; ++s) {
    const double p = dist::sample(q, rng);
    h(s, 0) = dist::grad_log_q(q, p);
    double total = log_count_prior(hp, p) - dist::log_pdf(q, p);
    for (int k = 0; k < state.K; ++k) {
      total -= half_m * std::log(2.0 * std::numbers::pi) + 0.5 * ctx.elog_det[k];
      // A zero count hits the scale floor.
      if (p > 0.0)
        total += half_m * (std::log(p) + elog_pi[k]) -
                 0.5 * p * pi_n[k] * quad[k];
      else
        total += half_m * std::log(kParamFloor) - 0.5 * kParamFloor * quad[k];
    }
    f[s] = total;
  }
  return combine_samples(h, f, cv);
}

// E over q(pi_n) of log Dirichlet(pi_n | alpha * b).
double expected_log_pi_prior(const Hyperparameters& hp,
                             const Eigen::VectorXd& b,
                             const Eigen::Ref<const Eigen::RowVectorXd>& elog_pi) {
  const Eigen::Index k_count = elog_pi.size();
  const Eigen::ArrayXd conc =
      (hp.alpha * b.head(k_count)).array().max(kParamFloor);
  double total = std::lgamma(conc.sum());
  for (Eigen::Index k = 0; k < k_count; ++k)
    total += (conc[k] - 1.0) * elog_pi[k] - std::lgamma(conc[k]);
  return total;
}

Eigen::VectorXd beta_gradient(const Hyperparameters& hp,
                              const VariationalState& state,
                              const BlockContext& ctx, int samples, bool cv,
                              Rng& rng) {
  const dist::Dirichlet q(state.lam_beta);
  Eigen::MatrixXd h(samples, state.lam_beta.size());
  Eigen::VectorXd f(samples);
  for (int s = 0; s < samples; ++s) {
    const Eigen::VectorXd b = dist::sample(q, rng);
    h.row(s) = dist::grad_log_q(q, b).transpose();
    double total = log_beta_prior(hp, b) - dist::log_pdf(q, b);
    for (Eigen::Index n = 0; n < state.observations(); ++n)
      total += expected_log_pi_prior(hp, b, ctx.elog_pi.row(n));
    f[s] = total;
  }
  return combine_samples(h, f, cv);
}

Eigen::VectorXd block_gradient(const Block& which, const Hyperparameters& hp,
                               const Dataset& data,
                               const VariationalState& state,
                               const BlockContext& ctx, int samples, bool cv,
                               Rng& rng) {
  switch (which.kind) {
    case Block::Kind::kXbar:
      return xbar_gradient(which.n, which.k, hp, data, state, ctx, samples, cv,
                           rng);
    case Block::Kind::kPi:
      return pi_gradient(which.n, hp, data, state, ctx, samples, cv, rng);
    case Block::Kind::kParticles:
      return particles_gradient(which.n, hp, state, ctx, samples, cv, rng);
    case Block::Kind::kBeta:
      return beta_gradient(hp, state, ctx, samples, cv, rng);
  }
  return {};
}

// RMSProp-scaled ascent on a contiguous parameter block. Positive blocks
// in log space step on log(lambda) with gradient lambda * g.
template <typename Params, typename Acc, typename Grad>
void rms_update(Params&& params, Acc&& acc, const Grad& grad, double rho,
                bool positive, bool log_space) {
  if (positive && log_space) {
    const Eigen::ArrayXXd g = grad.array() * params.array();
    acc = kRmsDecay * acc.array() + (1.0 - kRmsDecay) * g.square();
    params.array() *= (rho * g / (acc.array() + kRmsEpsilon).sqrt()).exp();
  } else {
    acc = kRmsDecay * acc.array() + (1.0 - kRmsDecay) * grad.array().square();
    params.array() += rho * grad.array() / (acc.array() + kRmsEpsilon).sqrt();
  }
  if (positive) params = params.cwiseMax(kParamFloor);
}

bool apply_step(const Block& which, const Eigen::VectorXd& grad,
                VariationalState& state, GradientEstimatorState& est,
                const Schedules& sched, bool log_space) {
  if (!grad.allFinite()) return false;
  const long t = est.t;
  switch (which.kind) {
    case Block::Kind::kXbar: {
      const Eigen::Index m = state.features();
      const int n = which.n;
      const int k = which.k;
      Eigen::RowVectorXd mean = state.lam_xbar_mean[n].row(k);
      Eigen::RowVectorXd acc_mean = est.acc_xbar_mean[n].row(k);
      rms_update(mean, acc_mean, grad.head(m).transpose(),
                 sched.xbar_mean.at(t), false, log_space);
      Eigen::RowVectorXd scale = state.lam_xbar_scale[n].row(k);
      Eigen::RowVectorXd acc_scale = est.acc_xbar_scale[n].row(k);
      rms_update(scale, acc_scale, grad.tail(m).transpose(),
                 sched.xbar_scale.at(t), true, log_space);
      state.lam_xbar_mean[n].row(k) = mean;
      state.lam_xbar_scale[n].row(k) = scale;
      est.acc_xbar_mean[n].row(k) = acc_mean;
      est.acc_xbar_scale[n].row(k) = acc_scale;
      return true;
    }
    case Block::Kind::kPi: {
      Eigen::RowVectorXd conc = state.lam_pi.row(which.n);
      Eigen::RowVectorXd acc = est.acc_pi.row(which.n);
      rms_update(conc, acc, grad.transpose(), sched.pi.at(t), true, log_space);
      state.lam_pi.row(which.n) = conc;
      est.acc_pi.row(which.n) = acc;
      return true;
    }
    case Block::Kind::kParticles: {
      Eigen::Matrix<double, 1, 1> rate(state.lam_p[which.n]);
      Eigen::Matrix<double, 1, 1> acc(est.acc_p[which.n]);
      rms_update(rate, acc, grad, sched.particles.at(t), true, false);
      state.lam_p[which.n] = rate[0];
      est.acc_p[which.n] = acc[0];
      return true;
    }
    case Block::Kind::kBeta:
      rms_update(state.lam_beta, est.acc_beta, grad, sched.beta.at(t), true, log_space);
      return true;
  }
  return false;
}

std::string block_name(const Block& b) {
  switch (b.kind) {
    case Block::Kind::kXbar:
      return "xbar(" + std::to_string(b.n) + "," + std::to_string(b.k) + ")";
    case Block::Kind::kPi: return "pi(" + std::to_string(b.n) + ")";
    case Block::Kind::kParticles: return "P(" + std::to_string(b.n) + ")";
    case Block::Kind::kBeta: return "beta";
  }
  return "?";
}

bool step_with_context(const Block& which, const Hyperparameters& hp,
                       const Dataset& data, VariationalState& state,
                       GradientEstimatorState& est, const FitOptions& opts,
                       const BlockContext& ctx, Rng& rng) {
  const Eigen::VectorXd grad = block_gradient(
      which, hp, data, state, ctx, opts.samples, opts.control_variates, rng);
  return apply_step(which, grad, state, est, opts.schedules,
                    opts.log_space_steps);
}

}  // namespace

Eigen::VectorXd estimate_block_gradient(const Block& which,
                                        const Hyperparameters& hp,
                                        const Dataset& data,
                                        const VariationalState& state,
                                        int samples, bool control_variates,
                                        Rng& rng) {
  if (samples < 1)
    throw std::invalid_argument("estimate_block_gradient: samples must be >= 1");
  const BlockContext ctx(state);
  return block_gradient(which, hp, data, state, ctx, samples, control_variates,
                        rng);
}

bool bbvi_step(const Block& which, const Hyperparameters& hp,
               const Dataset& data, VariationalState& state,
               GradientEstimatorState& est, const FitOptions& opts, Rng& rng) {
  if (opts.samples < 2)
    throw std::invalid_argument("bbvi_step: at least two samples required");
  const BlockContext ctx(state);
  return step_with_context(which, hp, data, state, est, opts, ctx, rng);
}

// ----------------------------------------------------------- iterations

void run_iteration(const Hyperparameters& hp, const Dataset& data,
                   VariationalState& state, GradientEstimatorState& est,
                   const FitOptions& opts, std::vector<FitWarning>& warnings) {
  if (opts.samples < 2)
    throw std::invalid_argument("run_iteration: at least two samples required");
  est.check_shape(state);
  const long t = est.t;
  const long n_obs = static_cast<long>(state.observations());
  std::vector<std::vector<FitWarning>> local_warnings(n_obs);
  {
    // Local blocks read globals only, which stay fixed during this phase.
    const BlockContext ctx(state);
    parallel_for(n_obs, opts.threads, [&](long n) {
      Rng rng = substream(opts.seed, {stream::kLocal,
                                      static_cast<std::uint64_t>(t),
                                      static_cast<std::uint64_t>(n)});
      const int ni = static_cast<int>(n);
      auto step = [&](const Block& b) {
        if (!step_with_context(b, hp, data, state, est, opts, ctx, rng))
          local_warnings[n].push_back(
              {t, block_name(b), "non-finite gradient; update skipped"});
      };
      for (int k = 0; k < state.K; ++k) step(Block::xbar(ni, k));
      step(Block::pi(ni));
      step(Block::particles(ni));
    });
  }
  for (auto& w : local_warnings)
    warnings.insert(warnings.end(), w.begin(), w.end());

  update_mu_sigma(hp, data, state);

  {
    const BlockContext ctx(state);
    Rng rng = substream(opts.seed, {stream::kGlobal, static_cast<std::uint64_t>(t)});
    if (!step_with_context(Block::beta(), hp, data, state, est, opts, ctx, rng))
      warnings.push_back({t, "beta", "non-finite gradient; update skipped"});
  }
  ++est.t;
}

double evaluation_elbo(const Hyperparameters& hp, const Dataset& data,
                       const VariationalState& state, const FitOptions& opts) {
  return elbo(hp, data, state, opts.elbo_samples,
              substream_seed(opts.seed, {stream::kElbo}))
      .value;
}

FitResult fit_parametric(const Hyperparameters& hp, const Dataset& data, int K,
                         const FitOptions& opts, const CheckpointSink& sink,
                         const Checkpoint* resume) {
  Checkpoint cp;
  if (resume) {
    cp = *resume;
  } else {
    cp.state = initialize(hp, data, K, false, opts.seed);
    cp.estimator = GradientEstimatorState::zeros_like(cp.state);
    cp.report.mode = "parametric";
    cp.report.seed = opts.seed;
    cp.report.initial_k = K;
    const double value = evaluation_elbo(hp, data, cp.state, opts);
    cp.report.elbo_trace.push_back(value);
    cp.monitor.observe(value);
  }
  // Stopping rules come from the current options, also when resuming.
  cp.monitor.delta = opts.delta;
  cp.monitor.min_iters = opts.min_iters;
  cp.monitor.max_iters = opts.max_iters;
  while (cp.report.iterations < opts.max_iters &&
         !cp.monitor.converged(cp.report.iterations)) {
    run_iteration(hp, data, cp.state, cp.estimator, opts, cp.report.warnings);
    ++cp.report.iterations;
    cp.state.check_invariants();
    const double value = evaluation_elbo(hp, data, cp.state, opts);
    cp.report.elbo_trace.push_back(value);
    cp.monitor.observe(value);
    if (sink && opts.checkpoint_every > 0 &&
        cp.report.iterations % opts.checkpoint_every == 0)
      sink(cp);
  }
  cp.report.converged = cp.monitor.converged(cp.report.iterations);
  cp.progress.stage = NonparametricProgress::Stage::kDone;
  return {std::move(cp.state), std::move(cp.report)};
}

}  // namespace ndm
