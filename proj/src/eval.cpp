#include "ndm/eval.hpp"

#include <cmath>
#include <stdexcept>

namespace ndm {

double cosine_beta(const Eigen::VectorXd& beta_hat,
                   const Eigen::VectorXd& beta_true) {
  return cosine(beta_hat / beta_hat.sum(), beta_true / beta_true.sum());
}

double cosine_pi(const Eigen::MatrixXd& pi_hat, const Eigen::MatrixXd& pi_true) {
  if (pi_hat.rows() != pi_true.rows() || pi_hat.cols() != pi_true.cols())
    throw std::invalid_argument("cosine_pi: shapes differ");
  double total = 0.0;
  long used = 0;
  for (Eigen::Index n = 0; n < pi_true.rows(); ++n) {
    if (!(pi_hat.row(n).norm() > 0.0) || !(pi_true.row(n).norm() > 0.0)) continue;
    total += cosine(pi_hat.row(n), pi_true.row(n));
    ++used;
  }
  if (used == 0) throw std::invalid_argument("cosine_pi: every row is zero");
  return total / static_cast<double>(used);
}

std::vector<std::pair<int, int>> AlignedFit::pairs() const {
  std::vector<std::pair<int, int>> out;
  for (std::size_t i = 0; i < estimate_to_truth.size(); ++i)
    if (estimate_to_truth[i] >= 0)
      out.emplace_back(static_cast<int>(i), estimate_to_truth[i]);
  return out;
}

AlignedFit align_factors(const Eigen::MatrixXd& mu_hat,
                         const Eigen::MatrixXd& mu_true) {
  if (mu_hat.cols() != mu_true.cols())
    throw std::invalid_argument("align_factors: feature counts differ");
  const int k_hat = static_cast<int>(mu_hat.rows());
  const int k_true = static_cast<int>(mu_true.rows());
  Eigen::MatrixXd sim(k_hat, k_true);
  for (int i = 0; i < k_hat; ++i)
    for (int j = 0; j < k_true; ++j) {
      const double a = mu_hat.row(i).norm();
      const double b = mu_true.row(j).norm();
      sim(i, j) = (a > 0.0 && b > 0.0) ? mu_hat.row(i).dot(mu_true.row(j)) / (a * b)
                                       : 0.0;
    }
  AlignedFit fit;
  fit.estimate_to_truth.assign(k_hat, -1);
  std::vector<bool> truth_used(k_true, false);
  for (int round = 0; round < std::min(k_hat, k_true); ++round) {
    int best_i = -1;
    int best_j = -1;
    for (int i = 0; i < k_hat; ++i) {
      if (fit.estimate_to_truth[i] >= 0) continue;
      for (int j = 0; j < k_true; ++j) {
        if (truth_used[j]) continue;
        if (best_i < 0 || sim(i, j) > sim(best_i, best_j)) {
          best_i = i;
          best_j = j;
        }
      }
    }
    fit.estimate_to_truth[best_i] = best_j;
    truth_used[best_j] = true;
    fit.score += sim(best_i, best_j);
  }
  for (int j = 0; j < k_true; ++j)
    if (!truth_used[j]) fit.unmatched_truth.push_back(j);
  return fit;
}

std::optional<double> nrmse_xbar(
    const FactorFeatures& xbar_hat, const FactorFeatures& xbar_true,
    const Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>& mask,
    const std::vector<std::pair<int, int>>& pairs) {
  if (xbar_hat.size() != xbar_true.size())
    throw std::invalid_argument("nrmse_xbar: observation counts differ");
  double sq = 0.0;
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  long count = 0;
  for (std::size_t n = 0; n < xbar_true.size(); ++n)
    for (const auto& [i, j] : pairs) {
      if (mask.size() != 0 && mask(static_cast<Eigen::Index>(n), j)) continue;
      const auto truth = xbar_true[n].row(j);
      sq += (xbar_hat[n].row(i) - truth).squaredNorm();
      lo = std::min(lo, truth.minCoeff());
      hi = std::max(hi, truth.maxCoeff());
      count += truth.size();
    }
  if (count == 0 || !(hi > lo)) return std::nullopt;
  return std::sqrt(sq / static_cast<double>(count)) / (hi - lo);
}

Metrics evaluate(const FactorEstimate& est, const GroundTruth& truth) {
  if (est.mu.cols() != truth.mu.cols())
    throw std::invalid_argument("estimate has " + std::to_string(est.mu.cols()) +
                                " features but the truth has " +
                                std::to_string(truth.mu.cols()));
  if (est.pi.rows() != truth.pi.rows())
    throw std::invalid_argument("estimate has " + std::to_string(est.pi.rows()) +
                                " observations but the truth has " +
                                std::to_string(truth.pi.rows()));
  if (est.beta.size() != est.mu.rows() || est.pi.cols() != est.mu.rows())
    throw std::invalid_argument("estimate factor counts are inconsistent");

  Metrics out;
  out.estimated_factors = static_cast<int>(est.mu.rows());
  out.true_factors = static_cast<int>(truth.mu.rows());
  out.alignment = align_factors(est.mu, truth.mu);
  const auto pairs = out.alignment.pairs();
  const auto matched = static_cast<Eigen::Index>(pairs.size());

  Eigen::MatrixXd mu_hat(matched, est.mu.cols());
  Eigen::MatrixXd mu_true(matched, truth.mu.cols());
  Eigen::VectorXd beta_hat(matched);
  Eigen::VectorXd beta_true(matched);
  Eigen::MatrixXd pi_hat(est.pi.rows(), matched);
  Eigen::MatrixXd pi_true(truth.pi.rows(), matched);
  for (Eigen::Index r = 0; r < matched; ++r) {
    const auto [i, j] = pairs[r];
    mu_hat.row(r) = est.mu.row(i);
    mu_true.row(r) = truth.mu.row(j);
    beta_hat[r] = est.beta[i];
    beta_true[r] = truth.beta[j];
    pi_hat.col(r) = est.pi.col(i);
    pi_true.col(r) = truth.pi.col(j);
  }
  const double range = truth.mu.maxCoeff() - truth.mu.minCoeff();
  if (!(range > 0.0))
    throw std::invalid_argument("true factor means have zero range");
  out.nrmse_mu =
      std::sqrt((mu_hat - mu_true).squaredNorm() /
                static_cast<double>(mu_true.size())) / range;
  out.cosine_beta = cosine_beta(beta_hat, beta_true);
  out.cosine_pi = cosine_pi(pi_hat, pi_true);
  if (!est.xbar.empty() && !truth.xbar.empty())
    out.nrmse_xbar = nrmse_xbar(est.xbar, truth.xbar, truth.xbar_mask, pairs);
  return out;
}

}  // namespace ndm
