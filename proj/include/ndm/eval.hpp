#pragma once

#include <Eigen/Dense>

#include <optional>
#include <vector>

#include "ndm/model.hpp"

namespace ndm {

// Root mean square error over all entries divided by the range of mu_true.
template <typename A, typename B>
double nrmse_mu(const Eigen::MatrixBase<A>& mu_hat,
                const Eigen::MatrixBase<B>& mu_true) {
  if (mu_hat.rows() != mu_true.rows() || mu_hat.cols() != mu_true.cols())
    throw std::invalid_argument("nrmse_mu: shapes differ");
  if (mu_true.size() == 0) throw std::invalid_argument("nrmse_mu: empty input");
  const double range = mu_true.maxCoeff() - mu_true.minCoeff();
  if (!(range > 0.0))
    throw std::invalid_argument("nrmse_mu: true values have zero range");
  const double mse = (mu_hat - mu_true).squaredNorm() /
                     static_cast<double>(mu_true.size());
  return std::sqrt(mse) / range;
}

template <typename A, typename B>
double cosine(const Eigen::MatrixBase<A>& v_hat,
              const Eigen::MatrixBase<B>& v_true) {
  if (v_hat.size() != v_true.size())
    throw std::invalid_argument("cosine: lengths differ");
  const double a = v_hat.norm();
  const double b = v_true.norm();
  if (!(a > 0.0) || !(b > 0.0))
    throw std::invalid_argument("cosine: zero-norm vector");
  return v_hat.cwiseProduct(v_true).sum() / (a * b);
}

// Cosine between two proportion vectors after normalizing each to sum to one.
double cosine_beta(const Eigen::VectorXd& beta_hat,
                   const Eigen::VectorXd& beta_true);
// Mean over observations of the row cosines; rows where either side is all
// zero are skipped.
double cosine_pi(const Eigen::MatrixXd& pi_hat, const Eigen::MatrixXd& pi_true);

struct AlignedFit {
  // estimate_to_truth[i] is the true factor matched to estimate i, or -1.
  std::vector<int> estimate_to_truth;
  std::vector<int> unmatched_truth;
  double score = 0.0;  // sum of matched cosines

  // Matched (estimate, truth) pairs in estimate order.
  std::vector<std::pair<int, int>> pairs() const;
};

// Greedy maximum-cosine matching on factor means; ties go to the lower
// estimate index, then the lower true index.
AlignedFit align_factors(const Eigen::MatrixXd& mu_hat,
                         const Eigen::MatrixXd& mu_true);

// Posterior summary of a fit or an external method.
struct FactorEstimate {
  Eigen::VectorXd beta;  // K entries; a remainder entry is dropped by callers
  Eigen::MatrixXd pi;    // N x K
  Eigen::MatrixXd mu;    // K x M
  FactorFeatures xbar;   // optional, N of K x M
};

struct Metrics {
  double nrmse_mu = 0.0;
  double cosine_beta = 0.0;
  double cosine_pi = 0.0;
  std::optional<double> nrmse_xbar;
  AlignedFit alignment;
  int estimated_factors = 0;
  int true_factors = 0;
};

// RMSE over unmasked matched x-bar entries divided by their true range;
// empty when every entry is masked.
std::optional<double> nrmse_xbar(
    const FactorFeatures& xbar_hat, const FactorFeatures& xbar_true,
    const Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>& mask,
    const std::vector<std::pair<int, int>>& pairs);

// Aligns, then scores matched factors. Throws std::invalid_argument when
// observation or feature counts disagree.
Metrics evaluate(const FactorEstimate& estimate, const GroundTruth& truth);

}  // namespace ndm
