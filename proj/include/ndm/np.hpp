#pragma once

#include <utility>
#include <vector>

#include "ndm/vi.hpp"

namespace ndm {

// rho^SM_t = (t + 4)^(-1/2).
double split_rate(long t);

struct SplitCandidate {
  VariationalState state;
  GradientEstimatorState estimator;
  bool noise_fallback = false;
  std::vector<int> cluster;  // 2-means label (0 or 1) of every observation
};

// Two-means on the rows of `points` seeded with the point farthest from the
// mean and the point farthest from that. Returns labels and the two centers;
// `ok` is false when the points do not separate.
struct TwoMeans {
  std::vector<int> labels;
  Eigen::MatrixXd centers;  // 2 x M
  bool ok = false;
};
TwoMeans two_means(const Eigen::MatrixXd& points, int max_iters = 100);

// Splits factor k into k (k') and a new last factor (k''). Covariances and
// local features are copied; the two means come from 2-means on the local
// means of factor k, with Gaussian noise of scale 1e-3 as a fallback.
SplitCandidate split_candidate(const VariationalState& state,
                               const GradientEstimatorState& est, int k,
                               long t, std::uint64_t seed,
                               bool cluster_proportions = true);

struct MergeCandidate {
  VariationalState state;
  GradientEstimatorState estimator;
  int merged_index = 0;
};

// Combines factors a and b into min(a, b); the other index is removed.
MergeCandidate merge_candidate(const VariationalState& state,
                               const GradientEstimatorState& est, int a, int b);

struct MergePair {
  int a = 0;
  int b = 0;
  double covariance = 0.0;
};
// Pairs whose E[pi] columns have positive covariance across observations,
// highest first.
std::vector<MergePair> merge_shortlist(const VariationalState& state);

// One pass of every block update on a candidate.
void trial_iteration(const Hyperparameters& hp, const Dataset& data,
                     VariationalState& candidate, GradientEstimatorState& est,
                     const FitOptions& opts, std::vector<FitWarning>& warnings);

FitResult fit_nonparametric(const Hyperparameters& hp, const Dataset& data,
                            int K0, const FitOptions& opts,
                            const CheckpointSink& sink = {},
                            const Checkpoint* resume = nullptr);

}  // namespace ndm
