#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "ndm/model.hpp"
#include "ndm/rng.hpp"

namespace ndm {

// rho_t = (t + delay)^rate with a negative rate.
struct LearningRateSchedule {
  double delay = 0.0;
  double rate = -0.5;

  double at(long t) const;
};

struct Schedules {
  LearningRateSchedule beta{16.0, -0.5};
  LearningRateSchedule pi{1024.0, -0.8};
  LearningRateSchedule xbar_mean{1048576.0, -0.8};
  LearningRateSchedule xbar_scale{1048576.0, -0.8};
  LearningRateSchedule particles{32.0, -0.7};

  // The published table; Beta observations use a 2^10 delay on the x-bar
  // location.
  static Schedules reference(ObsFamily family);
  // Defaults used by fits; see README for how they differ from the table.
  static Schedules defaults_for(ObsFamily family);
};

// RMSProp accumulators laid out like the variational parameters they scale.
struct GradientEstimatorState {
  long t = 0;
  Eigen::VectorXd acc_beta;
  Eigen::MatrixXd acc_pi;
  FactorFeatures acc_xbar_mean;
  FactorFeatures acc_xbar_scale;
  Eigen::VectorXd acc_p;

  static GradientEstimatorState zeros_like(const VariationalState& state);
  void check_shape(const VariationalState& state) const;
};

inline constexpr double kRmsDecay = 0.9;
inline constexpr double kRmsEpsilon = 1e-8;

struct ConvergenceMonitor {
  double delta = 1e-4;
  int required_hits = 3;
  long min_iters = 0;
  long max_iters = 1000;
  int hits = 0;
  std::optional<double> last_elbo;

  // Feeds one ELBO value; returns the relative change (infinity on the first
  // call). Resets the counter when the change is at least delta.
  double observe(double elbo);
  bool converged(long iterations) const {
    return hits >= required_hits && iterations >= min_iters;
  }
  void reset_counter() { hits = 0; }
};

struct FitOptions {
  int samples = 64;
  int elbo_samples = 16;
  bool control_variates = true;
  // Step positive parameters multiplicatively (RMSProp on their logs).
  bool log_space_steps = true;
  Schedules schedules = Schedules::defaults_for(ObsFamily::kNormal);
  double delta = 1e-4;
  long min_iters = 10;
  long max_iters = 2000;
  int threads = 1;
  std::uint64_t seed = 0;
  // Nonparametric controls.
  long batch_max_iters = 200;
  int max_rounds = 20;
  bool splits = true;
  bool merges = true;
  // Divide split proportions by 2-means cluster membership of each
  // observation's local means rather than uniformly.
  bool cluster_split_proportions = true;
  // Checkpoint every this many iterations (0 disables).
  long checkpoint_every = 0;
};

struct FitWarning {
  long iteration = 0;
  std::string block;
  std::string message;
};

struct MoveRecord {
  enum class Kind { kSplit, kMerge };
  Kind kind = Kind::kSplit;
  std::vector<int> factors;
  double elbo_before = 0.0;
  double elbo_after = 0.0;
  bool accepted = false;
  long iteration = 0;
  bool noise_fallback = false;
};

struct FitReport {
  std::string mode = "parametric";
  std::uint64_t seed = 0;
  int initial_k = 0;
  std::vector<double> elbo_trace;
  long iterations = 0;
  bool converged = false;
  std::vector<FitWarning> warnings;
  std::vector<MoveRecord> moves;
};

// Progress marker for the nonparametric outer loop.
struct NonparametricProgress {
  enum class Stage { kBatch, kMerge, kSplit, kDone };
  Stage stage = Stage::kBatch;
  int round = 0;
  long batch_iters = 0;
  bool accepted_this_round = false;
  bool batch_converged = false;
};

// Everything needed to continue a fit exactly where it stopped.
struct Checkpoint {
  VariationalState state;
  GradientEstimatorState estimator;
  ConvergenceMonitor monitor;
  FitReport report;
  NonparametricProgress progress;
};

using CheckpointSink = std::function<void(const Checkpoint&)>;

// Runs body(i) for i in [0, count) on up to `threads` workers. Each index is
// handled exactly once; the caller keeps writes disjoint.
void parallel_for(long count, int threads, const std::function<void(long)>& body);

VariationalState initialize(const Hyperparameters& hp, const Dataset& data,
                            int K, bool remainder, std::uint64_t seed);

// Fuzzy c-means with fuzzifier 2. Returns memberships (N x K) and centroids
// (K x M); seeding is k-means++ from rng.
struct FuzzyClustering {
  Eigen::MatrixXd memberships;
  Eigen::MatrixXd centroids;
  int iterations = 0;
};
FuzzyClustering fuzzy_cmeans(const Eigen::MatrixXd& points, int K, Rng& rng,
                             double tol = 1e-5, int max_iters = 300);

// Closed-form mean-field updates of the global factor parameters.
void update_mu(const Hyperparameters& hp, VariationalState& state, int k);
void update_sigma(const Hyperparameters& hp, VariationalState& state, int k);
// Alternates update_mu and update_sigma for every factor until the means stop
// moving.
void update_mu_sigma(const Hyperparameters& hp, const Dataset& data,
                     VariationalState& state);

// Raw score-function gradient of one block (no control variates, no
// RMSProp). Layout:
//   xbar(n,k): [d mean_0..M-1, d scale_0..M-1]
//   pi(n):     d concentration (K)
//   P(n):      d rate (1)
//   beta:      d concentration (K or K+1)
// With control_variates, each component subtracts a leave-one-out estimate
// of Cov(h f, h) / Var(h).
Eigen::VectorXd estimate_block_gradient(const Block& which,
                                        const Hyperparameters& hp,
                                        const Dataset& data,
                                        const VariationalState& state,
                                        int samples, bool control_variates,
                                        Rng& rng);

// One stochastic update of a block. Returns false (and leaves the state
// untouched) when the gradient estimate is not finite.
bool bbvi_step(const Block& which, const Hyperparameters& hp,
               const Dataset& data, VariationalState& state,
               GradientEstimatorState& est, const FitOptions& opts, Rng& rng);

// One pass of every block update: locals, then mu/Sigma, then beta; t += 1.
void run_iteration(const Hyperparameters& hp, const Dataset& data,
                   VariationalState& state, GradientEstimatorState& est,
                   const FitOptions& opts, std::vector<FitWarning>& warnings);

// ELBO with the fit's dedicated evaluation seed.
double evaluation_elbo(const Hyperparameters& hp, const Dataset& data,
                       const VariationalState& state, const FitOptions& opts);

struct FitResult {
  VariationalState state;
  FitReport report;
};

FitResult fit_parametric(const Hyperparameters& hp, const Dataset& data, int K,
                         const FitOptions& opts,
                         const CheckpointSink& sink = {},
                         const Checkpoint* resume = nullptr);

}  // namespace ndm
