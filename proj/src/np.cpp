#include "ndm/np.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace ndm {

double split_rate(long t) { return std::pow(static_cast<double>(t) + 4.0, -0.5); }

TwoMeans two_means(const Eigen::MatrixXd& points, int max_iters) {
  TwoMeans out;
  const Eigen::Index n_obs = points.rows();
  out.labels.assign(n_obs, 0);
  out.centers = Eigen::MatrixXd::Zero(2, points.cols());
  if (n_obs < 2) return out;

  const Eigen::RowVectorXd mean = points.colwise().mean();
  Eigen::Index first = 0;
  (points.rowwise() - mean).rowwise().squaredNorm().maxCoeff(&first);
  Eigen::Index second = 0;
  const double spread =
      (points.rowwise() - points.row(first)).rowwise().squaredNorm().maxCoeff(&second);
  if (!(spread > 1e-24)) return out;
  out.centers.row(0) = points.row(first);
  out.centers.row(1) = points.row(second);

  for (int it = 0; it < max_iters; ++it) {
    bool changed = it == 0;
    for (Eigen::Index n = 0; n < n_obs; ++n) {
      const double d0 = (points.row(n) - out.centers.row(0)).squaredNorm();
      const double d1 = (points.row(n) - out.centers.row(1)).squaredNorm();
      const int label = d1 < d0 ? 1 : 0;
      if (label != out.labels[n]) changed = true;
      out.labels[n] = label;
    }
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(2, points.cols());
    Eigen::Vector2d counts = Eigen::Vector2d::Zero();
    for (Eigen::Index n = 0; n < n_obs; ++n) {
      sums.row(out.labels[n]) += points.row(n);
      counts[out.labels[n]] += 1.0;
    }
    if (counts[0] == 0.0 || counts[1] == 0.0) return out;
    out.centers.row(0) = sums.row(0) / counts[0];
    out.centers.row(1) = sums.row(1) / counts[1];
    if (!changed) break;
  }
  out.ok = true;
  return out;
}

namespace {

// Inserts a copy of factor k as a new last factor (before any remainder).
void append_factor_copy(VariationalState& s, int k) {
  const int K = s.K;
  Eigen::VectorXd beta(s.lam_beta.size() + 1);
  beta.head(K) = s.lam_beta.head(K);
  beta[K] = s.lam_beta[k];
  if (s.remainder) beta[K + 1] = s.lam_beta[K];
  s.lam_beta = std::move(beta);

  s.lam_pi.conservativeResize(Eigen::NoChange, K + 1);
  s.lam_pi.col(K) = s.lam_pi.col(k);
  s.lam_mu_mean.conservativeResize(K + 1, Eigen::NoChange);
  s.lam_mu_mean.row(K) = s.lam_mu_mean.row(k);
  s.lam_sigma_nu.conservativeResize(K + 1);
  s.lam_sigma_nu[K] = s.lam_sigma_nu[k];
  s.lam_sigma_psi.push_back(s.lam_sigma_psi[k]);
  for (auto* features : {&s.lam_xbar_mean, &s.lam_xbar_scale})
    for (auto& x : *features) {
      x.conservativeResize(K + 1, Eigen::NoChange);
      x.row(K) = x.row(k);
    }
  s.K = K + 1;
}

void append_accumulator_copy(GradientEstimatorState& e, int k, int K) {
  Eigen::VectorXd beta(e.acc_beta.size() + 1);
  beta.head(K) = e.acc_beta.head(K);
  beta[K] = e.acc_beta[k];
  if (e.acc_beta.size() > K) beta[K + 1] = e.acc_beta[K];
  e.acc_beta = std::move(beta);
  e.acc_pi.conservativeResize(Eigen::NoChange, K + 1);
  e.acc_pi.col(K) = e.acc_pi.col(k);
  for (auto* acc : {&e.acc_xbar_mean, &e.acc_xbar_scale})
    for (auto& x : *acc) {
      x.conservativeResize(K + 1, Eigen::NoChange);
      x.row(K) = x.row(k);
    }
}

template <typename Matrix>
void erase_row(Matrix& m, Eigen::Index j) {
  const Eigen::Index tail = m.rows() - j - 1;
  if (tail > 0) m.middleRows(j, tail) = m.bottomRows(tail).eval();
  m.conservativeResize(m.rows() - 1, Eigen::NoChange);
}

void erase_col(Eigen::MatrixXd& m, Eigen::Index j) {
  const Eigen::Index tail = m.cols() - j - 1;
  if (tail > 0) m.middleCols(j, tail) = m.rightCols(tail).eval();
  m.conservativeResize(Eigen::NoChange, m.cols() - 1);
}

void erase_entry(Eigen::VectorXd& v, Eigen::Index j) {
  const Eigen::Index tail = v.size() - j - 1;
  if (tail > 0) v.segment(j, tail) = v.tail(tail).eval();
  v.conservativeResize(v.size() - 1);
}

}  // namespace

SplitCandidate split_candidate(const VariationalState& state,
                               const GradientEstimatorState& est, int k,
                               long t, std::uint64_t seed,
                               bool cluster_proportions) {
  if (k < 0 || k >= state.K)
    throw std::out_of_range("split_candidate: factor index out of range");
  const Eigen::Index n_obs = state.observations();
  const Eigen::Index m = state.features();
  const double rho = split_rate(t);

  Eigen::MatrixXd local_means(n_obs, m);
  for (Eigen::Index n = 0; n < n_obs; ++n)
    local_means.row(n) = state.lam_xbar_mean[n].row(k);
  const TwoMeans clusters = two_means(local_means);

  SplitCandidate out;
  out.state = state;
  out.estimator = est;
  append_factor_copy(out.state, k);
  append_accumulator_copy(out.estimator, k, state.K);
  const int k_new = state.K;
  VariationalState& s = out.state;

  // Share of factor k's proportions kept by k'.
  Eigen::VectorXd share = Eigen::VectorXd::Constant(n_obs, rho);
  if (cluster_proportions && clusters.ok)
    for (Eigen::Index n = 0; n < n_obs; ++n)
      share[n] = clusters.labels[n] == 0 ? 1.0 - rho : rho;
  const Eigen::VectorXd original = state.lam_pi.col(k);
  s.lam_pi.col(k) = original.cwiseProduct(share).cwiseMax(kParamFloor);
  s.lam_pi.col(k_new) =
      original.cwiseProduct((1.0 - share.array()).matrix()).cwiseMax(kParamFloor);
  const double beta_share =
      n_obs > 0 ? original.cwiseProduct(share).sum() / original.sum() : rho;
  s.lam_beta[k] = std::max(beta_share * state.lam_beta[k], kParamFloor);
  s.lam_beta[k_new] = std::max((1.0 - beta_share) * state.lam_beta[k], kParamFloor);

  if (clusters.ok) {
    s.lam_mu_mean.row(k) = clusters.centers.row(0);
    s.lam_mu_mean.row(k_new) = clusters.centers.row(1);
  } else {
    out.noise_fallback = true;
    Rng rng = substream(seed, {stream::kSplit, static_cast<std::uint64_t>(t),
                               static_cast<std::uint64_t>(k)});
    std::normal_distribution<double> noise(0.0, 1e-3);
    for (Eigen::Index j = 0; j < m; ++j) s.lam_mu_mean(k_new, j) += noise(rng);
  }
  // Assignment-aware splits move the minority child's local mean onto its
  // factor mean and compensate in the majority child so that the mixture
  // sum_k E[pi_nk] xbar_nk is unchanged.
  if (cluster_proportions && clusters.ok && rho < 0.5) {
    for (Eigen::Index n = 0; n < n_obs; ++n) {
      const bool kept = clusters.labels[n] == 0;
      const int minor = kept ? k_new : k;
      const int major = kept ? k : k_new;
      const double w_major = kept ? share[n] : 1.0 - share[n];
      const double w_minor = 1.0 - w_major;
      Eigen::MatrixXd& x = s.lam_xbar_mean[n];
      const Eigen::RowVectorXd old = state.lam_xbar_mean[n].row(k);
      x.row(minor) = s.lam_mu_mean.row(minor);
      x.row(major) = (old - w_minor * s.lam_mu_mean.row(minor)) / w_major;
    }
  }
  out.cluster = clusters.labels;
  return out;
}

MergeCandidate merge_candidate(const VariationalState& state,
                               const GradientEstimatorState& est, int a,
                               int b) {
  if (a == b) throw std::invalid_argument("merge_candidate: identical factors");
  if (a < 0 || b < 0 || a >= state.K || b >= state.K)
    throw std::out_of_range("merge_candidate: factor index out of range");
  const int keep = std::min(a, b);
  const int drop = std::max(a, b);
  MergeCandidate out{state, est, keep};
  VariationalState& s = out.state;
  GradientEstimatorState& e = out.estimator;

  const double wa = state.lam_beta[keep];
  const double wb = state.lam_beta[drop];
  const double wsum = wa + wb;
  s.lam_beta[keep] = wsum;
  s.lam_mu_mean.row(keep) =
      (wa * state.lam_mu_mean.row(keep) + wb * state.lam_mu_mean.row(drop)) / wsum;
  s.lam_sigma_nu[keep] =
      (wa * state.lam_sigma_nu[keep] + wb * state.lam_sigma_nu[drop]) / wsum;
  s.lam_sigma_psi[keep] =
      (wa * state.lam_sigma_psi[keep] + wb * state.lam_sigma_psi[drop]) / wsum;
  e.acc_beta[keep] = (wa * est.acc_beta[keep] + wb * est.acc_beta[drop]) / wsum;

  for (Eigen::Index n = 0; n < state.observations(); ++n) {
    const double pa = state.lam_pi(n, keep);
    const double pb = state.lam_pi(n, drop);
    const double psum = pa + pb;
    s.lam_pi(n, keep) = psum;
    auto blend = [&](const Eigen::MatrixXd& src, Eigen::MatrixXd& dst) {
      dst.row(keep) = (pa * src.row(keep) + pb * src.row(drop)) / psum;
    };
    blend(state.lam_xbar_mean[n], s.lam_xbar_mean[n]);
    blend(state.lam_xbar_scale[n], s.lam_xbar_scale[n]);
    blend(est.acc_xbar_mean[n], e.acc_xbar_mean[n]);
    blend(est.acc_xbar_scale[n], e.acc_xbar_scale[n]);
    e.acc_pi(n, keep) = (pa * est.acc_pi(n, keep) + pb * est.acc_pi(n, drop)) / psum;
  }

  erase_entry(s.lam_beta, drop);
  erase_col(s.lam_pi, drop);
  erase_row(s.lam_mu_mean, drop);
  erase_entry(s.lam_sigma_nu, drop);
  s.lam_sigma_psi.erase(s.lam_sigma_psi.begin() + drop);
  for (auto& x : s.lam_xbar_mean) erase_row(x, drop);
  for (auto& x : s.lam_xbar_scale) erase_row(x, drop);
  erase_entry(e.acc_beta, drop);
  erase_col(e.acc_pi, drop);
  for (auto& x : e.acc_xbar_mean) erase_row(x, drop);
  for (auto& x : e.acc_xbar_scale) erase_row(x, drop);
  s.K -= 1;
  return out;
}

std::vector<MergePair> merge_shortlist(const VariationalState& state) {
  std::vector<MergePair> pairs;
  const Eigen::Index n_obs = state.observations();
  if (state.K < 2 || n_obs < 2) return pairs;
  const Eigen::MatrixXd pi = state.expected_pi();
  const Eigen::MatrixXd centered = pi.rowwise() - pi.colwise().mean();
  const Eigen::MatrixXd cov =
      (centered.transpose() * centered) / static_cast<double>(n_obs - 1);
  for (int a = 0; a < state.K; ++a)
    for (int b = a + 1; b < state.K; ++b)
      if (cov(a, b) > 0.0) pairs.push_back({a, b, cov(a, b)});
  std::stable_sort(pairs.begin(), pairs.end(),
                   [](const MergePair& x, const MergePair& y) {
                     return x.covariance > y.covariance;
                   });
  return pairs;
}

void trial_iteration(const Hyperparameters& hp, const Dataset& data,
                     VariationalState& candidate, GradientEstimatorState& est,
                     const FitOptions& opts, std::vector<FitWarning>& warnings) {
  run_iteration(hp, data, candidate, est, opts, warnings);
  candidate.check_invariants();
}

namespace {

using Stage = NonparametricProgress::Stage;

struct Engine {
  const Hyperparameters& hp;
  const Dataset& data;
  const FitOptions& opts;
  const CheckpointSink& sink;
  Checkpoint cp;

  double elbo_of(const VariationalState& s) const {
    return evaluation_elbo(hp, data, s, opts);
  }

  bool out_of_budget() const { return cp.report.iterations >= opts.max_iters; }

  void save() {
    if (sink && opts.checkpoint_every > 0) sink(cp);
  }

  // Runs batch iterations; true when the batch met the single-hit rule.
  bool run_batch() {
    while (cp.progress.batch_iters < opts.batch_max_iters && !out_of_budget()) {
      run_iteration(hp, data, cp.state, cp.estimator, opts, cp.report.warnings);
      cp.state.check_invariants();
      ++cp.report.iterations;
      ++cp.progress.batch_iters;
      const double value = elbo_of(cp.state);
      cp.report.elbo_trace.push_back(value);
      const double change = cp.monitor.observe(value);
      if (opts.checkpoint_every > 0 &&
          cp.report.iterations % opts.checkpoint_every == 0)
        save();
      if (change < opts.delta && cp.progress.batch_iters >= opts.min_iters)
        return true;
    }
    return false;
  }

  void accept(VariationalState state, GradientEstimatorState est, double value) {
    cp.state = std::move(state);
    cp.estimator = std::move(est);
    ++cp.report.iterations;
    cp.report.elbo_trace.push_back(value);
    cp.monitor.reset_counter();
    cp.monitor.last_elbo = value;
    cp.progress.accepted_this_round = true;
  }

  void merge_phase() {
    const auto shortlist = merge_shortlist(cp.state);
    double base = elbo_of(cp.state);
    // Current index of each factor present at the start of the phase; -1
    // once it has been merged away or into.
    std::vector<int> where(cp.state.K);
    std::iota(where.begin(), where.end(), 0);
    std::vector<bool> touched(cp.state.K, false);
    for (const auto& pair : shortlist) {
      if (out_of_budget()) return;
      if (touched[pair.a] || touched[pair.b]) continue;
      const int a = where[pair.a];
      const int b = where[pair.b];
      MergeCandidate cand = merge_candidate(cp.state, cp.estimator, a, b);
      std::vector<FitWarning> warnings;
      trial_iteration(hp, data, cand.state, cand.estimator, opts, warnings);
      const double value = elbo_of(cand.state);
      MoveRecord rec;
      rec.kind = MoveRecord::Kind::kMerge;
      rec.factors = {a, b};
      rec.elbo_before = base;
      rec.elbo_after = value;
      rec.accepted = value > base;
      rec.iteration = cp.estimator.t;
      cp.report.moves.push_back(rec);
      if (!rec.accepted) continue;
      cp.report.warnings.insert(cp.report.warnings.end(), warnings.begin(),
                                warnings.end());
      accept(std::move(cand.state), std::move(cand.estimator), value);
      base = value;
      touched[pair.a] = touched[pair.b] = true;
      const int dropped = std::max(a, b);
      for (auto& w : where)
        if (w > dropped) --w;
    }
  }

  void split_phase() {
    const int k_start = cp.state.K;
    std::vector<int> order(k_start);
    std::iota(order.begin(), order.end(), 0);
    Rng rng = substream(opts.seed, {stream::kOrder,
                                    static_cast<std::uint64_t>(cp.progress.round)});
    std::shuffle(order.begin(), order.end(), rng);
    double base = elbo_of(cp.state);
    for (int k : order) {
      if (out_of_budget()) return;
      SplitCandidate cand =
          split_candidate(cp.state, cp.estimator, k, cp.estimator.t, opts.seed,
                          opts.cluster_split_proportions);
      std::vector<FitWarning> warnings;
      trial_iteration(hp, data, cand.state, cand.estimator, opts, warnings);
      const double value = elbo_of(cand.state);
      MoveRecord rec;
      rec.kind = MoveRecord::Kind::kSplit;
      rec.factors = {k, cand.state.K - 1};
      rec.elbo_before = base;
      rec.elbo_after = value;
      rec.accepted = value > base;
      rec.iteration = cp.estimator.t;
      rec.noise_fallback = cand.noise_fallback;
      cp.report.moves.push_back(rec);
      if (!rec.accepted) continue;
      cp.report.warnings.insert(cp.report.warnings.end(), warnings.begin(),
                                warnings.end());
      accept(std::move(cand.state), std::move(cand.estimator), value);
      base = value;
    }
  }

  void run() {
    while (cp.progress.stage != Stage::kDone) {
      switch (cp.progress.stage) {
        case Stage::kBatch: {
          cp.progress.batch_converged = run_batch();
          cp.progress.stage = Stage::kMerge;
          save();
          break;
        }
        case Stage::kMerge:
          if (opts.merges) merge_phase();
          cp.progress.stage = Stage::kSplit;
          save();
          break;
        case Stage::kSplit: {
          if (opts.splits) split_phase();
          const bool settled = !cp.progress.accepted_this_round && cp.progress.batch_converged;
          ++cp.progress.round;
          cp.progress.accepted_this_round = false;
          cp.progress.batch_iters = 0;
          if (settled) {
            cp.report.converged = true;
            cp.progress.stage = Stage::kDone;
          } else if (out_of_budget() || cp.progress.round >= opts.max_rounds) {
            cp.progress.stage = Stage::kDone;
          } else {
            cp.progress.stage = Stage::kBatch;
          }
          save();
          break;
        }
        case Stage::kDone: break;
      }
    }
  }
};

}  // namespace

FitResult fit_nonparametric(const Hyperparameters& hp, const Dataset& data,
                            int K0, const FitOptions& opts,
                            const CheckpointSink& sink,
                            const Checkpoint* resume) {
  Engine engine{hp, data, opts, sink, {}};
  Checkpoint& cp = engine.cp;
  if (resume) {
    cp = *resume;
  } else {
    cp.state = initialize(hp, data, K0, true, opts.seed);
    cp.estimator = GradientEstimatorState::zeros_like(cp.state);
    cp.report.mode = "nonparametric";
    cp.report.seed = opts.seed;
    cp.report.initial_k = K0;
    const double value = engine.elbo_of(cp.state);
    cp.report.elbo_trace.push_back(value);
    cp.monitor.observe(value);
  }
  // Stopping rules come from the current options, also when resuming.
  cp.monitor.delta = opts.delta;
  cp.monitor.min_iters = opts.min_iters;
  cp.monitor.max_iters = opts.max_iters;
  engine.run();
  return {std::move(cp.state), std::move(cp.report)};
}

}  // namespace ndm
