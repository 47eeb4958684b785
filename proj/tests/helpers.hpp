#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <random>
#include <string>

#include "ndm/model.hpp"
#include "ndm/vi.hpp"
#include "oracles.hpp"

namespace testing {

namespace fs = std::filesystem;

inline ndm::Hyperparameters small_hp(Eigen::Index m, double eta = 0.5) {
  ndm::Hyperparameters hp = ndm::Hyperparameters::defaults(m);
  hp.alpha = 2.0;
  hp.sigma0 = 3.0;
  hp.rho = 30.0;
  hp.eta = Eigen::VectorXd::Constant(m, eta);
  return hp;
}

inline ndm::Dataset random_data(Eigen::Index n, Eigen::Index m,
                                std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  ndm::Dataset d;
  d.y.resize(n, m);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < m; ++j) d.y(i, j) = z(gen);
  return d;
}

// A valid variational state with moderate random parameters. Inverse-Wishart
// dofs are integral so the brute-force oracle can sample them exactly.
inline ndm::VariationalState random_state(Eigen::Index n, int k, Eigen::Index m,
                                          std::uint64_t seed,
                                          bool remainder = false) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> z(0.0, 1.0);
  ndm::VariationalState s;
  s.K = k;
  s.remainder = remainder;
  s.lam_beta.resize(k + (remainder ? 1 : 0));
  for (auto& v : s.lam_beta) v = 2.0 + 4.0 * u(gen);
  s.lam_pi.resize(n, k);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) s.lam_pi(i, j) = 3.0 + 5.0 * u(gen);
  s.lam_mu_mean.resize(k, m);
  for (int j = 0; j < k; ++j)
    for (Eigen::Index c = 0; c < m; ++c) s.lam_mu_mean(j, c) = z(gen);
  s.lam_sigma_nu.resize(k);
  for (int j = 0; j < k; ++j) {
    s.lam_sigma_nu[j] = static_cast<double>(m + 4 + j);
    s.lam_sigma_psi.push_back(oracle::random_spd(m, gen) *
                              static_cast<double>(m + 2));
  }
  s.lam_p.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    s.lam_p[i] = 25.0 + 10.0 * u(gen);
    Eigen::MatrixXd mean(k, m), scale(k, m);
    for (int j = 0; j < k; ++j)
      for (Eigen::Index c = 0; c < m; ++c) {
        mean(j, c) = s.lam_mu_mean(j, c) + 0.3 * z(gen);
        scale(j, c) = 0.1 + 0.3 * u(gen);
      }
    s.lam_xbar_mean.push_back(mean);
    s.lam_xbar_scale.push_back(scale);
  }
  return s;
}

inline bool same_state(const ndm::VariationalState& a,
                       const ndm::VariationalState& b) {
  if (a.K != b.K || a.remainder != b.remainder) return false;
  if (a.lam_beta != b.lam_beta || a.lam_pi != b.lam_pi ||
      a.lam_mu_mean != b.lam_mu_mean || a.lam_sigma_nu != b.lam_sigma_nu ||
      a.lam_p != b.lam_p)
    return false;
  for (int k = 0; k < a.K; ++k)
    if (a.lam_sigma_psi[k] != b.lam_sigma_psi[k]) return false;
  for (std::size_t n = 0; n < a.lam_xbar_mean.size(); ++n)
    if (a.lam_xbar_mean[n] != b.lam_xbar_mean[n] ||
        a.lam_xbar_scale[n] != b.lam_xbar_scale[n])
      return false;
  return true;
}

// Fresh empty directory under the system temp path.
inline fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ndm_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace testing
