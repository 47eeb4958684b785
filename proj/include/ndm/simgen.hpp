#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

#include "ndm/dist.hpp"
#include "ndm/model.hpp"

namespace ndm {

struct SimSpec {
  int procedure = 2;
  Domain domain = Domain::kReal;
  int K = 10;
  int N = 1000;
  int M = 20;
  double alpha0 = 1.0;
  double alpha = 10.0;
  double mu0 = 0.0;
  double sigma = 1.0;  // standard deviation of each mu_{k,m}
  Eigen::MatrixXd psi;  // empty means identity
  double nu = 0.0;      // <= 0 means M + 2
  double rho = 100.0;
  double spread_a = 3.0;  // inverse-Gamma shape for sigma_m
  double spread_b = 1.0;  // inverse-Gamma scale for sigma_m
  double mode_rate = 5.0;
  // Redraw the factor means until every pair is at least this far apart.
  double min_separation = 0.0;
  std::uint64_t seed = 0;
  bool keep_particles = false;

  Eigen::MatrixXd psi_or_identity() const;
  double nu_or_default() const;
  void validate() const;
};

struct SimOutput {
  Dataset data;  // data.truth is populated
  std::vector<std::string> warnings;
  // Debug mode only: particle features (P_n x M) and factor labels per row.
  std::vector<Eigen::MatrixXd> particles;
  std::vector<std::vector<int>> assignments;
};

// Observation family and link used for data in `domain`.
ObsFamily family_for(Domain domain);
Link link_for(Domain domain);

// Observation distribution for a latent value mu in `domain`. Beta spreads
// too wide for the mean are clamped to 0.99 sqrt(m (1 - m)) and flagged.
dist::DistParams domain_f(Domain domain, double mu, double sigma,
                          bool* clamped = nullptr);

SimOutput simulate(const SimSpec& spec);

}  // namespace ndm
