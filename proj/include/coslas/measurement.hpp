// Asymmetric time-stamped packet exchange and its likelihood quantities.
//
// All stamps are local-clock readings.  In the transformed clock state
// (nu, lambda) the residual A theta_i + B theta_j + a_d * d of one exchange is
// exactly the per-packet propagation noise, which is what makes the
// synchronization side of the problem linear-Gaussian.

#pragma once

#include <Eigen/Dense>

#include "coslas/models.hpp"
#include "coslas/rng.hpp"

namespace coslas {

inline constexpr double kSpeedOfLight = 299792458.0;  // m/s, exact

struct TimestampBlock {
  Eigen::VectorXd y_i_to_j;       // received at j, K_ij stamps
  Eigen::VectorXd y_j_to_i;       // received at i, K_ji stamps
  Eigen::VectorXd ytilde_i_to_j;  // transmitted at i
  Eigen::VectorXd ytilde_j_to_i;  // transmitted at j

  int k_ij() const { return static_cast<int>(y_i_to_j.size()); }
  int k_ji() const { return static_cast<int>(y_j_to_i.size()); }
};

struct LikelihoodMatrices {
  Eigen::MatrixXd A;    // (K_ij+K_ji) x 2, multiplies theta_i
  Eigen::MatrixXd B;    // (K_ij+K_ji) x 2, multiplies theta_j
  Eigen::VectorXd a_d;  // -(1/c) * ones
};

// True-time transmit instants for both directions of one exchange.
struct ExchangeSchedule {
  Eigen::VectorXd s_i_to_j;
  Eigen::VectorXd s_j_to_i;
};

// Interleaved uniform schedule starting at `start`; spacing must be large
// against sigma_v (the simulator enforces spacing >= max(1 ms, 1e6 sigma_v)).
ExchangeSchedule uniform_schedule(double start, int k_ij, int k_ji,
                                  double spacing);

TimestampBlock simulate_exchange(const AgentState& state_i,
                                 const AgentState& state_j,
                                 const ExchangeSchedule& schedule,
                                 double sigma_v, RngStream& rng);

// Expected receive stamp at j of a packet transmitted by i at local stamp
// `stamp_i`, for agents at distance d.
double psi_forward(const ClockState& theta_i, const ClockState& theta_j,
                   double d, double stamp_i);

LikelihoodMatrices build_matrices(const TimestampBlock& block);

// Log of the exact pairwise likelihood including the alpha-dependent
// normalizer G_ij.
double exact_loglikelihood(const TimestampBlock& block,
                           const ClockState& theta_i,
                           const ClockState& theta_j, double d,
                           double sigma_v);

// Quadratic-form approximation: -|A theta_i + B theta_j + a_d d|^2/(2 sigma_v^2),
// no normalization constant.
double approx_loglikelihood(const TimestampBlock& block,
                            const ClockState& theta_i,
                            const ClockState& theta_j, double d,
                            double sigma_v);

}  // namespace coslas
