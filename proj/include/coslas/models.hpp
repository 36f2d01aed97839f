// Clock and motion models: affine local clocks, the transformed clock state
// (nu, lambda) that makes the timestamp model linear, constant-velocity
// kinematics, and the Gaussian priors the scenario draws from.

#pragma once

#include <Eigen/Dense>
#include <optional>

#include "coslas/rng.hpp"

namespace coslas {

struct ClockParams {
  double alpha = 1.0;  // clock skew, > 0
  double beta = 0.0;   // clock phase, seconds
};

// nu = beta/alpha, lambda = 1/alpha
struct ClockState {
  double nu = 0.0;
  double lambda = 1.0;

  Eigen::Vector2d vec() const { return {nu, lambda}; }
  static ClockState from_vec(const Eigen::Vector2d& v) { return {v[0], v[1]}; }
};

struct LocationState {
  Eigen::Vector2d p = Eigen::Vector2d::Zero();     // m
  Eigen::Vector2d pdot = Eigen::Vector2d::Zero();  // m/s

  Eigen::Vector4d vec() const {
    Eigen::Vector4d v;
    v << p, pdot;
    return v;
  }
  static LocationState from_vec(const Eigen::Vector4d& v) {
    return {v.head<2>(), v.tail<2>()};
  }
};

struct AgentState {
  ClockState clock;
  LocationState loc;
};

struct EvolutionParams {
  double sigma1 = 0.0;    // clock-phase walk std, s
  double sigma2 = 0.0;    // skew walk std, dimensionless
  double sigma_u2 = 0.0;  // motion noise scale, m
  double T = 1.0;         // interval length, s
};

// Position selector p = P x.
inline Eigen::Matrix<double, 2, 4> position_projection() {
  Eigen::Matrix<double, 2, 4> p = Eigen::Matrix<double, 2, 4>::Zero();
  p(0, 0) = 1.0;
  p(1, 1) = 1.0;
  return p;
}

double clock_read(double t, const ClockParams& params);
double clock_invert(double local, const ClockParams& params);

// Throw std::domain_error on non-positive alpha / lambda.
ClockState params_to_state(const ClockParams& params);
ClockParams state_to_params(const ClockState& state);

ClockState evolve_clock(const ClockState& prev, const EvolutionParams& params,
                        RngStream& rng);

// Constant-velocity transition G1 and continuous-white-noise-acceleration
// covariance shape G2 (Sigma_u2 = sigma_u2^2 * G2).
void kinematic_matrices(double T, Eigen::Matrix4d& g1, Eigen::Matrix4d& g2);

LocationState evolve_location(const LocationState& prev,
                              const EvolutionParams& params, RngStream& rng);

// Per-agent prior; pinned values take precedence over sampling (reference
// agents receive their known state exactly).
struct PriorSpec {
  Eigen::Vector2d clock_mean = Eigen::Vector2d(0.0, 1.0);
  double sigma_nu = 1.0;
  double sigma_lambda = 150e-6;
  Eigen::Vector4d loc_mean = Eigen::Vector4d::Zero();
  double sigma_x = 5.0;
  double sigma_xdot = 2.0;
  std::optional<Eigen::Vector2d> pinned_clock;
  std::optional<Eigen::Vector4d> pinned_loc;
};

AgentState sample_prior(const PriorSpec& spec, RngStream& clock_rng,
                        RngStream& loc_rng);

}  // namespace coslas
