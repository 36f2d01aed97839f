#include "coslas/models.hpp"

#include <stdexcept>

namespace coslas {

double clock_read(double t, const ClockParams& params) {
  return params.alpha * t + params.beta;
}

double clock_invert(double local, const ClockParams& params) {
  return (local - params.beta) / params.alpha;
}

ClockState params_to_state(const ClockParams& params) {
  if (!(params.alpha > 0.0)) {
    throw std::domain_error("params_to_state: alpha must be positive");
  }
  return {params.beta / params.alpha, 1.0 / params.alpha};
}

ClockParams state_to_params(const ClockState& state) {
  if (!(state.lambda > 0.0)) {
    throw std::domain_error("state_to_params: lambda must be positive");
  }
  const double alpha = 1.0 / state.lambda;
  return {alpha, alpha * state.nu};
}

ClockState evolve_clock(const ClockState& prev, const EvolutionParams& params,
                        RngStream& rng) {
  ClockState next = prev;
  next.nu += params.sigma1 * rng.normal();
  next.lambda += params.sigma2 * rng.normal();
  return next;
}

void kinematic_matrices(double T, Eigen::Matrix4d& g1, Eigen::Matrix4d& g2) {
  const Eigen::Matrix2d i2 = Eigen::Matrix2d::Identity();
  g1.setIdentity();
  g1.topRightCorner<2, 2>() = T * i2;
  g2.setZero();
  g2.topLeftCorner<2, 2>() = (T * T * T / 3.0) * i2;
  g2.topRightCorner<2, 2>() = (T * T / 2.0) * i2;
  g2.bottomLeftCorner<2, 2>() = (T * T / 2.0) * i2;
  g2.bottomRightCorner<2, 2>() = T * i2;
}

LocationState evolve_location(const LocationState& prev,
                              const EvolutionParams& params, RngStream& rng) {
  Eigen::Matrix4d g1, g2;
  kinematic_matrices(params.T, g1, g2);
  Eigen::Vector4d z;
  for (int i = 0; i < 4; ++i) z[i] = rng.normal();
  const Eigen::Matrix4d sigma = params.sigma_u2 * params.sigma_u2 * g2;
  // Sigma_u2 is PSD, not PD (rank drops as T -> 0); LDLT handles that.
  Eigen::LDLT<Eigen::Matrix4d> ldlt(sigma);
  Eigen::Vector4d noise = Eigen::Vector4d::Zero();
  if (sigma.trace() > 0.0) {
    const Eigen::Matrix4d l = ldlt.matrixL();
    Eigen::Vector4d d = ldlt.vectorD().cwiseMax(0.0).cwiseSqrt();
    noise = ldlt.transpositionsP().transpose() * (l * d.asDiagonal() * z);
  }
  return LocationState::from_vec(g1 * prev.vec() + noise);
}

AgentState sample_prior(const PriorSpec& spec, RngStream& clock_rng,
                        RngStream& loc_rng) {
  AgentState s;
  if (spec.pinned_clock) {
    s.clock = ClockState::from_vec(*spec.pinned_clock);
  } else {
    s.clock.nu = spec.clock_mean[0] + spec.sigma_nu * clock_rng.normal();
    s.clock.lambda = spec.clock_mean[1] + spec.sigma_lambda * clock_rng.normal();
  }
  if (spec.pinned_loc) {
    s.loc = LocationState::from_vec(*spec.pinned_loc);
  } else {
    Eigen::Vector4d v = spec.loc_mean;
    v[0] += spec.sigma_x * loc_rng.normal();
    v[1] += spec.sigma_x * loc_rng.normal();
    v[2] += spec.sigma_xdot * loc_rng.normal();
    v[3] += spec.sigma_xdot * loc_rng.normal();
    s.loc = LocationState::from_vec(v);
  }
  return s;
}

}  // namespace coslas
