#include "coslas/measurement.hpp"

#include <cmath>

namespace coslas {

ExchangeSchedule uniform_schedule(double start, int k_ij, int k_ji,
                                  double spacing) {
  ExchangeSchedule s;
  s.s_i_to_j.resize(k_ij);
  s.s_j_to_i.resize(k_ji);
  for (int k = 0; k < k_ij; ++k) s.s_i_to_j[k] = start + k * spacing;
  // reverse direction interleaved half a slot later
  for (int k = 0; k < k_ji; ++k) s.s_j_to_i[k] = start + (k + 0.5) * spacing;
  return s;
}

TimestampBlock simulate_exchange(const AgentState& state_i,
                                 const AgentState& state_j,
                                 const ExchangeSchedule& schedule,
                                 double sigma_v, RngStream& rng) {
  const ClockParams ci = state_to_params(state_i.clock);
  const ClockParams cj = state_to_params(state_j.clock);
  const double d = (state_i.loc.p - state_j.loc.p).norm();
  const double tof = d / kSpeedOfLight;

  TimestampBlock block;
  const int k_ij = static_cast<int>(schedule.s_i_to_j.size());
  const int k_ji = static_cast<int>(schedule.s_j_to_i.size());
  block.y_i_to_j.resize(k_ij);
  block.ytilde_i_to_j.resize(k_ij);
  block.y_j_to_i.resize(k_ji);
  block.ytilde_j_to_i.resize(k_ji);

  for (int k = 0; k < k_ij; ++k) {
    const double s = schedule.s_i_to_j[k];
    const double r = s + tof + sigma_v * rng.normal();
    block.ytilde_i_to_j[k] = clock_read(s, ci);
    block.y_i_to_j[k] = clock_read(r, cj);
  }
  for (int k = 0; k < k_ji; ++k) {
    const double s = schedule.s_j_to_i[k];
    const double r = s + tof + sigma_v * rng.normal();
    block.ytilde_j_to_i[k] = clock_read(s, cj);
    block.y_j_to_i[k] = clock_read(r, ci);
  }
  return block;
}

double psi_forward(const ClockState& theta_i, const ClockState& theta_j,
                   double d, double stamp_i) {
  const ClockParams pi = state_to_params(theta_i);
  const ClockParams pj = state_to_params(theta_j);
  return ((stamp_i - pi.beta) / pi.alpha + d / kSpeedOfLight) * pj.alpha +
         pj.beta;
}

LikelihoodMatrices build_matrices(const TimestampBlock& block) {
  const int k_ij = block.k_ij();
  const int k_ji = block.k_ji();
  const int m = k_ij + k_ji;
  LikelihoodMatrices out;
  out.A.resize(m, 2);
  out.B.resize(m, 2);
  out.a_d = Eigen::VectorXd::Constant(m, -1.0 / kSpeedOfLight);
  for (int k = 0; k < k_ij; ++k) {
    out.A(k, 0) = 1.0;
    out.A(k, 1) = -block.ytilde_i_to_j[k];
    out.B(k, 0) = -1.0;
    out.B(k, 1) = block.y_i_to_j[k];
  }
  for (int k = 0; k < k_ji; ++k) {
    out.A(k_ij + k, 0) = -1.0;
    out.A(k_ij + k, 1) = block.y_j_to_i[k];
    out.B(k_ij + k, 0) = 1.0;
    out.B(k_ij + k, 1) = -block.ytilde_j_to_i[k];
  }
  return out;
}

double exact_loglikelihood(const TimestampBlock& block,
                           const ClockState& theta_i,
                           const ClockState& theta_j, double d,
                           double sigma_v) {
  const ClockParams pi = state_to_params(theta_i);
  const ClockParams pj = state_to_params(theta_j);
  const double log_g =
      -block.k_ij() * std::log(std::sqrt(2.0 * M_PI) * pj.alpha * sigma_v) -
      block.k_ji() * std::log(std::sqrt(2.0 * M_PI) * pi.alpha * sigma_v);

  double ssq_ij = 0.0;
  for (int k = 0; k < block.k_ij(); ++k) {
    const double psi =
        psi_forward(theta_i, theta_j, d, block.ytilde_i_to_j[k]);
    const double r = block.y_i_to_j[k] - psi;
    ssq_ij += r * r;
  }
  double ssq_ji = 0.0;
  for (int k = 0; k < block.k_ji(); ++k) {
    const double psi =
        psi_forward(theta_j, theta_i, d, block.ytilde_j_to_i[k]);
    const double r = block.y_j_to_i[k] - psi;
    ssq_ji += r * r;
  }
  return log_g - ssq_ij / (2.0 * pj.alpha * pj.alpha * sigma_v * sigma_v) -
         ssq_ji / (2.0 * pi.alpha * pi.alpha * sigma_v * sigma_v);
}

double approx_loglikelihood(const TimestampBlock& block,
                            const ClockState& theta_i,
                            const ClockState& theta_j, double d,
                            double sigma_v) {
  const LikelihoodMatrices m = build_matrices(block);
  const Eigen::VectorXd resid =
      m.A * theta_i.vec() + m.B * theta_j.vec() + m.a_d * d;
  return -resid.squaredNorm() / (2.0 * sigma_v * sigma_v);
}

}  // namespace coslas
