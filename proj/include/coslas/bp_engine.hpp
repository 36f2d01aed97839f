// Per-time-step BP computation for one agent and the bulk-synchronous
// superstep that advances a whole network: prediction, Q iterations of
// censored message passing, belief calculation, and estimation.
//
// Clock messages stay Gaussian throughout; position information travels as
// Gaussian mixtures, annulus mixtures, and weighted particle clouds that are
// refit to mixtures before transmission.

#pragma once

#include <Eigen/Dense>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "coslas/measurement.hpp"
#include "coslas/messages.hpp"
#include "coslas/models.hpp"
#include "coslas/rng.hpp"

namespace coslas {

struct EngineConfig {
  int iterations = 5;          // Q
  double tau = 2.0;            // clock censoring threshold on trace
  double tau1 = 15.0;          // position bimodality threshold
  double tau2 = 40.0;          // position informativeness threshold
  int particle_budget = 1000;  // |T| * L
  double mu_d = 27.0;          // distance prior mean, m
  double sigma_d = 10.0;       // distance prior std, m
  double sigma_v = 10e-9;      // stamp noise std, s
  double ref_clock_eps = 1e-18;
  double ref_pos_eps = 1e-12;
  double dist_var_floor = 1e-8;  // m^2, keeps 1-D messages proper
  bool materialize_uninformative = false;
};

struct AgentBeliefs {
  Gaussian b_theta;     // covariance form over ClockState
  GaussianMixture b_x;  // covariance form over LocationState, S in {1,2}
};

struct Estimates {
  Eigen::Vector2d theta_hat;
  Eigen::Vector4d x_hat;
  double alpha_hat = 1.0;
  double beta_hat = 0.0;
};

// ---- prediction ----

Gaussian predict_clock(const Gaussian& b_prev, const Eigen::Matrix2d& sigma_u1);
GaussianMixture predict_location(const GaussianMixture& b_prev,
                                 const Eigen::Matrix4d& g1,
                                 const Eigen::Matrix4d& sigma_u2);
GaussianMixture project_position(const GaussianMixture& msg_x);

// ---- iterative message passing ----

// Distance message from the timestamp factor; d is in meters.
Gaussian1 zeta_f_d(const LikelihoodMatrices& mats, const Gaussian& eta_i,
                   const Gaussian& eta_j, double sigma_v,
                   double var_floor = 0.0);

// Distance message from the position factor (linearization + moment match).
Gaussian1 zeta_phi_d(const GaussianMixture& eta_p_i,
                     const GaussianMixture& eta_p_j, double var_floor = 0.0);

// Clock message from the timestamp factor toward this agent.
Gaussian zeta_f_theta(const LikelihoodMatrices& mats,
                      const Gaussian& eta_theta_j, const Gaussian1& dist_msg,
                      double sigma_v);

// Annulus message toward this agent's position replica.
AnnulusMixture zeta_phi_p(const GaussianMixture& eta_p_j,
                          const Gaussian1& dist_msg,
                          const GaussianMixture& eta_p_i_prev);

// Outgoing clock message: prediction times all informative clock messages
// except the recipient's.
Gaussian eta_f_theta(const Gaussian& zeta_f,
                     std::span<const Gaussian* const> zeta_f_theta_others);

// One multiplicand of a position product.  Exactly one representation is set;
// annulus factors sample as neighbor-center + distance * (sin, cos) and
// evaluate through their parametric annulus form.
struct PositionFactor {
  const GaussianMixture* gm = nullptr;
  const AnnulusMixture* annulus = nullptr;
  const GaussianMixture* annulus_centers = nullptr;
  Gaussian1 annulus_radius;

  static PositionFactor mixture(const GaussianMixture& m) {
    PositionFactor f;
    f.gm = &m;
    return f;
  }
  static PositionFactor ring(const AnnulusMixture& a, const GaussianMixture& centers,
                             const Gaussian1& radius) {
    PositionFactor f;
    f.annulus = &a;
    f.annulus_centers = &centers;
    f.annulus_radius = radius;
    return f;
  }
};

struct ParticleCloud {
  std::vector<Eigen::Vector2d> pts;
  std::vector<double> w;
};

// Importance-sampled product of position factors: proposal is the sum of the
// factors, numerator their product, L = budget / #factors particles each.
ParticleCloud sample_position_product(std::span<const PositionFactor> factors,
                                      int particle_budget, RngStream& rng);

// Refit a weighted cloud to a Gaussian, a two-component mixture, or declare
// it uninformative (tau1 separates unimodal/bimodal, tau2 bounds the spread).
Message fit_particles(const ParticleCloud& cloud, double tau1, double tau2);

Message eta_phi_p_particles(std::span<const PositionFactor> factors,
                            int particle_budget, double tau1, double tau2,
                            RngStream& rng);

// Position-replica message after the final iteration: product over the full
// informative set, proposal equal to their sum; empty set is uninformative.
Message eta_psi_p(std::span<const PositionFactor> zeta_phi_factors,
                  int particle_budget, double tau1, double tau2,
                  RngStream& rng);

// Lift a position message to the 4-D state in (possibly singular)
// information form.
Message zeta_psi_x(const Message& eta_psi);

// Belief over the clock state: informative messages only; empty set falls
// back to the prediction.
Gaussian belief_theta(std::span<const Gaussian* const> zeta_list,
                      const Gaussian& prediction);

// Belief over the location state (componentwise fusion, top-2 truncation).
GaussianMixture belief_x(const Message& zeta_psi_x_msg,
                         const GaussianMixture& zeta_l);

Estimates estimate(const AgentBeliefs& beliefs);

// Reals transmitted to one neighbor in one iteration (max 16).
int comm_payload(const Message& eta_phi, const Gaussian& eta_f);

// ---- censoring ----

bool clock_message_informative(const Gaussian& msg, double tau);
bool position_message_informative(const Message& msg, double tau1, double tau2);

// ---- network superstep ----

struct AgentRole {
  std::optional<Eigen::Vector2d> pinned_clock;
  std::optional<Eigen::Vector4d> pinned_loc;
};

struct NetworkLink {
  int i = 0;
  int j = 0;
  TimestampBlock block;
};

struct StepContext {
  std::uint64_t seed = 0;
  std::uint64_t run = 0;
  std::uint64_t step = 0;
};

struct StepResult {
  int max_link_payload = 0;
  std::vector<int> comm_reals;  // per agent, whole step
};

// Invoked with q = 0 (predictions) through Q (final beliefs) when supplied.
using IterationHook =
    std::function<void(int q, const std::vector<AgentBeliefs>&)>;

// Executes one time step of the Table-III schedule for every agent, given the
// exchanges of this step's measurement phase.  Agents appearing in no link
// perform prediction only.
StepResult advance_network_step(std::vector<AgentBeliefs>& beliefs,
                                const std::vector<AgentRole>& roles,
                                const std::vector<NetworkLink>& links,
                                const EvolutionParams& evo,
                                const EngineConfig& cfg,
                                const StepContext& ctx,
                                const IterationHook& hook = {});

Gaussian pinned_clock_belief(const Eigen::Vector2d& value, double eps);
GaussianMixture pinned_location_belief(const Eigen::Vector4d& value,
                                       double eps);

}  // namespace coslas
