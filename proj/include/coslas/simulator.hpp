// Scenario orchestration: ground-truth generation shared across runs,
// time-varying connectivity, the measurement phase, per-step BP, and RMSE
// metrics over runs and nonreference agents.

#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "coslas/bp_engine.hpp"
#include "coslas/models.hpp"

namespace coslas {

enum class Mode { Coslas, ClkRef, LocRef };

std::string mode_name(Mode mode);

struct AgentInit {
  Eigen::Vector2d p = Eigen::Vector2d::Zero();
  Eigen::Vector2d v = Eigen::Vector2d::Zero();
};

struct ScenarioConfig {
  int agents = 9;
  std::vector<int> spatial_refs = {1, 2, 3};  // 1-based agent ids
  std::vector<int> temporal_refs = {7};
  std::vector<AgentInit> layout;  // defaults to the built-in layout
  double area_min = 0.0;
  double area_max = 50.0;
  bool reflect_at_bounds = true;
  // truth-trajectory containment: speed saturation for the generated
  // realization (0 disables); the filter model is unaffected
  double max_speed = 3.0;
  double T = 1.0;
  double sigma1 = 1e-6;
  double sigma2 = 10e-6;
  double sigma_u2 = 2.0;
  double sigma_nu = 1.0;
  double sigma_lambda = 150e-6;
  double sigma_x = 5.0;
  double sigma_xdot = 2.0;
  double comm_radius = 40.0;
  int K = 10;
  double sigma_v = 10e-9;
  int particles = 1000;
  double tau = 2.0;
  double tau1 = 15.0;
  double tau2 = 40.0;
  double mu_d = 27.0;
  double sigma_d = 10.0;
  int Q = 5;
  int runs = 20;
  int steps = 30;
  Mode mode = Mode::Coslas;
  std::uint64_t seed = 1;
  bool per_iteration_metrics = false;
  bool dump_trace = false;
  bool materialize_uninformative = false;
  std::string out_dir = ".";
  int threads = 0;  // 0 = hardware concurrency
};

// Built-in nine-agent scenario: three corner anchors, six mobile agents, one
// of them the temporal reference.
ScenarioConfig default_scenario();

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

void validate(const ScenarioConfig& cfg);

struct Topology {
  std::vector<std::pair<int, int>> edges;  // 0-based, i < j
  std::vector<std::vector<int>> neighborhoods;
};

Topology build_connectivity(const std::vector<Eigen::Vector2d>& positions,
                            double radius);

// Agents reachable from any temporal reference; the rest skip the
// measurement phase this step.
std::vector<char> check_initialization_reach(
    const Topology& topo, const std::vector<int>& temporal_refs0);

struct StepTruth {
  std::vector<Eigen::Vector2d> theta;  // (nu, lambda) per agent
  std::vector<Eigen::Vector4d> x;      // (p, pdot) per agent
};

struct ScenarioTruth {
  std::vector<StepTruth> steps;  // index n = 0..N
};

struct AgentEst {
  Eigen::Vector2d theta_hat = Eigen::Vector2d::Zero();
  Eigen::Vector4d x_hat = Eigen::Vector4d::Zero();
  double alpha_hat = 1.0;
  double beta_hat = 0.0;
  double btheta_trace = 0.0;
  double bx_trace = 0.0;
  std::vector<double> belief_theta_rec;  // filled when dump_trace
  std::vector<double> belief_x_rec;
};

struct RunTrace {
  // est[n][q_slot][agent]; q slots for step n are given by q_slots(cfg, n)
  std::vector<std::vector<std::vector<AgentEst>>> est;
  std::vector<std::vector<int>> comm_reals;  // [n][agent]
  int max_link_payload = 0;
};

std::vector<int> q_slots(const ScenarioConfig& cfg, int n);

struct ScenarioResult {
  ScenarioTruth truth;
  std::vector<RunTrace> runs;
  int max_link_payload = 0;
};

ScenarioTruth generate_truth(const ScenarioConfig& cfg);

ScenarioResult run_scenario(const ScenarioConfig& cfg);

struct MetricsRow {
  int n = 0;
  int q = 0;
  double rmse_p = 0.0;
  double rmse_pdot = 0.0;
  double rmse_beta_us = 0.0;
  double rmse_alpha_ppm = 0.0;
};

struct Metrics {
  std::vector<MetricsRow> rows;
};

Metrics compute_metrics(const ScenarioConfig& cfg, const ScenarioTruth& truth,
                        const std::vector<RunTrace>& runs);

}  // namespace coslas
