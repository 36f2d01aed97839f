#include "coslas/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <mutex>
#include <thread>

namespace coslas {

std::string mode_name(Mode mode) {
  switch (mode) {
    case Mode::Coslas:
      return "coslas";
    case Mode::ClkRef:
      return "clkref";
    case Mode::LocRef:
      return "locref";
  }
  return "coslas";
}

ScenarioConfig default_scenario() {
  ScenarioConfig cfg;
  cfg.layout = {
      {{0.0, 0.0}, {0.0, 0.0}},    // anchors in three corners
      {{50.0, 0.0}, {0.0, 0.0}},
      {{0.0, 50.0}, {0.0, 0.0}},
      {{15.0, 10.0}, {0.6, 0.4}},  // mobile agents
      {{35.0, 12.0}, {-0.3, 0.5}},
      {{25.0, 25.0}, {0.4, -0.3}},
      {{12.0, 35.0}, {0.5, 0.3}},  // temporal reference
      {{38.0, 35.0}, {-0.4, -0.2}},
      {{28.0, 45.0}, {0.2, -0.5}},
  };
  return cfg;
}

namespace {
void require(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw ConfigError(field + ": " + what);
}
}  // namespace

void validate(const ScenarioConfig& cfg) {
  require(cfg.agents >= 2, "agents", "need at least 2 agents");
  require(static_cast<int>(cfg.layout.size()) == cfg.agents, "layout",
          "must list one entry per agent");
  for (int id : cfg.spatial_refs) {
    require(id >= 1 && id <= cfg.agents, "spatial_refs", "agent id out of range");
  }
  for (int id : cfg.temporal_refs) {
    require(id >= 1 && id <= cfg.agents, "temporal_refs",
            "agent id out of range");
  }
  require(!cfg.temporal_refs.empty(), "temporal_refs",
          "need at least one temporal reference");
  require(cfg.T > 0, "T", "must be positive");
  require(cfg.sigma1 > 0, "sigma1", "must be positive");
  require(cfg.sigma2 > 0, "sigma2", "must be positive");
  require(cfg.sigma_u2 > 0, "sigma_u2", "must be positive");
  require(cfg.sigma_nu > 0, "sigma_nu", "must be positive");
  require(cfg.sigma_lambda > 0, "sigma_lambda", "must be positive");
  require(cfg.sigma_x > 0, "sigma_x", "must be positive");
  require(cfg.sigma_xdot > 0, "sigma_xdot", "must be positive");
  require(cfg.comm_radius > 0, "comm_radius", "must be positive");
  require(cfg.K >= 1, "K", "must be at least 1");
  require(cfg.sigma_v >= 0, "sigma_v", "must be nonnegative");
  require(cfg.particles >= 100, "particles", "budget must be at least 100");
  require(cfg.tau > 0, "tau", "must be positive");
  require(cfg.tau1 > 0, "tau1", "must be positive");
  require(cfg.tau2 > 0, "tau2", "must be positive");
  require(cfg.sigma_d > 0, "sigma_d", "must be positive");
  require(cfg.Q >= 1, "Q", "must be at least 1");
  require(cfg.runs >= 1, "runs", "must be at least 1");
  require(cfg.steps >= 1, "steps", "must be at least 1");
  require(cfg.area_max > cfg.area_min, "area", "empty area");
  require(cfg.max_speed >= 0, "max_speed", "must be nonnegative");
  require(cfg.threads >= 0, "threads", "must be nonnegative");
}

Topology build_connectivity(const std::vector<Eigen::Vector2d>& positions,
                            double radius) {
  const int n = static_cast<int>(positions.size());
  Topology topo;
  topo.neighborhoods.resize(n);
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      if ((positions[i] - positions[j]).norm() <= radius) {
        topo.edges.emplace_back(i, j);
        topo.neighborhoods[i].push_back(j);
        topo.neighborhoods[j].push_back(i);
      }
    }
  }
  return topo;
}

std::vector<char> check_initialization_reach(
    const Topology& topo, const std::vector<int>& temporal_refs0) {
  const int n = static_cast<int>(topo.neighborhoods.size());
  std::vector<char> reach(n, 0);
  std::deque<int> queue;
  for (int r : temporal_refs0) {
    if (r >= 0 && r < n && !reach[r]) {
      reach[r] = 1;
      queue.push_back(r);
    }
  }
  while (!queue.empty()) {
    const int u = queue.front();
    queue.pop_front();
    for (int v : topo.neighborhoods[u]) {
      if (!reach[v]) {
        reach[v] = 1;
        queue.push_back(v);
      }
    }
  }
  return reach;
}

namespace {

std::vector<int> zero_based(const std::vector<int>& ids) {
  std::vector<int> out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(id - 1);
  return out;
}

bool contains(const std::vector<int>& v, int x) {
  return std::find(v.begin(), v.end(), x) != v.end();
}

void reflect(double& p, double& v, double lo, double hi) {
  // fold the position back into [lo, hi], flipping the velocity each bounce
  for (int guard = 0; guard < 64 && (p < lo || p > hi); ++guard) {
    if (p < lo) {
      p = 2.0 * lo - p;
      v = -v;
    } else if (p > hi) {
      p = 2.0 * hi - p;
      v = -v;
    }
  }
  p = std::clamp(p, lo, hi);
}

}  // namespace

std::vector<int> q_slots(const ScenarioConfig& cfg, int n) {
  if (n == 0) return {0};
  if (!cfg.per_iteration_metrics) return {cfg.Q};
  std::vector<int> qs(cfg.Q + 1);
  for (int q = 0; q <= cfg.Q; ++q) qs[q] = q;
  return qs;
}

ScenarioTruth generate_truth(const ScenarioConfig& cfg) {
  const std::vector<int> trefs = zero_based(cfg.temporal_refs);
  const std::vector<int> srefs = zero_based(cfg.spatial_refs);
  ScenarioTruth truth;
  truth.steps.resize(cfg.steps + 1);

  StepTruth& init = truth.steps[0];
  init.theta.resize(cfg.agents);
  init.x.resize(cfg.agents);
  for (int i = 0; i < cfg.agents; ++i) {
    PriorSpec spec;
    spec.clock_mean = Eigen::Vector2d(0.0, 1.0);
    spec.sigma_nu = cfg.sigma_nu;
    spec.sigma_lambda = cfg.sigma_lambda;
    Eigen::Vector4d loc;
    loc << cfg.layout[i].p, cfg.layout[i].v;
    // initial locations come from the layout; only clocks are drawn
    spec.pinned_loc = loc;
    if (contains(trefs, i)) spec.pinned_clock = Eigen::Vector2d(0.0, 1.0);
    RngStream clock_rng(cfg.seed, {kGroundTruthRun,
                                   static_cast<std::uint64_t>(i), 0,
                                   Draw::PriorClock});
    RngStream loc_rng(cfg.seed, {kGroundTruthRun,
                                 static_cast<std::uint64_t>(i), 0,
                                 Draw::PriorLocation});
    const AgentState s = sample_prior(spec, clock_rng, loc_rng);
    init.theta[i] = s.clock.vec();
    init.x[i] = s.loc.vec();
  }

  EvolutionParams evo{cfg.sigma1, cfg.sigma2, cfg.sigma_u2, cfg.T};
  for (int n = 1; n <= cfg.steps; ++n) {
    StepTruth& cur = truth.steps[n];
    const StepTruth& prev = truth.steps[n - 1];
    cur.theta.resize(cfg.agents);
    cur.x.resize(cfg.agents);
    for (int i = 0; i < cfg.agents; ++i) {
      if (contains(trefs, i)) {
        cur.theta[i] = Eigen::Vector2d(0.0, 1.0);
      } else {
        RngStream rng(cfg.seed, {kGroundTruthRun,
                                 static_cast<std::uint64_t>(i),
                                 static_cast<std::uint64_t>(n),
                                 Draw::ClockEvolution});
        cur.theta[i] =
            evolve_clock(ClockState::from_vec(prev.theta[i]), evo, rng).vec();
      }
      if (contains(srefs, i)) {
        cur.x[i] = prev.x[i];
      } else {
        RngStream rng(cfg.seed, {kGroundTruthRun,
                                 static_cast<std::uint64_t>(i),
                                 static_cast<std::uint64_t>(n),
                                 Draw::LocationEvolution});
        Eigen::Vector4d x =
            evolve_location(LocationState::from_vec(prev.x[i]), evo, rng).vec();
        if (cfg.reflect_at_bounds) {
          reflect(x[0], x[2], cfg.area_min, cfg.area_max);
          reflect(x[1], x[3], cfg.area_min, cfg.area_max);
        }
        if (cfg.max_speed > 0.0) {
          const double speed = x.tail<2>().norm();
          if (speed > cfg.max_speed) x.tail<2>() *= cfg.max_speed / speed;
        }
        cur.x[i] = x;
      }
    }
  }
  return truth;
}

namespace {

struct RunWorkspace {
  const ScenarioConfig* cfg;
  const ScenarioTruth* truth;
  EngineConfig engine;
  std::vector<int> trefs, srefs;
};

AgentEst record_estimate(const AgentBeliefs& b, bool with_beliefs) {
  AgentEst est;
  const Estimates e = estimate(b);
  est.theta_hat = e.theta_hat;
  est.x_hat = e.x_hat;
  est.alpha_hat = e.alpha_hat;
  est.beta_hat = e.beta_hat;
  est.btheta_trace = trace_of_cov(b.b_theta);
  est.bx_trace = trace_of_cov(moment_match_mixture(b.b_x));
  if (with_beliefs) {
    est.belief_theta_rec = serialize_message(Message(b.b_theta));
    est.belief_x_rec = serialize_message(Message(b.b_x));
  }
  return est;
}

RunTrace simulate_one_run(const RunWorkspace& ws, int run) {
  const ScenarioConfig& cfg = *ws.cfg;
  const ScenarioTruth& truth = *ws.truth;
  RunTrace trace;
  trace.est.resize(cfg.steps + 1);
  trace.comm_reals.assign(cfg.steps + 1,
                          std::vector<int>(cfg.agents, 0));

  // n = 0: beliefs are the priors; references and mode pins are exact
  std::vector<AgentBeliefs> beliefs(cfg.agents);
  for (int i = 0; i < cfg.agents; ++i) {
    const bool pin_clock =
        cfg.mode == Mode::ClkRef || contains(ws.trefs, i);
    const bool pin_loc = cfg.mode == Mode::LocRef || contains(ws.srefs, i);
    if (pin_clock) {
      beliefs[i].b_theta = pinned_clock_belief(truth.steps[0].theta[i],
                                               ws.engine.ref_clock_eps);
    } else {
      Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
      cov(0, 0) = cfg.sigma_nu * cfg.sigma_nu;
      cov(1, 1) = cfg.sigma_lambda * cfg.sigma_lambda;
      beliefs[i].b_theta =
          Gaussian::from_moments(Eigen::Vector2d(0.0, 1.0), cov);
    }
    if (pin_loc) {
      beliefs[i].b_x = pinned_location_belief(truth.steps[0].x[i],
                                              ws.engine.ref_pos_eps);
    } else {
      Eigen::Matrix4d cov = Eigen::Matrix4d::Zero();
      cov(0, 0) = cov(1, 1) = cfg.sigma_x * cfg.sigma_x;
      cov(2, 2) = cov(3, 3) = cfg.sigma_xdot * cfg.sigma_xdot;
      RngStream rng(cfg.seed, {static_cast<std::uint64_t>(run),
                               static_cast<std::uint64_t>(i), 0,
                               Draw::PriorLocationMean});
      Eigen::Vector4d mean = truth.steps[0].x[i];
      mean[0] += cfg.sigma_x * rng.normal();
      mean[1] += cfg.sigma_x * rng.normal();
      mean[2] += cfg.sigma_xdot * rng.normal();
      mean[3] += cfg.sigma_xdot * rng.normal();
      MixtureComponent c;
      c.weight = 1.0;
      c.g = Gaussian::from_moments(mean, cov);
      beliefs[i].b_x = GaussianMixture({c});
    }
  }
  trace.est[0].resize(1);
  trace.est[0][0].resize(cfg.agents);
  for (int i = 0; i < cfg.agents; ++i) {
    trace.est[0][0][i] = record_estimate(beliefs[i], cfg.dump_trace);
  }

  EvolutionParams evo{cfg.sigma1, cfg.sigma2, cfg.sigma_u2, cfg.T};
  const double spacing = std::max(1e-3, 1e6 * cfg.sigma_v);

  for (int n = 1; n <= cfg.steps; ++n) {
    const StepTruth& now = truth.steps[n];

    std::vector<Eigen::Vector2d> positions(cfg.agents);
    for (int i = 0; i < cfg.agents; ++i) positions[i] = now.x[i].head<2>();
    const Topology topo = build_connectivity(positions, cfg.comm_radius);
    const std::vector<char> reach =
        check_initialization_reach(topo, ws.trefs);

    // measurement phase over links whose endpoints both heard the start
    std::vector<NetworkLink> links;
    int link_idx = 0;
    for (const auto& [i, j] : topo.edges) {
      if (!reach[i] || !reach[j]) {
        ++link_idx;
        continue;
      }
      NetworkLink link;
      link.i = i;
      link.j = j;
      const double start = n * cfg.T + link_idx * 1e-4;
      const ExchangeSchedule sched =
          uniform_schedule(start, cfg.K, cfg.K, spacing);
      RngStream rng(cfg.seed, {static_cast<std::uint64_t>(run),
                               static_cast<std::uint64_t>(i),
                               static_cast<std::uint64_t>(n),
                               Draw::MeasurementNoise,
                               static_cast<std::uint64_t>(j)});
      AgentState si{ClockState::from_vec(now.theta[i]),
                    LocationState::from_vec(now.x[i])};
      AgentState sj{ClockState::from_vec(now.theta[j]),
                    LocationState::from_vec(now.x[j])};
      link.block = simulate_exchange(si, sj, sched, cfg.sigma_v, rng);
      links.push_back(std::move(link));
      ++link_idx;
    }

    std::vector<AgentRole> roles(cfg.agents);
    for (int i = 0; i < cfg.agents; ++i) {
      if (cfg.mode == Mode::ClkRef || contains(ws.trefs, i)) {
        roles[i].pinned_clock = now.theta[i];
      }
      if (cfg.mode == Mode::LocRef || contains(ws.srefs, i)) {
        roles[i].pinned_loc = now.x[i];
      }
    }

    auto& step_slots = trace.est[n];
    const std::vector<int> qs = q_slots(cfg, n);
    step_slots.resize(qs.size());

    IterationHook hook;
    if (cfg.per_iteration_metrics) {
      hook = [&](int q, const std::vector<AgentBeliefs>& bq) {
        auto& slot = step_slots[q];
        slot.resize(cfg.agents);
        for (int i = 0; i < cfg.agents; ++i) {
          slot[i] = record_estimate(bq[i], cfg.dump_trace && q == cfg.Q);
        }
      };
    }

    StepContext ctx{cfg.seed, static_cast<std::uint64_t>(run),
                    static_cast<std::uint64_t>(n)};
    const StepResult sr =
        advance_network_step(beliefs, roles, links, evo, ws.engine, ctx, hook);
    trace.max_link_payload = std::max(trace.max_link_payload, sr.max_link_payload);
    trace.comm_reals[n] = sr.comm_reals;

    if (!cfg.per_iteration_metrics) {
      auto& slot = step_slots[0];
      slot.resize(cfg.agents);
      for (int i = 0; i < cfg.agents; ++i) {
        slot[i] = record_estimate(beliefs[i], cfg.dump_trace);
      }
    }
  }
  return trace;
}

}  // namespace

ScenarioResult run_scenario(const ScenarioConfig& cfg) {
  validate(cfg);
  ScenarioResult result;
  result.truth = generate_truth(cfg);

  RunWorkspace ws;
  ws.cfg = &cfg;
  ws.truth = &result.truth;
  ws.trefs = zero_based(cfg.temporal_refs);
  ws.srefs = zero_based(cfg.spatial_refs);
  ws.engine.iterations = cfg.Q;
  ws.engine.tau = cfg.tau;
  ws.engine.tau1 = cfg.tau1;
  ws.engine.tau2 = cfg.tau2;
  ws.engine.particle_budget = cfg.particles;
  ws.engine.mu_d = cfg.mu_d;
  ws.engine.sigma_d = cfg.sigma_d;
  // the stamp noise may be zero in simulation, but the message formulas
  // divide by sigma_v^2; keep the engine's value proper
  ws.engine.sigma_v = std::max(cfg.sigma_v, 1e-12);
  ws.engine.materialize_uninformative = cfg.materialize_uninformative;

  result.runs.resize(cfg.runs);
  int workers = cfg.threads > 0
                    ? cfg.threads
                    : static_cast<int>(std::thread::hardware_concurrency());
  workers = std::clamp(workers, 1, cfg.runs);

  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&](int first, int stride) {
    for (int run = first; run < cfg.runs; run += stride) {
      try {
        result.runs[run] = simulate_one_run(ws, run);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };
  if (workers <= 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) pool.emplace_back(work, w, workers);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  for (const auto& run : result.runs) {
    result.max_link_payload =
        std::max(result.max_link_payload, run.max_link_payload);
  }
  return result;
}

Metrics compute_metrics(const ScenarioConfig& cfg, const ScenarioTruth& truth,
                        const std::vector<RunTrace>& runs) {
  const std::vector<int> srefs = zero_based(cfg.spatial_refs);
  const std::vector<int> trefs = zero_based(cfg.temporal_refs);
  Metrics metrics;
  for (int n = 0; n <= cfg.steps; ++n) {
    const std::vector<int> qs = q_slots(cfg, n);
    for (std::size_t slot = 0; slot < qs.size(); ++slot) {
      MetricsRow row;
      row.n = n;
      row.q = qs[slot];
      double sum_p = 0.0, sum_pdot = 0.0, sum_beta = 0.0, sum_alpha = 0.0;
      int count_loc = 0, count_clk = 0;
      for (const auto& run : runs) {
        const auto& slot_est = run.est[n][slot];
        for (int i = 0; i < cfg.agents; ++i) {
          const auto& est = slot_est[i];
          if (!contains(srefs, i)) {
            sum_p += (est.x_hat.head<2>() -
                      truth.steps[n].x[i].head<2>()).squaredNorm();
            sum_pdot += (est.x_hat.tail<2>() -
                         truth.steps[n].x[i].tail<2>()).squaredNorm();
            ++count_loc;
          }
          if (!contains(trefs, i)) {
            const ClockParams cp =
                state_to_params(ClockState::from_vec(truth.steps[n].theta[i]));
            const double db = est.beta_hat - cp.beta;
            const double da = est.alpha_hat - cp.alpha;
            sum_beta += db * db;
            sum_alpha += da * da;
            ++count_clk;
          }
        }
      }
      row.rmse_p = count_loc ? std::sqrt(sum_p / count_loc) : 0.0;
      row.rmse_pdot = count_loc ? std::sqrt(sum_pdot / count_loc) : 0.0;
      row.rmse_beta_us =
          count_clk ? 1e6 * std::sqrt(sum_beta / count_clk) : 0.0;
      row.rmse_alpha_ppm =
          count_clk ? 1e6 * std::sqrt(sum_alpha / count_clk) : 0.0;
      metrics.rows.push_back(row);
    }
  }
  return metrics;
}

}  // namespace coslas
