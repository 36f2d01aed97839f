#include "coslas/cli.hpp"

#include <CLI11.hpp>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <sstream>

namespace coslas::cli {

namespace {

using nlohmann::json;

double as_number(const json& v, const std::string& field) {
  if (!v.is_number()) throw ConfigError(field + ": expected a number");
  return v.get<double>();
}

int as_int(const json& v, const std::string& field) {
  if (!v.is_number_integer()) throw ConfigError(field + ": expected an integer");
  return v.get<int>();
}

bool as_bool(const json& v, const std::string& field) {
  if (!v.is_boolean()) throw ConfigError(field + ": expected a boolean");
  return v.get<bool>();
}

std::vector<int> as_int_list(const json& v, const std::string& field) {
  if (!v.is_array()) throw ConfigError(field + ": expected an array");
  std::vector<int> out;
  for (const auto& e : v) out.push_back(as_int(e, field));
  return out;
}

Mode parse_mode(const std::string& s, const std::string& field) {
  if (s == "coslas") return Mode::Coslas;
  if (s == "clkref") return Mode::ClkRef;
  if (s == "locref") return Mode::LocRef;
  throw ConfigError(field + ": must be one of coslas|clkref|locref");
}

}  // namespace

ScenarioConfig parse_config(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config: expected a JSON object");

  ScenarioConfig cfg = default_scenario();
  bool layout_given = false;
  for (const auto& [key, value] : doc.items()) {
    if (key == "agents") {
      cfg.agents = as_int(value, key);
    } else if (key == "spatial_refs") {
      cfg.spatial_refs = as_int_list(value, key);
    } else if (key == "temporal_refs") {
      cfg.temporal_refs = as_int_list(value, key);
    } else if (key == "layout") {
      if (!value.is_array()) throw ConfigError("layout: expected an array");
      cfg.layout.clear();
      int idx = 0;
      for (const auto& entry : value) {
        const std::string path = "layout[" + std::to_string(idx++) + "]";
        if (!entry.is_object()) throw ConfigError(path + ": expected an object");
        AgentInit init;
        for (const auto& [k2, v2] : entry.items()) {
          if (k2 == "p" || k2 == "v") {
            if (!v2.is_array() || v2.size() != 2) {
              throw ConfigError(path + "." + k2 + ": expected [x, y]");
            }
            Eigen::Vector2d vec(as_number(v2[0], path + "." + k2),
                                as_number(v2[1], path + "." + k2));
            (k2 == "p" ? init.p : init.v) = vec;
          } else {
            throw ConfigError(path + "." + k2 + ": unknown key");
          }
        }
        cfg.layout.push_back(init);
      }
      layout_given = true;
    } else if (key == "area") {
      if (!value.is_array() || value.size() != 2) {
        throw ConfigError("area: expected [min, max]");
      }
      cfg.area_min = as_number(value[0], key);
      cfg.area_max = as_number(value[1], key);
    } else if (key == "reflect_at_bounds") {
      cfg.reflect_at_bounds = as_bool(value, key);
    } else if (key == "max_speed") {
      cfg.max_speed = as_number(value, key);
    } else if (key == "T") {
      cfg.T = as_number(value, key);
    } else if (key == "sigma1") {
      cfg.sigma1 = as_number(value, key);
    } else if (key == "sigma2") {
      cfg.sigma2 = as_number(value, key);
    } else if (key == "sigma_u2") {
      cfg.sigma_u2 = as_number(value, key);
    } else if (key == "sigma_nu") {
      cfg.sigma_nu = as_number(value, key);
    } else if (key == "sigma_lambda") {
      cfg.sigma_lambda = as_number(value, key);
    } else if (key == "sigma_x") {
      cfg.sigma_x = as_number(value, key);
    } else if (key == "sigma_xdot") {
      cfg.sigma_xdot = as_number(value, key);
    } else if (key == "comm_radius") {
      cfg.comm_radius = as_number(value, key);
    } else if (key == "K") {
      cfg.K = as_int(value, key);
    } else if (key == "sigma_v") {
      cfg.sigma_v = as_number(value, key);
    } else if (key == "particles") {
      cfg.particles = as_int(value, key);
    } else if (key == "tau") {
      cfg.tau = as_number(value, key);
    } else if (key == "tau1") {
      cfg.tau1 = as_number(value, key);
    } else if (key == "tau2") {
      cfg.tau2 = as_number(value, key);
    } else if (key == "mu_d") {
      cfg.mu_d = as_number(value, key);
    } else if (key == "sigma_d") {
      cfg.sigma_d = as_number(value, key);
    } else if (key == "Q") {
      cfg.Q = as_int(value, key);
    } else if (key == "runs") {
      cfg.runs = as_int(value, key);
    } else if (key == "steps") {
      cfg.steps = as_int(value, key);
    } else if (key == "mode") {
      if (!value.is_string()) throw ConfigError("mode: expected a string");
      cfg.mode = parse_mode(value.get<std::string>(), key);
    } else if (key == "seed") {
      if (!value.is_number_integer()) {
        throw ConfigError("seed: expected an integer");
      }
      cfg.seed = value.get<std::uint64_t>();
    } else if (key == "per_iteration_metrics") {
      cfg.per_iteration_metrics = as_bool(value, key);
    } else if (key == "dump_trace") {
      cfg.dump_trace = as_bool(value, key);
    } else if (key == "materialize_uninformative") {
      cfg.materialize_uninformative = as_bool(value, key);
    } else if (key == "out_dir") {
      if (!value.is_string()) throw ConfigError("out_dir: expected a string");
      cfg.out_dir = value.get<std::string>();
    } else if (key == "threads") {
      cfg.threads = as_int(value, key);
    } else {
      throw ConfigError(key + ": unknown key");
    }
  }
  if (!layout_given && cfg.agents != static_cast<int>(cfg.layout.size())) {
    throw ConfigError("agents: no layout given for this agent count");
  }
  validate(cfg);
  return cfg;
}

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::string metrics_csv(const ScenarioConfig& cfg, const Metrics& metrics) {
  std::ostringstream out;
  out << "n,q,rmse_p_m,rmse_pdot_mps,rmse_beta_us,rmse_alpha_ppm,mode,runs,seed\n";
  for (const auto& row : metrics.rows) {
    out << row.n << ',' << row.q << ',' << format_double(row.rmse_p) << ','
        << format_double(row.rmse_pdot) << ','
        << format_double(row.rmse_beta_us) << ','
        << format_double(row.rmse_alpha_ppm) << ',' << mode_name(cfg.mode)
        << ',' << cfg.runs << ',' << cfg.seed << '\n';
  }
  return out.str();
}

void write_file(const std::string& path, const std::string& contents) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError(path + ": cannot open for writing");
  out << contents;
  if (!out) throw ConfigError(path + ": write failed");
}

std::string trace_ndjson(const ScenarioConfig& cfg,
                         const ScenarioResult& result) {
  std::ostringstream out;
  for (int run = 0; run < cfg.runs; ++run) {
    const RunTrace& trace = result.runs[run];
    for (int n = 0; n <= cfg.steps; ++n) {
      const auto& slots = trace.est[n];
      const auto& final_slot = slots.back();
      for (int i = 0; i < cfg.agents; ++i) {
        const auto& est = final_slot[i];
        json rec;
        rec["run"] = run;
        rec["n"] = n;
        rec["agent"] = i + 1;
        rec["theta_true"] = {result.truth.steps[n].theta[i][0],
                             result.truth.steps[n].theta[i][1]};
        rec["x_true"] = {result.truth.steps[n].x[i][0],
                         result.truth.steps[n].x[i][1],
                         result.truth.steps[n].x[i][2],
                         result.truth.steps[n].x[i][3]};
        rec["theta_hat"] = {est.theta_hat[0], est.theta_hat[1]};
        rec["x_hat"] = {est.x_hat[0], est.x_hat[1], est.x_hat[2], est.x_hat[3]};
        rec["alpha_hat"] = est.alpha_hat;
        rec["beta_hat"] = est.beta_hat;
        rec["btheta_trace"] = est.btheta_trace;
        rec["bx_trace"] = est.bx_trace;
        rec["comm_reals"] = trace.comm_reals[n][i];
        rec["belief_theta"] = est.belief_theta_rec;
        rec["belief_x"] = est.belief_x_rec;
        out << rec.dump() << '\n';
      }
    }
  }
  return out.str();
}

int run(int argc, const char* const* argv) {
  CLI::App app{"CoSLAS: cooperative simultaneous localization and "
               "synchronization simulator"};
  std::string config_path, mode_str, out_dir;
  int runs = -1, iterations = -1, steps = -1;
  long long seed = -1;
  bool per_iteration = false, dump_trace = false;

  app.add_option("--config", config_path, "JSON configuration file");
  app.add_option("--mode", mode_str, "coslas|clkref|locref")
      ->check(CLI::IsMember({"coslas", "clkref", "locref"}));
  app.add_option("--runs", runs, "number of simulation runs");
  app.add_option("--seed", seed, "master seed");
  app.add_option("--iterations", iterations, "message passing iterations Q");
  app.add_option("--steps", steps, "number of time steps N");
  app.add_option("--out", out_dir, "output directory");
  app.add_flag("--per-iteration-metrics", per_iteration,
               "emit metrics for every message passing iteration");
  app.add_flag("--dump-trace", dump_trace,
               "write one NDJSON record per (run, n, agent)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n" << app.help();
    return 2;
  }

  try {
    ScenarioConfig cfg = default_scenario();
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) {
        std::cerr << "config error: cannot read " << config_path << "\n";
        return 2;
      }
      std::ostringstream buf;
      buf << in.rdbuf();
      cfg = parse_config(buf.str());
    }
    if (!mode_str.empty()) cfg.mode = parse_mode(mode_str, "mode");
    if (runs >= 0) cfg.runs = runs;
    if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
    if (iterations >= 0) cfg.Q = iterations;
    if (steps >= 0) cfg.steps = steps;
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (per_iteration) cfg.per_iteration_metrics = true;
    if (dump_trace) cfg.dump_trace = true;
    if (const char* env = std::getenv("COSLAS_THREADS")) {
      cfg.threads = std::max(0, std::atoi(env));
    }
    validate(cfg);

    std::filesystem::create_directories(cfg.out_dir);
    const ScenarioResult result = run_scenario(cfg);
    const Metrics metrics = compute_metrics(cfg, result.truth, result.runs);
    write_file(cfg.out_dir + "/metrics.csv", metrics_csv(cfg, metrics));
    if (cfg.dump_trace) {
      write_file(cfg.out_dir + "/trace.ndjson", trace_ndjson(cfg, result));
    }
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace coslas::cli
