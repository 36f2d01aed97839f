// Command-line front end: JSON configuration, CSV metrics, NDJSON run-trace
// dump, and the flag surface.  Flags override config-file values.

#pragma once

#include <string>

#include "coslas/simulator.hpp"

namespace coslas::cli {

// Parse a JSON document into a ScenarioConfig, starting from the built-in
// defaults.  Unknown keys, type mismatches and range violations throw
// ConfigError naming the offending field.
ScenarioConfig parse_config(const std::string& json_text);

std::string metrics_csv(const ScenarioConfig& cfg, const Metrics& metrics);

void write_file(const std::string& path, const std::string& contents);

std::string trace_ndjson(const ScenarioConfig& cfg, const ScenarioResult& result);

// Full CLI flow; returns the process exit code (0 ok, 2 config error,
// 1 runtime numerical failure).
int run(int argc, const char* const* argv);

}  // namespace coslas::cli
