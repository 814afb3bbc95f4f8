#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "plate/corpus.hpp"
#include "plate/decoding.hpp"
#include "plate/distillation.hpp"
#include "plate/metrics.hpp"
#include "plate/model.hpp"

namespace plate::cli {

/// Everything a subcommand needs, resolved from defaults, an optional JSON
/// config file and command-line flags (in increasing precedence).
struct RunConfig {
  SynthConfig synth;
  ModelConfig model;
  TrainConfig train;
  BeamConfig decode;
  ReportOptions report;
  std::size_t min_freq = 1;
  std::size_t workers = 1;
  double max_failure_rate = 0.01;
  LayerSelection init = LayerSelection::first_k;
  double threshold = 0.15;
  std::size_t bins = 5;
  /// Student overrides applied on top of the teacher configuration.
  nlohmann::json student = nlohmann::json::object();
  /// Input and output locations by role ("corpus", "out", ...).
  std::map<std::string, std::string> paths;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

nlohmann::json to_json(const RunConfig& c);
/// Missing keys keep their defaults.
RunConfig run_config_from_json(const nlohmann::json& j);

/// SHA-256 over the sorted (name, file digest) pairs of a directory,
/// leaving out its manifest.json.
std::string directory_digest(const std::string& path);

/// Runs `command` on a resolved configuration, writes its manifest and
/// returns it. Throws on failure.
nlohmann::json execute(const std::string& command, const RunConfig& config);

/// Path of the manifest a run writes.
std::string manifest_path(const std::string& command, const RunConfig& config);

/// Full entry point: `args[0]` is the program name. Returns the exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace plate::cli
