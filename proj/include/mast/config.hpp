#pragma once

// Experiment configuration: a flat text file of `key = value` lines, keys dotted by
// namespace (model., posenc., attention., comm., env., train.). '#' starts a comment.
// Unknown keys and malformed values are rejected with the offending key named.

#include "mast/comm.hpp"
#include "mast/dan.hpp"
#include "mast/imitation.hpp"
#include "mast/network.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>

namespace mast {

class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct ExperimentConfig {
  MastConfig model;
  GraphSpec comm;
  double tau = 0.0;  // per-hop relay delay in seconds; 0 = full propagation
  DanParams env;
  std::string scenario = "clusters";
  int agents = 100;
  TrainConfig train;

  ExperimentConfig();

  /// Sets one key from its text value. Throws ConfigError naming the key.
  void set(const std::string& key, const std::string& value);
  /// Every key with its current value, one `key = value` line each, in a fixed order.
  std::string dump() const;
  /// Cross-field checks (model, training, scenario name). Throws ConfigError.
  void validate() const;
};

ExperimentConfig parse_config(const std::string& text);
/// Throws ConfigError when the file is missing or unreadable.
ExperimentConfig load_config(const std::filesystem::path& path);

/// Applies MAST_SEED from the environment to train.seed, when set.
void apply_seed_override(ExperimentConfig& cfg);

}  // namespace mast
