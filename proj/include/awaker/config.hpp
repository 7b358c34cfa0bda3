// SPDX-License-Identifier: Apache-2.0
//
// Run configuration. A profile supplies every default; a JSON file then
// overrides any subset of
//   {profile, seed, model, adapters, routing, pretrain, stages, tasks, benchmark}.
// Seed precedence: --seed flag, then AWAKER_SEED, then the file.
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "awaker/model.hpp"
#include "awaker/routing.hpp"
#include "awaker/tasks.hpp"
#include "awaker/training.hpp"
#include "json.hpp"

namespace awaker {

struct RoutingConfig {
  RoutingMode mode = RoutingMode::shared_embedding;
  Pooling pooling = Pooling::mean;
};

struct TasksConfig {
  int min_len = 4;
  int max_len = 6;
  SplitSizes sizes;  // per task
};

struct BenchmarkConfig {
  /// Allowed relative gap between the arms' active parameter counts.
  double param_tolerance = 0.05;
  /// Baseline rank; 0 derives it from arm B's active count.
  int baseline_rank = 0;
  /// Seeds for `compare`; empty runs the config seed only.
  std::vector<std::uint64_t> seeds;
};

struct Config {
  std::string profile = "toy";
  std::uint64_t seed = 0;
  ModelConfig model;
  AdapterConfig adapters;
  RoutingConfig routing;
  PretrainConfig pretrain;
  std::array<StageConfig, 3> stages = {StageConfig::defaults(1), StageConfig::defaults(2),
                                       StageConfig::defaults(3)};
  TasksConfig tasks;
  BenchmarkConfig benchmark;

  /// "toy" or "paper"; anything else is a ConfigError.
  static Config for_profile(std::string_view profile);

  void validate() const;
  /// Stage settings with the run seed and routing folded in.
  StageConfig stage(int s) const;
  std::vector<TaskSpec> task_specs() const;
  /// Sum of the three stage budgets.
  int total_adapter_steps() const;
};

void to_json(nlohmann::json& j, const Config& c);
/// Applies the keys present in `j` on top of `c`.
void merge_config(Config& c, const nlohmann::json& j);

struct ConfigOverrides {
  std::optional<std::string> profile;
  std::optional<std::uint64_t> seed;
};

/// Reads AWAKER_SEED; a malformed value is a ConfigError.
std::optional<std::uint64_t> seed_from_env();

/// Profile (override, else the file's "profile", else toy), then the file,
/// then the seed overrides. A missing `path` means profile defaults only.
Config load_config(const std::optional<std::filesystem::path>& path, const ConfigOverrides& over);

}  // namespace awaker
