// SPDX-License-Identifier: Apache-2.0
//
// Exact-match evaluation, the conflict benchmark and the report schema.
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "awaker/config.hpp"
#include "awaker/model.hpp"
#include "awaker/routing.hpp"
#include "awaker/tasks.hpp"
#include "json.hpp"

namespace awaker {

struct EvalOptions {
  RoutingMode mode = RoutingMode::shared_embedding;
  Pooling pooling = Pooling::mean;
};

/// Greedy decoding of the response span, eval mode. Returns as many tokens
/// as the instance's response holds.
std::vector<int> greedy_decode(const AdaptedModel& m, const TaskInstance& inst, const EvalOptions& opt = {});

/// True when every response token is the argmax given the gold prefix. For a
/// causal model this equals greedy_decode(...) == response, in one forward.
bool exact_match(const AdaptedModel& m, const TaskInstance& inst, const EvalOptions& opt = {},
                 RoutingTrace* trace = nullptr);

struct AccuracyReport {
  std::vector<double> per_task;     // indexed by task id
  std::vector<std::size_t> counts;  // instances per task
  double mean = 0.0;                // unweighted mean over tasks present
};

/// Per-task exact match. Throws InputError on an empty split. Routing traces
/// of gated models are appended to `traces` when given.
AccuracyReport eval_accuracy(const AdaptedModel& m, std::span<const TaskInstance> split, std::size_t n_tasks,
                             const EvalOptions& opt = {}, std::vector<RoutingTrace>* traces = nullptr);

/// Fraction of gated decisions that change between two train-mode (noisy)
/// routing passes over `split`.
double routing_flip_rate(const AdaptedModel& m, std::span<const TaskInstance> split, double noise_sigma,
                         std::uint64_t seed, const EvalOptions& opt = {});

struct ArmReport {
  std::string name;  // "moe" or "single_lora"
  AccuracyReport accuracy;
  std::size_t trainable_params = 0;
  std::size_t active_params = 0;
  int rank = 0;
  std::optional<RoutingStats> routing;
};

struct RunReport {
  std::uint64_t seed = 0;
  std::vector<ArmReport> arms;
  const ArmReport* arm(std::string_view name) const;
};

struct EvalReport {
  std::uint64_t seed = 0;
  nlohmann::json config = nlohmann::json::object();
  std::vector<RunReport> runs;
};

inline constexpr const char* kReportSchema = "awaker.eval_report/1";

void to_json(nlohmann::json& j, const AccuracyReport& r);
void to_json(nlohmann::json& j, const ArmReport& r);
void to_json(nlohmann::json& j, const RunReport& r);
/// Comparison runs (both arms present) also get a "summary" block.
void to_json(nlohmann::json& j, const EvalReport& r);

/// Checks a serialized report: required fields, accuracies in [0,1], means
/// consistent with per-task values, MI in [0, log2 min(tasks, experts)] and,
/// for comparisons, the parameter gap within `param_tolerance`. Returns the
/// list of violations (empty when valid).
std::vector<std::string> validate_report(const nlohmann::json& report);

/// Per-rank adapter size of the single-LoRA baseline: Σ_sites (d_in + d_out) · L.
std::size_t single_lora_params_per_rank(const ModelConfig& cfg);

/// Smallest-gap baseline rank for `target_active` parameters.
int matched_baseline_rank(const ModelConfig& cfg, std::size_t target_active);

/// Throws ConfigError naming both counts when they differ by more than
/// `tolerance` relative to the larger one.
void check_param_match(std::size_t moe_active, std::size_t baseline_trainable, double tolerance);

/// Arm B: Stage 1 → Stage 2 (init from Stage 1) → freeze gates → Stage 3.
struct MoEArmResult {
  AdaptedModel model;
  std::vector<StageOutcome> stages;
};
MoEArmResult train_moe_arm(std::shared_ptr<const BaseModel> base, std::span<const TaskInstance> train,
                           const Config& cfg);

/// Arm A: one LoRA of `rank` on every projection trained for the whole budget
/// with the Stage-1 schedule settings.
AdaptedModel train_single_lora_arm(std::shared_ptr<const BaseModel> base, std::span<const TaskInstance> train,
                                   const Config& cfg, int rank);

using ProgressFn = std::function<void(const std::string&)>;

/// Both arms on the same corpus, base, budget and seed, for every seed in
/// cfg.benchmark.seeds (or cfg.seed alone).
EvalReport run_conflict_benchmark(const Config& cfg, const ProgressFn& progress = {});

}  // namespace awaker
