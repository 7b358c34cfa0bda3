// SPDX-License-Identifier: Apache-2.0
//
// Base pretraining and the three adaptation stages:
//   Stage 1  one LoRA per projection, base frozen
//   Stage 2  MoE sites initialized from the Stage-1 LoRA; experts, global
//            expert and gates train
//   Stage 3  gates frozen; experts and global expert train
// q/k/v LoRAs train in every stage.
#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "awaker/checkpoint.hpp"
#include "awaker/model.hpp"
#include "awaker/optim.hpp"
#include "awaker/routing.hpp"
#include "awaker/tasks.hpp"
#include "json.hpp"

namespace awaker {

struct StageConfig {
  int stage = 1;
  double lr = 1e-3;
  int steps = 300;
  int warmup = 20;
  int batch_size = 4;
  TrainableSet trainable = TrainableSet::for_stage(1);
  double noise_sigma = 0.01;
  double balance_coef = 0.0;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  RoutingMode routing_mode = RoutingMode::shared_embedding;
  Pooling pooling = Pooling::mean;

  static StageConfig defaults(int stage);
  void validate() const;
};

void to_json(nlohmann::json& j, const StageConfig& c);
void from_json(const nlohmann::json& j, StageConfig& c);

struct PretrainConfig {
  int steps = 1500;
  double lr = 3e-3;
  int warmup = 50;
  int batch_size = 8;
  PretrainMix mix;
};

void to_json(nlohmann::json& j, const PretrainConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);

/// Trains every base parameter on instruction-free sequences, then freezes
/// the result.
BaseModel pretrain_base(const ModelConfig& cfg, const PretrainConfig& pc, std::uint64_t seed);

struct StageOutcome {
  Checkpoint checkpoint;
  std::vector<double> losses;        // mean batch loss per step, before the update
  std::vector<std::size_t> final_batch;
  double final_batch_loss = 0.0;     // last batch re-scored with the final parameters, eval mode
};

/// Mean masked loss of a batch, eval mode (no routing noise, no graph).
double batch_loss(const AdaptedModel& m, std::span<const TaskInstance> corpus,
                  std::span<const std::size_t> batch, RoutingMode mode, Pooling pooling);

/// Generic adapter training loop; applies `cfg.trainable` first.
StageOutcome train_adapters(AdaptedModel& m, std::span<const TaskInstance> corpus,
                            const StageConfig& cfg);

struct Stage1Result {
  AdaptedModel model;
  StageOutcome outcome;
};

Stage1Result run_stage1(std::shared_ptr<const BaseModel> base, std::span<const TaskInstance> corpus,
                        const StageConfig& cfg, const AdapterConfig& adapters);

/// Every MoE site gets n experts and a global expert that are deep copies of
/// the Stage-1 LoRA at that site; gates start at zero; q/k/v LoRAs carry over.
AdaptedModel init_stage2_from_stage1(std::shared_ptr<const BaseModel> base, const Checkpoint& ck1,
                                     const AdapterConfig& adapters);

StageOutcome run_stage2(AdaptedModel& m, std::span<const TaskInstance> corpus, const StageConfig& cfg);
/// Requires the gates to be frozen already (see freeze_gates).
StageOutcome run_stage3(AdaptedModel& m, std::span<const TaskInstance> corpus, const StageConfig& cfg);

void freeze_gates(AdaptedModel& m);

/// crc32 per parameter group ("base", "single_lora", "expert", ...).
std::map<std::string, std::uint32_t> group_checksums(const AdaptedModel& m);

}  // namespace awaker
