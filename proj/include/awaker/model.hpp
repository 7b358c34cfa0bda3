// SPDX-License-Identifier: Apache-2.0
//
// A small frozen decoder-only transformer with Qwen2-shaped projections and
// the adapter layers attached on top of it.
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "awaker/adapters.hpp"
#include "awaker/instance.hpp"
#include "awaker/optim.hpp"
#include "awaker/placement.hpp"
#include "awaker/rng.hpp"
#include "awaker/tensor.hpp"
#include "json.hpp"

namespace awaker {

class RoutingContext;

struct ModelConfig {
  int vocab = 32;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 128;
  int max_seq = 32;
  double rope_theta = 10000.0;
  double norm_eps = 1e-6;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct AdapterConfig {
  int n_experts = 4;
  int rank = 8;
  double alpha = 16.0;
  double temperature = 1.0;
  double noise_sigma = 0.01;
  int top_k = 1;

  void validate() const;
  bool operator==(const AdapterConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const AdapterConfig& c);
void from_json(const nlohmann::json& j, AdapterConfig& c);
void to_json(nlohmann::json& j, const PlacementMap& m);
void from_json(const nlohmann::json& j, PlacementMap& m);

struct BlockWeights {
  Tensor attn_norm;
  Tensor mlp_norm;
  std::array<Tensor, kNumSites> proj;  // [d_out × d_in], indexed by Site

  const Tensor& operator[](Site s) const { return proj[static_cast<std::size_t>(s)]; }
};

/// Frozen base: token embedding, L pre-norm blocks, final norm, untied head.
class BaseModel {
 public:
  static BaseModel init(const ModelConfig& cfg, Rng& rng);

  const ModelConfig& config() const { return cfg_; }
  const Tensor& embed() const { return embed_; }
  const Tensor& final_norm() const { return final_norm_; }
  const Tensor& head() const { return head_; }
  const std::vector<BlockWeights>& blocks() const { return blocks_; }

  std::vector<NamedTensor> named_parameters() const;
  /// Only base pretraining flips this on; adaptation stages never do.
  void set_trainable(bool on);
  bool any_trainable() const;
  std::uint32_t checksum() const;
  std::size_t num_params() const;

  static std::pair<std::size_t, std::size_t> site_dims(const ModelConfig& cfg, Site s);

 private:
  ModelConfig cfg_;
  Tensor embed_;
  std::vector<BlockWeights> blocks_;
  Tensor final_norm_;
  Tensor head_;
};

/// Logits of the base alone (no adapters).
Tensor base_forward(const BaseModel& base, std::span<const int> tokens);

enum class ParamGroup : std::uint8_t { single_lora, expert, global_expert, gate };

std::string_view param_group_name(ParamGroup g);

struct AdapterParam {
  std::string name;
  Tensor tensor;
  ParamGroup group;
};

/// Which adapter parameter groups receive gradients.
struct TrainableSet {
  bool single_lora = true;
  bool experts = true;
  bool global_expert = true;
  bool gates = true;

  static TrainableSet for_stage(int stage);
  bool includes(ParamGroup g) const;
  bool operator==(const TrainableSet&) const = default;
};

void to_json(nlohmann::json& j, const TrainableSet& t);
void from_json(const nlohmann::json& j, TrainableSet& t);

struct AdapterSite {
  AdapterKind kind = AdapterKind::none;
  std::optional<LoRAExpert> lora;
  std::optional<MoEAdapterLayer> moe;
};

class AdaptedModel {
 public:
  explicit AdaptedModel(std::shared_ptr<const BaseModel> base);

  /// Creates adapter layers per the map. Throws ConfigError if already attached.
  void attach(const PlacementMap& map, const AdapterConfig& cfg, Rng& rng);
  bool attached() const { return attached_; }

  /// Causal LM logits [T × V]. Gated layers consult `ctx` once each; a model
  /// with gated layers requires a context.
  Tensor forward(const TaskInstance& inst, RoutingContext* ctx) const;

  const BaseModel& base() const { return *base_; }
  std::shared_ptr<const BaseModel> base_ptr() const { return base_; }
  const PlacementMap& placement() const { return map_; }
  const AdapterConfig& adapter_config() const { return cfg_; }
  bool has_gates() const { return attached_ && map_.has_moe(); }

  AdapterSite& site(std::size_t block, Site s) { return sites_.at(block)[static_cast<std::size_t>(s)]; }
  const AdapterSite& site(std::size_t block, Site s) const {
    return sites_.at(block)[static_cast<std::size_t>(s)];
  }
  static std::string site_id(std::size_t block, Site s);

  std::vector<AdapterParam> parameters() const;
  std::vector<NamedTensor> named_parameters() const;
  void set_trainable(const TrainableSet& set);
  bool gates_frozen() const;

  /// Trainable scalars; the frozen base contributes nothing.
  std::size_t count_trainable() const;
  /// Adapter scalars used by one instance: single LoRAs plus, per MoE site,
  /// the top-k selected experts and the global expert. Gates excluded.
  std::size_t count_active() const;

 private:
  Tensor project(std::size_t block, Site s, const Tensor& x, const Tensor& hidden_for_gate,
                 RoutingContext* ctx) const;

  std::shared_ptr<const BaseModel> base_;
  PlacementMap map_;
  AdapterConfig cfg_;
  bool attached_ = false;
  std::vector<std::array<AdapterSite, kNumSites>> sites_;
};

AdaptedModel attach_adapters(std::shared_ptr<const BaseModel> base, const PlacementMap& map,
                             const AdapterConfig& cfg, Rng& rng);

std::size_t count_trainable(const AdaptedModel& m);

}  // namespace awaker
