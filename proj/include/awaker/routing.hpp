// SPDX-License-Identifier: Apache-2.0
//
// Instance-level routing. One gate input is built per instance from the
// frozen embeddings of its instruction tokens and handed to every gate; each
// gate still applies its own W_G. Tokens of an instance never route
// separately, and response tokens never reach a gate.
#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "awaker/adapters.hpp"
#include "awaker/instance.hpp"
#include "awaker/placement.hpp"
#include "awaker/rng.hpp"
#include "awaker/tensor.hpp"
#include "json.hpp"

namespace awaker {

class AdaptedModel;

enum class RoutingMode : std::uint8_t {
  shared_embedding,  // pooled instruction embeddings feed every gate
  per_layer,         // each gate pools the hidden states entering its sublayer (comparison mode)
};

enum class Pooling : std::uint8_t { mean, last_token };

std::string_view routing_mode_name(RoutingMode m);
RoutingMode routing_mode_from_name(std::string_view name);
std::string_view pooling_name(Pooling p);
Pooling pooling_from_name(std::string_view name);

struct RoutingDecision {
  std::size_t block = 0;
  Site site = Site::gate_proj;
  GateOutput gate;
  std::vector<double> gate_input;
  bool reused = false;  // a simplified layer consuming its donor's output
};

class RoutingContext {
 public:
  RoutingContext(RoutingMode mode, InstanceSegments segments, bool train_mode, Rng* noise_rng,
                 Pooling pooling = Pooling::mean);

  RoutingMode mode() const { return mode_; }
  Pooling pooling() const { return pooling_; }
  const InstanceSegments& segments() const { return segments_; }
  bool train_mode() const { return train_mode_; }
  Rng* noise_rng() const { return noise_rng_; }

  const Tensor& gate_input() const { return gate_input_; }
  void set_gate_input(Tensor t) { gate_input_ = std::move(t); }

  const std::vector<RoutingDecision>& log() const { return log_; }
  const RoutingDecision* find(std::size_t block, Site site) const;
  void record(RoutingDecision d) { log_.push_back(std::move(d)); }
  /// Entries produced by a gate (reused entries excluded).
  std::size_t gated_events() const;
  /// Selected expert (top-1) of the gated entries, in log order.
  std::vector<int> selections() const;

 private:
  RoutingMode mode_;
  Pooling pooling_;
  InstanceSegments segments_;
  bool train_mode_;
  Rng* noise_rng_;
  Tensor gate_input_;
  std::vector<RoutingDecision> log_;
};

/// Pools rows [0, instr_end) of x[T×d] into one vector.
Tensor pool_instruction(const Tensor& x, const InstanceSegments& seg, Pooling pooling);

/// Mean (or last-token) of the frozen token embeddings over the instruction span.
std::vector<double> build_gate_input(const AdaptedModel& m, const TaskInstance& inst,
                                     Pooling pooling = Pooling::mean);

/// Context whose gates resolve lazily during the forward pass.
RoutingContext make_routing_context(const AdaptedModel& m, const TaskInstance& inst,
                                    RoutingMode mode, bool train_mode, Rng* rng,
                                    Pooling pooling = Pooling::mean);

/// Context with every gated decision already resolved and logged, including
/// reuse entries for simplified layers.
RoutingContext route_instance(const AdaptedModel& m, const TaskInstance& inst, RoutingMode mode,
                              bool train_mode, Rng* rng, Pooling pooling = Pooling::mean);

/// Decision log reduced to what the statistics need.
struct RoutingTrace {
  int task = 0;
  std::vector<std::size_t> blocks;
  std::vector<Site> sites;
  std::vector<int> selected;  // top-1 expert per gated event
};

RoutingTrace trace_of(const RoutingContext& ctx, int task);

struct RoutingStats {
  std::size_t n_experts = 0;
  std::size_t n_tasks = 0;
  std::vector<std::size_t> utilization;          // per expert, over all gated events
  double entropy_bits = 0.0;                     // H(expert) of the utilization histogram
  double mutual_information_bits = 0.0;          // I(task; expert) at the reference layer
  std::vector<std::vector<std::size_t>> joint;   // [task][expert] at the reference layer
  std::size_t reference_block = 0;
  Site reference_site = Site::gate_proj;
  std::optional<double> flip_rate;               // between two routing passes, when measured
};

void to_json(nlohmann::json& j, const RoutingStats& s);

RoutingStats routing_stats(std::span<const RoutingTrace> traces, std::size_t n_experts,
                           std::size_t n_tasks, std::size_t reference_block = 0,
                           Site reference_site = Site::gate_proj);

/// Plug-in estimate of I(row; column) in bits from a contingency table.
double mutual_information_bits(const std::vector<std::vector<std::size_t>>& joint);
double entropy_bits(std::span<const std::size_t> counts);

/// Fraction of (instance, gated layer) events whose selected expert differs.
double flip_rate(std::span<const RoutingTrace> a, std::span<const RoutingTrace> b);

}  // namespace awaker
