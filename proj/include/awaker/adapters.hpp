// SPDX-License-Identifier: Apache-2.0
//
// LoRA experts and the two MoE adapter variants. A gated layer owns a
// linear gate; a simplified layer has no gate and consumes the routing result
// of a donor gated layer in the same block.
//
//   G_experts = top_k(softmax(W_G·x / τ + ε))
//   G_global  = 1 − G_max
//   y         = W0·x + Σ_m G_experts[m]·ΔE_m(x) + G_global·ΔE_global(x)
#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "awaker/rng.hpp"
#include "awaker/tensor.hpp"

namespace awaker {

/// Low-rank pair producing delta(x) = (alpha / rank) · B · (A · x).
struct LoRAExpert {
  Tensor a;  // [rank × d_in]
  Tensor b;  // [d_out × rank]
  int rank = 0;
  double alpha = 0.0;

  /// A ~ N(0, 1/d_in), B = 0.
  static LoRAExpert init(std::size_t d_in, std::size_t d_out, int rank, double alpha, Rng& rng);

  std::size_t d_in() const { return a.dim(1); }
  std::size_t d_out() const { return b.dim(0); }
  double scaling() const { return alpha / static_cast<double>(rank); }
  std::size_t num_params() const { return a.numel() + b.numel(); }
  /// Independent copy of both factors.
  LoRAExpert clone() const;
  void set_trainable(bool on);
};

/// (alpha/rank)·(x·Aᵀ)·Bᵀ per row of x[...×d_in].
Tensor lora_delta(const LoRAExpert& e, const Tensor& x);

struct GateLayer {
  Tensor weight;  // W_G [n × d_gate]
  double temperature = 1.0;
  double noise_sigma = 0.01;
  int top_k = 1;

  static GateLayer zeros(std::size_t n, std::size_t d_gate, double temperature, double noise_sigma,
                         int top_k);
  std::size_t num_experts() const { return weight.dim(0); }
  std::size_t input_dim() const { return weight.dim(1); }
};

/// Routing result of one gate for one instance.
struct GateOutput {
  std::vector<int> selected;      // k indices, descending weight
  std::vector<double> g_experts;  // length n, zero outside `selected`
  double g_max = 0.0;
  double g_global = 0.0;
  std::string source;  // id of the gated layer that produced it

  // Differentiable views of the same numbers (gradients reach W_G).
  Tensor probs;                       // softmax over all n experts
  std::vector<Tensor> expert_weights; // one scalar per selected expert
  Tensor global_weight;               // scalar, 1 − G_max

  /// Same decision: indices and weights, bit for bit.
  bool same_decision(const GateOutput& other) const;
};

/// Evaluates the gate. Noise is drawn only when `train_mode` and σ > 0, in
/// which case `rng` must be non-null. Ties resolve to the lowest index.
GateOutput gate_forward(const GateLayer& g, const Tensor& x_gate, bool train_mode, Rng* rng,
                        std::string source = {});

struct MoEAdapterLayer {
  std::string id;
  std::vector<LoRAExpert> experts;
  LoRAExpert global;
  std::optional<GateLayer> gate;     // absent ⇒ simplified layer
  std::optional<std::string> donor;  // id of the gated layer a simplified layer reads from

  bool simplified() const { return !gate.has_value(); }
  std::size_t num_experts() const { return experts.size(); }
};

/// Adds the routed expert deltas and the global delta to `base_out`. Only the
/// selected experts are evaluated.
Tensor moe_forward(const MoEAdapterLayer& layer, const Tensor& x, const GateOutput& go,
                   const Tensor& base_out);

/// Makes `consumer` reuse `donor`'s gate output during forward passes.
void bind_simplified(MoEAdapterLayer& consumer, const MoEAdapterLayer& donor);
void unbind_simplified(MoEAdapterLayer& consumer);

}  // namespace awaker
