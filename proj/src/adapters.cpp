// SPDX-License-Identifier: Apache-2.0
#include "awaker/adapters.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "awaker/error.hpp"

namespace awaker {

LoRAExpert LoRAExpert::init(std::size_t d_in, std::size_t d_out, int rank, double alpha, Rng& rng) {
  if (rank <= 0) throw ConfigError("LoRA rank must be positive, got " + std::to_string(rank));
  if (!(alpha > 0.0)) throw ConfigError("LoRA alpha must be positive");
  const auto r = static_cast<std::size_t>(rank);
  std::vector<double> a(r * d_in);
  const double std = 1.0 / std::sqrt(static_cast<double>(d_in));
  for (double& v : a) v = rng.normal(0.0, std);
  LoRAExpert e;
  e.a = Tensor::from({r, d_in}, std::move(a), true);
  e.b = Tensor::zeros({d_out, r}, true);
  e.rank = rank;
  e.alpha = alpha;
  return e;
}

LoRAExpert LoRAExpert::clone() const {
  LoRAExpert e;
  e.a = a.clone(a.requires_grad());
  e.b = b.clone(b.requires_grad());
  e.rank = rank;
  e.alpha = alpha;
  return e;
}

void LoRAExpert::set_trainable(bool on) {
  a.set_requires_grad(on);
  b.set_requires_grad(on);
}

Tensor lora_delta(const LoRAExpert& e, const Tensor& x) {
  if (x.shape().empty() || x.shape().back() != e.d_in()) {
    throw ShapeError("lora_delta: input " + shape_str(x.shape()) + " does not end in d_in=" +
                     std::to_string(e.d_in()));
  }
  return scale(linear(linear(x, e.a), e.b), e.scaling());
}

GateLayer GateLayer::zeros(std::size_t n, std::size_t d_gate, double temperature,
                           double noise_sigma, int top_k) {
  if (n == 0) throw ConfigError("gate needs at least one expert");
  GateLayer g;
  g.weight = Tensor::zeros({n, d_gate}, true);
  g.temperature = temperature;
  g.noise_sigma = noise_sigma;
  g.top_k = top_k;
  return g;
}

bool GateOutput::same_decision(const GateOutput& other) const {
  return selected == other.selected && g_experts == other.g_experts && g_max == other.g_max &&
         g_global == other.g_global;
}

GateOutput gate_forward(const GateLayer& g, const Tensor& x_gate, bool train_mode, Rng* rng,
                        std::string source) {
  if (!g.weight.defined() || g.weight.rank() != 2) throw ConfigError("gate has no experts");
  const std::size_t n = g.num_experts();
  if (!(g.temperature > 0.0)) throw ConfigError("gate temperature must be positive");
  if (g.noise_sigma < 0.0) throw ConfigError("gate noise sigma must be non-negative");
  if (g.top_k < 1 || static_cast<std::size_t>(g.top_k) > n) {
    throw ConfigError("gate top_k must lie in [1, " + std::to_string(n) + "], got " +
                      std::to_string(g.top_k));
  }
  if (x_gate.rank() != 1) {
    throw ShapeError("gate_forward: gate input must be a vector, got " + shape_str(x_gate.shape()));
  }

  Tensor logits = scale(linear(x_gate, g.weight), 1.0 / g.temperature);
  if (train_mode && g.noise_sigma > 0.0) {
    if (rng == nullptr) throw ConfigError("gate_forward: noisy gating requires an RNG");
    std::vector<double> eps(n);
    for (double& e : eps) e = rng->normal(0.0, g.noise_sigma);
    logits = add(logits, Tensor::from({n}, std::move(eps)));
  }

  GateOutput out;
  out.source = std::move(source);
  out.probs = softmax_row(logits);
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  const auto p = out.probs.data();
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return p[a] > p[b]; });
  out.selected.assign(order.begin(), order.begin() + g.top_k);
  out.g_experts.assign(n, 0.0);
  for (int idx : out.selected) {
    out.g_experts[idx] = p[idx];
    out.expert_weights.push_back(select(out.probs, static_cast<std::size_t>(idx)));
  }
  out.g_max = p[out.selected.front()];
  out.g_global = 1.0 - out.g_max;
  out.global_weight = rsub(1.0, out.expert_weights.front());
  return out;
}

Tensor moe_forward(const MoEAdapterLayer& layer, const Tensor& x, const GateOutput& go,
                   const Tensor& base_out) {
  if (layer.simplified() && !layer.donor) {
    throw RoutingError("simplified MoE layer '" + layer.id + "' is not bound to a donor gate");
  }
  const std::string& expected = layer.simplified() ? *layer.donor : layer.id;
  if (!go.source.empty() && go.source != expected) {
    throw RoutingError("layer '" + layer.id + "' expects gate output from '" + expected +
                       "', got one from '" + go.source + "'");
  }
  if (go.g_experts.size() != layer.num_experts()) {
    throw RoutingError("gate output covers " + std::to_string(go.g_experts.size()) +
                       " experts, layer '" + layer.id + "' has " +
                       std::to_string(layer.num_experts()));
  }

  Tensor y = base_out;
  for (std::size_t i = 0; i < go.selected.size(); ++i) {
    const int idx = go.selected[i];
    const Tensor w = i < go.expert_weights.size() ? go.expert_weights[i]
                                                  : Tensor::scalar(go.g_experts[idx]);
    y = add(y, scale_by(lora_delta(layer.experts.at(idx), x), w));
  }
  const Tensor gw = go.global_weight.defined() ? go.global_weight : Tensor::scalar(go.g_global);
  return add(y, scale_by(lora_delta(layer.global, x), gw));
}

void bind_simplified(MoEAdapterLayer& consumer, const MoEAdapterLayer& donor) {
  if (!donor.gate) throw ConfigError("donor layer '" + donor.id + "' has no gate");
  if (consumer.gate) throw ConfigError("consumer layer '" + consumer.id + "' already owns a gate");
  if (consumer.num_experts() != donor.num_experts()) {
    throw ConfigError("expert count mismatch: consumer '" + consumer.id + "' has " +
                      std::to_string(consumer.num_experts()) + ", donor '" + donor.id + "' has " +
                      std::to_string(donor.num_experts()));
  }
  consumer.donor = donor.id;
}

void unbind_simplified(MoEAdapterLayer& consumer) { consumer.donor.reset(); }

}  // namespace awaker
