// SPDX-License-Identifier: Apache-2.0
#include "awaker/routing.hpp"

#include <algorithm>
#include <cmath>

#include "awaker/error.hpp"
#include "awaker/model.hpp"

namespace awaker {

std::string_view routing_mode_name(RoutingMode m) {
  return m == RoutingMode::shared_embedding ? "shared_embedding" : "per_layer";
}

RoutingMode routing_mode_from_name(std::string_view name) {
  if (name == "shared_embedding") return RoutingMode::shared_embedding;
  if (name == "per_layer") return RoutingMode::per_layer;
  throw ConfigError("unknown routing mode '" + std::string(name) + "'");
}

std::string_view pooling_name(Pooling p) { return p == Pooling::mean ? "mean" : "last_token"; }

Pooling pooling_from_name(std::string_view name) {
  if (name == "mean") return Pooling::mean;
  if (name == "last_token") return Pooling::last_token;
  throw ConfigError("unknown pooling '" + std::string(name) + "'");
}

RoutingContext::RoutingContext(RoutingMode mode, InstanceSegments segments, bool train_mode,
                               Rng* noise_rng, Pooling pooling)
    : mode_(mode), pooling_(pooling), segments_(segments), train_mode_(train_mode),
      noise_rng_(noise_rng) {}

const RoutingDecision* RoutingContext::find(std::size_t block, Site site) const {
  for (const auto& d : log_) {
    if (d.block == block && d.site == site) return &d;
  }
  return nullptr;
}

std::size_t RoutingContext::gated_events() const {
  return static_cast<std::size_t>(
      std::count_if(log_.begin(), log_.end(), [](const RoutingDecision& d) { return !d.reused; }));
}

std::vector<int> RoutingContext::selections() const {
  std::vector<int> out;
  for (const auto& d : log_) {
    if (!d.reused) out.push_back(d.gate.selected.front());
  }
  return out;
}

Tensor pool_instruction(const Tensor& x, const InstanceSegments& seg, Pooling pooling) {
  if (seg.instr_end == 0) throw InputError("cannot pool an empty instruction span");
  if (pooling == Pooling::mean) return mean_rows(x, 0, seg.instr_end);
  return mean_rows(x, seg.instr_end - 1, seg.instr_end);
}

std::vector<double> build_gate_input(const AdaptedModel& m, const TaskInstance& inst,
                                     Pooling pooling) {
  const InstanceSegments seg = inst.segments();
  if (seg.instr_end == 0) throw InputError("build_gate_input: empty instruction span");
  if (seg.instr_end > inst.tokens.size()) throw InputError("build_gate_input: span exceeds instance");
  NoGradGuard no_grad;
  const std::span<const int> instr(inst.tokens.data(), seg.instr_end);
  Tensor pooled = pool_instruction(embedding(m.base().embed(), instr), seg, pooling);
  return {pooled.data().begin(), pooled.data().end()};
}

RoutingContext make_routing_context(const AdaptedModel& m, const TaskInstance& inst,
                                    RoutingMode mode, bool train_mode, Rng* rng, Pooling pooling) {
  const InstanceSegments seg = inst.segments();
  seg.validate();
  RoutingContext ctx(mode, seg, train_mode, rng, pooling);
  if (mode == RoutingMode::shared_embedding) {
    auto v = build_gate_input(m, inst, pooling);
    const std::size_t d = v.size();
    ctx.set_gate_input(Tensor::from({d}, std::move(v)));
  }
  return ctx;
}

RoutingContext route_instance(const AdaptedModel& m, const TaskInstance& inst, RoutingMode mode,
                              bool train_mode, Rng* rng, Pooling pooling) {
  if (!m.has_gates()) throw ConfigError("route_instance: model has no gated layers");
  RoutingContext ctx = make_routing_context(m, inst, mode, train_mode, rng, pooling);
  if (mode == RoutingMode::per_layer) {
    // gate inputs depend on hidden states, so the decisions come from a forward pass
    m.forward(inst, &ctx);
    return ctx;
  }
  const auto& map = m.placement();
  for (std::size_t b = 0; b < static_cast<std::size_t>(m.base().config().n_layers); ++b) {
    for (Site s : kAllSites) {
      const AdapterSite& site = m.site(b, s);
      if (site.kind == AdapterKind::gated_moe) {
        RoutingDecision rd;
        rd.block = b;
        rd.site = s;
        rd.gate = gate_forward(*site.moe->gate, ctx.gate_input(), train_mode, rng, site.moe->id);
        rd.gate_input.assign(ctx.gate_input().data().begin(), ctx.gate_input().data().end());
        ctx.record(std::move(rd));
      } else if (site.kind == AdapterKind::simplified_moe) {
        const RoutingDecision* donor = ctx.find(b, map[s].donor);
        if (donor == nullptr) throw RoutingError("donor of " + AdaptedModel::site_id(b, s) + " not routed");
        RoutingDecision rd = *donor;
        rd.site = s;
        rd.reused = true;
        ctx.record(std::move(rd));
      }
    }
  }
  return ctx;
}

RoutingTrace trace_of(const RoutingContext& ctx, int task) {
  RoutingTrace t;
  t.task = task;
  for (const auto& d : ctx.log()) {
    if (d.reused) continue;
    t.blocks.push_back(d.block);
    t.sites.push_back(d.site);
    t.selected.push_back(d.gate.selected.front());
  }
  return t;
}

double entropy_bits(std::span<const std::size_t> counts) {
  double total = 0.0;
  for (auto c : counts) total += static_cast<double>(c);
  if (total == 0.0) return 0.0;
  double h = 0.0;
  for (auto c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / total;
    h -= p * std::log2(p);
  }
  return h;
}

double mutual_information_bits(const std::vector<std::vector<std::size_t>>& joint) {
  if (joint.empty()) return 0.0;
  const std::size_t cols = joint.front().size();
  std::vector<double> row_sum(joint.size(), 0.0), col_sum(cols, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < joint.size(); ++i) {
    if (joint[i].size() != cols) throw InputError("mutual information: ragged contingency table");
    for (std::size_t j = 0; j < cols; ++j) {
      const auto c = static_cast<double>(joint[i][j]);
      row_sum[i] += c;
      col_sum[j] += c;
      total += c;
    }
  }
  if (total == 0.0) return 0.0;
  double mi = 0.0;
  for (std::size_t i = 0; i < joint.size(); ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      if (joint[i][j] == 0) continue;
      const double pij = static_cast<double>(joint[i][j]) / total;
      mi += pij * std::log2(pij * total * total / (row_sum[i] * col_sum[j]));
    }
  return std::max(0.0, mi);
}

RoutingStats routing_stats(std::span<const RoutingTrace> traces, std::size_t n_experts,
                           std::size_t n_tasks, std::size_t reference_block, Site reference_site) {
  if (traces.empty()) throw InputError("routing_stats: no routed instances");
  if (n_experts == 0 || n_tasks == 0) throw InputError("routing_stats: need experts and tasks");
  RoutingStats s;
  s.n_experts = n_experts;
  s.n_tasks = n_tasks;
  s.reference_block = reference_block;
  s.reference_site = reference_site;
  s.utilization.assign(n_experts, 0);
  s.joint.assign(n_tasks, std::vector<std::size_t>(n_experts, 0));
  for (const auto& t : traces) {
    if (t.task < 0 || static_cast<std::size_t>(t.task) >= n_tasks) {
      throw InputError("routing_stats: task label " + std::to_string(t.task) + " out of range");
    }
    bool saw_reference = false;
    for (std::size_t i = 0; i < t.selected.size(); ++i) {
      const auto e = static_cast<std::size_t>(t.selected[i]);
      if (e >= n_experts) throw InputError("routing_stats: expert index out of range");
      ++s.utilization[e];
      if (t.blocks[i] == reference_block && t.sites[i] == reference_site) {
        ++s.joint[static_cast<std::size_t>(t.task)][e];
        saw_reference = true;
      }
    }
    if (!saw_reference) throw InputError("routing_stats: trace lacks the reference layer");
  }
  s.entropy_bits = entropy_bits(s.utilization);
  s.mutual_information_bits = mutual_information_bits(s.joint);
  return s;
}

double flip_rate(std::span<const RoutingTrace> a, std::span<const RoutingTrace> b) {
  if (a.size() != b.size() || a.empty()) throw InputError("flip_rate: logs cover different instances");
  std::size_t events = 0, flips = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].blocks != b[i].blocks || a[i].sites != b[i].sites) {
      throw InputError("flip_rate: logs cover different layers for instance " + std::to_string(i));
    }
    for (std::size_t j = 0; j < a[i].selected.size(); ++j) {
      ++events;
      flips += a[i].selected[j] != b[i].selected[j] ? 1 : 0;
    }
  }
  if (events == 0) throw InputError("flip_rate: no gated events");
  return static_cast<double>(flips) / static_cast<double>(events);
}

void to_json(nlohmann::json& j, const RoutingStats& s) {
  j = {{"n_experts", s.n_experts},
       {"n_tasks", s.n_tasks},
       {"utilization", s.utilization},
       {"entropy_bits", s.entropy_bits},
       {"mutual_information_bits", s.mutual_information_bits},
       {"joint", s.joint},
       {"reference_layer", {{"block", s.reference_block}, {"site", site_name(s.reference_site)}}}};
  if (s.flip_rate) j["flip_rate"] = *s.flip_rate;
}

}  // namespace awaker
