// SPDX-License-Identifier: Apache-2.0
#include "awaker/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "awaker/error.hpp"
#include "awaker/training.hpp"

namespace awaker {

namespace {

std::size_t argmax_row(std::span<const double> logits, std::size_t row, std::size_t vocab) {
  const auto first = logits.begin() + static_cast<std::ptrdiff_t>(row * vocab);
  return static_cast<std::size_t>(std::max_element(first, first + static_cast<std::ptrdiff_t>(vocab)) - first);
}

Tensor eval_forward(const AdaptedModel& m, const TaskInstance& inst, const EvalOptions& opt,
                    RoutingTrace* trace) {
  if (!m.has_gates()) return m.forward(inst, nullptr);
  RoutingContext ctx = make_routing_context(m, inst, opt.mode, false, nullptr, opt.pooling);
  Tensor logits = m.forward(inst, &ctx);
  if (trace != nullptr) *trace = trace_of(ctx, inst.task);
  return logits;
}

std::size_t adapter_scalars(const AdaptedModel& m) {
  std::size_t n = 0;
  for (const auto& p : m.parameters()) n += p.tensor.numel();
  return n;
}

}  // namespace

std::vector<int> greedy_decode(const AdaptedModel& m, const TaskInstance& inst, const EvalOptions& opt) {
  inst.segments().validate();
  NoGradGuard no_grad;
  // Response slots hold placeholders until decoded; causal attention keeps
  // them from influencing earlier positions.
  TaskInstance work = inst;
  std::fill(work.tokens.begin() + static_cast<std::ptrdiff_t>(inst.resp_start), work.tokens.end(), 0);
  const auto vocab = static_cast<std::size_t>(m.base().config().vocab);
  std::vector<int> out;
  for (std::size_t pos = inst.resp_start; pos < inst.tokens.size(); ++pos) {
    Tensor logits = eval_forward(m, work, opt, nullptr);
    const int next = static_cast<int>(argmax_row(logits.data(), pos - 1, vocab));
    work.tokens[pos] = next;
    out.push_back(next);
  }
  return out;
}

bool exact_match(const AdaptedModel& m, const TaskInstance& inst, const EvalOptions& opt, RoutingTrace* trace) {
  inst.segments().validate();
  NoGradGuard no_grad;
  Tensor logits = eval_forward(m, inst, opt, trace);
  const auto vocab = static_cast<std::size_t>(m.base().config().vocab);
  bool ok = true;
  for (std::size_t pos = inst.resp_start; pos < inst.tokens.size(); ++pos) {
    ok = ok && static_cast<int>(argmax_row(logits.data(), pos - 1, vocab)) == inst.tokens[pos];
  }
  return ok;
}

AccuracyReport eval_accuracy(const AdaptedModel& m, std::span<const TaskInstance> split, std::size_t n_tasks,
                             const EvalOptions& opt, std::vector<RoutingTrace>* traces) {
  if (split.empty()) throw InputError("cannot evaluate an empty split");
  AccuracyReport r;
  r.per_task.assign(n_tasks, 0.0);
  r.counts.assign(n_tasks, 0);
  std::vector<std::size_t> hits(n_tasks, 0);
  for (const auto& inst : split) {
    if (inst.task < 0 || static_cast<std::size_t>(inst.task) >= n_tasks) {
      throw InputError("instance task id " + std::to_string(inst.task) + " outside [0, " +
                       std::to_string(n_tasks) + ")");
    }
    RoutingTrace trace;
    const bool ok = exact_match(m, inst, opt, traces != nullptr ? &trace : nullptr);
    const auto t = static_cast<std::size_t>(inst.task);
    ++r.counts[t];
    hits[t] += ok ? 1 : 0;
    if (traces != nullptr && m.has_gates()) traces->push_back(std::move(trace));
  }
  std::size_t present = 0;
  for (std::size_t t = 0; t < n_tasks; ++t) {
    if (r.counts[t] == 0) continue;
    r.per_task[t] = static_cast<double>(hits[t]) / static_cast<double>(r.counts[t]);
    r.mean += r.per_task[t];
    ++present;
  }
  r.mean /= static_cast<double>(present);
  return r;
}

double routing_flip_rate(const AdaptedModel& m, std::span<const TaskInstance> split, double noise_sigma,
                         std::uint64_t seed, const EvalOptions& opt) {
  if (!m.has_gates()) throw ConfigError("flip rate needs a model with gated layers");
  if (split.empty()) throw InputError("cannot measure flip rate on an empty split");
  // Gates read their noise level from the layer, so route a copy.
  AdaptedModel noisy = m;
  for (std::size_t b = 0; b < static_cast<std::size_t>(m.base().config().n_layers); ++b)
    for (Site s : kAllSites) {
      auto& site = noisy.site(b, s);
      if (site.moe && site.moe->gate) site.moe->gate->noise_sigma = noise_sigma;
    }
  NoGradGuard no_grad;
  Rng r1 = Rng::split(seed, RngStream::eval, 1);
  Rng r2 = Rng::split(seed, RngStream::eval, 2);
  std::vector<RoutingTrace> a, b;
  for (const auto& inst : split) {
    a.push_back(trace_of(route_instance(noisy, inst, opt.mode, true, &r1, opt.pooling), inst.task));
    b.push_back(trace_of(route_instance(noisy, inst, opt.mode, true, &r2, opt.pooling), inst.task));
  }
  return flip_rate(a, b);
}

// ---- reports --------------------------------------------------------------------

const ArmReport* RunReport::arm(std::string_view name) const {
  for (const auto& a : arms) {
    if (a.name == name) return &a;
  }
  return nullptr;
}

void to_json(nlohmann::json& j, const AccuracyReport& r) {
  j = {{"per_task_accuracy", r.per_task}, {"per_task_count", r.counts}, {"mean_accuracy", r.mean}};
}

void to_json(nlohmann::json& j, const ArmReport& r) {
  j = r.accuracy;
  j["name"] = r.name;
  j["rank"] = r.rank;
  j["params"] = {{"trainable", r.trainable_params}, {"active", r.active_params}};
  if (r.routing) j["routing"] = *r.routing;
}

void to_json(nlohmann::json& j, const RunReport& r) {
  j = {{"seed", r.seed}, {"arms", r.arms}};
  const ArmReport* moe = r.arm("moe");
  const ArmReport* base = r.arm("single_lora");
  if (moe != nullptr && base != nullptr) {
    j["margin"] = moe->accuracy.mean - base->accuracy.mean;
    const double hi = static_cast<double>(std::max(moe->active_params, base->active_params));
    j["param_gap"] = std::abs(static_cast<double>(moe->active_params) - static_cast<double>(base->active_params)) / hi;
  }
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = {{"schema", kReportSchema}, {"seed", r.seed}, {"config", r.config}, {"runs", r.runs}};
  std::vector<double> margins;
  double min_mi = INFINITY;
  std::size_t wins = 0;
  for (const auto& run : r.runs) {
    const ArmReport* moe = run.arm("moe");
    const ArmReport* base = run.arm("single_lora");
    if (moe == nullptr || base == nullptr) return;
    margins.push_back(moe->accuracy.mean - base->accuracy.mean);
    wins += margins.back() > 0.0 ? 1 : 0;
    if (moe->routing) min_mi = std::min(min_mi, moe->routing->mutual_information_bits);
  }
  if (margins.empty()) return;
  j["summary"] = {{"n_seeds", margins.size()},
                  {"moe_wins", wins},
                  {"margins", margins},
                  {"mean_margin", std::accumulate(margins.begin(), margins.end(), 0.0) / margins.size()},
                  {"min_mutual_information_bits", std::isfinite(min_mi) ? nlohmann::json(min_mi) : nlohmann::json()}};
}

std::vector<std::string> validate_report(const nlohmann::json& report) {
  std::vector<std::string> bad;
  auto fail = [&](std::string msg) { bad.push_back(std::move(msg)); };
  if (!report.is_object()) return {"report is not an object"};
  if (report.value("schema", "") != kReportSchema) fail("schema tag missing or unknown");
  if (!report.contains("seed") || !report["seed"].is_number_unsigned()) fail("seed missing");
  if (!report.contains("config") || !report["config"].is_object()) fail("config echo missing");
  if (!report.contains("runs") || !report["runs"].is_array() || report["runs"].empty()) {
    fail("runs missing or empty");
    return bad;
  }
  double tolerance = 0.05;
  if (report.contains("config") && report["config"].contains("benchmark")) {
    tolerance = report["config"]["benchmark"].value("param_tolerance", tolerance);
  }
  for (const auto& run : report["runs"]) {
    if (!run.contains("arms") || !run["arms"].is_array() || run["arms"].empty()) {
      fail("run without arms");
      continue;
    }
    for (const auto& arm : run["arms"]) {
      const std::string name = arm.value("name", std::string("?"));
      if (!arm.contains("per_task_accuracy") || !arm.contains("per_task_count") || !arm.contains("mean_accuracy") ||
          !arm.contains("params")) {
        fail("arm '" + name + "' lacks accuracy or parameter fields");
        continue;
      }
      const auto acc = arm["per_task_accuracy"].get<std::vector<double>>();
      const auto cnt = arm["per_task_count"].get<std::vector<std::size_t>>();
      if (acc.size() != cnt.size()) fail("arm '" + name + "' per-task arrays differ in length");
      double sum = 0.0;
      std::size_t present = 0;
      for (std::size_t t = 0; t < acc.size(); ++t) {
        if (!(acc[t] >= 0.0 && acc[t] <= 1.0)) fail("arm '" + name + "' accuracy outside [0,1]");
        if (t < cnt.size() && cnt[t] > 0) {
          sum += acc[t];
          ++present;
        }
      }
      const double mean = arm["mean_accuracy"].get<double>();
      if (!(mean >= 0.0 && mean <= 1.0)) fail("arm '" + name + "' mean accuracy outside [0,1]");
      if (present > 0 && std::abs(mean - sum / present) > 1e-12) fail("arm '" + name + "' mean disagrees with per-task values");
      if (arm.contains("routing")) {
        const auto& rs = arm["routing"];
        const double n_e = rs.value("n_experts", 0.0);
        const double n_t = rs.value("n_tasks", 0.0);
        const double mi = rs.value("mutual_information_bits", -1.0);
        const double h = rs.value("entropy_bits", -1.0);
        const double mi_cap = std::log2(std::max(1.0, std::min(n_e, n_t)));
        if (!(mi >= -1e-12 && mi <= mi_cap + 1e-9)) fail("arm '" + name + "' mutual information outside its bounds");
        if (!(h >= -1e-12 && h <= std::log2(std::max(1.0, n_e)) + 1e-9)) fail("arm '" + name + "' entropy outside its bounds");
        if (rs.contains("flip_rate")) {
          const double f = rs["flip_rate"].get<double>();
          if (!(f >= 0.0 && f <= 1.0)) fail("arm '" + name + "' flip rate outside [0,1]");
        }
      }
    }
    if (run.contains("param_gap") && run["param_gap"].get<double>() > tolerance) {
      fail("arms' active parameter counts differ by more than the tolerance");
    }
  }
  return bad;
}

// ---- benchmark ------------------------------------------------------------------

std::size_t single_lora_params_per_rank(const ModelConfig& cfg) {
  std::size_t n = 0;
  for (Site s : kAllSites) {
    const auto [out, in] = BaseModel::site_dims(cfg, s);
    n += in + out;
  }
  return n * static_cast<std::size_t>(cfg.n_layers);
}

int matched_baseline_rank(const ModelConfig& cfg, std::size_t target_active) {
  const double per_rank = static_cast<double>(single_lora_params_per_rank(cfg));
  return std::max(1, static_cast<int>(std::lround(static_cast<double>(target_active) / per_rank)));
}

void check_param_match(std::size_t moe_active, std::size_t baseline_trainable, double tolerance) {
  const double hi = static_cast<double>(std::max(moe_active, baseline_trainable));
  const double gap = std::abs(static_cast<double>(moe_active) - static_cast<double>(baseline_trainable)) / hi;
  if (gap > tolerance) {
    throw ConfigError("parameter mismatch: MoE arm has " + std::to_string(moe_active) +
                      " active parameters, single-LoRA arm has " + std::to_string(baseline_trainable) +
                      " trainable (gap " + std::to_string(gap * 100.0) + "%, limit " +
                      std::to_string(tolerance * 100.0) + "%)");
  }
}

MoEArmResult train_moe_arm(std::shared_ptr<const BaseModel> base, std::span<const TaskInstance> train,
                           const Config& cfg) {
  MoEArmResult r{AdaptedModel(base), {}};
  Stage1Result s1 = run_stage1(base, train, cfg.stage(1), cfg.adapters);
  r.model = init_stage2_from_stage1(base, s1.outcome.checkpoint, cfg.adapters);
  r.stages.push_back(std::move(s1.outcome));
  r.stages.push_back(run_stage2(r.model, train, cfg.stage(2)));
  freeze_gates(r.model);
  r.stages.push_back(run_stage3(r.model, train, cfg.stage(3)));
  return r;
}

AdaptedModel train_single_lora_arm(std::shared_ptr<const BaseModel> base, std::span<const TaskInstance> train,
                                   const Config& cfg, int rank) {
  AdapterConfig ac = cfg.adapters;
  ac.rank = rank;
  // Same α/r ratio as the MoE arm's experts.
  ac.alpha = cfg.adapters.alpha / cfg.adapters.rank * rank;
  StageConfig sc = cfg.stage(1);
  sc.steps = cfg.total_adapter_steps();
  Rng init = Rng::split(sc.seed, RngStream::init, 1);
  AdaptedModel m = attach_adapters(std::move(base), PlacementMap::single_lora(), ac, init);
  train_adapters(m, train, sc);
  return m;
}

EvalReport run_conflict_benchmark(const Config& cfg_in, const ProgressFn& progress) {
  cfg_in.validate();
  auto say = [&](const std::string& msg) {
    if (progress) progress(msg);
  };
  EvalReport report;
  report.seed = cfg_in.seed;
  report.config = cfg_in;
  std::vector<std::uint64_t> seeds = cfg_in.benchmark.seeds;
  if (seeds.empty()) seeds.push_back(cfg_in.seed);
  const auto specs = cfg_in.task_specs();
  const EvalOptions opt{cfg_in.routing.mode, cfg_in.routing.pooling};

  for (std::uint64_t seed : seeds) {
    Config cfg = cfg_in;
    cfg.seed = seed;
    say("seed " + std::to_string(seed) + ": corpus");
    const Corpus corpus = gen_corpus(specs, cfg.tasks.sizes, seed);
    say("seed " + std::to_string(seed) + ": pretraining base");
    auto base = std::make_shared<const BaseModel>(pretrain_base(cfg.model, cfg.pretrain, seed));

    say("seed " + std::to_string(seed) + ": MoE arm");
    MoEArmResult moe = train_moe_arm(base, corpus.train, cfg);
    ArmReport b;
    b.name = "moe";
    b.rank = cfg.adapters.rank;
    b.trainable_params = adapter_scalars(moe.model);
    b.active_params = moe.model.count_active();

    const int rank_a = cfg.benchmark.baseline_rank > 0 ? cfg.benchmark.baseline_rank
                                                       : matched_baseline_rank(cfg.model, b.active_params);
    const std::size_t expected_a = single_lora_params_per_rank(cfg.model) * static_cast<std::size_t>(rank_a);
    check_param_match(b.active_params, expected_a, cfg.benchmark.param_tolerance);

    say("seed " + std::to_string(seed) + ": single-LoRA arm (rank " + std::to_string(rank_a) + ")");
    AdaptedModel single = train_single_lora_arm(base, corpus.train, cfg, rank_a);
    ArmReport a;
    a.name = "single_lora";
    a.rank = rank_a;
    a.trainable_params = adapter_scalars(single);
    a.active_params = single.count_active();
    check_param_match(b.active_params, a.trainable_params, cfg.benchmark.param_tolerance);

    say("seed " + std::to_string(seed) + ": evaluating");
    std::vector<RoutingTrace> traces;
    b.accuracy = eval_accuracy(moe.model, corpus.test, specs.size(), opt, &traces);
    RoutingStats stats = routing_stats(traces, static_cast<std::size_t>(cfg.adapters.n_experts), specs.size());
    stats.flip_rate = routing_flip_rate(moe.model, corpus.test, cfg.stage(2).noise_sigma, seed, opt);
    b.routing = std::move(stats);
    a.accuracy = eval_accuracy(single, corpus.test, specs.size(), opt);

    RunReport run;
    run.seed = seed;
    run.arms.push_back(std::move(b));
    run.arms.push_back(std::move(a));
    report.runs.push_back(std::move(run));
  }
  return report;
}

}  // namespace awaker
