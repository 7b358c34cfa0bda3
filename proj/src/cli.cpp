// SPDX-License-Identifier: Apache-2.0
#include "awaker/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>

#include "CLI11.hpp"
#include "awaker/checkpoint.hpp"
#include "awaker/config.hpp"
#include "awaker/error.hpp"
#include "awaker/eval.hpp"
#include "awaker/invariants.hpp"
#include "awaker/training.hpp"

namespace awaker {

namespace {

namespace fs = std::filesystem;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string profile;
  std::string out = "awaker_run";
  int stage = 0;
  std::string checkpoint;
  std::string split = "test";
};

Config resolve_config(const Options& o, bool prefer_run_dir) {
  std::optional<fs::path> path;
  if (!o.config.empty()) {
    path = o.config;
  } else if (prefer_run_dir && fs::exists(fs::path(o.out) / "config.json")) {
    path = fs::path(o.out) / "config.json";
  }
  ConfigOverrides over;
  if (!o.profile.empty()) over.profile = o.profile;
  over.seed = o.seed;
  return load_config(path, over);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

fs::path require_file(const fs::path& path, const std::string& hint) {
  if (!fs::exists(path)) throw ConfigError(path.string() + " not found; " + hint);
  return path;
}

std::vector<TaskInstance> read_split(const Options& o, const std::string& split) {
  if (split != "train" && split != "val" && split != "test") {
    throw ConfigError("--split must be train, val or test, got '" + split + "'");
  }
  return read_jsonl(require_file(fs::path(o.out) / (split + ".jsonl"), "run `awaker gen-data` first"));
}

std::shared_ptr<const BaseModel> load_or_pretrain_base(const Config& cfg, const fs::path& dir, std::ostream& out) {
  const fs::path path = dir / "base.awck";
  if (fs::exists(path)) {
    BaseModel base = base_from_checkpoint(load_checkpoint(path));
    if (base.config() != cfg.model) throw ConfigError(path.string() + " was built for a different model config");
    return std::make_shared<const BaseModel>(std::move(base));
  }
  out << "pretraining base model (" << cfg.pretrain.steps << " steps)\n";
  auto base = std::make_shared<const BaseModel>(pretrain_base(cfg.model, cfg.pretrain, cfg.seed));
  save_checkpoint(path, base_checkpoint(*base, cfg.seed));
  out << "wrote " << path.string() << '\n';
  return base;
}

std::shared_ptr<const BaseModel> load_base(const Config& cfg, const fs::path& dir) {
  BaseModel base = base_from_checkpoint(
      load_checkpoint(require_file(dir / "base.awck", "run `awaker train --stage 1` first")));
  if (base.config() != cfg.model) throw ConfigError("base.awck was built for a different model config");
  return std::make_shared<const BaseModel>(std::move(base));
}

fs::path latest_checkpoint(const Options& o) {
  if (!o.checkpoint.empty()) return require_file(o.checkpoint, "check --checkpoint");
  for (const char* name : {"stage3.awck", "stage2.awck", "stage1.awck"}) {
    const fs::path p = fs::path(o.out) / name;
    if (fs::exists(p)) return p;
  }
  throw ConfigError("no stage checkpoint in " + o.out + "; run `awaker train --stage 1` first");
}

void print_losses(std::ostream& out, const StageOutcome& s) {
  if (s.losses.empty()) return;
  out << "  loss " << std::fixed << std::setprecision(4) << s.losses.front() << " -> " << s.losses.back()
      << " (final batch, eval mode: " << s.final_batch_loss << ")\n"
      << std::defaultfloat;
}

int cmd_gen_data(const Options& o, std::ostream& out) {
  const Config cfg = resolve_config(o, false);
  fs::create_directories(o.out);
  const Corpus corpus = gen_corpus(cfg.task_specs(), cfg.tasks.sizes, cfg.seed);
  write_json(fs::path(o.out) / "config.json", cfg);
  write_jsonl(fs::path(o.out) / "train.jsonl", corpus.train);
  write_jsonl(fs::path(o.out) / "val.jsonl", corpus.val);
  write_jsonl(fs::path(o.out) / "test.jsonl", corpus.test);
  out << "wrote " << corpus.train.size() << " train, " << corpus.val.size() << " val, " << corpus.test.size()
      << " test instances to " << o.out << '\n';
  return kExitOk;
}

int cmd_train(const Options& o, std::ostream& out) {
  if (o.stage < 1 || o.stage > 3) throw ConfigError("--stage must be 1, 2 or 3");
  const Config cfg = resolve_config(o, true);
  const fs::path dir = o.out;
  if (o.stage == 2) require_file(dir / "stage1.awck", "stage 2 starts from the Stage-1 checkpoint; run `awaker train --stage 1` first");
  if (o.stage == 3) require_file(dir / "stage2.awck", "stage 3 starts from the Stage-2 checkpoint; run `awaker train --stage 2` first");
  const auto train = read_split(o, "train");
  const StageConfig sc = cfg.stage(o.stage);

  StageOutcome outcome;
  if (o.stage == 1) {
    auto base = load_or_pretrain_base(cfg, dir, out);
    outcome = run_stage1(base, train, sc, cfg.adapters).outcome;
  } else {
    auto base = load_base(cfg, dir);
    if (o.stage == 2) {
      AdaptedModel m = init_stage2_from_stage1(base, load_checkpoint(dir / "stage1.awck"), cfg.adapters);
      outcome = run_stage2(m, train, sc);
    } else {
      const Checkpoint ck2 = load_checkpoint(dir / "stage2.awck");
      if (ck2.stage() != 2) throw ConfigError("stage2.awck is tagged stage " + std::to_string(ck2.stage()));
      AdaptedModel m = model_from_checkpoint(base, ck2);
      freeze_gates(m);
      outcome = run_stage3(m, train, sc);
    }
  }
  const fs::path path = dir / ("stage" + std::to_string(o.stage) + ".awck");
  save_checkpoint(path, outcome.checkpoint);
  out << "stage " << o.stage << ": " << sc.steps << " steps\n";
  print_losses(out, outcome);
  out << "wrote " << path.string() << '\n';
  return kExitOk;
}

EvalOptions eval_options(const Config& cfg) { return {cfg.routing.mode, cfg.routing.pooling}; }

int cmd_eval(const Options& o, std::ostream& out) {
  const Config cfg = resolve_config(o, true);
  auto base = load_base(cfg, o.out);
  const fs::path ck_path = latest_checkpoint(o);
  const AdaptedModel m = model_from_checkpoint(base, load_checkpoint(ck_path));
  const auto split = read_split(o, o.split);
  const auto n_tasks = cfg.task_specs().size();

  ArmReport arm;
  arm.name = m.has_gates() ? "moe" : "single_lora";
  arm.rank = m.adapter_config().rank;
  for (const auto& p : m.parameters()) arm.trainable_params += p.tensor.numel();
  arm.active_params = m.count_active();
  std::vector<RoutingTrace> traces;
  arm.accuracy = eval_accuracy(m, split, n_tasks, eval_options(cfg), &traces);
  if (m.has_gates()) {
    arm.routing = routing_stats(traces, static_cast<std::size_t>(m.adapter_config().n_experts), n_tasks);
  }

  EvalReport report;
  report.seed = cfg.seed;
  report.config = cfg;
  report.runs.push_back(RunReport{cfg.seed, {arm}});
  const nlohmann::json j = report;
  const auto problems = validate_report(j);
  write_json(fs::path(o.out) / "report.json", j);
  out << "evaluated " << ck_path.filename().string() << " on " << split.size() << " " << o.split << " instances\n";
  for (std::size_t t = 0; t < n_tasks; ++t) {
    out << "  task " << t << " (" << transform_name(cfg.task_specs()[t].transform) << "): " << arm.accuracy.per_task[t] << '\n';
  }
  out << "  mean exact match: " << arm.accuracy.mean << '\n';
  if (arm.routing) out << "  task-expert MI: " << arm.routing->mutual_information_bits << " bits\n";
  out << "wrote " << (fs::path(o.out) / "report.json").string() << '\n';
  for (const auto& p : problems) out << "report violation: " << p << '\n';
  return problems.empty() ? kExitOk : kExitInvariant;
}

int cmd_inspect_routing(const Options& o, std::ostream& out) {
  const Config cfg = resolve_config(o, true);
  auto base = load_base(cfg, o.out);
  const AdaptedModel m = model_from_checkpoint(base, load_checkpoint(latest_checkpoint(o)));
  if (!m.has_gates()) throw ConfigError("checkpoint has no gated layers; inspect a Stage-2 or Stage-3 checkpoint");
  const auto split = read_split(o, o.split);
  const auto n_tasks = cfg.task_specs().size();
  const auto n_experts = static_cast<std::size_t>(m.adapter_config().n_experts);

  std::vector<RoutingTrace> traces;
  nlohmann::json instances = nlohmann::json::array();
  for (const auto& inst : split) {
    RoutingContext ctx = route_instance(m, inst, cfg.routing.mode, false, nullptr, cfg.routing.pooling);
    traces.push_back(trace_of(ctx, inst.task));
    nlohmann::json decisions = nlohmann::json::array();
    for (const auto& d : ctx.log()) {
      decisions.push_back({{"layer", AdaptedModel::site_id(d.block, d.site)},
                           {"selected", d.gate.selected},
                           {"g_max", d.gate.g_max},
                           {"g_global", d.gate.g_global},
                           {"source", d.gate.source},
                           {"reused", d.reused}});
    }
    instances.push_back({{"task", inst.task}, {"decisions", std::move(decisions)}});
  }
  nlohmann::json layers = nlohmann::json::object();
  for (std::size_t b = 0; b < static_cast<std::size_t>(cfg.model.n_layers); ++b)
    for (Site s : kAllSites) {
      if (m.placement()[s].kind != AdapterKind::gated_moe) continue;
      layers[AdaptedModel::site_id(b, s)] = routing_stats(traces, n_experts, n_tasks, b, s);
    }
  RoutingStats ref = routing_stats(traces, n_experts, n_tasks);
  ref.flip_rate = routing_flip_rate(m, split, cfg.stage(2).noise_sigma, cfg.seed, eval_options(cfg));
  const nlohmann::json j = {{"split", o.split},
                            {"mode", routing_mode_name(cfg.routing.mode)},
                            {"pooling", pooling_name(cfg.routing.pooling)},
                            {"reference", ref},
                            {"layers", layers},
                            {"instances", instances}};
  write_json(fs::path(o.out) / "routing.json", j);
  out << "task x expert counts at " << AdaptedModel::site_id(ref.reference_block, ref.reference_site) << ":\n";
  for (std::size_t t = 0; t < n_tasks; ++t) {
    out << "  task " << t << ':';
    for (std::size_t e = 0; e < n_experts; ++e) out << ' ' << std::setw(5) << ref.joint[t][e];
    out << '\n';
  }
  out << "  MI " << ref.mutual_information_bits << " bits, utilization entropy " << ref.entropy_bits
      << " bits, flip rate " << *ref.flip_rate << '\n';
  out << "wrote " << (fs::path(o.out) / "routing.json").string() << '\n';
  return kExitOk;
}

int cmd_compare(const Options& o, std::ostream& out) {
  const Config cfg = resolve_config(o, false);
  fs::create_directories(o.out);
  const EvalReport report = run_conflict_benchmark(cfg, [&](const std::string& msg) { out << msg << '\n' << std::flush; });
  const nlohmann::json j = report;
  write_json(fs::path(o.out) / "report.json", j);
  for (const auto& run : report.runs) {
    const ArmReport* moe = run.arm("moe");
    const ArmReport* single = run.arm("single_lora");
    out << "seed " << run.seed << ": moe " << moe->accuracy.mean << " (" << moe->active_params << " active), single_lora "
        << single->accuracy.mean << " (rank " << single->rank << ", " << single->active_params << "), MI "
        << moe->routing->mutual_information_bits << " bits\n";
  }
  out << "wrote " << (fs::path(o.out) / "report.json").string() << '\n';
  const auto problems = validate_report(j);
  for (const auto& p : problems) out << "report violation: " << p << '\n';
  return problems.empty() ? kExitOk : kExitInvariant;
}

int cmd_selfcheck(const Options& o, std::ostream& out) {
  const std::uint64_t seed = o.seed ? *o.seed : seed_from_env().value_or(0);
  bool all = true;
  for (const auto& r : run_selfcheck(seed)) {
    all = all && r.passed;
    out << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << '\n';
  }
  out << (all ? "selfcheck passed\n" : "selfcheck FAILED\n");
  return all ? kExitOk : kExitInvariant;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Instance-routed MoE-LoRA adapters on a frozen toy transformer", "awaker"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("--config", o.config, "JSON config file");
  app.add_option("--seed", o.seed, "run seed (overrides AWAKER_SEED and the config)");
  app.add_option("--profile", o.profile, "hyperparameter profile")->check(CLI::IsMember({"toy", "paper"}));
  app.add_option("--out", o.out, "run directory")->capture_default_str();

  auto* gen = app.add_subcommand("gen-data", "write config.json and train/val/test JSONL");
  auto* train = app.add_subcommand("train", "run one training stage");
  train->add_option("--stage", o.stage, "stage to run")->required()->check(CLI::IsMember({1, 2, 3}));
  auto* eval = app.add_subcommand("eval", "exact-match accuracy of a stage checkpoint; writes report.json");
  auto* inspect = app.add_subcommand("inspect-routing", "routing statistics of a gated checkpoint; writes routing.json");
  for (auto* sub : {eval, inspect}) {
    sub->add_option("--checkpoint", o.checkpoint, "checkpoint (default: latest stage in --out)");
    sub->add_option("--split", o.split, "split to use")->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();
  }
  auto* compare = app.add_subcommand("compare", "MoE pipeline vs parameter-matched single LoRA; writes report.json");
  auto* selfcheck = app.add_subcommand("selfcheck", "run the invariant suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitConfig;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(o, out);
    if (train->parsed()) return cmd_train(o, out);
    if (eval->parsed()) return cmd_eval(o, out);
    if (inspect->parsed()) return cmd_inspect_routing(o, out);
    if (compare->parsed()) return cmd_compare(o, out);
    if (selfcheck->parsed()) return cmd_selfcheck(o, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const InputError& e) {
    err << "input error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitInvariant;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitInvariant;
  }
  return kExitConfig;
}

}  // namespace awaker
