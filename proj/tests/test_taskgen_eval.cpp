// SPDX-License-Identifier: Apache-2.0
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "awaker/cli.hpp"
#include "awaker/config.hpp"
#include "awaker/error.hpp"
#include "awaker/eval.hpp"
#include "awaker/tasks.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace awaker;
using namespace awaker::test;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string out, err;
};

CliResult cli(std::vector<std::string> args) {
  std::vector<const char*> argv = {"awaker"};
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

fs::path scratch_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("awaker_test_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

const char* kTinyConfig = R"({
  "seed": 5,
  "model": {"d_model": 16, "n_heads": 2, "d_ff": 24, "n_layers": 1},
  "adapters": {"rank": 2, "alpha": 4.0},
  "pretrain": {"steps": 4, "warmup": 1},
  "stages": [{"steps": 3, "warmup": 1}, {"steps": 3, "warmup": 1}, {"steps": 3, "warmup": 1}],
  "tasks": {"min_len": 3, "max_len": 4, "train": 6, "val": 2, "test": 3},
  "benchmark": {"param_tolerance": 0.5}
})";

}  // namespace

TEST_SUITE("taskgen-eval") {

TEST_CASE("transforms") {
  const std::vector<int> x = {3, 1, 9, 1};
  CHECK(apply_transform(Transform::copy, x) == x);
  CHECK(apply_transform(Transform::reverse, x) == std::vector<int>{1, 9, 1, 3});
  CHECK(apply_transform(Transform::increment_mod10, x) == std::vector<int>{4, 2, 0, 2});
  CHECK(apply_transform(Transform::sort_ascending, x) == std::vector<int>{1, 1, 3, 9});
  for (Transform t : {Transform::copy, Transform::reverse, Transform::increment_mod10, Transform::sort_ascending}) {
    CHECK(transform_from_name(transform_name(t)) == t);
  }
  CHECK_THROWS_AS(transform_from_name("rot13"), ConfigError);
}

TEST_CASE("instance layout") {
  const auto specs = default_task_specs(4, 6);
  REQUIRE(specs.size() == 4);
  for (int t = 0; t < 4; ++t) CHECK(specs[static_cast<std::size_t>(t)].instruction == std::vector<int>{12 + 2 * t, 13 + 2 * t});
  const std::vector<int> x = {5, 0, 7, 2};
  const TaskInstance inst = make_instance(specs[1], x);
  CHECK(inst.tokens == std::vector<int>{10, 14, 15, 11, 5, 0, 7, 2, 11, 2, 7, 0, 5});
  CHECK(inst.instr_end == 3);
  CHECK(inst.resp_start == x.size() + 5);
  const auto mask = inst.response_mask();
  const auto targets = inst.next_token_targets();
  for (std::size_t t = 0; t < mask.size(); ++t) {
    CHECK(mask[t] == (t + 1 >= inst.resp_start && t + 1 < inst.tokens.size()));
    if (mask[t]) CHECK(targets[t] == inst.tokens[t + 1]);
  }
}

TEST_CASE("task validation") {
  auto specs = default_task_specs(4, 6);
  CHECK_NOTHROW(validate_task_specs(specs, 32));
  SUBCASE("prefix overlap") {
    specs[1].instruction = {12};
    CHECK_THROWS_AS(validate_task_specs(specs, 32), ConfigError);
  }
  SUBCASE("shared instruction") {
    specs[2].instruction = specs[3].instruction;
    CHECK_THROWS_AS(validate_task_specs(specs, 32), ConfigError);
  }
  SUBCASE("different input distributions") {
    specs[0].max_len = 5;
    CHECK_THROWS_AS(validate_task_specs(specs, 32), ConfigError);
  }
  SUBCASE("instruction outside the vocabulary") {
    specs[0].instruction = {40, 41};
    CHECK_THROWS_AS(validate_task_specs(specs, 32), ConfigError);
  }
}

TEST_CASE("corpus generation") {
  const auto specs = default_task_specs(4, 6);
  const Corpus c = gen_corpus(specs, {50, 10, 20}, 3);
  std::map<int, int> train, test;
  for (const auto& i : c.train) ++train[i.task];
  for (const auto& i : c.test) ++test[i.task];
  for (int t = 0; t < 4; ++t) {
    CHECK(train[t] == 50);
    CHECK(test[t] == 20);
  }
  CHECK(c.val.size() == 40);

  SUBCASE("responses follow each task's transform") {
    for (const auto& inst : c.train) {
      const std::vector<int> input(inst.tokens.begin() + 4, inst.tokens.begin() + static_cast<long>(inst.resp_start) - 1);
      const std::vector<int> resp(inst.tokens.begin() + static_cast<long>(inst.resp_start), inst.tokens.end());
      CHECK(resp == apply_transform(specs[static_cast<std::size_t>(inst.task)].transform, input));
      CHECK(input.size() >= 4);
      CHECK(input.size() <= 6);
    }
  }
  SUBCASE("test inputs avoid the task's training inputs") {
    std::set<std::vector<int>> seen;
    for (const auto& i : c.train) seen.insert(i.tokens);
    for (const auto& i : c.test) CHECK_FALSE(seen.contains(i.tokens));
  }
  SUBCASE("JSONL is deterministic in the seed") {
    CHECK(to_jsonl(c.train) == to_jsonl(gen_corpus(specs, {50, 10, 20}, 3).train));
    CHECK(to_jsonl(c.train) != to_jsonl(gen_corpus(specs, {50, 10, 20}, 4).train));
  }
  SUBCASE("JSONL round-trips with the documented fields") {
    const std::string text = to_jsonl(c.test);
    const auto first = nlohmann::json::parse(text.substr(0, text.find('\n')));
    CHECK(first.size() == 4);
    for (const char* k : {"task", "tokens", "instr_end", "resp_start"}) CHECK(first.contains(k));
    const auto back = parse_jsonl(text);
    REQUIRE(back.size() == c.test.size());
    for (std::size_t i = 0; i < back.size(); ++i) CHECK(back[i].tokens == c.test[i].tokens);
    CHECK(to_jsonl(back) == text);
  }
  SUBCASE("malformed JSONL names the line") {
    try {
      parse_jsonl("{\"task\":0,\"tokens\":[10,12,13,11,1,11,1],\"instr_end\":3,\"resp_start\":6}\n{oops}\n");
      FAIL("accepted malformed input");
    } catch (const InputError& e) {
      CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_jsonl("{\"task\":0,\"tokens\":[10,11],\"instr_end\":0,\"resp_start\":1}\n"), InputError);
  }
}

TEST_CASE("exact-match evaluation") {
  Rng rng(1);
  AdaptedModel m = attach_adapters(random_base(2), PlacementMap::awaker(), AdapterConfig{}, rng);
  scramble(m, 3, 0.2);
  const auto split = gen_corpus(default_task_specs(4, 6), {1, 0, 25}, 4).test;

  SUBCASE("greedy decoding agrees with teacher-forced exact match") {
    for (const auto& inst : split) {
      const auto decoded = greedy_decode(m, inst);
      const std::vector<int> resp(inst.tokens.begin() + static_cast<long>(inst.resp_start), inst.tokens.end());
      CHECK(decoded.size() == resp.size());
      CHECK((decoded == resp) == exact_match(m, inst));
    }
  }
  SUBCASE("accuracy is the per-task mean of exact matches") {
    std::vector<RoutingTrace> traces;
    const AccuracyReport r = eval_accuracy(m, split, 4, {}, &traces);
    CHECK(traces.size() == split.size());
    double mean = 0.0;
    for (int t = 0; t < 4; ++t) {
      int hits = 0, n = 0;
      for (const auto& inst : split) {
        if (inst.task != t) continue;
        ++n;
        hits += exact_match(m, inst) ? 1 : 0;
      }
      CHECK(r.counts[static_cast<std::size_t>(t)] == static_cast<std::size_t>(n));
      CHECK(r.per_task[static_cast<std::size_t>(t)] == static_cast<double>(hits) / n);
      mean += static_cast<double>(hits) / n / 4.0;
    }
    CHECK(r.mean == doctest::Approx(mean).epsilon(1e-15));
  }
  SUBCASE("an untrained model scores near chance") {
    Rng r2(5);
    AdaptedModel fresh = attach_adapters(random_base(6), PlacementMap::single_lora(), AdapterConfig{}, r2);
    CHECK(eval_accuracy(fresh, split, 4).mean <= 0.05);
  }
  SUBCASE("input errors") {
    CHECK_THROWS_AS(eval_accuracy(m, {}, 4), InputError);
    std::vector<TaskInstance> odd = {split[0]};
    odd[0].task = 9;
    CHECK_THROWS_AS(eval_accuracy(m, odd, 4), InputError);
  }
  SUBCASE("noise-free routing never flips") {
    CHECK(routing_flip_rate(m, split, 0.0, 7) == 0.0);
    const double f = routing_flip_rate(m, split, 5.0, 7);
    CHECK(f > 0.0);
    CHECK(f <= 1.0);
  }
}

TEST_CASE("parameter matching") {
  const ModelConfig mc;
  CHECK(single_lora_params_per_rank(mc) == 2176);
  CHECK(matched_baseline_rank(mc, 28672) == 13);
  CHECK(std::abs(13.0 * 2176 - 28672) / 28672 <= 0.05);
  CHECK_NOTHROW(check_param_match(28672, 28288, 0.05));
  try {
    check_param_match(28672, 2176, 0.05);
    FAIL("mismatch accepted");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("28672") != std::string::npos);
    CHECK(msg.find("2176") != std::string::npos);
  }
}

TEST_CASE("report validation") {
  ArmReport moe{"moe", {{0.5, 0.25}, {4, 4}, 0.375}, 63488, 28672, 8, std::nullopt};
  RoutingStats rs;
  rs.n_experts = 4;
  rs.n_tasks = 2;
  rs.utilization = {4, 4, 0, 0};
  rs.entropy_bits = 1.0;
  rs.mutual_information_bits = 1.0;
  rs.joint = {{4, 0, 0, 0}, {0, 4, 0, 0}};
  moe.routing = rs;
  ArmReport lora{"single_lora", {{0.25, 0.25}, {4, 4}, 0.25}, 28288, 28288, 13, std::nullopt};
  EvalReport rep;
  rep.seed = 1;
  rep.config = Config{};
  rep.runs = {RunReport{1, {moe, lora}}};
  const nlohmann::json j = rep;
  CHECK(validate_report(j).empty());
  CHECK(j["summary"]["moe_wins"] == 1);
  CHECK(j["runs"][0]["margin"].get<double>() == doctest::Approx(0.125));

  SUBCASE("inconsistent mean") {
    nlohmann::json bad = j;
    bad["runs"][0]["arms"][0]["mean_accuracy"] = 0.9;
    CHECK_FALSE(validate_report(bad).empty());
  }
  SUBCASE("mutual information past its ceiling") {
    nlohmann::json bad = j;
    bad["runs"][0]["arms"][0]["routing"]["mutual_information_bits"] = 1.5;
    CHECK_FALSE(validate_report(bad).empty());
  }
  SUBCASE("wrong schema tag") {
    nlohmann::json bad = j;
    bad["schema"] = "other";
    CHECK_FALSE(validate_report(bad).empty());
  }
}

TEST_CASE("configuration") {
  SUBCASE("profiles") {
    const Config toy = Config::for_profile("toy");
    CHECK(toy.adapters.rank == 8);
    CHECK(toy.total_adapter_steps() <= 1200);
    const Config paper = Config::for_profile("paper");
    CHECK(paper.adapters.rank == 256);
    CHECK(paper.adapters.alpha == 512.0);
    CHECK(paper.stages[0].lr == 1e-5);
    CHECK(paper.stages[1].lr == 1e-5);
    CHECK(paper.stages[2].lr == 5e-6);
    CHECK(paper.stages[0].batch_size == 4);
    CHECK_THROWS_AS(Config::for_profile("huge"), ConfigError);
  }
  SUBCASE("merge overrides a subset") {
    Config c;
    merge_config(c, nlohmann::json::parse(R"({"seed": 9, "stages": [{}, {"lr": 0.5}], "tasks": {"train": 7}})"));
    CHECK(c.seed == 9);
    CHECK(c.stages[1].lr == 0.5);
    CHECK(c.stages[0].lr == Config{}.stages[0].lr);
    CHECK(c.tasks.sizes.train == 7);
    CHECK_THROWS_AS(merge_config(c, nlohmann::json::parse(R"({"sed": 1})")), ConfigError);
    CHECK_THROWS_AS(merge_config(c, nlohmann::json::parse(R"({"seed": "x"})")), ConfigError);
    CHECK_THROWS_AS(merge_config(c, nlohmann::json::parse(R"({"tasks": {"trian": 1}})")), ConfigError);
  }
  SUBCASE("round-trip through JSON") {
    Config c = Config::for_profile("toy");
    c.seed = 77;
    Config back = Config::for_profile("toy");
    merge_config(back, nlohmann::json(c));
    CHECK(nlohmann::json(back) == nlohmann::json(c));
  }
  SUBCASE("validation") {
    Config c;
    c.tasks.max_len = 20;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    Config d;
    d.stages[2].trainable.gates = true;
    CHECK_THROWS_AS(d.validate(), ConfigError);
  }
  SUBCASE("seed precedence: flag, then environment, then file") {
    const fs::path dir = scratch_dir("seed");
    std::ofstream(dir / "c.json") << R"({"seed": 3})";
    ::unsetenv("AWAKER_SEED");
    CHECK(load_config(dir / "c.json", {}).seed == 3);
    ::setenv("AWAKER_SEED", "4", 1);
    CHECK(load_config(dir / "c.json", {}).seed == 4);
    CHECK(load_config(dir / "c.json", {std::nullopt, 5}).seed == 5);
    ::setenv("AWAKER_SEED", "four", 1);
    CHECK_THROWS_AS(load_config(dir / "c.json", {}), ConfigError);
    ::unsetenv("AWAKER_SEED");
    CHECK_THROWS_AS(load_config(dir / "missing.json", {}), ConfigError);
    fs::remove_all(dir);
  }
}

TEST_CASE("command line") {
  const fs::path dir = scratch_dir("cli");
  std::ofstream(dir / "tiny.json") << kTinyConfig;
  const std::string out = (dir / "run").string();
  const std::string cfg = (dir / "tiny.json").string();

  SUBCASE("usage errors exit 2") {
    CHECK(cli({"--bogus"}).code == kExitConfig);
    CHECK(cli({"train"}).code == kExitConfig);
    CHECK(cli({"train", "--stage", "4"}).code == kExitConfig);
    CHECK(cli({"--profile", "huge", "selfcheck"}).code == kExitConfig);
    CHECK(cli({"--config", (dir / "nope.json").string(), "gen-data", "--out", out}).code == kExitConfig);
  }
  SUBCASE("stages must run in order") {
    REQUIRE(cli({"--config", cfg, "--out", out, "gen-data"}).code == kExitOk);
    const CliResult r = cli({"--out", out, "train", "--stage", "2"});
    CHECK(r.code == kExitConfig);
    CHECK(r.err.find("stage1.awck") != std::string::npos);
  }
  SUBCASE("the full pipeline writes valid artifacts") {
    REQUIRE(cli({"--config", cfg, "--out", out, "gen-data"}).code == kExitOk);
    for (const char* f : {"config.json", "train.jsonl", "val.jsonl", "test.jsonl"}) CHECK(fs::exists(fs::path(out) / f));
    CHECK(parse_jsonl(slurp(fs::path(out) / "train.jsonl")).size() == 24);
    for (const char* s : {"1", "2", "3"}) REQUIRE(cli({"--out", out, "train", "--stage", s}).code == kExitOk);
    CHECK(fs::exists(fs::path(out) / "stage3.awck"));
    REQUIRE(cli({"--out", out, "eval"}).code == kExitOk);
    const auto report = nlohmann::json::parse(slurp(fs::path(out) / "report.json"));
    CHECK(validate_report(report).empty());
    REQUIRE(cli({"--out", out, "inspect-routing"}).code == kExitOk);
    const auto routing = nlohmann::json::parse(slurp(fs::path(out) / "routing.json"));
    CHECK(routing["reference"].contains("mutual_information_bits"));
    CHECK(routing["instances"].size() == 12);
  }
  fs::remove_all(dir);
}

}  // TEST_SUITE
