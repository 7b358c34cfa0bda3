// SPDX-License-Identifier: Apache-2.0
#include "awaker/config.hpp"

#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "awaker/error.hpp"

namespace awaker {

Config Config::for_profile(std::string_view profile) {
  Config c;
  if (profile == "toy") {
    c.profile = "toy";
    return c;
  }
  if (profile == "paper") {
    c.profile = "paper";
    c.adapters.rank = 256;
    c.adapters.alpha = 512.0;
    c.stages[0].lr = 1e-5;
    c.stages[1].lr = 1e-5;
    c.stages[2].lr = 5e-6;
    return c;
  }
  throw ConfigError("unknown profile '" + std::string(profile) + "' (expected toy or paper)");
}

void Config::validate() const {
  model.validate();
  adapters.validate();
  for (int s = 1; s <= 3; ++s) {
    const StageConfig& sc = stages[static_cast<std::size_t>(s - 1)];
    if (sc.stage != s) throw ConfigError("stages[" + std::to_string(s - 1) + "] must be stage " + std::to_string(s));
    sc.validate();
  }
  if (stages[2].trainable.gates) throw ConfigError("stage 3 must not train the gates");
  if (pretrain.steps < 0 || pretrain.batch_size < 1 || !(pretrain.lr > 0.0)) {
    throw ConfigError("pretrain needs steps >= 0, batch_size >= 1 and lr > 0");
  }
  if (tasks.min_len < 1 || tasks.max_len < tasks.min_len) {
    throw ConfigError("tasks need 1 <= min_len <= max_len");
  }
  // BOS + 2 instruction tokens + SEP + input + SEP + response.
  if (5 + 2 * tasks.max_len > model.max_seq) {
    throw ConfigError("tasks.max_len " + std::to_string(tasks.max_len) + " does not fit max_seq " +
                      std::to_string(model.max_seq));
  }
  if (tasks.sizes.train < 1 || tasks.sizes.val < 0 || tasks.sizes.test < 1) {
    throw ConfigError("tasks need train >= 1, val >= 0 and test >= 1 instances per task");
  }
  if (!(benchmark.param_tolerance >= 0.0)) throw ConfigError("benchmark.param_tolerance must be >= 0");
  if (benchmark.baseline_rank < 0) throw ConfigError("benchmark.baseline_rank must be >= 0");
  validate_task_specs(task_specs(), model.vocab);
}

StageConfig Config::stage(int s) const {
  if (s < 1 || s > 3) throw ConfigError("stage must be 1, 2 or 3, got " + std::to_string(s));
  StageConfig sc = stages[static_cast<std::size_t>(s - 1)];
  sc.seed = seed;
  sc.routing_mode = routing.mode;
  sc.pooling = routing.pooling;
  return sc;
}

std::vector<TaskSpec> Config::task_specs() const {
  return default_task_specs(tasks.min_len, tasks.max_len);
}

int Config::total_adapter_steps() const {
  return stages[0].steps + stages[1].steps + stages[2].steps;
}

void to_json(nlohmann::json& j, const Config& c) {
  nlohmann::json stages = nlohmann::json::array();
  for (int s = 1; s <= 3; ++s) {
    nlohmann::json sj = c.stages[static_cast<std::size_t>(s - 1)];
    sj.erase("seed");
    sj.erase("routing_mode");
    sj.erase("pooling");
    stages.push_back(std::move(sj));
  }
  j = {{"profile", c.profile},
       {"seed", c.seed},
       {"model", c.model},
       {"adapters", c.adapters},
       {"routing", {{"mode", routing_mode_name(c.routing.mode)}, {"pooling", pooling_name(c.routing.pooling)}}},
       {"pretrain", c.pretrain},
       {"stages", std::move(stages)},
       {"tasks",
        {{"min_len", c.tasks.min_len},
         {"max_len", c.tasks.max_len},
         {"train", c.tasks.sizes.train},
         {"val", c.tasks.sizes.val},
         {"test", c.tasks.sizes.test}}},
       {"benchmark",
        {{"param_tolerance", c.benchmark.param_tolerance},
         {"baseline_rank", c.benchmark.baseline_rank},
         {"seeds", c.benchmark.seeds}}}};
}

namespace {

void merge_object(nlohmann::json& target, const nlohmann::json& patch) {
  for (auto it = patch.begin(); it != patch.end(); ++it) target[it.key()] = it.value();
}

template <typename T>
void merge_section(T& value, const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) return;
  if (!j[key].is_object()) throw ConfigError(std::string("config section '") + key + "' must be an object");
  nlohmann::json current = value;
  merge_object(current, j[key]);
  value = current.get<T>();
}

void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed) ok = ok || it.key() == k;
    if (!ok) throw ConfigError("unknown key '" + it.key() + "' in " + where);
  }
}

}  // namespace

void merge_config(Config& c, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  check_keys(j, {"profile", "seed", "model", "adapters", "routing", "pretrain", "stages", "tasks", "benchmark"},
             "config");
  try {
    if (j.contains("profile")) c.profile = j["profile"].get<std::string>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    merge_section(c.model, j, "model");
    merge_section(c.adapters, j, "adapters");
    merge_section(c.pretrain, j, "pretrain");
    if (j.contains("routing")) {
      const auto& r = j["routing"];
      check_keys(r, {"mode", "pooling"}, "routing");
      if (r.contains("mode")) c.routing.mode = routing_mode_from_name(r["mode"].get<std::string>());
      if (r.contains("pooling")) c.routing.pooling = pooling_from_name(r["pooling"].get<std::string>());
    }
    if (j.contains("stages")) {
      const auto& arr = j["stages"];
      if (!arr.is_array() || arr.size() > 3) throw ConfigError("'stages' must be an array of at most 3 objects");
      for (std::size_t i = 0; i < arr.size(); ++i) {
        const int s = arr[i].value("stage", static_cast<int>(i) + 1);
        if (s < 1 || s > 3) throw ConfigError("stage must be 1, 2 or 3, got " + std::to_string(s));
        StageConfig& sc = c.stages[static_cast<std::size_t>(s - 1)];
        nlohmann::json current = sc;
        merge_object(current, arr[i]);
        current["stage"] = s;
        sc = current.get<StageConfig>();
      }
    }
    if (j.contains("tasks")) {
      const auto& t = j["tasks"];
      check_keys(t, {"min_len", "max_len", "train", "val", "test"}, "tasks");
      c.tasks.min_len = t.value("min_len", c.tasks.min_len);
      c.tasks.max_len = t.value("max_len", c.tasks.max_len);
      c.tasks.sizes.train = t.value("train", c.tasks.sizes.train);
      c.tasks.sizes.val = t.value("val", c.tasks.sizes.val);
      c.tasks.sizes.test = t.value("test", c.tasks.sizes.test);
    }
    if (j.contains("benchmark")) {
      const auto& b = j["benchmark"];
      check_keys(b, {"param_tolerance", "baseline_rank", "seeds"}, "benchmark");
      c.benchmark.param_tolerance = b.value("param_tolerance", c.benchmark.param_tolerance);
      c.benchmark.baseline_rank = b.value("baseline_rank", c.benchmark.baseline_rank);
      if (b.contains("seeds")) c.benchmark.seeds = b["seeds"].get<std::vector<std::uint64_t>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid config value: ") + e.what());
  }
}

std::optional<std::uint64_t> seed_from_env() {
  const char* raw = std::getenv("AWAKER_SEED");
  if (raw == nullptr || *raw == '\0') return std::nullopt;
  char* end = nullptr;
  errno = 0;
  const unsigned long long v = std::strtoull(raw, &end, 10);
  if (errno != 0 || *end != '\0' || raw[0] == '-') {
    throw ConfigError(std::string("AWAKER_SEED must be a non-negative integer, got '") + raw + "'");
  }
  return static_cast<std::uint64_t>(v);
}

Config load_config(const std::optional<std::filesystem::path>& path, const ConfigOverrides& over) {
  nlohmann::json file = nlohmann::json::object();
  if (path) {
    std::ifstream is(*path);
    if (!is) throw ConfigError("cannot read config " + path->string());
    try {
      file = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config " + path->string() + " is not valid JSON: " + e.what());
    }
    if (!file.is_object()) throw ConfigError("config must be a JSON object");
  }
  const std::string profile = over.profile ? *over.profile : file.value("profile", std::string("toy"));
  Config c = Config::for_profile(profile);
  merge_config(c, file);
  c.profile = profile;
  if (auto env = seed_from_env()) c.seed = *env;
  if (over.seed) c.seed = *over.seed;
  c.validate();
  return c;
}

}  // namespace awaker
