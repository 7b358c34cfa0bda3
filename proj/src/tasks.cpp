// SPDX-License-Identifier: Apache-2.0
#include "awaker/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "awaker/error.hpp"

namespace awaker {

std::string_view transform_name(Transform t) {
  switch (t) {
    case Transform::copy: return "copy";
    case Transform::reverse: return "reverse";
    case Transform::increment_mod10: return "increment_mod10";
    case Transform::sort_ascending: return "sort_ascending";
  }
  return "?";
}

Transform transform_from_name(std::string_view name) {
  for (Transform t : {Transform::copy, Transform::reverse, Transform::increment_mod10,
                      Transform::sort_ascending}) {
    if (transform_name(t) == name) return t;
  }
  throw ConfigError("unknown transform '" + std::string(name) + "'");
}

std::vector<int> apply_transform(Transform t, std::span<const int> input) {
  std::vector<int> out(input.begin(), input.end());
  switch (t) {
    case Transform::copy: break;
    case Transform::reverse: std::reverse(out.begin(), out.end()); break;
    case Transform::increment_mod10:
      for (int& d : out) d = (d + 1) % 10;
      break;
    case Transform::sort_ascending: std::sort(out.begin(), out.end()); break;
  }
  return out;
}

std::vector<TaskSpec> default_task_specs(int min_len, int max_len) {
  const Transform ts[] = {Transform::copy, Transform::reverse, Transform::increment_mod10,
                          Transform::sort_ascending};
  std::vector<TaskSpec> specs;
  for (int t = 0; t < 4; ++t) {
    specs.push_back({t, {vocab::kFirstInstruction + 2 * t, vocab::kFirstInstruction + 2 * t + 1},
                     ts[t], min_len, max_len});
  }
  return specs;
}

TaskInstance make_instance(const TaskSpec& spec, std::span<const int> input) {
  TaskInstance inst;
  inst.task = spec.id;
  inst.tokens.push_back(vocab::kBos);
  inst.tokens.insert(inst.tokens.end(), spec.instruction.begin(), spec.instruction.end());
  inst.instr_end = inst.tokens.size();
  inst.tokens.push_back(vocab::kSep);
  inst.tokens.insert(inst.tokens.end(), input.begin(), input.end());
  inst.tokens.push_back(vocab::kSep);
  inst.resp_start = inst.tokens.size();
  const auto resp = apply_transform(spec.transform, input);
  inst.tokens.insert(inst.tokens.end(), resp.begin(), resp.end());
  return inst;
}

void validate_task_specs(const std::vector<TaskSpec>& specs, int vocab_size) {
  if (specs.size() < 2) throw ConfigError("the conflict corpus needs at least two tasks");
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& s = specs[i];
    if (s.id != static_cast<int>(i)) throw ConfigError("task ids must be 0..n-1 in order");
    if (s.instruction.empty()) throw ConfigError("task " + std::to_string(i) + " has no instruction");
    for (int tok : s.instruction) {
      if (tok < vocab::kFirstInstruction || tok >= vocab_size) {
        throw ConfigError("instruction token " + std::to_string(tok) + " outside the instruction range");
      }
    }
    if (s.min_len < 1 || s.max_len < s.min_len) throw ConfigError("invalid input length range");
    if (s.min_len != specs.front().min_len || s.max_len != specs.front().max_len) {
      throw ConfigError("all tasks must share one input distribution (same length range)");
    }
  }
  for (std::size_t i = 0; i < specs.size(); ++i)
    for (std::size_t j = 0; j < specs.size(); ++j) {
      if (i == j) continue;
      const auto& a = specs[i].instruction;
      const auto& b = specs[j].instruction;
      if (a.size() <= b.size() && std::equal(a.begin(), a.end(), b.begin())) {
        throw ConfigError("instruction of task " + std::to_string(i) + " is a prefix of task " +
                          std::to_string(j) + "'s");
      }
    }
}

Corpus gen_corpus(const std::vector<TaskSpec>& specs, SplitSizes sizes, std::uint64_t seed) {
  validate_task_specs(specs, 1 << 30);
  if (sizes.train < 0 || sizes.val < 0 || sizes.test < 0) throw ConfigError("negative split size");
  Rng rng = Rng::split(seed, RngStream::data, 0xC0);
  Corpus corpus;
  for (const auto& spec : specs) {
    std::set<std::vector<int>> seen_train;
    auto draw = [&](bool held_out) {
      std::vector<int> input;
      for (int attempt = 0; attempt < 1000; ++attempt) {
        const int len = rng.uniform_int(spec.min_len, spec.max_len);
        input.assign(static_cast<std::size_t>(len), 0);
        for (int& d : input) d = rng.uniform_int(0, 9);
        if (!held_out || !seen_train.contains(input)) break;
      }
      return input;
    };
    for (int i = 0; i < sizes.train; ++i) {
      auto input = draw(false);
      seen_train.insert(input);
      corpus.train.push_back(make_instance(spec, input));
    }
    for (int i = 0; i < sizes.val; ++i) corpus.val.push_back(make_instance(spec, draw(true)));
    for (int i = 0; i < sizes.test; ++i) corpus.test.push_back(make_instance(spec, draw(true)));
  }
  std::shuffle(corpus.train.begin(), corpus.train.end(), rng.engine());
  std::shuffle(corpus.val.begin(), corpus.val.end(), rng.engine());
  std::shuffle(corpus.test.begin(), corpus.test.end(), rng.engine());
  return corpus;
}

std::string to_jsonl(std::span<const TaskInstance> instances) {
  std::string out;
  for (const auto& inst : instances) {
    nlohmann::ordered_json j;
    j["task"] = inst.task;
    j["tokens"] = inst.tokens;
    j["instr_end"] = inst.instr_end;
    j["resp_start"] = inst.resp_start;
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<TaskInstance> parse_jsonl(std::string_view text) {
  std::vector<TaskInstance> out;
  std::istringstream is{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      TaskInstance inst;
      inst.task = j.at("task").get<int>();
      inst.tokens = j.at("tokens").get<std::vector<int>>();
      inst.instr_end = j.at("instr_end").get<std::size_t>();
      inst.resp_start = j.at("resp_start").get<std::size_t>();
      inst.segments().validate();
      out.push_back(std::move(inst));
    } catch (const nlohmann::json::exception& e) {
      throw InputError("corpus line " + std::to_string(lineno) + ": " + e.what());
    } catch (const InputError& e) {
      throw InputError("corpus line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_jsonl(const std::filesystem::path& path, std::span<const TaskInstance> instances) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot write " + path.string());
  os << to_jsonl(instances);
}

std::vector<TaskInstance> read_jsonl(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_jsonl(ss.str());
}

void to_json(nlohmann::json& j, const PretrainMix& m) {
  j = {{"random", m.random}, {"repeat", m.repeat},   {"mirror", m.mirror},
       {"count", m.count},   {"min_len", m.min_len}, {"max_len", m.max_len}};
}

void from_json(const nlohmann::json& j, PretrainMix& m) {
  m.random = j.value("random", m.random);
  m.repeat = j.value("repeat", m.repeat);
  m.mirror = j.value("mirror", m.mirror);
  m.count = j.value("count", m.count);
  m.min_len = j.value("min_len", m.min_len);
  m.max_len = j.value("max_len", m.max_len);
}

std::vector<int> gen_pretrain_sequence(const PretrainMix& mix, Rng& rng) {
  const double total = mix.random + mix.repeat + mix.mirror + mix.count;
  if (!(total > 0.0)) throw ConfigError("pretraining mix has no positive weight");
  const int len = rng.uniform_int(mix.min_len, mix.max_len);
  std::vector<int> x(static_cast<std::size_t>(len));
  for (int& d : x) d = rng.uniform_int(0, 9);

  std::vector<int> seq{vocab::kBos};
  double pick = rng.uniform(0.0, total);
  if ((pick -= mix.random) < 0.0) {
    const int extra = rng.uniform_int(mix.min_len, mix.max_len);
    for (int i = 0; i < len + extra + 1; ++i) seq.push_back(rng.uniform_int(0, 9));
  } else if ((pick -= mix.repeat) < 0.0) {
    seq.push_back(vocab::kSep);
    seq.insert(seq.end(), x.begin(), x.end());
    seq.push_back(vocab::kSep);
    seq.insert(seq.end(), x.begin(), x.end());
  } else if ((pick -= mix.mirror) < 0.0) {
    seq.push_back(vocab::kSep);
    seq.insert(seq.end(), x.begin(), x.end());
    seq.push_back(vocab::kSep);
    seq.insert(seq.end(), x.rbegin(), x.rend());
  } else {
    seq.push_back(vocab::kSep);
    int a = rng.uniform_int(0, 9);
    for (int i = 0; i < 2 * len + 1; ++i) seq.push_back((a++) % 10);
  }
  return seq;
}

}  // namespace awaker
