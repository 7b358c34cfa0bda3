// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multi-task corpus. Every task reads the same kind of digit string
// and differs only in its instruction tokens and its transform, so one input
// demands four different answers.
//
// Token layout: BOS instr... | SEP digits... SEP | response...
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "awaker/instance.hpp"
#include "awaker/rng.hpp"
#include "json.hpp"

namespace awaker {

namespace vocab {
inline constexpr int kDigits = 10;  // ids 0..9
inline constexpr int kBos = 10;
inline constexpr int kSep = 11;
inline constexpr int kFirstInstruction = 12;
}  // namespace vocab

enum class Transform : std::uint8_t { copy, reverse, increment_mod10, sort_ascending };

std::string_view transform_name(Transform t);
Transform transform_from_name(std::string_view name);
std::vector<int> apply_transform(Transform t, std::span<const int> input);

struct TaskSpec {
  int id = 0;
  std::vector<int> instruction;
  Transform transform = Transform::copy;
  int min_len = 4;
  int max_len = 6;
};

/// The four default tasks, instruction tokens {12+2t, 13+2t}.
std::vector<TaskSpec> default_task_specs(int min_len, int max_len);

TaskInstance make_instance(const TaskSpec& spec, std::span<const int> input);

struct SplitSizes {
  int train = 2000;
  int val = 100;
  int test = 400;
};

struct Corpus {
  std::vector<TaskInstance> train;
  std::vector<TaskInstance> val;
  std::vector<TaskInstance> test;
};

/// Balanced per-task splits; val/test inputs avoid the task's training inputs
/// whenever the input space allows. Deterministic in `seed`.
Corpus gen_corpus(const std::vector<TaskSpec>& specs, SplitSizes sizes, std::uint64_t seed);

void validate_task_specs(const std::vector<TaskSpec>& specs, int vocab_size);

std::string to_jsonl(std::span<const TaskInstance> instances);
std::vector<TaskInstance> parse_jsonl(std::string_view text);
void write_jsonl(const std::filesystem::path& path, std::span<const TaskInstance> instances);
std::vector<TaskInstance> read_jsonl(const std::filesystem::path& path);

/// Instruction-free sequence families used to pretrain the frozen base.
struct PretrainMix {
  double random = 1.0;  // i.i.d. digit strings
  double repeat = 1.0;  // x SEP x
  double mirror = 1.0;  // x SEP reverse(x)
  double count = 1.0;   // runs a, a+1, ... (mod 10)
  int min_len = 3;
  int max_len = 8;
};

void to_json(nlohmann::json& j, const PretrainMix& m);
void from_json(const nlohmann::json& j, PretrainMix& m);

/// One pretraining sequence; the loss covers every position after BOS.
std::vector<int> gen_pretrain_sequence(const PretrainMix& mix, Rng& rng);

}  // namespace awaker
