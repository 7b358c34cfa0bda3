// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

namespace awaker {

/// Token layout of one instance: instruction [0, instr_end), input
/// [instr_end, resp_start), response [resp_start, size).
struct InstanceSegments {
  std::size_t instr_end = 0;
  std::size_t resp_start = 0;
  std::size_t size = 0;

  void validate() const;
  bool operator==(const InstanceSegments&) const = default;
};

struct TaskInstance {
  int task = 0;
  std::vector<int> tokens;
  std::size_t instr_end = 0;
  std::size_t resp_start = 0;

  InstanceSegments segments() const { return {instr_end, resp_start, tokens.size()}; }
  std::size_t response_length() const { return tokens.size() - resp_start; }

  /// Next-token targets (position t predicts token t+1) and the loss mask,
  /// which is set exactly where the predicted token lies in the response.
  std::vector<int> next_token_targets() const;
  std::vector<bool> response_mask() const;
};

}  // namespace awaker
