// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "awaker/tensor.hpp"

namespace awaker {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// AdamW with decoupled weight decay. Moment buffers are allocated only for
/// parameters that were trainable when the optimizer was built; frozen
/// tensors are never touched.
class AdamW {
 public:
  struct Slot {
    std::string name;
    Tensor param;
    std::vector<double> m;
    std::vector<double> v;
  };

  AdamW(const std::vector<NamedTensor>& params, AdamWConfig cfg = {});

  void step(double lr);
  void zero_grad();

  std::int64_t steps_taken() const { return steps_; }
  void set_steps_taken(std::int64_t steps) { steps_ = steps; }
  const AdamWConfig& config() const { return cfg_; }
  std::vector<Slot>& slots() { return slots_; }
  const std::vector<Slot>& slots() const { return slots_; }

 private:
  AdamWConfig cfg_;
  std::vector<Slot> slots_;
  std::int64_t steps_ = 0;
};

/// Linear warmup to base_lr over `warmup` steps, then half-cosine decay to 0
/// at `total`.
double cosine_lr(std::int64_t step, std::int64_t total, double base_lr, std::int64_t warmup);

}  // namespace awaker
