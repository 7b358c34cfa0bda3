// SPDX-License-Identifier: Apache-2.0
#include "awaker/optim.hpp"

#include <cmath>
#include <numbers>

#include "awaker/error.hpp"

namespace awaker {

AdamW::AdamW(const std::vector<NamedTensor>& params, AdamWConfig cfg) : cfg_(cfg) {
  for (const auto& p : params) {
    if (!p.tensor.requires_grad()) continue;
    slots_.push_back({p.name, p.tensor, std::vector<double>(p.tensor.numel(), 0.0),
                      std::vector<double>(p.tensor.numel(), 0.0)});
  }
}

void AdamW::step(double lr) {
  if (!(lr > 0.0)) throw ConfigError("optimizer learning rate must be positive, got " + std::to_string(lr));
  ++steps_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
  for (auto& slot : slots_) {
    auto w = slot.param.mutable_data();
    const auto g = slot.param.grad();
    const bool has_grad = !g.empty();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = has_grad ? g[i] : 0.0;
      slot.m[i] = cfg_.beta1 * slot.m[i] + (1.0 - cfg_.beta1) * gi;
      slot.v[i] = cfg_.beta2 * slot.v[i] + (1.0 - cfg_.beta2) * gi * gi;
      const double mhat = slot.m[i] / bc1;
      const double vhat = slot.v[i] / bc2;
      w[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[i]);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& slot : slots_) slot.param.zero_grad();
}

double cosine_lr(std::int64_t step, std::int64_t total, double base_lr, std::int64_t warmup) {
  if (total <= 0) throw ConfigError("cosine_lr: total steps must be positive");
  if (warmup < 0 || warmup > total) throw ConfigError("cosine_lr: warmup must lie in [0, total]");
  if (step < 0 || step > total) throw ConfigError("cosine_lr: step outside [0, total]");
  if (step < warmup) return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
  if (total == warmup) return base_lr;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace awaker
