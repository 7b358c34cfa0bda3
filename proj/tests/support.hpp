// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference oracle shared by the unit tests.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <vector>

#include "awaker/model.hpp"
#include "awaker/routing.hpp"
#include "awaker/tasks.hpp"
#include "awaker/tensor.hpp"

namespace awaker::test {

/// |a − n| / max(|a|, |n|, floor)
inline double rel_err(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Largest relative error between the tape gradient of `loss()` and central
/// differences, over every entry of every tensor in `params`.
inline double max_grad_error(const std::function<Tensor()>& loss, std::vector<Tensor> params, double step = 1e-5) {
  for (auto& p : params) p.zero_grad();
  backward(loss());
  double worst = 0.0;
  for (auto& p : params) {
    std::vector<double> analytic(p.grad().begin(), p.grad().end());
    if (analytic.empty()) analytic.assign(p.numel(), 0.0);
    auto data = p.mutable_data();
    NoGradGuard no_grad;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double keep = data[i];
      data[i] = keep + step;
      const double up = loss().item();
      data[i] = keep - step;
      const double down = loss().item();
      data[i] = keep;
      worst = std::max(worst, rel_err(analytic[i], (up - down) / (2.0 * step)));
    }
  }
  return worst;
}

inline Tensor random_tensor(Shape shape, std::uint64_t seed, bool requires_grad = true, double scale = 1.0) {
  std::vector<double> v(shape_numel(shape));
  std::uint64_t s = seed * 0x9E3779B97F4A7C15ULL + 1;
  for (double& x : v) {
    s ^= s << 13;
    s ^= s >> 7;
    s ^= s << 17;
    x = scale * (static_cast<double>(s % 2000001) / 1000000.0 - 1.0);
  }
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

/// Eval-mode logits, routing through a fresh context when the model is gated.
inline Tensor logits_of(const AdaptedModel& m, const TaskInstance& inst,
                        RoutingMode mode = RoutingMode::shared_embedding) {
  NoGradGuard no_grad;
  if (!m.has_gates()) return m.forward(inst, nullptr);
  RoutingContext ctx = make_routing_context(m, inst, mode, false, nullptr);
  return m.forward(inst, &ctx);
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

inline std::vector<TaskInstance> some_instances(int count, std::uint64_t seed, int min_len = 3, int max_len = 6) {
  const auto specs = default_task_specs(min_len, max_len);
  Rng rng(seed);
  std::vector<TaskInstance> out;
  for (int i = 0; i < count; ++i) {
    const TaskSpec& s = specs[static_cast<std::size_t>(i) % specs.size()];
    std::vector<int> input(static_cast<std::size_t>(rng.uniform_int(s.min_len, s.max_len)));
    for (int& d : input) d = rng.uniform_int(0, 9);
    out.push_back(make_instance(s, input));
  }
  return out;
}

/// Sets every adapter tensor (B included) to N(0, scale²).
inline void scramble(AdaptedModel& m, std::uint64_t seed, double scale = 0.3) {
  Rng rng(seed);
  for (auto& p : m.parameters()) {
    for (double& v : p.tensor.mutable_data()) v = rng.normal(0.0, scale);
  }
}

inline std::shared_ptr<const BaseModel> random_base(std::uint64_t seed, ModelConfig cfg = {}) {
  Rng rng(seed);
  return std::make_shared<const BaseModel>(BaseModel::init(cfg, rng));
}

}  // namespace awaker::test
