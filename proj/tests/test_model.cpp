// SPDX-License-Identifier: Apache-2.0
#include <map>

#include "awaker/error.hpp"
#include "awaker/model.hpp"
#include "awaker/routing.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace awaker;
using namespace awaker::test;

namespace {

struct CountOracle {
  std::size_t total = 0, stage3 = 0, active = 0;
};

// Independent count from the placement table: (d_in + d_out)·r per LoRA,
// n·d_in per gate.
CountOracle count_oracle(const ModelConfig& mc, const AdapterConfig& ac) {
  const std::size_t d = static_cast<std::size_t>(mc.d_model), f = static_cast<std::size_t>(mc.d_ff);
  const std::size_t r = static_cast<std::size_t>(ac.rank), n = static_cast<std::size_t>(ac.n_experts);
  const std::size_t attn = (d + d) * r, mlp = (d + f) * r;
  CountOracle c;
  for (int b = 0; b < mc.n_layers; ++b) {
    c.total += 3 * attn + (n + 1) * attn + n * d;   // q k v, o experts + gate
    c.total += (n + 1) * mlp + n * d;               // gate_proj experts + gate
    c.total += 2 * (n + 1) * mlp;                   // up, down
    c.stage3 += 3 * attn + (n + 1) * attn + 3 * (n + 1) * mlp;
    c.active += 3 * attn + 2 * attn + 3 * 2 * mlp;
  }
  return c;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("parameter counts of the toy model") {
  auto base = random_base(1);
  Rng rng(2);
  AdaptedModel m = attach_adapters(base, PlacementMap::awaker(), AdapterConfig{}, rng);
  const CountOracle oracle = count_oracle(ModelConfig{}, AdapterConfig{});
  CHECK(oracle.total == 63488);
  CHECK(m.count_trainable() == oracle.total);
  CHECK(m.count_active() == oracle.active);
  CHECK(m.count_active() == 28672);
  m.set_trainable(TrainableSet::for_stage(3));
  CHECK(m.count_trainable() == oracle.stage3);
  CHECK(m.count_trainable() == 62464);

  AdaptedModel s1 = attach_adapters(base, PlacementMap::single_lora(), AdapterConfig{}, rng);
  CHECK(s1.site(0, Site::q_proj).lora->num_params() == 1024);
  CHECK(s1.count_trainable() == s1.count_active());
  CHECK(s1.count_trainable() == 2 * (4 * 1024 + 3 * 1536));
}

TEST_CASE("counts follow the oracle across shapes") {
  for (int n : {1, 2, 4}) {
    for (int r : {1, 3, 8}) {
      ModelConfig mc;
      mc.d_model = 16;
      mc.n_heads = 2;
      mc.d_ff = 24;
      mc.n_layers = 1 + n % 2;
      AdapterConfig ac;
      ac.n_experts = n;
      ac.rank = r;
      Rng rng(static_cast<std::uint64_t>(10 * n + r));
      AdaptedModel m = attach_adapters(random_base(3, mc), PlacementMap::awaker(), ac, rng);
      const CountOracle o = count_oracle(mc, ac);
      CHECK(m.count_trainable() == o.total);
      CHECK(m.count_active() == o.active);
    }
  }
}

TEST_CASE("the frozen base contributes no trainable parameters") {
  auto base = random_base(4);
  CHECK_FALSE(base->any_trainable());
  AdaptedModel m(base);
  CHECK(m.count_trainable() == 0);
  for (const auto& p : m.parameters()) CHECK(p.tensor.requires_grad());
}

TEST_CASE("attach") {
  auto base = random_base(5);
  Rng rng(6);
  AdaptedModel m(base);
  m.attach(PlacementMap::awaker(), AdapterConfig{}, rng);
  CHECK(m.attached());
  CHECK_THROWS_AS(m.attach(PlacementMap::awaker(), AdapterConfig{}, rng), ConfigError);

  SUBCASE("placement kinds") {
    CHECK(m.site(1, Site::q_proj).kind == AdapterKind::single_lora);
    CHECK(m.site(1, Site::o_proj).kind == AdapterKind::gated_moe);
    CHECK(m.site(1, Site::gate_proj).kind == AdapterKind::gated_moe);
    CHECK(m.site(1, Site::up_proj).kind == AdapterKind::simplified_moe);
    CHECK(m.site(1, Site::down_proj).kind == AdapterKind::simplified_moe);
    CHECK_FALSE(m.site(0, Site::up_proj).moe->gate.has_value());
    CHECK(m.site(0, Site::gate_proj).moe->gate->weight.shape() == Shape{4, 64});
  }
  SUBCASE("a simplified site without a gated donor is rejected") {
    PlacementMap bad = PlacementMap::awaker();
    bad.set(Site::up_proj, {AdapterKind::simplified_moe, Site::q_proj});
    AdaptedModel other(base);
    CHECK_THROWS_AS(other.attach(bad, AdapterConfig{}, rng), ConfigError);
  }
  SUBCASE("a gated model needs a routing context") {
    const auto inst = some_instances(1, 7)[0];
    CHECK_THROWS(m.forward(inst, nullptr));
  }
}

TEST_CASE("zero-init adapters leave the base logits unchanged") {
  auto base = random_base(8);
  for (const PlacementMap& map : {PlacementMap::awaker(), PlacementMap::single_lora()}) {
    Rng rng(9);
    AdaptedModel m = attach_adapters(base, map, AdapterConfig{}, rng);
    for (const auto& inst : some_instances(8, 10)) {
      NoGradGuard g;
      CHECK(max_abs_diff(logits_of(m, inst), base_forward(*base, inst.tokens)) <= 1e-12);
    }
  }
}

TEST_CASE("forward is deterministic and shaped [T x V]") {
  auto base = random_base(11);
  Rng rng(12);
  AdaptedModel m = attach_adapters(base, PlacementMap::awaker(), AdapterConfig{}, rng);
  scramble(m, 13);
  const auto inst = some_instances(1, 14)[0];
  const Tensor a = logits_of(m, inst);
  const Tensor b = logits_of(m, inst);
  CHECK(a.shape() == Shape{inst.tokens.size(), 32});
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
  CHECK(max_abs_diff(a, base_forward(*base, inst.tokens)) > 1e-3);
}

TEST_CASE("sequence length limits") {
  auto base = random_base(15);
  std::vector<int> toolong(33, 1);
  CHECK_THROWS_AS(base_forward(*base, toolong), InputError);
  std::vector<int> badid = {1, 2, 32};
  CHECK_THROWS_AS(base_forward(*base, badid), InputError);
}

TEST_CASE("response tokens do not change the logits that predict them") {
  // Causality: positions before the response see only the prefix.
  auto base = random_base(16);
  Rng rng(17);
  AdaptedModel m = attach_adapters(base, PlacementMap::awaker(), AdapterConfig{}, rng);
  scramble(m, 18);
  TaskInstance a = some_instances(1, 19)[0];
  TaskInstance b = a;
  for (std::size_t t = b.resp_start; t < b.tokens.size(); ++t) b.tokens[t] = (b.tokens[t] + 3) % 10;
  const Tensor la = logits_of(m, a), lb = logits_of(m, b);
  const std::size_t v = 32;
  for (std::size_t t = 0; t < a.resp_start; ++t) {
    for (std::size_t j = 0; j < v; ++j) CHECK(la[t * v + j] == lb[t * v + j]);
  }
}

TEST_CASE("base checksum ignores adapter training") {
  auto base = random_base(20);
  const auto before = base->checksum();
  Rng rng(21);
  AdaptedModel m = attach_adapters(base, PlacementMap::awaker(), AdapterConfig{}, rng);
  scramble(m, 22);
  CHECK(base->checksum() == before);
  CHECK(base->num_params() > 0);
}

}  // TEST_SUITE
