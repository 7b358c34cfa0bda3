// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "awaker/error.hpp"
#include "awaker/routing.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace awaker;
using namespace awaker::test;

namespace {

using Joint = std::vector<std::vector<std::size_t>>;

// Direct summation of Σ p(t,e) log₂ p(t,e) / (p(t) p(e)).
double mi_oracle(const Joint& j) {
  double n = 0.0;
  std::vector<double> rows(j.size(), 0.0), cols(j[0].size(), 0.0);
  for (std::size_t t = 0; t < j.size(); ++t) {
    for (std::size_t e = 0; e < j[t].size(); ++e) {
      n += static_cast<double>(j[t][e]);
      rows[t] += static_cast<double>(j[t][e]);
      cols[e] += static_cast<double>(j[t][e]);
    }
  }
  double mi = 0.0;
  for (std::size_t t = 0; t < j.size(); ++t) {
    for (std::size_t e = 0; e < j[t].size(); ++e) {
      if (j[t][e] == 0) continue;
      const double p = static_cast<double>(j[t][e]) / n;
      mi += p * std::log2(p / ((rows[t] / n) * (cols[e] / n)));
    }
  }
  return mi;
}

AdaptedModel gated_model(std::uint64_t seed) {
  Rng rng(seed);
  AdaptedModel m = attach_adapters(random_base(seed + 1), PlacementMap::awaker(), AdapterConfig{}, rng);
  scramble(m, seed + 2, 0.5);
  return m;
}

RoutingTrace trace(int task, std::vector<int> selected) {
  RoutingTrace t;
  t.task = task;
  for (std::size_t i = 0; i < selected.size(); ++i) {
    t.blocks.push_back(i / 2);
    t.sites.push_back(i % 2 == 0 ? Site::o_proj : Site::gate_proj);
  }
  t.selected = std::move(selected);
  return t;
}

}  // namespace

TEST_SUITE("routing") {

TEST_CASE("build_gate_input") {
  auto base = random_base(1);
  Rng rng(2);
  AdaptedModel m = attach_adapters(base, PlacementMap::awaker(), AdapterConfig{}, rng);
  const TaskInstance inst = some_instances(1, 3)[0];
  const std::size_t d = 64;
  const auto emb = base->embed().data();

  SUBCASE("mean of the instruction embeddings") {
    const auto g = build_gate_input(m, inst);
    REQUIRE(g.size() == d);
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < inst.instr_end; ++t) s += emb[static_cast<std::size_t>(inst.tokens[t]) * d + j];
      CHECK(g[j] == doctest::Approx(s / static_cast<double>(inst.instr_end)).epsilon(1e-14));
    }
  }
  SUBCASE("last-token pooling reads the final instruction token") {
    const auto g = build_gate_input(m, inst, Pooling::last_token);
    const auto tok = static_cast<std::size_t>(inst.tokens[inst.instr_end - 1]);
    for (std::size_t j = 0; j < d; ++j) CHECK(g[j] == emb[tok * d + j]);
  }
  SUBCASE("a single instruction token is its own mean") {
    TaskInstance one{0, {12, 11, 3, 11, 3}, 1, 4};
    const auto g = build_gate_input(m, one);
    for (std::size_t j = 0; j < d; ++j) CHECK(g[j] == emb[12 * d + j]);
  }
  SUBCASE("digits and responses never enter") {
    TaskInstance other = inst;
    for (std::size_t t = inst.instr_end; t < other.tokens.size(); ++t) {
      if (other.tokens[t] < 10) other.tokens[t] = (other.tokens[t] + 1) % 10;
    }
    CHECK(build_gate_input(m, inst) == build_gate_input(m, other));
  }
  SUBCASE("empty instruction span") {
    TaskInstance bad = inst;
    bad.instr_end = 0;
    CHECK_THROWS_AS(build_gate_input(m, bad), InputError);
  }
}

TEST_CASE("route_instance logs one decision per gated layer plus reuse entries") {
  const AdaptedModel m = gated_model(4);
  const TaskInstance inst = some_instances(1, 5)[0];
  for (RoutingMode mode : {RoutingMode::shared_embedding, RoutingMode::per_layer}) {
    const RoutingContext ctx = route_instance(m, inst, mode, false, nullptr);
    CHECK(ctx.gated_events() == 4);
    CHECK(ctx.log().size() == 8);
    for (std::size_t b = 0; b < 2; ++b) {
      const RoutingDecision* g = ctx.find(b, Site::gate_proj);
      REQUIRE(g != nullptr);
      for (Site s : {Site::up_proj, Site::down_proj}) {
        const RoutingDecision* r = ctx.find(b, s);
        REQUIRE(r != nullptr);
        CHECK(r->reused);
        CHECK(r->gate.same_decision(g->gate));
      }
    }
    CHECK(ctx.selections().size() == 4);
  }
  Rng rng(1);
  AdaptedModel plain = attach_adapters(random_base(6), PlacementMap::single_lora(), AdapterConfig{}, rng);
  CHECK_THROWS_AS(route_instance(plain, inst, RoutingMode::shared_embedding, false, nullptr), ConfigError);
}

TEST_CASE("every gate sees the same shared gate input") {
  const AdaptedModel m = gated_model(7);
  for (const auto& inst : some_instances(6, 8)) {
    const RoutingContext ctx = route_instance(m, inst, RoutingMode::shared_embedding, false, nullptr);
    const auto expect = build_gate_input(m, inst);
    for (const auto& d : ctx.log()) {
      if (!d.reused) CHECK(d.gate_input == expect);
    }
  }
}

TEST_CASE("response tokens never change routing") {
  const AdaptedModel m = gated_model(9);
  for (const auto& a : some_instances(10, 10)) {
    TaskInstance b = a;
    for (std::size_t t = b.resp_start; t < b.tokens.size(); ++t) b.tokens[t] = (b.tokens[t] + 7) % 10;
    for (RoutingMode mode : {RoutingMode::shared_embedding, RoutingMode::per_layer}) {
      const auto ca = route_instance(m, a, mode, false, nullptr);
      const auto cb = route_instance(m, b, mode, false, nullptr);
      CHECK(ca.selections() == cb.selections());
      for (std::size_t i = 0; i < ca.log().size(); ++i) CHECK(ca.log()[i].gate.same_decision(cb.log()[i].gate));
    }
  }
}

TEST_CASE("mutual information") {
  SUBCASE("[[30,10],[10,30]] against direct summation") {
    const Joint j = {{30, 10}, {10, 30}};
    const double expect = 1.0 - (-(0.75 * std::log2(0.75) + 0.25 * std::log2(0.25)));
    CHECK(mi_oracle(j) == doctest::Approx(expect).epsilon(1e-14));
    CHECK(mutual_information_bits(j) == doctest::Approx(expect).epsilon(1e-12));
  }
  SUBCASE("a bijection of four tasks carries two bits") {
    const Joint j = {{0, 5, 0, 0}, {0, 0, 0, 5}, {5, 0, 0, 0}, {0, 0, 5, 0}};
    CHECK(mutual_information_bits(j) == doctest::Approx(2.0).epsilon(1e-14));
  }
  SUBCASE("independence carries none") {
    const Joint j = {{2, 4, 6}, {1, 2, 3}};
    CHECK(std::abs(mutual_information_bits(j)) <= 1e-14);
    CHECK(mutual_information_bits({{7, 0}, {9, 0}}) == 0.0);
  }
  SUBCASE("bounds on random joints") {
    Rng rng(11);
    for (int i = 0; i < 300; ++i) {
      const auto rows = static_cast<std::size_t>(rng.uniform_int(1, 5));
      const auto cols = static_cast<std::size_t>(rng.uniform_int(1, 5));
      Joint j(rows, std::vector<std::size_t>(cols));
      for (auto& r : j) {
        for (auto& c : r) c = rng.uniform(0, 1) < 0.4 ? 0 : static_cast<std::size_t>(rng.uniform_int(0, 50));
      }
      j[0][0] += 1;
      const double mi = mutual_information_bits(j);
      CHECK(mi >= -1e-12);
      CHECK(mi <= std::log2(static_cast<double>(std::min(rows, cols))) + 1e-12);
      CHECK(mi == doctest::Approx(mi_oracle(j)).epsilon(1e-10));
    }
  }
  SUBCASE("ragged tables are rejected") {
    CHECK_THROWS_AS(mutual_information_bits({{1, 2}, {3}}), InputError);
  }
}

TEST_CASE("entropy") {
  const std::vector<std::size_t> flat = {5, 5, 5, 5};
  CHECK(entropy_bits(flat) == doctest::Approx(2.0));
  const std::vector<std::size_t> one = {0, 9, 0};
  CHECK(entropy_bits(one) == 0.0);
}

TEST_CASE("flip_rate") {
  const std::vector<RoutingTrace> a = {trace(0, {0, 1, 2, 3}), trace(1, {1, 1, 1, 1})};
  SUBCASE("identical logs") { CHECK(flip_rate(a, a) == 0.0); }
  SUBCASE("every decision flipped") {
    const std::vector<RoutingTrace> b = {trace(0, {1, 0, 3, 2}), trace(1, {0, 0, 0, 0})};
    CHECK(flip_rate(a, b) == 1.0);
  }
  SUBCASE("one of eight") {
    const std::vector<RoutingTrace> b = {trace(0, {0, 1, 2, 3}), trace(1, {1, 1, 3, 1})};
    CHECK(flip_rate(a, b) == 0.125);
  }
  SUBCASE("mismatched logs") {
    const std::vector<RoutingTrace> one = {a[0]};
    CHECK_THROWS_AS(flip_rate(a, one), InputError);
    const std::vector<RoutingTrace> shorter = {trace(0, {0, 1}), a[1]};
    CHECK_THROWS_AS(flip_rate(a, shorter), InputError);
  }
}

TEST_CASE("routing_stats") {
  std::vector<RoutingTrace> traces;
  for (int i = 0; i < 40; ++i) {
    const int t = i % 4;
    traces.push_back(trace(t, {t, (t + 1) % 4, t, 0}));
  }
  const RoutingStats s = routing_stats(traces, 4, 4);
  std::size_t total = 0;
  for (auto u : s.utilization) total += u;
  CHECK(total == 160);
  CHECK(s.joint.size() == 4);
  std::size_t joint_total = 0;
  for (const auto& r : s.joint) {
    for (auto c : r) joint_total += c;
  }
  CHECK(joint_total == 40);
  CHECK(s.mutual_information_bits == doctest::Approx(2.0));
  CHECK(s.entropy_bits > 0.0);
  CHECK(s.entropy_bits <= 2.0 + 1e-12);
  CHECK_THROWS_AS(routing_stats({}, 4, 4), InputError);
  std::vector<RoutingTrace> bad = {trace(7, {0, 0, 0, 0})};
  CHECK_THROWS_AS(routing_stats(bad, 4, 4), InputError);
  std::vector<RoutingTrace> badexpert = {trace(0, {4, 0, 0, 0})};
  CHECK_THROWS_AS(routing_stats(badexpert, 4, 4), InputError);
}

TEST_CASE("names round-trip") {
  for (RoutingMode m : {RoutingMode::shared_embedding, RoutingMode::per_layer}) {
    CHECK(routing_mode_from_name(routing_mode_name(m)) == m);
  }
  for (Pooling p : {Pooling::mean, Pooling::last_token}) CHECK(pooling_from_name(pooling_name(p)) == p);
  CHECK_THROWS_AS(routing_mode_from_name("tokenwise"), ConfigError);
}

}  // TEST_SUITE
