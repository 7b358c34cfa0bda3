// SPDX-License-Identifier: Apache-2.0
#include "awaker/invariants.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include "awaker/checkpoint.hpp"
#include "awaker/checksum.hpp"
#include "awaker/error.hpp"
#include "awaker/eval.hpp"
#include "awaker/training.hpp"

namespace awaker {

namespace {

using Clock = std::chrono::steady_clock;

template <typename Fn>
CheckResult timed(std::string name, Fn&& fn) {
  CheckResult r;
  r.name = std::move(name);
  const auto t0 = Clock::now();
  try {
    fn(r);
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("threw: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return r;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

void fill_normal(Tensor& t, Rng& rng, double stddev) {
  for (double& v : t.mutable_data()) v = rng.normal(0.0, stddev);
}

/// Random values in every adapter tensor; `zero_b` keeps all B factors at 0.
void randomize_adapters(AdaptedModel& m, Rng& rng, double stddev, bool zero_b) {
  for (auto& p : m.parameters()) {
    const bool is_b = p.name.size() >= 2 && p.name.compare(p.name.size() - 2, 2, ".B") == 0;
    if (is_b && zero_b) {
      for (double& v : p.tensor.mutable_data()) v = 0.0;
    } else {
      fill_normal(p.tensor, rng, p.group == ParamGroup::gate ? 1.0 : stddev);
    }
  }
}

ModelConfig small_model() {
  ModelConfig c;
  c.d_model = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 32;
  c.max_seq = 24;
  return c;
}

std::vector<TaskInstance> random_instances(int count, std::uint64_t seed, int min_len = 3, int max_len = 6) {
  const auto specs = default_task_specs(min_len, max_len);
  Rng rng = Rng::split(seed, RngStream::data, 99);
  std::vector<TaskInstance> out;
  for (int i = 0; i < count; ++i) {
    const TaskSpec& s = specs[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(specs.size()) - 1))];
    std::vector<int> input(static_cast<std::size_t>(rng.uniform_int(s.min_len, s.max_len)));
    for (int& d : input) d = rng.uniform_int(0, 9);
    out.push_back(make_instance(s, input));
  }
  return out;
}

Tensor logits_of(const AdaptedModel& m, const TaskInstance& inst, RoutingMode mode = RoutingMode::shared_embedding) {
  NoGradGuard no_grad;
  if (!m.has_gates()) return m.forward(inst, nullptr);
  RoutingContext ctx = make_routing_context(m, inst, mode, false, nullptr);
  return m.forward(inst, &ctx);
}

bool same_log(const RoutingContext& a, const RoutingContext& b, std::string* why) {
  if (a.log().size() != b.log().size()) {
    *why = "log lengths differ";
    return false;
  }
  for (std::size_t i = 0; i < a.log().size(); ++i) {
    const auto& x = a.log()[i];
    const auto& y = b.log()[i];
    if (x.block != y.block || x.site != y.site || x.reused != y.reused || !x.gate.same_decision(y.gate) ||
        x.gate_input != y.gate_input ||
        !std::equal(x.gate.probs.data().begin(), x.gate.probs.data().end(), y.gate.probs.data().begin())) {
      *why = "entry " + std::to_string(i) + " (" + AdaptedModel::site_id(x.block, x.site) + ") differs";
      return false;
    }
  }
  return true;
}

}  // namespace

CheckResult check_gate_algebra(int draws, std::uint64_t seed) {
  return timed("gate algebra", [&](CheckResult& r) {
    Rng rng = Rng::split(seed, RngStream::eval, 11);
    double worst_sum = 0.0;
    for (int i = 0; i < draws; ++i) {
      const auto n = static_cast<std::size_t>(rng.uniform_int(2, 8));
      const auto d = static_cast<std::size_t>(rng.uniform_int(1, 32));
      const double tau = std::pow(10.0, rng.uniform(-1.0, 1.0));
      GateLayer g = GateLayer::zeros(n, d, tau, 0.0, 1);
      fill_normal(g.weight, rng, 1.0);
      Tensor x = Tensor::zeros({d});
      fill_normal(x, rng, 1.0);
      const GateOutput go = gate_forward(g, x, false, nullptr);
      if (go.g_global != 1.0 - go.g_max) {
        r.detail = "draw " + std::to_string(i) + ": G_global != 1 - G_max";
        return;
      }
      const double s = go.g_experts[static_cast<std::size_t>(go.selected[0])] + go.g_global;
      worst_sum = std::max(worst_sum, std::abs(s - 1.0));
      if (std::abs(s - 1.0) > 1e-12) {
        r.detail = "draw " + std::to_string(i) + ": selected weight + G_global = " + fmt(s);
        return;
      }
      for (double c : {1e-3, 0.5, 3.0, 250.0}) {
        std::vector<double> xs(x.data().begin(), x.data().end());
        for (double& v : xs) v *= c;
        const GateOutput gs = gate_forward(g, Tensor::from({d}, std::move(xs)), false, nullptr);
        if (gs.selected != go.selected) {
          r.detail = "draw " + std::to_string(i) + ": argmax changed under scaling by " + fmt(c);
          return;
        }
      }
    }
    r.passed = true;
    r.detail = std::to_string(draws) + " draws, max |w_sel + G_global - 1| = " + fmt(worst_sum);
  });
}

CheckResult check_zero_init_noop(int instances, std::uint64_t seed, double tol) {
  return timed("zero-init no-op", [&](CheckResult& r) {
    Rng rng = Rng::split(seed, RngStream::init, 21);
    auto base = std::make_shared<const BaseModel>(BaseModel::init(ModelConfig{}, rng));
    const auto insts = random_instances(instances, seed);
    double worst = 0.0;
    for (const PlacementMap& map : {PlacementMap::awaker(), PlacementMap::single_lora()}) {
      AdaptedModel m = attach_adapters(base, map, AdapterConfig{}, rng);
      randomize_adapters(m, rng, 0.5, true);
      for (const auto& inst : insts) {
        NoGradGuard no_grad;
        worst = std::max(worst, max_abs_diff(logits_of(m, inst), base_forward(*base, inst.tokens)));
      }
    }
    r.passed = worst <= tol;
    r.detail = std::to_string(instances) + " instances x 2 maps, max |diff| = " + fmt(worst) + " (tol " + fmt(tol) + ")";
  });
}

CheckResult check_stage2_init_equivalence(int instances, std::uint64_t seed, double tol) {
  return timed("stage-2 init equivalence", [&](CheckResult& r) {
    Rng rng = Rng::split(seed, RngStream::init, 31);
    auto base = std::make_shared<const BaseModel>(BaseModel::init(ModelConfig{}, rng));
    AdapterConfig ac;
    AdaptedModel s1 = attach_adapters(base, PlacementMap::single_lora(), ac, rng);
    randomize_adapters(s1, rng, 0.3, false);
    AdapterCheckpointInfo info;
    info.stage = 1;
    const Checkpoint ck1 = adapter_checkpoint(s1, info);
    const AdaptedModel s2 = init_stage2_from_stage1(base, ck1, ac);
    double worst = 0.0;
    double moved = 0.0;
    for (const auto& inst : random_instances(instances, seed)) {
      const Tensor a = logits_of(s1, inst);
      worst = std::max(worst, max_abs_diff(logits_of(s2, inst), a));
      moved = std::max(moved, max_abs_diff(a, [&] {
                         NoGradGuard g;
                         return base_forward(*base, inst.tokens);
                       }()));
    }
    r.passed = worst <= tol && moved > 0.0;
    r.detail = std::to_string(instances) + " instances, max |stage2 - stage1| = " + fmt(worst) +
               " (tol " + fmt(tol) + "), stage-1 offset from base = " + fmt(moved);
  });
}

CheckResult check_adapter_gradients(int seeds, std::uint64_t seed0, double step, double tol) {
  return timed("adapter gradients", [&](CheckResult& r) {
    double worst = 0.0;
    std::string worst_at;
    std::size_t checked = 0;
    for (int s = 0; s < seeds; ++s) {
      const std::uint64_t seed = seed0 + static_cast<std::uint64_t>(s);
      Rng rng = Rng::split(seed, RngStream::init, 41);
      auto base = std::make_shared<const BaseModel>(BaseModel::init(small_model(), rng));
      AdapterConfig ac;
      ac.rank = 3;
      ac.alpha = 6.0;
      ac.temperature = std::pow(10.0, rng.uniform(-0.5, 0.5));
      AdaptedModel m = attach_adapters(base, PlacementMap::awaker(), ac, rng);
      randomize_adapters(m, rng, 0.4, false);
      m.set_trainable(TrainableSet{});
      const TaskInstance inst = random_instances(1, seed, 2, 4).front();
      const auto targets = inst.next_token_targets();
      const auto mask = inst.response_mask();
      const RoutingMode mode = s % 2 == 0 ? RoutingMode::shared_embedding : RoutingMode::per_layer;
      auto loss_at = [&] {
        RoutingContext ctx = make_routing_context(m, inst, mode, false, nullptr);
        return cross_entropy_masked(m.forward(inst, &ctx), targets, mask);
      };
      backward(loss_at());
      for (auto& p : m.parameters()) {
        // unselected experts get no gradient; their finite differences must vanish too
        std::vector<double> analytic(p.tensor.grad().begin(), p.tensor.grad().end());
        if (analytic.empty()) analytic.assign(p.tensor.numel(), 0.0);
        auto data = p.tensor.mutable_data();
        // a spread of entries per tensor plus its largest-gradient entry
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < data.size(); i += std::max<std::size_t>(1, data.size() / 8)) idx.push_back(i);
        idx.push_back(static_cast<std::size_t>(
            std::max_element(analytic.begin(), analytic.end(),
                             [](double a, double b) { return std::abs(a) < std::abs(b); }) -
            analytic.begin()));
        NoGradGuard no_grad;
        for (std::size_t i : idx) {
          const double keep = data[i];
          data[i] = keep + step;
          const double up = loss_at().item();
          data[i] = keep - step;
          const double down = loss_at().item();
          data[i] = keep;
          const double numeric = (up - down) / (2.0 * step);
          const double rel = std::abs(numeric - analytic[i]) /
                             std::max({std::abs(numeric), std::abs(analytic[i]), 1e-6});
          ++checked;
          if (rel > worst) {
            worst = rel;
            worst_at = p.name + "[" + std::to_string(i) + "] seed " + std::to_string(seed);
          }
        }
        p.tensor.zero_grad();
      }
    }
    r.passed = worst <= tol;
    r.detail = std::to_string(checked) + " entries over " + std::to_string(seeds) +
               " seeds, max rel err = " + fmt(worst) + " at " + worst_at + " (tol " + fmt(tol) + ")";
  });
}

CheckResult check_instruction_only_routing(int pairs, std::uint64_t seed) {
  return timed("instruction-only routing", [&](CheckResult& r) {
    Rng rng = Rng::split(seed, RngStream::init, 51);
    auto base = std::make_shared<const BaseModel>(BaseModel::init(ModelConfig{}, rng));
    AdaptedModel m = attach_adapters(base, PlacementMap::awaker(), AdapterConfig{}, rng);
    randomize_adapters(m, rng, 0.5, false);
    std::size_t gated_layers = 0;
    for (Site s : kAllSites) gated_layers += m.placement()[s].kind == AdapterKind::gated_moe ? 1 : 0;
    gated_layers *= static_cast<std::size_t>(base->config().n_layers);

    Rng data = Rng::split(seed, RngStream::data, 52);
    std::size_t identical = 0;
    for (const auto& a : random_instances(pairs, seed)) {
      TaskInstance b = a;
      for (std::size_t t = b.resp_start; t < b.tokens.size(); ++t) b.tokens[t] = (b.tokens[t] + data.uniform_int(1, 9)) % 10;
      bool ok = true;
      std::string why;
      for (RoutingMode mode : {RoutingMode::shared_embedding, RoutingMode::per_layer}) {
        for (bool noisy : {false, true}) {
          const std::uint64_t salt = static_cast<std::uint64_t>(data.uniform_int(0, 1 << 30));
          Rng ra = Rng::split(seed, RngStream::noise, salt);
          Rng rb = Rng::split(seed, RngStream::noise, salt);
          RoutingContext ca = make_routing_context(m, a, mode, noisy, &ra);
          RoutingContext cb = make_routing_context(m, b, mode, noisy, &rb);
          {
            NoGradGuard no_grad;
            m.forward(a, &ca);
            m.forward(b, &cb);
          }
          if (ca.gated_events() != gated_layers) {
            ok = false;
            why = "gated layers logged " + std::to_string(ca.gated_events()) + " decisions, expected " +
                  std::to_string(gated_layers);
          }
          for (const auto& d : ca.log()) {
            std::size_t same = 0;
            for (const auto& e : ca.log()) same += e.block == d.block && e.site == d.site ? 1 : 0;
            if (same != 1) {
              ok = false;
              why = AdaptedModel::site_id(d.block, d.site) + " logged more than one decision";
            }
          }
          if (ok && !same_log(ca, cb, &why)) ok = false;
        }
      }
      if (!ok) {
        r.detail = "pair " + std::to_string(identical) + ": " + why;
        return;
      }
      ++identical;
    }
    r.passed = identical == static_cast<std::size_t>(pairs);
    r.detail = std::to_string(identical) + "/" + std::to_string(pairs) +
               " pairs identical (2 modes x eval/noisy), one decision per gated layer per instance";
  });
}

CheckResult check_shared_gate_contract(int instances, std::uint64_t seed) {
  return timed("shared-gate contract", [&](CheckResult& r) {
    Rng rng = Rng::split(seed, RngStream::init, 61);
    auto base = std::make_shared<const BaseModel>(BaseModel::init(ModelConfig{}, rng));
    AdaptedModel m = attach_adapters(base, PlacementMap::awaker(), AdapterConfig{}, rng);
    randomize_adapters(m, rng, 0.5, false);
    Rng noise = Rng::split(seed, RngStream::noise, 62);
    std::size_t events = 0;
    for (const auto& inst : random_instances(instances, seed)) {
      for (RoutingMode mode : {RoutingMode::shared_embedding, RoutingMode::per_layer}) {
        RoutingContext ctx = make_routing_context(m, inst, mode, true, &noise);
        {
          NoGradGuard no_grad;
          m.forward(inst, &ctx);
        }
        for (std::size_t b = 0; b < static_cast<std::size_t>(base->config().n_layers); ++b) {
          const RoutingDecision* donor = ctx.find(b, Site::gate_proj);
          if (donor == nullptr || donor->reused) {
            r.detail = "block " + std::to_string(b) + ": gate_proj made no decision";
            return;
          }
          for (Site s : {Site::up_proj, Site::down_proj}) {
            const RoutingDecision* d = ctx.find(b, s);
            ++events;
            if (d == nullptr || !d->reused || !d->gate.same_decision(donor->gate) ||
                d->gate.source != donor->gate.source ||
                !std::equal(d->gate.probs.data().begin(), d->gate.probs.data().end(), donor->gate.probs.data().begin())) {
              r.detail = AdaptedModel::site_id(b, s) + " did not consume gate_proj's output";
              return;
            }
          }
        }
      }
    }
    r.passed = true;
    r.detail = std::to_string(events) + "/" + std::to_string(events) + " up/down events match gate_proj";
  });
}

CheckResult check_freeze_discipline(int steps_per_stage, std::uint64_t seed) {
  return timed("freeze discipline", [&](CheckResult& r) {
    Rng rng = Rng::split(seed, RngStream::init, 71);
    auto base = std::make_shared<const BaseModel>(BaseModel::init(ModelConfig{}, rng));
    const std::uint32_t base_crc = base->checksum();
    const Corpus corpus = gen_corpus(default_task_specs(3, 5), SplitSizes{20, 1, 1}, seed);
    AdapterConfig ac;
    std::ostringstream log;
    bool ok = true;
    auto verify = [&](int stage, const std::map<std::string, std::uint32_t>& before,
                      const std::map<std::string, std::uint32_t>& after, const TrainableSet& set) {
      for (const auto& [group, crc] : before) {
        bool trainable = group != "base";
        if (group == "single_lora") trainable = set.single_lora;
        if (group == "expert") trainable = set.experts;
        if (group == "global_expert") trainable = set.global_expert;
        if (group == "gate") trainable = set.gates;
        const bool changed = after.at(group) != crc;
        log << " s" << stage << ":" << group << (changed ? "*" : "=");
        if (changed != trainable) {
          ok = false;
          r.detail = "stage " + std::to_string(stage) + ": group '" + group + "' " +
                     (changed ? "changed but is frozen" : "did not change but is trainable");
        }
      }
    };

    StageConfig c1 = StageConfig::defaults(1);
    c1.steps = steps_per_stage;
    c1.warmup = 0;
    c1.seed = seed;
    Rng init = Rng::split(seed, RngStream::init, 1);
    AdaptedModel s1 = attach_adapters(base, PlacementMap::single_lora(), ac, init);
    auto before = group_checksums(s1);
    const StageOutcome o1 = train_adapters(s1, corpus.train, c1);
    verify(1, before, group_checksums(s1), c1.trainable);

    AdaptedModel m = init_stage2_from_stage1(base, o1.checkpoint, ac);
    StageConfig c2 = StageConfig::defaults(2);
    c2.steps = steps_per_stage;
    c2.warmup = 0;
    c2.seed = seed;
    before = group_checksums(m);
    run_stage2(m, corpus.train, c2);
    verify(2, before, group_checksums(m), c2.trainable);

    freeze_gates(m);
    StageConfig c3 = StageConfig::defaults(3);
    c3.steps = steps_per_stage;
    c3.warmup = 0;
    c3.seed = seed;
    before = group_checksums(m);
    run_stage3(m, corpus.train, c3);
    const auto after = group_checksums(m);
    verify(3, before, after, c3.trainable);
    if (after.at("gate") != before.at("gate")) ok = false;
    if (base->checksum() != base_crc || after.at("base") != base_crc) {
      ok = false;
      r.detail = "base bytes changed";
    }
    r.passed = ok;
    if (ok) r.detail = "changed(*)/kept(=):" + log.str();
  });
}

CheckResult check_checkpoint_roundtrip(std::uint64_t seed) {
  return timed("checkpoint round-trip", [&](CheckResult& r) {
    Rng rng = Rng::split(seed, RngStream::init, 81);
    auto base = std::make_shared<const BaseModel>(BaseModel::init(ModelConfig{}, rng));
    const Corpus corpus = gen_corpus(default_task_specs(3, 5), SplitSizes{8, 1, 1}, seed);
    Stage1Result s1 = run_stage1(base, corpus.train, [&] {
      StageConfig c = StageConfig::defaults(1);
      c.steps = 3;
      c.warmup = 0;
      c.seed = seed;
      return c;
    }(), AdapterConfig{});
    AdaptedModel m = init_stage2_from_stage1(base, s1.outcome.checkpoint, AdapterConfig{});
    StageConfig c2 = StageConfig::defaults(2);
    c2.steps = 3;
    c2.warmup = 0;
    c2.seed = seed;
    const Checkpoint ck = run_stage2(m, corpus.train, c2).checkpoint;

    const std::string first = serialize_checkpoint(ck);
    const std::string second = serialize_checkpoint(parse_checkpoint(first));
    const std::string base_bytes = serialize_checkpoint(base_checkpoint(*base, seed));
    const std::string base_again = serialize_checkpoint(base_checkpoint(base_from_checkpoint(parse_checkpoint(base_bytes)), seed));

    // model-level: load, rebuild, compare parameter entries
    const AdaptedModel loaded = model_from_checkpoint(base, parse_checkpoint(first));
    AdapterCheckpointInfo info;
    info.stage = ck.stage();
    const Checkpoint rebuilt = adapter_checkpoint(loaded, info);
    bool params_equal = true;
    for (const auto& e : rebuilt.entries) {
      const CheckpointEntry* o = ck.find(e.name);
      params_equal = params_equal && o != nullptr && o->data == e.data && o->shape == e.shape;
    }

    std::string corrupted = first;
    corrupted[corrupted.size() - 3] ^= 0x10;
    std::string error;
    try {
      parse_checkpoint(corrupted);
    } catch (const CheckpointError& e) {
      error = e.what();
    }
    const bool detected = error.find("crc32 mismatch") != std::string::npos;
    r.passed = first == second && base_bytes == base_again && params_equal && detected;
    r.detail = "adapter bytes " + std::string(first == second ? "identical" : "DIFFER") + " (" +
               std::to_string(first.size()) + " B), base bytes " + (base_bytes == base_again ? "identical" : "DIFFER") +
               ", params " + (params_equal ? "equal" : "DIFFER") + ", corruption: " +
               (detected ? "\"" + error + "\"" : "NOT DETECTED");
  });
}

CheckResult check_corpus_determinism(std::uint64_t seed) {
  return timed("corpus determinism", [&](CheckResult& r) {
    const auto specs = default_task_specs(4, 6);
    const SplitSizes sizes{50, 5, 10};
    const Corpus a = gen_corpus(specs, sizes, seed);
    const Corpus b = gen_corpus(specs, sizes, seed);
    const Corpus c = gen_corpus(specs, sizes, seed + 1);
    const bool same = to_jsonl(a.train) == to_jsonl(b.train) && to_jsonl(a.val) == to_jsonl(b.val) &&
                      to_jsonl(a.test) == to_jsonl(b.test);
    const bool differs = to_jsonl(a.train) != to_jsonl(c.train);
    r.passed = same && differs;
    r.detail = std::string("same seed ") + (same ? "byte-identical" : "DIFFERS") + ", next seed " +
               (differs ? "differs" : "IDENTICAL");
  });
}

CheckResult check_loss_mask(std::uint64_t seed) {
  return timed("loss mask", [&](CheckResult& r) {
    Rng rng = Rng::split(seed, RngStream::init, 91);
    auto base = std::make_shared<const BaseModel>(BaseModel::init(small_model(), rng));
    const TaskInstance inst = random_instances(1, seed, 3, 4).front();
    const auto targets = inst.next_token_targets();
    const auto mask = inst.response_mask();
    Tensor logits;
    {
      NoGradGuard no_grad;
      logits = base_forward(*base, inst.tokens);
    }
    Tensor leaf = logits.clone(true);
    backward(cross_entropy_masked(leaf, targets, mask));
    const auto vocab = leaf.dim(1);
    double outside = 0.0, inside = 0.0;
    for (std::size_t t = 0; t < leaf.dim(0); ++t)
      for (std::size_t v = 0; v < vocab; ++v) {
        const double g = std::abs(leaf.grad()[t * vocab + v]);
        (mask[t] ? inside : outside) += g;
      }
    // finite differences on a masked-out row must be exactly flat
    auto loss_with = [&](std::size_t t, double delta) {
      std::vector<double> d(logits.data().begin(), logits.data().end());
      d[t * vocab] += delta;
      return cross_entropy_masked(Tensor::from(leaf.shape(), d), targets, mask).item();
    };
    const double flat = loss_with(0, 1e-3) - loss_with(0, -1e-3);
    r.passed = outside == 0.0 && inside > 0.0 && flat == 0.0 && !mask[inst.instr_end - 1];
    r.detail = "grad mass outside response = " + fmt(outside) + ", inside = " + fmt(inside);
  });
}

std::vector<CheckResult> run_selfcheck(std::uint64_t seed) {
  return {check_gate_algebra(200, seed),
          check_zero_init_noop(10, seed),
          check_stage2_init_equivalence(10, seed),
          check_adapter_gradients(2, seed),
          check_instruction_only_routing(20, seed),
          check_shared_gate_contract(10, seed),
          check_freeze_discipline(2, seed),
          check_checkpoint_roundtrip(seed),
          check_corpus_determinism(seed),
          check_loss_mask(seed)};
}

}  // namespace awaker
