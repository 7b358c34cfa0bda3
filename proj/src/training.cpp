// SPDX-License-Identifier: Apache-2.0
#include "awaker/training.hpp"

#include <algorithm>
#include <numeric>

#include "awaker/checksum.hpp"
#include "awaker/error.hpp"

namespace awaker {

StageConfig StageConfig::defaults(int stage) {
  StageConfig c;
  c.stage = stage;
  c.trainable = TrainableSet::for_stage(stage);
  switch (stage) {
    case 1: c.lr = 1e-3; c.steps = 300; break;
    case 2: c.lr = 1e-3; c.steps = 600; break;
    case 3: c.lr = 5e-4; c.steps = 300; break;
    default: throw ConfigError("stage must be 1, 2 or 3, got " + std::to_string(stage));
  }
  return c;
}

void StageConfig::validate() const {
  if (stage < 1 || stage > 3) throw ConfigError("stage must be 1, 2 or 3");
  if (!(lr > 0.0)) throw ConfigError("stage " + std::to_string(stage) + ": learning rate must be positive");
  if (steps < 0) throw ConfigError("stage step count must be non-negative");
  if (warmup < 0) throw ConfigError("warmup must be non-negative");
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  if (noise_sigma < 0.0) throw ConfigError("noise sigma must be non-negative");
  if (balance_coef < 0.0) throw ConfigError("balance coefficient must be non-negative");
}

void to_json(nlohmann::json& j, const StageConfig& c) {
  j = {{"stage", c.stage},
       {"lr", c.lr},
       {"steps", c.steps},
       {"warmup", c.warmup},
       {"batch_size", c.batch_size},
       {"trainable", c.trainable},
       {"noise_sigma", c.noise_sigma},
       {"balance_coef", c.balance_coef},
       {"weight_decay", c.weight_decay},
       {"seed", c.seed},
       {"routing_mode", routing_mode_name(c.routing_mode)},
       {"pooling", pooling_name(c.pooling)}};
}

void from_json(const nlohmann::json& j, StageConfig& c) {
  if (j.contains("stage") && j["stage"].get<int>() != c.stage) {
    c = StageConfig::defaults(j["stage"].get<int>());
  }
  c.lr = j.value("lr", c.lr);
  c.steps = j.value("steps", c.steps);
  c.warmup = j.value("warmup", c.warmup);
  c.batch_size = j.value("batch_size", c.batch_size);
  if (j.contains("trainable")) c.trainable = j["trainable"].get<TrainableSet>();
  c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
  c.balance_coef = j.value("balance_coef", c.balance_coef);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.seed = j.value("seed", c.seed);
  if (j.contains("routing_mode")) c.routing_mode = routing_mode_from_name(j["routing_mode"].get<std::string>());
  if (j.contains("pooling")) c.pooling = pooling_from_name(j["pooling"].get<std::string>());
}

void to_json(nlohmann::json& j, const PretrainConfig& c) {
  j = {{"steps", c.steps}, {"lr", c.lr}, {"warmup", c.warmup}, {"batch_size", c.batch_size}, {"mix", c.mix}};
}

void from_json(const nlohmann::json& j, PretrainConfig& c) {
  c.steps = j.value("steps", c.steps);
  c.lr = j.value("lr", c.lr);
  c.warmup = j.value("warmup", c.warmup);
  c.batch_size = j.value("batch_size", c.batch_size);
  if (j.contains("mix")) c.mix = j["mix"].get<PretrainMix>();
}

BaseModel pretrain_base(const ModelConfig& cfg, const PretrainConfig& pc, std::uint64_t seed) {
  Rng init = Rng::split(seed, RngStream::init, 0);
  BaseModel base = BaseModel::init(cfg, init);
  if (pc.steps <= 0) return base;
  if (pc.batch_size < 1) throw ConfigError("pretraining batch size must be positive");
  Rng data = Rng::split(seed, RngStream::pretrain, 0);
  base.set_trainable(true);
  AdamW opt(base.named_parameters());
  for (int step = 0; step < pc.steps; ++step) {
    Tensor total;
    for (int b = 0; b < pc.batch_size; ++b) {
      std::vector<int> seq = gen_pretrain_sequence(pc.mix, data);
      if (seq.size() > static_cast<std::size_t>(cfg.max_seq)) seq.resize(static_cast<std::size_t>(cfg.max_seq));
      std::vector<int> targets(seq.size(), 0);
      std::vector<bool> mask(seq.size(), false);
      for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
        targets[t] = seq[t + 1];
        mask[t] = true;
      }
      Tensor ce = cross_entropy_masked(base_forward(base, seq), targets, mask);
      total = total.defined() ? add(total, ce) : ce;
    }
    backward(scale(total, 1.0 / pc.batch_size));
    const double lr = cosine_lr(step, pc.steps, pc.lr, std::min(pc.warmup, pc.steps));
    if (lr > 0.0) opt.step(lr);
    opt.zero_grad();
  }
  base.set_trainable(false);
  return base;
}

namespace {

Tensor instance_loss(const AdaptedModel& m, const TaskInstance& inst, RoutingContext* ctx) {
  const auto targets = inst.next_token_targets();
  return cross_entropy_masked(m.forward(inst, ctx), targets, inst.response_mask());
}

// Switch-style auxiliary term n·Σ_e f_e·P̄_e averaged over gated layers.
Tensor balance_term(const std::vector<RoutingContext>& contexts, std::size_t n) {
  std::map<std::pair<std::size_t, Site>, std::vector<const GateOutput*>> by_layer;
  for (const auto& ctx : contexts)
    for (const auto& d : ctx.log()) {
      if (!d.reused) by_layer[{d.block, d.site}].push_back(&d.gate);
    }
  Tensor total;
  for (const auto& [key, outs] : by_layer) {
    std::vector<double> frac(n, 0.0);
    Tensor mean_p;
    for (const GateOutput* go : outs) {
      frac[static_cast<std::size_t>(go->selected.front())] += 1.0 / outs.size();
      mean_p = mean_p.defined() ? add(mean_p, go->probs) : go->probs;
    }
    mean_p = scale(mean_p, 1.0 / outs.size());
    Tensor term = scale(sum(mul(mean_p, Tensor::from({n}, frac))), static_cast<double>(n));
    total = total.defined() ? add(total, term) : term;
  }
  return scale(total, 1.0 / static_cast<double>(by_layer.size()));
}

}  // namespace

double batch_loss(const AdaptedModel& m, std::span<const TaskInstance> corpus,
                  std::span<const std::size_t> batch, RoutingMode mode, Pooling pooling) {
  NoGradGuard no_grad;
  double total = 0.0;
  for (std::size_t idx : batch) {
    const TaskInstance& inst = corpus[idx];
    if (m.has_gates()) {
      RoutingContext ctx = make_routing_context(m, inst, mode, false, nullptr, pooling);
      total += instance_loss(m, inst, &ctx).item();
    } else {
      total += instance_loss(m, inst, nullptr).item();
    }
  }
  return total / static_cast<double>(batch.size());
}

StageOutcome train_adapters(AdaptedModel& m, std::span<const TaskInstance> corpus, const StageConfig& cfg) {
  cfg.validate();
  if (corpus.empty()) throw InputError("training corpus is empty");
  if (!m.attached()) throw ConfigError("model has no adapters to train");
  if (m.base().any_trainable()) throw ConfigError("base model must stay frozen during adaptation");

  m.set_trainable(cfg.trainable);
  for (Site s : kAllSites)
    for (std::size_t b = 0; b < static_cast<std::size_t>(m.base().config().n_layers); ++b) {
      auto& site = m.site(b, s);
      if (site.moe && site.moe->gate) site.moe->gate->noise_sigma = cfg.noise_sigma;
    }

  AdamW opt(m.named_parameters(), AdamWConfig{.weight_decay = cfg.weight_decay});
  Rng data = Rng::split(cfg.seed, RngStream::data, static_cast<std::uint64_t>(cfg.stage));
  Rng noise = Rng::split(cfg.seed, RngStream::noise, static_cast<std::uint64_t>(cfg.stage));

  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), data.engine());
  std::size_t cursor = 0;
  auto next_batch = [&] {
    std::vector<std::size_t> batch;
    for (int i = 0; i < cfg.batch_size; ++i) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), data.engine());
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }
    return batch;
  };

  StageOutcome out;
  const bool gated = m.has_gates();
  const std::size_t n = static_cast<std::size_t>(m.adapter_config().n_experts);
  for (int step = 0; step < cfg.steps; ++step) {
    const auto batch = next_batch();
    std::vector<RoutingContext> contexts;
    contexts.reserve(batch.size());
    Tensor total;
    for (std::size_t idx : batch) {
      const TaskInstance& inst = corpus[idx];
      RoutingContext* ctx = nullptr;
      if (gated) {
        contexts.push_back(make_routing_context(m, inst, cfg.routing_mode, true, &noise, cfg.pooling));
        ctx = &contexts.back();
      }
      Tensor ce = instance_loss(m, inst, ctx);
      total = total.defined() ? add(total, ce) : ce;
    }
    Tensor loss = scale(total, 1.0 / static_cast<double>(batch.size()));
    out.losses.push_back(loss.item());
    if (gated && cfg.balance_coef > 0.0) loss = add(loss, scale(balance_term(contexts, n), cfg.balance_coef));
    backward(loss);
    const double lr = cosine_lr(step, cfg.steps, cfg.lr, std::min(cfg.warmup, cfg.steps));
    if (lr > 0.0) opt.step(lr);
    opt.zero_grad();
    out.final_batch = batch;
  }
  if (out.final_batch.empty()) out.final_batch = next_batch();
  out.final_batch_loss = batch_loss(m, corpus, out.final_batch, cfg.routing_mode, cfg.pooling);

  AdapterCheckpointInfo info;
  info.stage = cfg.stage;
  info.step = cfg.steps;
  info.seed = cfg.seed;
  info.rng_state = noise.state();
  info.extra = {{"stage_config", cfg}, {"final_batch_loss", out.final_batch_loss}};
  out.checkpoint = adapter_checkpoint(m, info, &opt);
  return out;
}

Stage1Result run_stage1(std::shared_ptr<const BaseModel> base, std::span<const TaskInstance> corpus,
                        const StageConfig& cfg, const AdapterConfig& adapters) {
  if (cfg.stage != 1) throw ConfigError("run_stage1 needs a stage-1 config");
  if (corpus.empty()) throw InputError("training corpus is empty");
  Rng init = Rng::split(cfg.seed, RngStream::init, 1);
  AdaptedModel model = attach_adapters(std::move(base), PlacementMap::single_lora(), adapters, init);
  StageOutcome outcome = train_adapters(model, corpus, cfg);
  return {std::move(model), std::move(outcome)};
}

AdaptedModel init_stage2_from_stage1(std::shared_ptr<const BaseModel> base, const Checkpoint& ck1,
                                     const AdapterConfig& adapters) {
  if (ck1.stage() != 1) throw ConfigError("Stage-2 initialization needs a Stage-1 checkpoint");
  if (ck1.meta.at("model").get<ModelConfig>() != base->config()) {
    throw ConfigError("Stage-1 checkpoint model config differs from the base model");
  }
  const auto ck_adapters = ck1.meta.at("adapters").get<AdapterConfig>();
  if (ck_adapters.rank != adapters.rank || ck_adapters.alpha != adapters.alpha) {
    throw ConfigError("Stage-1 checkpoint LoRA (rank " + std::to_string(ck_adapters.rank) + ", alpha " +
                      std::to_string(ck_adapters.alpha) + ") differs from the requested rank " +
                      std::to_string(adapters.rank) + ", alpha " + std::to_string(adapters.alpha));
  }
  AdaptedModel stage1 = [&] {
    try {
      return model_from_checkpoint(base, ck1);
    } catch (const CheckpointError& e) {
      throw ConfigError(std::string("Stage-1 checkpoint does not match: ") + e.what());
    }
  }();
  if (!(stage1.placement() == PlacementMap::single_lora())) {
    throw ConfigError("Stage-1 checkpoint must carry a single LoRA on every projection");
  }

  Rng scratch(0);
  AdaptedModel m = attach_adapters(base, PlacementMap::awaker(), adapters, scratch);
  for (std::size_t b = 0; b < static_cast<std::size_t>(base->config().n_layers); ++b) {
    for (Site s : kAllSites) {
      const LoRAExpert& src = *stage1.site(b, s).lora;
      AdapterSite& dst = m.site(b, s);
      if (dst.lora) {
        dst.lora = src.clone();
      } else if (dst.moe) {
        for (auto& e : dst.moe->experts) e = src.clone();
        dst.moe->global = src.clone();
        if (dst.moe->gate) {
          auto w = dst.moe->gate->weight.mutable_data();
          std::fill(w.begin(), w.end(), 0.0);
        }
      }
    }
  }
  return m;
}

StageOutcome run_stage2(AdaptedModel& m, std::span<const TaskInstance> corpus, const StageConfig& cfg) {
  if (cfg.stage != 2) throw ConfigError("run_stage2 needs a stage-2 config");
  if (!m.has_gates()) throw ConfigError("Stage 2 needs a model with MoE layers");
  return train_adapters(m, corpus, cfg);
}

StageOutcome run_stage3(AdaptedModel& m, std::span<const TaskInstance> corpus, const StageConfig& cfg) {
  if (cfg.stage != 3) throw ConfigError("run_stage3 needs a stage-3 config");
  if (!m.has_gates()) throw ConfigError("Stage 3 needs a model with MoE layers");
  if (!m.gates_frozen() || cfg.trainable.gates) {
    throw ConfigError("Stage 3 requires frozen gates; call freeze_gates first");
  }
  return train_adapters(m, corpus, cfg);
}

void freeze_gates(AdaptedModel& m) {
  for (auto& p : m.parameters()) {
    if (p.group == ParamGroup::gate) p.tensor.set_requires_grad(false);
  }
}

std::map<std::string, std::uint32_t> group_checksums(const AdaptedModel& m) {
  std::map<std::string, std::uint32_t> out;
  out["base"] = m.base().checksum();
  for (const auto& p : m.parameters()) {
    auto& crc = out[std::string(param_group_name(p.group))];
    crc = crc32_doubles(p.tensor.data(), crc);
  }
  return out;
}

}  // namespace awaker
