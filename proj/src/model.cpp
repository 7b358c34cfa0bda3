// SPDX-License-Identifier: Apache-2.0
#include "awaker/model.hpp"

#include <cmath>
#include <sstream>

#include "awaker/checksum.hpp"
#include "awaker/error.hpp"
#include "awaker/routing.hpp"

namespace awaker {

// ---- placement ----------------------------------------------------------------

std::string_view site_name(Site site) {
  switch (site) {
    case Site::q_proj: return "q_proj";
    case Site::k_proj: return "k_proj";
    case Site::v_proj: return "v_proj";
    case Site::o_proj: return "o_proj";
    case Site::gate_proj: return "gate_proj";
    case Site::up_proj: return "up_proj";
    case Site::down_proj: return "down_proj";
  }
  return "?";
}

Site site_from_name(std::string_view name) {
  for (Site s : kAllSites) {
    if (site_name(s) == name) return s;
  }
  throw ConfigError("unknown projection '" + std::string(name) + "'");
}

std::string_view adapter_kind_name(AdapterKind kind) {
  switch (kind) {
    case AdapterKind::none: return "none";
    case AdapterKind::single_lora: return "lora";
    case AdapterKind::gated_moe: return "moe";
    case AdapterKind::simplified_moe: return "simplified_moe";
  }
  return "?";
}

AdapterKind adapter_kind_from_name(std::string_view name) {
  for (AdapterKind k : {AdapterKind::none, AdapterKind::single_lora, AdapterKind::gated_moe,
                        AdapterKind::simplified_moe}) {
    if (adapter_kind_name(k) == name) return k;
  }
  throw ConfigError("unknown adapter kind '" + std::string(name) + "'");
}

PlacementMap PlacementMap::awaker() {
  PlacementMap m;
  for (Site s : {Site::q_proj, Site::k_proj, Site::v_proj}) m.set(s, {AdapterKind::single_lora});
  m.set(Site::o_proj, {AdapterKind::gated_moe});
  m.set(Site::gate_proj, {AdapterKind::gated_moe});
  m.set(Site::up_proj, {AdapterKind::simplified_moe, Site::gate_proj});
  m.set(Site::down_proj, {AdapterKind::simplified_moe, Site::gate_proj});
  return m;
}

PlacementMap PlacementMap::single_lora() {
  PlacementMap m;
  for (Site s : kAllSites) m.set(s, {AdapterKind::single_lora});
  return m;
}

bool PlacementMap::has_moe() const {
  for (const auto& e : entries_) {
    if (e.kind == AdapterKind::gated_moe || e.kind == AdapterKind::simplified_moe) return true;
  }
  return false;
}

std::string PlacementMap::describe() const {
  std::ostringstream os;
  for (Site s : kAllSites) {
    const auto& e = (*this)[s];
    os << site_name(s) << '=' << adapter_kind_name(e.kind);
    if (e.kind == AdapterKind::simplified_moe) os << '<' << site_name(e.donor);
    os << ' ';
  }
  return os.str();
}

void PlacementMap::validate() const {
  for (Site s : kAllSites) {
    const auto& e = (*this)[s];
    if (e.kind != AdapterKind::simplified_moe) continue;
    if ((*this)[e.donor].kind != AdapterKind::gated_moe) {
      throw ConfigError("simplified MoE at " + std::string(site_name(s)) + " names donor " +
                        std::string(site_name(e.donor)) + ", which is not a gated MoE");
    }
  }
}

// ---- instances -----------------------------------------------------------------

void InstanceSegments::validate() const {
  if (instr_end == 0) throw InputError("instance has an empty instruction span");
  if (instr_end > resp_start) throw InputError("instruction span overlaps the response span");
  if (resp_start >= size) throw InputError("instance has an empty response span");
}

std::vector<int> TaskInstance::next_token_targets() const {
  std::vector<int> t(tokens.size(), 0);
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) t[i] = tokens[i + 1];
  return t;
}

std::vector<bool> TaskInstance::response_mask() const {
  std::vector<bool> m(tokens.size(), false);
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) m[i] = i + 1 >= resp_start;
  return m;
}

// ---- configs -------------------------------------------------------------------

void ModelConfig::validate() const {
  if (vocab <= 0 || d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0 || max_seq <= 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (d_model % n_heads != 0 || (d_model / n_heads) % 2 != 0) {
    throw ConfigError("d_model must split into an even head width across n_heads");
  }
}

void AdapterConfig::validate() const {
  if (n_experts < 1) throw ConfigError("n_experts must be at least 1");
  if (rank < 1) throw ConfigError("LoRA rank must be positive");
  if (!(alpha > 0.0)) throw ConfigError("LoRA alpha must be positive");
  if (!(temperature > 0.0)) throw ConfigError("gate temperature must be positive");
  if (noise_sigma < 0.0) throw ConfigError("gate noise sigma must be non-negative");
  if (top_k < 1 || top_k > n_experts) throw ConfigError("top_k must lie in [1, n_experts]");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"vocab", c.vocab},     {"d_model", c.d_model},       {"n_layers", c.n_layers},
       {"n_heads", c.n_heads}, {"d_ff", c.d_ff},             {"max_seq", c.max_seq},
       {"rope_theta", c.rope_theta}, {"norm_eps", c.norm_eps}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.vocab = j.value("vocab", c.vocab);
  c.d_model = j.value("d_model", c.d_model);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.max_seq = j.value("max_seq", c.max_seq);
  c.rope_theta = j.value("rope_theta", c.rope_theta);
  c.norm_eps = j.value("norm_eps", c.norm_eps);
}

void to_json(nlohmann::json& j, const AdapterConfig& c) {
  j = {{"n_experts", c.n_experts},     {"rank", c.rank},
       {"alpha", c.alpha},             {"temperature", c.temperature},
       {"noise_sigma", c.noise_sigma}, {"top_k", c.top_k}};
}

void from_json(const nlohmann::json& j, AdapterConfig& c) {
  c.n_experts = j.value("n_experts", c.n_experts);
  c.rank = j.value("rank", c.rank);
  c.alpha = j.value("alpha", c.alpha);
  c.temperature = j.value("temperature", c.temperature);
  c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
  c.top_k = j.value("top_k", c.top_k);
}

void to_json(nlohmann::json& j, const PlacementMap& m) {
  j = nlohmann::json::object();
  for (Site s : kAllSites) {
    nlohmann::json e = {{"kind", adapter_kind_name(m[s].kind)}};
    if (m[s].kind == AdapterKind::simplified_moe) e["donor"] = site_name(m[s].donor);
    j[std::string(site_name(s))] = e;
  }
}

void from_json(const nlohmann::json& j, PlacementMap& m) {
  m = PlacementMap{};
  for (auto it = j.begin(); it != j.end(); ++it) {
    PlacementEntry e;
    e.kind = adapter_kind_from_name(it.value().at("kind").get<std::string>());
    if (it.value().contains("donor")) e.donor = site_from_name(it.value()["donor"].get<std::string>());
    m.set(site_from_name(it.key()), e);
  }
}

std::string_view param_group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::single_lora: return "single_lora";
    case ParamGroup::expert: return "expert";
    case ParamGroup::global_expert: return "global_expert";
    case ParamGroup::gate: return "gate";
  }
  return "?";
}

TrainableSet TrainableSet::for_stage(int stage) {
  switch (stage) {
    case 1: return {true, false, false, false};
    case 2: return {true, true, true, true};
    case 3: return {true, true, true, false};
    default: throw ConfigError("stage must be 1, 2 or 3, got " + std::to_string(stage));
  }
}

bool TrainableSet::includes(ParamGroup g) const {
  switch (g) {
    case ParamGroup::single_lora: return single_lora;
    case ParamGroup::expert: return experts;
    case ParamGroup::global_expert: return global_expert;
    case ParamGroup::gate: return gates;
  }
  return false;
}

void to_json(nlohmann::json& j, const TrainableSet& t) {
  j = {{"single_lora", t.single_lora}, {"experts", t.experts},
       {"global_expert", t.global_expert}, {"gates", t.gates}};
}

void from_json(const nlohmann::json& j, TrainableSet& t) {
  t.single_lora = j.value("single_lora", t.single_lora);
  t.experts = j.value("experts", t.experts);
  t.global_expert = j.value("global_expert", t.global_expert);
  t.gates = j.value("gates", t.gates);
}

// ---- base model ----------------------------------------------------------------

std::pair<std::size_t, std::size_t> BaseModel::site_dims(const ModelConfig& cfg, Site s) {
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto f = static_cast<std::size_t>(cfg.d_ff);
  switch (s) {
    case Site::gate_proj:
    case Site::up_proj: return {d, f};
    case Site::down_proj: return {f, d};
    default: return {d, d};
  }
}

namespace {

Tensor random_matrix(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  std::vector<double> v(rows * cols);
  for (double& x : v) x = rng.normal(0.0, stddev);
  return Tensor::from({rows, cols}, std::move(v));
}

Tensor ones(std::size_t n) { return Tensor::from({n}, std::vector<double>(n, 1.0)); }

}  // namespace

BaseModel BaseModel::init(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  BaseModel m;
  m.cfg_ = cfg;
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const double residual_scale = 1.0 / std::sqrt(2.0 * cfg.n_layers);
  m.embed_ = random_matrix(static_cast<std::size_t>(cfg.vocab), d, 1.0, rng);
  for (int b = 0; b < cfg.n_layers; ++b) {
    BlockWeights w;
    w.attn_norm = ones(d);
    w.mlp_norm = ones(d);
    for (Site s : kAllSites) {
      const auto [in, out] = site_dims(cfg, s);
      double stddev = 1.0 / std::sqrt(static_cast<double>(in));
      if (s == Site::o_proj || s == Site::down_proj) stddev *= residual_scale;
      w.proj[static_cast<std::size_t>(s)] = random_matrix(out, in, stddev, rng);
    }
    m.blocks_.push_back(std::move(w));
  }
  m.final_norm_ = ones(d);
  m.head_ = random_matrix(static_cast<std::size_t>(cfg.vocab), d, 1.0 / std::sqrt(double(d)), rng);
  return m;
}

std::vector<NamedTensor> BaseModel::named_parameters() const {
  std::vector<NamedTensor> out;
  out.push_back({"embed", embed_});
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const std::string prefix = "blocks." + std::to_string(b) + ".";
    out.push_back({prefix + "attn_norm", blocks_[b].attn_norm});
    for (Site s : kAllSites) {
      out.push_back({prefix + std::string(site_name(s)) + ".weight", blocks_[b][s]});
    }
    out.push_back({prefix + "mlp_norm", blocks_[b].mlp_norm});
  }
  out.push_back({"final_norm", final_norm_});
  out.push_back({"head", head_});
  return out;
}

void BaseModel::set_trainable(bool on) {
  for (auto& p : named_parameters()) p.tensor.set_requires_grad(on);
}

bool BaseModel::any_trainable() const {
  for (const auto& p : named_parameters()) {
    if (p.tensor.requires_grad()) return true;
  }
  return false;
}

std::uint32_t BaseModel::checksum() const {
  std::uint32_t crc = 0;
  for (const auto& p : named_parameters()) crc = crc32_doubles(p.tensor.data(), crc);
  return crc;
}

std::size_t BaseModel::num_params() const {
  std::size_t n = 0;
  for (const auto& p : named_parameters()) n += p.tensor.numel();
  return n;
}

namespace {

void check_tokens(const ModelConfig& cfg, std::span<const int> tokens) {
  if (tokens.empty()) throw InputError("forward: empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(cfg.max_seq)) {
    throw InputError("forward: sequence of " + std::to_string(tokens.size()) +
                     " tokens exceeds max_seq " + std::to_string(cfg.max_seq));
  }
}

}  // namespace

Tensor base_forward(const BaseModel& base, std::span<const int> tokens) {
  const auto& cfg = base.config();
  check_tokens(cfg, tokens);
  const auto heads = static_cast<std::size_t>(cfg.n_heads);
  Tensor x = embedding(base.embed(), tokens);
  for (const auto& w : base.blocks()) {
    Tensor h = rms_norm(x, w.attn_norm, cfg.norm_eps);
    Tensor q = rope(linear(h, w[Site::q_proj]), heads, cfg.rope_theta);
    Tensor k = rope(linear(h, w[Site::k_proj]), heads, cfg.rope_theta);
    Tensor v = linear(h, w[Site::v_proj]);
    x = add(x, linear(causal_attention(q, k, v, heads), w[Site::o_proj]));
    Tensor h2 = rms_norm(x, w.mlp_norm, cfg.norm_eps);
    Tensor act = mul(silu(linear(h2, w[Site::gate_proj])), linear(h2, w[Site::up_proj]));
    x = add(x, linear(act, w[Site::down_proj]));
  }
  return linear(rms_norm(x, base.final_norm(), cfg.norm_eps), base.head());
}

// ---- adapted model -----------------------------------------------------------

AdaptedModel::AdaptedModel(std::shared_ptr<const BaseModel> base) : base_(std::move(base)) {
  if (!base_) throw ConfigError("adapted model needs a base model");
}

std::string AdaptedModel::site_id(std::size_t block, Site s) {
  return "blocks." + std::to_string(block) + "." + std::string(site_name(s));
}

void AdaptedModel::attach(const PlacementMap& map, const AdapterConfig& cfg, Rng& rng) {
  if (attached_) throw ConfigError("adapters are already attached to this model");
  map.validate();
  cfg.validate();
  map_ = map;
  cfg_ = cfg;
  const auto& mc = base_->config();
  const auto n = static_cast<std::size_t>(cfg.n_experts);
  sites_.assign(static_cast<std::size_t>(mc.n_layers), {});
  for (std::size_t b = 0; b < sites_.size(); ++b) {
    for (Site s : kAllSites) {
      const auto [in, out] = BaseModel::site_dims(mc, s);
      AdapterSite& site = sites_[b][static_cast<std::size_t>(s)];
      site.kind = map[s].kind;
      switch (site.kind) {
        case AdapterKind::none: break;
        case AdapterKind::single_lora:
          site.lora = LoRAExpert::init(in, out, cfg.rank, cfg.alpha, rng);
          break;
        case AdapterKind::gated_moe:
        case AdapterKind::simplified_moe: {
          MoEAdapterLayer layer;
          layer.id = site_id(b, s);
          for (std::size_t e = 0; e < n; ++e) {
            layer.experts.push_back(LoRAExpert::init(in, out, cfg.rank, cfg.alpha, rng));
          }
          layer.global = LoRAExpert::init(in, out, cfg.rank, cfg.alpha, rng);
          if (site.kind == AdapterKind::gated_moe) {
            layer.gate = GateLayer::zeros(n, static_cast<std::size_t>(mc.d_model), cfg.temperature,
                                          cfg.noise_sigma, cfg.top_k);
          }
          site.moe = std::move(layer);
          break;
        }
      }
    }
    for (Site s : kAllSites) {
      AdapterSite& site = sites_[b][static_cast<std::size_t>(s)];
      if (site.kind == AdapterKind::simplified_moe) {
        bind_simplified(*site.moe, *sites_[b][static_cast<std::size_t>(map[s].donor)].moe);
      }
    }
  }
  attached_ = true;
}

AdaptedModel attach_adapters(std::shared_ptr<const BaseModel> base, const PlacementMap& map,
                             const AdapterConfig& cfg, Rng& rng) {
  AdaptedModel m(std::move(base));
  m.attach(map, cfg, rng);
  return m;
}

Tensor AdaptedModel::project(std::size_t block, Site s, const Tensor& x,
                             const Tensor& hidden_for_gate, RoutingContext* ctx) const {
  const Tensor base_out = linear(x, base_->blocks()[block][s]);
  if (!attached_) return base_out;
  const AdapterSite& site = sites_[block][static_cast<std::size_t>(s)];
  switch (site.kind) {
    case AdapterKind::none: return base_out;
    case AdapterKind::single_lora: return add(base_out, lora_delta(*site.lora, x));
    case AdapterKind::gated_moe: {
      if (ctx == nullptr) throw RoutingError("forward: model has gated layers but no routing context");
      const RoutingDecision* d = ctx->find(block, s);
      if (d == nullptr) {
        Tensor gate_in;
        if (ctx->mode() == RoutingMode::shared_embedding) {
          gate_in = ctx->gate_input();
          if (!gate_in.defined()) throw RoutingError("routing context carries no gate input");
        } else {
          gate_in = pool_instruction(hidden_for_gate, ctx->segments(), ctx->pooling());
        }
        RoutingDecision rd;
        rd.block = block;
        rd.site = s;
        rd.gate = gate_forward(*site.moe->gate, gate_in, ctx->train_mode(), ctx->noise_rng(),
                               site.moe->id);
        rd.gate_input.assign(gate_in.data().begin(), gate_in.data().end());
        ctx->record(std::move(rd));
        d = &ctx->log().back();
      }
      return moe_forward(*site.moe, x, d->gate, base_out);
    }
    case AdapterKind::simplified_moe: {
      if (ctx == nullptr) throw RoutingError("forward: model has gated layers but no routing context");
      const MoEAdapterLayer& layer = *site.moe;
      if (!layer.donor) throw RoutingError("simplified MoE layer '" + layer.id + "' is unbound");
      const RoutingDecision* d = ctx->find(block, s);
      if (d == nullptr) {
        const RoutingDecision* donor = ctx->find(block, map_[s].donor);
        if (donor == nullptr) {
          throw RoutingError("donor decision for '" + layer.id + "' not yet routed");
        }
        RoutingDecision rd = *donor;
        rd.site = s;
        rd.reused = true;
        ctx->record(std::move(rd));
        d = &ctx->log().back();
      }
      return moe_forward(layer, x, d->gate, base_out);
    }
  }
  return base_out;
}

Tensor AdaptedModel::forward(const TaskInstance& inst, RoutingContext* ctx) const {
  const auto& cfg = base_->config();
  check_tokens(cfg, inst.tokens);
  if (ctx != nullptr && ctx->segments() != inst.segments()) {
    throw RoutingError("routing context was built for a different instance layout");
  }
  if (has_gates() && ctx == nullptr) {
    throw RoutingError("forward: model has gated layers but no routing context");
  }
  const auto heads = static_cast<std::size_t>(cfg.n_heads);
  Tensor x = embedding(base_->embed(), inst.tokens);
  for (std::size_t b = 0; b < base_->blocks().size(); ++b) {
    const auto& w = base_->blocks()[b];
    Tensor h = rms_norm(x, w.attn_norm, cfg.norm_eps);
    Tensor q = rope(project(b, Site::q_proj, h, x, ctx), heads, cfg.rope_theta);
    Tensor k = rope(project(b, Site::k_proj, h, x, ctx), heads, cfg.rope_theta);
    Tensor v = project(b, Site::v_proj, h, x, ctx);
    x = add(x, project(b, Site::o_proj, causal_attention(q, k, v, heads), x, ctx));
    Tensor h2 = rms_norm(x, w.mlp_norm, cfg.norm_eps);
    Tensor gate = project(b, Site::gate_proj, h2, x, ctx);
    Tensor up = project(b, Site::up_proj, h2, x, ctx);
    x = add(x, project(b, Site::down_proj, mul(silu(gate), up), x, ctx));
  }
  return linear(rms_norm(x, base_->final_norm(), cfg.norm_eps), base_->head());
}

std::vector<AdapterParam> AdaptedModel::parameters() const {
  std::vector<AdapterParam> out;
  for (std::size_t b = 0; b < sites_.size(); ++b) {
    for (Site s : kAllSites) {
      const AdapterSite& site = sites_[b][static_cast<std::size_t>(s)];
      const std::string prefix = site_id(b, s) + ".";
      if (site.lora) {
        out.push_back({prefix + "lora.A", site.lora->a, ParamGroup::single_lora});
        out.push_back({prefix + "lora.B", site.lora->b, ParamGroup::single_lora});
      }
      if (site.moe) {
        for (std::size_t e = 0; e < site.moe->experts.size(); ++e) {
          const std::string ep = prefix + "experts." + std::to_string(e) + ".";
          out.push_back({ep + "A", site.moe->experts[e].a, ParamGroup::expert});
          out.push_back({ep + "B", site.moe->experts[e].b, ParamGroup::expert});
        }
        out.push_back({prefix + "global.A", site.moe->global.a, ParamGroup::global_expert});
        out.push_back({prefix + "global.B", site.moe->global.b, ParamGroup::global_expert});
        if (site.moe->gate) out.push_back({prefix + "gate.W", site.moe->gate->weight, ParamGroup::gate});
      }
    }
  }
  return out;
}

std::vector<NamedTensor> AdaptedModel::named_parameters() const {
  std::vector<NamedTensor> out;
  for (auto& p : parameters()) out.push_back({std::move(p.name), std::move(p.tensor)});
  return out;
}

void AdaptedModel::set_trainable(const TrainableSet& set) {
  for (auto& p : parameters()) p.tensor.set_requires_grad(set.includes(p.group));
}

bool AdaptedModel::gates_frozen() const {
  for (const auto& p : parameters()) {
    if (p.group == ParamGroup::gate && p.tensor.requires_grad()) return false;
  }
  return true;
}

std::size_t AdaptedModel::count_trainable() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) {
    if (p.tensor.requires_grad()) n += p.tensor.numel();
  }
  for (const auto& p : base_->named_parameters()) {
    if (p.tensor.requires_grad()) n += p.tensor.numel();
  }
  return n;
}

std::size_t AdaptedModel::count_active() const {
  std::size_t n = 0;
  for (const auto& block : sites_) {
    for (const AdapterSite& site : block) {
      if (site.lora) n += site.lora->num_params();
      if (site.moe) {
        n += site.moe->global.num_params();
        // experts at one site share shapes, so any k of them cost the same
        n += static_cast<std::size_t>(cfg_.top_k) * site.moe->experts.front().num_params();
      }
    }
  }
  return n;
}

std::size_t count_trainable(const AdaptedModel& m) { return m.count_trainable(); }

}  // namespace awaker
