// SPDX-License-Identifier: Apache-2.0
#include "awaker/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "awaker/checksum.hpp"
#include "awaker/error.hpp"

namespace awaker {

namespace {

constexpr char kMagic[8] = {'A', 'W', 'A', 'K', 'E', 'R', 'C', 'K'};

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(std::string_view bytes, std::size_t at) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<T>(static_cast<unsigned char>(bytes[at + i])) << (8 * i);
  }
  return v;
}

std::string opt_name(const char* which, const std::string& param) {
  return std::string("optim.") + which + "." + param;
}

}  // namespace

const CheckpointEntry* Checkpoint::find(std::string_view name) const {
  for (const auto& e : entries) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

std::string serialize_checkpoint(const Checkpoint& ck) {
  nlohmann::json manifest = ck.meta;
  manifest["version"] = kCheckpointVersion;
  nlohmann::json entries = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& e : ck.entries) {
    if (shape_numel(e.shape) != e.data.size()) {
      throw CheckpointError("entry '" + e.name + "' data does not match its shape");
    }
    entries.push_back({{"name", e.name},
                       {"shape", e.shape},
                       {"dtype", "f64"},
                       {"byte_offset", offset},
                       {"crc32", crc32_doubles(e.data)}});
    offset += e.data.size() * sizeof(double);
  }
  manifest["entries"] = std::move(entries);
  const std::string text = manifest.dump();

  std::string out(kMagic, sizeof kMagic);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, text.size());
  out += text;
  for (const auto& e : ck.entries) {
    const auto bytes = std::as_bytes(std::span(e.data));
    out.append(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  }
  return out;
}

Checkpoint parse_checkpoint(std::string_view bytes) {
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw CheckpointError("not an .awck checkpoint (bad magic)");
  }
  const auto version = get_le<std::uint32_t>(bytes, 8);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto manifest_len = get_le<std::uint64_t>(bytes, 12);
  if (manifest_len > bytes.size() - 20) throw CheckpointError("truncated checkpoint manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(20, manifest_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint manifest: ") + e.what());
  }
  const std::string_view payload = bytes.substr(20 + manifest_len);

  Checkpoint ck;
  try {
    for (const auto& je : manifest.at("entries")) {
      CheckpointEntry e;
      e.name = je.at("name").get<std::string>();
      e.shape = je.at("shape").get<Shape>();
      if (je.at("dtype").get<std::string>() != "f64") {
        throw CheckpointError("entry '" + e.name + "' has unsupported dtype");
      }
      const auto offset = je.at("byte_offset").get<std::uint64_t>();
      const std::size_t count = shape_numel(e.shape);
      const std::size_t nbytes = count * sizeof(double);
      if (offset > payload.size() || nbytes > payload.size() - offset) {
        throw CheckpointError("entry '" + e.name + "' extends past the end of the payload");
      }
      e.data.resize(count);
      std::memcpy(e.data.data(), payload.data() + offset, nbytes);
      const auto expected = je.at("crc32").get<std::uint32_t>();
      const auto actual = crc32_doubles(e.data);
      if (expected != actual) {
        std::ostringstream os;
        os << "crc32 mismatch in entry '" << e.name << "': manifest " << std::hex << expected
           << ", payload " << actual << " (checkpoint is corrupted)";
        throw CheckpointError(os.str());
      }
      ck.entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint entry: ") + e.what());
  }
  manifest.erase("entries");
  manifest.erase("version");
  ck.meta = std::move(manifest);
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const std::string bytes = serialize_checkpoint(ck);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot write " + path.string());
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw CheckpointError("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_checkpoint(ss.str());
}

Checkpoint base_checkpoint(const BaseModel& base, std::uint64_t seed) {
  Checkpoint ck;
  ck.meta = {{"kind", "base"}, {"stage", 0}, {"step", 0}, {"seed", seed},
             {"model", base.config()}, {"base_crc32", base.checksum()}};
  for (const auto& p : base.named_parameters()) {
    ck.entries.push_back({p.name, p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()}});
  }
  return ck;
}

BaseModel base_from_checkpoint(const Checkpoint& ck) {
  if (ck.meta.value("kind", "") != "base") throw CheckpointError("checkpoint does not hold a base model");
  const auto cfg = ck.meta.at("model").get<ModelConfig>();
  Rng scratch(0);
  BaseModel base = BaseModel::init(cfg, scratch);
  for (auto& p : base.named_parameters()) {
    const CheckpointEntry* e = ck.find(p.name);
    if (e == nullptr) throw CheckpointError("base checkpoint lacks '" + p.name + "'");
    if (e->shape != p.tensor.shape()) throw CheckpointError("shape mismatch for '" + p.name + "'");
    std::copy(e->data.begin(), e->data.end(), p.tensor.mutable_data().begin());
  }
  base.set_trainable(false);
  return base;
}

Checkpoint adapter_checkpoint(const AdaptedModel& m, const AdapterCheckpointInfo& info,
                              const AdamW* optimizer) {
  if (!m.attached()) throw CheckpointError("model has no adapters to save");
  Checkpoint ck;
  ck.meta = {{"kind", "adapters"},
             {"stage", info.stage},
             {"step", info.step},
             {"seed", info.seed},
             {"rng_state", info.rng_state},
             {"model", m.base().config()},
             {"adapters", m.adapter_config()},
             {"placement", m.placement()},
             {"base_crc32", m.base().checksum()}};
  if (!info.extra.empty()) ck.meta["extra"] = info.extra;
  for (const auto& p : m.parameters()) {
    ck.entries.push_back({p.name, p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()}});
  }
  if (optimizer != nullptr) {
    ck.meta["optimizer"] = {{"steps", optimizer->steps_taken()},
                            {"beta1", optimizer->config().beta1},
                            {"beta2", optimizer->config().beta2},
                            {"eps", optimizer->config().eps},
                            {"weight_decay", optimizer->config().weight_decay}};
    for (const auto& slot : optimizer->slots()) {
      ck.entries.push_back({opt_name("m", slot.name), slot.param.shape(), slot.m});
      ck.entries.push_back({opt_name("v", slot.name), slot.param.shape(), slot.v});
    }
  }
  return ck;
}

AdaptedModel model_from_checkpoint(std::shared_ptr<const BaseModel> base, const Checkpoint& ck) {
  if (ck.meta.value("kind", "") != "adapters") throw CheckpointError("checkpoint does not hold adapters");
  const auto cfg = ck.meta.at("model").get<ModelConfig>();
  if (!(cfg == base->config())) throw CheckpointError("checkpoint model config differs from the base");
  if (ck.meta.at("base_crc32").get<std::uint32_t>() != base->checksum()) {
    throw CheckpointError("checkpoint was trained against a different base model");
  }
  Rng scratch(0);
  AdaptedModel m(std::move(base));
  m.attach(ck.meta.at("placement").get<PlacementMap>(), ck.meta.at("adapters").get<AdapterConfig>(),
           scratch);
  for (auto& p : m.parameters()) {
    const CheckpointEntry* e = ck.find(p.name);
    if (e == nullptr) throw CheckpointError("checkpoint lacks adapter parameter '" + p.name + "'");
    if (e->shape != p.tensor.shape()) throw CheckpointError("shape mismatch for '" + p.name + "'");
    std::copy(e->data.begin(), e->data.end(), p.tensor.mutable_data().begin());
  }
  return m;
}

void restore_optimizer(AdamW& opt, const Checkpoint& ck) {
  for (auto& slot : opt.slots()) {
    const CheckpointEntry* m = ck.find(opt_name("m", slot.name));
    const CheckpointEntry* v = ck.find(opt_name("v", slot.name));
    if (m == nullptr || v == nullptr) throw CheckpointError("no optimizer moments for '" + slot.name + "'");
    slot.m = m->data;
    slot.v = v->data;
  }
  if (ck.meta.contains("optimizer")) opt.set_steps_taken(ck.meta["optimizer"].at("steps").get<std::int64_t>());
}

}  // namespace awaker
