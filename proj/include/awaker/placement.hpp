// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

namespace awaker {

/// Frozen projections of one transformer block that can carry an adapter.
enum class Site : std::uint8_t { q_proj, k_proj, v_proj, o_proj, gate_proj, up_proj, down_proj };

inline constexpr std::size_t kNumSites = 7;
inline constexpr std::array<Site, kNumSites> kAllSites = {
    Site::q_proj, Site::k_proj, Site::v_proj, Site::o_proj,
    Site::gate_proj, Site::up_proj, Site::down_proj};

std::string_view site_name(Site site);
Site site_from_name(std::string_view name);

enum class AdapterKind : std::uint8_t { none, single_lora, gated_moe, simplified_moe };

std::string_view adapter_kind_name(AdapterKind kind);
AdapterKind adapter_kind_from_name(std::string_view name);

struct PlacementEntry {
  AdapterKind kind = AdapterKind::none;
  Site donor = Site::gate_proj;  // meaningful only for simplified_moe

  bool operator==(const PlacementEntry&) const = default;
};

/// Which adapter sits on which projection; identical for every block.
class PlacementMap {
 public:
  /// q/k/v single LoRA, o and gate gated MoE, up/down simplified MoE fed by gate.
  static PlacementMap awaker();
  /// One LoRA on every projection (Stage I and the baseline arm).
  static PlacementMap single_lora();

  const PlacementEntry& operator[](Site s) const { return entries_[static_cast<std::size_t>(s)]; }
  void set(Site s, PlacementEntry e) { entries_[static_cast<std::size_t>(s)] = e; }

  bool has_moe() const;
  std::string describe() const;
  /// Throws ConfigError unless every simplified site names a gated donor.
  void validate() const;

  bool operator==(const PlacementMap&) const = default;

 private:
  std::array<PlacementEntry, kNumSites> entries_{};
};

}  // namespace awaker
