// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <span>

namespace awaker {

static_assert(std::endian::native == std::endian::little,
              "raw parameter payloads are written in host order and must be little-endian");

std::uint32_t crc32_bytes(std::span<const std::byte> bytes, std::uint32_t crc = 0);

inline std::uint32_t crc32_doubles(std::span<const double> values, std::uint32_t crc = 0) {
  return crc32_bytes(std::as_bytes(values), crc);
}

}  // namespace awaker
