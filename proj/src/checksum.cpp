// SPDX-License-Identifier: Apache-2.0
#include "awaker/checksum.hpp"

#include <zlib.h>

namespace awaker {

std::uint32_t crc32_bytes(std::span<const std::byte> bytes, std::uint32_t crc) {
  // zlib takes uInt lengths; feed in chunks for very large buffers.
  const auto* p = reinterpret_cast<const Bytef*>(bytes.data());
  std::size_t left = bytes.size();
  uLong c = crc;
  while (left > 0) {
    const auto chunk = static_cast<uInt>(left > (1u << 30) ? (1u << 30) : left);
    c = ::crc32(c, p, chunk);
    p += chunk;
    left -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

}  // namespace awaker
