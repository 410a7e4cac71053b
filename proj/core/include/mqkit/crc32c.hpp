#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>

namespace mqkit {

/// CRC-32C (Castagnoli), reflected polynomial 0x82F63B78, init and final
/// xor 0xFFFFFFFF. crc32c("123456789") == 0xE3069283, the standard check
/// value. Pass a previous result as `seed` to checksum data in pieces.
std::uint32_t crc32c(const void* data, std::size_t len,
                     std::uint32_t seed = 0) noexcept;

inline std::uint32_t crc32c(std::string_view data,
                            std::uint32_t seed = 0) noexcept {
  return crc32c(data.data(), data.size(), seed);
}

}  // namespace mqkit
