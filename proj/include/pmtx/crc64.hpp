#pragma once

#include <array>
#include <cstdint>
#include <span>

// CRC-64/ECMA-182 (polynomial 0x42F0E1EBA9EA3693), bit-reflected form.
// Used to validate undo log records against torn writes.

namespace pmtx {

namespace detail {

constexpr uint64_t kCrc64Poly = 0xC96C5795D7870F42ULL;  // reflected ECMA

constexpr std::array<uint64_t, 256> make_crc64_table() {
  std::array<uint64_t, 256> table{};
  for (uint32_t i = 0; i < 256; ++i) {
    uint64_t crc = i;
    for (int bit = 0; bit < 8; ++bit)
      crc = (crc >> 1) ^ ((crc & 1) ? kCrc64Poly : 0);
    table[i] = crc;
  }
  return table;
}

inline constexpr std::array<uint64_t, 256> kCrc64Table = make_crc64_table();

}  // namespace detail

inline uint64_t crc64(std::span<const uint8_t> data, uint64_t seed = 0) {
  uint64_t crc = ~seed;
  for (uint8_t b : data)
    crc = (crc >> 8) ^ detail::kCrc64Table[(crc ^ b) & 0xFF];
  return ~crc;
}

// Degenerate checksum for the two-barrier undo append variant, which does
// not rely on record validation for recovery.
inline uint64_t byte_sum64(std::span<const uint8_t> data) {
  uint64_t sum = 0;
  for (uint8_t b : data) sum += b;
  return sum;
}

}  // namespace pmtx
