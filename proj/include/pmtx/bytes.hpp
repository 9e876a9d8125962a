#pragma once

#include <cstdint>
#include <cstring>
#include <span>

// Little-endian field codecs. All on-medium formats are little-endian
// with fields at their declared offsets; these helpers keep the byte
// shuffling in one place.

namespace pmtx {

inline void put_u16(std::span<uint8_t> dst, size_t off, uint16_t v) {
  dst[off + 0] = static_cast<uint8_t>(v);
  dst[off + 1] = static_cast<uint8_t>(v >> 8);
}

inline void put_u32(std::span<uint8_t> dst, size_t off, uint32_t v) {
  for (int i = 0; i < 4; ++i) dst[off + i] = static_cast<uint8_t>(v >> (8 * i));
}

inline void put_u64(std::span<uint8_t> dst, size_t off, uint64_t v) {
  for (int i = 0; i < 8; ++i) dst[off + i] = static_cast<uint8_t>(v >> (8 * i));
}

inline uint16_t get_u16(std::span<const uint8_t> src, size_t off) {
  return static_cast<uint16_t>(src[off] | (src[off + 1] << 8));
}

inline uint32_t get_u32(std::span<const uint8_t> src, size_t off) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(src[off + i]) << (8 * i);
  return v;
}

inline uint64_t get_u64(std::span<const uint8_t> src, size_t off) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(src[off + i]) << (8 * i);
  return v;
}

constexpr uint64_t align_up(uint64_t v, uint64_t a) {
  return (v + a - 1) / a * a;
}

}  // namespace pmtx
