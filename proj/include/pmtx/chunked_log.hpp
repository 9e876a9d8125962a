#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "pmtx/layout.hpp"
#include "pmtx/medium.hpp"

// Chunked list over a fixed per-descriptor arena. The arena is divided
// into equal chunks, each with a small header {capacity, used, next};
// records never straddle a chunk boundary. A seal marker at the append
// cursor hands sentinel-scanning walkers over to the next chunk.
//
// The class only stages stores; persisting (writeback + barrier) is the
// caller's job, so appends can be folded into whatever barrier discipline
// the owning runtime uses. Staged stores are reported as writeback ranges.

namespace pmtx {

using ByteRange = std::pair<uint64_t, uint64_t>;  // offset, length

class ChunkedLog {
 public:
  ChunkedLog() = default;
  ChunkedLog(PersistentMedium* m, uint64_t arena_off, uint64_t arena_bytes,
             uint64_t chunk_bytes)
      : medium_(m),
        arena_off_(arena_off),
        chunk_bytes_(chunk_bytes),
        chunk_count_(arena_bytes / chunk_bytes) {}

  uint64_t chunk_count() const { return chunk_count_; }
  uint64_t chunk_off(uint64_t i) const { return arena_off_ + i * chunk_bytes_; }
  uint64_t payload_off(uint64_t i) const {
    return chunk_off(i) + layout::kChunkHeaderBytes;
  }
  uint64_t payload_capacity() const {
    return chunk_bytes_ - layout::kChunkHeaderBytes;
  }
  uint64_t chunk_used(uint64_t i) const {
    return get_u32(medium_->peek(chunk_off(i) + layout::kChunkUsed, 4), 0);
  }
  uint64_t chunk_next(uint64_t i) const {
    return medium_->peek_u64(chunk_off(i) + layout::kChunkNext);
  }
  uint64_t max_record_bytes() const { return payload_capacity() - 8; }

  // Volatile append cursor; reset when the log is truncated or rebuilt.
  void reset_cursor() {
    cur_chunk_ = 0;
    cur_off_ = 0;
    cur_init_ = false;
  }

  // Ranges covering every chunk header and consumed payload byte
  // (including seal markers), for batch writebacks at commit.
  std::vector<ByteRange> used_extent() const {
    std::vector<ByteRange> out;
    if (!cur_init_) return out;
    for (uint64_t i = 0; i <= cur_chunk_; ++i) {
      uint64_t span = layout::kChunkHeaderBytes +
                      std::min(chunk_used(i) + 8, payload_capacity());
      out.emplace_back(chunk_off(i), span);
    }
    return out;
  }

  struct Append {
    uint64_t record_off = 0;
    // Staged ranges the caller must write back before its next barrier.
    std::vector<ByteRange> wb;
  };

  // Reserves space and stores `record`. Seals the current chunk and moves
  // to the next when the record does not fit.
  Append append(std::span<const uint8_t> record) {
    if (record.size() > max_record_bytes())
      throw CapacityError("log record exceeds chunk capacity");
    Append out;
    if (!cur_init_) init_chunk_header(cur_chunk_, &out.wb);
    uint64_t remaining = payload_capacity() - cur_off_;
    if (record.size() + 8 > remaining) {
      // Seal: the walker stops scanning this chunk at the marker.
      if (remaining >= 8) {
        medium_->store_u64(payload_off(cur_chunk_) + cur_off_,
                           layout::kChunkSeal);
        out.wb.emplace_back(payload_off(cur_chunk_) + cur_off_, 8);
      }
      if (cur_chunk_ + 1 >= chunk_count_)
        throw CapacityError("log arena exhausted");
      medium_->store_u64(chunk_off(cur_chunk_) + layout::kChunkNext,
                         chunk_off(cur_chunk_ + 1));
      out.wb.emplace_back(chunk_off(cur_chunk_), layout::kChunkHeaderBytes);
      ++cur_chunk_;
      cur_off_ = 0;
      init_chunk_header(cur_chunk_, &out.wb);
    }
    out.record_off = payload_off(cur_chunk_) + cur_off_;
    medium_->store(out.record_off, record);
    out.wb.emplace_back(out.record_off, record.size());
    cur_off_ += record.size();
    store_used(cur_chunk_, cur_off_, &out.wb);
    return out;
  }

  // Zeroes every consumed payload byte (records plus any seal marker) and
  // resets chunk headers. Returns the ranges to write back; the zeroing
  // persists lazily with the caller's next barrier.
  std::vector<ByteRange> truncate() {
    std::vector<ByteRange> wb;
    if (!cur_init_) return wb;  // nothing was ever appended
    for (uint64_t i = 0; i <= cur_chunk_ && i < chunk_count_; ++i) {
      uint64_t used = chunk_used(i);
      uint64_t wipe = std::min(used + 8, payload_capacity());
      if (wipe > 0) {
        std::vector<uint8_t> zeros(wipe, 0);
        medium_->store(payload_off(i), zeros);
        wb.emplace_back(payload_off(i), wipe);
      }
      std::vector<uint8_t> hdr(layout::kChunkHeaderBytes, 0);
      put_u32(hdr, layout::kChunkCapacity,
              static_cast<uint32_t>(payload_capacity()));
      medium_->store(chunk_off(i), hdr);
      wb.emplace_back(chunk_off(i), layout::kChunkHeaderBytes);
    }
    reset_cursor();
    return wb;
  }

  // Truncation used by recovery: scrubs every chunk whose payload or
  // header deviates from the empty state, by content rather than by the
  // (possibly torn) used counters. Stores are skipped when the bytes are
  // already as desired, so a second recovery pass changes nothing.
  std::vector<ByteRange> truncate_all_dirty() {
    std::vector<ByteRange> wb;
    for (uint64_t i = 0; i < chunk_count_; ++i) {
      auto payload = medium_->peek(payload_off(i), payload_capacity());
      bool dirty = std::any_of(payload.begin(), payload.end(),
                               [](uint8_t b) { return b != 0; });
      if (dirty) {
        std::vector<uint8_t> zeros(payload_capacity(), 0);
        medium_->store(payload_off(i), zeros);
        wb.emplace_back(payload_off(i), payload_capacity());
      }
      auto hdr_now = medium_->peek(chunk_off(i), layout::kChunkHeaderBytes);
      std::vector<uint8_t> hdr_zero(layout::kChunkHeaderBytes, 0);
      bool hdr_untouched = hdr_now == hdr_zero;
      std::vector<uint8_t> hdr(layout::kChunkHeaderBytes, 0);
      put_u32(hdr, layout::kChunkCapacity,
              static_cast<uint32_t>(payload_capacity()));
      if (!hdr_untouched && hdr_now != hdr) {
        medium_->store(chunk_off(i), hdr);
        wb.emplace_back(chunk_off(i), layout::kChunkHeaderBytes);
      }
    }
    reset_cursor();
    return wb;
  }

 private:
  void init_chunk_header(uint64_t i, std::vector<ByteRange>* wb) {
    std::vector<uint8_t> hdr(layout::kChunkHeaderBytes, 0);
    put_u32(hdr, layout::kChunkCapacity,
            static_cast<uint32_t>(payload_capacity()));
    medium_->store(chunk_off(i), hdr);
    wb->emplace_back(chunk_off(i), layout::kChunkHeaderBytes);
    cur_init_ = true;
  }

  void store_used(uint64_t i, uint64_t used, std::vector<ByteRange>* wb) {
    std::array<uint8_t, 4> buf;
    put_u32(buf, 0, static_cast<uint32_t>(used));
    medium_->store(chunk_off(i) + layout::kChunkUsed, buf);
    wb->emplace_back(chunk_off(i), layout::kChunkHeaderBytes);
  }

  PersistentMedium* medium_ = nullptr;
  uint64_t arena_off_ = 0;
  uint64_t chunk_bytes_ = 0;
  uint64_t chunk_count_ = 0;
  uint64_t cur_chunk_ = 0;
  uint64_t cur_off_ = 0;
  bool cur_init_ = false;
};

// Sequential reader over the consumed payload of a chunked log, driven by
// the persisted per-chunk used counters. Appropriate when an outer commit
// marker vouches for the log contents (redo log, allocation log).
class UsedWalker {
 public:
  explicit UsedWalker(const ChunkedLog& log) : log_(&log) {}

  // Returns the offset of the next `min_bytes`-byte record header, or 0
  // when the consumed payload is exhausted.
  uint64_t next(uint64_t min_bytes) {
    while (chunk_ < log_->chunk_count()) {
      uint64_t used = log_->chunk_used(chunk_);
      if (off_ + min_bytes <= used) return log_->payload_off(chunk_) + off_;
      ++chunk_;
      off_ = 0;
    }
    return 0;
  }

  void advance(uint64_t bytes) { off_ += bytes; }

 private:
  const ChunkedLog* log_;
  uint64_t chunk_ = 0;
  uint64_t off_ = 0;
};

}  // namespace pmtx
