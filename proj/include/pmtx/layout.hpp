#pragma once

#include <cstdint>

#include "pmtx/bytes.hpp"
#include "pmtx/errors.hpp"
#include "pmtx/medium.hpp"

// On-medium formats. Everything is little-endian at the declared offsets;
// the medium is zero-initialized and every structure here treats all-zero
// as "empty" (descriptor state 0 == IDLE, superblock entry block_size 0 ==
// unused, root 0 == unset).

namespace pmtx {

enum class RuntimeKind : uint32_t { UNDO = 0, REDO = 1, COW = 2 };

enum class UndoAppendMode : uint32_t {
  // Checksummed records, one barrier per append, tail inferred at recovery.
  CHECKSUM_SINGLE_BARRIER = 0,
  // Plain records, two barriers per append (record, then tail pointer);
  // recovery trusts the tail pointer. Preferable for coarse-grained writes
  // where checksum computation dominates.
  NAIVE_TWO_BARRIER = 1,
};

struct RegionConfig {
  uint32_t desc_count = 64;
  uint32_t log_arena_bytes = 32 * 1024;   // per descriptor: undo/redo/writeset
  uint32_t alloc_arena_bytes = 8 * 1024;  // per descriptor: allocation log
  uint32_t log_chunk_bytes = 4096;
  UndoAppendMode undo_mode = UndoAppendMode::CHECKSUM_SINGLE_BARRIER;
};

namespace layout {

constexpr char kMagic[8] = {'P', 'M', 'T', 'X', 'R', 'E', 'G', '\0'};
constexpr uint32_t kFormatVersion = 1;

// Region header. Static fields are covered by a checksum written last
// during creation, so a torn creation is detected at open. The dynamic
// line (root, global_version) lives on its own cache line and is excluded.
constexpr uint64_t kHeaderBytes = 512;
constexpr uint64_t kHdrMagic = 0;
constexpr uint64_t kHdrFormatVersion = 8;
constexpr uint64_t kHdrRuntimeKind = 12;
constexpr uint64_t kHdrDescCount = 16;
constexpr uint64_t kHdrLogArenaBytes = 20;
constexpr uint64_t kHdrAllocArenaBytes = 24;
constexpr uint64_t kHdrSbTableCap = 28;
constexpr uint64_t kHdrDescTableOff = 32;
constexpr uint64_t kHdrArenasOff = 40;
constexpr uint64_t kHdrSbTableOff = 48;
constexpr uint64_t kHdrHeapOff = 56;
constexpr uint64_t kHdrHeapSize = 64;
constexpr uint64_t kHdrLogChunkBytes = 72;
constexpr uint64_t kHdrUndoMode = 76;
constexpr uint64_t kHdrStaticChecksum = 80;  // CRC-64 over [0, 80)
constexpr uint64_t kHdrStaticBytes = 80;
// dynamic line
constexpr uint64_t kHdrRoot = 128;
constexpr uint64_t kHdrGlobalVersion = 136;

// Transaction descriptor: one cache line each.
constexpr uint64_t kDescBytes = 64;
constexpr uint64_t kDescState = 0;      // TxnState
constexpr uint64_t kDescVersion = 8;    // persistent version number
constexpr uint64_t kDescLogCursor = 16; // record count in the data log
constexpr uint64_t kDescAllocCursor = 24;  // record count in the alloc log

// Log chunk header, at the start of every chunk.
constexpr uint64_t kChunkHeaderBytes = 16;
constexpr uint64_t kChunkCapacity = 0;  // u32, payload bytes
constexpr uint64_t kChunkUsed = 4;      // u32, payload bytes in use
constexpr uint64_t kChunkNext = 8;      // u64, region offset of next chunk, 0=none

// Undo record framing. Also frames the COW write-set record. The checksum
// covers [0, 40 + length); the pad up to the checksum word is excluded.
constexpr uint64_t kUndoProlog = 0x554E444F5F4C4F47ULL;  // record sentinel
constexpr uint64_t kChunkSeal = 0x4C4F475F5345414CULL;   // end-of-chunk mark
constexpr uint64_t kRecProlog = 0;
constexpr uint64_t kRecVersion = 8;
constexpr uint64_t kRecKind = 16;
constexpr uint64_t kRecTarget = 24;
constexpr uint64_t kRecLength = 32;
constexpr uint64_t kRecPayload = 40;
constexpr uint64_t kUndoKindData = 0;
constexpr uint64_t kUndoKindCommit = 1;
constexpr uint64_t kUndoKindWriteSet = 2;

constexpr uint64_t undo_record_bytes(uint64_t payload_len) {
  return kRecPayload + align_up(payload_len, 8) + 8;
}

// Redo record: no framing; validity is implied by a persisted COMMITTED
// descriptor state, which is only written after the log persists.
constexpr uint64_t kRedoBase = 0;
constexpr uint64_t kRedoOffset = 8;
constexpr uint64_t kRedoLength = 16;
constexpr uint64_t kRedoPrev = 24;  // region offset of previous record, 0=nil
constexpr uint64_t kRedoPayload = 32;

constexpr uint64_t redo_record_bytes(uint64_t payload_len) {
  return kRedoPayload + align_up(payload_len, 8);
}

// Allocation log record (fixed size).
constexpr uint64_t kAllocRecBytes = 16;
constexpr uint64_t kAllocOp = 0;     // u32: 0=ALLOC, 1=FREE
constexpr uint64_t kAllocSb = 4;     // u32 superblock index
constexpr uint64_t kAllocBlock = 8;  // u32 block index
constexpr uint64_t kAllocSize = 12;  // u32 requested bytes

// COW write-set entry (payload of a kUndoKindWriteSet record).
constexpr uint64_t kWsEntryBytes = 32;
constexpr uint64_t kWsWrapper = 0;
constexpr uint64_t kWsNewPayload = 8;
constexpr uint64_t kWsOldBackup = 16;
constexpr uint64_t kWsMeta = 24;  // 0 = object entry, 1 = root entry
constexpr uint64_t kWsMetaObject = 0;
constexpr uint64_t kWsMetaRoot = 1;

// Object headers. Undo/redo objects carry a 32-byte header inline before
// the payload; COW wrappers use a 64-byte header and keep payloads in
// separate raw blocks.
constexpr uint64_t kObjHeaderBytes = 32;
constexpr uint64_t kObjSize = 0;
constexpr uint64_t kObjWriters = 8;
constexpr uint64_t kCowHeaderBytes = 64;
constexpr uint64_t kCowOld = 16;
constexpr uint64_t kCowNew = 24;
constexpr uint64_t kCowOldBackup = 32;
constexpr uint64_t kCowWriterId = 40;
constexpr uint64_t kCowWriterVersion = 48;
constexpr uint64_t kNoWriter = ~uint64_t{0};

// Superblock table entry.
constexpr uint64_t kSbEntryBytes = 32;
constexpr uint64_t kSbBase = 0;        // u64 region offset of superblock area
constexpr uint64_t kSbBlockSize = 8;   // u32; 0 = entry unused
constexpr uint64_t kSbBlockCount = 12;  // u32
constexpr uint64_t kSbFlags = 16;       // u32
constexpr uint32_t kSbFlagWrapperPool = 1;
constexpr uint32_t kSbFlagLarge = 2;

constexpr uint64_t kSuperblockDataBytes = 64 * 1024;
constexpr uint64_t kMinClass = 16;
constexpr uint64_t kMaxClass = 4096;
constexpr int kClassCount = 9;  // 16, 32, ..., 4096

constexpr uint64_t class_size(int cls) { return kMinClass << cls; }

constexpr int class_for(uint64_t bytes) {
  for (int c = 0; c < kClassCount; ++c)
    if (bytes <= class_size(c)) return c;
  return -1;  // large-object path
}

constexpr uint64_t superblock_bitmap_bytes(uint64_t block_count) {
  return align_up((block_count + 7) / 8, kCacheLine);
}

// Region geometry, derived from the header at open or from a RegionConfig
// at creation.
struct Geometry {
  RuntimeKind kind = RuntimeKind::UNDO;
  uint32_t desc_count = 0;
  uint32_t log_arena_bytes = 0;
  uint32_t alloc_arena_bytes = 0;
  uint32_t log_chunk_bytes = 0;
  uint32_t sb_table_cap = 0;
  UndoAppendMode undo_mode = UndoAppendMode::CHECKSUM_SINGLE_BARRIER;
  uint64_t desc_table_off = 0;
  uint64_t arenas_off = 0;
  uint64_t sb_table_off = 0;
  uint64_t heap_off = 0;
  uint64_t heap_size = 0;

  uint64_t desc_off(uint32_t id) const {
    return desc_table_off + uint64_t{id} * kDescBytes;
  }
  uint64_t arena_stride() const {
    return uint64_t{log_arena_bytes} + alloc_arena_bytes;
  }
  uint64_t log_arena_off(uint32_t id) const {
    return arenas_off + uint64_t{id} * arena_stride();
  }
  uint64_t alloc_arena_off(uint32_t id) const {
    return log_arena_off(id) + log_arena_bytes;
  }
  uint64_t sb_entry_off(uint32_t idx) const {
    return sb_table_off + uint64_t{idx} * kSbEntryBytes;
  }
  uint64_t header_bytes_per_object() const {
    return kind == RuntimeKind::COW ? kCowHeaderBytes : kObjHeaderBytes;
  }

  static Geometry plan(uint64_t medium_size, RuntimeKind kind,
                       const RegionConfig& cfg) {
    if (cfg.desc_count == 0 || cfg.log_chunk_bytes < 256 ||
        cfg.log_arena_bytes < cfg.log_chunk_bytes ||
        cfg.log_arena_bytes % cfg.log_chunk_bytes != 0 ||
        cfg.alloc_arena_bytes < cfg.log_chunk_bytes ||
        cfg.alloc_arena_bytes % cfg.log_chunk_bytes != 0)
      throw UsageError("invalid region config");
    Geometry g;
    g.kind = kind;
    g.desc_count = cfg.desc_count;
    g.log_arena_bytes = cfg.log_arena_bytes;
    g.alloc_arena_bytes = cfg.alloc_arena_bytes;
    g.log_chunk_bytes = cfg.log_chunk_bytes;
    g.undo_mode = cfg.undo_mode;
    g.desc_table_off = kHeaderBytes;
    g.arenas_off = align_up(g.desc_table_off + uint64_t{g.desc_count} * kDescBytes,
                            kCacheLine);
    g.sb_table_off =
        align_up(g.arenas_off + uint64_t{g.desc_count} * g.arena_stride(),
                 kCacheLine);
    if (g.sb_table_off >= medium_size)
      throw CapacityError("medium too small for region metadata");
    uint64_t remaining = medium_size - g.sb_table_off;
    // One table entry can govern as little as ~4 KiB (a minimal
    // large-object superblock), so size the table for that worst case.
    uint64_t cap = remaining / 4096 + 32;
    g.sb_table_cap = static_cast<uint32_t>(cap);
    g.heap_off = align_up(g.sb_table_off + cap * kSbEntryBytes, kCacheLine);
    if (g.heap_off + kSuperblockDataBytes / 4 > medium_size)
      throw CapacityError("medium too small for a usable heap");
    g.heap_size = medium_size - g.heap_off;
    return g;
  }
};

}  // namespace layout
}  // namespace pmtx
