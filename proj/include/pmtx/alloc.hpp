#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <thread>
#include <tuple>
#include <utility>
#include <vector>

#include "pmtx/chunked_log.hpp"
#include "pmtx/layout.hpp"
#include "pmtx/medium.hpp"

// Persistent heap with split metadata: a persistent per-superblock
// occupancy bitmap (1 bit per block) and volatile free/used bookkeeping
// rebuilt from the bitmaps at region open. Size classes are powers of two
// from 16 to 4096 bytes; larger requests get a dedicated superblock.
//
// Nothing here issues a persist barrier. Transactions stage ALLOC/FREE
// intents in their allocation logs and apply them (CAS bit flips plus
// writebacks) inside their own commit barrier windows.

namespace pmtx {

enum class AllocOp : uint32_t { ALLOC = 0, FREE = 1 };

struct AllocRecord {
  AllocOp op;
  uint32_t sb;
  uint32_t block;
  uint32_t size;

  std::array<uint8_t, layout::kAllocRecBytes> encode() const {
    std::array<uint8_t, layout::kAllocRecBytes> buf{};
    put_u32(buf, layout::kAllocOp, static_cast<uint32_t>(op));
    put_u32(buf, layout::kAllocSb, sb);
    put_u32(buf, layout::kAllocBlock, block);
    put_u32(buf, layout::kAllocSize, size);
    return buf;
  }

  static AllocRecord decode(std::span<const uint8_t> buf) {
    AllocRecord r;
    r.op = static_cast<AllocOp>(get_u32(buf, layout::kAllocOp));
    r.sb = get_u32(buf, layout::kAllocSb);
    r.block = get_u32(buf, layout::kAllocBlock);
    r.size = get_u32(buf, layout::kAllocSize);
    return r;
  }
};

// Volatile block states tracked per superblock.
enum class BlockState : uint8_t {
  FREE = 0,
  ALLOCATED = 1,
  RESERVED = 2,        // allocated by an in-flight transaction
  PENDING_FREE = 3,    // freed by an in-flight transaction
  RESERVED_FREED = 4,  // allocated and freed by the same transaction
};

struct SuperblockEntry {
  uint64_t base = 0;
  uint32_t block_size = 0;
  uint32_t block_count = 0;
  uint32_t flags = 0;

  bool valid() const { return block_size != 0; }
  uint64_t bitmap_off() const { return base; }
  uint64_t bitmap_bytes() const {
    return layout::superblock_bitmap_bytes(block_count);
  }
  uint64_t blocks_off() const { return base + bitmap_bytes(); }
  uint64_t block_off(uint32_t idx) const {
    return blocks_off() + uint64_t{idx} * block_size;
  }
  uint64_t area_bytes() const {
    return bitmap_bytes() + uint64_t{block_count} * block_size;
  }
  uint64_t end() const { return base + area_bytes(); }
};

inline SuperblockEntry read_sb_entry(const PersistentMedium& m,
                                     const layout::Geometry& geo,
                                     uint32_t idx) {
  auto raw = m.peek(geo.sb_entry_off(idx), layout::kSbEntryBytes);
  SuperblockEntry e;
  e.base = get_u64(raw, layout::kSbBase);
  e.block_size = get_u32(raw, layout::kSbBlockSize);
  e.block_count = get_u32(raw, layout::kSbBlockCount);
  e.flags = get_u32(raw, layout::kSbFlags);
  return e;
}

// Idempotent persistent bit flip; returns true when the bit changed, and
// appends the touched bitmap word's range to `wb`.
inline bool bitmap_flip(PersistentMedium& m, const SuperblockEntry& e,
                        uint32_t block, bool set,
                        std::vector<ByteRange>* wb) {
  uint64_t word_addr = e.bitmap_off() + (block / 64) * 8;
  uint64_t bit = uint64_t{1} << (block % 64);
  while (true) {
    uint64_t cur = m.peek_u64(word_addr);
    bool is_set = (cur & bit) != 0;
    if (is_set == set) return false;
    uint64_t want = set ? (cur | bit) : (cur & ~bit);
    if (m.cas64(word_addr, cur, want)) {
      if (wb) wb->emplace_back(word_addr, 8);
      return true;
    }
  }
}

inline bool bitmap_get(const PersistentMedium& m, const SuperblockEntry& e,
                       uint32_t block) {
  uint64_t word = m.peek_u64(e.bitmap_off() + (block / 64) * 8);
  return (word >> (block % 64)) & 1;
}

class Heap {
 public:
  Heap(PersistentMedium* medium, const layout::Geometry* geo)
      : medium_(medium), geo_(geo) {}

  struct Reservation {
    uint32_t sb = 0;
    uint32_t block = 0;
    uint64_t offset = 0;           // region offset of the block
    uint64_t new_entry_off = 0;    // nonzero: table entry created for this
    uint64_t new_entry_len = 0;    // reservation; persist with the commit
  };

  // Rebuilds volatile metadata from the persistent bitmaps. Run after
  // transaction recovery so committed allocation logs are reflected.
  void rebuild() {
    std::lock_guard lk(heap_mu_);
    sbs_.clear();
    heap_break_ = geo_->heap_off;
    for (uint32_t i = 0; i < geo_->sb_table_cap; ++i) {
      SuperblockEntry e = read_sb_entry(*medium_, *geo_, i);
      if (!e.valid()) {
        sbs_.emplace_back();  // keep table indices aligned
        continue;
      }
      sbs_.emplace_back(std::make_unique<Sb>());
      Sb& sb = *sbs_.back();
      sb.entry = e;
      sb.state.assign(e.block_count, BlockState::FREE);
      for (uint32_t b = 0; b < e.block_count; ++b) {
        if (bitmap_get(*medium_, e, b)) {
          sb.state[b] = BlockState::ALLOCATED;
          ++sb.used;
        } else {
          sb.free_list.push_back(b);
        }
      }
      heap_break_ = std::max(heap_break_, e.end());
    }
  }

  // Reserves one block able to hold `phys_bytes`. No persistent effect;
  // the caller logs an ALLOC intent and applies it at commit.
  Reservation reserve(uint64_t phys_bytes, uint32_t flags) {
    int cls = layout::class_for(phys_bytes);
    std::lock_guard lk(heap_mu_);
    if (cls < 0) return reserve_large(phys_bytes, flags);
    uint64_t want = layout::class_size(cls);
    auto tid = std::this_thread::get_id();
    // Prefer a superblock owned by this thread, then a shared one, then
    // anything with space before carving new heap.
    for (int pass = 0; pass < 3; ++pass) {
      for (uint32_t i = 0; i < sbs_.size(); ++i) {
        Sb* sb = sbs_[i].get();
        if (!sb || sb->entry.block_size != want || sb->entry.flags != flags ||
            sb->free_list.empty())
          continue;
        bool owned_by_me = sb->owner && *sb->owner == tid;
        bool shared = !sb->owner;
        if (pass == 0 && !owned_by_me) continue;
        if (pass == 1 && !shared) continue;
        return take_block(i, *sb);
      }
    }
    return reserve_from_new_sb(want, flags,
                               static_cast<uint32_t>(
                                   layout::kSuperblockDataBytes / want));
  }

  // Returns a reserved block on abort.
  void unreserve(uint32_t sb_idx, uint32_t block) {
    std::lock_guard lk(heap_mu_);
    Sb& sb = *sbs_.at(sb_idx);
    std::lock_guard slk(sb.lock);
    sb.state.at(block) = BlockState::FREE;
    sb.free_list.push_back(block);
    --sb.used;
  }

  // Marks an allocated (or same-transaction reserved) block as being
  // freed by a live transaction. Returns false on double free or on a
  // block this heap does not consider live.
  enum class FreeKind { OF_ALLOCATED, OF_OWN_RESERVATION, INVALID };
  FreeKind stage_free(uint32_t sb_idx, uint32_t block) {
    std::lock_guard lk(heap_mu_);
    if (sb_idx >= sbs_.size() || !sbs_[sb_idx]) return FreeKind::INVALID;
    Sb& sb = *sbs_[sb_idx];
    std::lock_guard slk(sb.lock);
    if (block >= sb.state.size()) return FreeKind::INVALID;
    switch (sb.state[block]) {
      case BlockState::ALLOCATED:
        sb.state[block] = BlockState::PENDING_FREE;
        return FreeKind::OF_ALLOCATED;
      case BlockState::RESERVED:
        sb.state[block] = BlockState::RESERVED_FREED;
        return FreeKind::OF_OWN_RESERVATION;
      default:
        return FreeKind::INVALID;
    }
  }

  void unstage_free(uint32_t sb_idx, uint32_t block, FreeKind kind) {
    std::lock_guard lk(heap_mu_);
    Sb& sb = *sbs_.at(sb_idx);
    std::lock_guard slk(sb.lock);
    sb.state.at(block) = kind == FreeKind::OF_ALLOCATED
                             ? BlockState::ALLOCATED
                             : BlockState::RESERVED;
  }

  // Transition volatile state when a commit applies its allocation log.
  void note_committed_alloc(uint32_t sb_idx, uint32_t block) {
    std::lock_guard lk(heap_mu_);
    Sb& sb = *sbs_.at(sb_idx);
    std::lock_guard slk(sb.lock);
    if (sb.state.at(block) == BlockState::RESERVED)
      sb.state[block] = BlockState::ALLOCATED;
  }

  // Returns freed blocks to the free lists once the freeing transaction's
  // cleanup is durably complete.
  void release_freed(uint32_t sb_idx, uint32_t block) {
    std::lock_guard lk(heap_mu_);
    Sb& sb = *sbs_.at(sb_idx);
    std::lock_guard slk(sb.lock);
    sb.state.at(block) = BlockState::FREE;
    sb.free_list.push_back(block);
    --sb.used;
  }

  // Ownership plumbing: superblocks still mostly full when their owner's
  // transaction goes idle become shared; a mostly-empty shared superblock
  // is reclaimed by the next thread that allocates from it.
  void on_txn_idle() {
    std::lock_guard lk(heap_mu_);
    auto tid = std::this_thread::get_id();
    for (auto& sbp : sbs_) {
      if (!sbp || !sbp->owner || *sbp->owner != tid) continue;
      if (sbp->used * 2 >= sbp->entry.block_count) sbp->owner.reset();
    }
  }

  SuperblockEntry entry(uint32_t sb_idx) const {
    std::lock_guard lk(heap_mu_);
    if (sb_idx >= sbs_.size() || !sbs_[sb_idx]) return SuperblockEntry{};
    return sbs_[sb_idx]->entry;
  }

  // Locates the superblock and block index for a block-start offset.
  std::optional<std::pair<uint32_t, uint32_t>> locate(uint64_t offset) const {
    std::lock_guard lk(heap_mu_);
    for (uint32_t i = 0; i < sbs_.size(); ++i) {
      const Sb* sb = sbs_[i].get();
      if (!sb) continue;
      const SuperblockEntry& e = sb->entry;
      if (offset < e.blocks_off() || offset >= e.end()) continue;
      uint64_t rel = offset - e.blocks_off();
      if (rel % e.block_size != 0) return std::nullopt;
      return std::make_pair(i, static_cast<uint32_t>(rel / e.block_size));
    }
    return std::nullopt;
  }

  bool block_allocated(uint64_t offset) const {
    auto loc = locate(offset);
    if (!loc) return false;
    std::lock_guard lk(heap_mu_);
    const Sb& sb = *sbs_[loc->first];
    BlockState s = sb.state[loc->second];
    return s == BlockState::ALLOCATED || s == BlockState::RESERVED;
  }

  // All (sb, block, offset) triples whose persistent bit is set.
  std::vector<std::tuple<uint32_t, uint32_t, uint64_t>> allocated_bits()
      const {
    std::vector<std::tuple<uint32_t, uint32_t, uint64_t>> out;
    for (uint32_t i = 0; i < geo_->sb_table_cap; ++i) {
      SuperblockEntry e = read_sb_entry(*medium_, *geo_, i);
      if (!e.valid()) continue;
      for (uint32_t b = 0; b < e.block_count; ++b)
        if (bitmap_get(*medium_, e, b)) out.emplace_back(i, b, e.block_off(b));
    }
    return out;
  }

 private:
  struct Sb {
    SuperblockEntry entry;
    std::vector<BlockState> state;
    std::vector<uint32_t> free_list;
    uint64_t used = 0;
    std::optional<std::thread::id> owner;
    mutable std::mutex lock;
  };

  Reservation take_block(uint32_t idx, Sb& sb) {
    std::lock_guard slk(sb.lock);
    auto tid = std::this_thread::get_id();
    if (!sb.owner && sb.free_list.size() * 2 >= sb.entry.block_count)
      sb.owner = tid;
    uint32_t block = sb.free_list.back();
    sb.free_list.pop_back();
    sb.state[block] = BlockState::RESERVED;
    ++sb.used;
    Reservation r;
    r.sb = idx;
    r.block = block;
    r.offset = sb.entry.block_off(block);
    return r;
  }

  Reservation reserve_large(uint64_t phys_bytes, uint32_t flags) {
    uint64_t block = align_up(phys_bytes, kCacheLine);
    return reserve_from_new_sb(block, flags | layout::kSbFlagLarge, 1);
  }

  // heap_mu_ held.
  Reservation reserve_from_new_sb(uint64_t block_size, uint32_t flags,
                                  uint32_t block_count) {
    SuperblockEntry e;
    e.base = align_up(heap_break_, kCacheLine);
    e.block_size = static_cast<uint32_t>(block_size);
    e.block_count = block_count;
    e.flags = flags;
    if (e.end() > geo_->heap_off + geo_->heap_size)
      throw CapacityError("persistent heap exhausted");
    uint32_t idx = 0;
    while (idx < sbs_.size() && sbs_[idx]) ++idx;
    if (idx >= geo_->sb_table_cap)
      throw CapacityError("superblock table exhausted");
    // Stage the table entry; it persists with the owning transaction's
    // first commit barrier. The bitmap area is already all-zero.
    std::vector<uint8_t> raw(layout::kSbEntryBytes, 0);
    put_u64(raw, layout::kSbBase, e.base);
    put_u32(raw, layout::kSbBlockSize, e.block_size);
    put_u32(raw, layout::kSbBlockCount, e.block_count);
    put_u32(raw, layout::kSbFlags, e.flags);
    medium_->store(geo_->sb_entry_off(idx), raw);

    if (idx == sbs_.size())
      sbs_.emplace_back(std::make_unique<Sb>());
    else
      sbs_[idx] = std::make_unique<Sb>();
    Sb& sb = *sbs_[idx];
    sb.entry = e;
    sb.state.assign(e.block_count, BlockState::FREE);
    sb.free_list.reserve(e.block_count);
    for (uint32_t b = e.block_count; b-- > 0;) sb.free_list.push_back(b);
    sb.owner = std::this_thread::get_id();
    heap_break_ = e.end();

    Reservation r = take_block(idx, sb);
    r.new_entry_off = geo_->sb_entry_off(idx);
    r.new_entry_len = layout::kSbEntryBytes;
    return r;
  }

  PersistentMedium* medium_;
  const layout::Geometry* geo_;
  std::vector<std::unique_ptr<Sb>> sbs_;
  uint64_t heap_break_ = 0;
  mutable std::mutex heap_mu_;
};

}  // namespace pmtx
