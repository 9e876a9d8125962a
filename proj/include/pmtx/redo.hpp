#pragma once

#include <vector>

#include "pmtx/region.hpp"
#include "pmtx/undo.hpp"

// Redo-logging runtime. Writes append the new value to the log and leave
// the object untouched until commit, so abort costs nothing persistent.
//
// Read-after-write handling uses two structures from the log design: a
// 64-bit writers bitmap in each object header (a reader whose bit is
// clear takes an uninstrumented load) and a per-transaction volatile hash
// index to the newest record per object, with records back-linked per
// object so a lookup never scans unrelated log records. Transactions
// without a bitmap slot (descriptor id >= 64) skip the bitmap and consult
// their index on every read.
//
// Commit: persist log, persist COMMITTED, apply records in place and
// persist, persist IDLE — four barriers regardless of write count.

namespace pmtx {

namespace redo_detail {

struct Record {
  uint64_t base = 0;
  uint64_t offset = 0;
  uint64_t length = 0;
  uint64_t prev = 0;
};

inline Record parse(PersistentMedium& m, uint64_t off) {
  Record rec;
  rec.base = m.peek_u64(off + layout::kRedoBase);
  rec.offset = m.peek_u64(off + layout::kRedoOffset);
  rec.length = m.peek_u64(off + layout::kRedoLength);
  rec.prev = m.peek_u64(off + layout::kRedoPrev);
  return rec;
}

inline uint64_t apply_target(uint64_t base, uint64_t offset) {
  return base == layout::kHdrRoot ? layout::kHdrRoot + offset
                                  : base + layout::kObjHeaderBytes + offset;
}

}  // namespace redo_detail

inline void RedoRt::write(Region& r, detail::TxnCtx& t, uint64_t base,
                          uint64_t offset, std::span<const uint8_t> data) {
  auto& m = r.medium();
  if (base != layout::kHdrRoot && !t.slotless) {
    uint64_t bit = uint64_t{1} << t.id;
    if (!(m.peek_u64(base + layout::kObjWriters) & bit)) {
      m.fetch_or64(base + layout::kObjWriters, bit);
      t.touched_objects.push_back(base);
    }
  }
  uint64_t max_payload =
      (t.data_log.max_record_bytes() - layout::kRedoPayload) / 8 * 8;
  uint64_t pos = 0;
  while (pos < data.size()) {
    uint64_t piece = std::min<uint64_t>(data.size() - pos, max_payload);
    uint64_t total = layout::redo_record_bytes(piece);
    std::vector<uint8_t> rec(total, 0);
    put_u64(rec, layout::kRedoBase, base);
    put_u64(rec, layout::kRedoOffset, offset + pos);
    put_u64(rec, layout::kRedoLength, piece);
    auto it = t.raw_index.find(base);
    put_u64(rec, layout::kRedoPrev, it == t.raw_index.end() ? 0 : it->second);
    std::copy(data.begin() + pos, data.begin() + pos + piece,
              rec.begin() + layout::kRedoPayload);
    auto ap = t.data_log.append(rec);
    t.raw_index[base] = ap.record_off;
    ++t.data_records;
    r.set_desc_field(t.id, layout::kDescLogCursor, t.data_records);
    // Proactive asynchronous writeback; the commit barrier completes it.
    r.wb(ap.wb);
    pos += piece;
  }
}

inline std::vector<uint8_t> RedoRt::read(Region& r, detail::TxnCtx& t,
                                         uint64_t base, uint64_t offset,
                                         uint64_t len) {
  auto& m = r.medium();
  uint64_t payload_base = base == layout::kHdrRoot
                              ? base
                              : base + layout::kObjHeaderBytes;
  if (base != layout::kHdrRoot && !t.slotless) {
    uint64_t bit = uint64_t{1} << t.id;
    if (!(m.peek_u64(base + layout::kObjWriters) & bit))
      return m.load(payload_base + offset, len);
  }
  auto it = t.raw_index.find(base);
  if (it == t.raw_index.end()) return m.load(payload_base + offset, len);

  // Newest-first overlay over this transaction's record stack.
  std::vector<uint8_t> out(len, 0);
  std::vector<uint8_t> have(len, 0);
  uint64_t missing = len;
  uint64_t rec_off = it->second;
  while (rec_off != 0 && missing > 0) {
    auto rec = redo_detail::parse(m, rec_off);
    ++t.traversal_records;
    uint64_t lo = std::max(rec.offset, offset);
    uint64_t hi = std::min(rec.offset + rec.length, offset + len);
    if (lo < hi) {
      auto payload = m.peek(rec_off + layout::kRedoPayload + (lo - rec.offset),
                            hi - lo);
      for (uint64_t i = 0; i < hi - lo; ++i) {
        uint64_t at = lo - offset + i;
        if (!have[at]) {
          out[at] = payload[i];
          have[at] = 1;
          --missing;
        }
      }
    }
    rec_off = rec.prev;
  }
  if (missing > 0) {
    auto bytes = m.load(payload_base + offset, len);
    for (uint64_t i = 0; i < len; ++i)
      if (!have[i]) out[i] = bytes[i];
  }
  return out;
}

inline void RedoRt::commit(Region& r, detail::TxnCtx& t) {
  auto& m = r.medium();
  auto [doff, dlen] = r.desc_range(t.id);
  bool has_work = t.data_records > 0 || t.alloc_records > 0;
  if (!has_work) {
    r.set_desc_field(t.id, layout::kDescState,
                     static_cast<uint64_t>(TxnState::COMMITTED));
    r.set_desc_field(t.id, layout::kDescState,
                     static_cast<uint64_t>(TxnState::IDLE));
    return;
  }
  // (1) persist the redo log (and the allocation log).
  r.wb(t.data_log.used_extent());
  r.wb(t.alloc_log.used_extent());
  r.wb(t.init_ranges);
  r.wb(t.new_sb_entries);
  r.wb(doff, dlen);
  r.barrier();
  // (2) logical commit.
  t.window.store_op = m.op_count();
  r.set_desc_field(t.id, layout::kDescState,
                   static_cast<uint64_t>(TxnState::COMMITTED));
  r.wb(doff, dlen);
  r.barrier();
  t.window.barrier_op = m.op_count();
  // (3) apply the log in append order (last write wins), fold in the
  // allocation effects, persist the targets.
  UsedWalker walker(t.data_log);
  for (uint64_t k = 0; k < t.data_records; ++k) {
    uint64_t off = walker.next(layout::kRedoPayload);
    if (!off) break;
    auto rec = redo_detail::parse(m, off);
    uint64_t total = layout::redo_record_bytes(rec.length);
    walker.advance(total);
    uint64_t target = redo_detail::apply_target(rec.base, rec.offset);
    m.store(target, m.peek(off + layout::kRedoPayload, rec.length));
    r.wb(target, rec.length);
  }
  std::vector<ByteRange> flips;
  for (auto& res : t.reserved) {
    bitmap_flip(m, r.heap_.entry(res.sb), res.block, true, &flips);
    r.heap_.note_committed_alloc(res.sb, res.block);
  }
  for (auto& fr : t.freed)
    bitmap_flip(m, r.heap_.entry(fr.sb), fr.block, false, &flips);
  r.wb(flips);
  r.barrier();
  // (4) settle.
  r.set_desc_field(t.id, layout::kDescState,
                   static_cast<uint64_t>(TxnState::IDLE));
  r.wb(doff, dlen);
  r.barrier();
  // Ownership marks are volatile-equivalent: drop them without persists.
  if (!t.slotless) {
    uint64_t bit = uint64_t{1} << t.id;
    for (uint64_t base : t.touched_objects)
      m.fetch_and64(base + layout::kObjWriters, ~bit);
  }
  r.wb(t.data_log.truncate());
  r.wb(t.alloc_log.truncate());
  r.set_desc_field(t.id, layout::kDescLogCursor, 0);
  r.set_desc_field(t.id, layout::kDescAllocCursor, 0);
  for (auto& fr : t.freed) r.heap_.release_freed(fr.sb, fr.block);
}

inline void RedoRt::abort(Region& r, detail::TxnCtx& t) {
  auto& m = r.medium();
  // Nothing was written in place: discarding the log is the whole abort.
  r.set_desc_field(t.id, layout::kDescState,
                   static_cast<uint64_t>(TxnState::ABORTED));
  if (!t.slotless) {
    uint64_t bit = uint64_t{1} << t.id;
    for (uint64_t base : t.touched_objects)
      m.fetch_and64(base + layout::kObjWriters, ~bit);
  }
  for (auto& fr : t.freed) r.heap_.unstage_free(fr.sb, fr.block, fr.kind);
  for (auto& res : t.reserved) r.heap_.unreserve(res.sb, res.block);
  r.wb(t.data_log.truncate());
  r.wb(t.alloc_log.truncate());
  r.set_desc_field(t.id, layout::kDescLogCursor, 0);
  r.set_desc_field(t.id, layout::kDescAllocCursor, 0);
  r.set_desc_field(t.id, layout::kDescState,
                   static_cast<uint64_t>(TxnState::IDLE));
}

inline void RedoRt::recover_effects(Region& r, uint32_t desc) {
  auto& m = r.medium();
  const auto& geo = r.geometry();
  if (r.desc_field(desc, layout::kDescState) !=
      static_cast<uint64_t>(TxnState::COMMITTED))
    return;  // log contents are not vouched for; discard
  // COMMITTED persisted only after the log did: replay is safe and
  // idempotent.
  ChunkedLog log(&m, geo.log_arena_off(desc), geo.log_arena_bytes,
                 geo.log_chunk_bytes);
  uint64_t count = r.desc_field(desc, layout::kDescLogCursor);
  UsedWalker walker(log);
  for (uint64_t k = 0; k < count; ++k) {
    uint64_t off = walker.next(layout::kRedoPayload);
    if (!off) break;
    auto rec = redo_detail::parse(m, off);
    walker.advance(layout::redo_record_bytes(rec.length));
    uint64_t target = redo_detail::apply_target(rec.base, rec.offset);
    auto payload = m.peek(off + layout::kRedoPayload, rec.length);
    if (m.peek(target, rec.length) != payload) {
      m.store(target, payload);
      r.wb(target, rec.length);
    }
  }
  std::vector<ByteRange> flips;
  ChunkedLog alog(&m, geo.alloc_arena_off(desc), geo.alloc_arena_bytes,
                  geo.log_chunk_bytes);
  undo_detail::replay_alloc_log(
      r, desc, alog, r.desc_field(desc, layout::kDescAllocCursor), &flips);
  r.wb(flips);
}

inline void RedoRt::recover_cleanup(Region& r, uint32_t desc) {
  UndoRt::recover_cleanup(r, desc);  // same shape: settle and scrub
}

}  // namespace pmtx
