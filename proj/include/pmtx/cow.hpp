#pragma once

#include <vector>

#include "pmtx/region.hpp"
#include "pmtx/undo.hpp"

// Copy-on-write runtime. Each object is a wrapper block pointing at its
// payload; a read-write open clones the payload and parks the clone in
// the wrapper's `new` field. `old_backup` keeps a reference to the
// superseded payload so a crash inside post-commit cleanup cannot leak
// it: the persisted write set names every (wrapper, new, old_backup)
// triple and recovery re-runs the cleanup idempotently.
//
// Commit: one barrier persists new payloads, wrapper updates, write set,
// and allocation log together; COMMITTED takes the second; cleanup
// (retarget old, drop backup, flip bitmap bits) the third; IDLE the
// fourth. Abort needs only the two cleanup barriers.

namespace pmtx {

namespace cow_detail {

inline bool writer_is_live(Region& r, uint64_t writer_id,
                           uint64_t writer_version) {
  if (writer_id >= r.geometry().desc_count) return false;
  uint64_t v = r.desc_field(static_cast<uint32_t>(writer_id),
                            layout::kDescVersion);
  TxnState st = static_cast<TxnState>(
      r.desc_field(static_cast<uint32_t>(writer_id), layout::kDescState));
  return v == writer_version &&
         (st == TxnState::RUNNING || st == TxnState::COMMITTED);
}

inline std::vector<uint8_t> encode_write_set(const detail::TxnCtx& t) {
  uint64_t entries = t.write_set.size() + (t.pending_root ? 1 : 0);
  std::vector<uint8_t> payload(entries * layout::kWsEntryBytes, 0);
  uint64_t at = 0;
  for (const auto& ws : t.write_set) {
    put_u64(payload, at + layout::kWsWrapper, ws.wrapper);
    put_u64(payload, at + layout::kWsNewPayload, ws.new_payload);
    put_u64(payload, at + layout::kWsOldBackup, ws.old_backup);
    put_u64(payload, at + layout::kWsMeta, layout::kWsMetaObject);
    at += layout::kWsEntryBytes;
  }
  if (t.pending_root) {
    put_u64(payload, at + layout::kWsNewPayload, *t.pending_root);
    put_u64(payload, at + layout::kWsMeta, layout::kWsMetaRoot);
  }
  return payload;
}

// Raw superblock lookup by block offset, usable during recovery before
// the volatile heap exists.
inline bool locate_raw(PersistentMedium& m, const layout::Geometry& geo,
                       uint64_t offset, SuperblockEntry* e_out,
                       uint32_t* block_out) {
  for (uint32_t i = 0; i < geo.sb_table_cap; ++i) {
    SuperblockEntry e = read_sb_entry(m, geo, i);
    if (!e.valid()) continue;
    if (offset < e.blocks_off() || offset >= e.end()) continue;
    uint64_t rel = offset - e.blocks_off();
    if (rel % e.block_size != 0) return false;
    *e_out = e;
    *block_out = static_cast<uint32_t>(rel / e.block_size);
    return true;
  }
  return false;
}

}  // namespace cow_detail

inline uint64_t CowRt::open(Region& r, detail::TxnCtx& t, ObjectRef ref,
                            OpenMode mode, const CopyCtor& ctor) {
  auto& m = r.medium();
  uint64_t w = ref.offset;
  // The wrapper is a separate block from the payload; fetching it is the
  // indirection cost of this runtime.
  auto wrap = m.load(w, layout::kCowHeaderBytes);
  uint64_t size = get_u64(wrap, layout::kObjSize);
  uint64_t old_payload = get_u64(wrap, layout::kCowOld);
  uint64_t new_payload = get_u64(wrap, layout::kCowNew);
  uint64_t writer_id = get_u64(wrap, layout::kCowWriterId);
  uint64_t writer_version = get_u64(wrap, layout::kCowWriterVersion);
  bool mine = writer_id == t.id && writer_version == t.version;

  if (mode == OpenMode::READ)
    return mine && new_payload ? new_payload : old_payload;

  if (t.freed_refs.count(w))
    throw UsageError("open of an object freed earlier in this transaction");
  if (mine && new_payload) return new_payload;
  // Objects created by this transaction are written in place; nobody else
  // can observe them before commit.
  if (t.my_reserved_offsets.count(w)) return old_payload;
  if (writer_id != layout::kNoWriter &&
      cow_detail::writer_is_live(r, writer_id, writer_version))
    throw BusyError("object is open for write by another transaction");

  auto res = r.reserve_logged(t, size, 0, size);
  if (ctor) {
    ctor(r, old_payload, res.offset, size);
  } else {
    auto bytes = m.load(old_payload, size);
    m.store(res.offset, bytes);
  }
  t.cow_dirty.emplace_back(res.offset, size);
  m.store_u64(w + layout::kCowNew, res.offset);
  m.store_u64(w + layout::kCowOldBackup, old_payload);
  m.store_u64(w + layout::kCowWriterId, t.id);
  m.store_u64(w + layout::kCowWriterVersion, t.version);
  t.write_set.push_back({w, res.offset, old_payload});
  t.open_writes[w] = res.offset;
  return res.offset;
}

inline std::vector<uint8_t> CowRt::read(Region& r, detail::TxnCtx& t,
                                        ObjectRef ref, uint64_t offset,
                                        uint64_t len) {
  auto& m = r.medium();
  uint64_t w = ref.offset;
  auto wrap = m.load(w, layout::kCowHeaderBytes);
  uint64_t payload = get_u64(wrap, layout::kCowOld);
  if (get_u64(wrap, layout::kCowWriterId) == t.id &&
      get_u64(wrap, layout::kCowWriterVersion) == t.version &&
      get_u64(wrap, layout::kCowNew) != 0)
    payload = get_u64(wrap, layout::kCowNew);
  return m.load(payload + offset, len);
}

inline void CowRt::write(Region& r, detail::TxnCtx& t, ObjectRef ref,
                         uint64_t offset, std::span<const uint8_t> data) {
  auto& m = r.medium();
  uint64_t w = ref.offset;
  auto it = t.open_writes.find(w);
  uint64_t payload;
  if (it != t.open_writes.end()) {
    payload = it->second;
  } else if (t.my_reserved_offsets.count(w)) {
    payload = m.peek_u64(w + layout::kCowOld);
  } else {
    throw UsageError("COW write requires a read-write open");
  }
  m.store(payload + offset, data);
  t.cow_dirty.emplace_back(payload + offset, data.size());
}

inline void CowRt::commit(Region& r, detail::TxnCtx& t) {
  auto& m = r.medium();
  auto [doff, dlen] = r.desc_range(t.id);
  bool has_work = !t.write_set.empty() || t.pending_root.has_value() ||
                  t.alloc_records > 0;
  if (!has_work) {
    r.set_desc_field(t.id, layout::kDescState,
                     static_cast<uint64_t>(TxnState::COMMITTED));
    r.set_desc_field(t.id, layout::kDescState,
                     static_cast<uint64_t>(TxnState::IDLE));
    return;
  }
  // Barrier 1: write set, payload copies, wrapper updates, allocation
  // log, fresh-object initialization — one persist for all of it.
  auto ws_payload = cow_detail::encode_write_set(t);
  auto rec = undo_detail::build_record(t.version, layout::kUndoKindWriteSet,
                                       0, ws_payload,
                                       UndoAppendMode::CHECKSUM_SINGLE_BARRIER);
  auto ap = t.data_log.append(rec);
  ++t.data_records;
  r.set_desc_field(t.id, layout::kDescLogCursor, t.data_records);
  r.wb(ap.wb);
  r.wb(t.cow_dirty);
  for (const auto& ws : t.write_set) r.wb(ws.wrapper, layout::kCowHeaderBytes);
  r.wb(t.init_ranges);
  r.wb(t.new_sb_entries);
  r.wb(t.alloc_log.used_extent());
  r.wb(doff, dlen);
  r.barrier();
  // Barrier 2: logical commit.
  t.window.store_op = m.op_count();
  r.set_desc_field(t.id, layout::kDescState,
                   static_cast<uint64_t>(TxnState::COMMITTED));
  r.wb(doff, dlen);
  r.barrier();
  t.window.barrier_op = m.op_count();
  // Cleanup: retarget wrappers, release superseded payloads through
  // old_backup, fold in the allocation log. Barrier 3 persists it all.
  std::vector<ByteRange> flips;
  for (const auto& ws : t.write_set) {
    m.store_u64(ws.wrapper + layout::kCowOld, ws.new_payload);
    m.store_u64(ws.wrapper + layout::kCowNew, 0);
    m.store_u64(ws.wrapper + layout::kCowOldBackup, 0);
    r.wb(ws.wrapper, layout::kCowHeaderBytes);
    SuperblockEntry e;
    uint32_t block;
    if (cow_detail::locate_raw(m, r.geometry(), ws.old_backup, &e, &block)) {
      auto loc = r.heap_.locate(ws.old_backup);
      if (loc) {
        auto kind = r.heap_.stage_free(loc->first, loc->second);
        if (kind != Heap::FreeKind::INVALID)
          t.freed.push_back({loc->first, loc->second, ws.old_backup, kind});
      }
      bitmap_flip(m, e, block, false, &flips);
    }
  }
  if (t.pending_root) {
    m.store_u64(layout::kHdrRoot, *t.pending_root);
    r.wb(layout::kHdrRoot, 16);
  }
  for (auto& res : t.reserved) {
    bitmap_flip(m, r.heap_.entry(res.sb), res.block, true, &flips);
    r.heap_.note_committed_alloc(res.sb, res.block);
  }
  for (auto& fr : t.freed) {
    if (fr.kind == Heap::FreeKind::OF_ALLOCATED ||
        fr.kind == Heap::FreeKind::OF_OWN_RESERVATION) {
      bitmap_flip(m, r.heap_.entry(fr.sb), fr.block, false, &flips);
    }
  }
  r.wb(flips);
  r.barrier();
  // Barrier 4: back to IDLE, durably.
  r.set_desc_field(t.id, layout::kDescState,
                   static_cast<uint64_t>(TxnState::IDLE));
  r.wb(doff, dlen);
  r.barrier();
  // Writer identities are volatile-equivalent; clear them without
  // persisting (the next transaction's barriers will carry them).
  for (const auto& ws : t.write_set) {
    m.store_u64(ws.wrapper + layout::kCowWriterId, layout::kNoWriter);
    m.store_u64(ws.wrapper + layout::kCowWriterVersion, 0);
  }
  r.wb(t.data_log.truncate());
  r.wb(t.alloc_log.truncate());
  r.set_desc_field(t.id, layout::kDescLogCursor, 0);
  r.set_desc_field(t.id, layout::kDescAllocCursor, 0);
  for (auto& fr : t.freed) r.heap_.release_freed(fr.sb, fr.block);
}

inline void CowRt::abort(Region& r, detail::TxnCtx& t) {
  auto& m = r.medium();
  auto [doff, dlen] = r.desc_range(t.id);
  r.set_desc_field(t.id, layout::kDescState,
                   static_cast<uint64_t>(TxnState::ABORTED));
  if (!t.write_set.empty()) {
    // Only the two cleanup barriers are needed for rollback.
    for (const auto& ws : t.write_set) {
      m.store_u64(ws.wrapper + layout::kCowNew, 0);
      m.store_u64(ws.wrapper + layout::kCowOldBackup, 0);
      m.store_u64(ws.wrapper + layout::kCowWriterId, layout::kNoWriter);
      m.store_u64(ws.wrapper + layout::kCowWriterVersion, 0);
      r.wb(ws.wrapper, layout::kCowHeaderBytes);
    }
    r.barrier();
    r.set_desc_field(t.id, layout::kDescState,
                     static_cast<uint64_t>(TxnState::IDLE));
    r.wb(doff, dlen);
    r.barrier();
  } else {
    r.set_desc_field(t.id, layout::kDescState,
                     static_cast<uint64_t>(TxnState::IDLE));
  }
  for (auto& fr : t.freed) r.heap_.unstage_free(fr.sb, fr.block, fr.kind);
  for (auto& res : t.reserved) r.heap_.unreserve(res.sb, res.block);
  r.wb(t.data_log.truncate());
  r.wb(t.alloc_log.truncate());
  r.set_desc_field(t.id, layout::kDescLogCursor, 0);
  r.set_desc_field(t.id, layout::kDescAllocCursor, 0);
}

inline void CowRt::recover_effects(Region& r, uint32_t desc) {
  auto& m = r.medium();
  const auto& geo = r.geometry();
  if (r.desc_field(desc, layout::kDescState) !=
      static_cast<uint64_t>(TxnState::COMMITTED))
    return;  // pre-commit-point wrappers are quiesced by the mark sweep
  // COMMITTED persisted, so barrier 1 completed and the write-set record
  // validates: redo the cleanup idempotently.
  ChunkedLog log(&m, geo.log_arena_off(desc), geo.log_arena_bytes,
                 geo.log_chunk_bytes);
  undo_detail::Walker walker(r, log,
                             r.desc_field(desc, layout::kDescVersion),
                             UndoAppendMode::CHECKSUM_SINGLE_BARRIER);
  std::vector<ByteRange> flips;
  while (auto rec = walker.next()) {
    if (rec->kind != layout::kUndoKindWriteSet) continue;
    uint64_t entries = rec->length / layout::kWsEntryBytes;
    for (uint64_t i = 0; i < entries; ++i) {
      uint64_t at = rec->off + layout::kRecPayload + i * layout::kWsEntryBytes;
      uint64_t wrapper = m.peek_u64(at + layout::kWsWrapper);
      uint64_t new_payload = m.peek_u64(at + layout::kWsNewPayload);
      uint64_t old_backup = m.peek_u64(at + layout::kWsOldBackup);
      uint64_t meta = m.peek_u64(at + layout::kWsMeta);
      if (meta == layout::kWsMetaRoot) {
        if (m.peek_u64(layout::kHdrRoot) != new_payload) {
          m.store_u64(layout::kHdrRoot, new_payload);
          r.wb(layout::kHdrRoot, 16);
        }
        continue;
      }
      bool touched = false;
      if (m.peek_u64(wrapper + layout::kCowOld) != new_payload) {
        m.store_u64(wrapper + layout::kCowOld, new_payload);
        touched = true;
      }
      if (m.peek_u64(wrapper + layout::kCowNew) != 0) {
        m.store_u64(wrapper + layout::kCowNew, 0);
        touched = true;
      }
      if (m.peek_u64(wrapper + layout::kCowOldBackup) != 0) {
        m.store_u64(wrapper + layout::kCowOldBackup, 0);
        touched = true;
      }
      if (touched) r.wb(wrapper, layout::kCowHeaderBytes);
      SuperblockEntry e;
      uint32_t block;
      if (cow_detail::locate_raw(m, geo, old_backup, &e, &block))
        bitmap_flip(m, e, block, false, &flips);
    }
  }
  ChunkedLog alog(&m, geo.alloc_arena_off(desc), geo.alloc_arena_bytes,
                  geo.log_chunk_bytes);
  undo_detail::replay_alloc_log(
      r, desc, alog, r.desc_field(desc, layout::kDescAllocCursor), &flips);
  r.wb(flips);
}

inline void CowRt::recover_cleanup(Region& r, uint32_t desc) {
  UndoRt::recover_cleanup(r, desc);
}

}  // namespace pmtx
