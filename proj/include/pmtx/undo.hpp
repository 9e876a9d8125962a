#pragma once

#include <optional>
#include <vector>

#include "pmtx/region.hpp"

// Undo-logging runtime. Writes log the pre-image, then store in place.
//
// Appends cost one persist barrier each: the record carries a prolog
// sentinel, the transaction's version number, and a checksum, and the
// persisted tail counter is only updated after the barrier, so recovery
// can accept at most one validated record beyond the stored tail instead
// of paying a second barrier per append. Commit is four steps: flush the
// in-place writes (one barrier), append a commit record (one barrier;
// the COMMITTED state itself need not persist), then apply allocation
// effects and persist IDLE, each costing a barrier only when the
// transaction allocated or freed. Total for a no-alloc transaction with N
// deduplicated logged ranges: N + 2.

namespace pmtx {

namespace undo_detail {

struct Record {
  uint64_t off = 0;      // region offset of the record
  uint64_t version = 0;
  uint64_t kind = 0;
  uint64_t target = 0;
  uint64_t length = 0;
};

inline std::vector<uint8_t> build_record(uint64_t version, uint64_t kind,
                                         uint64_t target,
                                         std::span<const uint8_t> payload,
                                         UndoAppendMode mode) {
  uint64_t total = layout::undo_record_bytes(payload.size());
  std::vector<uint8_t> rec(total, 0);
  put_u64(rec, layout::kRecProlog, layout::kUndoProlog);
  put_u64(rec, layout::kRecVersion, version);
  put_u64(rec, layout::kRecKind, kind);
  put_u64(rec, layout::kRecTarget, target);
  put_u64(rec, layout::kRecLength, payload.size());
  std::copy(payload.begin(), payload.end(), rec.begin() + layout::kRecPayload);
  std::span<const uint8_t> covered(rec.data(),
                                   layout::kRecPayload + payload.size());
  uint64_t sum = mode == UndoAppendMode::CHECKSUM_SINGLE_BARRIER
                     ? crc64(covered)
                     : byte_sum64(covered);
  put_u64(rec, total - 8, sum);
  return rec;
}

// Validating sentinel-driven walker over a descriptor's data log.
class Walker {
 public:
  Walker(Region& r, const ChunkedLog& log, uint64_t expected_version,
         UndoAppendMode mode)
      : m_(&r.medium()),
        log_(&log),
        version_(expected_version),
        mode_(mode) {}

  std::optional<Record> next() {
    while (true) {
      if (chunk_ >= log_->chunk_count()) return std::nullopt;
      uint64_t cap = log_->payload_capacity();
      if (off_ + 8 > cap) {
        ++chunk_;
        off_ = 0;
        continue;
      }
      uint64_t base = log_->payload_off(chunk_) + off_;
      uint64_t head = m_->peek_u64(base);
      if (head == layout::kChunkSeal) {
        ++chunk_;
        off_ = 0;
        continue;
      }
      if (head != layout::kUndoProlog) return std::nullopt;
      Record rec;
      rec.off = base;
      rec.version = m_->peek_u64(base + layout::kRecVersion);
      rec.kind = m_->peek_u64(base + layout::kRecKind);
      rec.target = m_->peek_u64(base + layout::kRecTarget);
      rec.length = m_->peek_u64(base + layout::kRecLength);
      if (rec.kind > layout::kUndoKindWriteSet) return std::nullopt;
      if (rec.length > cap - off_ ||
          layout::undo_record_bytes(rec.length) > cap - off_)
        return std::nullopt;
      uint64_t total = layout::undo_record_bytes(rec.length);
      auto bytes = m_->peek(base, total);
      std::span<const uint8_t> covered(bytes.data(),
                                       layout::kRecPayload + rec.length);
      uint64_t want = get_u64(bytes, total - 8);
      uint64_t got = mode_ == UndoAppendMode::CHECKSUM_SINGLE_BARRIER
                         ? crc64(covered)
                         : byte_sum64(covered);
      if (got != want || rec.version != version_) return std::nullopt;
      off_ += total;
      return rec;
    }
  }

 private:
  PersistentMedium* m_;
  const ChunkedLog* log_;
  uint64_t version_;
  UndoAppendMode mode_;
  uint64_t chunk_ = 0;
  uint64_t off_ = 0;
};

// Appends one record with the mode's barrier discipline; the descriptor
// line rides along in the writeback set so the persisted version and
// tail stay coherent with the records they vouch for.
inline uint64_t append_record(Region& r, detail::TxnCtx& t, uint64_t kind,
                              uint64_t target,
                              std::span<const uint8_t> payload) {
  UndoAppendMode mode = r.geometry().undo_mode;
  auto rec = build_record(t.version, kind, target, payload, mode);
  auto ap = t.data_log.append(rec);
  r.wb(ap.wb);
  auto [doff, dlen] = r.desc_range(t.id);
  r.wb(doff, dlen);
  r.barrier();
  // Tail update after the barrier; it persists with the next append (or
  // with an extra barrier in the naive two-barrier mode).
  ++t.data_records;
  r.set_desc_field(t.id, layout::kDescLogCursor, t.data_records);
  if (mode == UndoAppendMode::NAIVE_TWO_BARRIER) {
    r.wb(doff, dlen);
    r.barrier();
  }
  return ap.record_off;
}

// Uncovered subranges of [start, end) with respect to the transaction's
// already-logged ranges.
inline std::vector<ByteRange> uncovered(
    const std::map<uint64_t, uint64_t>& ranges, uint64_t start, uint64_t end) {
  std::vector<ByteRange> gaps;
  uint64_t pos = start;
  auto it = ranges.upper_bound(start);
  if (it != ranges.begin()) {
    auto prev = std::prev(it);
    if (prev->second > pos) pos = std::min(prev->second, end);
  }
  while (pos < end) {
    while (it != ranges.end() && it->second <= pos) ++it;
    if (it == ranges.end() || it->first >= end) {
      gaps.emplace_back(pos, end - pos);
      break;
    }
    if (it->first > pos) gaps.emplace_back(pos, it->first - pos);
    pos = std::min(it->second, end);
    ++it;
  }
  return gaps;
}

inline void merge_range(std::map<uint64_t, uint64_t>& ranges, uint64_t start,
                        uint64_t end) {
  auto it = ranges.upper_bound(start);
  if (it != ranges.begin()) {
    auto prev = std::prev(it);
    if (prev->second >= start) {
      start = prev->first;
      end = std::max(end, prev->second);
      it = ranges.erase(prev);
    }
  }
  while (it != ranges.end() && it->first <= end) {
    end = std::max(end, it->second);
    it = ranges.erase(it);
  }
  ranges[start] = end;
}

inline void replay_alloc_log(Region& r, uint32_t desc, const ChunkedLog& log,
                             uint64_t count, std::vector<ByteRange>* wb) {
  auto& m = r.medium();
  UsedWalker walker(log);
  for (uint64_t k = 0; k < count; ++k) {
    uint64_t off = walker.next(layout::kAllocRecBytes);
    if (!off) break;
    walker.advance(layout::kAllocRecBytes);
    AllocRecord rec = AllocRecord::decode(m.peek(off, layout::kAllocRecBytes));
    SuperblockEntry e = read_sb_entry(m, r.geometry(), rec.sb);
    if (!e.valid() || rec.block >= e.block_count) continue;
    bitmap_flip(m, e, rec.block, rec.op == AllocOp::ALLOC, wb);
  }
  (void)desc;
}

}  // namespace undo_detail

inline void UndoRt::write(Region& r, detail::TxnCtx& t, uint64_t target,
                          std::span<const uint8_t> data) {
  auto& m = r.medium();
  uint64_t max_payload = (t.data_log.max_record_bytes() -
                          layout::undo_record_bytes(0)) /
                         8 * 8;
  for (auto [gap_off, gap_len] :
       undo_detail::uncovered(t.logged_ranges, target, target + data.size())) {
    uint64_t pos = gap_off;
    uint64_t remaining = gap_len;
    while (remaining > 0) {
      uint64_t piece = std::min(remaining, max_payload);
      auto old_bytes = m.load(pos, piece);
      uint64_t off = undo_detail::append_record(
          r, t, layout::kUndoKindData, pos, old_bytes);
      t.undo_records.push_back({pos, piece, off});
      pos += piece;
      remaining -= piece;
    }
  }
  undo_detail::merge_range(t.logged_ranges, target, target + data.size());
  m.store(target, data);
}

inline void UndoRt::commit(Region& r, detail::TxnCtx& t) {
  auto& m = r.medium();
  bool has_alloc = t.alloc_records > 0;
  // (i) persist all in-place transactional writes; the allocation log and
  // fresh-object initialization ride the same barrier.
  for (auto& [s, e] : t.logged_ranges) r.wb(s, e - s);
  r.wb(t.init_ranges);
  r.wb(t.new_sb_entries);
  r.wb(t.alloc_log.used_extent());
  auto [doff, dlen] = r.desc_range(t.id);
  r.wb(doff, dlen);
  r.barrier();
  // (ii) logically commit: append the commit record. The COMMITTED state
  // itself does not need to persist.
  t.window.store_op = m.op_count();
  undo_detail::append_record(r, t, layout::kUndoKindCommit, 0, {});
  t.window.barrier_op = m.op_count();
  r.set_desc_field(t.id, layout::kDescState,
                   static_cast<uint64_t>(TxnState::COMMITTED));
  // (iii) allocation/deallocation effects, persisted only when present.
  if (has_alloc) {
    std::vector<ByteRange> flips;
    for (auto& res : t.reserved) {
      SuperblockEntry e = r.heap_.entry(res.sb);
      bitmap_flip(m, e, res.block, true, &flips);
      r.heap_.note_committed_alloc(res.sb, res.block);
    }
    for (auto& fr : t.freed) {
      SuperblockEntry e = r.heap_.entry(fr.sb);
      bitmap_flip(m, e, fr.block, false, &flips);
    }
    r.wb(flips);
    r.barrier();
  }
  // (iv) back to IDLE, persisted only when (iii) ran.
  r.set_desc_field(t.id, layout::kDescState,
                   static_cast<uint64_t>(TxnState::IDLE));
  if (has_alloc) {
    r.wb(doff, dlen);
    r.barrier();
  }
  // Cleanup: scrub the logs (persists lazily with future barriers) and
  // hand freed blocks back now that the free is durable.
  r.wb(t.data_log.truncate());
  r.wb(t.alloc_log.truncate());
  r.set_desc_field(t.id, layout::kDescLogCursor, 0);
  r.set_desc_field(t.id, layout::kDescAllocCursor, 0);
  for (auto& fr : t.freed) r.heap_.release_freed(fr.sb, fr.block);
}

inline void UndoRt::abort(Region& r, detail::TxnCtx& t) {
  auto& m = r.medium();
  r.set_desc_field(t.id, layout::kDescState,
                   static_cast<uint64_t>(TxnState::ABORTED));
  if (!t.undo_records.empty()) {
    for (auto it = t.undo_records.rbegin(); it != t.undo_records.rend();
         ++it) {
      auto old_bytes = m.peek(it->record_off + layout::kRecPayload,
                              it->length);
      m.store(it->target, old_bytes);
    }
    for (auto& [s, e] : t.logged_ranges) r.wb(s, e - s);
    r.barrier();
  }
  r.set_desc_field(t.id, layout::kDescState,
                   static_cast<uint64_t>(TxnState::IDLE));
  for (auto& fr : t.freed) r.heap_.unstage_free(fr.sb, fr.block, fr.kind);
  for (auto& res : t.reserved) r.heap_.unreserve(res.sb, res.block);
  r.wb(t.data_log.truncate());
  r.wb(t.alloc_log.truncate());
  r.set_desc_field(t.id, layout::kDescLogCursor, 0);
  r.set_desc_field(t.id, layout::kDescAllocCursor, 0);
}

inline UndoRt::TailInfo UndoRt::infer_tail(Region& r, uint32_t desc) {
  uint64_t version = r.desc_field(desc, layout::kDescVersion);
  uint64_t stored = r.desc_field(desc, layout::kDescLogCursor);
  UndoAppendMode mode = r.geometry().undo_mode;
  ChunkedLog log(&r.medium(), r.geometry().log_arena_off(desc),
                 r.geometry().log_arena_bytes, r.geometry().log_chunk_bytes);
  undo_detail::Walker walker(r, log, version, mode);
  uint64_t limit = mode == UndoAppendMode::CHECKSUM_SINGLE_BARRIER
                       ? stored + 1
                       : stored;
  TailInfo info;
  while (info.records < limit) {
    auto rec = walker.next();
    if (!rec) break;
    if (rec->kind == layout::kUndoKindCommit) info.committed = true;
    ++info.records;
  }
  return info;
}

inline void UndoRt::recover_effects(Region& r, uint32_t desc) {
  auto& m = r.medium();
  const auto& geo = r.geometry();
  TailInfo info = infer_tail(r, desc);
  if (info.committed) {
    // Roll forward: the commit record vouches for the allocation log.
    std::vector<ByteRange> flips;
    ChunkedLog alog(&m, geo.alloc_arena_off(desc), geo.alloc_arena_bytes,
                    geo.log_chunk_bytes);
    undo_detail::replay_alloc_log(
        r, desc, alog, r.desc_field(desc, layout::kDescAllocCursor), &flips);
    r.wb(flips);
    return;
  }
  // Roll back: apply accepted pre-images newest-first.
  ChunkedLog log(&m, geo.log_arena_off(desc), geo.log_arena_bytes,
                 geo.log_chunk_bytes);
  undo_detail::Walker walker(r, log,
                             r.desc_field(desc, layout::kDescVersion),
                             geo.undo_mode);
  std::vector<undo_detail::Record> records;
  for (uint64_t k = 0; k < info.records; ++k) {
    auto rec = walker.next();
    if (!rec) break;
    records.push_back(*rec);
  }
  for (auto it = records.rbegin(); it != records.rend(); ++it) {
    if (it->kind != layout::kUndoKindData) continue;
    auto old_bytes = m.peek(it->off + layout::kRecPayload, it->length);
    if (m.peek(it->target, it->length) != old_bytes) {
      m.store(it->target, old_bytes);
      r.wb(it->target, it->length);
    }
  }
}

inline void UndoRt::recover_cleanup(Region& r, uint32_t desc) {
  const auto& geo = r.geometry();
  auto [doff, dlen] = r.desc_range(desc);
  bool touched = false;
  if (r.desc_field(desc, layout::kDescState) !=
      static_cast<uint64_t>(TxnState::IDLE)) {
    r.set_desc_field(desc, layout::kDescState,
                     static_cast<uint64_t>(TxnState::IDLE));
    touched = true;
  }
  if (r.desc_field(desc, layout::kDescLogCursor) != 0) {
    r.set_desc_field(desc, layout::kDescLogCursor, 0);
    touched = true;
  }
  if (r.desc_field(desc, layout::kDescAllocCursor) != 0) {
    r.set_desc_field(desc, layout::kDescAllocCursor, 0);
    touched = true;
  }
  if (touched) r.wb(doff, dlen);
  ChunkedLog log(&r.medium(), geo.log_arena_off(desc), geo.log_arena_bytes,
                 geo.log_chunk_bytes);
  r.wb(log.truncate_all_dirty());
  ChunkedLog alog(&r.medium(), geo.alloc_arena_off(desc),
                  geo.alloc_arena_bytes, geo.log_chunk_bytes);
  r.wb(alog.truncate_all_dirty());
}

}  // namespace pmtx
