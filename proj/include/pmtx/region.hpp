#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "pmtx/alloc.hpp"
#include "pmtx/chunked_log.hpp"
#include "pmtx/crc64.hpp"
#include "pmtx/layout.hpp"
#include "pmtx/medium.hpp"

// Persistent region and transaction front end. A region pins one of the
// three runtimes (undo, redo, copy-on-write) at creation; transactions
// dispatch reads, writes, allocation, and commit/abort to it. The region
// provides failure atomicity only: callers synchronize their own data
// races, one transaction per thread at a time.

namespace pmtx {

class Region;
class Txn;

enum class TxnState : uint64_t {
  IDLE = 0,
  RUNNING = 1,
  ABORTED = 2,
  COMMITTED = 3,
};

struct ObjectRef {
  uint64_t offset = 0;  // region offset of the object header (0 = unset)
  bool valid() const { return offset != 0; }
  friend bool operator==(ObjectRef a, ObjectRef b) {
    return a.offset == b.offset;
  }
};

enum class OpenMode { READ, WRITE };

// Payload clone hook for COW open; default is a byte copy. Must be
// deterministic: it runs once per first read-write open and its output is
// what commits.
using CopyCtor =
    std::function<void(Region&, uint64_t src_payload, uint64_t dst_payload,
                       uint64_t payload_bytes)>;

// Commit-point op-count window, recorded for crash testing. With p
// mutating medium ops applied at the crash: p <= store_op means the
// commit marker cannot have persisted (its stores had not run); p >=
// barrier_op means it must have (its barrier completed). In between,
// either outcome is legitimate. Zero on read-only commits and aborts.
struct CommitWindow {
  uint64_t store_op = 0;
  uint64_t barrier_op = 0;
};

namespace detail {

// Volatile per-descriptor transaction context.
struct TxnCtx {
  uint32_t id = 0;
  bool live = false;
  bool committed = false;
  uint64_t version = 0;
  bool slotless = false;
  bool eager_alloc_persist = false;
  std::thread::id owner;

  ChunkedLog data_log;
  ChunkedLog alloc_log;
  uint64_t data_records = 0;
  uint64_t alloc_records = 0;

  // undo: deduplicated logged byte ranges (start -> end) and the volatile
  // record directory for reverse rollback.
  std::map<uint64_t, uint64_t> logged_ranges;
  struct UndoRec {
    uint64_t target;
    uint64_t length;
    uint64_t record_off;
  };
  std::vector<UndoRec> undo_records;

  // redo
  std::unordered_map<uint64_t, uint64_t> raw_index;  // base -> newest record
  std::vector<uint64_t> touched_objects;             // bases with our bit set
  uint64_t traversal_records = 0;
  std::vector<ByteRange> proactive_wb;

  // cow
  struct WsEntry {
    uint64_t wrapper;
    uint64_t new_payload;
    uint64_t old_backup;
  };
  std::vector<WsEntry> write_set;
  std::unordered_map<uint64_t, uint64_t> open_writes;  // wrapper -> new
  std::optional<uint64_t> pending_root;
  std::vector<ByteRange> cow_dirty;  // stores into new/fresh payloads

  // allocation
  struct Reserved {
    uint32_t sb;
    uint32_t block;
    uint64_t off;
  };
  std::vector<Reserved> reserved;
  std::set<uint64_t> my_reserved_offsets;
  struct Freed {
    uint32_t sb;
    uint32_t block;
    uint64_t off;
    Heap::FreeKind kind;
  };
  std::vector<Freed> freed;
  std::set<uint64_t> freed_refs;
  std::vector<ByteRange> new_sb_entries;
  std::vector<ByteRange> init_ranges;  // fresh-object header/payload stores
  std::vector<ByteRange> alloc_log_wb;

  CommitWindow window;

  void reset() {
    live = false;
    committed = false;
    slotless = false;
    eager_alloc_persist = false;
    data_records = 0;
    alloc_records = 0;
    logged_ranges.clear();
    undo_records.clear();
    raw_index.clear();
    touched_objects.clear();
    traversal_records = 0;
    proactive_wb.clear();
    write_set.clear();
    open_writes.clear();
    pending_root.reset();
    cow_dirty.clear();
    reserved.clear();
    my_reserved_offsets.clear();
    freed.clear();
    freed_refs.clear();
    new_sb_entries.clear();
    init_ranges.clear();
    alloc_log_wb.clear();
    window = CommitWindow{};
    data_log.reset_cursor();
    alloc_log.reset_cursor();
  }
};

}  // namespace detail

// Runtime entry points; defined in undo.hpp / redo.hpp / cow.hpp.
struct UndoRt {
  static void write(Region& r, detail::TxnCtx& t, uint64_t target,
                    std::span<const uint8_t> data);
  static void commit(Region& r, detail::TxnCtx& t);
  static void abort(Region& r, detail::TxnCtx& t);
  static void recover_effects(Region& r, uint32_t desc);
  static void recover_cleanup(Region& r, uint32_t desc);
  // Tail inference over a descriptor's persisted log. Returns accepted
  // record count and whether a commit record is among them.
  struct TailInfo {
    uint64_t records = 0;
    bool committed = false;
  };
  static TailInfo infer_tail(Region& r, uint32_t desc);
};

struct RedoRt {
  static void write(Region& r, detail::TxnCtx& t, uint64_t base,
                    uint64_t offset, std::span<const uint8_t> data);
  static std::vector<uint8_t> read(Region& r, detail::TxnCtx& t, uint64_t base,
                                   uint64_t offset, uint64_t len);
  static void commit(Region& r, detail::TxnCtx& t);
  static void abort(Region& r, detail::TxnCtx& t);
  static void recover_effects(Region& r, uint32_t desc);
  static void recover_cleanup(Region& r, uint32_t desc);
};

struct CowRt {
  static uint64_t open(Region& r, detail::TxnCtx& t, ObjectRef ref,
                       OpenMode mode, const CopyCtor& ctor);
  static void write(Region& r, detail::TxnCtx& t, ObjectRef ref,
                    uint64_t offset, std::span<const uint8_t> data);
  static std::vector<uint8_t> read(Region& r, detail::TxnCtx& t, ObjectRef ref,
                                   uint64_t offset, uint64_t len);
  static void commit(Region& r, detail::TxnCtx& t);
  static void abort(Region& r, detail::TxnCtx& t);
  static void recover_effects(Region& r, uint32_t desc);
  static void recover_cleanup(Region& r, uint32_t desc);
};

class Region {
  struct CreateTag {};
  struct OpenTag {};

 public:
  // Initializes a fresh region on the medium. The header is written in two
  // steps (body, then magic + checksum) so a crash during creation leaves
  // an image that open() rejects rather than misreads.
  static Region create(PersistentMedium& m, RuntimeKind kind,
                       RegionConfig cfg = {}) {
    return Region(m, kind, cfg, CreateTag{});
  }

  // Opens an existing region: validates the header, runs runtime recovery,
  // then rebuilds volatile allocator metadata. Recovery is idempotent.
  static Region open(PersistentMedium& m,
                     std::optional<RuntimeKind> expect = std::nullopt) {
    return Region(m, expect, OpenTag{});
  }

  Region(const Region&) = delete;
  Region& operator=(const Region&) = delete;
  Region(Region&&) = delete;
  Region& operator=(Region&&) = delete;

  RuntimeKind kind() const { return geo_.kind; }
  const layout::Geometry& geometry() const { return geo_; }
  PersistentMedium& medium() { return *m_; }
  Heap& heap() { return heap_; }

  Txn begin();

  // ---- root pointer ----

  ObjectRef root_get() {
    return ObjectRef{m_->load_u64(layout::kHdrRoot)};
  }

  // ---- objects ----

  // Direct payload offset for uninstrumented access. The caller takes
  // over correctness; under COW the address is the current old payload
  // and moves on the next committed write.
  uint64_t unwrap(ObjectRef ref) {
    validate_ref(ref);
    if (geo_.kind == RuntimeKind::COW)
      return m_->peek_u64(ref.offset + layout::kCowOld);
    return ref.offset + layout::kObjHeaderBytes;
  }

  uint64_t object_size(ObjectRef ref) const {
    return m_->peek_u64(ref.offset + layout::kObjSize);
  }

  // ---- introspection (tests, dump tools, harness) ----

  TxnState descriptor_state(uint32_t id) const {
    return static_cast<TxnState>(m_->peek_u64(geo_.desc_off(id) +
                                              layout::kDescState));
  }
  uint64_t descriptor_version(uint32_t id) const {
    return m_->peek_u64(geo_.desc_off(id) + layout::kDescVersion);
  }
  uint64_t global_version() const {
    return m_->peek_u64(layout::kHdrGlobalVersion);
  }
  CommitWindow commit_window(uint32_t id) const { return ctxs_[id]->window; }
  uint64_t traversal_count(uint32_t id) const {
    return ctxs_[id]->traversal_records;
  }

  // PDOM-2 runs store-only persistence: the runtimes skip writeback and
  // barrier calls entirely so instruction counts mirror the domain.
  void wb(uint64_t off, uint64_t len) {
    if (!m_->config().store_only()) m_->writeback(off, len);
  }
  void wb(const std::vector<ByteRange>& ranges) {
    for (auto& [off, len] : ranges) wb(off, len);
  }
  void barrier() {
    if (!m_->config().store_only()) m_->persist_barrier();
  }

  // ---- internal surface shared with the runtimes ----

  uint64_t desc_field(uint32_t id, uint64_t field) const {
    return m_->peek_u64(geo_.desc_off(id) + field);
  }
  void set_desc_field(uint32_t id, uint64_t field, uint64_t v) {
    m_->store_u64(geo_.desc_off(id) + field, v);
  }
  ByteRange desc_range(uint32_t id) const {
    return {geo_.desc_off(id), layout::kDescBytes};
  }

  // Reserves a block and stages the ALLOC intent in the transaction's
  // allocation log. No barrier in the default lazy mode.
  Heap::Reservation reserve_logged(detail::TxnCtx& t, uint64_t phys_bytes,
                                   uint32_t flags, uint64_t record_size) {
    Heap::Reservation res = heap_.reserve(phys_bytes, flags);
    AllocRecord rec{AllocOp::ALLOC, res.sb, res.block,
                    static_cast<uint32_t>(record_size)};
    auto ap = t.alloc_log.append(rec.encode());
    ++t.alloc_records;
    set_desc_field(t.id, layout::kDescAllocCursor, t.alloc_records);
    for (auto& range : ap.wb) t.alloc_log_wb.push_back(range);
    if (res.new_entry_len)
      t.new_sb_entries.emplace_back(res.new_entry_off, res.new_entry_len);
    t.reserved.push_back({res.sb, res.block, res.offset});
    t.my_reserved_offsets.insert(res.offset);
    if (t.eager_alloc_persist) {
      wb(ap.wb);
      wb(desc_range(t.id).first, desc_range(t.id).second);
      barrier();
    }
    return res;
  }

 private:
  friend class Txn;
  friend struct UndoRt;
  friend struct RedoRt;
  friend struct CowRt;

  Region(PersistentMedium& m, layout::Geometry geo)
      : m_(&m), geo_(geo), heap_(&m, &geo_) {
    ctxs_.reserve(geo_.desc_count);
    for (uint32_t i = 0; i < geo_.desc_count; ++i) {
      auto ctx = std::make_unique<detail::TxnCtx>();
      ctx->data_log = ChunkedLog(m_, geo_.log_arena_off(i),
                                 geo_.log_arena_bytes, geo_.log_chunk_bytes);
      ctx->alloc_log = ChunkedLog(m_, geo_.alloc_arena_off(i),
                                  geo_.alloc_arena_bytes,
                                  geo_.log_chunk_bytes);
      ctxs_.push_back(std::move(ctx));
    }
  }

  Region(PersistentMedium& m, RuntimeKind kind, const RegionConfig& cfg,
         CreateTag)
      : Region(m, layout::Geometry::plan(m.size_bytes(), kind, cfg)) {
    std::vector<uint8_t> hdr(layout::kHdrStaticBytes, 0);
    put_u32(hdr, layout::kHdrFormatVersion, layout::kFormatVersion);
    put_u32(hdr, layout::kHdrRuntimeKind, static_cast<uint32_t>(kind));
    put_u32(hdr, layout::kHdrDescCount, geo_.desc_count);
    put_u32(hdr, layout::kHdrLogArenaBytes, geo_.log_arena_bytes);
    put_u32(hdr, layout::kHdrAllocArenaBytes, geo_.alloc_arena_bytes);
    put_u32(hdr, layout::kHdrSbTableCap, geo_.sb_table_cap);
    put_u64(hdr, layout::kHdrDescTableOff, geo_.desc_table_off);
    put_u64(hdr, layout::kHdrArenasOff, geo_.arenas_off);
    put_u64(hdr, layout::kHdrSbTableOff, geo_.sb_table_off);
    put_u64(hdr, layout::kHdrHeapOff, geo_.heap_off);
    put_u64(hdr, layout::kHdrHeapSize, geo_.heap_size);
    put_u32(hdr, layout::kHdrLogChunkBytes, geo_.log_chunk_bytes);
    put_u32(hdr, layout::kHdrUndoMode, static_cast<uint32_t>(geo_.undo_mode));
    // Body first (fields sans magic), persist, then magic + checksum. The
    // rest of the layout is valid as all-zero and needs no stores.
    m_->store(8, std::span<const uint8_t>(hdr).subspan(8));
    wb(0, layout::kHdrStaticBytes);
    barrier();
    m_->store(0, std::span<const uint8_t>(
                     reinterpret_cast<const uint8_t*>(layout::kMagic), 8));
    m_->store_u64(layout::kHdrStaticChecksum,
                  crc64(m_->peek(0, layout::kHdrStaticBytes)));
    wb(0, layout::kHeaderBytes);
    barrier();
    heap_.rebuild();
  }

  Region(PersistentMedium& m, std::optional<RuntimeKind> expect, OpenTag)
      : Region(m, parse_header(m, expect)) {
    recover();
    heap_.rebuild();
  }

  static layout::Geometry parse_header(PersistentMedium& m,
                                       std::optional<RuntimeKind> expect) {
    if (m.size_bytes() < layout::kHeaderBytes)
      throw FormatError("image smaller than a region header");
    auto hdr = m.peek(0, layout::kHdrStaticBytes);
    if (std::memcmp(hdr.data(), layout::kMagic, 8) != 0)
      throw FormatError("bad region magic");
    if (crc64(hdr) != m.peek_u64(layout::kHdrStaticChecksum))
      throw FormatError("torn region header");
    if (get_u32(hdr, layout::kHdrFormatVersion) != layout::kFormatVersion)
      throw FormatError("unsupported region format version");
    layout::Geometry geo;
    uint32_t kind = get_u32(hdr, layout::kHdrRuntimeKind);
    if (kind > static_cast<uint32_t>(RuntimeKind::COW))
      throw FormatError("unknown runtime kind");
    geo.kind = static_cast<RuntimeKind>(kind);
    if (expect && *expect != geo.kind)
      throw FormatError("region runtime kind mismatch");
    geo.desc_count = get_u32(hdr, layout::kHdrDescCount);
    geo.log_arena_bytes = get_u32(hdr, layout::kHdrLogArenaBytes);
    geo.alloc_arena_bytes = get_u32(hdr, layout::kHdrAllocArenaBytes);
    geo.sb_table_cap = get_u32(hdr, layout::kHdrSbTableCap);
    geo.log_chunk_bytes = get_u32(hdr, layout::kHdrLogChunkBytes);
    geo.undo_mode =
        static_cast<UndoAppendMode>(get_u32(hdr, layout::kHdrUndoMode));
    geo.desc_table_off = get_u64(hdr, layout::kHdrDescTableOff);
    geo.arenas_off = get_u64(hdr, layout::kHdrArenasOff);
    geo.sb_table_off = get_u64(hdr, layout::kHdrSbTableOff);
    geo.heap_off = get_u64(hdr, layout::kHdrHeapOff);
    geo.heap_size = get_u64(hdr, layout::kHdrHeapSize);
    if (geo.heap_off + geo.heap_size > m.size_bytes() || geo.desc_count == 0)
      throw FormatError("region geometry exceeds medium");
    return geo;
  }

  void validate_ref(ObjectRef ref) const {
    if (!ref.valid() || ref.offset < geo_.heap_off ||
        ref.offset >= geo_.heap_off + geo_.heap_size)
      throw RangeError("object reference outside heap");
    if (!heap_.block_allocated(ref.offset))
      throw RangeError("object reference does not name an allocated block");
  }

  // Cheap bounds check for the hot read/write path.
  void check_object_span(ObjectRef ref, uint64_t off, uint64_t len) const {
    if (!ref.valid() || ref.offset < geo_.heap_off ||
        ref.offset >= geo_.heap_off + geo_.heap_size)
      throw RangeError("object reference outside heap");
    uint64_t size = object_size(ref);
    if (off > size || len > size - off)
      throw RangeError("access beyond object payload");
  }

  // ---- recovery ----

  void recover() {
    for (uint32_t i = 0; i < geo_.desc_count; ++i) {
      uint64_t st = desc_field(i, layout::kDescState);
      if (st > static_cast<uint64_t>(TxnState::COMMITTED))
        throw FormatError("descriptor state outside the four-state machine");
    }
    // Phase A: reapply or roll back transaction effects, then persist them
    // before any log is scrubbed.
    for (uint32_t i = 0; i < geo_.desc_count; ++i) recover_effects(i);
    barrier();
    // Phase B: scrub logs, settle descriptors, clear volatile-equivalent
    // ownership marks, bump the version floor.
    for (uint32_t i = 0; i < geo_.desc_count; ++i) recover_cleanup(i);
    sweep_object_marks();
    uint64_t floor = m_->peek_u64(layout::kHdrGlobalVersion);
    for (uint32_t i = 0; i < geo_.desc_count; ++i)
      floor = std::max(floor, desc_field(i, layout::kDescVersion));
    if (floor != m_->peek_u64(layout::kHdrGlobalVersion)) {
      m_->store_u64(layout::kHdrGlobalVersion, floor);
      wb(layout::kHdrRoot, 16);
    }
    barrier();
  }

  void recover_effects(uint32_t i) {
    switch (geo_.kind) {
      case RuntimeKind::UNDO: UndoRt::recover_effects(*this, i); break;
      case RuntimeKind::REDO: RedoRt::recover_effects(*this, i); break;
      case RuntimeKind::COW: CowRt::recover_effects(*this, i); break;
    }
  }
  void recover_cleanup(uint32_t i) {
    switch (geo_.kind) {
      case RuntimeKind::UNDO: UndoRt::recover_cleanup(*this, i); break;
      case RuntimeKind::REDO: RedoRt::recover_cleanup(*this, i); break;
      case RuntimeKind::COW: CowRt::recover_cleanup(*this, i); break;
    }
  }

  // Writers bitmaps (undo/redo) and writer ids (COW) are semantically
  // volatile; recovery rebuilds them empty.
  void sweep_object_marks() {
    for (uint32_t i = 0; i < geo_.sb_table_cap; ++i) {
      SuperblockEntry e = read_sb_entry(*m_, geo_, i);
      if (!e.valid()) continue;
      bool wrappers = (e.flags & layout::kSbFlagWrapperPool) != 0;
      bool objects = e.flags == 0 || (e.flags == layout::kSbFlagLarge &&
                                      geo_.kind != RuntimeKind::COW);
      if (geo_.kind == RuntimeKind::COW ? !wrappers : !objects) continue;
      for (uint32_t b = 0; b < e.block_count; ++b) {
        if (!bitmap_get(*m_, e, b)) continue;
        uint64_t hdr = e.block_off(b);
        if (geo_.kind == RuntimeKind::COW) {
          if (m_->peek_u64(hdr + layout::kCowWriterId) != layout::kNoWriter) {
            m_->store_u64(hdr + layout::kCowWriterId, layout::kNoWriter);
            m_->store_u64(hdr + layout::kCowWriterVersion, 0);
            wb(hdr, layout::kCowHeaderBytes);
          }
          // Quiesce wrappers abandoned before their commit point.
          if (m_->peek_u64(hdr + layout::kCowNew) != 0 ||
              m_->peek_u64(hdr + layout::kCowOldBackup) != 0) {
            m_->store_u64(hdr + layout::kCowNew, 0);
            m_->store_u64(hdr + layout::kCowOldBackup, 0);
            wb(hdr, layout::kCowHeaderBytes);
          }
        } else {
          if (m_->peek_u64(hdr + layout::kObjWriters) != 0) {
            m_->store_u64(hdr + layout::kObjWriters, 0);
            wb(hdr, layout::kObjHeaderBytes);
          }
        }
      }
    }
  }

  PersistentMedium* m_;
  layout::Geometry geo_;
  Heap heap_;
  std::vector<std::unique_ptr<detail::TxnCtx>> ctxs_;
  std::mutex begin_mu_;
  std::set<std::thread::id> active_threads_;
};

// Transaction handle. Move-only; aborts on destruction when still live.
class Txn {
 public:
  Txn(Txn&& o) noexcept : r_(o.r_), id_(o.id_) { o.r_ = nullptr; }
  Txn& operator=(Txn&& o) noexcept {
    if (this != &o) {
      finish_if_live();
      r_ = o.r_;
      id_ = o.id_;
      o.r_ = nullptr;
    }
    return *this;
  }
  Txn(const Txn&) = delete;
  Txn& operator=(const Txn&) = delete;
  ~Txn() { finish_if_live(); }

  uint32_t id() const { return id_; }
  uint64_t version() const { return ctx().version; }
  bool slotless() const { return ctx().slotless; }
  bool live() const { return r_ != nullptr && ctx().live; }

  // When set, every pm_alloc/pm_free persists its own log record
  // immediately (comparison baseline); the default stages everything for
  // the commit barriers.
  void set_eager_alloc_persist(bool on) { ctx().eager_alloc_persist = on; }

  std::vector<uint8_t> read(ObjectRef ref, uint64_t off, uint64_t len) {
    require_live();
    r_->check_object_span(ref, off, len);
    switch (r_->kind()) {
      case RuntimeKind::UNDO:
        return r_->m_->load(ref.offset + layout::kObjHeaderBytes + off, len);
      case RuntimeKind::REDO:
        return RedoRt::read(*r_, ctx(), ref.offset, off, len);
      case RuntimeKind::COW:
        return CowRt::read(*r_, ctx(), ref, off, len);
    }
    throw UsageError("unreachable");
  }

  void write(ObjectRef ref, uint64_t off, std::span<const uint8_t> data) {
    require_live();
    r_->check_object_span(ref, off, data.size());
    if (ctx().freed_refs.count(ref.offset))
      throw UsageError("write to an object freed earlier in this transaction");
    if (data.empty()) return;
    switch (r_->kind()) {
      case RuntimeKind::UNDO:
        UndoRt::write(*r_, ctx(),
                      ref.offset + layout::kObjHeaderBytes + off, data);
        break;
      case RuntimeKind::REDO:
        RedoRt::write(*r_, ctx(), ref.offset, off, data);
        break;
      case RuntimeKind::COW:
        CowRt::write(*r_, ctx(), ref, off, data);
        break;
    }
  }

  void write_u64(ObjectRef ref, uint64_t off, uint64_t v) {
    std::array<uint8_t, 8> buf;
    put_u64(buf, 0, v);
    write(ref, off, buf);
  }
  uint64_t read_u64(ObjectRef ref, uint64_t off) {
    auto b = read(ref, off, 8);
    return get_u64(b, 0);
  }

  // COW object access; READ returns the payload this transaction should
  // see, WRITE clones the payload on first use.
  uint64_t open(ObjectRef ref, OpenMode mode, const CopyCtor& ctor = {}) {
    require_live();
    if (r_->kind() != RuntimeKind::COW)
      throw UsageError("open() is only meaningful on a COW region");
    r_->validate_ref(ref);
    return CowRt::open(*r_, ctx(), ref, mode, ctor);
  }

  // ---- buffer operators ----

  void mem_copy(ObjectRef dst, uint64_t dst_off, ObjectRef src,
                uint64_t src_off, uint64_t len) {
    auto bytes = read(src, src_off, len);
    write(dst, dst_off, bytes);
  }

  void mem_set(ObjectRef ref, uint64_t off, uint8_t value, uint64_t len) {
    std::vector<uint8_t> bytes(len, value);
    write(ref, off, bytes);
  }

  int mem_cmp(ObjectRef a, uint64_t a_off, ObjectRef b, uint64_t b_off,
              uint64_t len) {
    auto ba = read(a, a_off, len);
    auto bb = read(b, b_off, len);
    return std::memcmp(ba.data(), bb.data(), len);
  }

  // ---- allocation ----

  ObjectRef alloc(uint64_t payload_bytes);
  void free(ObjectRef ref);

  // ---- root ----

  void root_set(ObjectRef ref);
  ObjectRef root_get();

  // ---- lifecycle ----

  void commit() {
    require_live();
    switch (r_->kind()) {
      case RuntimeKind::UNDO: UndoRt::commit(*r_, ctx()); break;
      case RuntimeKind::REDO: RedoRt::commit(*r_, ctx()); break;
      case RuntimeKind::COW: CowRt::commit(*r_, ctx()); break;
    }
    end(true);
  }

  void abort() {
    require_live();
    switch (r_->kind()) {
      case RuntimeKind::UNDO: UndoRt::abort(*r_, ctx()); break;
      case RuntimeKind::REDO: RedoRt::abort(*r_, ctx()); break;
      case RuntimeKind::COW: CowRt::abort(*r_, ctx()); break;
    }
    end(false);
  }

 private:
  friend class Region;
  Txn(Region* r, uint32_t id) : r_(r), id_(id) {}

  detail::TxnCtx& ctx() const { return *r_->ctxs_[id_]; }

  void require_live() const {
    if (!r_ || !ctx().live) throw UsageError("transaction is not running");
  }

  void end(bool committed) {
    auto& t = ctx();
    t.committed = committed;
    t.live = false;
    {
      std::lock_guard lk(r_->begin_mu_);
      r_->active_threads_.erase(t.owner);
    }
    r_->heap_.on_txn_idle();
    r_ = nullptr;
  }

  void finish_if_live() {
    if (r_ && ctx().live) {
      try {
        abort();
      } catch (...) {
        // Destructor path; abort is specified to succeed, anything else
        // is unrecoverable here.
      }
    }
    r_ = nullptr;
  }

  Region* r_;
  uint32_t id_;
};

inline Txn Region::begin() {
  std::lock_guard lk(begin_mu_);
  auto tid = std::this_thread::get_id();
  if (active_threads_.count(tid))
    throw UsageError("nested transactions are not supported");
  for (uint32_t i = 0; i < geo_.desc_count; ++i) {
    if (ctxs_[i]->live) continue;
    detail::TxnCtx& t = *ctxs_[i];
    t.reset();
    t.id = i;
    t.live = true;
    t.owner = tid;
    uint64_t version = m_->peek_u64(layout::kHdrGlobalVersion) + 1;
    m_->store_u64(layout::kHdrGlobalVersion, version);
    t.version = version;
    t.slotless = i >= 64;
    set_desc_field(i, layout::kDescState,
                   static_cast<uint64_t>(TxnState::RUNNING));
    set_desc_field(i, layout::kDescVersion, version);
    set_desc_field(i, layout::kDescLogCursor, 0);
    set_desc_field(i, layout::kDescAllocCursor, 0);
    active_threads_.insert(tid);
    return Txn(this, i);
  }
  throw CapacityError("all transaction descriptors are busy");
}

// ---- allocation front end ----

inline ObjectRef Txn::alloc(uint64_t payload_bytes) {
  require_live();
  if (payload_bytes == 0) throw UsageError("zero-byte allocation");
  auto& t = ctx();
  Region& r = *r_;

  if (r.kind() == RuntimeKind::COW) {
    // Wrapper block plus a raw payload block.
    auto wres = r.reserve_logged(t, layout::kCowHeaderBytes,
                                 layout::kSbFlagWrapperPool,
                                 layout::kCowHeaderBytes);
    auto pres = r.reserve_logged(t, payload_bytes, 0, payload_bytes);
    uint64_t w = wres.offset;
    r.m_->store_u64(w + layout::kObjSize, payload_bytes);
    r.m_->store_u64(w + layout::kObjWriters, 0);
    r.m_->store_u64(w + layout::kCowOld, pres.offset);
    r.m_->store_u64(w + layout::kCowNew, 0);
    r.m_->store_u64(w + layout::kCowOldBackup, 0);
    r.m_->store_u64(w + layout::kCowWriterId, layout::kNoWriter);
    r.m_->store_u64(w + layout::kCowWriterVersion, 0);
    t.init_ranges.emplace_back(w, layout::kCowHeaderBytes);
    return ObjectRef{w};
  }

  auto res = r.reserve_logged(t, payload_bytes + layout::kObjHeaderBytes, 0,
                              payload_bytes + layout::kObjHeaderBytes);
  r.m_->store_u64(res.offset + layout::kObjSize, payload_bytes);
  r.m_->store_u64(res.offset + layout::kObjWriters, 0);
  t.init_ranges.emplace_back(res.offset, layout::kObjHeaderBytes);
  return ObjectRef{res.offset};
}

inline void Txn::free(ObjectRef ref) {
  require_live();
  auto& t = ctx();
  Region& r = *r_;
  r.validate_ref(ref);
  if (t.freed_refs.count(ref.offset)) throw UsageError("double free");

  auto stage = [&](uint64_t block_off, uint64_t size) {
    auto loc = r.heap_.locate(block_off);
    if (!loc) throw UsageError("free of a non-block address");
    auto kind = r.heap_.stage_free(loc->first, loc->second);
    if (kind == Heap::FreeKind::INVALID)
      throw UsageError("free of an unallocated block");
    AllocRecord rec{AllocOp::FREE, loc->first, loc->second,
                    static_cast<uint32_t>(size)};
    auto ap = t.alloc_log.append(rec.encode());
    ++t.alloc_records;
    r.set_desc_field(id_, layout::kDescAllocCursor, t.alloc_records);
    for (auto& range : ap.wb) t.alloc_log_wb.push_back(range);
    t.freed.push_back({loc->first, loc->second, block_off, kind});
    if (t.eager_alloc_persist) {
      r.wb(ap.wb);
      r.wb(r.desc_range(id_).first, r.desc_range(id_).second);
      r.barrier();
    }
  };

  if (r.kind() == RuntimeKind::COW) {
    uint64_t writer = r.m_->peek_u64(ref.offset + layout::kCowWriterId);
    if (writer != layout::kNoWriter)
      throw UsageError("free of a COW object that is open for write");
    uint64_t payload = r.m_->peek_u64(ref.offset + layout::kCowOld);
    stage(ref.offset, layout::kCowHeaderBytes);
    stage(payload, r.object_size(ref));
  } else {
    stage(ref.offset, r.object_size(ref) + layout::kObjHeaderBytes);
  }
  t.freed_refs.insert(ref.offset);
}

inline void Txn::root_set(ObjectRef ref) {
  require_live();
  Region& r = *r_;
  auto& t = ctx();
  std::array<uint8_t, 8> buf;
  put_u64(buf, 0, ref.offset);
  switch (r.kind()) {
    case RuntimeKind::UNDO:
      UndoRt::write(r, t, layout::kHdrRoot, buf);
      break;
    case RuntimeKind::REDO:
      RedoRt::write(r, t, layout::kHdrRoot, 0, buf);
      break;
    case RuntimeKind::COW:
      t.pending_root = ref.offset;
      break;
  }
}

inline ObjectRef Txn::root_get() {
  require_live();
  Region& r = *r_;
  auto& t = ctx();
  switch (r.kind()) {
    case RuntimeKind::UNDO:
      return ObjectRef{r.m_->load_u64(layout::kHdrRoot)};
    case RuntimeKind::REDO: {
      auto bytes = RedoRt::read(r, t, layout::kHdrRoot, 0, 8);
      return ObjectRef{get_u64(bytes, 0)};
    }
    case RuntimeKind::COW:
      if (t.pending_root) return ObjectRef{*t.pending_root};
      return ObjectRef{r.m_->load_u64(layout::kHdrRoot)};
  }
  throw UsageError("unreachable");
}

}  // namespace pmtx
