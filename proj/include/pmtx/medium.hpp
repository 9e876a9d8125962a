#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "pmtx/bytes.hpp"
#include "pmtx/errors.hpp"

// Simulated persistent medium.
//
// The medium keeps two byte images: the volatile image (what loads see)
// and the persistent image (what survives a crash). Persistence moves at
// cache-line (64 B) granularity through the store -> writeback -> barrier
// instruction model:
//
//   store      dirties the touched lines (PDOM-0/1) or persists them
//              immediately (PDOM-2).
//   writeback  captures a snapshot of each dirty line and marks it
//              pending; the snapshot is what may reach the persistent
//              image. Later stores to a pending line do not leak into the
//              in-flight snapshot.
//   barrier    completes all pending writebacks.
//
// Crash images resolve each pending line to its old or snapshot content
// under a caller-chosen policy; dirty lines always revert.
//
// Cost model: simulated time = loads * load_latency + barriers *
// barrier_latency (zero barrier contribution under PDOM-2). Stores and
// writebacks carry no modeled latency. peek/poke-style accessors used by
// runtime bookkeeping that would be cache-resident on real hardware are
// available via peek() and are not counted as loads.

namespace pmtx {

constexpr uint64_t kCacheLine = 64;

enum class Pdom : uint8_t { PDOM0 = 0, PDOM1 = 1, PDOM2 = 2 };
enum class FlushMode : uint8_t { WRITEBACK = 0, FLUSH_EVICT = 1 };

struct PdomConfig {
  Pdom level = Pdom::PDOM0;
  uint64_t barrier_latency_ns = 500;
  uint64_t load_latency_ns = 300;
  FlushMode flush_mode = FlushMode::WRITEBACK;

  bool store_only() const { return level == Pdom::PDOM2; }
  uint64_t effective_barrier_ns() const {
    return store_only() ? 0 : barrier_latency_ns;
  }
};

struct CostReport {
  uint64_t loads = 0;
  uint64_t stores = 0;
  uint64_t writebacks = 0;
  uint64_t barriers = 0;
  uint64_t evictions = 0;
  uint64_t simulated_ns = 0;

  CostReport& operator+=(const CostReport& o) {
    loads += o.loads;
    stores += o.stores;
    writebacks += o.writebacks;
    barriers += o.barriers;
    evictions += o.evictions;
    simulated_ns += o.simulated_ns;
    return *this;
  }
  friend CostReport operator-(CostReport a, const CostReport& b) {
    a.loads -= b.loads;
    a.stores -= b.stores;
    a.writebacks -= b.writebacks;
    a.barriers -= b.barriers;
    a.evictions -= b.evictions;
    a.simulated_ns -= b.simulated_ns;
    return a;
  }
};

enum class LineState : uint8_t { CLEAN = 0, DIRTY = 1, PENDING = 2 };

struct CrashPolicy {
  enum Kind { DROP_PENDING, KEEP_PENDING, SUBSET } kind = DROP_PENDING;
  // For SUBSET: bit i selects the i-th pending line (in ascending line
  // order) to be resolved to its snapshot.
  uint64_t mask = 0;

  static CrashPolicy drop() { return {DROP_PENDING, 0}; }
  static CrashPolicy keep() { return {KEEP_PENDING, 0}; }
  static CrashPolicy subset(uint64_t mask) { return {SUBSET, mask}; }
};

// Trace of state-changing medium operations, replayable onto a fresh
// medium. Used by the crash harness to revisit every operation boundary.
struct TraceOp {
  enum Kind : uint8_t { STORE, WRITEBACK, BARRIER } kind;
  uint64_t addr = 0;
  uint64_t len = 0;
  std::vector<uint8_t> bytes;  // STORE payload
};

class PersistentMedium {
 public:
  PersistentMedium(uint64_t size_bytes, PdomConfig config)
      : config_(config),
        size_(align_up(size_bytes, kCacheLine)),
        volatile_(size_, 0),
        persistent_(size_, 0),
        state_(size_ / kCacheLine, LineState::CLEAN),
        redirtied_(size_ / kCacheLine, 0) {}

  // Builds a medium whose volatile and persistent images both equal the
  // given crash image, with every line clean. This models rebooting on a
  // surviving image.
  PersistentMedium(std::span<const uint8_t> image, PdomConfig config)
      : PersistentMedium(image.size(), config) {
    std::copy(image.begin(), image.end(), volatile_.begin());
    std::copy(image.begin(), image.end(), persistent_.begin());
  }

  static PersistentMedium from_image(std::span<const uint8_t> image,
                                     PdomConfig config) {
    return PersistentMedium(image, config);
  }

  uint64_t size_bytes() const { return size_; }
  const PdomConfig& config() const { return config_; }

  // ---- instruction model ----

  void store(uint64_t addr, std::span<const uint8_t> data) {
    std::lock_guard lk(mu_);
    if (data.empty()) return;
    check_range(addr, data.size());
    std::memcpy(volatile_.data() + addr, data.data(), data.size());
    if (config_.store_only()) {
      std::memcpy(persistent_.data() + addr, data.data(), data.size());
    } else {
      for (uint64_t line = addr / kCacheLine;
           line <= (addr + data.size() - 1) / kCacheLine; ++line) {
        if (state_[line] == LineState::PENDING)
          redirtied_[line] = 1;  // snapshot stays as captured
        else
          state_[line] = LineState::DIRTY;
      }
    }
    counters().stores += 1;
    trace_record(TraceOp{TraceOp::STORE, addr, data.size(),
                         {data.begin(), data.end()}});
  }

  void store_u64(uint64_t addr, uint64_t v) {
    std::array<uint8_t, 8> buf;
    put_u64(buf, 0, v);
    store(addr, buf);
  }

  void load_into(uint64_t addr, std::span<uint8_t> out) {
    std::lock_guard lk(mu_);
    check_range(addr, out.size());
    std::memcpy(out.data(), volatile_.data() + addr, out.size());
    auto& c = counters();
    c.loads += 1;
    c.simulated_ns += config_.load_latency_ns;
  }

  std::vector<uint8_t> load(uint64_t addr, uint64_t len) {
    std::vector<uint8_t> out(len);
    load_into(addr, out);
    return out;
  }

  uint64_t load_u64(uint64_t addr) {
    std::array<uint8_t, 8> buf;
    load_into(addr, buf);
    return get_u64(buf, 0);
  }

  // Cost-free volatile reads for runtime bookkeeping (descriptor fields,
  // freshly written log records, allocator metadata). Not counted as
  // persistent-memory loads.
  void peek_into(uint64_t addr, std::span<uint8_t> out) const {
    std::lock_guard lk(mu_);
    check_range(addr, out.size());
    std::memcpy(out.data(), volatile_.data() + addr, out.size());
  }

  std::vector<uint8_t> peek(uint64_t addr, uint64_t len) const {
    std::vector<uint8_t> out(len);
    peek_into(addr, out);
    return out;
  }

  uint64_t peek_u64(uint64_t addr) const {
    std::array<uint8_t, 8> buf;
    peek_into(addr, buf);
    return get_u64(buf, 0);
  }

  // Atomic read-modify-writes on an 8-byte word. The medium guard is
  // recursive, so the read and the store commit as one step; counted as
  // stores.
  uint64_t fetch_or64(uint64_t addr, uint64_t bits) {
    std::lock_guard lk(mu_);
    uint64_t old = peek_u64(addr);
    store_u64(addr, old | bits);
    return old;
  }

  uint64_t fetch_and64(uint64_t addr, uint64_t bits) {
    std::lock_guard lk(mu_);
    uint64_t old = peek_u64(addr);
    store_u64(addr, old & bits);
    return old;
  }

  bool cas64(uint64_t addr, uint64_t expected, uint64_t desired) {
    std::lock_guard lk(mu_);
    if (peek_u64(addr) != expected) return false;
    store_u64(addr, desired);
    return true;
  }

  void writeback(uint64_t addr, uint64_t len) {
    std::lock_guard lk(mu_);
    if (len == 0) return;
    check_range(addr, len);
    auto& c = counters();
    c.writebacks += 1;
    trace_record(TraceOp{TraceOp::WRITEBACK, addr, len, {}});
    if (config_.store_only()) return;
    for (uint64_t line = addr / kCacheLine; line <= (addr + len - 1) / kCacheLine;
         ++line) {
      if (config_.flush_mode == FlushMode::FLUSH_EVICT) c.evictions += 1;
      if (state_[line] == LineState::DIRTY ||
          (state_[line] == LineState::PENDING && redirtied_[line])) {
        state_[line] = LineState::PENDING;
        redirtied_[line] = 0;
        auto& snap = pending_[line];
        std::memcpy(snap.data(), volatile_.data() + line * kCacheLine,
                    kCacheLine);
      }
    }
  }

  void persist_barrier() {
    std::lock_guard lk(mu_);
    auto& c = counters();
    c.barriers += 1;
    c.simulated_ns += config_.effective_barrier_ns();
    trace_record(TraceOp{TraceOp::BARRIER, 0, 0, {}});
    for (auto& [line, snap] : pending_) {
      std::memcpy(persistent_.data() + line * kCacheLine, snap.data(),
                  kCacheLine);
      state_[line] = redirtied_[line] ? LineState::DIRTY : LineState::CLEAN;
      redirtied_[line] = 0;
    }
    pending_.clear();
  }

  // ---- crash semantics ----

  std::vector<uint64_t> pending_lines() const {
    std::lock_guard lk(mu_);
    return pending_lines_locked();
  }

  LineState line_state(uint64_t line) const {
    std::lock_guard lk(mu_);
    return state_.at(line);
  }

  // Persistent image with pending lines resolved per policy. DIRTY lines
  // always hold their pre-store persistent content.
  std::vector<uint8_t> crash_image(CrashPolicy policy) const {
    std::lock_guard lk(mu_);
    std::vector<uint8_t> img = persistent_;
    if (policy.kind == CrashPolicy::DROP_PENDING) return img;
    auto lines = pending_lines_locked();
    for (size_t i = 0; i < lines.size(); ++i) {
      bool apply = policy.kind == CrashPolicy::KEEP_PENDING ||
                   (policy.mask >> i) & 1;
      if (!apply) continue;
      const auto& snap = pending_.at(lines[i]);
      std::memcpy(img.data() + lines[i] * kCacheLine, snap.data(), kCacheLine);
    }
    return img;
  }

  // All 2^k crash images over k pending lines, in mask order (mask 0 ==
  // DROP_PENDING, mask 2^k-1 == KEEP_PENDING).
  std::vector<std::vector<uint8_t>> crash_enumerate(
      uint64_t pending_cap = 16) const {
    uint64_t k;
    {
      std::lock_guard lk(mu_);
      k = pending_lines_locked().size();
    }
    if (k > pending_cap)
      throw CapacityError("crash_enumerate: " + std::to_string(k) +
                          " pending lines exceeds cap " +
                          std::to_string(pending_cap));
    std::vector<std::vector<uint8_t>> images;
    images.reserve(size_t{1} << k);
    for (uint64_t mask = 0; mask < (uint64_t{1} << k); ++mask)
      images.push_back(crash_image(CrashPolicy::subset(mask)));
    return images;
  }

  // ---- cost accounting ----

  CostReport cost_report() const {
    std::lock_guard lk(mu_);
    CostReport total;
    for (const auto& [tid, rep] : per_thread_) total += rep;
    return total;
  }

  CostReport thread_report() const {
    std::lock_guard lk(mu_);
    auto it = per_thread_.find(std::this_thread::get_id());
    return it == per_thread_.end() ? CostReport{} : it->second;
  }

  void reset_counters() {
    std::lock_guard lk(mu_);
    per_thread_.clear();
  }

  // Count of state-changing operations (stores, writebacks, barriers)
  // applied so far. Boundaries between these are the crash points.
  uint64_t op_count() const {
    std::lock_guard lk(mu_);
    return op_count_;
  }

  // ---- tracing / replay ----

  void set_trace(std::vector<TraceOp>* sink) {
    std::lock_guard lk(mu_);
    trace_ = sink;
  }

  void apply(const TraceOp& op) {
    switch (op.kind) {
      case TraceOp::STORE:
        store(op.addr, op.bytes);
        break;
      case TraceOp::WRITEBACK:
        writeback(op.addr, op.len);
        break;
      case TraceOp::BARRIER:
        persist_barrier();
        break;
    }
  }

  // ---- image files ----
  //
  // Raw persistent bytes in <path>, sidecar metadata in <path>.meta:
  // magic "SIMPM\0", version u16, line size u16, size u64, little-endian.

  static constexpr uint16_t kImageFormatVersion = 1;

  void save_image(const std::string& path, CrashPolicy policy) const {
    std::vector<uint8_t> img = crash_image(policy);
    write_image_file(path, img);
  }

  static void write_image_file(const std::string& path,
                               std::span<const uint8_t> image) {
    std::ofstream raw(path, std::ios::binary | std::ios::trunc);
    if (!raw) throw FormatError("cannot open " + path);
    raw.write(reinterpret_cast<const char*>(image.data()),
              static_cast<std::streamsize>(image.size()));
    std::array<uint8_t, 18> meta{};
    std::memcpy(meta.data(), "SIMPM\0", 6);
    put_u16(meta, 6, kImageFormatVersion);
    put_u16(meta, 8, static_cast<uint16_t>(kCacheLine));
    put_u64(meta, 10, image.size());
    std::ofstream side(path + ".meta", std::ios::binary | std::ios::trunc);
    if (!side) throw FormatError("cannot open " + path + ".meta");
    side.write(reinterpret_cast<const char*>(meta.data()), meta.size());
  }

  static std::vector<uint8_t> read_image_file(const std::string& path) {
    std::ifstream side(path + ".meta", std::ios::binary);
    if (!side) throw FormatError("missing sidecar " + path + ".meta");
    std::array<uint8_t, 18> meta{};
    side.read(reinterpret_cast<char*>(meta.data()), meta.size());
    if (side.gcount() != 18 || std::memcmp(meta.data(), "SIMPM\0", 6) != 0)
      throw FormatError("bad sidecar magic in " + path + ".meta");
    if (get_u16(meta, 6) != kImageFormatVersion)
      throw FormatError("unsupported image version");
    if (get_u16(meta, 8) != kCacheLine)
      throw FormatError("unsupported line size");
    uint64_t size = get_u64(meta, 10);
    std::ifstream raw(path, std::ios::binary);
    if (!raw) throw FormatError("cannot open " + path);
    std::vector<uint8_t> img(size);
    raw.read(reinterpret_cast<char*>(img.data()),
             static_cast<std::streamsize>(size));
    if (static_cast<uint64_t>(raw.gcount()) != size)
      throw FormatError("short image file " + path);
    return img;
  }

 private:
  void check_range(uint64_t addr, uint64_t len) const {
    if (addr > size_ || len > size_ - addr)
      throw RangeError("medium access [" + std::to_string(addr) + ", +" +
                       std::to_string(len) + ") exceeds size " +
                       std::to_string(size_));
  }

  std::vector<uint64_t> pending_lines_locked() const {
    std::vector<uint64_t> lines;
    lines.reserve(pending_.size());
    for (const auto& [line, snap] : pending_) lines.push_back(line);
    std::sort(lines.begin(), lines.end());
    return lines;
  }

  CostReport& counters() {
    return per_thread_[std::this_thread::get_id()];
  }

  void trace_record(TraceOp op) {
    ++op_count_;
    if (trace_) trace_->push_back(std::move(op));
  }

  PdomConfig config_;
  uint64_t size_;
  std::vector<uint8_t> volatile_;
  std::vector<uint8_t> persistent_;
  std::vector<LineState> state_;
  std::vector<uint8_t> redirtied_;
  std::unordered_map<uint64_t, std::array<uint8_t, kCacheLine>> pending_;
  std::unordered_map<std::thread::id, CostReport> per_thread_;
  uint64_t op_count_ = 0;
  std::vector<TraceOp>* trace_ = nullptr;
  mutable std::recursive_mutex mu_;
};

}  // namespace pmtx
