#include <catch2/catch_amalgamated.hpp>

#include "pmtx/medium.hpp"

using namespace pmtx;

namespace {

PdomConfig pdom(Pdom level, uint64_t barrier_ns = 500, uint64_t load_ns = 300) {
  PdomConfig c;
  c.level = level;
  c.barrier_latency_ns = barrier_ns;
  c.load_latency_ns = load_ns;
  return c;
}

std::vector<uint8_t> bytes(std::initializer_list<uint8_t> b) { return b; }

}  // namespace

TEST_CASE("store dirties lines under PDOM-1 and leaves the persistent image") {
  PersistentMedium m(4096, pdom(Pdom::PDOM1, 100));
  m.store(0, bytes({1, 2, 3, 4, 5, 6, 7, 8}));
  CHECK(m.line_state(0) == LineState::DIRTY);
  CHECK(m.crash_image(CrashPolicy::keep())[0] == 0);
  CHECK(m.peek(0, 1)[0] == 1);
}

TEST_CASE("store persists immediately under PDOM-2") {
  PersistentMedium m(4096, pdom(Pdom::PDOM2, 0));
  m.store(0, bytes({9, 9, 9, 9, 9, 9, 9, 9}));
  CHECK(m.line_state(0) == LineState::CLEAN);
  CHECK(m.crash_image(CrashPolicy::drop())[0] == 9);
}

TEST_CASE("store spanning a line boundary dirties both lines") {
  PersistentMedium m(4096, pdom(Pdom::PDOM0));
  m.store(60, bytes({1, 2, 3, 4, 5, 6, 7, 8}));
  CHECK(m.line_state(0) == LineState::DIRTY);
  CHECK(m.line_state(1) == LineState::DIRTY);
  CHECK(m.line_state(2) == LineState::CLEAN);
}

TEST_CASE("loads observe the volatile image") {
  PersistentMedium m(4096, pdom(Pdom::PDOM1));
  m.store_u64(128, 7);
  CHECK(m.load_u64(128) == 7);
  SECTION("never-written region reads as zero") {
    auto z = m.load(512, 16);
    CHECK(std::all_of(z.begin(), z.end(), [](uint8_t b) { return b == 0; }));
  }
}

TEST_CASE("load latency accumulates per call") {
  PersistentMedium m(1 << 20, pdom(Pdom::PDOM0, 500, 300));
  for (int i = 0; i < 1000; ++i) m.load(0, 8);
  CHECK(m.cost_report().loads == 1000);
  CHECK(m.cost_report().simulated_ns == 1000 * 300);
}

TEST_CASE("writeback makes dirty lines pending; persistence waits for the barrier") {
  PersistentMedium m(4096, pdom(Pdom::PDOM1));
  m.store_u64(0, 42);
  m.writeback(0, 8);
  CHECK(m.line_state(0) == LineState::PENDING);
  CHECK(m.crash_image(CrashPolicy::drop())[0] == 0);
  m.persist_barrier();
  CHECK(m.line_state(0) == LineState::CLEAN);
  CHECK(m.crash_image(CrashPolicy::drop())[0] == 42);
}

TEST_CASE("writeback is a no-op under PDOM-2") {
  PersistentMedium m(4096, pdom(Pdom::PDOM2));
  m.store_u64(0, 42);
  m.writeback(0, 8);
  CHECK(m.line_state(0) == LineState::CLEAN);
}

TEST_CASE("writeback of a clean line leaves it clean") {
  PersistentMedium m(4096, pdom(Pdom::PDOM1));
  m.writeback(0, 64);
  CHECK(m.line_state(0) == LineState::CLEAN);
  CHECK(m.pending_lines().empty());
}

TEST_CASE("empty barrier still counts") {
  PersistentMedium m(4096, pdom(Pdom::PDOM0, 500));
  auto before = m.crash_image(CrashPolicy::keep());
  m.persist_barrier();
  CHECK(m.cost_report().barriers == 1);
  CHECK(m.cost_report().simulated_ns == 500);
  CHECK(m.crash_image(CrashPolicy::keep()) == before);
}

TEST_CASE("barrier latency scales with the configured cost") {
  PersistentMedium m(4096, pdom(Pdom::PDOM1, 100));
  for (int i = 0; i < 7; ++i) m.persist_barrier();
  CHECK(m.cost_report().simulated_ns == 700);
  SECTION("PDOM-2 barriers carry zero latency") {
    PersistentMedium z(4096, pdom(Pdom::PDOM2, 500));
    z.persist_barrier();
    CHECK(z.cost_report().barriers == 1);
    CHECK(z.cost_report().simulated_ns == 0);
  }
}

TEST_CASE("crash with nothing outstanding equals the volatile image") {
  PersistentMedium m(4096, pdom(Pdom::PDOM1));
  m.store_u64(0, 5);
  m.writeback(0, 8);
  m.persist_barrier();
  CHECK(m.crash_image(CrashPolicy::drop()) == m.peek(0, 4096));
}

TEST_CASE("drop-pending crash loses flushed-but-unfenced stores") {
  PersistentMedium m(4096, pdom(Pdom::PDOM1));
  m.store_u64(0, 5);
  m.writeback(0, 8);
  CHECK(m.crash_image(CrashPolicy::drop())[0] == 0);
  CHECK(m.crash_image(CrashPolicy::keep())[0] == 5);
}

TEST_CASE("crash enumeration yields every pending subset") {
  PersistentMedium m(4096, pdom(Pdom::PDOM1));
  m.store_u64(0, 0x11);
  m.store_u64(64, 0x22);
  m.writeback(0, 8);
  m.writeback(64, 8);
  auto images = m.crash_enumerate();
  REQUIRE(images.size() == 4);

  // Oracle: enumerate the subsets directly from the known store layout.
  for (int bit0 = 0; bit0 < 2; ++bit0) {
    for (int bit1 = 0; bit1 < 2; ++bit1) {
      std::vector<uint8_t> expect(4096, 0);
      if (bit0) expect[0] = 0x11;
      if (bit1) expect[64] = 0x22;
      CHECK(std::count(images.begin(), images.end(), expect) == 1);
    }
  }

  SECTION("every enumerated image is reproducible by a subset mask") {
    for (uint64_t mask = 0; mask < 4; ++mask)
      CHECK(images[mask] == m.crash_image(CrashPolicy::subset(mask)));
    CHECK(images[0] == m.crash_image(CrashPolicy::drop()));
    CHECK(images[3] == m.crash_image(CrashPolicy::keep()));
  }
}

TEST_CASE("enumeration beyond the pending cap is refused") {
  PersistentMedium m(1 << 14, pdom(Pdom::PDOM1));
  for (uint64_t line = 0; line < 17; ++line) {
    m.store_u64(line * 64, 1);
    m.writeback(line * 64, 8);
  }
  CHECK_THROWS_AS(m.crash_enumerate(16), CapacityError);
  CHECK(m.crash_enumerate(17).size() == size_t{1} << 17);
}

TEST_CASE("pending snapshots capture writeback-time content") {
  PersistentMedium m(4096, pdom(Pdom::PDOM1));
  m.store_u64(0, 1);
  m.writeback(0, 8);
  m.store_u64(0, 2);  // after the flush; must not leak into the snapshot
  CHECK(m.crash_image(CrashPolicy::keep())[0] == 1);
  SECTION("barrier completes the old snapshot and leaves the line dirty") {
    m.persist_barrier();
    CHECK(m.crash_image(CrashPolicy::keep())[0] == 1);
    CHECK(m.line_state(0) == LineState::DIRTY);
    CHECK(m.peek(0, 1)[0] == 2);
  }
  SECTION("re-writeback refreshes the snapshot") {
    m.writeback(0, 8);
    CHECK(m.crash_image(CrashPolicy::keep())[0] == 2);
  }
}

TEST_CASE("persistence monotonicity: clean content survives every crash image") {
  PersistentMedium m(4096, pdom(Pdom::PDOM1));
  m.store_u64(0, 7);
  m.writeback(0, 8);
  m.persist_barrier();
  m.store_u64(64, 9);
  m.writeback(64, 8);
  for (auto& img : m.crash_enumerate())
    CHECK(get_u64(img, 0) == 7);
}

TEST_CASE("content persists only after store, covering writeback, and barrier") {
  PersistentMedium m(4096, pdom(Pdom::PDOM0));
  m.store_u64(0, 3);
  CHECK(m.crash_image(CrashPolicy::keep())[0] == 0);  // no writeback yet
  m.writeback(0, 8);
  m.persist_barrier();
  CHECK(m.crash_image(CrashPolicy::drop())[0] == 3);
}

TEST_CASE("cost reports are deterministic and resettable") {
  auto run = [] {
    PersistentMedium m(4096, pdom(Pdom::PDOM0, 500, 300));
    m.store_u64(0, 1);
    m.writeback(0, 8);
    m.persist_barrier();
    m.load(0, 8);
    return m.cost_report();
  };
  auto a = run();
  auto b = run();
  CHECK(a.stores == b.stores);
  CHECK(a.writebacks == b.writebacks);
  CHECK(a.barriers == b.barriers);
  CHECK(a.loads == b.loads);
  CHECK(a.simulated_ns == b.simulated_ns);

  PersistentMedium m(4096, pdom(Pdom::PDOM0));
  CHECK(m.cost_report().stores == 0);
  CHECK(m.cost_report().simulated_ns == 0);
  m.store_u64(0, 1);
  m.reset_counters();
  CHECK(m.cost_report().stores == 0);
}

TEST_CASE("out-of-bounds accesses raise range errors") {
  PersistentMedium m(4096, pdom(Pdom::PDOM1));
  CHECK_THROWS_AS(m.store_u64(4095, 1), RangeError);
  CHECK_THROWS_AS(m.load(4090, 8), RangeError);
  CHECK_THROWS_AS(m.writeback(4096, 1), RangeError);
}

TEST_CASE("trace replay reproduces the medium state") {
  std::vector<TraceOp> trace;
  PersistentMedium m(4096, pdom(Pdom::PDOM1));
  m.set_trace(&trace);
  m.store_u64(0, 11);
  m.writeback(0, 8);
  m.persist_barrier();
  m.store_u64(64, 22);
  m.writeback(64, 8);
  m.set_trace(nullptr);

  PersistentMedium replayed(4096, pdom(Pdom::PDOM1));
  for (const auto& op : trace) replayed.apply(op);
  CHECK(replayed.crash_image(CrashPolicy::drop()) ==
        m.crash_image(CrashPolicy::drop()));
  CHECK(replayed.crash_image(CrashPolicy::keep()) ==
        m.crash_image(CrashPolicy::keep()));
  CHECK(replayed.op_count() == m.op_count());
}

TEST_CASE("image files round-trip with their sidecar") {
  PersistentMedium m(4096, pdom(Pdom::PDOM1));
  m.store_u64(8, 0xDEADBEEF);
  m.writeback(8, 8);
  m.persist_barrier();
  std::string path = "medium_image_test.bin";
  m.save_image(path, CrashPolicy::drop());
  auto img = PersistentMedium::read_image_file(path);
  CHECK(img == m.crash_image(CrashPolicy::drop()));
  auto m2 = PersistentMedium::from_image(img, pdom(Pdom::PDOM1));
  CHECK(m2.load_u64(8) == 0xDEADBEEF);
  std::remove(path.c_str());
  std::remove((path + ".meta").c_str());
}

TEST_CASE("flush-evict mode counts evictions") {
  PdomConfig cfg = pdom(Pdom::PDOM1);
  cfg.flush_mode = FlushMode::FLUSH_EVICT;
  PersistentMedium m(4096, cfg);
  m.store_u64(0, 1);
  m.writeback(0, 64);
  CHECK(m.cost_report().evictions == 1);
}
