#include <catch2/catch_amalgamated.hpp>

#include "pmtx/chunked_log.hpp"

using namespace pmtx;

namespace {
PersistentMedium make_medium() {
  PdomConfig c;
  c.level = Pdom::PDOM1;
  return PersistentMedium(64 * 1024, c);
}
}  // namespace

TEST_CASE("records never straddle a chunk boundary") {
  auto m = make_medium();
  ChunkedLog log(&m, 0, 4096, 1024);  // four chunks, 1008 payload each
  std::vector<uint8_t> rec(400, 0xAB);
  auto a = log.append(rec);
  auto b = log.append(rec);
  auto c = log.append(rec);  // does not fit chunk 0: sealed, moved on
  uint64_t cap = log.payload_capacity();
  CHECK(a.record_off / 1024 == 0);
  CHECK(b.record_off / 1024 == 0);
  CHECK(c.record_off / 1024 == 1);
  CHECK(c.record_off % 1024 == layout::kChunkHeaderBytes);
  CHECK(m.peek_u64(log.payload_off(0) + 800) == layout::kChunkSeal);
  CHECK(log.chunk_next(0) == log.chunk_off(1));
  CHECK(log.chunk_used(0) == 800);
  CHECK(log.chunk_used(1) == 400);
  CHECK(cap == 1024 - layout::kChunkHeaderBytes);
}

TEST_CASE("used never exceeds capacity and oversized records are refused") {
  auto m = make_medium();
  ChunkedLog log(&m, 0, 4096, 1024);
  std::vector<uint8_t> huge(log.max_record_bytes() + 8, 0);
  CHECK_THROWS_AS(log.append(huge), CapacityError);
  std::vector<uint8_t> fit(log.max_record_bytes(), 1);
  auto ap = log.append(fit);
  CHECK(log.chunk_used(0) == log.payload_capacity() - 8);
  CHECK(ap.record_off == log.payload_off(0));
}

TEST_CASE("arena exhaustion is reported") {
  auto m = make_medium();
  ChunkedLog log(&m, 0, 2048, 1024);
  std::vector<uint8_t> rec(1000, 2);
  log.append(rec);
  log.append(rec);
  CHECK_THROWS_AS(log.append(rec), CapacityError);
}

TEST_CASE("truncate scrubs consumed payload and resets headers") {
  auto m = make_medium();
  ChunkedLog log(&m, 0, 4096, 1024);
  std::vector<uint8_t> rec(600, 3);
  log.append(rec);
  log.append(rec);  // second chunk
  auto wb = log.truncate();
  CHECK(!wb.empty());
  CHECK(log.chunk_used(0) == 0);
  CHECK(log.chunk_used(1) == 0);
  auto payload = m.peek(log.payload_off(0), log.payload_capacity());
  CHECK(std::all_of(payload.begin(), payload.end(),
                    [](uint8_t b) { return b == 0; }));
  SECTION("appends restart at the head") {
    auto ap = log.append(rec);
    CHECK(ap.record_off == log.payload_off(0));
  }
}

TEST_CASE("content-driven truncation is write-free when already clean") {
  auto m = make_medium();
  ChunkedLog log(&m, 0, 4096, 1024);
  CHECK(log.truncate_all_dirty().empty());
  std::vector<uint8_t> rec(100, 9);
  log.append(rec);
  CHECK(!log.truncate_all_dirty().empty());
}

TEST_CASE("used walker visits records across chunks in order") {
  auto m = make_medium();
  ChunkedLog log(&m, 0, 4096, 1024);
  for (uint8_t i = 0; i < 5; ++i) {
    std::vector<uint8_t> rec(400, i);
    log.append(rec);
  }
  UsedWalker w(log);
  for (uint8_t i = 0; i < 5; ++i) {
    uint64_t off = w.next(400);
    REQUIRE(off != 0);
    CHECK(m.peek(off, 1)[0] == i);
    w.advance(400);
  }
  CHECK(w.next(400) == 0);
}
