#pragma once

// Failure-atomic transactions over a simulated persistent medium: three
// runtimes (undo logging, redo logging, copy-on-write) sharing a region
// layout, a lazy-persist allocator, and deterministic persist-barrier
// cost accounting.

#include "pmtx/medium.hpp"
#include "pmtx/layout.hpp"
#include "pmtx/chunked_log.hpp"
#include "pmtx/alloc.hpp"
#include "pmtx/region.hpp"
#include "pmtx/undo.hpp"
#include "pmtx/redo.hpp"
#include "pmtx/cow.hpp"
