#pragma once

#include <stdexcept>
#include <string>

namespace pmtx {

// Thrown when an address or length falls outside the medium, a region,
// or an object payload.
class RangeError : public std::out_of_range {
 public:
  explicit RangeError(const std::string& what) : std::out_of_range(what) {}
};

// Thrown when a caller violates the API contract (write outside a
// transaction, nested begin, double free, ...).
class UsageError : public std::logic_error {
 public:
  explicit UsageError(const std::string& what) : std::logic_error(what) {}
};

// Thrown when an on-medium image is not a valid region (bad magic,
// unknown format version, mismatched runtime kind, torn header).
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

// Thrown when a fixed resource is exhausted (descriptor table, log
// arena, heap space, enumeration cap).
class CapacityError : public std::runtime_error {
 public:
  explicit CapacityError(const std::string& what) : std::runtime_error(what) {}
};

// Thrown by cow_open(WRITE) when another live transaction is the
// registered writer of the object.
class BusyError : public std::runtime_error {
 public:
  explicit BusyError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace pmtx
