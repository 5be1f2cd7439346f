#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sstage/error.hpp"

namespace sstage {

/// Per-dimension element extents of a global array. The dimensionality is
/// fixed for a variable's lifetime; extents may change from step to step.
using Dims = std::vector<std::uint64_t>;

/// A hyper-rectangular block of a global array.
struct BlockExtent {
  Dims start;
  Dims count;

  std::size_t ndims() const { return start.size(); }
  friend bool operator==(const BlockExtent&, const BlockExtent&) = default;
};

struct VariableDef {
  std::string name;
  std::uint32_t element_size = 1;
  Dims shape;
  /// Carried opaquely; the transport never interprets element values.
  std::string type;

  friend bool operator==(const VariableDef&, const VariableDef&) = default;
};

/// One Put() call: a block of a variable and its row-major payload.
struct PutRecord {
  VariableDef variable;
  BlockExtent extent;
  std::vector<std::byte> payload;
};

/// Step number assigned by the writer. Discarded steps still consume a number.
struct StepId {
  std::uint64_t value = 0;

  auto operator<=>(const StepId&) const = default;
  StepId next() const { return StepId{value + 1}; }
};

using ReaderId = std::uint32_t;

enum class QueueFullPolicy { Block, Discard };
enum class StepDistribution { AllToAll, RoundRobin, OnDemand };
enum class PreloadMode { Off, Queued, DoubleBuffer };

struct EngineParams {
  std::uint32_t queue_limit = 0;  // 0 = unbounded
  QueueFullPolicy queue_full_policy = QueueFullPolicy::Block;
  std::uint32_t reserve_queue_limit = 0;
  std::uint32_t rendezvous_reader_count = 1;
  double open_timeout_secs = 60.0;
  StepDistribution step_distribution = StepDistribution::AllToAll;
  bool always_provide_latest = false;
  std::string data_transport = "socket";
  PreloadMode preload_mode = PreloadMode::Off;

  /// Applies one `Name=Value` setting using the public parameter names
  /// (QueueLimit, QueueFullPolicy, ...). Names match case-insensitively.
  void set(std::string_view name, std::string_view value);
  /// Parses a single `Name=Value` token.
  void apply(std::string_view assignment);

  static EngineParams from_pairs(const std::map<std::string, std::string>& pairs);

  friend bool operator==(const EngineParams&, const EngineParams&) = default;
};

std::string_view to_string(QueueFullPolicy p);
std::string_view to_string(StepDistribution d);
std::string_view to_string(PreloadMode m);

/// Returns std::nullopt when `e` is a valid block of an array shaped `shape`,
/// otherwise a description naming the failing dimension.
std::optional<std::string> validate_extent(const Dims& shape, const BlockExtent& e);

/// Throws Error{ExtentInvalid} with the violation description.
void require_valid_extent(const Dims& shape, const BlockExtent& e);

/// Product of `count`; throws Error{Overflow} when it does not fit in 64 bits.
std::uint64_t element_count(const Dims& count);

std::uint64_t block_byte_len(const VariableDef& v, const BlockExtent& e);

/// Row-major strides (in elements) of a block with the given counts.
Dims row_major_strides(const Dims& count);

std::string format_dims(const Dims& d);
/// Parses "256x256" or "4,6" into dims. Throws Error{ParseError}.
Dims parse_dims(std::string_view text);

}  // namespace sstage

template <>
struct std::hash<sstage::StepId> {
  std::size_t operator()(const sstage::StepId& s) const noexcept {
    return std::hash<std::uint64_t>{}(s.value);
  }
};
