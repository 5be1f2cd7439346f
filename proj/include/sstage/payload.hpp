#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sstage/bytes.hpp"
#include "sstage/core.hpp"

namespace sstage {

/// Element size used by generated payloads.
inline constexpr std::uint32_t kPayloadElementSize = 8;

/// Value of one element, a pure function of its arguments so that separate
/// processes agree on every byte without sharing state.
std::uint64_t payload_element(std::uint64_t seed, StepId step, std::string_view variable,
                              std::uint64_t global_index);

/// Row-major bytes of `extent` (little-endian u64 elements).
Bytes payload_block(std::uint64_t seed, StepId step, std::string_view variable, const Dims& shape,
                    const BlockExtent& extent);

/// Float64 variable definition matching generated payloads.
VariableDef payload_variable(std::string name, Dims shape);

struct Decomposition {
  enum class Kind { Striped, Blocked, Random } kind = Kind::Blocked;
  std::uint64_t seed = 0;

  /// "striped", "blocked" or "random:<seed>". Throws ParseError.
  static Decomposition parse(std::string_view text);
  std::string to_string() const;
};

/// Blocks assigned to each of `nranks` ranks. Together they tile `shape`
/// exactly; a rank may get no block when the array is too small to split.
///   striped: contiguous slabs along dimension 0
///   blocked: a near-square process grid over all dimensions
///   random:  seeded recursive bisection into nranks pieces
std::vector<std::vector<BlockExtent>> decompose(const Dims& shape, int nranks, const Decomposition& d);

/// FNV-1a 64 of `data`; used for per-read checksums.
std::uint64_t checksum(std::span<const std::byte> data);

}  // namespace sstage
