#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sstage/bytes.hpp"
#include "sstage/core.hpp"

namespace sstage {

inline constexpr std::uint32_t kMetadataFormatVersion = 1;

/// A block written by this rank and where its bytes sit in the rank's
/// step-local data block.
struct LocalBlock {
  BlockExtent extent;
  std::uint64_t data_offset = 0;

  friend bool operator==(const LocalBlock&, const LocalBlock&) = default;
};

struct LocalVariable {
  VariableDef def;
  std::vector<LocalBlock> blocks;  // put order

  friend bool operator==(const LocalVariable&, const LocalVariable&) = default;
};

/// What one writer rank contributes to a step's metadata.
struct LocalMetadata {
  std::uint32_t writer_rank = 0;
  std::vector<LocalVariable> variables;
  Bytes dp_registration;

  friend bool operator==(const LocalMetadata&, const LocalMetadata&) = default;
};

struct WriterBlock {
  std::uint32_t writer_rank = 0;
  BlockExtent extent;
  std::uint64_t data_offset = 0;

  friend bool operator==(const WriterBlock&, const WriterBlock&) = default;
};

struct VariableBlocks {
  VariableDef def;
  std::vector<WriterBlock> blocks;  // ordered by (rank, put-order)

  friend bool operator==(const VariableBlocks&, const VariableBlocks&) = default;
};

/// The aggregated description of one step: every variable's shape, every
/// written block, and each writer rank's data-plane registration blob.
struct FullMetadata {
  StepId step;
  std::map<std::string, VariableBlocks> variables;
  std::vector<Bytes> dp_registration;  // indexed by writer rank

  const VariableBlocks* find(const std::string& name) const {
    auto it = variables.find(name);
    return it == variables.end() ? nullptr : &it->second;
  }
  std::size_t writer_count() const { return dp_registration.size(); }

  friend bool operator==(const FullMetadata&, const FullMetadata&) = default;
};

/// One contiguous byte run: `length` bytes at `source_offset` in the writer
/// rank's data block land at `dest_offset` in the reader's buffer.
struct ReadPlanEntry {
  std::uint32_t writer_rank = 0;
  std::uint64_t source_offset = 0;
  std::uint64_t length = 0;
  std::uint64_t dest_offset = 0;

  friend bool operator==(const ReadPlanEntry&, const ReadPlanEntry&) = default;
};

/// Thrown by plan_reads when part of the selection was not written by any rank.
class UnfilledSelectionError : public Error {
 public:
  UnfilledSelectionError(const std::string& what, std::vector<BlockExtent> missing)
      : Error(ErrorCode::UnfilledSelection, what), missing_(std::move(missing)) {}
  const std::vector<BlockExtent>& missing() const { return missing_; }

 private:
  std::vector<BlockExtent> missing_;
};

// Metadata encoding, version 1. All integers little-endian:
//   u32 version | u32 body length | body
// LocalMetadata body:
//   u32 writer_rank | u32 nvars | var* | u32 len + dp_registration bytes
//   var = str name | u32 element_size | str type | u32 ndims | u64 shape[ndims]
//         | u32 nblocks | (u64 start[ndims] u64 count[ndims] u64 data_offset)*
// FullMetadata body:
//   u64 step | u32 nranks | (u32 len + bytes)* | u32 nvars | var*
//   var blocks additionally carry a leading u32 writer_rank.
// str = u32 length + UTF-8 bytes.
Bytes encode_local_metadata(const LocalMetadata& m);
LocalMetadata decode_local_metadata(std::span<const std::byte> in);
Bytes encode_full_metadata(const FullMetadata& m);
FullMetadata decode_full_metadata(std::span<const std::byte> in);

/// Unions per-rank metadata for a step. `parts[i].writer_rank` must equal i.
/// Throws ShapeMismatch when ranks disagree on a variable's definition.
FullMetadata aggregate_metadata(StepId step, std::span<const LocalMetadata> parts);

/// Per-dimension interval intersection; std::nullopt when empty.
std::optional<BlockExtent> intersect_extents(const BlockExtent& a, const BlockExtent& b);

/// Row-major element offset of a global `index` inside `block`.
std::uint64_t linear_offset(const BlockExtent& block, const Dims& index);

/// Splits `selection` of `variable` into per-writer contiguous byte runs.
/// Overlapping writer blocks resolve to the block latest in (rank, put-order).
std::vector<ReadPlanEntry> plan_reads(const FullMetadata& meta, const std::string& variable,
                                      const BlockExtent& selection);

/// Copies each fetched run into `dest`; validates everything before writing.
void assemble(std::span<std::byte> dest, std::span<const ReadPlanEntry> entries,
              std::span<const std::span<const std::byte>> fetched);

}  // namespace sstage
