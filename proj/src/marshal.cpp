#include "sstage/marshal.hpp"

#include <algorithm>

namespace sstage {

namespace {

void write_def(ByteWriter& w, const VariableDef& def) {
  w.str(def.name);
  w.u32(def.element_size);
  w.str(def.type);
  w.u32(static_cast<std::uint32_t>(def.shape.size()));
  for (auto d : def.shape) w.u64(d);
}

VariableDef read_def(ByteReader& r) {
  VariableDef def;
  def.name = r.str();
  def.element_size = r.u32();
  def.type = r.str();
  const auto nd = r.count(8);
  if (nd == 0) throw Error(ErrorCode::DecodeError, "variable '" + def.name + "' has no dims");
  if (def.element_size == 0) throw Error(ErrorCode::DecodeError, "zero element size");
  def.shape.resize(nd);
  for (auto& d : def.shape) d = r.u64();
  return def;
}

void write_extent(ByteWriter& w, const BlockExtent& e) {
  for (auto s : e.start) w.u64(s);
  for (auto c : e.count) w.u64(c);
}

BlockExtent read_extent(ByteReader& r, const VariableDef& def) {
  BlockExtent e;
  e.start.resize(def.shape.size());
  e.count.resize(def.shape.size());
  for (auto& s : e.start) s = r.u64();
  for (auto& c : e.count) c = r.u64();
  if (auto why = validate_extent(def.shape, e)) {
    throw Error(ErrorCode::DecodeError, "variable '" + def.name + "': " + *why);
  }
  return e;
}

Bytes wrap_body(const Bytes& body) {
  Bytes out;
  out.reserve(body.size() + 8);
  ByteWriter w(out);
  w.u32(kMetadataFormatVersion);
  w.u32(static_cast<std::uint32_t>(body.size()));
  w.raw(body);
  return out;
}

std::span<const std::byte> unwrap_body(std::span<const std::byte> in, const char* what) {
  ByteReader r(in);
  const auto version = r.u32();
  if (version != kMetadataFormatVersion) {
    throw Error(ErrorCode::DecodeError,
                std::string(what) + ": unsupported format version " + std::to_string(version));
  }
  const auto len = r.u32();
  auto body = r.raw(len);
  r.expect_done(what);
  return body;
}

}  // namespace

Bytes encode_local_metadata(const LocalMetadata& m) {
  Bytes body;
  ByteWriter w(body);
  w.u32(m.writer_rank);
  w.u32(static_cast<std::uint32_t>(m.variables.size()));
  for (const auto& v : m.variables) {
    write_def(w, v.def);
    w.u32(static_cast<std::uint32_t>(v.blocks.size()));
    for (const auto& b : v.blocks) {
      write_extent(w, b.extent);
      w.u64(b.data_offset);
    }
  }
  w.blob(m.dp_registration);
  return wrap_body(body);
}

LocalMetadata decode_local_metadata(std::span<const std::byte> in) {
  ByteReader r(unwrap_body(in, "local metadata"));
  LocalMetadata m;
  m.writer_rank = r.u32();
  const auto nvars = r.count(16);
  m.variables.resize(nvars);
  for (auto& v : m.variables) {
    v.def = read_def(r);
    const auto nblocks = r.count(8 + 16 * v.def.shape.size());
    v.blocks.resize(nblocks);
    for (auto& b : v.blocks) {
      b.extent = read_extent(r, v.def);
      b.data_offset = r.u64();
    }
  }
  m.dp_registration = r.blob();
  r.expect_done("local metadata");
  return m;
}

Bytes encode_full_metadata(const FullMetadata& m) {
  Bytes body;
  ByteWriter w(body);
  w.u64(m.step.value);
  w.u32(static_cast<std::uint32_t>(m.dp_registration.size()));
  for (const auto& reg : m.dp_registration) w.blob(reg);
  w.u32(static_cast<std::uint32_t>(m.variables.size()));
  for (const auto& [name, v] : m.variables) {
    write_def(w, v.def);
    w.u32(static_cast<std::uint32_t>(v.blocks.size()));
    for (const auto& b : v.blocks) {
      w.u32(b.writer_rank);
      write_extent(w, b.extent);
      w.u64(b.data_offset);
    }
  }
  return wrap_body(body);
}

FullMetadata decode_full_metadata(std::span<const std::byte> in) {
  ByteReader r(unwrap_body(in, "full metadata"));
  FullMetadata m;
  m.step = StepId{r.u64()};
  const auto nranks = r.count(4);
  m.dp_registration.resize(nranks);
  for (auto& reg : m.dp_registration) reg = r.blob();
  const auto nvars = r.count(16);
  for (std::uint32_t i = 0; i < nvars; ++i) {
    VariableBlocks v;
    v.def = read_def(r);
    const auto nblocks = r.count(12 + 16 * v.def.shape.size());
    v.blocks.resize(nblocks);
    for (auto& b : v.blocks) {
      b.writer_rank = r.u32();
      if (b.writer_rank >= nranks) {
        throw Error(ErrorCode::DecodeError, "block names writer rank " +
                                                std::to_string(b.writer_rank) + " of " +
                                                std::to_string(nranks));
      }
      b.extent = read_extent(r, v.def);
      b.data_offset = r.u64();
    }
    auto name = v.def.name;
    if (!m.variables.emplace(name, std::move(v)).second) {
      throw Error(ErrorCode::DecodeError, "duplicate variable '" + name + "'");
    }
  }
  r.expect_done("full metadata");
  return m;
}

FullMetadata aggregate_metadata(StepId step, std::span<const LocalMetadata> parts) {
  FullMetadata full;
  full.step = step;
  full.dp_registration.reserve(parts.size());
  for (std::size_t rank = 0; rank < parts.size(); ++rank) {
    const auto& part = parts[rank];
    if (part.writer_rank != rank) {
      throw Error(ErrorCode::ProtocolError, "metadata part " + std::to_string(rank) +
                                                " claims rank " +
                                                std::to_string(part.writer_rank));
    }
    full.dp_registration.push_back(part.dp_registration);
    for (const auto& v : part.variables) {
      auto [it, inserted] = full.variables.try_emplace(v.def.name, VariableBlocks{v.def, {}});
      if (!inserted && !(it->second.def == v.def)) {
        throw Error(ErrorCode::ShapeMismatch,
                    "variable '" + v.def.name + "': rank " + std::to_string(rank) +
                        " declares " + format_dims(v.def.shape) + " but an earlier rank declared " +
                        format_dims(it->second.def.shape));
      }
      for (const auto& b : v.blocks) {
        it->second.blocks.push_back(WriterBlock{static_cast<std::uint32_t>(rank), b.extent,
                                                b.data_offset});
      }
    }
  }
  return full;
}

std::optional<BlockExtent> intersect_extents(const BlockExtent& a, const BlockExtent& b) {
  if (a.ndims() != b.ndims() || a.count.size() != a.ndims() || b.count.size() != b.ndims()) {
    throw Error(ErrorCode::DimMismatch, "intersecting " + std::to_string(a.ndims()) + "-d and " +
                                            std::to_string(b.ndims()) + "-d extents");
  }
  BlockExtent out;
  out.start.resize(a.ndims());
  out.count.resize(a.ndims());
  for (std::size_t d = 0; d < a.ndims(); ++d) {
    const auto lo = std::max(a.start[d], b.start[d]);
    const auto hi = std::min(a.start[d] + a.count[d], b.start[d] + b.count[d]);
    if (hi <= lo) return std::nullopt;
    out.start[d] = lo;
    out.count[d] = hi - lo;
  }
  return out;
}

std::uint64_t linear_offset(const BlockExtent& block, const Dims& index) {
  if (index.size() != block.ndims()) {
    throw Error(ErrorCode::OutOfBlock, "index has " + std::to_string(index.size()) +
                                           " dims, block has " + std::to_string(block.ndims()));
  }
  std::uint64_t off = 0;
  for (std::size_t d = 0; d < index.size(); ++d) {
    if (index[d] < block.start[d] || index[d] - block.start[d] >= block.count[d]) {
      throw Error(ErrorCode::OutOfBlock, "index " + format_dims(index) + " outside block start " +
                                             format_dims(block.start) + " count " +
                                             format_dims(block.count));
    }
    off = off * block.count[d] + (index[d] - block.start[d]);
  }
  return off;
}

namespace {

struct Segment {
  std::uint64_t lo, hi;  // [lo, hi) along the last dimension
  std::size_t owner;     // index into the candidate list
};

// Later paints override earlier ones. Segments stay sorted and disjoint.
void paint(std::vector<Segment>& segs, Segment s) {
  std::vector<Segment> out;
  out.reserve(segs.size() + 2);
  for (const auto& old : segs) {
    if (old.hi <= s.lo || old.lo >= s.hi) {
      out.push_back(old);
      continue;
    }
    if (old.lo < s.lo) out.push_back({old.lo, s.lo, old.owner});
    if (old.hi > s.hi) out.push_back({s.hi, old.hi, old.owner});
  }
  out.push_back(s);
  std::sort(out.begin(), out.end(), [](const Segment& a, const Segment& b) { return a.lo < b.lo; });
  segs = std::move(out);
}

}  // namespace

std::vector<ReadPlanEntry> plan_reads(const FullMetadata& meta, const std::string& variable,
                                      const BlockExtent& selection) {
  const auto* var = meta.find(variable);
  if (!var) throw Error(ErrorCode::UnknownVariable, "'" + variable + "' in step " +
                                                        std::to_string(meta.step.value));
  require_valid_extent(var->def.shape, selection);
  const auto es = var->def.element_size;
  const auto nd = selection.ndims();
  const auto last = nd - 1;

  struct Candidate {
    const WriterBlock* block;
    BlockExtent overlap;
  };
  std::vector<Candidate> cands;
  for (const auto& b : var->blocks) {
    if (auto ov = intersect_extents(b.extent, selection)) cands.push_back({&b, std::move(*ov)});
  }

  std::vector<ReadPlanEntry> plan;
  std::vector<BlockExtent> missing;
  Dims row(nd, 0);  // global coordinates; the last entry is filled per segment
  for (std::size_t d = 0; d < nd; ++d) row[d] = selection.start[d];
  const auto sel_lo = selection.start[last];
  const auto sel_hi = sel_lo + selection.count[last];

  std::vector<Segment> segs;
  while (true) {
    segs.clear();
    for (std::size_t k = 0; k < cands.size(); ++k) {
      const auto& ov = cands[k].overlap;
      bool covers_row = true;
      for (std::size_t d = 0; d < last && covers_row; ++d) {
        covers_row = row[d] >= ov.start[d] && row[d] < ov.start[d] + ov.count[d];
      }
      if (covers_row) paint(segs, {ov.start[last], ov.start[last] + ov.count[last], k});
    }

    auto note_gap = [&](std::uint64_t lo, std::uint64_t hi) {
      BlockExtent gap;
      gap.start = row;
      gap.count.assign(nd, 1);
      gap.start[last] = lo;
      gap.count[last] = hi - lo;
      missing.push_back(std::move(gap));
    };
    std::uint64_t cursor = sel_lo;
    for (const auto& s : segs) {
      if (s.lo > cursor) note_gap(cursor, s.lo);
      const auto* blk = cands[s.owner].block;
      Dims at = row;
      at[last] = s.lo;
      ReadPlanEntry e{blk->writer_rank, blk->data_offset + linear_offset(blk->extent, at) * es,
                      (s.hi - s.lo) * es, linear_offset(selection, at) * es};
      if (!plan.empty()) {
        auto& prev = plan.back();
        if (prev.writer_rank == e.writer_rank &&
            prev.source_offset + prev.length == e.source_offset &&
            prev.dest_offset + prev.length == e.dest_offset) {
          prev.length += e.length;
          e.length = 0;
        }
      }
      if (e.length) plan.push_back(e);
      cursor = s.hi;
    }
    if (cursor < sel_hi) note_gap(cursor, sel_hi);

    // Advance the odometer over all dimensions but the last.
    std::size_t d = last;
    while (d > 0) {
      --d;
      if (++row[d] < selection.start[d] + selection.count[d]) break;
      row[d] = selection.start[d];
      if (d == 0) {
        d = nd;  // wrapped: done
        break;
      }
    }
    if (d == nd || last == 0) break;
  }

  if (!missing.empty()) {
    std::string msg = "variable '" + variable + "': " + std::to_string(missing.size()) +
                      " unwritten run(s), first at start " + format_dims(missing.front().start) +
                      " count " + format_dims(missing.front().count);
    throw UnfilledSelectionError(msg, std::move(missing));
  }
  return plan;
}

void assemble(std::span<std::byte> dest, std::span<const ReadPlanEntry> entries,
              std::span<const std::span<const std::byte>> fetched) {
  if (fetched.size() != entries.size()) {
    throw Error(ErrorCode::LengthMismatch, std::to_string(entries.size()) + " entries but " +
                                               std::to_string(fetched.size()) + " buffers");
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    if (fetched[i].size() != e.length) {
      throw Error(ErrorCode::LengthMismatch, "entry " + std::to_string(i) + " expects " +
                                                 std::to_string(e.length) + " bytes, got " +
                                                 std::to_string(fetched[i].size()));
    }
    if (e.dest_offset > dest.size() || e.length > dest.size() - e.dest_offset) {
      throw Error(ErrorCode::LengthMismatch, "entry " + std::to_string(i) +
                                                 " overruns destination of " +
                                                 std::to_string(dest.size()) + " bytes");
    }
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    std::copy(fetched[i].begin(), fetched[i].end(), dest.begin() + entries[i].dest_offset);
  }
}

}  // namespace sstage
