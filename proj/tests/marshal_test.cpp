#include "sstage/marshal.hpp"

#include <algorithm>
#include <functional>
#include <random>

#include <gtest/gtest.h>

namespace sstage {
namespace {

void for_each_index(const BlockExtent& e, const std::function<void(const Dims&)>& fn) {
  Dims idx(e.ndims());
  std::function<void(std::size_t)> rec = [&](std::size_t d) {
    if (d == e.ndims()) {
      fn(idx);
      return;
    }
    for (std::uint64_t i = 0; i < e.count[d]; ++i) {
      idx[d] = e.start[d] + i;
      rec(d + 1);
    }
  };
  rec(0);
}

bool contains(const BlockExtent& b, const Dims& idx) {
  for (std::size_t d = 0; d < idx.size(); ++d) {
    if (idx[d] < b.start[d] || idx[d] >= b.start[d] + b.count[d]) return false;
  }
  return true;
}

// Position of `idx` in the nested-loop visiting order of `b`.
std::uint64_t enumeration_position(const BlockExtent& b, const Dims& idx) {
  std::uint64_t pos = 0;
  std::uint64_t found = ~0ull;
  for_each_index(b, [&](const Dims& i) {
    if (i == idx) found = pos;
    ++pos;
  });
  return found;
}

// A writer-side world: per-rank data blocks filled with a recognizable pattern.
struct World {
  VariableDef def;
  std::vector<LocalMetadata> parts;
  std::vector<Bytes> data;  // per rank

  FullMetadata meta() const { return aggregate_metadata(StepId{0}, parts); }
};

std::byte pattern_byte(std::uint32_t rank, std::uint64_t off) {
  return static_cast<std::byte>((rank * 131 + off * 7 + 1) & 0xFF);
}

World make_world(const VariableDef& def, const std::vector<std::vector<BlockExtent>>& per_rank) {
  World w;
  w.def = def;
  for (std::uint32_t r = 0; r < per_rank.size(); ++r) {
    LocalMetadata lm;
    lm.writer_rank = r;
    Bytes block_data;
    LocalVariable lv{def, {}};
    for (const auto& e : per_rank[r]) {
      lv.blocks.push_back({e, block_data.size()});
      const auto n = block_byte_len(def, e);
      for (std::uint64_t i = 0; i < n; ++i) block_data.push_back(pattern_byte(r, block_data.size()));
    }
    if (!lv.blocks.empty()) lm.variables.push_back(lv);
    lm.dp_registration = to_bytes("rank" + std::to_string(r));
    w.parts.push_back(lm);
    w.data.push_back(block_data);
  }
  return w;
}

// Element-by-element gather: for every selected index, copy from the last
// block in (rank, put-order) that contains it.
std::optional<Bytes> brute_force_gather(const World& w, const BlockExtent& sel) {
  const auto es = w.def.element_size;
  Bytes out;
  bool ok = true;
  for_each_index(sel, [&](const Dims& idx) {
    const std::byte* src = nullptr;
    for (std::uint32_t r = 0; r < w.parts.size(); ++r) {
      for (const auto& v : w.parts[r].variables) {
        for (const auto& b : v.blocks) {
          if (contains(b.extent, idx)) {
            src = w.data[r].data() + b.data_offset + enumeration_position(b.extent, idx) * es;
          }
        }
      }
    }
    if (!src) {
      ok = false;
      return;
    }
    out.insert(out.end(), src, src + es);
  });
  if (!ok) return std::nullopt;
  return out;
}

Bytes fetch_and_assemble(const World& w, const std::vector<ReadPlanEntry>& plan,
                         std::uint64_t dest_len) {
  std::vector<std::span<const std::byte>> fetched;
  for (const auto& e : plan) {
    fetched.emplace_back(w.data[e.writer_rank].data() + e.source_offset, e.length);
  }
  Bytes dest(dest_len, std::byte{0xEE});
  assemble(dest, plan, fetched);
  return dest;
}

const VariableDef kDef46{"T", 8, {4, 6}, "double"};

World two_rank_world() {
  return make_world(kDef46, {{{{0, 0}, {2, 6}}}, {{{2, 0}, {2, 6}}}});
}

TEST(LinearOffset, Examples) {
  EXPECT_EQ(linear_offset({{2, 0}, {2, 6}}, {2, 2}), 2u);
  EXPECT_EQ(linear_offset({{0, 0}, {4, 6}}, {1, 2}), 8u);
  EXPECT_THROW(linear_offset({{0, 0}, {4, 6}}, {4, 0}), Error);
}

TEST(LinearOffset, MatchesEnumeration) {
  std::mt19937 rng(3);
  for (int t = 0; t < 200; ++t) {
    const auto nd = std::uniform_int_distribution<std::size_t>(1, 3)(rng);
    BlockExtent b{Dims(nd), Dims(nd)};
    Dims idx(nd);
    for (std::size_t d = 0; d < nd; ++d) {
      b.start[d] = std::uniform_int_distribution<std::uint64_t>(0, 5)(rng);
      b.count[d] = std::uniform_int_distribution<std::uint64_t>(1, 4)(rng);
      idx[d] = b.start[d] + std::uniform_int_distribution<std::uint64_t>(0, b.count[d] - 1)(rng);
    }
    EXPECT_EQ(linear_offset(b, idx), enumeration_position(b, idx));
  }
}

TEST(IntersectExtents, Basics) {
  auto i = intersect_extents({{0, 0}, {2, 6}}, {{1, 2}, {2, 3}});
  ASSERT_TRUE(i);
  EXPECT_EQ(i->start, (Dims{1, 2}));
  EXPECT_EQ(i->count, (Dims{1, 3}));
  EXPECT_FALSE(intersect_extents({{0, 0}, {2, 6}}, {{2, 0}, {2, 6}}));
  EXPECT_THROW(intersect_extents({{0}, {2}}, {{0, 0}, {2, 2}}), Error);
}

TEST(PlanReads, TwoRankExample) {
  const auto w = two_rank_world();
  const BlockExtent sel{{1, 2}, {2, 3}};
  const auto plan = plan_reads(w.meta(), "T", sel);
  const std::vector<ReadPlanEntry> expected{{0, 64, 24, 0}, {1, 16, 24, 24}};
  EXPECT_EQ(plan, expected);

  // Element-wise oracle agrees with the assembled bytes.
  const auto oracle = brute_force_gather(w, sel);
  ASSERT_TRUE(oracle);
  EXPECT_EQ(fetch_and_assemble(w, plan, 48), *oracle);
}

TEST(PlanReads, WholeBlockIsSingleEntry) {
  const auto w = two_rank_world();
  const auto plan = plan_reads(w.meta(), "T", {{2, 0}, {2, 6}});
  ASSERT_EQ(plan.size(), 1u);
  EXPECT_EQ(plan[0], (ReadPlanEntry{1, 0, 96, 0}));
}

TEST(PlanReads, UnwrittenRegion) {
  const auto w = make_world(kDef46, {{{{0, 0}, {2, 6}}}});
  try {
    plan_reads(w.meta(), "T", {{1, 0}, {2, 2}});
    FAIL() << "expected UnfilledSelection";
  } catch (const UnfilledSelectionError& e) {
    EXPECT_EQ(e.code(), ErrorCode::UnfilledSelection);
    ASSERT_FALSE(e.missing().empty());
    for (const auto& m : e.missing()) {
      for_each_index(m, [&](const Dims& idx) { EXPECT_GE(idx[0], 2u); });
    }
  }
}

TEST(PlanReads, UnknownVariableAndBadSelection) {
  const auto w = two_rank_world();
  EXPECT_THROW(plan_reads(w.meta(), "nope", {{0, 0}, {1, 1}}), Error);
  EXPECT_THROW(plan_reads(w.meta(), "T", {{3, 0}, {2, 6}}), Error);
}

TEST(PlanReads, OverlapLastWriterWins) {
  // rank 0 writes everything twice (second put shifted), rank 1 overwrites a corner.
  const auto w = make_world(kDef46, {{{{0, 0}, {4, 6}}, {{1, 1}, {2, 2}}}, {{{0, 4}, {2, 2}}}});
  const BlockExtent sel{{0, 0}, {4, 6}};
  const auto plan = plan_reads(w.meta(), "T", sel);
  const auto oracle = brute_force_gather(w, sel);
  ASSERT_TRUE(oracle);
  EXPECT_EQ(fetch_and_assemble(w, plan, 4 * 6 * 8), *oracle);
}

// Random non-overlapping tilings: recursive bisection of the array.
void bisect(std::mt19937& rng, const BlockExtent& e, int depth, std::vector<BlockExtent>& out) {
  std::vector<std::size_t> splittable;
  for (std::size_t d = 0; d < e.ndims(); ++d) {
    if (e.count[d] > 1) splittable.push_back(d);
  }
  if (depth == 0 || splittable.empty() || rng() % 4 == 0) {
    out.push_back(e);
    return;
  }
  const auto d = splittable[rng() % splittable.size()];
  const auto cut = std::uniform_int_distribution<std::uint64_t>(1, e.count[d] - 1)(rng);
  auto lo = e, hi = e;
  lo.count[d] = cut;
  hi.start[d] += cut;
  hi.count[d] -= cut;
  bisect(rng, lo, depth - 1, out);
  bisect(rng, hi, depth - 1, out);
}

TEST(PlanReads, RandomTilingsMatchBruteForce) {
  std::mt19937 rng(1234);
  for (int trial = 0; trial < 150; ++trial) {
    const auto nd = std::uniform_int_distribution<std::size_t>(1, 3)(rng);
    Dims shape(nd);
    for (auto& s : shape) s = std::uniform_int_distribution<std::uint64_t>(1, 7)(rng);
    const auto es = std::uniform_int_distribution<std::uint32_t>(1, 8)(rng);
    const VariableDef def{"v", es, shape, ""};

    std::vector<BlockExtent> tiles;
    bisect(rng, {Dims(nd, 0), shape}, 5, tiles);
    const auto nranks = std::uniform_int_distribution<std::size_t>(1, 4)(rng);
    std::vector<std::vector<BlockExtent>> per_rank(nranks);
    for (const auto& t : tiles) per_rank[rng() % nranks].push_back(t);
    const auto w = make_world(def, per_rank);
    const auto meta = w.meta();

    for (int s = 0; s < 5; ++s) {
      BlockExtent sel{Dims(nd), Dims(nd)};
      std::uint64_t elems = 1;
      for (std::size_t d = 0; d < nd; ++d) {
        sel.start[d] = std::uniform_int_distribution<std::uint64_t>(0, shape[d] - 1)(rng);
        sel.count[d] =
            std::uniform_int_distribution<std::uint64_t>(1, shape[d] - sel.start[d])(rng);
        elems *= sel.count[d];
      }
      const auto plan = plan_reads(meta, "v", sel);

      // Disjoint destinations with total = selection bytes.
      std::vector<std::pair<std::uint64_t, std::uint64_t>> iv;
      std::uint64_t total = 0;
      for (const auto& e : plan) {
        EXPECT_GE(e.length, 1u);
        iv.emplace_back(e.dest_offset, e.dest_offset + e.length);
        total += e.length;
      }
      std::sort(iv.begin(), iv.end());
      for (std::size_t i = 1; i < iv.size(); ++i) EXPECT_LE(iv[i - 1].second, iv[i].first);
      EXPECT_EQ(total, elems * es);

      const auto oracle = brute_force_gather(w, sel);
      ASSERT_TRUE(oracle);
      EXPECT_EQ(fetch_and_assemble(w, plan, elems * es), *oracle);
    }
  }
}

TEST(Assemble, Examples) {
  const auto w = two_rank_world();
  // Single full-cover entry.
  std::vector<ReadPlanEntry> one{{0, 0, 96, 0}};
  EXPECT_EQ(fetch_and_assemble(w, one, 96), w.data[0]);

  // Zero entries leave dest untouched.
  Bytes dest(16, std::byte{0x5A});
  assemble(dest, {}, {});
  EXPECT_EQ(dest, Bytes(16, std::byte{0x5A}));
}

TEST(Assemble, LengthMismatchWritesNothing) {
  Bytes src(10, std::byte{1});
  std::vector<ReadPlanEntry> plan{{0, 0, 4, 0}, {0, 4, 4, 4}};
  std::vector<std::span<const std::byte>> fetched{{src.data(), 4}, {src.data(), 3}};
  Bytes dest(8, std::byte{9});
  try {
    assemble(dest, plan, fetched);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::LengthMismatch);
  }
  EXPECT_EQ(dest, Bytes(8, std::byte{9}));

  std::vector<ReadPlanEntry> past_end{{0, 0, 4, 6}};
  std::vector<std::span<const std::byte>> f1{{src.data(), 4}};
  EXPECT_THROW(assemble(dest, past_end, f1), Error);
}

TEST(Aggregate, ShapeMismatch) {
  auto w = make_world(kDef46, {{{{0, 0}, {2, 6}}}, {{{2, 0}, {2, 6}}}});
  w.parts[1].variables[0].def.shape = {5, 6};
  EXPECT_THROW(aggregate_metadata(StepId{0}, w.parts), Error);
}

TEST(Aggregate, OrdersBlocksByRank) {
  const auto m = two_rank_world().meta();
  ASSERT_EQ(m.writer_count(), 2u);
  const auto* v = m.find("T");
  ASSERT_NE(v, nullptr);
  ASSERT_EQ(v->blocks.size(), 2u);
  EXPECT_EQ(v->blocks[0].writer_rank, 0u);
  EXPECT_EQ(v->blocks[1].writer_rank, 1u);
}

LocalMetadata random_local(std::mt19937& rng, std::uint32_t rank) {
  LocalMetadata m;
  m.writer_rank = rank;
  const auto nv = rng() % 4;
  for (std::uint32_t i = 0; i < nv; ++i) {
    LocalVariable v;
    const auto nd = 1 + rng() % 3;
    v.def = {"var" + std::to_string(i), 1u + static_cast<std::uint32_t>(rng() % 8), Dims(nd), "t"};
    for (auto& s : v.def.shape) s = 1 + rng() % 9;
    const auto nb = rng() % 3;
    for (std::uint32_t b = 0; b < nb; ++b) {
      BlockExtent e{Dims(nd), Dims(nd)};
      for (std::size_t d = 0; d < nd; ++d) {
        e.start[d] = rng() % v.def.shape[d];
        e.count[d] = 1 + rng() % (v.def.shape[d] - e.start[d]);
      }
      v.blocks.push_back({e, rng() % 1000});
    }
    m.variables.push_back(v);
  }
  const auto n = rng() % 12;
  for (std::uint32_t i = 0; i < n; ++i) m.dp_registration.push_back(static_cast<std::byte>(rng()));
  return m;
}

TEST(MetadataEncoding, RoundTripRandom) {
  std::mt19937 rng(99);
  for (int t = 0; t < 300; ++t) {
    const auto lm = random_local(rng, static_cast<std::uint32_t>(rng() % 5));
    EXPECT_EQ(decode_local_metadata(encode_local_metadata(lm)), lm);

    std::vector<LocalMetadata> parts;
    const auto n = 1 + rng() % 3;
    auto base = random_local(rng, 0);
    for (std::uint32_t r = 0; r < n; ++r) {
      auto p = base;
      p.writer_rank = r;
      parts.push_back(p);
    }
    const auto fm = aggregate_metadata(StepId{rng() % 100}, parts);
    EXPECT_EQ(decode_full_metadata(encode_full_metadata(fm)), fm);
  }
}

TEST(MetadataEncoding, LeadingVersionAndTruncation) {
  const auto enc = encode_full_metadata(two_rank_world().meta());
  ASSERT_GE(enc.size(), 8u);
  EXPECT_EQ(std::to_integer<int>(enc[0]), 1);
  EXPECT_EQ(std::to_integer<int>(enc[1]), 0);

  for (std::size_t cut = 0; cut < enc.size(); cut += 7) {
    EXPECT_THROW(decode_full_metadata(std::span(enc.data(), cut)), Error);
  }
  auto bad = enc;
  bad[0] = std::byte{2};
  EXPECT_THROW(decode_full_metadata(bad), Error);
}

}  // namespace
}  // namespace sstage
