#include "sstage/payload.hpp"

#include <cstring>

#include <gtest/gtest.h>

namespace sstage {
namespace {

std::uint64_t element_at(const Bytes& block, std::size_t i) {
  std::uint64_t v = 0;
  for (int b = 7; b >= 0; --b) v = (v << 8) | std::to_integer<std::uint64_t>(block[i * 8 + static_cast<std::size_t>(b)]);
  return v;
}

TEST(Payload, ElementIsPureAndSensitiveToEveryInput) {
  const auto v = payload_element(1, StepId{2}, "u", 3);
  EXPECT_EQ(v, payload_element(1, StepId{2}, "u", 3));
  EXPECT_NE(v, payload_element(2, StepId{2}, "u", 3));
  EXPECT_NE(v, payload_element(1, StepId{3}, "u", 3));
  EXPECT_NE(v, payload_element(1, StepId{2}, "v", 3));
  EXPECT_NE(v, payload_element(1, StepId{2}, "u", 4));
}

TEST(Payload, BlockHoldsRowMajorElementsOfItsExtent) {
  const Dims shape{5, 7};
  const BlockExtent e{{1, 2}, {3, 4}};
  const auto block = payload_block(9, StepId{1}, "u", shape, e);
  ASSERT_EQ(block.size(), 3u * 4u * 8u);
  for (std::uint64_t i = 0; i < 3; ++i) {
    for (std::uint64_t j = 0; j < 4; ++j) {
      const auto global = (1 + i) * 7 + (2 + j);
      EXPECT_EQ(element_at(block, i * 4 + j), payload_element(9, StepId{1}, "u", global));
    }
  }
}

TEST(Payload, VariableIsFloat64) {
  const auto v = payload_variable("u", {4, 4});
  EXPECT_EQ(v.element_size, kPayloadElementSize);
  EXPECT_EQ(v.type, "double");
}

TEST(Decomposition, ParsesAndPrints) {
  EXPECT_EQ(Decomposition::parse("striped").kind, Decomposition::Kind::Striped);
  EXPECT_EQ(Decomposition::parse("blocked").kind, Decomposition::Kind::Blocked);
  const auto r = Decomposition::parse("random:42");
  EXPECT_EQ(r.kind, Decomposition::Kind::Random);
  EXPECT_EQ(r.seed, 42u);
  EXPECT_EQ(Decomposition::parse(r.to_string()).seed, 42u);
  EXPECT_THROW(Decomposition::parse("diagonal"), Error);
  EXPECT_THROW(Decomposition::parse("random:x"), Error);
}

struct TilingCase {
  Dims shape;
  int nranks;
  std::string decomposition;
};

class Tiling : public ::testing::TestWithParam<TilingCase> {};

// Every element is covered by exactly one block, and reassembling the blocks'
// payloads reproduces the whole-array payload.
TEST_P(Tiling, BlocksCoverTheArrayExactlyOnce) {
  const auto& c = GetParam();
  const auto parts = decompose(c.shape, c.nranks, Decomposition::parse(c.decomposition));
  ASSERT_EQ(parts.size(), static_cast<std::size_t>(c.nranks));
  const auto total = element_count(c.shape);
  std::vector<int> hits(total, 0);
  const BlockExtent whole{Dims(c.shape.size(), 0), c.shape};
  const auto expected = payload_block(3, StepId{0}, "u", c.shape, whole);
  Bytes assembled(expected.size());
  for (const auto& rank_blocks : parts) {
    for (const auto& b : rank_blocks) {
      const auto data = payload_block(3, StepId{0}, "u", c.shape, b);
      const auto n = element_count(b.count);
      for (std::uint64_t k = 0; k < n; ++k) {
        // Row-major index of the k-th element of b in the global array.
        std::uint64_t rem = k, global = 0, stride = 1;
        std::vector<std::uint64_t> local(b.count.size());
        for (std::size_t d = b.count.size(); d-- > 0;) {
          local[d] = rem % b.count[d];
          rem /= b.count[d];
        }
        for (std::size_t d = b.count.size(); d-- > 0;) {
          global += (b.start[d] + local[d]) * stride;
          stride *= c.shape[d];
        }
        ASSERT_LT(global, total);
        hits[global]++;
        std::memcpy(assembled.data() + global * 8, data.data() + k * 8, 8);
      }
    }
  }
  for (std::uint64_t i = 0; i < total; ++i) ASSERT_EQ(hits[i], 1) << "element " << i;
  EXPECT_EQ(assembled, expected);
}

INSTANTIATE_TEST_SUITE_P(Shapes, Tiling,
                         ::testing::Values(TilingCase{{16, 16}, 4, "blocked"}, TilingCase{{16, 16}, 3, "striped"},
                                           TilingCase{{10, 7}, 6, "blocked"}, TilingCase{{9, 5, 4}, 8, "blocked"},
                                           TilingCase{{32, 32}, 5, "random:1"}, TilingCase{{8, 8}, 7, "random:99"},
                                           TilingCase{{3}, 5, "striped"}, TilingCase{{12, 12}, 1, "random:4"}));

TEST(Decomposition, RandomIsSeeded) {
  const Dims shape{64, 64};
  const auto a = decompose(shape, 6, Decomposition::parse("random:7"));
  const auto b = decompose(shape, 6, Decomposition::parse("random:7"));
  const auto c = decompose(shape, 6, Decomposition::parse("random:8"));
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}

TEST(Checksum, MatchesFnv1aReferenceValues) {
  // Published FNV-1a 64 test vectors.
  EXPECT_EQ(checksum({}), 0xcbf29ce484222325ull);
  const std::string a = "a";
  EXPECT_EQ(checksum(std::as_bytes(std::span(a))), 0xaf63dc4c8601ec8cull);
  const std::string foobar = "foobar";
  EXPECT_EQ(checksum(std::as_bytes(std::span(foobar))), 0x85944171f73967e8ull);
}

}  // namespace
}  // namespace sstage
