#include "sstage/data_plane.hpp"

#include <chrono>
#include <numeric>
#include <thread>

#include <gtest/gtest.h>

namespace sstage {
namespace {

using namespace std::chrono_literals;

std::shared_ptr<const Bytes> counting_block(std::size_t n, unsigned base = 0) {
  auto b = std::make_shared<Bytes>(n);
  for (std::size_t i = 0; i < n; ++i) (*b)[i] = static_cast<std::byte>((base + i) & 0xff);
  return b;
}

Bytes slice(const Bytes& b, std::size_t off, std::size_t len) {
  return Bytes(b.begin() + static_cast<std::ptrdiff_t>(off), b.begin() + static_cast<std::ptrdiff_t>(off + len));
}

template <typename Pred>
bool eventually(Pred pred) {
  const auto deadline = std::chrono::steady_clock::now() + 5s;
  while (!pred()) {
    if (std::chrono::steady_clock::now() > deadline) return false;
    std::this_thread::sleep_for(1ms);
  }
  return true;
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::ProtocolError;  // sentinel: nothing thrown
}

class DataPlaneTest : public ::testing::Test {
 protected:
  Bytes read(ReaderDataPlane& r, StepId step, std::uint64_t off, std::uint64_t len) {
    Bytes dest(len);
    r.wait(r.post_read(step, 0, off, len, dest));
    return dest;
  }

  wire::StreamId stream = wire::StreamId::random();
};

TEST_F(DataPlaneTest, RemoteReadReturnsRegisteredBytes) {
  WriterDataPlane w(0, stream, PreloadMode::Off);
  auto block = counting_block(100);
  const auto reg = w.register_step(StepId{0}, block);
  EXPECT_EQ(reg, w.contact());
  EXPECT_TRUE(w.is_registered(StepId{0}));

  ReaderDataPlane r(stream, 1, 0, PreloadMode::Off);
  r.install_step(StepId{0}, {reg}, {});
  EXPECT_EQ(read(r, StepId{0}, 10, 20), slice(*block, 10, 20));
  EXPECT_EQ(read(r, StepId{0}, 0, 100), *block);
  EXPECT_EQ(w.stats().requests_served, 2u);
  EXPECT_EQ(r.stats().read_requests_sent, 2u);
}

TEST_F(DataPlaneTest, ZeroLengthReadNeedsNoConnection) {
  ReaderDataPlane r(stream, 1, 0, PreloadMode::Off);
  r.install_step(StepId{0}, {}, {});
  Bytes none;
  r.wait(r.post_read(StepId{0}, 7, 0, 0, none));
  EXPECT_EQ(r.stats().read_requests_sent, 0u);
}

TEST_F(DataPlaneTest, OutOfRangeAndStaleStep) {
  WriterDataPlane w(0, stream, PreloadMode::Off);
  const auto reg = w.register_step(StepId{4}, counting_block(100));
  ReaderDataPlane r(stream, 1, 0, PreloadMode::Off);
  r.install_step(StepId{4}, {reg}, {});

  EXPECT_EQ(code_of([&] { read(r, StepId{4}, 90, 20); }), ErrorCode::OutOfRange);
  EXPECT_EQ(code_of([&] { read(r, StepId{4}, 101, 1); }), ErrorCode::OutOfRange);
  EXPECT_EQ(code_of([&] { read(r, StepId{3}, 0, 1); }), ErrorCode::StaleStep);
  w.unregister_step(StepId{4});
  EXPECT_EQ(code_of([&] { read(r, StepId{4}, 0, 1); }), ErrorCode::StaleStep);
  EXPECT_EQ(w.stats().stale_requests, 2u);
}

TEST_F(DataPlaneTest, DestinationSizeMustMatchLength) {
  ReaderDataPlane r(stream, 1, 0, PreloadMode::Off);
  Bytes dest(3);
  EXPECT_EQ(code_of([&] { r.post_read(StepId{0}, 0, 0, 4, dest); }), ErrorCode::LengthMismatch);
}

TEST_F(DataPlaneTest, PendingReadFailsWhenWriterGoesAway) {
  auto w = std::make_unique<WriterDataPlane>(0, stream, PreloadMode::Off);
  const auto reg = w->register_step(StepId{0}, counting_block(16));
  ReaderDataPlane r(stream, 1, 0, PreloadMode::Off);
  r.install_step(StepId{0}, {reg}, {});
  read(r, StepId{0}, 0, 4);
  w.reset();
  // The loss is noticed either when the request is sent or when the
  // connection's handler sees the close.
  Bytes dest(4);
  EXPECT_EQ(code_of([&] { r.wait(r.post_read(StepId{0}, 0, 0, 4, dest)); }), ErrorCode::ConnectionLost);
}

TEST_F(DataPlaneTest, QueuedPreloadReplaysLearnedPatternAndFallsBackOnDeviation) {
  const ReaderId reader = 5;
  WriterDataPlane w(0, stream, PreloadMode::Queued);
  ReaderDataPlane r(stream, reader, 0, PreloadMode::Queued);

  // Step 0 teaches the writer two ranges.
  auto b0 = counting_block(64);
  const auto reg = w.register_step(StepId{0}, b0);
  w.begin_learning(reader, StepId{0});
  r.install_step(StepId{0}, {reg}, {});
  read(r, StepId{0}, 0, 8);
  read(r, StepId{0}, 32, 16);
  w.finish_learning(reader);
  ASSERT_TRUE(w.has_pattern({reader, 0}));

  auto b1 = counting_block(64, 100);
  w.register_step(StepId{1}, b1);
  EXPECT_EQ(w.push_step(reader, StepId{1}), std::vector<std::uint32_t>{0});
  r.install_step(StepId{1}, {reg}, {0});

  Bytes dest(8);
  ASSERT_TRUE(r.preload_match(StepId{1}, 0, 0, 8, dest));
  EXPECT_EQ(dest, slice(*b1, 0, 8));
  // A sub-range of a pushed range is also served locally.
  Bytes part(4);
  ASSERT_TRUE(r.preload_match(StepId{1}, 0, 36, 4, part));
  EXPECT_EQ(part, slice(*b1, 36, 4));

  // A range the pattern does not cover falls back to a remote read.
  Bytes other(8);
  EXPECT_FALSE(r.preload_match(StepId{1}, 0, 16, 8, other));
  EXPECT_EQ(read(r, StepId{1}, 16, 8), slice(*b1, 16, 8));

  const auto s = r.stats();
  EXPECT_EQ(s.preload_hits, 2u);
  EXPECT_EQ(s.preload_fallbacks, 1u);
  EXPECT_EQ(w.stats().preload_pushes, 1u);
}

TEST_F(DataPlaneTest, UncommittedRankDoesNotWait) {
  ReaderDataPlane r(stream, 1, 0, PreloadMode::Queued);
  r.install_step(StepId{2}, {}, {});
  Bytes dest(4);
  EXPECT_FALSE(r.preload_match(StepId{2}, 0, 0, 4, dest));
  EXPECT_EQ(r.stats().preload_fallbacks, 0u);
}

TEST_F(DataPlaneTest, PushForReleasedStepIsDropped) {
  const ReaderId reader = 2;
  WriterDataPlane w(0, stream, PreloadMode::Queued);
  ReaderDataPlane r(stream, reader, 0, PreloadMode::Queued);
  const auto reg = w.register_step(StepId{0}, counting_block(16));
  w.begin_learning(reader, StepId{0});
  r.install_step(StepId{0}, {reg}, {});
  read(r, StepId{0}, 0, 16);
  w.finish_learning(reader);
  r.release_step(StepId{0}, false);

  w.register_step(StepId{0}, counting_block(16));
  ASSERT_EQ(w.push_step(reader, StepId{0}).size(), 1u);
  ASSERT_TRUE(eventually([&] { return r.stats().late_pushes_dropped == 1; }));
  EXPECT_EQ(r.stats().resident_pushed_steps, 0u);
}

TEST_F(DataPlaneTest, DoubleBufferReusesTheReleasedBuffer) {
  const ReaderId reader = 9;
  const ReaderRankKey key{reader, 0};
  WriterDataPlane w(0, stream, PreloadMode::DoubleBuffer);
  ReaderDataPlane r(stream, reader, 0, PreloadMode::DoubleBuffer);

  std::vector<std::shared_ptr<const Bytes>> blocks;
  for (unsigned s = 0; s < 6; ++s) blocks.push_back(counting_block(32, s * 40));
  const auto reg = w.register_step(StepId{2}, blocks[2]);

  // Step 2 is read remotely and its log published.
  r.install_step(StepId{2}, {reg}, {});
  RequestLog log;
  log.record(StepId{2}, 0, 4, 12, 0);
  log.record(StepId{2}, 0, 20, 8, 1);
  read(r, StepId{2}, 4, 12);
  read(r, StepId{2}, 20, 8);
  r.publish_log(StepId{2}, log);
  ASSERT_TRUE(eventually([&] { return w.has_pattern(key); }));
  r.release_step(StepId{2}, true);
  w.unregister_step(StepId{2});

  // Steps 3 and 4 occupy both buffers.
  for (unsigned s = 3; s <= 4; ++s) w.register_step(StepId{s}, blocks[s]);
  ASSERT_EQ(w.push_step(reader, StepId{3}, 0u).size(), 1u);
  ASSERT_EQ(w.push_step(reader, StepId{4}, 1u).size(), 1u);
  ASSERT_TRUE(eventually([&] { return r.stats().resident_pushed_steps == 2; }));

  Bytes dest(12);
  r.install_step(StepId{3}, {reg}, {0});
  ASSERT_TRUE(r.preload_match(StepId{3}, 0, 4, 12, dest));
  EXPECT_EQ(dest, slice(*blocks[3], 4, 12));
  r.release_step(StepId{3}, true);
  ASSERT_TRUE(eventually([&] { return w.buffer_released(key) == StepId{3}; }));

  // Step 5 goes into the buffer step 3 vacated; step 4 is untouched.
  w.register_step(StepId{5}, blocks[5]);
  ASSERT_EQ(w.push_step(reader, StepId{5}, 0u).size(), 1u);
  ASSERT_TRUE(eventually([&] { return r.stats().resident_pushed_steps == 2; }));

  for (unsigned s = 4; s <= 5; ++s) {
    r.install_step(StepId{s}, {reg}, {0});
    Bytes d(8);
    ASSERT_TRUE(r.preload_match(StepId{s}, 0, 20, 8, d)) << "step " << s;
    EXPECT_EQ(d, slice(*blocks[s], 20, 8));
    r.release_step(StepId{s}, true);
  }
  EXPECT_EQ(r.stats().resident_pushed_steps_peak, 2u);
  EXPECT_EQ(r.stats().preload_fallbacks, 0u);
}

TEST_F(DataPlaneTest, DoubleBufferOverwritesTheSlotsPreviousStep) {
  const ReaderId reader = 3;
  WriterDataPlane w(0, stream, PreloadMode::DoubleBuffer);
  ReaderDataPlane r(stream, reader, 0, PreloadMode::DoubleBuffer);
  const auto reg = w.register_step(StepId{0}, counting_block(16));
  r.install_step(StepId{0}, {reg}, {});
  RequestLog log;
  log.record(StepId{0}, 0, 0, 16, 0);
  read(r, StepId{0}, 0, 16);
  r.publish_log(StepId{0}, log);
  ASSERT_TRUE(eventually([&] { return w.has_pattern({reader, 0}); }));

  w.register_step(StepId{1}, counting_block(16, 1));
  w.register_step(StepId{3}, counting_block(16, 3));
  w.push_step(reader, StepId{1}, 1u);
  ASSERT_TRUE(eventually([&] { return r.stats().resident_pushed_steps == 1; }));
  w.push_step(reader, StepId{3}, 1u);
  ASSERT_TRUE(eventually([&] { return r.stats().preload_bytes == 16 && r.stats().resident_pushed_steps == 1; }));
  Bytes dest(16);
  r.install_step(StepId{3}, {reg}, {0});
  EXPECT_TRUE(r.preload_match(StepId{3}, 0, 0, 16, dest));
}

TEST(RequestLog, GroupsByStepAndRank) {
  RequestLog log;
  for (std::uint32_t i = 0; i < 10; ++i) log.record(StepId{1}, i % 2, i * 8, 8, i);
  log.record(StepId{2}, 3, 0, 4, 0);
  EXPECT_EQ(log.step_count(), 2u);
  EXPECT_EQ(log.writer_ranks(StepId{1}), (std::vector<std::uint32_t>{0, 1}));
  ASSERT_NE(log.find(StepId{1}, 1), nullptr);
  EXPECT_EQ(log.find(StepId{1}, 1)->size(), 5u);
  EXPECT_EQ(log.find(StepId{1}, 1)->at(2).offset, 40u);
  EXPECT_EQ(log.find(StepId{1}, 2), nullptr);
  log.drop_before(StepId{2});
  EXPECT_EQ(log.find(StepId{1}, 0), nullptr);
  EXPECT_EQ(log.step_count(), 1u);
}

}  // namespace
}  // namespace sstage
