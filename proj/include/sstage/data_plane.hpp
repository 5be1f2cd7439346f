#pragma once

#include <array>
#include <condition_variable>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <vector>

#include "sstage/bytes.hpp"
#include "sstage/core.hpp"
#include "sstage/net.hpp"
#include "sstage/wire.hpp"

namespace sstage {

/// Remote read history of one reader rank: step -> writer rank -> reads.
/// Each per-(step, rank) list grows by doubling; absent pairs cost nothing.
class RequestLog {
 public:
  void record(StepId step, std::uint32_t writer_rank, std::uint64_t offset, std::uint64_t length,
              std::uint32_t dest_token);
  /// nullptr when nothing was read from `writer_rank` in `step`.
  const std::vector<wire::LoggedRead>* find(StepId step, std::uint32_t writer_rank) const;
  std::vector<std::uint32_t> writer_ranks(StepId step) const;
  /// Drops every step older than `step`.
  void drop_before(StepId step);
  std::size_t step_count() const { return index_.size(); }

 private:
  std::map<StepId, std::map<std::uint32_t, std::vector<wire::LoggedRead>>> index_;
};

/// Identifies one rank of one reader cohort.
struct ReaderRankKey {
  ReaderId reader = 0;
  std::uint32_t rank = 0;
  auto operator<=>(const ReaderRankKey&) const = default;
};

struct WriterPlaneStats {
  std::uint64_t requests_served = 0;
  std::uint64_t stale_requests = 0;
  std::uint64_t preload_pushes = 0;
  std::uint64_t preload_bytes_pushed = 0;
  std::uint64_t buffer_releases = 0;
};

/// Writer side of the socket data plane. Serves ReadRequest frames from a
/// background handler and pushes preload data from the application context.
class WriterDataPlane {
 public:
  WriterDataPlane(std::uint32_t rank, wire::StreamId stream, PreloadMode mode);
  ~WriterDataPlane();
  WriterDataPlane(const WriterDataPlane&) = delete;
  WriterDataPlane& operator=(const WriterDataPlane&) = delete;

  /// Endpoint token "host:port"; this is also every step's registration blob.
  Bytes contact() const;

  Bytes register_step(StepId step, std::shared_ptr<const Bytes> block);
  void unregister_step(StepId step);
  bool is_registered(StepId step) const;
  std::size_t registered_count() const;

  // Queued preload: record the requests `reader` makes for `step`, then adopt
  // them as the reader's pattern.
  void begin_learning(ReaderId reader, StepId step);
  void finish_learning(ReaderId reader);
  void forget_reader(ReaderId reader);

  /// Pushes `step` to every rank of `reader` with a known pattern: the learned
  /// one (Queued) or the published request log (DoubleBuffer, into `buffer`).
  /// Returns the reader ranks pushed to.
  std::vector<std::uint32_t> push_step(ReaderId reader, StepId step,
                                       std::optional<std::uint32_t> buffer = std::nullopt);
  bool has_pattern(ReaderRankKey key) const;
  /// Highest step named in a BufferRelease from `key`.
  std::optional<StepId> buffer_released(ReaderRankKey key) const;

  WriterPlaneStats stats() const;
  void shutdown();

 private:
  void on_frame(net::Connection& conn, net::Frame&& frame);

  const std::uint32_t rank_;
  const wire::StreamId stream_;
  const PreloadMode mode_;

  mutable std::mutex mu_;
  std::map<StepId, std::shared_ptr<const Bytes>> steps_;
  std::map<ReaderRankKey, std::weak_ptr<net::Connection>> conns_;
  std::map<ReaderId, StepId> learning_;
  std::map<ReaderRankKey, std::vector<wire::ByteRange>> recorded_;
  std::map<ReaderRankKey, std::vector<wire::ByteRange>> patterns_;
  std::map<ReaderRankKey, StepId> buffer_released_;
  WriterPlaneStats stats_;

  std::unique_ptr<net::Server> server_;
};

/// Completion record of one posted read. Completes exactly once.
class ReadHandle {
 public:
  ReadHandle() = default;
  bool valid() const { return state_ != nullptr; }

 private:
  friend class ReaderDataPlane;
  struct State {
    enum class Status { Pending, Done, Failed } status = Status::Pending;
    std::span<std::byte> dest;
    std::uint32_t writer_rank = 0;
    ErrorCode error = ErrorCode::ConnectionLost;
    std::string message;
  };
  std::shared_ptr<State> state_;
};

struct ReaderPlaneStats {
  std::uint64_t read_requests_sent = 0;  // ReadRequest frames put on the wire
  std::uint64_t preload_hits = 0;        // reads satisfied by pushed data
  std::uint64_t preload_fallbacks = 0;   // reads the pushed data did not cover
  std::uint64_t late_pushes_dropped = 0;
  std::uint64_t preload_bytes = 0;
  std::uint64_t preload_bytes_peak = 0;
  std::uint64_t resident_pushed_steps = 0;
  std::uint64_t resident_pushed_steps_peak = 0;
};

/// Reader side of the socket data plane for one reader rank. Connections to
/// writer ranks are opened lazily on first use.
class ReaderDataPlane {
 public:
  ReaderDataPlane(wire::StreamId stream, ReaderId reader, std::uint32_t rank, PreloadMode mode);
  ~ReaderDataPlane();
  ReaderDataPlane(const ReaderDataPlane&) = delete;
  ReaderDataPlane& operator=(const ReaderDataPlane&) = delete;

  /// Makes `step` current: its registration blobs locate the writer ranks,
  /// `pushing_ranks` are the writer ranks committed to push it here.
  /// Pushed data for older steps is dropped.
  void install_step(StepId step, const std::vector<Bytes>& registrations,
                    std::vector<std::uint32_t> pushing_ranks);

  /// Returns immediately; the transfer runs on the connection's handler.
  ReadHandle post_read(StepId step, std::uint32_t writer_rank, std::uint64_t offset,
                       std::uint64_t length, std::span<std::byte> dest);
  /// Blocks until the handle completes; throws its error. Idempotent.
  void wait(const ReadHandle& h);

  /// Copies from pushed data when it covers [offset, offset+length); waits for
  /// a push the writer committed to. False means the caller must read remotely.
  bool preload_match(StepId step, std::uint32_t writer_rank, std::uint64_t offset,
                     std::uint64_t length, std::span<std::byte> dest);

  /// Drops pushed data up to `step`; sends BufferRelease when `notify` is set.
  void release_step(StepId step, bool notify);
  /// DoubleBuffer: ships the step's log to each writer rank it read from.
  void publish_log(StepId step, const RequestLog& log);

  ReaderPlaneStats stats() const;
  void close();

 private:
  struct Pushed {
    std::vector<wire::ByteRange> ranges;
    Bytes data;
  };
  struct Link {
    std::shared_ptr<net::Connection> conn;
    bool lost = false;
  };

  std::shared_ptr<net::Connection> link(std::uint32_t writer_rank, std::unique_lock<std::mutex>& lk);
  void on_frame(std::uint32_t writer_rank, net::Frame&& frame);
  void on_close(std::uint32_t writer_rank);
  void account_pushed();

  const wire::StreamId stream_;
  const ReaderId reader_;
  const std::uint32_t rank_;
  const PreloadMode mode_;

  mutable std::mutex mu_;
  std::condition_variable cv_;
  bool closed_ = false;
  std::vector<Bytes> registrations_;
  std::map<std::uint32_t, Link> links_;
  std::uint64_t next_request_ = 1;
  std::map<std::uint64_t, std::shared_ptr<ReadHandle::State>> pending_;

  std::optional<StepId> current_;
  std::set<std::uint32_t> committed_;  // writer ranks pushing the current step
  std::optional<StepId> released_upto_;
  std::map<StepId, std::map<std::uint32_t, Pushed>> pushed_;
  // DoubleBuffer: the step each writer rank last pushed into buffer 0 / 1.
  std::map<std::uint32_t, std::array<std::optional<StepId>, 2>> buffers_;
  ReaderPlaneStats stats_;
};

}  // namespace sstage
