#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "sstage/cohort.hpp"
#include "sstage/contact.hpp"
#include "sstage/core.hpp"
#include "sstage/data_plane.hpp"
#include "sstage/marshal.hpp"

namespace sstage {

enum class StreamEventKind {
  EndStepEnter,
  EndStepReturn,
  Accepted,
  Discarded,
  Provided,
  Released,
  ForceReleased,
  ReaderActivated,
  ReaderClosed,
  ReaderFailed,
  CloseEnter,
  CloseReturn,
};
std::string_view to_string(StreamEventKind k);

struct StreamEvent {
  std::uint64_t seq = 0;
  StreamEventKind kind = StreamEventKind::Provided;
  StepId step;
  ReaderId reader = 0;
};

/// Append-only, sequence-numbered record of writer rank 0's protocol decisions.
class EventLog {
 public:
  void add(StreamEventKind kind, StepId step = {}, ReaderId reader = 0);
  std::vector<StreamEvent> snapshot() const;
  /// Steps of every event of `kind`, optionally for one reader, in log order.
  std::vector<StepId> steps(StreamEventKind kind, std::optional<ReaderId> reader = std::nullopt) const;
  /// Sequence number of the first matching event.
  std::optional<std::uint64_t> seq_of(StreamEventKind kind, StepId step) const;

 private:
  mutable std::mutex mu_;
  std::vector<StreamEvent> events_;
};

/// Where the writer publishes, and the reader looks for, the contact record.
struct ContactOptions {
  std::string stream_name = "stream";
  /// Empty: $STAGE_CONTACT_DIR, else the working directory.
  std::filesystem::path contact_dir;
  /// Writer: print the contact string to `screen_out` instead of writing a file.
  bool screen = false;
  std::ostream* screen_out = nullptr;
  /// Reader: use this contact string instead of polling for the file.
  std::optional<std::string> contact_text;

  std::filesystem::path resolved_dir() const;
};

struct WriterStreamStats {
  /// Blocking waits for a reader-originated message inside provide_timestep.
  std::uint64_t reader_message_waits = 0;
  std::uint64_t accepted = 0;
  std::uint64_t discarded = 0;
  std::size_t active_readers = 0;
};

/// Writer half of the control plane, one instance per writer rank. Rank 0
/// owns the reader registrations and the step queue; other ranks follow the
/// decisions it broadcasts inside the collective calls.
class WriterStream {
 public:
  /// Collective. Publishes the contact record and returns once
  /// RendezvousReaderCount readers are active.
  WriterStream(Cohort& cohort, const EngineParams& params, ContactOptions contact);
  ~WriterStream();
  WriterStream(const WriterStream&) = delete;
  WriterStream& operator=(const WriterStream&) = delete;

  struct Provided {
    StepId step;
    bool accepted = true;
  };
  /// Collective. Registers the block, applies the queue policy, gathers the
  /// metadata and sends it to the step's readers.
  Provided provide_timestep(LocalMetadata local, std::shared_ptr<const Bytes> block,
                            bool writer_locked);
  /// Collective. Returns once every queued step has been released.
  void close();
  bool closed() const;

  int rank() const;
  const EventLog& events() const;
  WriterStreamStats stats() const;
  /// Rank 0 only.
  ContactRecord contact() const;
  std::vector<StepId> queued_steps() const;
  std::vector<StepId> reserve_steps() const;
  WriterDataPlane& data_plane();

  struct Impl;

 private:
  std::unique_ptr<Impl> impl_;
};

struct ReaderStepInfo {
  enum class Status { Ok, NotReady, EndOfStream } status = Status::NotReady;
  StepId step;
  std::shared_ptr<const FullMetadata> metadata;
  bool writer_locked = false;
};

struct ReaderStreamStats {
  std::uint64_t replaced_steps = 0;  // latest-only replacements
  std::uint64_t step_requests = 0;   // RequestStep messages sent
};

/// Reader half of the control plane, one instance per reader rank.
class ReaderStream {
 public:
  /// Collective. Finds the writer, handshakes and activates.
  ReaderStream(Cohort& cohort, const EngineParams& params, ContactOptions contact);
  ~ReaderStream();
  ReaderStream(const ReaderStream&) = delete;
  ReaderStream& operator=(const ReaderStream&) = delete;

  /// Collective. timeout_secs < 0 waits indefinitely.
  ReaderStepInfo begin_step(double timeout_secs);
  /// Collective. Callers finish their reads first.
  void end_step(StepId step, bool reader_locked);
  /// Collective. A second call throws StreamClosed.
  void close();
  /// Drops every connection without telling the writer, as a crash would.
  void abandon();
  bool closed() const;
  /// Reader lock state reported with latest-only replacement releases.
  void set_locked(bool locked);

  int rank() const;
  ReaderId id() const;
  StepDistribution distribution() const;
  PreloadMode preload() const;
  std::uint32_t writer_count() const;
  ReaderDataPlane& data_plane();
  ReaderStreamStats stats() const;

  struct Impl;

 private:
  std::unique_ptr<Impl> impl_;
};

}  // namespace sstage
