#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sstage/control_plane.hpp"
#include "sstage/data_plane.hpp"
#include "sstage/marshal.hpp"

namespace sstage {

struct EndStepResult {
  StepId step;
  bool accepted = true;
};

/// Writer side of the step API. One instance per writer rank; begin_step,
/// end_step and close are collective over the writer cohort.
class WriterEngine {
 public:
  /// Collective; blocks for RendezvousReaderCount readers.
  WriterEngine(Cohort& cohort, const EngineParams& params, ContactOptions contact);
  ~WriterEngine();

  void begin_step();
  /// Copies `payload`, which must hold exactly the block's bytes.
  void put(const VariableDef& variable, const BlockExtent& extent, std::span<const std::byte> payload);
  EndStepResult end_step();
  void close();

  /// Takes effect at the next end_step. Afterwards every step must repeat the
  /// puts of that step, in order, with the same definitions and extents.
  void lock_writer_definitions();

  bool in_step() const { return in_step_; }
  WriterStream& stream() { return *stream_; }
  const EventLog& events() const { return stream_->events(); }

 private:
  struct Pattern {
    VariableDef def;
    BlockExtent extent;
    friend bool operator==(const Pattern&, const Pattern&) = default;
  };
  void check_locked(const Pattern& p) const;

  Cohort& cohort_;
  std::unique_ptr<WriterStream> stream_;
  bool in_step_ = false;
  bool closed_ = false;
  bool lock_requested_ = false;
  std::optional<std::vector<Pattern>> locked_;
  std::vector<PutRecord> puts_;
};

struct BeginStepResult {
  enum class Status { Ok, NotReady, EndOfStream } status = Status::NotReady;
  StepId step;
};

std::string_view to_string(BeginStepResult::Status s);

/// Reader side of the step API. One instance per reader rank; begin_step,
/// end_step and close are collective over the reader cohort, gets are not.
class ReaderEngine {
 public:
  /// Collective; waits up to OpenTimeoutSecs for the writer's contact.
  ReaderEngine(Cohort& cohort, const EngineParams& params, ContactOptions contact);
  ~ReaderEngine();

  /// timeout_secs < 0 waits indefinitely.
  BeginStepResult begin_step(double timeout_secs = -1);
  std::optional<VariableBlocks> inquire_variable(const std::string& name) const;
  std::vector<std::string> variable_names() const;
  const FullMetadata& metadata() const;

  /// Deferred: `dest` is filled by perform_gets or end_step and must stay
  /// valid until then. It must hold exactly the selection's bytes.
  void get(const std::string& variable, const BlockExtent& selection, std::span<std::byte> dest);
  void perform_gets();
  /// get followed by perform_gets.
  void get_sync(const std::string& variable, const BlockExtent& selection, std::span<std::byte> dest);
  void end_step();
  void close();
  /// Drops the connections without a goodbye, as a crashed process would.
  void abandon();

  /// Takes effect at the next end_step. Afterwards every step must repeat
  /// that step's gets, in order.
  void lock_reader_selections();

  bool in_step() const { return in_step_; }
  ReaderStream& stream() { return *stream_; }
  ReaderPlaneStats plane_stats() const;

 private:
  struct Selection {
    std::string variable;
    BlockExtent extent;
    friend bool operator==(const Selection&, const Selection&) = default;
  };
  struct PendingGet {
    std::span<std::byte> dest;
    std::vector<ReadPlanEntry> plan;
  };

  Cohort& cohort_;
  std::unique_ptr<ReaderStream> stream_;
  bool in_step_ = false;
  bool closed_ = false;
  StepId step_;
  std::shared_ptr<const FullMetadata> meta_;
  bool writer_locked_ = false;
  bool lock_requested_ = false;
  std::optional<std::vector<Selection>> locked_;
  std::vector<Selection> selections_;
  std::vector<PendingGet> pending_;
  RequestLog log_;
  std::uint32_t read_ordinal_ = 0;
  bool log_published_ = false;
};

}  // namespace sstage
