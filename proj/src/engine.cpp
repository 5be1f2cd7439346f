#include "sstage/engine.hpp"

#include <algorithm>

#include <spdlog/spdlog.h>

namespace sstage {

// ---------------------------------------------------------------------------
// Writer

WriterEngine::WriterEngine(Cohort& cohort, const EngineParams& params, ContactOptions contact)
    : cohort_(cohort), stream_(std::make_unique<WriterStream>(cohort, params, std::move(contact))) {}

WriterEngine::~WriterEngine() = default;

void WriterEngine::begin_step() {
  if (closed_) throw Error(ErrorCode::StreamClosed, "begin_step after close");
  if (in_step_) throw Error(ErrorCode::ProtocolError, "begin_step inside a step");
  in_step_ = true;
  puts_.clear();
}

void WriterEngine::check_locked(const Pattern& p) const {
  if (!locked_) return;
  const auto i = puts_.size();
  if (i >= locked_->size() || !((*locked_)[i] == p)) {
    throw Error(ErrorCode::PatternChangedAfterLock,
                "put " + std::to_string(i) + " of '" + p.def.name + "' differs from the locked definitions");
  }
}

void WriterEngine::put(const VariableDef& variable, const BlockExtent& extent,
                       std::span<const std::byte> payload) {
  if (!in_step_) throw Error(ErrorCode::NotInStep, "put outside a step");
  if (variable.element_size == 0) throw Error(ErrorCode::ExtentInvalid, "element size 0");
  require_valid_extent(variable.shape, extent);
  const auto len = block_byte_len(variable, extent);
  if (payload.size() != len) {
    throw Error(ErrorCode::LengthMismatch, "payload of " + std::to_string(payload.size()) +
                                               " bytes for a block of " + std::to_string(len));
  }
  for (const auto& p : puts_) {
    if (p.variable.name == variable.name && !(p.variable == variable)) {
      throw Error(ErrorCode::ShapeMismatch, "variable '" + variable.name + "' redefined within a step");
    }
  }
  check_locked({variable, extent});
  puts_.push_back({variable, extent, {payload.begin(), payload.end()}});
}

void WriterEngine::lock_writer_definitions() {
  if (closed_) throw Error(ErrorCode::StreamClosed, "lock after close");
  lock_requested_ = true;
}

EndStepResult WriterEngine::end_step() {
  if (!in_step_) throw Error(ErrorCode::NotInStep, "end_step outside a step");
  if (locked_ && puts_.size() != locked_->size()) {
    throw Error(ErrorCode::PatternChangedAfterLock, "step has " + std::to_string(puts_.size()) +
                                                        " puts, locked definitions have " +
                                                        std::to_string(locked_->size()));
  }
  in_step_ = false;

  // Local data block: payloads concatenated in put order.
  std::size_t total = 0;
  for (const auto& p : puts_) total += p.payload.size();
  auto block = std::make_shared<Bytes>();
  block->reserve(total);
  LocalMetadata local;
  for (const auto& p : puts_) {
    auto it = std::find_if(local.variables.begin(), local.variables.end(),
                           [&](const LocalVariable& v) { return v.def.name == p.variable.name; });
    if (it == local.variables.end()) {
      local.variables.push_back({p.variable, {}});
      it = std::prev(local.variables.end());
    }
    it->blocks.push_back({p.extent, block->size()});
    block->insert(block->end(), p.payload.begin(), p.payload.end());
  }

  if (lock_requested_ && !locked_) {
    locked_.emplace();
    for (const auto& p : puts_) locked_->push_back({p.variable, p.extent});
  }
  puts_.clear();
  const auto r = stream_->provide_timestep(std::move(local), std::move(block), locked_.has_value());
  return {r.step, r.accepted};
}

void WriterEngine::close() {
  if (closed_) throw Error(ErrorCode::StreamClosed, "writer already closed");
  if (in_step_) throw Error(ErrorCode::ProtocolError, "close inside a step");
  closed_ = true;
  stream_->close();
}

// ---------------------------------------------------------------------------
// Reader

std::string_view to_string(BeginStepResult::Status s) {
  switch (s) {
    case BeginStepResult::Status::Ok: return "Ok";
    case BeginStepResult::Status::NotReady: return "NotReady";
    case BeginStepResult::Status::EndOfStream: return "EndOfStream";
  }
  return "?";
}

ReaderEngine::ReaderEngine(Cohort& cohort, const EngineParams& params, ContactOptions contact)
    : cohort_(cohort), stream_(std::make_unique<ReaderStream>(cohort, params, std::move(contact))) {}

ReaderEngine::~ReaderEngine() = default;

BeginStepResult ReaderEngine::begin_step(double timeout_secs) {
  if (closed_) throw Error(ErrorCode::StreamClosed, "begin_step after close");
  if (in_step_) throw Error(ErrorCode::ProtocolError, "begin_step inside a step");
  auto info = stream_->begin_step(timeout_secs);
  BeginStepResult out;
  switch (info.status) {
    case ReaderStepInfo::Status::NotReady: out.status = BeginStepResult::Status::NotReady; return out;
    case ReaderStepInfo::Status::EndOfStream: out.status = BeginStepResult::Status::EndOfStream; return out;
    case ReaderStepInfo::Status::Ok: break;
  }
  in_step_ = true;
  step_ = info.step;
  meta_ = std::move(info.metadata);
  writer_locked_ = info.writer_locked;
  selections_.clear();
  pending_.clear();
  read_ordinal_ = 0;
  out.status = BeginStepResult::Status::Ok;
  out.step = step_;
  return out;
}

const FullMetadata& ReaderEngine::metadata() const {
  if (!in_step_) throw Error(ErrorCode::NotInStep, "no step installed");
  return *meta_;
}

std::optional<VariableBlocks> ReaderEngine::inquire_variable(const std::string& name) const {
  if (!in_step_) throw Error(ErrorCode::NotInStep, "inquire outside a step");
  if (const auto* v = meta_->find(name)) return *v;
  return std::nullopt;
}

std::vector<std::string> ReaderEngine::variable_names() const {
  if (!in_step_) throw Error(ErrorCode::NotInStep, "inquire outside a step");
  std::vector<std::string> out;
  for (const auto& [name, v] : meta_->variables) out.push_back(name);
  return out;
}

void ReaderEngine::get(const std::string& variable, const BlockExtent& selection, std::span<std::byte> dest) {
  if (!in_step_) throw Error(ErrorCode::NotInStep, "get outside a step");
  const auto* v = meta_->find(variable);
  if (!v) throw Error(ErrorCode::UnknownVariable, "no variable '" + variable + "' in step " +
                                                      std::to_string(step_.value));
  require_valid_extent(v->def.shape, selection);
  const auto len = block_byte_len(v->def, selection);
  if (dest.size() != len) {
    throw Error(ErrorCode::LengthMismatch, "destination of " + std::to_string(dest.size()) +
                                               " bytes for a selection of " + std::to_string(len));
  }
  Selection sel{variable, selection};
  if (locked_) {
    const auto i = selections_.size();
    if (i >= locked_->size() || !((*locked_)[i] == sel)) {
      throw Error(ErrorCode::PatternChangedAfterLock,
                  "get " + std::to_string(i) + " of '" + variable + "' differs from the locked selections");
    }
  }
  auto plan = plan_reads(*meta_, variable, selection);
  selections_.push_back(std::move(sel));
  pending_.push_back({dest, std::move(plan)});
}

void ReaderEngine::perform_gets() {
  if (!in_step_) throw Error(ErrorCode::NotInStep, "perform_gets outside a step");
  auto& dp = stream_->data_plane();
  std::vector<ReadHandle> handles;
  // Plan entries of one get cover disjoint destination ranges, so each read
  // lands directly in place.
  for (const auto& g : pending_) {
    for (const auto& e : g.plan) {
      auto dest = g.dest.subspan(e.dest_offset, e.length);
      log_.record(step_, e.writer_rank, e.source_offset, e.length, read_ordinal_++);
      if (dp.preload_match(step_, e.writer_rank, e.source_offset, e.length, dest)) continue;
      handles.push_back(dp.post_read(step_, e.writer_rank, e.source_offset, e.length, dest));
    }
  }
  pending_.clear();
  std::optional<Error> first;
  for (const auto& h : handles) {
    try {
      dp.wait(h);
    } catch (const Error& e) {
      if (!first) first = e;
    }
  }
  if (first) throw *first;
}

void ReaderEngine::get_sync(const std::string& variable, const BlockExtent& selection,
                            std::span<std::byte> dest) {
  get(variable, selection, dest);
  perform_gets();
}

void ReaderEngine::lock_reader_selections() {
  if (closed_) throw Error(ErrorCode::StreamClosed, "lock after close");
  lock_requested_ = true;
  stream_->set_locked(true);
}

void ReaderEngine::end_step() {
  if (!in_step_) throw Error(ErrorCode::NotInStep, "end_step outside a step");
  if (locked_ && selections_.size() != locked_->size()) {
    in_step_ = false;
    throw Error(ErrorCode::PatternChangedAfterLock, "step has " + std::to_string(selections_.size()) +
                                                        " gets, locked selections have " +
                                                        std::to_string(locked_->size()));
  }
  std::optional<Error> failed;
  try {
    perform_gets();
  } catch (const Error& e) {
    failed = e;
  }
  in_step_ = false;
  if (lock_requested_ && !locked_) locked_ = selections_;

  auto& dp = stream_->data_plane();
  const bool double_buffer = stream_->preload() == PreloadMode::DoubleBuffer;
  if (double_buffer && locked_ && writer_locked_ && !log_published_ && !failed) {
    try {
      dp.publish_log(step_, log_);
      log_published_ = true;
    } catch (const Error& e) {
      spdlog::info("request log not published: {}", e.what());
    }
  }
  dp.release_step(step_, double_buffer);
  log_.drop_before(step_.next());
  stream_->end_step(step_, locked_.has_value());
  meta_.reset();
  if (failed) throw *failed;
}

void ReaderEngine::close() {
  if (closed_) throw Error(ErrorCode::StreamClosed, "reader already closed");
  closed_ = true;
  in_step_ = false;
  pending_.clear();
  stream_->close();
}

void ReaderEngine::abandon() {
  closed_ = true;
  in_step_ = false;
  pending_.clear();
  stream_->abandon();
}

ReaderPlaneStats ReaderEngine::plane_stats() const { return stream_->data_plane().stats(); }

}  // namespace sstage
