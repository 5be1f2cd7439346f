#include "sstage/control_plane.hpp"

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <deque>
#include <iostream>

#include <spdlog/spdlog.h>

#include "sstage/step_queue.hpp"

namespace sstage {

using Clock = std::chrono::steady_clock;

std::string_view to_string(StreamEventKind k) {
  switch (k) {
    case StreamEventKind::EndStepEnter: return "EndStepEnter";
    case StreamEventKind::EndStepReturn: return "EndStepReturn";
    case StreamEventKind::Accepted: return "Accepted";
    case StreamEventKind::Discarded: return "Discarded";
    case StreamEventKind::Provided: return "Provided";
    case StreamEventKind::Released: return "Released";
    case StreamEventKind::ForceReleased: return "ForceReleased";
    case StreamEventKind::ReaderActivated: return "ReaderActivated";
    case StreamEventKind::ReaderClosed: return "ReaderClosed";
    case StreamEventKind::ReaderFailed: return "ReaderFailed";
    case StreamEventKind::CloseEnter: return "CloseEnter";
    case StreamEventKind::CloseReturn: return "CloseReturn";
  }
  return "?";
}

void EventLog::add(StreamEventKind kind, StepId step, ReaderId reader) {
  std::lock_guard lk(mu_);
  events_.push_back({events_.size(), kind, step, reader});
}

std::vector<StreamEvent> EventLog::snapshot() const {
  std::lock_guard lk(mu_);
  return events_;
}

std::vector<StepId> EventLog::steps(StreamEventKind kind, std::optional<ReaderId> reader) const {
  std::lock_guard lk(mu_);
  std::vector<StepId> out;
  for (const auto& e : events_) {
    if (e.kind == kind && (!reader || e.reader == *reader)) out.push_back(e.step);
  }
  return out;
}

std::optional<std::uint64_t> EventLog::seq_of(StreamEventKind kind, StepId step) const {
  std::lock_guard lk(mu_);
  for (const auto& e : events_) {
    if (e.kind == kind && e.step == step) return e.seq;
  }
  return std::nullopt;
}

std::filesystem::path ContactOptions::resolved_dir() const {
  if (!contact_dir.empty()) return contact_dir;
  if (const char* env = std::getenv(kEnvContactDir); env && *env) return env;
  return std::filesystem::current_path();
}

namespace {

/// Runs `fn` on rank 0 and broadcasts its result, or its failure, to every
/// rank so that a root-side error cannot strand the others in a collective.
template <typename Fn>
Bytes root_outcome(Cohort& cohort, Fn fn) {
  Bytes payload;
  if (cohort.rank() == 0) {
    Bytes result;
    std::optional<Error> err;
    try {
      result = fn();
    } catch (const Error& e) {
      err = e;
    } catch (const std::exception& e) {
      err = Error(ErrorCode::ProtocolError, e.what());
    }
    ByteWriter w(payload);
    if (err) {
      w.u8(1);
      w.u32(static_cast<std::uint32_t>(err->code()));
      w.str(err->what());
    } else {
      w.u8(0);
      w.blob(result);
    }
  }
  const auto got = cohort.broadcast(payload);
  ByteReader r(got);
  if (r.u8() == 1) {
    const auto code = static_cast<ErrorCode>(r.u32());
    auto what = r.str();
    // The message already carries the "Code: " prefix.
    const auto prefix = std::string(to_string(code)) + ": ";
    if (what.rfind(prefix, 0) == 0) what.erase(0, prefix.size());
    throw Error(code, what);
  }
  return r.blob();
}

struct InboxItem {
  enum class Kind { Message, Lost } kind = Kind::Message;
  ReaderId reader = 0;
  wire::Message msg;
  std::shared_ptr<net::Connection> conn;
};

/// Handler threads push, the application context pops.
class Inbox {
 public:
  void push(InboxItem item) {
    {
      std::lock_guard lk(mu_);
      q_.push_back(std::move(item));
    }
    cv_.notify_all();
  }
  std::optional<InboxItem> pop(bool block) {
    std::unique_lock lk(mu_);
    if (block) cv_.wait(lk, [&] { return !q_.empty(); });
    if (q_.empty()) return std::nullopt;
    auto item = std::move(q_.front());
    q_.pop_front();
    return item;
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<InboxItem> q_;
};

constexpr std::uint32_t kNoBuffer = ~0u;

/// What writer rank 0 decided in one provide_timestep; identical on all ranks.
struct StepStatus {
  StepId step;
  bool accepted = true;
  std::vector<ReaderId> recipients;
  std::vector<StepId> unregister;
  std::vector<ReaderId> removed;
  std::vector<ReaderId> finalize;                          // Queued: adopt learned pattern
  std::vector<std::pair<ReaderId, StepId>> learn;          // Queued: record requests for step
  std::vector<std::pair<ReaderId, std::uint32_t>> pushes;  // push this step (buffer or kNoBuffer)

  Bytes encode() const {
    Bytes out;
    ByteWriter w(out);
    w.u64(step.value);
    w.u8(accepted ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(recipients.size()));
    for (auto r : recipients) w.u32(r);
    w.u32(static_cast<std::uint32_t>(unregister.size()));
    for (auto s : unregister) w.u64(s.value);
    w.u32(static_cast<std::uint32_t>(removed.size()));
    for (auto r : removed) w.u32(r);
    w.u32(static_cast<std::uint32_t>(finalize.size()));
    for (auto r : finalize) w.u32(r);
    w.u32(static_cast<std::uint32_t>(learn.size()));
    for (auto [r, s] : learn) {
      w.u32(r);
      w.u64(s.value);
    }
    w.u32(static_cast<std::uint32_t>(pushes.size()));
    for (auto [r, b] : pushes) {
      w.u32(r);
      w.u32(b);
    }
    return out;
  }

  static StepStatus decode(std::span<const std::byte> in) {
    ByteReader r(in);
    StepStatus s;
    s.step = StepId{r.u64()};
    s.accepted = r.u8() == 1;
    s.recipients.resize(r.count(4));
    for (auto& x : s.recipients) x = r.u32();
    s.unregister.resize(r.count(8));
    for (auto& x : s.unregister) x = StepId{r.u64()};
    s.removed.resize(r.count(4));
    for (auto& x : s.removed) x = r.u32();
    s.finalize.resize(r.count(4));
    for (auto& x : s.finalize) x = r.u32();
    s.learn.resize(r.count(12));
    for (auto& [a, b] : s.learn) {
      a = r.u32();
      b = StepId{r.u64()};
    }
    s.pushes.resize(r.count(8));
    for (auto& [a, b] : s.pushes) {
      a = r.u32();
      b = r.u32();
    }
    r.expect_done("step status");
    return s;
  }
};

}  // namespace

// ===========================================================================
// Writer

struct WriterStream::Impl {
  enum class ReaderState { Opening, Active, Closed, Failed };
  enum class Learn { None, Armed, Learning, Learned };

  struct Registration {
    ReaderState state = ReaderState::Opening;
    std::shared_ptr<net::Connection> conn;
    std::uint32_t ranks = 0;
    bool locked = false;
    Learn learn = Learn::None;
    StepId learn_step;
    bool double_buffer = false;
    std::array<std::optional<StepId>, 2> slots;
    std::uint32_t next_slot = 0;
  };

  struct StoredStep {
    FullMetadata meta;
    bool writer_locked = false;
  };

  Impl(Cohort& c, const EngineParams& p, ContactOptions co)
      : cohort(c),
        params(p),
        copts(std::move(co)),
        queue({p.queue_limit, p.reserve_queue_limit, p.step_distribution}) {}

  Cohort& cohort;
  EngineParams params;
  ContactOptions copts;
  wire::StreamId stream;
  std::unique_ptr<WriterDataPlane> dp;
  EventLog events;
  WriterStreamStats counters;
  std::uint64_t next_step = 0;
  std::optional<StepId> last_accepted;
  bool closed = false;

  // Rank 0 only.
  std::unique_ptr<net::Server> server;
  ContactRecord contact;
  std::filesystem::path contact_dir;
  std::vector<wire::RankContact> writer_contacts;
  Inbox inbox;
  std::atomic<ReaderId> next_reader{1};
  StepQueue queue;
  std::map<ReaderId, Registration> readers;
  std::map<StepId, StoredStep> stored;
  bool writer_locked = false;
  bool closing = false;
  std::vector<StepId> pending_unregister;
  std::vector<ReaderId> pending_removed;
  std::vector<ReaderId> pending_finalize;

  bool root() const { return cohort.rank() == 0; }
  wire::Sender self() const { return {wire::Role::Writer, 0, static_cast<std::uint32_t>(cohort.rank())}; }

  void on_control_frame(net::Connection& conn, net::Frame&& f) {
    wire::Message m;
    try {
      m = wire::decode(f);
    } catch (const Error& e) {
      spdlog::warn("writer control: {}", e.what());
      conn.close();
      return;
    }
    if (m.stream != stream || m.sender.role != wire::Role::Reader) {
      spdlog::warn("writer control: message for another stream ignored");
      return;
    }
    if (std::holds_alternative<wire::ReaderJoin>(m.body)) {
      const auto id = next_reader++;
      conn.tag = id;
      // Queued before the handshake goes out, so a reader whose open has
      // returned is always visible to the next pump.
      inbox.push({InboxItem::Kind::Message, id, std::move(m), conn.shared_from_this()});
      // Answered here so a joining reader never waits on the writer's compute.
      try {
        wire::send(conn, {stream, self(),
                          wire::WriterHandshake{id, writer_contacts, params.step_distribution,
                                                params.preload_mode}});
      } catch (const Error& e) {
        spdlog::warn("writer control: handshake to reader {} failed: {}", id, e.what());
      }
      return;
    }
    const auto tag = conn.tag.load();
    if (tag == ~0ull) {
      spdlog::warn("writer control: {} before ReaderJoin", wire::name_of(wire::type_of(m.body)));
      return;
    }
    inbox.push({InboxItem::Kind::Message, static_cast<ReaderId>(tag), std::move(m), nullptr});
  }

  void on_control_close(net::Connection& conn) {
    const auto tag = conn.tag.load();
    if (tag != ~0ull) inbox.push({InboxItem::Kind::Lost, static_cast<ReaderId>(tag), {}, nullptr});
  }

  // --- rank 0 protocol state transitions --------------------------------

  void collect_freed() {
    for (auto s : queue.take_freed()) {
      stored.erase(s);
      pending_unregister.push_back(s);
    }
  }

  /// A failed send counts as a reader failure unless `best_effort` is set.
  void send_to(ReaderId id, wire::Body body, bool best_effort = false) {
    auto it = readers.find(id);
    if (it == readers.end() || !it->second.conn) return;
    try {
      wire::send(*it->second.conn, {stream, self(), std::move(body)});
    } catch (const Error& e) {
      if (best_effort) return;
      spdlog::info("reader {} unreachable: {}", id, e.what());
      remove_reader(id, ReaderState::Failed);
    }
  }

  void provide(ReaderId id, StepId step, std::vector<wire::PreloadNotice> manifest) {
    auto s = stored.find(step);
    if (s == stored.end()) return;
    events.add(StreamEventKind::Provided, step, id);
    send_to(id, wire::ProvideMetadata{s->second.meta, s->second.writer_locked, std::move(manifest)});
  }

  void remove_reader(ReaderId id, ReaderState why) {
    auto it = readers.find(id);
    if (it == readers.end()) return;
    auto& reg = it->second;
    if (reg.state == ReaderState::Closed || reg.state == ReaderState::Failed) return;
    reg.state = why;
    for (auto s : queue.remove_reader(id)) events.add(StreamEventKind::ForceReleased, s, id);
    events.add(why == ReaderState::Closed ? StreamEventKind::ReaderClosed : StreamEventKind::ReaderFailed,
               {}, id);
    pending_removed.push_back(id);
    if (reg.conn) reg.conn->close();
    collect_freed();
  }

  void arm_preload(Registration& reg) {
    if (!reg.locked || !writer_locked) return;
    if (params.preload_mode == PreloadMode::Queued && reg.learn == Learn::None) reg.learn = Learn::Armed;
    if (params.preload_mode == PreloadMode::DoubleBuffer) reg.double_buffer = true;
  }

  void handle(InboxItem item) {
    const auto id = item.reader;
    if (item.kind == InboxItem::Kind::Lost) {
      remove_reader(id, ReaderState::Failed);
      return;
    }
    auto& body = item.msg.body;
    if (auto* join = std::get_if<wire::ReaderJoin>(&body)) {
      auto& reg = readers[id];
      reg.conn = item.conn;
      reg.ranks = static_cast<std::uint32_t>(join->reader_contacts.size());
      return;
    }
    auto it = readers.find(id);
    if (it == readers.end()) return;
    auto& reg = it->second;
    if (std::holds_alternative<wire::ReaderActivate>(body)) {
      if (reg.state != ReaderState::Opening) return;
      reg.state = ReaderState::Active;
      events.add(StreamEventKind::ReaderActivated, {}, id);
      for (auto s : queue.add_reader(id)) provide(id, s, {});
      if (closing) send_to(id, wire::WriterClose{last_accepted});
    } else if (auto* rel = std::get_if<wire::ReleaseStep>(&body)) {
      if (!queue.release(id, rel->step)) {
        spdlog::warn("duplicate or unknown release of step {} by reader {}", rel->step.value, id);
        return;
      }
      events.add(StreamEventKind::Released, rel->step, id);
      reg.locked = rel->reader_locked;
      if (reg.learn == Learn::Learning && rel->step == reg.learn_step) {
        reg.learn = Learn::Learned;
        pending_finalize.push_back(id);
      }
      for (auto& slot : reg.slots) {
        if (slot && *slot <= rel->step) slot.reset();
      }
      arm_preload(reg);
      collect_freed();
    } else if (std::holds_alternative<wire::RequestStep>(body)) {
      if (reg.state != ReaderState::Active) return;
      if (auto s = queue.request_step(id)) provide(id, *s, {});
    } else if (std::holds_alternative<wire::ReaderClose>(body)) {
      remove_reader(id, ReaderState::Closed);
    } else {
      spdlog::warn("writer control: unexpected {} from reader {}", wire::name_of(wire::type_of(body)), id);
    }
  }

  /// Processes queued reader messages; with `block`, waits for at least one.
  void pump(bool block) {
    auto first = inbox.pop(block);
    if (!first) return;
    handle(std::move(*first));
    while (auto next = inbox.pop(false)) handle(std::move(*next));
  }

  std::size_t count(ReaderState st) const {
    return static_cast<std::size_t>(std::count_if(readers.begin(), readers.end(),
                                                  [&](const auto& kv) { return kv.second.state == st; }));
  }

  void apply_common(const StepStatus& st) {
    for (auto s : st.unregister) dp->unregister_step(s);
    for (auto r : st.removed) dp->forget_reader(r);
    for (auto r : st.finalize) dp->finish_learning(r);
    for (auto [r, s] : st.learn) dp->begin_learning(r, s);
  }
};

WriterStream::WriterStream(Cohort& cohort, const EngineParams& params, ContactOptions contact)
    : impl_(std::make_unique<Impl>(cohort, params, std::move(contact))) {
  auto& d = *impl_;
  Bytes id_bytes;
  if (d.root()) {
    d.stream = wire::StreamId::random();
    id_bytes.assign(reinterpret_cast<const std::byte*>(d.stream.bytes.data()),
                    reinterpret_cast<const std::byte*>(d.stream.bytes.data()) + 16);
  }
  id_bytes = cohort.broadcast(id_bytes);
  if (id_bytes.size() != 16) throw Error(ErrorCode::ProtocolError, "stream id broadcast");
  for (std::size_t i = 0; i < 16; ++i) d.stream.bytes[i] = std::to_integer<std::uint8_t>(id_bytes[i]);

  d.dp = std::make_unique<WriterDataPlane>(static_cast<std::uint32_t>(cohort.rank()), d.stream,
                                           params.preload_mode);
  auto contacts = cohort.gather(d.dp->contact());

  root_outcome(cohort, [&]() -> Bytes {
    for (auto& c : contacts) d.writer_contacts.push_back({"", std::move(c)});
    d.server = std::make_unique<net::Server>(
        [&d](net::Connection& c, net::Frame&& f) { d.on_control_frame(c, std::move(f)); },
        [&d](net::Connection& c) { d.on_control_close(c); });
    d.writer_contacts[0].control = d.server->endpoint().token();
    d.contact = {1, d.stream, d.server->endpoint().host, d.server->endpoint().port};
    if (d.copts.screen) {
      auto& out = d.copts.screen_out ? *d.copts.screen_out : std::cout;
      out << d.contact.to_text() << std::endl;
    } else {
      d.contact_dir = d.copts.resolved_dir();
      write_contact_file(d.contact_dir, d.copts.stream_name, d.contact);
    }
    while (d.count(Impl::ReaderState::Active) < d.params.rendezvous_reader_count) d.pump(true);
    return {};
  });
}

WriterStream::~WriterStream() {
  auto& d = *impl_;
  if (!d.closed && d.root()) {
    if (!d.contact_dir.empty()) remove_contact_file(d.contact_dir, d.copts.stream_name);
  }
  if (d.server) d.server->stop();
  if (d.dp) d.dp->shutdown();
}

int WriterStream::rank() const { return impl_->cohort.rank(); }
bool WriterStream::closed() const { return impl_->closed; }
const EventLog& WriterStream::events() const { return impl_->events; }
ContactRecord WriterStream::contact() const { return impl_->contact; }
WriterDataPlane& WriterStream::data_plane() { return *impl_->dp; }
std::vector<StepId> WriterStream::queued_steps() const { return impl_->queue.main_steps(); }
std::vector<StepId> WriterStream::reserve_steps() const { return impl_->queue.reserve_steps(); }

WriterStreamStats WriterStream::stats() const {
  auto s = impl_->counters;
  s.active_readers = impl_->count(Impl::ReaderState::Active);
  return s;
}

WriterStream::Provided WriterStream::provide_timestep(LocalMetadata local,
                                                      std::shared_ptr<const Bytes> block,
                                                      bool writer_locked) {
  auto& d = *impl_;
  if (d.closed) throw Error(ErrorCode::StreamClosed, "provide_timestep after close");
  const StepId step{d.next_step++};
  if (d.root()) d.events.add(StreamEventKind::EndStepEnter, step);

  local.writer_rank = static_cast<std::uint32_t>(d.cohort.rank());
  local.dp_registration = d.dp->register_step(step, std::move(block));

  Bytes status_bytes;
  if (d.root()) {
    d.writer_locked = writer_locked;
    d.pump(false);
    StepStatus st;
    st.step = step;
    while (d.queue.full()) {
      if (d.params.queue_full_policy == QueueFullPolicy::Discard) {
        st.accepted = false;
        break;
      }
      d.counters.reader_message_waits++;
      d.pump(true);
    }
    if (st.accepted) {
      st.recipients = d.queue.push(step);
      d.events.add(StreamEventKind::Accepted, step);
      d.counters.accepted++;
      for (auto r : st.recipients) {
        auto& reg = d.readers[r];
        if (d.params.preload_mode == PreloadMode::Queued) {
          if (reg.learn == Impl::Learn::Armed) {
            reg.learn = Impl::Learn::Learning;
            reg.learn_step = step;
            st.learn.emplace_back(r, step);
          } else if (reg.learn == Impl::Learn::Learned) {
            st.pushes.emplace_back(r, kNoBuffer);
          }
        } else if (d.params.preload_mode == PreloadMode::DoubleBuffer && reg.double_buffer) {
          // Alternate buffers; a buffer is reusable once its step was released.
          for (std::uint32_t k = 0; k < 2; ++k) {
            const auto b = (reg.next_slot + k) % 2;
            if (!reg.slots[b]) {
              reg.slots[b] = step;
              reg.next_slot = 1 - b;
              st.pushes.emplace_back(r, b);
              break;
            }
          }
        }
      }
      d.collect_freed();
    } else {
      d.events.add(StreamEventKind::Discarded, step);
      d.counters.discarded++;
    }
    st.unregister.swap(d.pending_unregister);
    st.removed.swap(d.pending_removed);
    st.finalize.swap(d.pending_finalize);
    status_bytes = st.encode();
  }
  const auto st = StepStatus::decode(d.cohort.broadcast(status_bytes));
  d.apply_common(st);
  if (!st.accepted) {
    d.dp->unregister_step(step);
    if (d.root()) d.events.add(StreamEventKind::EndStepReturn, step);
    return {step, false};
  }
  d.last_accepted = step;

  // Push before the gather so the manifest below is exact.
  Bytes part = encode_local_metadata(local);
  ByteWriter w(part);
  std::vector<std::pair<ReaderId, std::uint32_t>> pushed;
  for (auto [r, b] : st.pushes) {
    const auto buffer = b == kNoBuffer ? std::nullopt : std::optional<std::uint32_t>(b);
    for (auto rank : d.dp->push_step(r, step, buffer)) pushed.emplace_back(r, rank);
  }
  // Trailer after the metadata encoding: u32 n | (u32 reader, u32 reader rank)*.
  w.u32(static_cast<std::uint32_t>(pushed.size()));
  for (auto [r, rank] : pushed) {
    w.u32(r);
    w.u32(rank);
  }
  auto parts = d.cohort.gather(part);

  if (d.root()) {
    std::vector<LocalMetadata> locals;
    std::map<ReaderId, std::vector<wire::PreloadNotice>> manifests;
    for (std::uint32_t rank = 0; rank < parts.size(); ++rank) {
      ByteReader r(parts[rank]);
      r.u32();
      const auto body_len = r.u32();
      const auto meta_len = 8 + static_cast<std::size_t>(body_len);
      if (meta_len > parts[rank].size()) throw Error(ErrorCode::DecodeError, "gathered metadata truncated");
      locals.push_back(decode_local_metadata(std::span(parts[rank]).first(meta_len)));
      ByteReader t{std::span<const std::byte>(parts[rank]).subspan(meta_len)};
      const auto n = t.count(8);
      for (std::size_t i = 0; i < n; ++i) {
        const auto reader = t.u32();
        const auto reader_rank = t.u32();
        manifests[reader].push_back({rank, reader_rank});
      }
    }
    d.stored[step] = {aggregate_metadata(step, locals), writer_locked};
    for (auto r : st.recipients) d.provide(r, step, manifests[r]);
    d.events.add(StreamEventKind::EndStepReturn, step);
  }
  return {step, true};
}

void WriterStream::close() {
  auto& d = *impl_;
  if (d.closed) throw Error(ErrorCode::StreamClosed, "writer stream already closed");
  d.closed = true;
  root_outcome(d.cohort, [&]() -> Bytes {
    d.events.add(StreamEventKind::CloseEnter);
    d.pump(false);
    while (d.count(Impl::ReaderState::Opening) > 0) d.pump(true);
    d.closing = true;
    d.queue.drop_reserve();
    d.collect_freed();
    for (auto& [id, reg] : d.readers) {
      if (reg.state == Impl::ReaderState::Active) d.send_to(id, wire::WriterClose{d.last_accepted});
    }
    while (!d.queue.drained() || d.count(Impl::ReaderState::Opening) > 0) d.pump(true);
    for (auto& [id, reg] : d.readers) {
      if (reg.state == Impl::ReaderState::Active) d.send_to(id, wire::EndOfStream{}, true);
    }
    d.queue.clear();
    d.collect_freed();
    d.stored.clear();
    if (!d.contact_dir.empty()) remove_contact_file(d.contact_dir, d.copts.stream_name);
    d.events.add(StreamEventKind::CloseReturn);
    return {};
  });
  d.dp->shutdown();
  if (d.server) d.server->stop();
}

// ===========================================================================
// Reader

struct ReaderStream::Impl {
  Impl(Cohort& c, const EngineParams& p, ContactOptions co) : cohort(c), params(p), copts(std::move(co)) {}

  Cohort& cohort;
  EngineParams params;
  ContactOptions copts;
  ReaderId id = 0;
  wire::StreamId stream;
  StepDistribution distribution = StepDistribution::AllToAll;
  PreloadMode preload = PreloadMode::Off;
  std::uint32_t writers = 0;
  std::unique_ptr<ReaderDataPlane> dp;
  bool closed = false;
  std::atomic<bool> locked{false};

  // Rank 0 only.
  std::shared_ptr<net::Connection> conn;
  mutable std::mutex mu;
  std::condition_variable cv;
  std::optional<wire::WriterHandshake> handshake;
  std::deque<wire::ProvideMetadata> queue;
  bool writer_closed = false;
  bool eos = false;
  bool lost = false;
  bool request_outstanding = false;
  ReaderStreamStats counters;

  wire::Sender self() const {
    return {wire::Role::Reader, id, static_cast<std::uint32_t>(cohort.rank())};
  }

  void on_frame(net::Connection& c, net::Frame&& f) {
    wire::Message m;
    try {
      m = wire::decode(f);
    } catch (const Error& e) {
      spdlog::warn("reader control: {}", e.what());
      return;
    }
    if (m.stream != stream) return;
    std::vector<StepId> replaced;
    {
      std::lock_guard lk(mu);
      if (auto* h = std::get_if<wire::WriterHandshake>(&m.body)) {
        handshake = *h;
        id = h->reader_id;
      } else if (auto* p = std::get_if<wire::ProvideMetadata>(&m.body)) {
        if (params.always_provide_latest) {
          for (const auto& q : queue) replaced.push_back(q.metadata.step);
          queue.clear();
          counters.replaced_steps += replaced.size();
        }
        queue.push_back(std::move(*p));
      } else if (std::holds_alternative<wire::WriterClose>(m.body)) {
        writer_closed = true;
      } else if (std::holds_alternative<wire::EndOfStream>(m.body)) {
        eos = true;
      } else {
        spdlog::warn("reader control: unexpected {}", wire::name_of(wire::type_of(m.body)));
      }
    }
    for (auto s : replaced) {
      try {
        wire::send(c, {stream, self(), wire::ReleaseStep{s, id, locked.load()}});
      } catch (const Error&) {
      }
    }
    cv.notify_all();
  }

  void on_close() {
    {
      std::lock_guard lk(mu);
      lost = true;
    }
    cv.notify_all();
  }
};

ReaderStream::ReaderStream(Cohort& cohort, const EngineParams& params, ContactOptions contact)
    : impl_(std::make_unique<Impl>(cohort, params, std::move(contact))) {
  auto& d = *impl_;
  const auto info = root_outcome(cohort, [&]() -> Bytes {
    const auto deadline = Clock::now() + std::chrono::duration<double>(params.open_timeout_secs);
    const auto rec = d.copts.contact_text
                         ? ContactRecord::from_text(*d.copts.contact_text)
                         : wait_for_contact_file(d.copts.resolved_dir(), d.copts.stream_name,
                                                 params.open_timeout_secs);
    d.stream = rec.stream;
    const auto left = std::chrono::duration<double>(deadline - Clock::now()).count();
    auto sock = net::connect(rec.endpoint(), std::max(left, 0.0));
    d.conn = net::Connection::start(
        std::move(sock), [&d](net::Connection& c, net::Frame&& f) { d.on_frame(c, std::move(f)); },
        [&d](net::Connection&) { d.on_close(); });
    std::vector<wire::RankContact> mine(static_cast<std::size_t>(cohort.size()));
    wire::send(*d.conn, {d.stream, {wire::Role::Reader, 0, 0}, wire::ReaderJoin{mine}});
    {
      std::unique_lock lk(d.mu);
      if (!d.cv.wait_until(lk, deadline, [&] { return d.handshake || d.lost; })) {
        throw Error(ErrorCode::OpenTimeout, "no handshake from the writer");
      }
      if (!d.handshake) throw Error(ErrorCode::ConnectionLost, "writer closed the connection during handshake");
    }
    wire::send(*d.conn, {d.stream, d.self(), wire::ReaderActivate{}});
    Bytes out;
    ByteWriter w(out);
    w.u32(d.handshake->reader_id);
    for (auto b : d.stream.bytes) w.u8(b);
    w.u8(static_cast<std::uint8_t>(d.handshake->distribution));
    w.u8(static_cast<std::uint8_t>(d.handshake->preload));
    w.u32(static_cast<std::uint32_t>(d.handshake->writer_contacts.size()));
    return out;
  });
  ByteReader r(info);
  d.id = r.u32();
  for (auto& b : d.stream.bytes) b = r.u8();
  d.distribution = static_cast<StepDistribution>(r.u8());
  d.preload = static_cast<PreloadMode>(r.u8());
  d.writers = r.u32();
  d.dp = std::make_unique<ReaderDataPlane>(d.stream, d.id, static_cast<std::uint32_t>(cohort.rank()),
                                           d.preload);
}

ReaderStream::~ReaderStream() {
  if (!impl_->closed) abandon();
}

int ReaderStream::rank() const { return impl_->cohort.rank(); }
ReaderId ReaderStream::id() const { return impl_->id; }
StepDistribution ReaderStream::distribution() const { return impl_->distribution; }
PreloadMode ReaderStream::preload() const { return impl_->preload; }
std::uint32_t ReaderStream::writer_count() const { return impl_->writers; }
ReaderDataPlane& ReaderStream::data_plane() { return *impl_->dp; }
bool ReaderStream::closed() const { return impl_->closed; }
void ReaderStream::set_locked(bool locked) { impl_->locked = locked; }

ReaderStreamStats ReaderStream::stats() const {
  std::lock_guard lk(impl_->mu);
  return impl_->counters;
}

ReaderStepInfo ReaderStream::begin_step(double timeout_secs) {
  auto& d = *impl_;
  if (d.closed) throw Error(ErrorCode::StreamClosed, "begin_step after close");
  enum : std::uint8_t { kOk, kNotReady, kEnd };
  const auto decision = root_outcome(d.cohort, [&]() -> Bytes {
    std::unique_lock lk(d.mu);
    const bool on_demand = d.distribution == StepDistribution::OnDemand;
    if (on_demand && !d.request_outstanding && !d.eos && !d.lost) {
      d.request_outstanding = true;
      d.counters.step_requests++;
      lk.unlock();
      try {
        wire::send(*d.conn, {d.stream, d.self(), wire::RequestStep{d.id}});
      } catch (const Error&) {
      }
      lk.lock();
    }
    auto ready = [&] {
      return !d.queue.empty() || d.eos || d.lost || (d.writer_closed && !on_demand);
    };
    if (timeout_secs < 0) {
      d.cv.wait(lk, ready);
    } else {
      d.cv.wait_for(lk, std::chrono::duration<double>(timeout_secs), ready);
    }
    Bytes out;
    ByteWriter w(out);
    if (!d.queue.empty()) {
      auto p = std::move(d.queue.front());
      d.queue.pop_front();
      d.request_outstanding = false;
      w.u8(kOk);
      w.u8(p.writer_locked ? 1 : 0);
      w.u32(static_cast<std::uint32_t>(p.preload.size()));
      for (const auto& n : p.preload) {
        w.u32(n.writer_rank);
        w.u32(n.reader_rank);
      }
      w.blob(encode_full_metadata(p.metadata));
    } else if (d.eos || (d.writer_closed && !on_demand)) {
      w.u8(kEnd);
    } else if (d.lost) {
      throw Error(ErrorCode::ConnectionLost, "lost the writer's control connection");
    } else {
      w.u8(kNotReady);
    }
    return out;
  });

  ByteReader r(decision);
  ReaderStepInfo info;
  switch (r.u8()) {
    case kNotReady: info.status = ReaderStepInfo::Status::NotReady; return info;
    case kEnd: info.status = ReaderStepInfo::Status::EndOfStream; return info;
    default: break;
  }
  info.status = ReaderStepInfo::Status::Ok;
  info.writer_locked = r.u8() == 1;
  std::vector<std::uint32_t> pushing;
  const auto n = r.count(8);
  for (std::size_t i = 0; i < n; ++i) {
    const auto w = r.u32();
    if (r.u32() == static_cast<std::uint32_t>(d.cohort.rank())) pushing.push_back(w);
  }
  auto meta = std::make_shared<FullMetadata>(decode_full_metadata(r.blob()));
  info.step = meta->step;
  d.dp->install_step(meta->step, meta->dp_registration, std::move(pushing));
  info.metadata = std::move(meta);
  return info;
}

void ReaderStream::end_step(StepId step, bool reader_locked) {
  auto& d = *impl_;
  if (d.closed) throw Error(ErrorCode::StreamClosed, "end_step after close");
  d.locked = reader_locked;
  d.cohort.barrier();
  if (d.cohort.rank() == 0) {
    try {
      wire::send(*d.conn, {d.stream, d.self(), wire::ReleaseStep{step, d.id, reader_locked}});
    } catch (const Error& e) {
      spdlog::info("release of step {} not delivered: {}", step.value, e.what());
    }
  }
}

void ReaderStream::close() {
  auto& d = *impl_;
  if (d.closed) throw Error(ErrorCode::StreamClosed, "reader stream already closed");
  d.closed = true;
  try {
    d.cohort.barrier();
  } catch (const Error&) {
    // A departed rank must not keep the others from closing.
  }
  if (d.conn) {
    bool tell = false;
    {
      std::lock_guard lk(d.mu);
      tell = !d.eos && !d.lost;
    }
    if (tell) {
      try {
        wire::send(*d.conn, {d.stream, d.self(), wire::ReaderClose{d.id}});
      } catch (const Error&) {
      }
    }
    d.conn->close();
  }
  if (d.dp) d.dp->close();
}

void ReaderStream::abandon() {
  auto& d = *impl_;
  d.closed = true;
  if (d.conn) d.conn->close();
  if (d.dp) d.dp->close();
}

}  // namespace sstage
