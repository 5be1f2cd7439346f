#include "sstage/data_plane.hpp"

#include <algorithm>
#include <cstring>

#include <spdlog/spdlog.h>

namespace sstage {

void RequestLog::record(StepId step, std::uint32_t writer_rank, std::uint64_t offset,
                        std::uint64_t length, std::uint32_t dest_token) {
  auto& run = index_[step][writer_rank];
  if (run.size() == run.capacity()) run.reserve(std::max<std::size_t>(4, run.capacity() * 2));
  run.push_back({offset, length, dest_token});
}

const std::vector<wire::LoggedRead>* RequestLog::find(StepId step, std::uint32_t writer_rank) const {
  auto s = index_.find(step);
  if (s == index_.end()) return nullptr;
  auto r = s->second.find(writer_rank);
  return r == s->second.end() ? nullptr : &r->second;
}

std::vector<std::uint32_t> RequestLog::writer_ranks(StepId step) const {
  std::vector<std::uint32_t> out;
  if (auto s = index_.find(step); s != index_.end()) {
    for (const auto& [rank, reads] : s->second) out.push_back(rank);
  }
  return out;
}

void RequestLog::drop_before(StepId step) { index_.erase(index_.begin(), index_.lower_bound(step)); }

// ---------------------------------------------------------------------------

WriterDataPlane::WriterDataPlane(std::uint32_t rank, wire::StreamId stream, PreloadMode mode)
    : rank_(rank), stream_(stream), mode_(mode) {
  server_ = std::make_unique<net::Server>(
      [this](net::Connection& c, net::Frame&& f) { on_frame(c, std::move(f)); }, nullptr);
}

WriterDataPlane::~WriterDataPlane() { shutdown(); }

void WriterDataPlane::shutdown() {
  if (server_) server_->stop();
}

Bytes WriterDataPlane::contact() const { return to_bytes(server_->endpoint().token()); }

Bytes WriterDataPlane::register_step(StepId step, std::shared_ptr<const Bytes> block) {
  std::lock_guard lk(mu_);
  steps_[step] = std::move(block);
  return to_bytes(server_->endpoint().token());
}

void WriterDataPlane::unregister_step(StepId step) {
  std::lock_guard lk(mu_);
  steps_.erase(step);
}

bool WriterDataPlane::is_registered(StepId step) const {
  std::lock_guard lk(mu_);
  return steps_.count(step) != 0;
}

std::size_t WriterDataPlane::registered_count() const {
  std::lock_guard lk(mu_);
  return steps_.size();
}

void WriterDataPlane::begin_learning(ReaderId reader, StepId step) {
  std::lock_guard lk(mu_);
  learning_[reader] = step;
  for (auto it = recorded_.begin(); it != recorded_.end();) {
    it = it->first.reader == reader ? recorded_.erase(it) : std::next(it);
  }
}

void WriterDataPlane::finish_learning(ReaderId reader) {
  std::lock_guard lk(mu_);
  learning_.erase(reader);
  for (auto it = recorded_.begin(); it != recorded_.end();) {
    if (it->first.reader == reader) {
      patterns_[it->first] = std::move(it->second);
      it = recorded_.erase(it);
    } else {
      ++it;
    }
  }
}

void WriterDataPlane::forget_reader(ReaderId reader) {
  std::lock_guard lk(mu_);
  learning_.erase(reader);
  auto drop = [reader](auto& m) {
    for (auto it = m.begin(); it != m.end();) {
      it = it->first.reader == reader ? m.erase(it) : std::next(it);
    }
  };
  drop(recorded_);
  drop(patterns_);
  drop(buffer_released_);
  drop(conns_);
}

bool WriterDataPlane::has_pattern(ReaderRankKey key) const {
  std::lock_guard lk(mu_);
  return patterns_.count(key) != 0;
}

std::optional<StepId> WriterDataPlane::buffer_released(ReaderRankKey key) const {
  std::lock_guard lk(mu_);
  auto it = buffer_released_.find(key);
  if (it == buffer_released_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::uint32_t> WriterDataPlane::push_step(ReaderId reader, StepId step,
                                                      std::optional<std::uint32_t> buffer) {
  struct Out {
    std::uint32_t rank;
    std::shared_ptr<net::Connection> conn;
    wire::Message msg;
  };
  std::vector<Out> outs;
  {
    std::lock_guard lk(mu_);
    auto s = steps_.find(step);
    if (s == steps_.end()) return {};
    const auto& block = *s->second;
    for (const auto& [key, ranges] : patterns_) {
      if (key.reader != reader) continue;
      auto conn = conns_.count(key) ? conns_[key].lock() : nullptr;
      if (!conn || !conn->is_open()) continue;
      wire::PreloadData p{step, buffer.value_or(0), ranges, {}};
      bool fits = true;
      for (const auto& r : ranges) {
        if (r.offset > block.size() || r.length > block.size() - r.offset) {
          fits = false;
          break;
        }
        p.data.insert(p.data.end(), block.begin() + static_cast<std::ptrdiff_t>(r.offset),
                      block.begin() + static_cast<std::ptrdiff_t>(r.offset + r.length));
      }
      if (!fits) continue;
      outs.push_back({key.rank, conn, {stream_, {wire::Role::Writer, 0, rank_}, std::move(p)}});
    }
  }
  std::vector<std::uint32_t> pushed;
  for (auto& o : outs) {
    try {
      const auto bytes = std::get<wire::PreloadData>(o.msg.body).data.size();
      wire::send(*o.conn, o.msg);
      pushed.push_back(o.rank);
      std::lock_guard lk(mu_);
      stats_.preload_pushes++;
      stats_.preload_bytes_pushed += bytes;
    } catch (const Error& e) {
      spdlog::debug("preload push to reader rank {} failed: {}", o.rank, e.what());
    }
  }
  return pushed;
}

WriterPlaneStats WriterDataPlane::stats() const {
  std::lock_guard lk(mu_);
  return stats_;
}

void WriterDataPlane::on_frame(net::Connection& conn, net::Frame&& frame) {
  wire::Message m;
  try {
    m = wire::decode(frame);
  } catch (const Error& e) {
    spdlog::warn("writer rank {} data plane: {}", rank_, e.what());
    conn.close();
    return;
  }
  if (m.stream != stream_ || m.sender.role != wire::Role::Reader) {
    spdlog::warn("writer rank {} data plane: frame from a foreign stream or role", rank_);
    return;
  }
  const ReaderRankKey key{m.sender.cohort_id, m.sender.rank};

  if (auto* rq = std::get_if<wire::ReadRequest>(&m.body)) {
    wire::RequestResponse resp{rq->request_id, wire::ReadStatus::Ok, {}};
    {
      std::lock_guard lk(mu_);
      conns_[key] = conn.shared_from_this();
      auto s = steps_.find(rq->step);
      if (s == steps_.end()) {
        resp.status = wire::ReadStatus::StaleStep;
        stats_.stale_requests++;
      } else if (rq->offset > s->second->size() || rq->length > s->second->size() - rq->offset) {
        resp.status = wire::ReadStatus::OutOfRange;
      } else {
        const auto* base = s->second->data() + rq->offset;
        resp.data.assign(base, base + rq->length);
        stats_.requests_served++;
        if (auto l = learning_.find(key.reader); l != learning_.end() && l->second == rq->step) {
          recorded_[key].push_back({rq->offset, rq->length});
        }
      }
    }
    try {
      wire::send(conn, {stream_, {wire::Role::Writer, 0, rank_}, std::move(resp)});
    } catch (const Error&) {
      // The reader went away; its close handling cleans up.
    }
    return;
  }
  if (auto* log = std::get_if<wire::RequestLogPublish>(&m.body)) {
    std::lock_guard lk(mu_);
    conns_[key] = conn.shared_from_this();
    if (mode_ != PreloadMode::DoubleBuffer) return;
    std::vector<wire::ByteRange> ranges;
    ranges.reserve(log->reads.size());
    for (const auto& r : log->reads) ranges.push_back({r.offset, r.length});
    patterns_[key] = std::move(ranges);
    return;
  }
  if (auto* rel = std::get_if<wire::BufferRelease>(&m.body)) {
    std::lock_guard lk(mu_);
    stats_.buffer_releases++;
    auto& upto = buffer_released_[key];
    upto = std::max(upto, rel->step);
    return;
  }
  spdlog::warn("writer rank {} data plane: unexpected {}", rank_, wire::name_of(wire::type_of(m.body)));
}

// ---------------------------------------------------------------------------

ReaderDataPlane::ReaderDataPlane(wire::StreamId stream, ReaderId reader, std::uint32_t rank,
                                 PreloadMode mode)
    : stream_(stream), reader_(reader), rank_(rank), mode_(mode) {}

ReaderDataPlane::~ReaderDataPlane() { close(); }

void ReaderDataPlane::close() {
  std::map<std::uint32_t, Link> links;
  {
    std::lock_guard lk(mu_);
    closed_ = true;
    links.swap(links_);
    for (auto& [id, st] : pending_) {
      st->status = ReadHandle::State::Status::Failed;
      st->error = ErrorCode::StreamClosed;
      st->message = "data plane closed";
    }
    pending_.clear();
  }
  cv_.notify_all();
  for (auto& [w, l] : links) {
    if (l.conn) l.conn->close();
  }
}

std::shared_ptr<net::Connection> ReaderDataPlane::link(std::uint32_t writer_rank,
                                                       std::unique_lock<std::mutex>&) {
  if (closed_) throw Error(ErrorCode::StreamClosed, "data plane closed");
  auto& l = links_[writer_rank];
  if (l.lost) {
    throw Error(ErrorCode::ConnectionLost, "writer rank " + std::to_string(writer_rank) + " unreachable");
  }
  if (l.conn) return l.conn;
  if (writer_rank >= registrations_.size()) {
    throw Error(ErrorCode::ProtocolError, "no registration for writer rank " + std::to_string(writer_rank));
  }
  const auto ep = net::Endpoint::parse(to_string(registrations_[writer_rank]));
  // The writer listens before publishing its registration: no retry.
  auto sock = net::connect(ep, 0);
  l.conn = net::Connection::start(
      std::move(sock), [this, writer_rank](net::Connection&, net::Frame&& f) { on_frame(writer_rank, std::move(f)); },
      [this, writer_rank](net::Connection&) { on_close(writer_rank); });
  return l.conn;
}

void ReaderDataPlane::install_step(StepId step, const std::vector<Bytes>& registrations,
                                   std::vector<std::uint32_t> pushing_ranks) {
  {
    std::lock_guard lk(mu_);
    registrations_ = registrations;
    current_ = step;
    committed_ = std::set<std::uint32_t>(pushing_ranks.begin(), pushing_ranks.end());
    pushed_.erase(pushed_.begin(), pushed_.lower_bound(step));
    account_pushed();
  }
  cv_.notify_all();
}

ReadHandle ReaderDataPlane::post_read(StepId step, std::uint32_t writer_rank, std::uint64_t offset,
                                      std::uint64_t length, std::span<std::byte> dest) {
  ReadHandle h;
  h.state_ = std::make_shared<ReadHandle::State>();
  h.state_->dest = dest;
  h.state_->writer_rank = writer_rank;
  if (dest.size() != length) throw Error(ErrorCode::LengthMismatch, "read destination size differs from length");
  if (length == 0) {
    h.state_->status = ReadHandle::State::Status::Done;
    return h;
  }
  std::shared_ptr<net::Connection> conn;
  std::uint64_t id = 0;
  {
    std::unique_lock lk(mu_);
    conn = link(writer_rank, lk);
    id = next_request_++;
    pending_[id] = h.state_;
    stats_.read_requests_sent++;
  }
  try {
    wire::send(*conn, {stream_, {wire::Role::Reader, reader_, rank_},
                       wire::ReadRequest{id, step, offset, length}});
  } catch (const Error& e) {
    std::lock_guard lk(mu_);
    if (pending_.erase(id)) {
      h.state_->status = ReadHandle::State::Status::Failed;
      h.state_->error = ErrorCode::ConnectionLost;
      h.state_->message = e.what();
    }
  }
  return h;
}

void ReaderDataPlane::wait(const ReadHandle& h) {
  if (!h.state_) throw Error(ErrorCode::ProtocolError, "wait on an empty read handle");
  std::unique_lock lk(mu_);
  cv_.wait(lk, [&] { return h.state_->status != ReadHandle::State::Status::Pending; });
  if (h.state_->status == ReadHandle::State::Status::Failed) {
    throw Error(h.state_->error, h.state_->message);
  }
}

bool ReaderDataPlane::preload_match(StepId step, std::uint32_t writer_rank, std::uint64_t offset,
                                    std::uint64_t length, std::span<std::byte> dest) {
  std::unique_lock lk(mu_);
  while (true) {
    auto s = pushed_.find(step);
    if (s != pushed_.end()) {
      if (auto w = s->second.find(writer_rank); w != s->second.end()) {
        std::uint64_t at = 0;
        for (const auto& r : w->second.ranges) {
          if (offset >= r.offset && length <= r.length && offset - r.offset <= r.length - length) {
            if (length) std::memcpy(dest.data(), w->second.data.data() + at + (offset - r.offset), length);
            stats_.preload_hits++;
            return true;
          }
          at += r.length;
        }
        stats_.preload_fallbacks++;
        return false;
      }
    }
    const bool committed = current_ == step && committed_.count(writer_rank) != 0;
    const bool reachable = !closed_ && !(links_.count(writer_rank) && links_[writer_rank].lost);
    if (!committed || !reachable) {
      if (committed) stats_.preload_fallbacks++;
      return false;
    }
    cv_.wait(lk);
  }
}

void ReaderDataPlane::release_step(StepId step, bool notify) {
  std::vector<std::shared_ptr<net::Connection>> conns;
  {
    std::lock_guard lk(mu_);
    pushed_.erase(pushed_.begin(), pushed_.upper_bound(step));
    if (!released_upto_ || *released_upto_ < step) released_upto_ = step;
    account_pushed();
    if (notify) {
      for (auto& [w, l] : links_) {
        if (l.conn && !l.lost) conns.push_back(l.conn);
      }
    }
  }
  for (auto& c : conns) {
    try {
      wire::send(*c, {stream_, {wire::Role::Reader, reader_, rank_}, wire::BufferRelease{step}});
    } catch (const Error&) {
    }
  }
}

void ReaderDataPlane::publish_log(StepId step, const RequestLog& log) {
  for (auto w : log.writer_ranks(step)) {
    std::shared_ptr<net::Connection> conn;
    {
      std::unique_lock lk(mu_);
      conn = link(w, lk);
    }
    wire::send(*conn, {stream_, {wire::Role::Reader, reader_, rank_},
                       wire::RequestLogPublish{step, *log.find(step, w)}});
  }
}

ReaderPlaneStats ReaderDataPlane::stats() const {
  std::lock_guard lk(mu_);
  return stats_;
}

void ReaderDataPlane::account_pushed() {
  std::uint64_t bytes = 0;
  for (const auto& [s, per_rank] : pushed_) {
    for (const auto& [w, p] : per_rank) bytes += p.data.size();
  }
  stats_.preload_bytes = bytes;
  stats_.preload_bytes_peak = std::max(stats_.preload_bytes_peak, bytes);
  stats_.resident_pushed_steps = pushed_.size();
  stats_.resident_pushed_steps_peak = std::max<std::uint64_t>(stats_.resident_pushed_steps_peak, pushed_.size());
}

void ReaderDataPlane::on_frame(std::uint32_t writer_rank, net::Frame&& frame) {
  wire::Message m;
  try {
    m = wire::decode(frame);
  } catch (const Error& e) {
    spdlog::warn("reader rank {} data plane: {}", rank_, e.what());
    return;
  }
  if (m.stream != stream_) return;
  {
    std::lock_guard lk(mu_);
    if (auto* resp = std::get_if<wire::RequestResponse>(&m.body)) {
      auto it = pending_.find(resp->request_id);
      if (it == pending_.end()) return;
      auto st = it->second;
      pending_.erase(it);
      using S = ReadHandle::State::Status;
      switch (resp->status) {
        case wire::ReadStatus::Ok:
          if (resp->data.size() != st->dest.size()) {
            st->status = S::Failed;
            st->error = ErrorCode::LengthMismatch;
            st->message = "response length differs from request";
          } else {
            std::memcpy(st->dest.data(), resp->data.data(), resp->data.size());
            st->status = S::Done;
          }
          break;
        case wire::ReadStatus::StaleStep:
          st->status = S::Failed;
          st->error = ErrorCode::StaleStep;
          st->message = "step no longer registered on writer rank " + std::to_string(writer_rank);
          break;
        case wire::ReadStatus::OutOfRange:
          st->status = S::Failed;
          st->error = ErrorCode::OutOfRange;
          st->message = "read past the end of writer rank " + std::to_string(writer_rank) + "'s block";
          break;
      }
    } else if (auto* p = std::get_if<wire::PreloadData>(&m.body)) {
      if ((released_upto_ && p->step <= *released_upto_) || (current_ && p->step < *current_)) {
        stats_.late_pushes_dropped++;
        return;
      }
      if (mode_ == PreloadMode::DoubleBuffer && p->pattern_id < 2) {
        // Writing into a buffer overwrites whatever step it held.
        auto& slot = buffers_[writer_rank][p->pattern_id];
        if (slot && *slot != p->step) {
          if (auto s = pushed_.find(*slot); s != pushed_.end()) {
            s->second.erase(writer_rank);
            if (s->second.empty()) pushed_.erase(s);
          }
        }
        slot = p->step;
      }
      pushed_[p->step][writer_rank] = {std::move(p->ranges), std::move(p->data)};
      account_pushed();
    } else {
      spdlog::warn("reader rank {} data plane: unexpected {}", rank_, wire::name_of(wire::type_of(m.body)));
      return;
    }
  }
  cv_.notify_all();
}

void ReaderDataPlane::on_close(std::uint32_t writer_rank) {
  {
    std::lock_guard lk(mu_);
    links_[writer_rank].lost = true;
    for (auto it = pending_.begin(); it != pending_.end();) {
      if (it->second->writer_rank == writer_rank) {
        it->second->status = ReadHandle::State::Status::Failed;
        it->second->error = ErrorCode::ConnectionLost;
        it->second->message = "connection to writer rank " + std::to_string(writer_rank) + " lost";
        it = pending_.erase(it);
      } else {
        ++it;
      }
    }
  }
  cv_.notify_all();
}

}  // namespace sstage
