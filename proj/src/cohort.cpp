#include "sstage/cohort.hpp"

#include <condition_variable>
#include <cstdlib>
#include <map>
#include <mutex>

namespace sstage {

namespace {

enum class Op : std::uint8_t { Broadcast = 1, Gather = 2, Barrier = 3 };

const char* op_name(Op op) {
  switch (op) {
    case Op::Broadcast: return "broadcast";
    case Op::Gather: return "gather";
    case Op::Barrier: return "barrier";
  }
  return "?";
}

}  // namespace

// Collectives are keyed by a per-rank generation counter. A round stays alive
// until every rank has picked up its result, so a fast rank entering round
// k+1 never disturbs a slow rank still leaving round k.
class LocalCohortState {
 public:
  explicit LocalCohortState(int size)
      : size_(size), next_gen_(size, 0), taken_(size, false), left_(size, false) {}

  int size() const { return size_; }

  bool take(int rank) {
    std::lock_guard lk(mu_);
    if (rank < 0 || rank >= size_ || taken_[rank]) return false;
    taken_[rank] = true;
    return true;
  }

  std::vector<Bytes> exchange(int rank, Op op, Bytes payload) {
    std::unique_lock lk(mu_);
    if (failed_) throw Error(ErrorCode::CohortFailed, failure_);
    const auto gen = next_gen_[rank]++;
    auto& round = rounds_[gen];
    if (round.contrib.empty()) {
      round.contrib.resize(size_);
      round.op = op;
    } else if (round.op != op) {
      fail_locked("rank " + std::to_string(rank) + " called " + op_name(op) +
                  " while others called " + op_name(round.op));
      throw Error(ErrorCode::CohortFailed, failure_);
    }
    round.contrib[rank] = std::move(payload);
    if (++round.arrived == size_) {
      round.complete = true;
      cv_.notify_all();
    }
    cv_.wait(lk, [&] { return round.complete || failed_; });
    if (!round.complete) throw Error(ErrorCode::CohortFailed, failure_);

    std::vector<Bytes> out;
    if (op == Op::Broadcast) {
      out.push_back(round.contrib[0]);
    } else if (op == Op::Gather && rank == 0) {
      out = round.contrib;
    }
    if (++round.picked == size_) rounds_.erase(gen);
    return out;
  }

  void leave(int rank) {
    std::lock_guard lk(mu_);
    if (left_[rank]) return;
    left_[rank] = true;
    fail_locked("rank " + std::to_string(rank) + " left the cohort");
  }

 private:
  void fail_locked(const std::string& why) {
    if (!failed_) {
      failed_ = true;
      failure_ = why;
    }
    cv_.notify_all();
  }

  struct Round {
    Op op = Op::Barrier;
    std::vector<Bytes> contrib;
    int arrived = 0;
    int picked = 0;
    bool complete = false;
  };

  const int size_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::vector<std::uint64_t> next_gen_;
  std::vector<bool> taken_;
  std::vector<bool> left_;
  std::map<std::uint64_t, Round> rounds_;
  bool failed_ = false;
  std::string failure_;
};

namespace {

class LocalCohort : public Cohort {
 public:
  LocalCohort(std::shared_ptr<LocalCohortState> st, int rank) : st_(std::move(st)), rank_(rank) {}
  ~LocalCohort() override { leave(); }

  int rank() const override { return rank_; }
  int size() const override { return st_->size(); }

  Bytes broadcast(const Bytes& payload) override {
    auto r = st_->exchange(rank_, Op::Broadcast, rank_ == 0 ? payload : Bytes{});
    return std::move(r.front());
  }
  std::vector<Bytes> gather(const Bytes& payload) override {
    return st_->exchange(rank_, Op::Gather, payload);
  }
  void barrier() override { st_->exchange(rank_, Op::Barrier, {}); }
  void leave() override { st_->leave(rank_); }

 private:
  std::shared_ptr<LocalCohortState> st_;
  int rank_;
};

}  // namespace

LocalCohortGroup::LocalCohortGroup(int size) {
  if (size < 1) throw Error(ErrorCode::InvalidParameter, "cohort size must be >= 1");
  state_ = std::make_shared<LocalCohortState>(size);
}

LocalCohortGroup::~LocalCohortGroup() = default;

int LocalCohortGroup::size() const { return state_->size(); }

std::unique_ptr<Cohort> LocalCohortGroup::handle(int rank) {
  if (!state_->take(rank)) {
    throw Error(ErrorCode::InvalidParameter,
                "rank " + std::to_string(rank) + " unavailable in cohort of " +
                    std::to_string(state_->size()));
  }
  return std::make_unique<LocalCohort>(state_, rank);
}

SocketCohort::SocketCohort(int rank, int size, const std::string& address,
                           double connect_timeout_secs)
    : rank_(rank), size_(size) {
  if (size < 1 || rank < 0 || rank >= size) {
    throw Error(ErrorCode::InvalidParameter,
                "rank " + std::to_string(rank) + " of cohort size " + std::to_string(size));
  }
  const auto ep = net::Endpoint::parse(address);
  if (size == 1) return;
  try {
    if (rank == 0) {
      net::Listener listener(ep.host, ep.port);
      peers_.resize(size);
      for (int i = 1; i < size; ++i) {
        auto s = listener.accept();
        std::byte hello[4];
        s.recv_all(hello);
        const auto r = ByteReader(hello).u32();
        if (r == 0 || r >= static_cast<std::uint32_t>(size) || peers_[r].valid()) {
          throw Error(ErrorCode::CohortFailed, "bad hello from rank " + std::to_string(r));
        }
        peers_[r] = std::move(s);
      }
    } else {
      auto s = net::connect(ep, connect_timeout_secs);
      Bytes hello;
      ByteWriter(hello).u32(static_cast<std::uint32_t>(rank));
      s.send_all(hello);
      peers_.push_back(std::move(s));
    }
  } catch (const Error& e) {
    if (e.code() == ErrorCode::CohortFailed) throw;
    throw Error(ErrorCode::CohortFailed, std::string("cohort setup: ") + e.what());
  }
}

SocketCohort::~SocketCohort() = default;

std::unique_ptr<SocketCohort> SocketCohort::from_environment() {
  const char* rank = std::getenv(kEnvRank);
  const char* size = std::getenv(kEnvCohortSize);
  const char* addr = std::getenv(kEnvCohortAddr);
  if (!rank || !size || !addr) {
    throw Error(ErrorCode::InvalidParameter, std::string("missing ") + kEnvRank + "/" +
                                                 kEnvCohortSize + "/" + kEnvCohortAddr);
  }
  return std::make_unique<SocketCohort>(std::atoi(rank), std::atoi(size), addr);
}

void SocketCohort::fail(const std::string& why) {
  failed_ = true;
  for (auto& p : peers_) p.close();
  throw Error(ErrorCode::CohortFailed, why);
}

Bytes SocketCohort::broadcast(const Bytes& payload) {
  if (failed_) throw Error(ErrorCode::CohortFailed, "cohort already failed");
  if (size_ == 1) return payload;
  try {
    if (rank_ == 0) {
      for (int i = 1; i < size_; ++i) {
        net::write_frame(peers_[i], static_cast<std::uint16_t>(Op::Broadcast), 0, payload);
      }
      return payload;
    }
    auto f = net::read_frame(peers_[0]);
    if (f.type != static_cast<std::uint16_t>(Op::Broadcast)) fail("collective mismatch");
    return std::move(f.payload);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::CohortFailed) throw;
    fail(std::string("broadcast: ") + e.what());
  }
}

std::vector<Bytes> SocketCohort::gather(const Bytes& payload) {
  if (failed_) throw Error(ErrorCode::CohortFailed, "cohort already failed");
  if (size_ == 1) return {payload};
  try {
    if (rank_ != 0) {
      net::write_frame(peers_[0], static_cast<std::uint16_t>(Op::Gather), 0, payload);
      return {};
    }
    std::vector<Bytes> out(size_);
    out[0] = payload;
    for (int i = 1; i < size_; ++i) {
      auto f = net::read_frame(peers_[i]);
      if (f.type != static_cast<std::uint16_t>(Op::Gather)) {
        fail("rank " + std::to_string(i) + " is not in gather");
      }
      out[i] = std::move(f.payload);
    }
    return out;
  } catch (const Error& e) {
    if (e.code() == ErrorCode::CohortFailed) throw;
    fail(std::string("gather: ") + e.what());
  }
}

void SocketCohort::barrier() {
  if (failed_) throw Error(ErrorCode::CohortFailed, "cohort already failed");
  if (size_ == 1) return;
  try {
    if (rank_ != 0) {
      net::write_frame(peers_[0], static_cast<std::uint16_t>(Op::Barrier), 0, {});
      auto f = net::read_frame(peers_[0]);
      if (f.type != static_cast<std::uint16_t>(Op::Barrier)) fail("collective mismatch");
      return;
    }
    for (int i = 1; i < size_; ++i) {
      auto f = net::read_frame(peers_[i]);
      if (f.type != static_cast<std::uint16_t>(Op::Barrier)) {
        fail("rank " + std::to_string(i) + " is not in barrier");
      }
    }
    for (int i = 1; i < size_; ++i) {
      net::write_frame(peers_[i], static_cast<std::uint16_t>(Op::Barrier), 0, {});
    }
  } catch (const Error& e) {
    if (e.code() == ErrorCode::CohortFailed) throw;
    fail(std::string("barrier: ") + e.what());
  }
}

void SocketCohort::leave() {
  failed_ = true;
  for (auto& p : peers_) p.close();
}

}  // namespace sstage
