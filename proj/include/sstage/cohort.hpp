#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "sstage/bytes.hpp"
#include "sstage/net.hpp"

namespace sstage {

/// One rank's handle onto a parallel application. Collectives block the
/// calling rank until every rank of the cohort has made the same call; a
/// departed or failed rank turns every pending and future collective into
/// Error{CohortFailed}. Root is always rank 0.
class Cohort {
 public:
  virtual ~Cohort() = default;

  virtual int rank() const = 0;
  virtual int size() const = 0;

  /// Every rank returns rank 0's payload; non-root payloads are ignored.
  virtual Bytes broadcast(const Bytes& payload) = 0;
  /// Rank 0 receives all payloads in rank order; other ranks get an empty list.
  virtual std::vector<Bytes> gather(const Bytes& payload) = 0;
  virtual void barrier() = 0;

  /// Marks this rank as gone, e.g. before an early exit.
  virtual void leave() = 0;
};

class LocalCohortState;

/// Ranks as threads of one process. Create the group once, hand
/// `handle(r)` to the thread acting as rank r.
class LocalCohortGroup {
 public:
  explicit LocalCohortGroup(int size);
  ~LocalCohortGroup();
  LocalCohortGroup(const LocalCohortGroup&) = delete;
  LocalCohortGroup& operator=(const LocalCohortGroup&) = delete;

  int size() const;
  /// Each rank's handle may be taken once; it leaves the cohort on destruction.
  std::unique_ptr<Cohort> handle(int rank);

 private:
  std::shared_ptr<LocalCohortState> state_;
};

/// Environment variables understood by SocketCohort::from_environment().
inline constexpr const char* kEnvRank = "STAGE_RANK";
inline constexpr const char* kEnvCohortAddr = "STAGE_COHORT_ADDR";
inline constexpr const char* kEnvCohortSize = "STAGE_COHORT_SIZE";

/// Ranks as separate processes connected to rank 0 over local TCP sockets.
/// Rank 0 listens on `address` ("host:port"); the other ranks connect to it.
class SocketCohort : public Cohort {
 public:
  SocketCohort(int rank, int size, const std::string& address, double connect_timeout_secs = 30);
  ~SocketCohort() override;

  static std::unique_ptr<SocketCohort> from_environment();

  int rank() const override { return rank_; }
  int size() const override { return size_; }
  Bytes broadcast(const Bytes& payload) override;
  std::vector<Bytes> gather(const Bytes& payload) override;
  void barrier() override;
  void leave() override;

 private:
  [[noreturn]] void fail(const std::string& why);

  int rank_;
  int size_;
  bool failed_ = false;
  // Rank 0: one socket per rank (index 0 unused). Others: the socket to rank 0.
  std::vector<net::Socket> peers_;
};

}  // namespace sstage
