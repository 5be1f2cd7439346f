#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include "sstage/core.hpp"

namespace sstage {

struct QueueConfig {
  std::uint32_t queue_limit = 0;  // 0 = unbounded
  std::uint32_t reserve_limit = 0;
  StepDistribution mode = StepDistribution::AllToAll;
};

/// Writer-side bookkeeping of queued steps: which readers hold each step,
/// the reserve queue, round-robin rotation and on-demand request matching.
/// Pure state machine; the control plane turns its results into messages.
///
/// Entry lifecycle:
///   main (held or unclaimed) -> reserve (when released and reserve_limit > 0)
///   -> draining (evicted from reserve while still held) -> freed.
/// A step provided to no reader stays in the main queue as "unclaimed" (and
/// counts against queue_limit) unless a reserve queue exists, in which case
/// it goes straight to the reserve.
class StepQueue {
 public:
  explicit StepQueue(QueueConfig cfg) : cfg_(cfg) {}

  const QueueConfig& config() const { return cfg_; }

  /// Registers an active reader and returns the steps it is given to catch
  /// up: reserve steps oldest-first, then unclaimed steps (AllToAll and
  /// RoundRobin only).
  std::vector<StepId> add_reader(ReaderId id);
  /// Force-releases everything the reader holds and drops its requests.
  std::vector<StepId> remove_reader(ReaderId id);
  bool is_active(ReaderId id) const;
  std::size_t active_readers() const;

  /// True when one more step would exceed queue_limit.
  bool full() const;
  /// Adds a step and returns the readers it is provided to.
  std::vector<ReaderId> push(StepId step);
  /// On-demand: assigns the oldest unassigned step to `reader`, or queues the
  /// request (FIFO) until a step is pushed.
  std::optional<StepId> request_step(ReaderId reader);

  /// Returns false (and changes nothing) if `reader` does not hold `step`.
  bool release(ReaderId reader, StepId step);

  /// Steps whose resources became free since the last call.
  std::vector<StepId> take_freed();

  /// Close: empties the reserve; held reserve steps are freed on release.
  void drop_reserve();
  /// No step is held by any reader and no on-demand step awaits an active reader.
  bool drained() const;
  /// Frees every remaining entry.
  void clear();

  std::size_t main_count() const;
  std::vector<StepId> main_steps() const;
  std::vector<StepId> reserve_steps() const;
  std::size_t refcount(StepId step) const;
  std::set<ReaderId> holders(StepId step) const;
  std::vector<StepId> held_by(ReaderId reader) const;
  std::size_t pending_requests() const { return requests_.size(); }

 private:
  enum class Where { Main, Reserve, Draining };
  struct Entry {
    Where where = Where::Main;
    std::set<ReaderId> holders;
    bool unclaimed = false;  // main queue, never provided to anyone
  };

  void on_unheld(std::map<StepId, Entry>::iterator it);
  void to_reserve(std::map<StepId, Entry>::iterator it);
  void free_entry(std::map<StepId, Entry>::iterator it);
  std::optional<ReaderId> next_round_robin();

  QueueConfig cfg_;
  std::map<StepId, Entry> entries_;
  std::vector<ReaderId> order_;  // registration order
  std::set<ReaderId> active_;
  std::size_t rr_cursor_ = 0;
  std::deque<ReaderId> requests_;
  std::vector<StepId> freed_;
};

}  // namespace sstage
