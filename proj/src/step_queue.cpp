#include "sstage/step_queue.hpp"

#include <algorithm>

namespace sstage {

std::vector<StepId> StepQueue::add_reader(ReaderId id) {
  if (active_.count(id)) return {};
  if (std::find(order_.begin(), order_.end(), id) == order_.end()) order_.push_back(id);
  active_.insert(id);

  std::vector<StepId> given;
  for (auto& [step, e] : entries_) {
    if (e.where == Where::Reserve) {
      e.holders.insert(id);
      given.push_back(step);
    }
  }
  if (cfg_.mode != StepDistribution::OnDemand) {
    for (auto& [step, e] : entries_) {
      if (e.where == Where::Main && e.unclaimed) {
        e.unclaimed = false;
        e.holders.insert(id);
        given.push_back(step);
      }
    }
  }
  return given;
}

std::vector<StepId> StepQueue::remove_reader(ReaderId id) {
  active_.erase(id);
  requests_.erase(std::remove(requests_.begin(), requests_.end(), id), requests_.end());
  // Releasing may evict other entries from the reserve, so go by key.
  const auto held = held_by(id);
  for (auto step : held) release(id, step);
  return held;
}

bool StepQueue::is_active(ReaderId id) const { return active_.count(id) != 0; }

std::size_t StepQueue::active_readers() const { return active_.size(); }

std::size_t StepQueue::main_count() const {
  return static_cast<std::size_t>(std::count_if(
      entries_.begin(), entries_.end(), [](const auto& kv) { return kv.second.where == Where::Main; }));
}

bool StepQueue::full() const { return cfg_.queue_limit != 0 && main_count() >= cfg_.queue_limit; }

std::optional<ReaderId> StepQueue::next_round_robin() {
  if (active_.empty()) return std::nullopt;
  for (std::size_t tried = 0; tried < order_.size(); ++tried) {
    const auto id = order_[rr_cursor_ % order_.size()];
    rr_cursor_ = (rr_cursor_ + 1) % order_.size();
    if (active_.count(id)) return id;
  }
  return std::nullopt;
}

std::vector<ReaderId> StepQueue::push(StepId step) {
  auto [it, inserted] = entries_.try_emplace(step);
  if (!inserted) throw Error(ErrorCode::ProtocolError, "step pushed twice");
  auto& e = it->second;
  std::vector<ReaderId> to;
  switch (cfg_.mode) {
    case StepDistribution::AllToAll:
      to.assign(active_.begin(), active_.end());
      // Keep registration order for deterministic message order.
      std::sort(to.begin(), to.end(), [&](ReaderId a, ReaderId b) {
        return std::find(order_.begin(), order_.end(), a) <
               std::find(order_.begin(), order_.end(), b);
      });
      break;
    case StepDistribution::RoundRobin:
      if (auto r = next_round_robin()) to.push_back(*r);
      break;
    case StepDistribution::OnDemand:
      if (!requests_.empty()) {
        to.push_back(requests_.front());
        requests_.pop_front();
      } else {
        e.unclaimed = true;
        return to;
      }
      break;
  }
  if (to.empty()) {
    if (cfg_.reserve_limit > 0) {
      to_reserve(it);
    } else {
      e.unclaimed = true;
    }
    return to;
  }
  e.holders.insert(to.begin(), to.end());
  return to;
}

std::optional<StepId> StepQueue::request_step(ReaderId reader) {
  for (auto& [step, e] : entries_) {
    if (e.where == Where::Main && e.unclaimed) {
      e.unclaimed = false;
      e.holders.insert(reader);
      return step;
    }
  }
  requests_.push_back(reader);
  return std::nullopt;
}

bool StepQueue::release(ReaderId reader, StepId step) {
  auto it = entries_.find(step);
  if (it == entries_.end() || !it->second.holders.erase(reader)) return false;
  if (it->second.holders.empty()) on_unheld(it);
  return true;
}

void StepQueue::on_unheld(std::map<StepId, Entry>::iterator it) {
  switch (it->second.where) {
    case Where::Main:
      if (cfg_.reserve_limit > 0) {
        to_reserve(it);
      } else {
        free_entry(it);
      }
      break;
    case Where::Reserve:
      break;
    case Where::Draining:
      free_entry(it);
      break;
  }
}

void StepQueue::to_reserve(std::map<StepId, Entry>::iterator it) {
  it->second.where = Where::Reserve;
  it->second.unclaimed = false;
  std::size_t in_reserve = 0;
  for (const auto& [s, e] : entries_) in_reserve += e.where == Where::Reserve;
  // Evict the oldest reserve steps once over the limit.
  for (auto j = entries_.begin(); in_reserve > cfg_.reserve_limit && j != entries_.end();) {
    auto next = std::next(j);
    if (j->second.where == Where::Reserve) {
      --in_reserve;
      if (j->second.holders.empty()) {
        free_entry(j);
      } else {
        j->second.where = Where::Draining;
      }
    }
    j = next;
  }
}

void StepQueue::free_entry(std::map<StepId, Entry>::iterator it) {
  freed_.push_back(it->first);
  entries_.erase(it);
}

std::vector<StepId> StepQueue::take_freed() {
  std::vector<StepId> out;
  out.swap(freed_);
  return out;
}

void StepQueue::drop_reserve() {
  for (auto it = entries_.begin(); it != entries_.end();) {
    auto next = std::next(it);
    if (it->second.where == Where::Reserve) {
      if (it->second.holders.empty()) {
        free_entry(it);
      } else {
        it->second.where = Where::Draining;
      }
    }
    it = next;
  }
}

bool StepQueue::drained() const {
  for (const auto& [s, e] : entries_) {
    if (!e.holders.empty()) return false;
    if (e.unclaimed && cfg_.mode == StepDistribution::OnDemand && !active_.empty()) return false;
  }
  return true;
}

void StepQueue::clear() {
  while (!entries_.empty()) free_entry(entries_.begin());
  requests_.clear();
}

std::vector<StepId> StepQueue::main_steps() const {
  std::vector<StepId> out;
  for (const auto& [s, e] : entries_) {
    if (e.where == Where::Main) out.push_back(s);
  }
  return out;
}

std::vector<StepId> StepQueue::reserve_steps() const {
  std::vector<StepId> out;
  for (const auto& [s, e] : entries_) {
    if (e.where == Where::Reserve) out.push_back(s);
  }
  return out;
}

std::size_t StepQueue::refcount(StepId step) const {
  auto it = entries_.find(step);
  return it == entries_.end() ? 0 : it->second.holders.size();
}

std::set<ReaderId> StepQueue::holders(StepId step) const {
  auto it = entries_.find(step);
  return it == entries_.end() ? std::set<ReaderId>{} : it->second.holders;
}

std::vector<StepId> StepQueue::held_by(ReaderId reader) const {
  std::vector<StepId> out;
  for (const auto& [s, e] : entries_) {
    if (e.holders.count(reader)) out.push_back(s);
  }
  return out;
}

}  // namespace sstage
