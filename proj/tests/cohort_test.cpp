#include "sstage/cohort.hpp"

#include <atomic>
#include <chrono>
#include <random>
#include <thread>

#include <gtest/gtest.h>

#include "sstage/error.hpp"

namespace sstage {
namespace {

using Clock = std::chrono::steady_clock;

template <typename Fn>
void run_ranks(LocalCohortGroup& g, Fn fn) {
  std::vector<std::thread> ts;
  for (int r = 0; r < g.size(); ++r) {
    ts.emplace_back([&, r] { fn(*g.handle(r)); });
  }
  for (auto& t : ts) t.join();
}

TEST(LocalCohort, SizeOne) {
  LocalCohortGroup g(1);
  auto c = g.handle(0);
  EXPECT_EQ(c->broadcast(to_bytes("x")), to_bytes("x"));
  EXPECT_EQ(c->gather(to_bytes("a")), std::vector<Bytes>{to_bytes("a")});
  c->barrier();
}

TEST(LocalCohort, BroadcastFromRoot) {
  LocalCohortGroup g(4);
  std::vector<Bytes> got(4);
  run_ranks(g, [&](Cohort& c) {
    got[c.rank()] = c.broadcast(to_bytes(c.rank() == 0 ? "B" : "ignored"));
  });
  for (const auto& b : got) EXPECT_EQ(b, to_bytes("B"));
}

TEST(LocalCohort, GatherInRankOrder) {
  LocalCohortGroup g(3);
  std::vector<std::vector<Bytes>> got(3);
  run_ranks(g, [&](Cohort& c) {
    // Reverse arrival order.
    std::this_thread::sleep_for(std::chrono::milliseconds(10 * (2 - c.rank())));
    got[c.rank()] = c.gather(to_bytes(std::string(1, static_cast<char>('a' + c.rank()))));
  });
  EXPECT_EQ(got[0], (std::vector<Bytes>{to_bytes("a"), to_bytes("b"), to_bytes("c")}));
  EXPECT_TRUE(got[1].empty());
  EXPECT_TRUE(got[2].empty());
}

TEST(LocalCohort, BarrierTimestamps) {
  LocalCohortGroup g(8);
  std::vector<Clock::time_point> enter(8), exit(8);
  run_ranks(g, [&](Cohort& c) {
    std::mt19937 rng(c.rank());
    std::this_thread::sleep_for(std::chrono::milliseconds(rng() % 20));
    enter[c.rank()] = Clock::now();
    c.barrier();
    exit[c.rank()] = Clock::now();
  });
  EXPECT_LE(*std::max_element(enter.begin(), enter.end()),
            *std::min_element(exit.begin(), exit.end()));
}

TEST(LocalCohort, RepeatedBarriersAreGenerationSafe) {
  constexpr int kRanks = 4, kRounds = 200;
  LocalCohortGroup g(kRanks);
  std::atomic<int> entered[kRounds] = {};
  std::atomic<bool> violated{false};
  run_ranks(g, [&](Cohort& c) {
    for (int k = 0; k < kRounds; ++k) {
      entered[k]++;
      c.barrier();
      if (entered[k].load() != kRanks) violated = true;
    }
  });
  EXPECT_FALSE(violated);
}

TEST(LocalCohort, DepartedRankFailsOthers) {
  LocalCohortGroup g(3);
  std::atomic<int> failures{0};
  std::vector<std::thread> ts;
  ts.emplace_back([&] { g.handle(2)->leave(); });
  for (int r = 0; r < 2; ++r) {
    ts.emplace_back([&, r] {
      auto c = g.handle(r);
      try {
        c->broadcast(to_bytes("B"));
      } catch (const Error& e) {
        if (e.code() == ErrorCode::CohortFailed) failures++;
      }
    });
  }
  for (auto& t : ts) t.join();
  EXPECT_EQ(failures.load(), 2);
}

TEST(LocalCohort, MismatchedParticipation) {
  LocalCohortGroup g(2);
  std::atomic<int> failures{0};
  run_ranks(g, [&](Cohort& c) {
    try {
      if (c.rank() == 0) {
        c.gather(to_bytes("a"));
      } else {
        c.barrier();
      }
    } catch (const Error& e) {
      if (e.code() == ErrorCode::CohortFailed) failures++;
    }
  });
  EXPECT_EQ(failures.load(), 2);
}

TEST(SocketCohort, CollectivesAcrossThreads) {
  // Pick a free port, then run each rank as its own SocketCohort.
  net::Listener probe;
  const auto port = probe.endpoint().port;
  probe.shutdown();
  const std::string addr = "127.0.0.1:" + std::to_string(port);

  constexpr int kSize = 3;
  std::vector<Bytes> bc(kSize);
  std::vector<Bytes> gathered;
  std::vector<std::thread> ts;
  for (int r = 0; r < kSize; ++r) {
    ts.emplace_back([&, r] {
      SocketCohort c(r, kSize, addr, 10);
      bc[r] = c.broadcast(to_bytes(r == 0 ? "root" : "x"));
      auto g = c.gather(to_bytes(std::to_string(r)));
      if (r == 0) gathered = g;
      for (int k = 0; k < 20; ++k) c.barrier();
    });
  }
  for (auto& t : ts) t.join();
  for (const auto& b : bc) EXPECT_EQ(b, to_bytes("root"));
  EXPECT_EQ(gathered, (std::vector<Bytes>{to_bytes("0"), to_bytes("1"), to_bytes("2")}));
}

TEST(SocketCohort, DepartedRankFails) {
  net::Listener probe;
  const auto port = probe.endpoint().port;
  probe.shutdown();
  const std::string addr = "127.0.0.1:" + std::to_string(port);

  std::atomic<bool> root_failed{false};
  std::thread root([&] {
    SocketCohort c(0, 2, addr, 10);
    try {
      c.barrier();
    } catch (const Error& e) {
      root_failed = e.code() == ErrorCode::CohortFailed;
    }
  });
  std::thread other([&] {
    SocketCohort c(1, 2, addr, 10);
    c.leave();
  });
  other.join();
  root.join();
  EXPECT_TRUE(root_failed);
}

}  // namespace
}  // namespace sstage
