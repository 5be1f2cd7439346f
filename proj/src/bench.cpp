#include "sstage/bench.hpp"

#include <chrono>
#include <filesystem>
#include <mutex>
#include <ostream>
#include <random>
#include <thread>

#include "sstage/cohort.hpp"
#include "sstage/engine.hpp"
#include "sstage/payload.hpp"

namespace sstage {

OverheadFit fit_overhead(std::span<const TimingPoint> points) {
  if (points.size() < 2) throw Error(ErrorCode::DegenerateInput, "need at least two points");
  double mx = 0, my = 0;
  for (const auto& p : points) {
    mx += p.data;
    my += p.t_total;
  }
  mx /= static_cast<double>(points.size());
  my /= static_cast<double>(points.size());
  // Centered sums keep the slope exact for points that lie on a line.
  double sxx = 0, sxy = 0;
  for (const auto& p : points) {
    sxx += (p.data - mx) * (p.data - mx);
    sxy += (p.data - mx) * (p.t_total - my);
  }
  if (sxx == 0) throw Error(ErrorCode::DegenerateInput, "all data sizes are equal");
  const double slope = sxy / sxx;
  return {slope, my - slope * mx};
}

double perceived_throughput(const BenchRow& row) {
  if (row.bytes == 0 || row.t_load_seconds <= 0) return 0;
  return static_cast<double>(row.bytes) / row.t_load_seconds;
}

void write_bench_csv(std::ostream& out, std::span<const BenchRow> rows) {
  out << kBenchCsvHeader << '\n';
  const auto old = out.precision(9);
  for (const auto& r : rows) {
    out << r.step << ',' << r.bytes << ',' << r.t_load_seconds << ',' << perceived_throughput(r) << '\n';
  }
  out.precision(old);
}

namespace {

class ScratchDir {
 public:
  ScratchDir() {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("sstage-bench-" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

template <typename Fn>
void run_cohort(int size, Fn fn, std::vector<std::thread>& threads, std::exception_ptr& err, std::mutex& mu) {
  auto group = std::make_shared<LocalCohortGroup>(size);
  for (int r = 0; r < size; ++r) {
    threads.emplace_back([group, r, fn, &err, &mu] {
      try {
        auto c = group->handle(r);
        fn(*c);
      } catch (...) {
        std::lock_guard lk(mu);
        if (!err) err = std::current_exception();
      }
    });
  }
}

}  // namespace

std::vector<BenchRow> run_bench(const BenchConfig& cfg) {
  if (cfg.writer_ranks < 1 || cfg.reader_ranks < 1) {
    throw Error(ErrorCode::InvalidParameter, "bench needs at least one writer and one reader rank");
  }
  ScratchDir dir;
  ContactOptions contact;
  contact.stream_name = "bench";
  contact.contact_dir = dir.path();

  std::vector<BenchRow> rows;
  std::vector<std::thread> threads;
  std::exception_ptr err;
  std::mutex mu;

  run_cohort(cfg.writer_ranks, [&](Cohort& c) {
    WriterEngine w(c, cfg.params, contact);
    for (std::size_t s = 0; s < cfg.step_bytes.size(); ++s) {
      const auto n = cfg.step_bytes[s] / kPayloadElementSize;
      w.begin_step();
      if (n > 0) {
        const Dims shape{n};
        const auto def = payload_variable("data", shape);
        const auto blocks = decompose(shape, c.size(), Decomposition{Decomposition::Kind::Striped, 0});
        for (const auto& b : blocks[static_cast<std::size_t>(c.rank())]) {
          w.put(def, b, payload_block(cfg.seed, StepId{s}, "data", shape, b));
        }
      }
      w.end_step();
    }
    w.close();
  }, threads, err, mu);

  run_cohort(cfg.reader_ranks, [&](Cohort& c) {
    using Clock = std::chrono::steady_clock;
    ReaderEngine r(c, cfg.params, contact);
    while (r.begin_step().status == BeginStepResult::Status::Ok) {
      std::uint64_t bytes = 0;
      Bytes dest;
      c.barrier();
      const auto t0 = Clock::now();
      if (auto v = r.inquire_variable("data")) {
        const auto parts = decompose(v->def.shape, c.size(), Decomposition{Decomposition::Kind::Striped, 0});
        for (const auto& sel : parts[static_cast<std::size_t>(c.rank())]) {
          dest.resize(block_byte_len(v->def, sel));
          r.get_sync("data", sel, dest);
        }
        bytes = element_count(v->def.shape) * v->def.element_size;
      }
      c.barrier();
      const double t = std::chrono::duration<double>(Clock::now() - t0).count();
      if (c.rank() == 0) {
        std::lock_guard lk(mu);
        rows.push_back({r.metadata().step.value, bytes, t});
      }
      r.end_step();
    }
    r.close();
  }, threads, err, mu);

  for (auto& t : threads) t.join();
  if (err) std::rethrow_exception(err);
  return rows;
}

}  // namespace sstage
