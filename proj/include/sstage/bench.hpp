#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "sstage/core.hpp"

namespace sstage {

/// t_total = data * inverse_throughput + overhead, in the caller's units.
struct OverheadFit {
  double inverse_throughput = 0;
  double overhead = 0;
};

struct TimingPoint {
  double data = 0;
  double t_total = 0;
};

/// Ordinary least squares over the points. Throws DegenerateInput when fewer
/// than two distinct data sizes are present.
OverheadFit fit_overhead(std::span<const TimingPoint> points);

struct BenchRow {
  std::uint64_t step = 0;
  std::uint64_t bytes = 0;
  double t_load_seconds = 0;
};

/// Bytes over load time; a zero-byte step reports 0.
double perceived_throughput(const BenchRow& row);

inline constexpr const char* kBenchCsvHeader = "step,bytes,t_load_seconds,perceived_throughput_bytes_per_s";
void write_bench_csv(std::ostream& out, std::span<const BenchRow> rows);

struct BenchConfig {
  int writer_ranks = 1;
  int reader_ranks = 1;
  /// Bytes per step; rounded down to whole 8-byte elements.
  std::vector<std::uint64_t> step_bytes;
  EngineParams params;
  std::uint64_t seed = 1;
};

/// Runs writer and reader cohorts as threads over loopback sockets and times
/// each step's reads: from a reader-wide barrier before the first get to a
/// barrier after every rank's perform_gets returned.
std::vector<BenchRow> run_bench(const BenchConfig& cfg);

}  // namespace sstage
