// sstage: run writer/reader cohorts, benchmark the transport, fit timing data
// and launch declarative workflows.
//
// Exit codes: 0 success, 2 usage, 3 protocol error, 4 verification failure.

#include <fcntl.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "sstage/bench.hpp"
#include "sstage/cohort.hpp"
#include "sstage/engine.hpp"
#include "sstage/payload.hpp"
#include "sstage/workflow.hpp"

namespace {

using namespace sstage;
using Clock = std::chrono::steady_clock;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitProtocol = 3;
constexpr int kExitVerify = 4;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::uint64_t parse_size(const std::string& text) {
  std::size_t pos = 0;
  std::uint64_t n = 0;
  try {
    n = std::stoull(text, &pos);
  } catch (const std::exception&) {
    throw UsageError("bad size '" + text + "'");
  }
  const auto unit = text.substr(pos);
  if (unit.empty() || unit == "B") return n;
  if (unit == "KiB") return n << 10;
  if (unit == "MiB") return n << 20;
  if (unit == "GiB") return n << 30;
  throw UsageError("bad size unit in '" + text + "' (B, KiB, MiB, GiB)");
}

/// "START:COUNT", e.g. "2x0:4x6".
BlockExtent parse_selection(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw UsageError("selection must be START:COUNT, got '" + text + "'");
  BlockExtent e{parse_dims(text.substr(0, colon)), parse_dims(text.substr(colon + 1))};
  if (e.start.size() != e.count.size()) throw UsageError("selection start and count differ in rank");
  return e;
}

EngineParams engine_params(const std::vector<std::string>& assignments) {
  EngineParams p;
  for (const auto& a : assignments) p.apply(a);
  return p;
}

// --- rank launching ---------------------------------------------------------

/// Starts `argv` with extra environment; stdout goes to `out_fd` when >= 0.
pid_t spawn(const std::vector<std::string>& argv, const std::vector<std::pair<std::string, std::string>>& env,
            int out_fd = -1) {
  const pid_t pid = ::fork();
  if (pid < 0) throw Error(ErrorCode::IoError, "fork failed");
  if (pid == 0) {
    for (const auto& [k, v] : env) ::setenv(k.c_str(), v.c_str(), 1);
    if (out_fd >= 0) {
      ::dup2(out_fd, STDOUT_FILENO);
      ::dup2(out_fd, STDERR_FILENO);
    }
    std::vector<char*> args;
    for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
    args.push_back(nullptr);
    ::execv("/proc/self/exe", args.data());
    std::_Exit(127);
  }
  return pid;
}

int wait_exit(pid_t pid) {
  int status = 0;
  while (::waitpid(pid, &status, 0) < 0) {
    if (errno != EINTR) return kExitProtocol;
  }
  if (WIFEXITED(status)) return WEXITSTATUS(status);
  return kExitProtocol;
}

/// Worst exit status wins: verification beats protocol beats usage.
int combine_exit(int a, int b) { return std::max(a, b); }

/// Runs `fn` as one rank of a `ranks`-wide cohort. Without STAGE_RANK this
/// process becomes the launcher and re-executes itself once per rank.
int run_ranked(const std::vector<std::string>& argv, int ranks, const std::function<int(Cohort&)>& fn) {
  if (std::getenv(kEnvRank)) {
    auto cohort = SocketCohort::from_environment();
    return fn(*cohort);
  }
  if (ranks == 1) {
    LocalCohortGroup g(1);
    auto c = g.handle(0);
    return fn(*c);
  }
  std::string addr;
  {
    net::Listener probe;  // picks a free loopback port for rank 0
    addr = probe.endpoint().token();
  }
  std::vector<pid_t> pids;
  for (int r = 0; r < ranks; ++r) {
    pids.push_back(spawn(argv, {{kEnvRank, std::to_string(r)},
                                {kEnvCohortSize, std::to_string(ranks)},
                                {kEnvCohortAddr, addr}}));
  }
  int code = kExitOk;
  for (auto pid : pids) code = combine_exit(code, wait_exit(pid));
  return code;
}

ContactOptions contact_options(const std::string& stream, const std::string& dir) {
  ContactOptions c;
  c.stream_name = stream;
  if (!dir.empty()) c.contact_dir = dir;
  return c;
}

// --- write ------------------------------------------------------------------

struct WriteOpts {
  std::string stream = "stream";
  int ranks = 1;
  int steps = 10;
  std::string shape = "256x256";
  std::string decomposition = "blocked";
  std::vector<std::string> params;
  std::string contact_dir;
  bool screen = false;
  double step_delay = 0;
  std::uint64_t seed = 1;
};

int do_write(Cohort& c, const WriteOpts& o) {
  const auto shape = parse_dims(o.shape);
  const auto decomposition = Decomposition::parse(o.decomposition);
  auto contact = contact_options(o.stream, o.contact_dir);
  contact.screen = o.screen;
  contact.screen_out = &std::cout;
  const bool root = c.rank() == 0;

  WriterEngine w(c, engine_params(o.params), contact);
  const auto def = payload_variable("u", shape);
  const auto blocks = decompose(shape, c.size(), decomposition);
  int accepted = 0, discarded = 0;
  for (int s = 0; s < o.steps; ++s) {
    const StepId step{static_cast<std::uint64_t>(s)};
    w.begin_step();
    for (const auto& b : blocks[static_cast<std::size_t>(c.rank())]) {
      w.put(def, b, payload_block(o.seed, step, "u", shape, b));
    }
    const auto t0 = Clock::now();
    const auto r = w.end_step();
    const auto t = seconds_since(t0);
    (r.accepted ? accepted : discarded)++;
    if (root) {
      std::cout << "step " << r.step.value << (r.accepted ? " accepted" : " discarded")
                << " end_step_ms=" << t * 1e3 << std::endl;
    }
    if (o.step_delay > 0) std::this_thread::sleep_for(std::chrono::duration<double>(o.step_delay));
  }
  w.close();
  if (root) {
    std::cout << "summary steps=" << o.steps << " accepted=" << accepted << " discarded=" << discarded
              << std::endl;
  }
  return kExitOk;
}

// --- read -------------------------------------------------------------------

struct ReadOpts {
  std::string stream = "stream";
  int ranks = 1;
  std::vector<std::string> params;
  std::string contact_dir;
  std::string contact;  // "-" reads the contact string from stdin
  double begin_step_timeout = -1;
  double sleep = 0;
  std::string selection;
  std::uint64_t seed = 1;
  int expect_steps = -1;
};

int do_read(Cohort& c, const ReadOpts& o) {
  auto contact = contact_options(o.stream, o.contact_dir);
  if (!o.contact.empty()) {
    std::string text = o.contact;
    if (text == "-") {
      // Only rank 0 uses the contact; the others receive it from the open.
      if (c.rank() == 0 && !std::getline(std::cin, text)) throw UsageError("no contact string on stdin");
    }
    contact.contact_text = text;
  }
  const std::optional<BlockExtent> selection =
      o.selection.empty() ? std::nullopt : std::optional(parse_selection(o.selection));
  const bool root = c.rank() == 0;

  ReaderEngine r(c, engine_params(o.params), contact);
  int steps = 0, not_ready = 0, failures = 0;
  std::vector<std::uint64_t> seen;
  while (true) {
    const auto t0 = Clock::now();
    const auto st = r.begin_step(o.begin_step_timeout);
    if (st.status == BeginStepResult::Status::EndOfStream) break;
    if (st.status == BeginStepResult::Status::NotReady) {
      ++not_ready;
      continue;
    }
    const auto waited = seconds_since(t0);
    const auto t1 = Clock::now();
    bool ok = true;
    std::uint64_t bytes = 0;
    if (auto v = r.inquire_variable("u")) {
      const BlockExtent region = selection ? *selection : BlockExtent{Dims(v->def.shape.size(), 0), v->def.shape};
      // This rank's share of the region.
      const auto parts = decompose(region.count, c.size(), Decomposition{});
      std::vector<BlockExtent> mine;
      for (auto e : parts[static_cast<std::size_t>(c.rank())]) {
        for (std::size_t d = 0; d < e.start.size(); ++d) e.start[d] += region.start[d];
        mine.push_back(std::move(e));
      }
      std::vector<Bytes> dest;
      for (const auto& e : mine) dest.emplace_back(block_byte_len(v->def, e));
      for (std::size_t i = 0; i < mine.size(); ++i) r.get("u", mine[i], dest[i]);
      r.end_step();
      for (std::size_t i = 0; i < mine.size(); ++i) {
        bytes += dest[i].size();
        ok &= dest[i] == payload_block(o.seed, st.step, "u", v->def.shape, mine[i]);
      }
    } else {
      r.end_step();
      ok = false;
    }
    const auto read = seconds_since(t1);
    // Every rank learns whether any rank failed verification.
    Bytes flag{static_cast<std::byte>(ok ? 0 : 1)};
    const auto flags = c.gather(flag);
    Bytes any{std::byte{0}};
    for (const auto& f : flags) {
      if (f.at(0) != std::byte{0}) any[0] = std::byte{1};
    }
    ok = c.broadcast(any).at(0) == std::byte{0};
    failures += !ok;
    ++steps;
    seen.push_back(st.step.value);
    if (root) {
      std::cout << "step " << st.step.value << " wait_ms=" << waited * 1e3 << " read_ms=" << read * 1e3
                << " rank0_bytes=" << bytes << " verified=" << (ok ? "ok" : "FAIL") << std::endl;
    }
    if (o.sleep > 0) std::this_thread::sleep_for(std::chrono::duration<double>(o.sleep));
  }
  r.close();
  const bool count_ok = o.expect_steps < 0 || steps == o.expect_steps;
  if (root) {
    std::cout << "summary steps=" << steps << " not_ready=" << not_ready << " verify_failures=" << failures;
    if (!seen.empty()) std::cout << " first=" << seen.front() << " last=" << seen.back();
    if (!count_ok) std::cout << " expected_steps=" << o.expect_steps;
    std::cout << std::endl;
  }
  return failures == 0 && count_ok ? kExitOk : kExitVerify;
}

// --- bench / fit --------------------------------------------------------------

struct BenchOpts {
  int writers = 1;
  int readers = 1;
  std::string size = "1MiB";
  int steps = 8;
  bool doubling = false;
  std::vector<std::string> params;
};

int do_bench(const BenchOpts& o) {
  BenchConfig cfg;
  cfg.writer_ranks = o.writers;
  cfg.reader_ranks = o.readers;
  cfg.params = engine_params(o.params);
  auto size = parse_size(o.size);
  for (int s = 0; s < o.steps; ++s) {
    cfg.step_bytes.push_back(size);
    if (o.doubling) size *= 2;
  }
  const auto rows = run_bench(cfg);
  write_bench_csv(std::cout, rows);
  return kExitOk;
}

struct FitOpts {
  std::string csv;
  std::vector<std::string> points;
  std::string unit = "GB";
};

int do_fit(const FitOpts& o) {
  double scale = 1;
  if (o.unit == "GB") scale = 1e-9;
  else if (o.unit == "MB") scale = 1e-6;
  else if (o.unit != "bytes") throw UsageError("unit must be bytes, MB or GB");
  std::vector<TimingPoint> pts;
  for (const auto& p : o.points) {
    const auto comma = p.find(',');
    if (comma == std::string::npos) throw UsageError("point must be DATA,SECONDS");
    try {
      pts.push_back({std::stod(p.substr(0, comma)), std::stod(p.substr(comma + 1))});
    } catch (const std::exception&) {
      throw UsageError("bad point '" + p + "'");
    }
  }
  if (!o.csv.empty()) {
    std::ifstream file;
    if (o.csv != "-") {
      file.open(o.csv);
      if (!file) throw UsageError("cannot open " + o.csv);
    }
    std::istream& in = o.csv == "-" ? std::cin : file;
    std::string line;
    if (!std::getline(in, line) || line != kBenchCsvHeader) throw UsageError("not a bench CSV (header mismatch)");
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::istringstream row(line);
      std::string step, bytes, t;
      std::getline(row, step, ',');
      std::getline(row, bytes, ',');
      std::getline(row, t, ',');
      try {
        pts.push_back({std::stod(bytes) * scale, std::stod(t)});
      } catch (const std::exception&) {
        throw UsageError("bad CSV row '" + line + "'");
      }
    }
  }
  const auto f = fit_overhead(pts);
  std::cout.precision(12);
  std::cout << "inverse_throughput_s_per_" << o.unit << "=" << f.inverse_throughput << "\n"
            << "overhead_s=" << f.overhead << "\n";
  if (f.inverse_throughput > 0) std::cout << "throughput_" << o.unit << "_per_s=" << 1 / f.inverse_throughput << "\n";
  return kExitOk;
}

// --- run ----------------------------------------------------------------------

int do_run(const std::string& config) {
  const auto wf = load_workflow(config);
  std::filesystem::path dir;
  std::optional<std::filesystem::path> scratch;
  std::random_device rd;
  const auto run_dir = std::filesystem::temp_directory_path() / ("sstage-run-" + std::to_string(rd()));
  std::filesystem::create_directories(run_dir);
  dir = wf.contact_dir ? *wf.contact_dir : run_dir;
  std::filesystem::create_directories(dir);

  struct Child {
    const WorkflowProcess* spec;
    pid_t pid;
    std::filesystem::path log;
  };
  std::vector<Child> children;
  for (const auto& p : wf.processes) {
    std::vector<std::string> argv{"sstage", p.role == WorkflowProcess::Role::Writer ? "write" : "read",
                                  "--stream", p.stream, "--ranks", std::to_string(p.ranks),
                                  "--contact-dir", dir.string()};
    for (const auto& [k, v] : p.options) {
      argv.push_back("--" + k);
      argv.push_back(v);
    }
    for (const auto& a : p.params) {
      argv.push_back("--param");
      argv.push_back(a);
    }
    const auto log = run_dir / (p.name + ".log");
    const int fd = ::open(log.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    if (fd < 0) throw Error(ErrorCode::IoError, "cannot create " + log.string());
    children.push_back({&p, spawn(argv, {}, fd), log});
    ::close(fd);
  }
  int code = kExitOk;
  for (const auto& ch : children) {
    const int rc = wait_exit(ch.pid);
    code = combine_exit(code, rc);
    std::ifstream in(ch.log);
    for (std::string line; std::getline(in, line);) std::cout << "[" << ch.spec->name << "] " << line << "\n";
    std::cout << "[" << ch.spec->name << "] exit " << rc << std::endl;
  }
  std::error_code ec;
  std::filesystem::remove_all(run_dir, ec);
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_level(spdlog::level::warn);
  const std::vector<std::string> self(argv, argv + argc);

  CLI::App app{"Staging transport: writer/reader cohorts, benchmarks and workflows"};
  app.require_subcommand(1);

  const char* env_dir = std::getenv(kEnvContactDir);
  const std::string default_dir = env_dir ? env_dir : "";

  WriteOpts wo;
  wo.contact_dir = default_dir;
  auto* write = app.add_subcommand("write", "Run a writer cohort producing seeded payloads");
  write->add_option("--stream", wo.stream, "Stream name");
  write->add_option("--ranks", wo.ranks, "Writer ranks")->check(CLI::PositiveNumber);
  write->add_option("--steps", wo.steps, "Steps to write")->check(CLI::NonNegativeNumber);
  write->add_option("--shape", wo.shape, "Global shape, e.g. 256x256");
  write->add_option("--decomposition", wo.decomposition, "striped | blocked | random:SEED");
  write->add_option("--param", wo.params, "Engine parameter Name=Value (repeatable)");
  write->add_option("--contact-dir", wo.contact_dir, "Contact file directory (default $STAGE_CONTACT_DIR)");
  write->add_flag("--screen", wo.screen, "Print the contact string instead of writing a file");
  write->add_option("--step-delay", wo.step_delay, "Seconds to sleep after each step");
  write->add_option("--seed", wo.seed, "Payload seed");

  ReadOpts ro;
  ro.contact_dir = default_dir;
  auto* read = app.add_subcommand("read", "Run a reader cohort verifying payloads");
  read->add_option("--stream", ro.stream, "Stream name");
  read->add_option("--ranks", ro.ranks, "Reader ranks")->check(CLI::PositiveNumber);
  read->add_option("--param", ro.params, "Engine parameter Name=Value (repeatable)");
  read->add_option("--contact-dir", ro.contact_dir, "Contact file directory (default $STAGE_CONTACT_DIR)");
  read->add_option("--contact", ro.contact, "Contact string, or - to read it from stdin");
  read->add_option("--begin-step-timeout", ro.begin_step_timeout, "Seconds; negative waits forever");
  read->add_option("--sleep", ro.sleep, "Seconds to sleep after each step");
  read->add_option("--selection", ro.selection, "START:COUNT, e.g. 0x0:16x16");
  read->add_option("--seed", ro.seed, "Payload seed used by the writer");
  read->add_option("--expect-steps", ro.expect_steps, "Fail verification unless exactly this many steps arrive");

  BenchOpts bo;
  auto* bench = app.add_subcommand("bench", "Measure perceived throughput; CSV on stdout");
  bench->add_option("--writers", bo.writers, "Writer ranks")->check(CLI::PositiveNumber);
  bench->add_option("--readers", bo.readers, "Reader ranks")->check(CLI::PositiveNumber);
  bench->add_option("--size", bo.size, "Bytes per step (suffix KiB, MiB, GiB)");
  bench->add_option("--steps", bo.steps, "Steps")->check(CLI::NonNegativeNumber);
  bench->add_flag("--doubling", bo.doubling, "Double the size every step");
  bench->add_option("--param", bo.params, "Engine parameter Name=Value (repeatable)");

  FitOpts fo;
  auto* fit = app.add_subcommand("fit", "Fit t_total = data/throughput + overhead");
  fit->add_option("--csv", fo.csv, "Bench CSV file, or - for stdin");
  fit->add_option("--point", fo.points, "DATA,SECONDS (repeatable)");
  fit->add_option("--unit", fo.unit, "Data unit: bytes, MB or GB");

  std::string config;
  auto* run = app.add_subcommand("run", "Launch the cohorts declared in a workflow file");
  run->add_option("config", config, "Workflow file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*write) {
      // Fail fast on bad flags, before any rank is launched.
      parse_dims(wo.shape);
      Decomposition::parse(wo.decomposition);
      engine_params(wo.params);
      return run_ranked(self, wo.ranks, [&](Cohort& c) { return do_write(c, wo); });
    }
    if (*read) {
      engine_params(ro.params);
      if (!ro.selection.empty()) parse_selection(ro.selection);
      return run_ranked(self, ro.ranks, [&](Cohort& c) { return do_read(c, ro); });
    }
    if (*bench) return do_bench(bo);
    if (*fit) return do_fit(fo);
    if (*run) return do_run(config);
  } catch (const UsageError& e) {
    std::cerr << "usage: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    switch (e.code()) {
      case ErrorCode::ParseError:
      case ErrorCode::InvalidParameter:
        return kExitUsage;
      case ErrorCode::DegenerateInput:
        return kExitUsage;
      default:
        return kExitProtocol;
    }
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return kExitProtocol;
  }
  return kExitUsage;
}
