#include "sstage/core.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <limits>

namespace sstage {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::ExtentInvalid: return "ExtentInvalid";
    case ErrorCode::Overflow: return "Overflow";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::OutOfBlock: return "OutOfBlock";
    case ErrorCode::UnknownVariable: return "UnknownVariable";
    case ErrorCode::UnfilledSelection: return "UnfilledSelection";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::DecodeError: return "DecodeError";
    case ErrorCode::CohortFailed: return "CohortFailed";
    case ErrorCode::OpenTimeout: return "OpenTimeout";
    case ErrorCode::StreamClosed: return "StreamClosed";
    case ErrorCode::ConnectionLost: return "ConnectionLost";
    case ErrorCode::StaleStep: return "StaleStep";
    case ErrorCode::OutOfRange: return "OutOfRange";
    case ErrorCode::NotInStep: return "NotInStep";
    case ErrorCode::PatternChangedAfterLock: return "PatternChangedAfterLock";
    case ErrorCode::ProtocolError: return "ProtocolError";
    case ErrorCode::InvalidParameter: return "InvalidParameter";
    case ErrorCode::DegenerateInput: return "DegenerateInput";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

std::string_view to_string(QueueFullPolicy p) {
  return p == QueueFullPolicy::Block ? "Block" : "Discard";
}

std::string_view to_string(StepDistribution d) {
  switch (d) {
    case StepDistribution::AllToAll: return "StepsAllToAll";
    case StepDistribution::RoundRobin: return "StepsRoundRobin";
    case StepDistribution::OnDemand: return "StepsOnDemand";
  }
  return "?";
}

std::string_view to_string(PreloadMode m) {
  switch (m) {
    case PreloadMode::Off: return "Off";
    case PreloadMode::Queued: return "Queued";
    case PreloadMode::DoubleBuffer: return "DoubleBuffer";
  }
  return "?";
}

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

[[noreturn]] void bad_value(std::string_view name, std::string_view value) {
  throw Error(ErrorCode::InvalidParameter,
              "bad value '" + std::string(value) + "' for " + std::string(name));
}

std::uint32_t parse_u32(std::string_view name, std::string_view value) {
  std::uint32_t out = 0;
  auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc{} || p != value.data() + value.size()) bad_value(name, value);
  return out;
}

double parse_double(std::string_view name, std::string_view value) {
  double out = 0;
  auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc{} || p != value.data() + value.size() || out < 0) bad_value(name, value);
  return out;
}

bool parse_bool(std::string_view name, std::string_view value) {
  const auto v = lower(value);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(name, value);
}

}  // namespace

void EngineParams::set(std::string_view name_in, std::string_view value_in) {
  const auto name = lower(trim(name_in));
  const auto value = trim(value_in);
  const auto v = lower(value);
  if (name == "queuelimit") {
    queue_limit = parse_u32(name_in, value);
  } else if (name == "queuefullpolicy") {
    if (v == "block") queue_full_policy = QueueFullPolicy::Block;
    else if (v == "discard") queue_full_policy = QueueFullPolicy::Discard;
    else bad_value(name_in, value);
  } else if (name == "reservequeuelimit") {
    reserve_queue_limit = parse_u32(name_in, value);
  } else if (name == "rendezvousreadercount") {
    rendezvous_reader_count = parse_u32(name_in, value);
  } else if (name == "opentimeoutsecs") {
    open_timeout_secs = parse_double(name_in, value);
  } else if (name == "stepdistributionmode") {
    if (v == "stepsalltoall") step_distribution = StepDistribution::AllToAll;
    else if (v == "stepsroundrobin") step_distribution = StepDistribution::RoundRobin;
    else if (v == "stepsondemand") step_distribution = StepDistribution::OnDemand;
    else bad_value(name_in, value);
  } else if (name == "alwaysprovidelatesttimestep") {
    always_provide_latest = parse_bool(name_in, value);
  } else if (name == "datatransport") {
    if (v != "socket" && v != "tcp" && v != "evpath") bad_value(name_in, value);
    data_transport = "socket";
  } else if (name == "preloadmode") {
    if (v == "off") preload_mode = PreloadMode::Off;
    else if (v == "queued") preload_mode = PreloadMode::Queued;
    else if (v == "doublebuffer") preload_mode = PreloadMode::DoubleBuffer;
    else bad_value(name_in, value);
  } else {
    throw Error(ErrorCode::InvalidParameter, "unknown parameter " + std::string(name_in));
  }
}

void EngineParams::apply(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw Error(ErrorCode::InvalidParameter,
                "expected Name=Value, got '" + std::string(assignment) + "'");
  }
  set(assignment.substr(0, eq), assignment.substr(eq + 1));
}

EngineParams EngineParams::from_pairs(const std::map<std::string, std::string>& pairs) {
  EngineParams p;
  for (const auto& [k, v] : pairs) p.set(k, v);
  return p;
}

std::optional<std::string> validate_extent(const Dims& shape, const BlockExtent& e) {
  if (shape.empty()) return "shape has no dimensions";
  if (e.start.size() != shape.size() || e.count.size() != shape.size()) {
    return "extent has " + std::to_string(e.start.size()) + "/" +
           std::to_string(e.count.size()) + " dims, shape has " + std::to_string(shape.size());
  }
  for (std::size_t d = 0; d < shape.size(); ++d) {
    if (e.count[d] == 0) return "dim " + std::to_string(d) + ": count is zero";
    if (e.start[d] > shape[d] || e.count[d] > shape[d] - e.start[d]) {
      return "dim " + std::to_string(d) + ": start " + std::to_string(e.start[d]) + " + count " +
             std::to_string(e.count[d]) + " exceeds extent " + std::to_string(shape[d]);
    }
  }
  return std::nullopt;
}

void require_valid_extent(const Dims& shape, const BlockExtent& e) {
  if (auto why = validate_extent(shape, e)) throw Error(ErrorCode::ExtentInvalid, *why);
}

std::uint64_t element_count(const Dims& count) {
  std::uint64_t n = 1;
  for (auto c : count) {
    if (c != 0 && n > std::numeric_limits<std::uint64_t>::max() / c) {
      throw Error(ErrorCode::Overflow, "element count of " + format_dims(count));
    }
    n *= c;
  }
  return n;
}

std::uint64_t block_byte_len(const VariableDef& v, const BlockExtent& e) {
  const auto n = element_count(e.count);
  if (v.element_size != 0 && n > std::numeric_limits<std::uint64_t>::max() / v.element_size) {
    throw Error(ErrorCode::Overflow, "byte length of block " + format_dims(e.count));
  }
  return n * v.element_size;
}

Dims row_major_strides(const Dims& count) {
  Dims strides(count.size(), 1);
  for (std::size_t d = count.size(); d-- > 1;) strides[d - 1] = strides[d] * count[d];
  return strides;
}

std::string format_dims(const Dims& d) {
  std::string out = "[";
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(d[i]);
  }
  return out + "]";
}

Dims parse_dims(std::string_view text) {
  Dims out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto next = text.find_first_of("x,", pos);
    if (next == std::string_view::npos) next = text.size();
    auto tok = trim(text.substr(pos, next - pos));
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (tok.empty() || ec != std::errc{} || p != tok.data() + tok.size()) {
      throw Error(ErrorCode::ParseError, "bad dimension list '" + std::string(text) + "'");
    }
    out.push_back(v);
    pos = next + 1;
  }
  return out;
}

}  // namespace sstage
