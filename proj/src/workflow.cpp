#include "sstage/workflow.hpp"

#include <cctype>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include "sstage/core.hpp"

namespace sstage {

namespace {

const std::set<std::string, std::less<>> kWriterKeys = {"name", "stream", "ranks", "steps", "shape",
                                                        "decomposition", "step-delay", "seed"};
const std::set<std::string, std::less<>> kReaderKeys = {"name", "stream", "ranks", "sleep",
                                                        "begin-step-timeout", "selection", "seed",
                                                        "expect-steps"};

[[noreturn]] void fail(int line, const std::string& what) {
  throw Error(ErrorCode::ParseError, "line " + std::to_string(line) + ": " + what);
}

std::vector<std::string> split_ws(std::string_view s) {
  std::vector<std::string> out;
  std::istringstream in{std::string(s)};
  for (std::string tok; in >> tok;) out.push_back(tok);
  return out;
}

}  // namespace

Workflow parse_workflow(std::string_view text) {
  Workflow wf;
  std::istringstream in{std::string(text)};
  int line_no = 0;
  std::set<std::string> names;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto toks = split_ws(line);
    if (toks.empty()) continue;

    if (toks[0] == "contact-dir") {
      if (toks.size() != 2) fail(line_no, "contact-dir takes exactly one path");
      if (wf.contact_dir) fail(line_no, "contact-dir given twice");
      wf.contact_dir = toks[1];
      continue;
    }
    WorkflowProcess p;
    p.line = line_no;
    if (toks[0] == "writer") {
      p.role = WorkflowProcess::Role::Writer;
    } else if (toks[0] == "reader") {
      p.role = WorkflowProcess::Role::Reader;
    } else {
      fail(line_no, "expected 'writer', 'reader' or 'contact-dir', got '" + toks[0] + "'");
    }
    const auto& allowed = p.role == WorkflowProcess::Role::Writer ? kWriterKeys : kReaderKeys;
    EngineParams check;
    for (std::size_t i = 1; i < toks.size(); ++i) {
      const auto& tok = toks[i];
      const auto eq = tok.find('=');
      if (eq == std::string::npos || eq == 0) fail(line_no, "expected key=value, got '" + tok + "'");
      const auto key = tok.substr(0, eq), value = tok.substr(eq + 1);
      if (std::isupper(static_cast<unsigned char>(key[0]))) {
        try {
          check.set(key, value);
        } catch (const Error& e) {
          fail(line_no, e.what());
        }
        p.params.push_back(tok);
        continue;
      }
      if (!allowed.count(key)) fail(line_no, "unknown " + toks[0] + " key '" + key + "'");
      if (key == "name") {
        p.name = value;
      } else if (key == "stream") {
        p.stream = value;
      } else if (key == "ranks") {
        int n = 0;
        auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), n);
        if (ec != std::errc() || ptr != value.data() + value.size() || n < 1) {
          fail(line_no, "ranks must be a positive integer, got '" + value + "'");
        }
        p.ranks = n;
      } else {
        p.options[key] = value;
      }
    }
    if (p.name.empty()) p.name = toks[0] + std::to_string(wf.processes.size());
    if (!names.insert(p.name).second) fail(line_no, "duplicate name '" + p.name + "'");
    wf.processes.push_back(std::move(p));
  }
  if (wf.processes.empty()) fail(line_no, "no writer or reader declared");
  return wf;
}

Workflow load_workflow(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_workflow(ss.str());
}

}  // namespace sstage
