#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace sstage {

/// One cohort launched by `sstage run`.
struct WorkflowProcess {
  enum class Role { Writer, Reader } role = Role::Writer;
  int line = 0;
  std::string name;
  std::string stream = "stream";
  int ranks = 1;
  /// Lower-case keys: CLI options of the role's subcommand, without "--".
  std::map<std::string, std::string> options;
  /// Capitalized keys: engine parameters, validated while parsing.
  std::vector<std::string> params;
};

struct Workflow {
  std::optional<std::filesystem::path> contact_dir;
  std::vector<WorkflowProcess> processes;
};

/// Line-oriented format:
///   # comment
///   contact-dir <path>
///   writer key=value ...
///   reader key=value ...
/// Errors are ParseError with the offending line number.
Workflow parse_workflow(std::string_view text);
Workflow load_workflow(const std::filesystem::path& path);

}  // namespace sstage
