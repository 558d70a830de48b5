#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace icl::cli {

enum ExitCode : int { kSuccess = 0, kRuntimeFailure = 1, kSchemaViolation = 2, kSureInequalityFailed = 3 };

struct RunOptions {
  std::filesystem::path config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
  bool deterministic = false;
  bool verify = false;
  unsigned threads = 1;
};

struct SubcommandInfo {
  std::string name;
  std::string description;
};

const std::vector<SubcommandInfo>& subcommands();

// Loads and validates the config, runs the subcommand and writes its
// artifacts. Errors propagate as exceptions; the return value is the exit code.
int run_subcommand(const std::string& name, const RunOptions& options);

// Output directory when --out is absent: config "out", then
// $ICL_BMA_LAB_OUT/<name>, then ./icl-out/<name>.
std::filesystem::path default_out_dir(const std::string& name);

}  // namespace icl::cli
