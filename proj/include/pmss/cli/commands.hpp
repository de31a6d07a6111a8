#pragma once

#include <iosfwd>

namespace pmss::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kInvalidConfig = 2,
  kNonFinite = 3,
  kBadCheckpoint = 4,
};

/// Entry point of the `pmss` tool. Human-readable output goes to `out`;
/// failures print one machine-readable JSON line to `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace pmss::cli
