#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace sponge::cli {

enum ExitCode : int {
  kOk = 0,
  kUsage = 1,    // bad flags, config values, or architecture spec
  kData = 2,     // unreadable, corrupt, or inconsistent inputs
  kNumeric = 3,  // non-finite values during optimization
};

/// Runs one `sponge` command. `args` excludes the program name. Diagnostics
/// go to `err`, progress lines to `out`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace sponge::cli
