#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace roundfit {

/// Exit codes of the command-line tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,   // bad flags, bad or missing input files
  kExitFailed = 2,  // a verification check failed, or an internal error
};

/// Runs the tool with `args` (args[0] is the program name).
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace roundfit
