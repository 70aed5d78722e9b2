#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace cascid {

/// Exit codes of the command-line front end.
enum ExitCode : int {
    kExitOk = 0,
    kExitUsage = 1,        // unparseable flags
    kExitData = 2,         // unreadable or invalid case data
    kExitNonConverged = 3  // solver did not certify; partial outputs written
};

/// Run one CLI invocation. `args` excludes the program name. Output artifacts
/// go to the configured files; human-readable summaries to `out`, diagnostics
/// to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cascid
