#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace ume::cli {

/// Process exit codes.
enum ExitCode : int {
    kOk = 0,
    kConfigError = 2,
    kDataError = 3,
    kRuntimeError = 4,
};

/// Runs one command. `args` excludes the program name. Never throws.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ume::cli
