#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace fal::cli {

enum ExitCode : int { kOk = 0, kConfigError = 1, kVerificationError = 2, kIoError = 3 };

/// Entry point of the `fal` tool; args exclude the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace fal::cli
