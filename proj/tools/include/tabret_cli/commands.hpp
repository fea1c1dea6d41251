#pragma once

#include <string>
#include <vector>

namespace tabret::cli {

enum ExitCode : int {
  kOk = 0,
  kIoFailure = 1,
  kValidationFailure = 2,
  kFingerprintMismatch = 3,
  kNumericFailure = 4,
};

/// Parses the arguments (argv[0] is the program name) and runs the selected
/// subcommand. Library errors are logged and mapped onto exit codes.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);

}  // namespace tabret::cli
