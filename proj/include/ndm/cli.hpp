#pragma once

#include <string>
#include <vector>

namespace ndm::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfig = 2,
  kData = 3,
  kShape = 4,
};

// Runs one subcommand; args excludes the program name. Diagnostics go to
// stderr.
int run(const std::vector<std::string>& args);
int run(int argc, char** argv);

}  // namespace ndm::cli
