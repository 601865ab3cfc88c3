#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace lmk::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kDataError = 2, kNoMatch = 3 };

/// Runs the `lmk` command line. args[0] is the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace lmk::cli
