#pragma once

#include <string>
#include <vector>

namespace qesr::cli {

// Full argv-style entry point: args[0] is the program name. Returns the
// process exit code (0 ok, 2 input, 3 fit, 4 conditioning, 5 simulation
// instability) and never throws.
int run_cli(const std::vector<std::string>& args);
int run_cli(int argc, const char* const* argv);

}  // namespace qesr::cli
