#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace bbgc {

// Runs the command line; returns the process exit code
// (0 ok, 2 usage, 3 input contract, 4 calibration precondition, 5 source).
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace bbgc
