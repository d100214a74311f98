#pragma once

// Command-line front end. `run` never throws: failures become exit codes
// (0 ok, 2 contract or config, 3 numerical, 4 I/O) and a message on `err`.

#include <ostream>
#include <string>
#include <vector>

namespace klr::cli {

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// Convenience overload; args[0] is the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace klr::cli
