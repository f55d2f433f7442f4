#pragma once

#include <ostream>

namespace gcnuq::cli {

// Entry point shared by the executable and the tests. Returns the process
// exit status; errors are reported on `err` as one JSON object.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace gcnuq::cli
