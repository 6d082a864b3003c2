#pragma once

#include <iosfwd>

namespace feathernet {

// Exit codes: 0 success, 1 validation error (bad flags, bad input files,
// failed checks), 2 internal error.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace feathernet
