#pragma once

#include <iosfwd>

#include "satellite/error.hpp"

namespace satellite::curation {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInput = 2;
inline constexpr int kExitNumeric = 3;
inline constexpr int kExitIo = 4;

int exit_code(ErrorKind kind);

/// The `satellite` command line. Returns the process exit code.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace satellite::curation
