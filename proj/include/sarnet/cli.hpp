#pragma once

#include <iosfwd>

namespace sarnet {

/// Entry point of the sarnet tool. Exit codes: 0 ok, 1 failed check or
/// runtime error, 2 usage or configuration error.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace sarnet
