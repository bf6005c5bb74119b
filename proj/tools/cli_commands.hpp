#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mvr::cli {

// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
// Failures print one line "error: <code>: <message>" to err.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mvr::cli
