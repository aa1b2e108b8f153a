#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace spcl::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kUsage = 1;
inline constexpr int kData = 2;
inline constexpr int kNumerical = 3;

/// Runs one subcommand. `args` excludes the program name. Data goes to
/// `out`, logs and diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace spcl::cli
