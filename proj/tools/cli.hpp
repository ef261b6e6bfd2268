#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace omop_mcp::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Entry point for `omop-mcp <subcommand> ...`. `args` excludes argv[0].
/// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
int run(const std::vector<std::string>& args, std::istream& in, std::ostream& out,
        std::ostream& err);

}  // namespace omop_mcp::cli
