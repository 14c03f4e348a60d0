#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace cmt::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInternal = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;

// Entry point of the `cmt` tool. args[0] is the program name. Reports go to
// `out`, diagnostics to `err`. Returns the process exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cmt::cli
