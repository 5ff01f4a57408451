#pragma once

namespace mvd::cli {

// Full command-line driver; returns the process exit code (0 success,
// 1 runtime failure, 2 usage or config error).
int run_cli(int argc, const char* const* argv);

}  // namespace mvd::cli
