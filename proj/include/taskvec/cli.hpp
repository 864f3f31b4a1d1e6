// Copyright 2026 The taskvec Authors
// SPDX-License-Identifier: Apache-2.0

// The `taskvec` command line, callable in-process.

#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace taskvec::cli {

inline constexpr const char* kToolVersion = "0.1.0";

enum ExitCode : int { kExitOk = 0, kExitRuntime = 1, kExitUsage = 2 };

// `args` excludes the program name. Data goes to `out` or to files,
// diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace taskvec::cli
