// Copyright 2026 The lorasafe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace lorasafe::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 2,
  kExitIo = 3,
  kExitNumeric = 4,
};

/// Entry point shared by main() and the tests. `args[0]` is the program name.
/// Flags override values from --config (JSON), which override defaults.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace lorasafe::cli
