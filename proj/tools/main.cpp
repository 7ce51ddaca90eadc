// Copyright 2026 The lorasafe Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>
#include <string>
#include <vector>

#include "cli/commands.hpp"

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv, argv + argc);
  return lorasafe::cli::run_cli(args, std::cout, std::cerr);
}
