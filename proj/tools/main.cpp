// Copyright 2026 The taskvec Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "taskvec/cli.hpp"

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv + 1, argv + argc);
  return taskvec::cli::run(args, std::cout, std::cerr);
}
