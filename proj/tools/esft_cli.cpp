// Copyright 2026 The esft-serve Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "commands.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return esft::cli::run_cli(std::move(args), std::cout, std::cerr);
}
