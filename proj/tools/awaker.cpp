// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "awaker/cli.hpp"

int main(int argc, char** argv) { return awaker::run_cli(argc, argv, std::cout, std::cerr); }
