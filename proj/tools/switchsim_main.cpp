// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "switchsim/cli.hpp"

int main(int argc, char** argv) { return switchsim::run_cli(argc, argv, std::cout, std::cerr); }
