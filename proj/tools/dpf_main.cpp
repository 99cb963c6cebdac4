// SPDX-License-Identifier: Apache-2.0
#include "dpf/cli.hpp"

int main(int argc, char** argv) { return dpf::cli_main(argc, argv); }
