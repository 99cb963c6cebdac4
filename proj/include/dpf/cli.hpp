// SPDX-License-Identifier: Apache-2.0
#pragma once

namespace dpf {

// Entry point behind tools/dpf_main.cpp. Exit codes: 0 success, 2 config
// schema violation, 3 missing data (lookup/IO), 1 any other failure.
int cli_main(int argc, char** argv);

}  // namespace dpf
