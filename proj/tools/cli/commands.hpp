// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace cbdes::cli {

/// Runs the command line `args` (without the program name). Returns the
/// process exit code; failures print one line to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cbdes::cli
