#pragma once

// Command-line surface: gen-data, dump-activations, extract-cone, metrics,
// train, ablate and report.

#include <ostream>
#include <string>
#include <vector>

namespace rg {

inline constexpr const char* kOutputEnv = "REFUSALGUARD_OUT";

// `args` includes the program name. Returns 0 on success, 1 on usage or
// configuration errors, 2 on data errors.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace rg
