#pragma once

#include <string>
#include <vector>

namespace lmlab {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

// Fast invariant suites covering every module; the `selfcheck` subcommand
// prints one line per entry.
std::vector<CheckResult> run_selfchecks();

}  // namespace lmlab
