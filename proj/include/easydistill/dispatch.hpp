#pragma once

#include <string>
#include <vector>

#include "easydistill/config.hpp"

namespace easydistill {

struct DispatchError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct StageReport {
    std::string stage;
    bool skipped = false;  // outputs existed and hash-matched
    std::string detail;
};

struct RunReport {
    std::vector<StageReport> stages;
};

// Ordered stage names for a config, as executed (and as printed by --dry-run).
std::vector<std::string> plan_stages(const JobConfig& cfg);

// Runs the job. Stages whose stamp matches the current input hashes are
// skipped; a stage failure aborts with the stage name and the location of any
// partial output. ED_API_KEY, when set, overrides the configured api_key.
RunReport dispatch(JobConfig cfg, LogFn log = stderr_logger());

}  // namespace easydistill
