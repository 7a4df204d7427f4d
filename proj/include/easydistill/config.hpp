#pragma once

#include <map>
#include <string>
#include <vector>

#include "easydistill/objectives.hpp"
#include "easydistill/synthesis.hpp"
#include "easydistill/teacher.hpp"
#include "easydistill/trainers.hpp"

namespace easydistill {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DatasetConfig {
    std::string instruction_path;
    std::string labeled_path;
    std::string logits_path;
    std::string template_path = "chat_template.jinja";
    std::string preference_path;
    std::string raw_text_path;
    std::string cot_path;
    std::string output_path;
    std::uint64_t seed = 42;
    std::map<std::string, std::string> extra;  // unknown keys, serialized JSON
};

struct ModelsConfig {
    std::string teacher;
    std::string student;
    std::string reward;
    std::map<std::string, std::string> extra;
};

// One job file: job_type plus the sections it needs. Unknown keys are kept
// (and re-serialized) so configs survive a parse -> serialize round trip.
struct JobConfig {
    std::string job_type;
    DatasetConfig dataset;
    InferenceConfig inference;
    bool has_distillation = false;
    DistillSpec distillation;
    ModelsConfig models;
    TrainingConfig training;
    bool has_dpo = false;
    double dpo_beta = 0.1;
    bool has_grpo = false;
    GrpoOptions grpo;
    bool has_synthesis = false;
    SynthesisJob synthesis;                 // prompt_template filled at dispatch
    std::string synthesis_template_path;
    std::map<std::string, std::string> extra;      // unknown top-level sections
    std::vector<std::string> warnings;             // collected while parsing

    void validate() const;  // required sections per job_type
    std::string serialize() const;
};

extern const std::vector<std::string> kKnownJobTypes;

JobConfig parse_config(const std::string& path);
JobConfig parse_config_text(const std::string& text, const std::string& origin);

}  // namespace easydistill
