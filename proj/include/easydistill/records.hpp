#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace easydistill {

struct RecordError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InstructionRecord {
    std::string instruction;
};

struct LabeledRecord {
    std::string instruction;
    std::string output;
};

struct PreferenceRecord {
    std::string instruction;
    std::string chosen;
    std::string rejected;
};

struct CoTRecord {
    std::string instruction;
    std::string reasoning;
    std::string answer;
};

// Per-position top-k teacher log-probabilities, the white-box KD interchange
// format. One record per sample, one entry per response token.
struct TopKEntry {
    int token_id = 0;
    double logprob = 0.0;
};

struct TopKPosition {
    int target_token = 0;
    std::vector<TopKEntry> topk;  // logprobs non-increasing, token ids distinct
};

struct TopKLogitsRecord {
    int sample_index = 0;
    std::vector<TopKPosition> positions;

    void validate() const;
};

// JSON (array) file IO for dataset records
std::vector<InstructionRecord> load_instructions(const std::string& path);
std::vector<LabeledRecord> load_labeled(const std::string& path);
std::vector<PreferenceRecord> load_preferences(const std::string& path);
std::vector<CoTRecord> load_cots(const std::string& path);
void save_instructions(const std::string& path, const std::vector<InstructionRecord>& v);
void save_labeled(const std::string& path, const std::vector<LabeledRecord>& v);
void save_preferences(const std::string& path, const std::vector<PreferenceRecord>& v);
void save_cots(const std::string& path, const std::vector<CoTRecord>& v);

// JSON Lines IO for the logits interchange file
void append_topk_record(std::ostream& out, const TopKLogitsRecord& rec);
std::vector<TopKLogitsRecord> load_topk_records(const std::string& path);

}  // namespace easydistill
