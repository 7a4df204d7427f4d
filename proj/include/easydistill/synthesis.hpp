#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "easydistill/records.hpp"
#include "easydistill/teacher.hpp"

namespace easydistill {

struct SynthesisError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Data synthesis operators driven by a teacher client. Each worker thread gets
// its own client from the factory; results are assembled in input order.
using ClientFactory = std::function<std::unique_ptr<ChatClient>()>;

struct SynthesisJob {
    std::string op;  // expand | refine | pairs_from_text | cot_generate |
                     // cot_simplify | cot_extend
    std::string prompt_template;
    int fan_out = 1;
    double dedup_threshold = 0.9;
    std::string system_prompt = "You are a helpful assistant.";
    std::string cot_begin = "<reasoning>";
    std::string cot_end = "</reasoning>";
    int max_chunk_tokens = 1024;
    int max_concurrency = 4;

    void validate() const;  // checks op, ranges, and required template slots
};

// Lowercase, whitespace-collapsed character-trigram Jaccard similarity.
double trigram_jaccard(const std::string& a, const std::string& b);

// Keep-first greedy dedup; threshold 1.0 keeps everything except exact
// (normalized) duplicates. Returns surviving indices, in order.
std::vector<std::size_t> dedup_indices(const std::vector<std::string>& texts,
                                       double threshold);

struct Provenance {
    std::string op;
    int source_index = 0;       // index into the operator's input list
    std::string teacher_hash;   // content hash of the teacher configuration
};

struct SynthesizedInstruction {
    InstructionRecord record;
    Provenance provenance;
    bool fallback = false;  // refine kept the original input
};

struct ExpandResult {
    std::vector<SynthesizedInstruction> records;  // after dedup
    std::vector<std::string> seed_errors;         // "" where the seed succeeded
    int candidates = 0;                           // before dedup
};

ExpandResult expand_instructions(const std::vector<InstructionRecord>& seeds,
                                 const SynthesisJob& job, const ClientFactory& factory,
                                 const std::string& teacher_hash);

struct RefineResult {
    std::vector<SynthesizedInstruction> records;  // one per input, order kept
    std::vector<std::string> errors;              // "" where the call succeeded
};

RefineResult refine_instructions(const std::vector<InstructionRecord>& instructions,
                                 const SynthesisJob& job, const ClientFactory& factory,
                                 const std::string& teacher_hash);

struct PairsResult {
    std::vector<LabeledRecord> records;
    std::vector<Provenance> provenance;  // parallel to records (chunk index)
    int chunks = 0;
    int dropped = 0;      // unparseable emissions
    bool warned = false;  // parse-failure rate above one half
};

PairsResult pairs_from_text(const std::vector<std::string>& documents,
                            const SynthesisJob& job, const ClientFactory& factory,
                            const std::string& teacher_hash);

struct CotResult {
    std::vector<CoTRecord> records;
    std::vector<Provenance> provenance;
    int dropped = 0;  // emissions without the reasoning delimiters
};

// inputs[i].output may be empty (instruction-grounded) or carry a known
// answer that is passed to the {response} template slot.
CotResult cot_generate(const std::vector<LabeledRecord>& inputs, const SynthesisJob& job,
                       const ClientFactory& factory, const std::string& teacher_hash);

struct CotRewriteResult {
    std::vector<CoTRecord> records;  // instruction/answer byte-identical to input
    std::vector<Provenance> provenance;
    std::vector<int> length_before;  // reasoning token counts
    std::vector<int> length_after;
    int dropped = 0;
    int warned = 0;  // rewrites that moved in the wrong direction
};

CotRewriteResult cot_simplify(const std::vector<CoTRecord>& cots, const SynthesisJob& job,
                              const ClientFactory& factory,
                              const std::string& teacher_hash);
CotRewriteResult cot_extend(const std::vector<CoTRecord>& cots, const SynthesisJob& job,
                            const ClientFactory& factory,
                            const std::string& teacher_hash);

// {slot} substitution used by all operators; unknown slots are left verbatim.
std::string fill_slots(const std::string& tmpl,
                       const std::vector<std::pair<std::string, std::string>>& slots);

}  // namespace easydistill
