#include "easydistill/synthesis.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <iostream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "easydistill/model.hpp"

namespace easydistill {

namespace {

const std::set<std::string> kOps = {"expand",       "refine",       "pairs_from_text",
                                    "cot_generate", "cot_simplify", "cot_extend"};

std::string required_slot(const std::string& op) {
    if (op == "expand" || op == "refine" || op == "cot_generate") return "{instruction}";
    if (op == "pairs_from_text") return "{document}";
    return "{reasoning}";
}

std::string normalize(const std::string& s) {
    std::string out;
    bool pending_space = false;
    for (unsigned char c : s) {
        if (std::isspace(c)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back(static_cast<char>(std::tolower(c)));
    }
    return out;
}

std::set<std::string> trigrams(const std::string& norm) {
    std::set<std::string> out;
    if (norm.size() < 3) {
        if (!norm.empty()) out.insert(norm);
        return out;
    }
    for (std::size_t i = 0; i + 3 <= norm.size(); ++i) out.insert(norm.substr(i, 3));
    return out;
}

std::string strip(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

// "1. text" / "2) text" / "- text" / "* text" -> "text"
std::string strip_list_marker(const std::string& line) {
    std::size_t i = 0;
    while (i < line.size() && std::isdigit(static_cast<unsigned char>(line[i]))) ++i;
    if (i > 0 && i < line.size() && (line[i] == '.' || line[i] == ')')) ++i;
    else if (i == 0 && !line.empty() && (line[0] == '-' || line[0] == '*')) i = 1;
    else if (i == 0)
        return strip(line);
    return strip(line.substr(i));
}

std::vector<std::string> nonempty_lines(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        auto s = strip(line);
        if (!s.empty()) out.push_back(s);
    }
    return out;
}

// Order-preserving concurrent teacher calls; authentication failures abort
// the whole batch, other failures land in errors[i].
std::vector<std::string> run_calls(const std::vector<std::string>& prompts,
                                   const SynthesisJob& job, const ClientFactory& factory,
                                   std::vector<std::string>& errors) {
    std::vector<std::string> outputs(prompts.size());
    errors.assign(prompts.size(), "");
    if (prompts.empty()) return outputs;
    const int workers =
        std::min<int>(job.max_concurrency, static_cast<int>(prompts.size()));
    std::atomic<std::size_t> next{0};
    std::atomic<bool> auth_failed{false};
    std::string auth_message;
    std::mutex auth_mu;
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            auto client = factory();
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= prompts.size() || auth_failed.load()) break;
                try {
                    outputs[i] = client->complete(job.system_prompt, prompts[i]);
                } catch (const AuthError& e) {
                    std::lock_guard<std::mutex> lk(auth_mu);
                    auth_failed = true;
                    auth_message = e.what();
                    break;
                } catch (const std::exception& e) {
                    errors[i] = e.what();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (auth_failed) throw AuthError(auth_message);
    return outputs;
}

// reasoning between the job's begin/end markers; false if either is missing
bool split_reasoning(const std::string& text, const SynthesisJob& job,
                     std::string& reasoning, std::string& after) {
    const auto b = text.find(job.cot_begin);
    if (b == std::string::npos) return false;
    const auto start = b + job.cot_begin.size();
    const auto e = text.find(job.cot_end, start);
    if (e == std::string::npos) return false;
    reasoning = strip(text.substr(start, e - start));
    after = strip(text.substr(e + job.cot_end.size()));
    return true;
}

}  // namespace

void SynthesisJob::validate() const {
    if (!kOps.count(op)) throw SynthesisError("unknown synthesis operator '" + op + "'");
    if (fan_out < 1) throw SynthesisError("fan_out must be >= 1");
    if (dedup_threshold < 0.0 || dedup_threshold > 1.0)
        throw SynthesisError("dedup_threshold must lie in [0,1]");
    if (max_chunk_tokens < 1) throw SynthesisError("max_chunk_tokens must be >= 1");
    if (max_concurrency < 1) throw SynthesisError("max_concurrency must be >= 1");
    if (prompt_template.empty()) throw SynthesisError("prompt_template must be set");
    const std::string slot = required_slot(op);
    if (prompt_template.find(slot) == std::string::npos)
        throw SynthesisError("prompt template for '" + op + "' is missing the " + slot +
                             " slot");
    if ((op == "cot_simplify" || op == "cot_extend" || op == "cot_generate") &&
        (cot_begin.empty() || cot_end.empty()))
        throw SynthesisError("reasoning delimiters must be non-empty");
}

std::string fill_slots(const std::string& tmpl,
                       const std::vector<std::pair<std::string, std::string>>& slots) {
    std::string out = tmpl;
    for (const auto& [name, value] : slots) {
        const std::string key = "{" + name + "}";
        std::size_t pos = 0;
        while ((pos = out.find(key, pos)) != std::string::npos) {
            out.replace(pos, key.size(), value);
            pos += value.size();
        }
    }
    return out;
}

double trigram_jaccard(const std::string& a, const std::string& b) {
    const auto ta = trigrams(normalize(a));
    const auto tb = trigrams(normalize(b));
    if (ta.empty() && tb.empty()) return 1.0;
    std::size_t inter = 0;
    for (const auto& t : ta) inter += tb.count(t);
    const std::size_t uni = ta.size() + tb.size() - inter;
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<std::size_t> dedup_indices(const std::vector<std::string>& texts,
                                       double threshold) {
    std::vector<std::size_t> kept;
    std::vector<std::string> kept_norm;
    for (std::size_t i = 0; i < texts.size(); ++i) {
        const std::string norm = normalize(texts[i]);
        bool duplicate = false;
        for (std::size_t j = 0; j < kept.size() && !duplicate; ++j) {
            if (threshold >= 1.0)
                duplicate = norm == kept_norm[j];
            else
                duplicate = trigram_jaccard(texts[i], texts[kept[j]]) >= threshold;
        }
        if (!duplicate) {
            kept.push_back(i);
            kept_norm.push_back(norm);
        }
    }
    return kept;
}

ExpandResult expand_instructions(const std::vector<InstructionRecord>& seeds,
                                 const SynthesisJob& job, const ClientFactory& factory,
                                 const std::string& teacher_hash) {
    job.validate();
    if (seeds.empty()) throw SynthesisError("expand: seed list is empty");
    std::vector<std::string> prompts;
    for (const auto& s : seeds)
        prompts.push_back(fill_slots(
            job.prompt_template,
            {{"instruction", s.instruction}, {"fan_out", std::to_string(job.fan_out)}}));

    ExpandResult result;
    auto outputs = run_calls(prompts, job, factory, result.seed_errors);

    std::vector<std::string> candidates;
    std::vector<int> candidate_seed;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        if (!result.seed_errors[i].empty()) continue;
        int taken = 0;
        for (const auto& line : nonempty_lines(outputs[i])) {
            if (taken == job.fan_out) break;
            candidates.push_back(strip_list_marker(line));
            candidate_seed.push_back(static_cast<int>(i));
            ++taken;
        }
    }
    result.candidates = static_cast<int>(candidates.size());
    for (std::size_t idx : dedup_indices(candidates, job.dedup_threshold)) {
        SynthesizedInstruction rec;
        rec.record.instruction = candidates[idx];
        rec.provenance = {"expand", candidate_seed[idx], teacher_hash};
        result.records.push_back(std::move(rec));
    }
    return result;
}

RefineResult refine_instructions(const std::vector<InstructionRecord>& instructions,
                                 const SynthesisJob& job, const ClientFactory& factory,
                                 const std::string& teacher_hash) {
    job.validate();
    std::vector<std::string> prompts;
    for (const auto& ins : instructions)
        prompts.push_back(
            fill_slots(job.prompt_template, {{"instruction", ins.instruction}}));

    RefineResult result;
    auto outputs = run_calls(prompts, job, factory, result.errors);
    for (std::size_t i = 0; i < instructions.size(); ++i) {
        SynthesizedInstruction rec;
        rec.provenance = {"refine", static_cast<int>(i), teacher_hash};
        const std::string refined = strip(outputs[i]);
        if (!result.errors[i].empty() || refined.empty()) {
            rec.record.instruction = instructions[i].instruction;
            rec.fallback = true;
            std::cerr << "refine: input " << i << " kept unchanged ("
                      << (result.errors[i].empty() ? "empty teacher output"
                                                   : result.errors[i])
                      << ")\n";
        } else {
            rec.record.instruction = refined;
        }
        result.records.push_back(std::move(rec));
    }
    return result;
}

PairsResult pairs_from_text(const std::vector<std::string>& documents,
                            const SynthesisJob& job, const ClientFactory& factory,
                            const std::string& teacher_hash) {
    job.validate();
    PairsResult result;
    if (documents.empty()) return result;

    std::vector<std::string> chunks;
    for (const auto& doc : documents)
        for (std::size_t off = 0; off < doc.size();
             off += static_cast<std::size_t>(job.max_chunk_tokens))
            chunks.push_back(doc.substr(off, static_cast<std::size_t>(job.max_chunk_tokens)));
    result.chunks = static_cast<int>(chunks.size());

    std::vector<std::string> prompts;
    for (const auto& c : chunks)
        prompts.push_back(fill_slots(job.prompt_template, {{"document", c}}));
    std::vector<std::string> errors;
    auto outputs = run_calls(prompts, job, factory, errors);

    int parsed = 0;
    for (std::size_t ci = 0; ci < chunks.size(); ++ci) {
        if (!errors[ci].empty()) {
            std::cerr << "pairs_from_text: chunk " << ci << " failed: " << errors[ci]
                      << "\n";
            continue;
        }
        std::string instruction;
        bool have_instruction = false;
        for (const auto& line : nonempty_lines(outputs[ci])) {
            if (line.rfind("INSTRUCTION:", 0) == 0) {
                if (have_instruction) ++result.dropped;  // superseded, never answered
                instruction = strip(line.substr(12));
                have_instruction = !instruction.empty();
                if (!have_instruction) ++result.dropped;
            } else if (line.rfind("RESPONSE:", 0) == 0) {
                const std::string response = strip(line.substr(9));
                if (!have_instruction || response.empty()) {
                    ++result.dropped;
                } else {
                    result.records.push_back({instruction, response});
                    result.provenance.push_back(
                        {"pairs_from_text", static_cast<int>(ci), teacher_hash});
                    ++parsed;
                }
                have_instruction = false;
            } else {
                ++result.dropped;  // free text outside the protocol
            }
        }
        if (have_instruction) ++result.dropped;  // trailing unanswered instruction
    }
    if (result.dropped > parsed) {
        result.warned = true;
        std::cerr << "pairs_from_text: " << result.dropped << " malformed emissions vs "
                  << parsed << " parsed pairs\n";
    }
    return result;
}

CotResult cot_generate(const std::vector<LabeledRecord>& inputs, const SynthesisJob& job,
                       const ClientFactory& factory, const std::string& teacher_hash) {
    job.validate();
    std::vector<std::string> prompts;
    for (const auto& in : inputs)
        prompts.push_back(fill_slots(job.prompt_template,
                                     {{"instruction", in.instruction},
                                      {"response", in.output}}));
    std::vector<std::string> errors;
    auto outputs = run_calls(prompts, job, factory, errors);

    CotResult result;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (!errors[i].empty()) {
            ++result.dropped;
            std::cerr << "cot_generate: input " << i << " failed: " << errors[i] << "\n";
            continue;
        }
        std::string reasoning, answer;
        if (!split_reasoning(outputs[i], job, reasoning, answer) || reasoning.empty() ||
            answer.empty()) {
            ++result.dropped;
            continue;
        }
        result.records.push_back({inputs[i].instruction, reasoning, answer});
        result.provenance.push_back({"cot_generate", static_cast<int>(i), teacher_hash});
    }
    return result;
}

namespace {

CotRewriteResult rewrite_cots(const std::vector<CoTRecord>& cots, const SynthesisJob& job,
                              const ClientFactory& factory,
                              const std::string& teacher_hash, bool want_shorter) {
    job.validate();
    std::vector<std::string> prompts;
    for (const auto& c : cots)
        prompts.push_back(fill_slots(job.prompt_template, {{"instruction", c.instruction},
                                                           {"reasoning", c.reasoning},
                                                           {"answer", c.answer}}));
    std::vector<std::string> errors;
    auto outputs = run_calls(prompts, job, factory, errors);

    const char* name = want_shorter ? "cot_simplify" : "cot_extend";
    CotRewriteResult result;
    for (std::size_t i = 0; i < cots.size(); ++i) {
        if (!errors[i].empty()) {
            ++result.dropped;
            std::cerr << name << ": input " << i << " failed: " << errors[i] << "\n";
            continue;
        }
        std::string reasoning, after;
        if (!split_reasoning(outputs[i], job, reasoning, after) || reasoning.empty()) {
            ++result.dropped;
            continue;
        }
        const int before = static_cast<int>(tokenize(cots[i].reasoning).size());
        const int now = static_cast<int>(tokenize(reasoning).size());
        if (want_shorter ? now >= before : now <= before) {
            ++result.warned;
            std::cerr << name << ": input " << i << " reasoning length went from "
                      << before << " to " << now << " tokens\n";
        }
        result.records.push_back({cots[i].instruction, reasoning, cots[i].answer});
        result.provenance.push_back({name, static_cast<int>(i), teacher_hash});
        result.length_before.push_back(before);
        result.length_after.push_back(now);
    }
    return result;
}

}  // namespace

CotRewriteResult cot_simplify(const std::vector<CoTRecord>& cots, const SynthesisJob& job,
                              const ClientFactory& factory,
                              const std::string& teacher_hash) {
    return rewrite_cots(cots, job, factory, teacher_hash, true);
}

CotRewriteResult cot_extend(const std::vector<CoTRecord>& cots, const SynthesisJob& job,
                            const ClientFactory& factory,
                            const std::string& teacher_hash) {
    return rewrite_cots(cots, job, factory, teacher_hash, false);
}

}  // namespace easydistill
