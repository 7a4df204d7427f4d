#include "easydistill/records.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include <json.hpp>

using nlohmann::json;

namespace easydistill {

void TopKLogitsRecord::validate() const {
    for (const auto& pos : positions) {
        std::set<int> seen;
        double mass = 0.0, prev = 0.0;
        for (std::size_t i = 0; i < pos.topk.size(); ++i) {
            const auto& e = pos.topk[i];
            if (!seen.insert(e.token_id).second)
                throw RecordError("topk record: duplicate token id " +
                                  std::to_string(e.token_id));
            if (i > 0 && e.logprob > prev + 1e-12)
                throw RecordError("topk record: logprobs not non-increasing");
            prev = e.logprob;
            mass += std::exp(e.logprob);
        }
        if (mass > 1.0 + 1e-6)
            throw RecordError("topk record: probability mass " + std::to_string(mass) +
                              " exceeds 1");
    }
}

namespace {

json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw RecordError("cannot open " + path);
    return json::parse(in);
}

void write_json_file(const std::string& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw RecordError("cannot write " + path);
    // model output is raw bytes; replace invalid UTF-8 rather than abort
    out << j.dump(2, ' ', false, json::error_handler_t::replace) << "\n";
}

std::string required_string(const json& j, const char* key, const std::string& path) {
    if (!j.contains(key))
        throw RecordError(path + ": record missing key \"" + key + "\"");
    return j.at(key).get<std::string>();
}

}  // namespace

std::vector<InstructionRecord> load_instructions(const std::string& path) {
    std::vector<InstructionRecord> out;
    for (const auto& j : load_json_file(path)) {
        InstructionRecord r{required_string(j, "instruction", path)};
        if (r.instruction.empty()) throw RecordError(path + ": empty instruction");
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<LabeledRecord> load_labeled(const std::string& path) {
    std::vector<LabeledRecord> out;
    for (const auto& j : load_json_file(path)) {
        LabeledRecord r{required_string(j, "instruction", path),
                        required_string(j, "output", path)};
        if (r.instruction.empty() || r.output.empty())
            throw RecordError(path + ": empty instruction or output");
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<PreferenceRecord> load_preferences(const std::string& path) {
    std::vector<PreferenceRecord> out;
    for (const auto& j : load_json_file(path)) {
        PreferenceRecord r{required_string(j, "instruction", path),
                           required_string(j, "chosen", path),
                           required_string(j, "rejected", path)};
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<CoTRecord> load_cots(const std::string& path) {
    std::vector<CoTRecord> out;
    for (const auto& j : load_json_file(path)) {
        CoTRecord r{required_string(j, "instruction", path),
                    required_string(j, "reasoning", path),
                    required_string(j, "answer", path)};
        out.push_back(std::move(r));
    }
    return out;
}

void save_instructions(const std::string& path, const std::vector<InstructionRecord>& v) {
    json arr = json::array();
    for (const auto& r : v) arr.push_back({{"instruction", r.instruction}});
    write_json_file(path, arr);
}

void save_labeled(const std::string& path, const std::vector<LabeledRecord>& v) {
    json arr = json::array();
    for (const auto& r : v)
        arr.push_back({{"instruction", r.instruction}, {"output", r.output}});
    write_json_file(path, arr);
}

void save_preferences(const std::string& path, const std::vector<PreferenceRecord>& v) {
    json arr = json::array();
    for (const auto& r : v)
        arr.push_back({{"instruction", r.instruction},
                       {"chosen", r.chosen},
                       {"rejected", r.rejected}});
    write_json_file(path, arr);
}

void save_cots(const std::string& path, const std::vector<CoTRecord>& v) {
    json arr = json::array();
    for (const auto& r : v)
        arr.push_back({{"instruction", r.instruction},
                       {"reasoning", r.reasoning},
                       {"answer", r.answer}});
    write_json_file(path, arr);
}

void append_topk_record(std::ostream& out, const TopKLogitsRecord& rec) {
    json positions = json::array();
    for (const auto& pos : rec.positions) {
        json topk = json::array();
        for (const auto& e : pos.topk) topk.push_back({e.token_id, e.logprob});
        positions.push_back({{"target_token", pos.target_token}, {"topk", topk}});
    }
    json line = {{"sample_index", rec.sample_index}, {"positions", positions}};
    out << line.dump() << "\n";
}

std::vector<TopKLogitsRecord> load_topk_records(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw RecordError("cannot open logits file " + path);
    std::vector<TopKLogitsRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        TopKLogitsRecord rec;
        rec.sample_index = j.at("sample_index");
        for (const auto& pj : j.at("positions")) {
            TopKPosition pos;
            pos.target_token = pj.at("target_token");
            for (const auto& ej : pj.at("topk"))
                pos.topk.push_back({ej.at(0).get<int>(), ej.at(1).get<double>()});
            rec.positions.push_back(std::move(pos));
        }
        rec.validate();
        out.push_back(std::move(rec));
    }
    return out;
}

}  // namespace easydistill
