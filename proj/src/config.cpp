#include "easydistill/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

using nlohmann::json;

namespace easydistill {

const std::vector<std::string> kKnownJobTypes = {
    "black_box_kd_api", "black_box_kd_local", "white_box_kd_local",
    "dpo",              "reward_model",       "grpo",
    "synth_expand",     "synth_refine",       "synth_pairs",
    "cot_generate",     "cot_simplify",       "cot_extend"};

namespace {

// Sample configs abbreviate repeated sections with "..." and omit the comma
// after them; normalize both so they parse as ordinary JSON. Ellipsized
// sections become {"__defaults__": true} and inherit the default block.
std::string repair_config_text(const std::string& text) {
    std::string out;
    bool in_string = false, escaped = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (in_string) {
            out.push_back(c);
            if (escaped)
                escaped = false;
            else if (c == '\\')
                escaped = true;
            else if (c == '"')
                in_string = false;
            continue;
        }
        if (c == '"') {
            in_string = true;
            out.push_back(c);
            continue;
        }
        if (c == '.' && text.compare(i, 3, "...") == 0) {
            out += "\"__defaults__\": true";
            i += 2;
            continue;
        }
        out.push_back(c);
        if (c == '}') {
            std::size_t j = i + 1;
            while (j < text.size() &&
                   std::isspace(static_cast<unsigned char>(text[j])))
                ++j;
            if (j < text.size() && text[j] == '"') out.push_back(',');
        }
    }
    return out;
}

json defaults_for(const std::string& section) {
    if (section == "dataset")
        return {{"instruction_path", "train.json"},
                {"labeled_path", "train_labeled.json"},
                {"template", "chat_template.jinja"},
                {"seed", 42}};
    if (section == "training")
        return {{"output_dir", "result/"},
                {"num_train_epochs", 3},
                {"per_device_train_batch_size", 1},
                {"gradient_accumulation_steps", 8},
                {"save_steps", 1000},
                {"logging_steps", 1},
                {"learning_rate", 2e-5},
                {"weight_decay", 0.05},
                {"warmup_ratio", 0.1},
                {"lr_scheduler_type", "cosine"}};
    if (section == "inference")
        return {{"base_url", "ENDPOINT"},
                {"api_key", "TOKEN"},
                {"stream", "true"},
                {"system_prompt", "You are a helpful assistant."},
                {"max_new_tokens", 512}};
    return json::object();
}

json resolve_defaults(const std::string& section, json block) {
    if (!block.is_object())
        throw ConfigError("section '" + section + "' must be a JSON object");
    if (block.contains("__defaults__")) {
        block.erase("__defaults__");
        json merged = defaults_for(section);
        for (auto& [k, v] : block.items()) merged[k] = v;
        return merged;
    }
    return block;
}

[[noreturn]] void type_error(const std::string& key, const char* want, const json& got) {
    throw ConfigError("key " + key + " must be a " + want + ", got " +
                      std::string(got.type_name()));
}

std::string as_string(const json& v, const std::string& key) {
    if (!v.is_string()) type_error(key, "string", v);
    return v.get<std::string>();
}

double as_double(const json& v, const std::string& key) {
    if (!v.is_number()) type_error(key, "number", v);
    return v.get<double>();
}

int as_int(const json& v, const std::string& key) {
    if (!v.is_number_integer()) type_error(key, "integer", v);
    return v.get<int>();
}

std::uint64_t as_u64(const json& v, const std::string& key) {
    if (!v.is_number_integer()) type_error(key, "integer", v);
    return v.get<std::uint64_t>();
}

// booleans appear both bare and as "true"/"false" strings; accept both
bool as_bool(const json& v, const std::string& key) {
    if (v.is_boolean()) return v.get<bool>();
    if (v.is_string()) {
        const auto s = v.get<std::string>();
        if (s == "true") return true;
        if (s == "false") return false;
    }
    type_error(key, "boolean", v);
}

void keep_unknown(JobConfig& cfg, std::map<std::string, std::string>& bucket,
                  const std::string& section, const std::string& key, const json& v,
                  bool warn = true) {
    bucket[key] = v.dump();
    if (warn)
        cfg.warnings.push_back("unknown key " + section + "." + key +
                               " (preserved verbatim)");
}

const std::set<std::string> kInferencePassthrough = {
    "enable_chunked_prefill", "gpu_memory_utilization", "trust_remote_code",
    "enforce_eager"};

void parse_dataset(JobConfig& cfg, const json& block) {
    for (auto& [key, v] : block.items()) {
        const std::string full = "dataset." + key;
        if (key == "instruction_path") cfg.dataset.instruction_path = as_string(v, full);
        else if (key == "labeled_path") cfg.dataset.labeled_path = as_string(v, full);
        else if (key == "logits_path") cfg.dataset.logits_path = as_string(v, full);
        else if (key == "template") cfg.dataset.template_path = as_string(v, full);
        else if (key == "preference_path") cfg.dataset.preference_path = as_string(v, full);
        else if (key == "raw_text_path") cfg.dataset.raw_text_path = as_string(v, full);
        else if (key == "cot_path") cfg.dataset.cot_path = as_string(v, full);
        else if (key == "output_path") cfg.dataset.output_path = as_string(v, full);
        else if (key == "seed") cfg.dataset.seed = as_u64(v, full);
        else keep_unknown(cfg, cfg.dataset.extra, "dataset", key, v);
    }
}

void parse_inference(JobConfig& cfg, const json& block) {
    for (auto& [key, v] : block.items()) {
        const std::string full = "inference." + key;
        if (key == "base_url") cfg.inference.base_url = as_string(v, full);
        else if (key == "api_key") cfg.inference.api_key = as_string(v, full);
        else if (key == "stream") cfg.inference.stream = as_bool(v, full);
        else if (key == "system_prompt") cfg.inference.system_prompt = as_string(v, full);
        else if (key == "max_new_tokens") cfg.inference.max_new_tokens = as_int(v, full);
        else if (key == "temperature") cfg.inference.temperature = as_double(v, full);
        else if (key == "seed") cfg.inference.seed = as_u64(v, full);
        else if (key == "max_model_len") cfg.inference.max_model_len = as_int(v, full);
        else if (key == "max_concurrency") cfg.inference.max_concurrency = as_int(v, full);
        else if (key == "retry_base_ms") cfg.inference.retry_base_ms = as_int(v, full);
        else
            keep_unknown(cfg, cfg.inference.passthrough, "inference", key, v,
                         !kInferencePassthrough.count(key));
    }
}

void parse_distillation(JobConfig& cfg, const json& block) {
    cfg.has_distillation = true;
    for (auto& [key, v] : block.items()) {
        const std::string full = "distillation." + key;
        if (key == "kd_ratio") cfg.distillation.kd_ratio = as_double(v, full);
        else if (key == "distillation_type")
            cfg.distillation.distillation_type = as_string(v, full);
        else if (key == "max_seq_length")
            cfg.distillation.max_seq_length = as_int(v, full);
        else if (key == "k") cfg.distillation.k = as_int(v, full);
        else cfg.warnings.push_back("unknown key " + full + " (ignored)");
    }
}

void parse_models(JobConfig& cfg, const json& block) {
    for (auto& [key, v] : block.items()) {
        const std::string full = "models." + key;
        if (key == "teacher") cfg.models.teacher = as_string(v, full);
        else if (key == "student") cfg.models.student = as_string(v, full);
        else if (key == "reward") cfg.models.reward = as_string(v, full);
        else keep_unknown(cfg, cfg.models.extra, "models", key, v);
    }
}

void parse_training(JobConfig& cfg, const json& block) {
    for (auto& [key, v] : block.items()) {
        const std::string full = "training." + key;
        if (key == "output_dir") cfg.training.output_dir = as_string(v, full);
        else if (key == "num_train_epochs") cfg.training.num_train_epochs = as_int(v, full);
        else if (key == "per_device_train_batch_size")
            cfg.training.per_device_train_batch_size = as_int(v, full);
        else if (key == "gradient_accumulation_steps")
            cfg.training.gradient_accumulation_steps = as_int(v, full);
        else if (key == "save_steps") cfg.training.save_steps = as_int(v, full);
        else if (key == "logging_steps") cfg.training.logging_steps = as_int(v, full);
        else if (key == "learning_rate") cfg.training.learning_rate = as_double(v, full);
        else if (key == "weight_decay") cfg.training.weight_decay = as_double(v, full);
        else if (key == "warmup_ratio") cfg.training.warmup_ratio = as_double(v, full);
        else if (key == "lr_scheduler_type")
            cfg.training.lr_scheduler_type = as_string(v, full);
        else cfg.warnings.push_back("unknown key " + full + " (ignored)");
    }
}

void parse_grpo(JobConfig& cfg, const json& block) {
    cfg.has_grpo = true;
    for (auto& [key, v] : block.items()) {
        const std::string full = "grpo." + key;
        if (key == "group_size") cfg.grpo.group_size = as_int(v, full);
        else if (key == "clip_eps") cfg.grpo.clip_eps = as_double(v, full);
        else if (key == "kl_coeff") cfg.grpo.kl_coeff = as_double(v, full);
        else if (key == "temperature") cfg.grpo.temperature = as_double(v, full);
        else if (key == "max_new_tokens") cfg.grpo.max_new_tokens = as_int(v, full);
        else if (key == "iterations") cfg.grpo.iterations = as_int(v, full);
        else cfg.warnings.push_back("unknown key " + full + " (ignored)");
    }
}

void parse_synthesis(JobConfig& cfg, const json& block) {
    cfg.has_synthesis = true;
    for (auto& [key, v] : block.items()) {
        const std::string full = "synthesis." + key;
        if (key == "prompt_template") cfg.synthesis_template_path = as_string(v, full);
        else if (key == "fan_out") cfg.synthesis.fan_out = as_int(v, full);
        else if (key == "dedup_threshold")
            cfg.synthesis.dedup_threshold = as_double(v, full);
        else if (key == "system_prompt") cfg.synthesis.system_prompt = as_string(v, full);
        else if (key == "cot_begin") cfg.synthesis.cot_begin = as_string(v, full);
        else if (key == "cot_end") cfg.synthesis.cot_end = as_string(v, full);
        else if (key == "max_chunk_tokens")
            cfg.synthesis.max_chunk_tokens = as_int(v, full);
        else if (key == "max_concurrency")
            cfg.synthesis.max_concurrency = as_int(v, full);
        else cfg.warnings.push_back("unknown key " + full + " (ignored)");
    }
}

void require(bool ok, const std::string& what) {
    if (!ok) throw ConfigError("missing required key " + what);
}

}  // namespace

JobConfig parse_config_text(const std::string& text, const std::string& origin) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error&) {
        try {
            doc = json::parse(repair_config_text(text));
        } catch (const json::parse_error& e) {
            throw ConfigError(origin + ": malformed JSON: " + e.what());
        }
    }
    if (!doc.is_object()) throw ConfigError(origin + ": top level must be a JSON object");

    JobConfig cfg;
    if (!doc.contains("job_type"))
        throw ConfigError(origin + ": missing required key job_type");
    cfg.job_type = as_string(doc["job_type"], "job_type");
    if (std::find(kKnownJobTypes.begin(), kKnownJobTypes.end(), cfg.job_type) ==
        kKnownJobTypes.end())
        throw ConfigError(origin + ": unknown job_type '" + cfg.job_type + "'");

    for (auto& [section, raw] : doc.items()) {
        if (section == "job_type") continue;
        static const std::set<std::string> kSections = {
            "dataset", "inference", "distillation", "models",
            "training", "dpo",       "grpo",        "synthesis"};
        if (!kSections.count(section)) {
            keep_unknown(cfg, cfg.extra, "(top level)", section, raw);
            continue;
        }
        json block = resolve_defaults(section, raw);
        if (section == "dataset") parse_dataset(cfg, block);
        else if (section == "inference") parse_inference(cfg, block);
        else if (section == "distillation") parse_distillation(cfg, block);
        else if (section == "models") parse_models(cfg, block);
        else if (section == "training") parse_training(cfg, block);
        else if (section == "dpo") {
            cfg.has_dpo = true;
            for (auto& [key, v] : block.items()) {
                if (key == "beta") cfg.dpo_beta = as_double(v, "dpo.beta");
                else cfg.warnings.push_back("unknown key dpo." + key + " (ignored)");
            }
        } else if (section == "grpo") parse_grpo(cfg, block);
        else if (section == "synthesis") parse_synthesis(cfg, block);
    }

    // inference mode follows the job and the presence of an endpoint
    cfg.inference.mode =
        (cfg.job_type == "black_box_kd_api" || !cfg.inference.base_url.empty()) ? "api"
                                                                                : "local";
    cfg.training.seed = cfg.dataset.seed;
    cfg.synthesis.op = cfg.job_type.rfind("synth_", 0) == 0 ? cfg.job_type.substr(6)
                                                            : cfg.job_type;
    if (cfg.synthesis.op == "pairs") cfg.synthesis.op = "pairs_from_text";
    return cfg;
}

JobConfig parse_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str(), path);
}

void JobConfig::validate() const {
    if (std::find(kKnownJobTypes.begin(), kKnownJobTypes.end(), job_type) ==
        kKnownJobTypes.end())
        throw ConfigError("unknown job_type '" + job_type + "'");
    const bool trains = job_type == "black_box_kd_api" ||
                        job_type == "black_box_kd_local" ||
                        job_type == "white_box_kd_local" || job_type == "dpo" ||
                        job_type == "reward_model" || job_type == "grpo";
    const bool synth = has_synthesis || job_type.rfind("synth_", 0) == 0 ||
                       job_type.rfind("cot_", 0) == 0;

    if (trains) {
        require(!models.student.empty(), "models.student");
        training.validate();
    }
    if (job_type == "black_box_kd_api") {
        require(!inference.base_url.empty(), "inference.base_url");
        require(!inference.api_key.empty(), "inference.api_key");
        require(!dataset.instruction_path.empty(), "dataset.instruction_path");
        require(!dataset.labeled_path.empty(), "dataset.labeled_path");
    } else if (job_type == "black_box_kd_local") {
        require(!models.teacher.empty(), "models.teacher");
        require(!dataset.instruction_path.empty(), "dataset.instruction_path");
        require(!dataset.labeled_path.empty(), "dataset.labeled_path");
    } else if (job_type == "white_box_kd_local") {
        require(!models.teacher.empty(), "models.teacher");
        require(!dataset.logits_path.empty(), "dataset.logits_path");
        if (!has_distillation)
            throw ConfigError("missing required section distillation");
        distillation.validate();
    } else if (job_type == "dpo" || job_type == "reward_model") {
        require(!dataset.preference_path.empty(), "dataset.preference_path");
    } else if (job_type == "grpo") {
        require(!dataset.instruction_path.empty(), "dataset.instruction_path");
        require(!models.reward.empty(), "models.reward");
    } else if (synth) {
        require(!synthesis_template_path.empty(), "synthesis.prompt_template");
        require(!dataset.output_path.empty(), "dataset.output_path");
        if (job_type == "synth_expand" || job_type == "synth_refine")
            require(!dataset.instruction_path.empty(), "dataset.instruction_path");
        else if (job_type == "synth_pairs")
            require(!dataset.raw_text_path.empty(), "dataset.raw_text_path");
        else if (job_type == "cot_generate")
            require(!dataset.labeled_path.empty(), "dataset.labeled_path");
        else
            require(!dataset.cot_path.empty(), "dataset.cot_path");
        if (inference.mode == "api") {
            require(!inference.base_url.empty(), "inference.base_url");
            require(!inference.api_key.empty(), "inference.api_key");
        } else {
            require(!models.teacher.empty(), "models.teacher");
        }
    }
}

std::string JobConfig::serialize() const {
    json j;
    j["job_type"] = job_type;

    json d;
    if (!dataset.instruction_path.empty()) d["instruction_path"] = dataset.instruction_path;
    if (!dataset.labeled_path.empty()) d["labeled_path"] = dataset.labeled_path;
    if (!dataset.logits_path.empty()) d["logits_path"] = dataset.logits_path;
    if (!dataset.preference_path.empty()) d["preference_path"] = dataset.preference_path;
    if (!dataset.raw_text_path.empty()) d["raw_text_path"] = dataset.raw_text_path;
    if (!dataset.cot_path.empty()) d["cot_path"] = dataset.cot_path;
    if (!dataset.output_path.empty()) d["output_path"] = dataset.output_path;
    d["template"] = dataset.template_path;
    d["seed"] = dataset.seed;
    for (const auto& [k, v] : dataset.extra) d[k] = json::parse(v);
    j["dataset"] = d;

    json inf;
    if (!inference.base_url.empty()) inf["base_url"] = inference.base_url;
    if (!inference.api_key.empty()) inf["api_key"] = inference.api_key;
    inf["stream"] = inference.stream;
    inf["system_prompt"] = inference.system_prompt;
    inf["max_new_tokens"] = inference.max_new_tokens;
    inf["temperature"] = inference.temperature;
    inf["seed"] = inference.seed;
    inf["max_model_len"] = inference.max_model_len;
    inf["max_concurrency"] = inference.max_concurrency;
    inf["retry_base_ms"] = inference.retry_base_ms;
    for (const auto& [k, v] : inference.passthrough) inf[k] = json::parse(v);
    j["inference"] = inf;

    if (has_distillation)
        j["distillation"] = {{"kd_ratio", distillation.kd_ratio},
                             {"distillation_type", distillation.distillation_type},
                             {"max_seq_length", distillation.max_seq_length},
                             {"k", distillation.k}};

    json m;
    if (!models.teacher.empty()) m["teacher"] = models.teacher;
    if (!models.student.empty()) m["student"] = models.student;
    if (!models.reward.empty()) m["reward"] = models.reward;
    for (const auto& [k, v] : models.extra) m[k] = json::parse(v);
    j["models"] = m;

    j["training"] = {{"output_dir", training.output_dir},
                     {"num_train_epochs", training.num_train_epochs},
                     {"per_device_train_batch_size", training.per_device_train_batch_size},
                     {"gradient_accumulation_steps", training.gradient_accumulation_steps},
                     {"save_steps", training.save_steps},
                     {"logging_steps", training.logging_steps},
                     {"learning_rate", training.learning_rate},
                     {"weight_decay", training.weight_decay},
                     {"warmup_ratio", training.warmup_ratio},
                     {"lr_scheduler_type", training.lr_scheduler_type}};

    if (has_dpo) j["dpo"] = {{"beta", dpo_beta}};
    if (has_grpo)
        j["grpo"] = {{"group_size", grpo.group_size},     {"clip_eps", grpo.clip_eps},
                     {"kl_coeff", grpo.kl_coeff},         {"temperature", grpo.temperature},
                     {"max_new_tokens", grpo.max_new_tokens},
                     {"iterations", grpo.iterations}};
    if (has_synthesis)
        j["synthesis"] = {{"prompt_template", synthesis_template_path},
                          {"fan_out", synthesis.fan_out},
                          {"dedup_threshold", synthesis.dedup_threshold},
                          {"system_prompt", synthesis.system_prompt},
                          {"cot_begin", synthesis.cot_begin},
                          {"cot_end", synthesis.cot_end},
                          {"max_chunk_tokens", synthesis.max_chunk_tokens},
                          {"max_concurrency", synthesis.max_concurrency}};
    for (const auto& [k, v] : extra) j[k] = json::parse(v);
    return j.dump(2);
}

}  // namespace easydistill
