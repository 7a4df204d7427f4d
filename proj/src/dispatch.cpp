#include "easydistill/dispatch.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>

#include <json.hpp>

#include "easydistill/synthesis.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace easydistill {

namespace {

std::string read_file(const std::string& path, const std::string& what) {
    std::ifstream in(path);
    if (!in) throw DispatchError("cannot read " + what + " file " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

// api_key is deliberately excluded: rotating credentials must not invalidate
// caches, and secrets stay out of stamp files.
std::string inference_snapshot(const InferenceConfig& c) {
    json j = {{"mode", c.mode},
              {"base_url", c.base_url},
              {"stream", c.stream},
              {"system_prompt", c.system_prompt},
              {"max_new_tokens", c.max_new_tokens},
              {"temperature", c.temperature},
              {"seed", c.seed},
              {"max_model_len", c.max_model_len}};
    return j.dump();
}

std::string training_snapshot(const TrainingConfig& c) {
    json j = {{"output_dir", c.output_dir},
              {"num_train_epochs", c.num_train_epochs},
              {"per_device_train_batch_size", c.per_device_train_batch_size},
              {"gradient_accumulation_steps", c.gradient_accumulation_steps},
              {"save_steps", c.save_steps},
              {"logging_steps", c.logging_steps},
              {"learning_rate", c.learning_rate},
              {"weight_decay", c.weight_decay},
              {"warmup_ratio", c.warmup_ratio},
              {"lr_scheduler_type", c.lr_scheduler_type},
              {"seed", c.seed}};
    return j.dump();
}

class StageCache {
public:
    explicit StageCache(const std::string& output_dir)
        : dir_(fs::path(output_dir) / ".stages") {}

    bool fresh(const std::string& stage, const std::string& key,
               const std::vector<std::string>& outputs) const {
        for (const auto& o : outputs)
            if (!fs::exists(o)) return false;
        const fs::path stamp = dir_ / (stage + ".json");
        if (!fs::exists(stamp)) return false;
        try {
            json j = json::parse(read_file(stamp.string(), "stage stamp"));
            return j.value("key", "") == key;
        } catch (const std::exception&) {
            return false;
        }
    }

    void commit(const std::string& stage, const std::string& key) const {
        fs::create_directories(dir_);
        std::ofstream out(dir_ / (stage + ".json"));
        out << json{{"key", key}}.dump() << "\n";
    }

private:
    fs::path dir_;
};

int effective_k(const JobConfig& cfg, int vocab_size) {
    const int k = cfg.has_distillation ? cfg.distillation.k : 0;
    return k == 0 ? vocab_size : k;
}

int sft_max_seq_length(const JobConfig& cfg) {
    return cfg.has_distillation ? cfg.distillation.max_seq_length : 512;
}

void run_annotate(const JobConfig& cfg, const StageCache& cache, RunReport& report,
                  LogFn& log) {
    const std::string key = content_hash(
        read_file(cfg.dataset.instruction_path, "instruction") +
        inference_snapshot(cfg.inference) + cfg.models.teacher);
    if (cache.fresh("annotate", key, {cfg.dataset.labeled_path})) {
        report.stages.push_back({"annotate", true, "skipped (cached)"});
        log("stage annotate: skipped (cached)");
        return;
    }
    auto instructions = load_instructions(cfg.dataset.instruction_path);
    std::vector<LabeledRecord> labeled;
    if (cfg.inference.mode == "api") {
        auto results = annotate_api(instructions, cfg.inference, log);
        std::vector<std::string> failures;
        for (std::size_t i = 0; i < results.size(); ++i) {
            if (results[i].ok)
                labeled.push_back(results[i].record);
            else
                failures.push_back("sample " + std::to_string(i) + ": " +
                                   results[i].error);
        }
        if (!failures.empty()) {
            const std::string partial = cfg.dataset.labeled_path + ".partial";
            save_labeled(partial, labeled);
            throw DispatchError("stage annotate failed: " +
                                std::to_string(failures.size()) + " of " +
                                std::to_string(results.size()) +
                                " teacher calls failed (first: " + failures.front() +
                                "); partial output at " + partial);
        }
    } else {
        auto teacher = TinyLM::load(cfg.models.teacher);
        const std::string tmpl = load_template_file(cfg.dataset.template_path);
        labeled = annotate_local(instructions, teacher, cfg.inference, tmpl);
    }
    save_labeled(cfg.dataset.labeled_path, labeled);
    cache.commit("annotate", key);
    report.stages.push_back(
        {"annotate", false, std::to_string(labeled.size()) + " records"});
}

void run_export_logits(const JobConfig& cfg, const StageCache& cache, RunReport& report,
                       LogFn& log) {
    const std::string tmpl_text = load_template_file(cfg.dataset.template_path);
    const std::string key = content_hash(
        read_file(cfg.dataset.labeled_path, "labeled") + cfg.models.teacher + tmpl_text +
        std::to_string(cfg.has_distillation ? cfg.distillation.k : 0) +
        std::to_string(sft_max_seq_length(cfg)));
    if (cache.fresh("export_logits", key, {cfg.dataset.logits_path})) {
        report.stages.push_back({"export_logits", true, "skipped (cached)"});
        log("stage export_logits: skipped (cached)");
        return;
    }
    auto teacher = TinyLM::load(cfg.models.teacher);
    auto labeled = load_labeled(cfg.dataset.labeled_path);
    const int n = export_topk_logits(teacher, labeled,
                                     effective_k(cfg, teacher.config.vocab_size),
                                     sft_max_seq_length(cfg), tmpl_text,
                                     cfg.inference.system_prompt,
                                     cfg.dataset.logits_path);
    cache.commit("export_logits", key);
    report.stages.push_back({"export_logits", false, std::to_string(n) + " records"});
}

void run_train(const JobConfig& cfg, const StageCache& cache, RunReport& report,
               LogFn& log) {
    const std::string tmpl_text = load_template_file(cfg.dataset.template_path);
    const std::string data_path = (cfg.job_type == "dpo" ||
                                   cfg.job_type == "reward_model")
                                      ? cfg.dataset.preference_path
                                      : (cfg.job_type == "grpo"
                                             ? cfg.dataset.instruction_path
                                             : cfg.dataset.labeled_path);
    std::string key = content_hash(
        read_file(data_path, "training data") + training_snapshot(cfg.training) +
        tmpl_text + cfg.models.student + cfg.job_type +
        (cfg.has_distillation
             ? json{{"kd_ratio", cfg.distillation.kd_ratio},
                    {"distillation_type", cfg.distillation.distillation_type},
                    {"k", cfg.distillation.k},
                    {"max_seq_length", cfg.distillation.max_seq_length}}
                   .dump()
             : std::string()));
    if (cfg.job_type == "white_box_kd_local")
        key = content_hash(key + read_file(cfg.dataset.logits_path, "logits"));
    const std::string final_ckpt =
        (fs::path(cfg.training.output_dir) / "checkpoints" / "final").string();
    if (cache.fresh("train", key, {final_ckpt})) {
        report.stages.push_back({"train", true, "skipped (cached)"});
        log("stage train: skipped (cached)");
        return;
    }

    auto student = TinyLM::load(cfg.models.student);
    const std::string& sys = cfg.inference.system_prompt;
    try {
        if (cfg.job_type == "black_box_kd_api" || cfg.job_type == "black_box_kd_local") {
            auto data = load_labeled(cfg.dataset.labeled_path);
            train_sft(student, data, cfg.training, tmpl_text, sys, sft_max_seq_length(cfg));
        } else if (cfg.job_type == "white_box_kd_local") {
            auto data = load_labeled(cfg.dataset.labeled_path);
            train_white_box(student, data, cfg.dataset.logits_path, cfg.distillation,
                            cfg.training, tmpl_text, sys);
        } else if (cfg.job_type == "dpo") {
            auto data = load_preferences(cfg.dataset.preference_path);
            train_dpo(student, student, data, cfg.dpo_beta, cfg.training, tmpl_text, sys,
                      sft_max_seq_length(cfg));
        } else if (cfg.job_type == "reward_model") {
            auto data = load_preferences(cfg.dataset.preference_path);
            train_reward_model(student, data, cfg.training, tmpl_text, sys,
                               sft_max_seq_length(cfg));
        } else if (cfg.job_type == "grpo") {
            auto instructions = load_instructions(cfg.dataset.instruction_path);
            std::vector<std::string> prompts;
            for (const auto& i : instructions) prompts.push_back(i.instruction);
            auto rm = std::make_shared<RewardModel>(RewardModel::load(cfg.models.reward));
            const int limit = std::min(sft_max_seq_length(cfg),
                                       rm->backbone.config.max_seq_len);
            RewardFn reward = [rm, tmpl_text, sys, limit](const std::string& prompt,
                                                          const std::string& completion) {
                auto rendered = apply_chat_template(tmpl_text, sys, prompt, completion);
                auto ts = build_training_sequence(rendered, limit);
                return rm->score_value(ts.inputs);
            };
            train_grpo(student, prompts, reward, cfg.grpo, cfg.training, tmpl_text, sys);
        }
    } catch (const std::exception& e) {
        throw DispatchError("stage train failed: " + std::string(e.what()) +
                            "; partial output under " + cfg.training.output_dir);
    }
    cache.commit("train", key);
    report.stages.push_back({"train", false, "final checkpoint at " + final_ckpt});
}

void run_synthesis(JobConfig& cfg, const StageCache& cache, RunReport& report,
                   LogFn& log) {
    cfg.synthesis.prompt_template =
        read_file(cfg.synthesis_template_path, "prompt template");
    cfg.synthesis.max_concurrency = cfg.inference.max_concurrency;

    const std::string op = cfg.synthesis.op;
    const std::string input_path =
        (op == "expand" || op == "refine") ? cfg.dataset.instruction_path
        : op == "pairs_from_text"          ? cfg.dataset.raw_text_path
        : op == "cot_generate"             ? cfg.dataset.labeled_path
                                           : cfg.dataset.cot_path;
    const std::string teacher_hash =
        content_hash(inference_snapshot(cfg.inference) + cfg.models.teacher);
    const std::string key = content_hash(
        read_file(input_path, "synthesis input") + cfg.synthesis.prompt_template +
        inference_snapshot(cfg.inference) + cfg.models.teacher + op +
        std::to_string(cfg.synthesis.fan_out) +
        std::to_string(cfg.synthesis.dedup_threshold));
    if (cache.fresh("synthesize", key, {cfg.dataset.output_path})) {
        report.stages.push_back({"synthesize", true, "skipped (cached)"});
        log("stage synthesize: skipped (cached)");
        return;
    }

    std::shared_ptr<TinyLM> teacher;
    std::string chat_tmpl;
    if (cfg.inference.mode == "local") {
        teacher = std::make_shared<TinyLM>(TinyLM::load(cfg.models.teacher));
        chat_tmpl = load_template_file(cfg.dataset.template_path);
    }
    InferenceConfig inf = cfg.inference;
    ClientFactory factory = [teacher, chat_tmpl, inf, log]() -> std::unique_ptr<ChatClient> {
        if (teacher) return std::make_unique<LocalChatClient>(teacher.get(), chat_tmpl, inf);
        return std::make_unique<ApiChatClient>(inf, log);
    };

    std::string detail;
    try {
        if (op == "expand") {
            auto res = expand_instructions(load_instructions(input_path), cfg.synthesis,
                                           factory, teacher_hash);
            std::vector<InstructionRecord> out;
            for (const auto& r : res.records) out.push_back(r.record);
            save_instructions(cfg.dataset.output_path, out);
            for (std::size_t i = 0; i < res.seed_errors.size(); ++i)
                if (!res.seed_errors[i].empty())
                    log("synthesize: seed " + std::to_string(i) + " failed: " +
                        res.seed_errors[i]);
            detail = std::to_string(out.size()) + " instructions (" +
                     std::to_string(res.candidates) + " candidates)";
        } else if (op == "refine") {
            auto res = refine_instructions(load_instructions(input_path), cfg.synthesis,
                                           factory, teacher_hash);
            std::vector<InstructionRecord> out;
            for (const auto& r : res.records) out.push_back(r.record);
            save_instructions(cfg.dataset.output_path, out);
            detail = std::to_string(out.size()) + " instructions";
        } else if (op == "pairs_from_text") {
            json docs = json::parse(read_file(input_path, "raw text"));
            if (!docs.is_array())
                throw DispatchError("raw text file must be a JSON array of strings");
            std::vector<std::string> documents;
            for (const auto& d : docs) documents.push_back(d.get<std::string>());
            auto res = pairs_from_text(documents, cfg.synthesis, factory, teacher_hash);
            save_labeled(cfg.dataset.output_path, res.records);
            detail = std::to_string(res.records.size()) + " pairs, " +
                     std::to_string(res.dropped) + " dropped";
        } else if (op == "cot_generate") {
            auto res = cot_generate(load_labeled(input_path), cfg.synthesis, factory,
                                    teacher_hash);
            save_cots(cfg.dataset.output_path, res.records);
            detail = std::to_string(res.records.size()) + " records, " +
                     std::to_string(res.dropped) + " dropped";
        } else {
            auto cots = load_cots(input_path);
            auto res = op == "cot_simplify"
                           ? cot_simplify(cots, cfg.synthesis, factory, teacher_hash)
                           : cot_extend(cots, cfg.synthesis, factory, teacher_hash);
            save_cots(cfg.dataset.output_path, res.records);
            detail = std::to_string(res.records.size()) + " records, " +
                     std::to_string(res.dropped) + " dropped";
        }
    } catch (const AuthError&) {
        throw;
    } catch (const DispatchError&) {
        throw;
    } catch (const std::exception& e) {
        throw DispatchError("stage synthesize failed: " + std::string(e.what()));
    }
    cache.commit("synthesize", key);
    report.stages.push_back({"synthesize", false, detail});
}

}  // namespace

std::vector<std::string> plan_stages(const JobConfig& cfg) {
    if (cfg.job_type == "black_box_kd_api" || cfg.job_type == "black_box_kd_local")
        return {"annotate", "train"};
    if (cfg.job_type == "white_box_kd_local") {
        std::vector<std::string> stages;
        if (!fs::exists(cfg.dataset.labeled_path)) stages.push_back("annotate");
        stages.push_back("export_logits");
        stages.push_back("train");
        return stages;
    }
    if (cfg.job_type == "dpo" || cfg.job_type == "reward_model" ||
        cfg.job_type == "grpo")
        return {"train"};
    return {"synthesize"};
}

RunReport dispatch(JobConfig cfg, LogFn log) {
    if (const char* key = std::getenv("ED_API_KEY"); key && *key)
        cfg.inference.api_key = key;
    cfg.validate();

    RunReport report;
    StageCache cache(cfg.training.output_dir);
    for (const auto& stage : plan_stages(cfg)) {
        if (stage == "annotate")
            run_annotate(cfg, cache, report, log);
        else if (stage == "export_logits")
            run_export_logits(cfg, cache, report, log);
        else if (stage == "train")
            run_train(cfg, cache, report, log);
        else
            run_synthesis(cfg, cache, report, log);
    }
    return report;
}

}  // namespace easydistill
