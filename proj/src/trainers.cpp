#include "easydistill/trainers.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace easydistill {

void TrainingConfig::validate() const {
    if (output_dir.empty()) throw TrainerError("output_dir must be set");
    if (num_train_epochs < 1 || per_device_train_batch_size < 1 ||
        gradient_accumulation_steps < 1 || save_steps < 1 || logging_steps < 1)
        throw TrainerError("training counts must be >= 1");
    if (learning_rate <= 0.0) throw TrainerError("learning_rate must be > 0");
    if (weight_decay < 0.0) throw TrainerError("weight_decay must be >= 0");
    if (warmup_ratio < 0.0 || warmup_ratio > 1.0)
        throw TrainerError("warmup_ratio must lie in [0,1]");
    if (lr_scheduler_type != "cosine" && lr_scheduler_type != "constant")
        throw TrainerError("lr_scheduler_type must be 'cosine' or 'constant'");
}

// ------------------------------------------------------------------- AdamW

AdamW::AdamW(double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamW::step(std::map<std::string, TensorPtr>& params, double lr,
                 double weight_decay) {
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    for (auto& [name, p] : params) {
        auto& mom = state_[name];
        if (mom.m.empty()) {
            mom.m.assign(p->size(), 0.0);
            mom.v.assign(p->size(), 0.0);
        }
        if (mom.m.size() != p->size())
            throw TrainerError("optimizer state shape mismatch for " + name);
        const bool has_grad = !p->grad.empty();
        for (std::size_t i = 0; i < p->size(); ++i) {
            const double g = has_grad ? p->grad[i] : 0.0;
            mom.m[i] = beta1_ * mom.m[i] + (1.0 - beta1_) * g;
            mom.v[i] = beta2_ * mom.v[i] + (1.0 - beta2_) * g * g;
            const double mhat = mom.m[i] / bc1;
            const double vhat = mom.v[i] / bc2;
            p->data[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
            p->data[i] -= lr * weight_decay * p->data[i];
        }
        p->zero_grad();
    }
}

void AdamW::save(const std::string& dir) const {
    fs::create_directories(dir);
    std::ofstream out(fs::path(dir) / "optimizer.bin", std::ios::binary);
    if (!out) throw TrainerError("cannot write optimizer state to " + dir);
    out.write(reinterpret_cast<const char*>(&step_), sizeof(step_));
    for (const auto& [name, mom] : state_) {
        std::uint64_t name_len = name.size(), n = mom.m.size();
        out.write(reinterpret_cast<const char*>(&name_len), sizeof(name_len));
        out.write(name.data(), static_cast<std::streamsize>(name_len));
        out.write(reinterpret_cast<const char*>(&n), sizeof(n));
        out.write(reinterpret_cast<const char*>(mom.m.data()),
                  static_cast<std::streamsize>(n * sizeof(double)));
        out.write(reinterpret_cast<const char*>(mom.v.data()),
                  static_cast<std::streamsize>(n * sizeof(double)));
    }
}

void AdamW::load(const std::string& dir, const std::map<std::string, TensorPtr>& params) {
    std::ifstream in(fs::path(dir) / "optimizer.bin", std::ios::binary);
    if (!in) throw TrainerError("optimizer state not found in " + dir);
    in.read(reinterpret_cast<char*>(&step_), sizeof(step_));
    state_.clear();
    while (true) {
        std::uint64_t name_len = 0;
        in.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
        if (!in) break;
        std::string name(name_len, '\0');
        in.read(name.data(), static_cast<std::streamsize>(name_len));
        std::uint64_t n = 0;
        in.read(reinterpret_cast<char*>(&n), sizeof(n));
        Moments mom;
        mom.m.resize(n);
        mom.v.resize(n);
        in.read(reinterpret_cast<char*>(mom.m.data()),
                static_cast<std::streamsize>(n * sizeof(double)));
        in.read(reinterpret_cast<char*>(mom.v.data()),
                static_cast<std::streamsize>(n * sizeof(double)));
        if (!in) throw TrainerError("truncated optimizer state in " + dir);
        auto it = params.find(name);
        if (it == params.end() || it->second->size() != n)
            throw TrainerError("optimizer state does not match parameters: " + name);
        state_[name] = std::move(mom);
    }
}

// ---------------------------------------------------------------- schedule

double lr_at(int step, int total_steps, const TrainingConfig& cfg) {
    if (total_steps < 1) throw TrainerError("lr_at: total_steps must be >= 1");
    if (step < 0 || step > total_steps)
        throw TrainerError("lr_at: step " + std::to_string(step) + " outside [0," +
                           std::to_string(total_steps) + "]");
    const int warmup = static_cast<int>(
        std::ceil(cfg.warmup_ratio * static_cast<double>(total_steps)));
    if (step <= warmup && warmup > 0)
        return cfg.learning_rate * static_cast<double>(step) / warmup;
    if (cfg.lr_scheduler_type == "constant") return cfg.learning_rate;
    if (total_steps == warmup) return cfg.learning_rate;
    const double progress =
        static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
    return cfg.learning_rate * 0.5 * (1.0 + std::cos(M_PI * progress));
}

// ---------------------------------------------------------------- manifest

std::string content_hash(const std::string& bytes) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string file_content_hash(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw TrainerError("cannot hash missing file " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
    return content_hash(bytes);
}

void RunManifest::save(const std::string& path) const {
    json j;
    j["config"] = config_snapshot.empty() ? json::object() : json::parse(config_snapshot);
    j["dataset_hash"] = dataset_hash;
    j["seed"] = seed;
    json log_j = json::array();
    for (const auto& e : log) {
        json entry = {{"step", e.step}, {"lr", e.lr}};
        for (const auto& [k, v] : e.values) entry[k] = v;
        log_j.push_back(entry);
    }
    j["log"] = log_j;
    j["checkpoints"] = checkpoints;
    std::ofstream out(path);
    if (!out) throw TrainerError("cannot write manifest " + path);
    out << j.dump(2) << "\n";
}

// ------------------------------------------------------------ shared loop

namespace {

struct Example {
    TrainingSequence ts;
    std::vector<int> response_rows;
    const TopKLogitsRecord* topk = nullptr;
    int sample_index = 0;
};

std::vector<int> rows_of_response(const TrainingSequence& ts) {
    std::vector<int> rows;
    for (std::size_t i = 0; i < ts.mask.size(); ++i)
        if (ts.mask[i] == 1.0) rows.push_back(static_cast<int>(i));
    return rows;
}

// deterministic Fisher-Yates on our own uniform stream
void shuffle_indices(std::vector<std::size_t>& idx, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (std::size_t i = idx.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(
            sample_uniform(rng) * static_cast<double>(i));
        std::swap(idx[i - 1], idx[std::min(j, i - 1)]);
    }
}

struct CheckpointScan {
    int step = 0;
    fs::path dir;
};

std::optional<CheckpointScan> latest_resumable(const fs::path& ckpt_root, int total) {
    if (!fs::exists(ckpt_root)) return std::nullopt;
    std::optional<CheckpointScan> best;
    for (const auto& entry : fs::directory_iterator(ckpt_root)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("step-", 0) != 0) continue;
        if (!fs::exists(entry.path() / "optimizer.bin")) continue;
        const int step = std::atoi(name.c_str() + 5);
        if (step <= 0 || step >= total) continue;
        if (!best || step > best->step) best = CheckpointScan{step, entry.path()};
    }
    return best;
}

class MetricsWriter {
public:
    MetricsWriter(const fs::path& path, bool append)
        : out_(path, append ? std::ios::app : std::ios::trunc) {
        if (!out_) throw TrainerError("cannot write metrics file " + path.string());
    }
    void write(const MetricsEntry& e) {
        json j = {{"step", e.step}, {"lr", e.lr}};
        for (const auto& [k, v] : e.values) j[k] = v;
        out_ << j.dump() << "\n";
        out_.flush();
    }

private:
    std::ofstream out_;
};

TrainResult run_kd_loop(const TinyLM& student, std::vector<Example> examples,
                        const DistillSpec* spec, const TrainingConfig& cfg,
                        const std::string& dataset_hash) {
    cfg.validate();
    if (examples.empty()) throw TrainerError("training dataset is empty");

    const int group_size = cfg.per_device_train_batch_size * cfg.gradient_accumulation_steps;
    const int n = static_cast<int>(examples.size());
    const int steps_per_epoch = (n + group_size - 1) / group_size;
    const int total_steps = cfg.num_train_epochs * steps_per_epoch;

    TinyLM model = student.clone();
    model.set_requires_grad(true);
    AdamW opt;
    const fs::path out_dir(cfg.output_dir);
    const fs::path ckpt_root = out_dir / "checkpoints";
    fs::create_directories(ckpt_root);

    int start_step = 0;
    if (auto resume = latest_resumable(ckpt_root, total_steps)) {
        model = TinyLM::load(resume->dir.string());
        model.set_requires_grad(true);
        opt.load(resume->dir.string(), model.params);
        start_step = resume->step;
    }

    RunManifest manifest;
    manifest.dataset_hash = dataset_hash;
    manifest.seed = cfg.seed;
    {
        json snap = {{"num_train_epochs", cfg.num_train_epochs},
                     {"per_device_train_batch_size", cfg.per_device_train_batch_size},
                     {"gradient_accumulation_steps", cfg.gradient_accumulation_steps},
                     {"learning_rate", cfg.learning_rate},
                     {"weight_decay", cfg.weight_decay},
                     {"warmup_ratio", cfg.warmup_ratio},
                     {"lr_scheduler_type", cfg.lr_scheduler_type},
                     {"seed", cfg.seed},
                     {"total_steps", total_steps}};
        manifest.config_snapshot = snap.dump();
    }
    MetricsWriter metrics(out_dir / "metrics.jsonl", start_step > 0);

    std::vector<std::size_t> order(examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    int current_epoch = -1;

    for (int step = start_step; step < total_steps; ++step) {
        const int epoch = step / steps_per_epoch;
        if (epoch != current_epoch) {
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            shuffle_indices(order, cfg.seed + static_cast<std::uint64_t>(epoch) * 1000003);
            current_epoch = epoch;
        }
        const int pos = step % steps_per_epoch;
        const int begin = pos * group_size;
        const int end = std::min(n, begin + group_size);
        const double inv = 1.0 / static_cast<double>(end - begin);

        double loss_sum = 0.0, sft_sum = 0.0, kld_sum = 0.0;
        try {
            for (int i = begin; i < end; ++i) {
                const Example& ex = examples[order[static_cast<std::size_t>(i)]];
                Tape tape;
                auto logits = model.forward(tape, ex.ts.inputs);
                auto sft = sft_loss(tape, logits, ex.ts.targets, ex.ts.mask);
                TensorPtr loss = sft;
                if (spec) {
                    auto div = topk_kld(tape, *ex.topk, logits, ex.response_rows, *spec);
                    loss = combined_kd_loss(tape, sft, div, spec->kd_ratio);
                    kld_sum += div->item() * inv;
                }
                sft_sum += sft->item() * inv;
                loss_sum += loss->item() * inv;
                tape.backward(tape.scale(loss, inv));
            }
        } catch (const TensorError& e) {
            throw TrainerError("training aborted at optimizer step " +
                               std::to_string(step) + ": " + e.what());
        }
        if (!std::isfinite(loss_sum))
            throw TrainerError("non-finite loss at optimizer step " + std::to_string(step));

        const double lr = lr_at(step, total_steps, cfg);
        opt.step(model.params, lr, cfg.weight_decay);

        if ((step + 1) % cfg.logging_steps == 0) {
            MetricsEntry e;
            e.step = step + 1;
            e.lr = lr;
            e.values["loss"] = loss_sum;
            e.values["sft_loss"] = sft_sum;
            if (spec) e.values["kld_loss"] = kld_sum;
            metrics.write(e);
            manifest.log.push_back(std::move(e));
        }
        if ((step + 1) % cfg.save_steps == 0 && step + 1 < total_steps) {
            const fs::path dir = ckpt_root / ("step-" + std::to_string(step + 1));
            model.save(dir.string());
            opt.save(dir.string());
            manifest.checkpoints.push_back(
                fs::relative(dir, out_dir).string());
        }
    }

    const fs::path final_dir = ckpt_root / "final";
    model.save(final_dir.string());
    manifest.checkpoints.push_back(fs::relative(final_dir, out_dir).string());
    manifest.save((out_dir / "manifest.json").string());

    return TrainResult{std::move(model), std::move(manifest)};
}

std::vector<Example> build_examples(const std::vector<LabeledRecord>& data,
                                    const std::string& chat_template,
                                    const std::string& system_prompt,
                                    int max_seq_length, int model_max_seq) {
    std::vector<Example> out;
    const int limit = std::min(max_seq_length, model_max_seq);
    for (std::size_t i = 0; i < data.size(); ++i) {
        Example ex;
        ex.sample_index = static_cast<int>(i);
        auto rendered = apply_chat_template(chat_template, system_prompt,
                                            data[i].instruction, data[i].output);
        ex.ts = build_training_sequence(rendered, limit);
        ex.response_rows = rows_of_response(ex.ts);
        out.push_back(std::move(ex));
    }
    return out;
}

std::string hash_labeled(const std::vector<LabeledRecord>& data) {
    std::string blob;
    for (const auto& r : data) {
        blob += r.instruction;
        blob.push_back('\x1e');
        blob += r.output;
        blob.push_back('\x1f');
    }
    return content_hash(blob);
}

// sequence-summed response logprob; policy side stays on the tape
TensorPtr sequence_logprob(Tape& tape, const TinyLM& model, const TrainingSequence& ts) {
    auto logp = tape.log_softmax(model.forward(tape, ts.inputs));
    auto picked = tape.gather(logp, ts.targets);
    return tape.sum_masked(picked, Tensor::vector1d(ts.mask), false);
}

}  // namespace

TrainResult train_sft(const TinyLM& student, const std::vector<LabeledRecord>& data,
                      const TrainingConfig& cfg, const std::string& chat_template,
                      const std::string& system_prompt, int max_seq_length) {
    auto examples = build_examples(data, chat_template, system_prompt, max_seq_length,
                                   student.config.max_seq_len);
    return run_kd_loop(student, std::move(examples), nullptr, cfg, hash_labeled(data));
}

TrainResult train_white_box(const TinyLM& student, const std::vector<LabeledRecord>& data,
                            const std::string& logits_path, const DistillSpec& spec,
                            const TrainingConfig& cfg, const std::string& chat_template,
                            const std::string& system_prompt) {
    spec.validate();
    auto examples = build_examples(data, chat_template, system_prompt,
                                   spec.max_seq_length, student.config.max_seq_len);
    auto records = load_topk_records(logits_path);
    std::map<int, const TopKLogitsRecord*> by_index;
    for (const auto& r : records) by_index[r.sample_index] = &r;
    for (auto& ex : examples) {
        auto it = by_index.find(ex.sample_index);
        if (it == by_index.end())
            throw TrainerError("white-box training: logits file " + logits_path +
                               " has no record for sample_index " +
                               std::to_string(ex.sample_index));
        ex.topk = it->second;
        if (ex.topk->positions.size() != ex.response_rows.size())
            throw TrainerError("white-box training: sample_index " +
                               std::to_string(ex.sample_index) + " has " +
                               std::to_string(ex.topk->positions.size()) +
                               " logits positions but " +
                               std::to_string(ex.response_rows.size()) +
                               " response tokens");
    }
    return run_kd_loop(student, std::move(examples), &spec, cfg, hash_labeled(data));
}

// --------------------------------------------------------------------- DPO

DpoResult train_dpo(const TinyLM& student, const TinyLM& reference,
                    const std::vector<PreferenceRecord>& data, double beta,
                    const TrainingConfig& cfg, const std::string& chat_template,
                    const std::string& system_prompt, int max_seq_length) {
    cfg.validate();
    TinyLM ref = reference.clone();
    ref.set_requires_grad(false);
    const int limit = std::min(max_seq_length, student.config.max_seq_len);

    struct Pair {
        TrainingSequence chosen, rejected;
        double ref_chosen = 0.0, ref_rejected = 0.0;
    };
    std::vector<Pair> pairs;
    for (const auto& r : data) {
        if (r.chosen == r.rejected) {
            std::cerr << "dpo: skipping degenerate pair (chosen == rejected) for \""
                      << r.instruction << "\"\n";
            continue;
        }
        Pair p;
        p.chosen = build_training_sequence(
            apply_chat_template(chat_template, system_prompt, r.instruction, r.chosen),
            limit);
        p.rejected = build_training_sequence(
            apply_chat_template(chat_template, system_prompt, r.instruction, r.rejected),
            limit);
        Tape t;
        p.ref_chosen = sequence_logprob(t, ref, p.chosen)->item();
        p.ref_rejected = sequence_logprob(t, ref, p.rejected)->item();
        pairs.push_back(std::move(p));
    }
    if (pairs.empty()) throw TrainerError("dpo: no usable preference pairs");

    TinyLM model = student.clone();
    model.set_requires_grad(true);
    AdamW opt;
    const int group_size = cfg.per_device_train_batch_size * cfg.gradient_accumulation_steps;
    const int n = static_cast<int>(pairs.size());
    const int steps_per_epoch = (n + group_size - 1) / group_size;
    const int total_steps = cfg.num_train_epochs * steps_per_epoch;

    const fs::path out_dir(cfg.output_dir);
    fs::create_directories(out_dir);
    MetricsWriter metrics(out_dir / "metrics.jsonl", false);
    RunManifest manifest;
    manifest.seed = cfg.seed;
    manifest.config_snapshot = json{{"beta", beta}, {"total_steps", total_steps}}.dump();

    auto accuracy_over = [&](const TinyLM& m) {
        int correct = 0;
        for (const auto& p : pairs) {
            Tape t;
            const double pc = sequence_logprob(t, m, p.chosen)->item();
            const double pr = sequence_logprob(t, m, p.rejected)->item();
            if (pc > pr) ++correct;
        }
        return static_cast<double>(correct) / n;
    };

    DpoResult result;
    result.epoch_accuracy.push_back(accuracy_over(model));

    std::vector<std::size_t> order(pairs.size());
    int current_epoch = -1;
    for (int step = 0; step < total_steps; ++step) {
        const int epoch = step / steps_per_epoch;
        if (epoch != current_epoch) {
            if (current_epoch >= 0) result.epoch_accuracy.push_back(accuracy_over(model));
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            shuffle_indices(order, cfg.seed + static_cast<std::uint64_t>(epoch) * 999983);
            current_epoch = epoch;
        }
        const int begin = (step % steps_per_epoch) * group_size;
        const int end = std::min(n, begin + group_size);

        Tape tape;
        std::vector<TensorPtr> pc, pr;
        std::vector<double> rc, rr;
        int correct = 0;
        for (int i = begin; i < end; ++i) {
            const Pair& p = pairs[order[static_cast<std::size_t>(i)]];
            pc.push_back(sequence_logprob(tape, model, p.chosen));
            pr.push_back(sequence_logprob(tape, model, p.rejected));
            rc.push_back(p.ref_chosen);
            rr.push_back(p.ref_rejected);
            if (pc.back()->item() > pr.back()->item()) ++correct;
        }
        auto loss = dpo_loss(tape, pc, pr, rc, rr, beta);
        tape.backward(loss);
        const double lr = lr_at(step, total_steps, cfg);
        opt.step(model.params, lr, cfg.weight_decay);

        if ((step + 1) % cfg.logging_steps == 0) {
            MetricsEntry e;
            e.step = step + 1;
            e.lr = lr;
            e.values["loss"] = loss->item();
            e.values["preferred_accuracy"] =
                static_cast<double>(correct) / (end - begin);
            metrics.write(e);
            manifest.log.push_back(std::move(e));
        }
    }
    result.epoch_accuracy.push_back(accuracy_over(model));

    const fs::path final_dir = out_dir / "checkpoints" / "final";
    model.save(final_dir.string());
    manifest.checkpoints.push_back(fs::relative(final_dir, out_dir).string());
    manifest.save((out_dir / "manifest.json").string());
    result.model = std::move(model);
    result.manifest = std::move(manifest);
    return result;
}

// ------------------------------------------------------------ reward model

RewardModel RewardModel::init(const TinyLM& bb) {
    RewardModel rm;
    rm.backbone = bb.clone();
    rm.backbone.set_requires_grad(true);
    std::mt19937_64 rng(bb.config.seed ^ 0x5eedf00dull);
    std::vector<double> w(static_cast<std::size_t>(bb.config.d_model));
    for (auto& v : w) v = (sample_uniform(rng) - 0.5) * 0.04;
    rm.head_weight = Tensor::create({bb.config.d_model, 1}, std::move(w), true);
    rm.head_bias = Tensor::create({1}, {0.0}, true);
    return rm;
}

TensorPtr RewardModel::score(Tape& tape, const std::vector<int>& tokens) const {
    auto hidden = backbone.final_hidden(tape, tokens);
    const int t = hidden->dim(0);
    auto pool_w = Tensor::create(
        {1, t}, std::vector<double>(static_cast<std::size_t>(t), 1.0 / t));
    auto pooled = tape.matmul(pool_w, hidden);            // [1 x d]
    auto s = tape.matmul(pooled, head_weight);            // [1 x 1]
    return tape.add(s, head_bias);
}

double RewardModel::score_value(const std::vector<int>& tokens) const {
    Tape t;
    return score(t, tokens)->item();
}

void RewardModel::save(const std::string& dir) const {
    backbone.save((fs::path(dir) / "backbone").string());
    std::ofstream out(fs::path(dir) / "head.bin", std::ios::binary);
    if (!out) throw TrainerError("cannot write reward head to " + dir);
    const std::uint64_t d = head_weight->size();
    out.write(reinterpret_cast<const char*>(&d), sizeof(d));
    out.write(reinterpret_cast<const char*>(head_weight->data.data()),
              static_cast<std::streamsize>(d * sizeof(double)));
    out.write(reinterpret_cast<const char*>(&head_bias->data[0]), sizeof(double));
}

RewardModel RewardModel::load(const std::string& dir) {
    RewardModel rm;
    rm.backbone = TinyLM::load((fs::path(dir) / "backbone").string());
    std::ifstream in(fs::path(dir) / "head.bin", std::ios::binary);
    if (!in) throw TrainerError("reward head not found in " + dir);
    std::uint64_t d = 0;
    in.read(reinterpret_cast<char*>(&d), sizeof(d));
    if (d != static_cast<std::uint64_t>(rm.backbone.config.d_model))
        throw TrainerError("reward head size does not match backbone in " + dir);
    std::vector<double> w(d);
    double b = 0.0;
    in.read(reinterpret_cast<char*>(w.data()), static_cast<std::streamsize>(d * sizeof(double)));
    in.read(reinterpret_cast<char*>(&b), sizeof(b));
    if (!in) throw TrainerError("truncated reward head in " + dir);
    rm.head_weight = Tensor::create({rm.backbone.config.d_model, 1}, std::move(w));
    rm.head_bias = Tensor::create({1}, {b});
    return rm;
}

namespace {
std::vector<int> full_sequence_tokens(const std::string& chat_template,
                                      const std::string& system_prompt,
                                      const std::string& instruction,
                                      const std::string& response, int limit) {
    auto rendered =
        apply_chat_template(chat_template, system_prompt, instruction, response);
    auto ts = build_training_sequence(rendered, limit);
    return ts.inputs;
}
}  // namespace

double reward_pairwise_accuracy(const RewardModel& model,
                                const std::vector<PreferenceRecord>& data,
                                const std::string& chat_template,
                                const std::string& system_prompt, int max_seq_length) {
    const int limit = std::min(max_seq_length, model.backbone.config.max_seq_len);
    int correct = 0, usable = 0;
    for (const auto& r : data) {
        if (r.chosen == r.rejected) continue;
        ++usable;
        const double sc = model.score_value(full_sequence_tokens(
            chat_template, system_prompt, r.instruction, r.chosen, limit));
        const double sr = model.score_value(full_sequence_tokens(
            chat_template, system_prompt, r.instruction, r.rejected, limit));
        if (sc > sr) ++correct;
    }
    if (usable == 0) throw TrainerError("reward accuracy: no usable pairs");
    return static_cast<double>(correct) / usable;
}

RewardTrainResult train_reward_model(const TinyLM& backbone,
                                     const std::vector<PreferenceRecord>& data,
                                     const TrainingConfig& cfg,
                                     const std::string& chat_template,
                                     const std::string& system_prompt,
                                     int max_seq_length) {
    cfg.validate();
    const int limit = std::min(max_seq_length, backbone.config.max_seq_len);
    struct Pair {
        std::vector<int> chosen, rejected;
    };
    std::vector<Pair> pairs;
    for (const auto& r : data) {
        if (r.chosen == r.rejected) {
            std::cerr << "reward: skipping degenerate pair for \"" << r.instruction
                      << "\"\n";
            continue;
        }
        pairs.push_back({full_sequence_tokens(chat_template, system_prompt,
                                              r.instruction, r.chosen, limit),
                         full_sequence_tokens(chat_template, system_prompt,
                                              r.instruction, r.rejected, limit)});
    }
    if (pairs.empty()) throw TrainerError("reward: no usable preference pairs");

    RewardModel model = RewardModel::init(backbone);
    std::map<std::string, TensorPtr> all_params = model.backbone.params;
    all_params["head.weight"] = model.head_weight;
    all_params["head.bias"] = model.head_bias;

    AdamW opt;
    const int group_size = cfg.per_device_train_batch_size * cfg.gradient_accumulation_steps;
    const int n = static_cast<int>(pairs.size());
    const int steps_per_epoch = (n + group_size - 1) / group_size;
    const int total_steps = cfg.num_train_epochs * steps_per_epoch;

    const fs::path out_dir(cfg.output_dir);
    fs::create_directories(out_dir);
    MetricsWriter metrics(out_dir / "metrics.jsonl", false);
    RunManifest manifest;
    manifest.seed = cfg.seed;
    manifest.config_snapshot = json{{"total_steps", total_steps}}.dump();

    RewardTrainResult result;
    result.epoch_accuracy.push_back(
        reward_pairwise_accuracy(model, data, chat_template, system_prompt, limit));

    std::vector<std::size_t> order(pairs.size());
    int current_epoch = -1;
    for (int step = 0; step < total_steps; ++step) {
        const int epoch = step / steps_per_epoch;
        if (epoch != current_epoch) {
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            shuffle_indices(order, cfg.seed + static_cast<std::uint64_t>(epoch) * 7919);
            current_epoch = epoch;
        }
        const int begin = (step % steps_per_epoch) * group_size;
        const int end = std::min(n, begin + group_size);

        Tape tape;
        std::vector<TensorPtr> rc, rr;
        int correct = 0;
        for (int i = begin; i < end; ++i) {
            const Pair& p = pairs[order[static_cast<std::size_t>(i)]];
            rc.push_back(model.score(tape, p.chosen));
            rr.push_back(model.score(tape, p.rejected));
            if (rc.back()->item() > rr.back()->item()) ++correct;
        }
        auto loss = reward_model_loss(tape, rc, rr);
        tape.backward(loss);
        const double lr = lr_at(step, total_steps, cfg);
        opt.step(all_params, lr, cfg.weight_decay);

        if ((step + 1) % cfg.logging_steps == 0) {
            MetricsEntry e;
            e.step = step + 1;
            e.lr = lr;
            e.values["loss"] = loss->item();
            e.values["pairwise_accuracy"] = static_cast<double>(correct) / (end - begin);
            metrics.write(e);
            manifest.log.push_back(std::move(e));
        }
    }
    result.epoch_accuracy.push_back(
        reward_pairwise_accuracy(model, data, chat_template, system_prompt, limit));

    const fs::path final_dir = out_dir / "checkpoints" / "final";
    model.save(final_dir.string());
    manifest.checkpoints.push_back(fs::relative(final_dir, out_dir).string());
    manifest.save((out_dir / "manifest.json").string());
    result.model = std::move(model);
    result.manifest = std::move(manifest);
    return result;
}

// -------------------------------------------------------------------- GRPO

GrpoResult train_grpo(const TinyLM& student, const std::vector<std::string>& prompts,
                      const RewardFn& reward, const GrpoOptions& opts,
                      const TrainingConfig& cfg, const std::string& chat_template,
                      const std::string& system_prompt) {
    cfg.validate();
    if (opts.group_size < 2) throw TrainerError("grpo: group size must be >= 2");
    if (prompts.empty()) throw TrainerError("grpo: no prompts");
    if (!reward) throw TrainerError("grpo: reward function missing");

    TinyLM model = student.clone();
    model.set_requires_grad(true);
    TinyLM ref = student.clone();
    ref.set_requires_grad(false);
    AdamW opt;

    struct PromptTokens {
        std::string text;
        std::vector<int> tokens;
    };
    std::vector<PromptTokens> rendered;
    for (const auto& p : prompts) {
        auto r = apply_chat_template(chat_template, system_prompt, p, std::nullopt);
        std::vector<int> toks;
        toks.push_back(kBosId);
        for (int id : tokenize(r.text)) toks.push_back(id);
        const int budget = model.config.max_seq_len - opts.max_new_tokens;
        if (budget < 1) throw TrainerError("grpo: max_new_tokens leaves no prompt budget");
        if (static_cast<int>(toks.size()) > budget)
            toks.assign(toks.end() - budget, toks.end());
        rendered.push_back({r.text, std::move(toks)});
    }

    const fs::path out_dir(cfg.output_dir);
    fs::create_directories(out_dir);
    MetricsWriter metrics(out_dir / "metrics.jsonl", false);
    RunManifest manifest;
    manifest.seed = cfg.seed;
    manifest.config_snapshot = json{{"group_size", opts.group_size},
                                    {"clip_eps", opts.clip_eps},
                                    {"kl_coeff", opts.kl_coeff},
                                    {"iterations", opts.iterations}}
                                   .dump();

    // per-token logprobs of the completion tokens under the given model
    auto completion_logps = [](Tape& tape, const TinyLM& m,
                               const std::vector<int>& prompt,
                               const std::vector<int>& completion) {
        std::vector<int> seq = prompt;
        seq.insert(seq.end(), completion.begin(), completion.end());
        auto logp = tape.log_softmax(m.forward(tape, seq));
        // ids[i] = seq[i+1]; the final row predicts nothing and is sliced away
        std::vector<int> ids(seq.size(), 0);
        for (std::size_t i = 0; i + 1 < seq.size(); ++i) ids[i] = seq[i + 1];
        auto picked = tape.gather(logp, ids);  // [T]
        const int start = static_cast<int>(prompt.size()) - 1;
        return tape.slice_last(picked, start, static_cast<int>(completion.size()));
    };

    GrpoResult result;
    for (int iter = 0; iter < opts.iterations; ++iter) {
        Tape tape;
        std::vector<TensorPtr> group_losses;
        double reward_sum = 0.0;
        int reward_count = 0;

        for (std::size_t pi = 0; pi < rendered.size(); ++pi) {
            GroupRollout rollout;
            rollout.prompt = rendered[pi].tokens;
            for (int g = 0; g < opts.group_size; ++g) {
                const std::uint64_t sample_seed =
                    cfg.seed + 1000003ull * static_cast<std::uint64_t>(iter) +
                    1009ull * static_cast<std::uint64_t>(pi) + static_cast<std::uint64_t>(g);
                auto completion = model.generate(rendered[pi].tokens, opts.temperature,
                                                 opts.max_new_tokens, sample_seed);
                if (completion.empty()) completion.push_back(kEosId);
                double r;
                try {
                    r = reward(rendered[pi].text, detokenize(completion));
                } catch (const std::exception& e) {
                    throw TrainerError(std::string("grpo: reward function failed: ") +
                                       e.what());
                }
                Tape sample_tape;
                auto old_lp = completion_logps(sample_tape, model, rendered[pi].tokens,
                                               completion);
                rollout.completions.push_back(std::move(completion));
                rollout.old_logprobs.push_back(old_lp->data);
                rollout.rewards.push_back(r);
                reward_sum += r;
                ++reward_count;
            }
            rollout.validate();
            auto advantages = grpo_advantages(rollout.rewards);
            bool all_zero = true;
            for (double a : advantages) all_zero = all_zero && a == 0.0;
            if (all_zero)
                std::cerr << "grpo: iteration " << iter << " prompt " << pi
                          << ": identical rewards, advantages are zero\n";

            std::vector<TensorPtr> policy_lps;
            std::vector<std::vector<double>> ref_lps;
            for (const auto& completion : rollout.completions) {
                policy_lps.push_back(
                    completion_logps(tape, model, rollout.prompt, completion));
                Tape rt;
                ref_lps.push_back(
                    completion_logps(rt, ref, rollout.prompt, completion)->data);
            }
            group_losses.push_back(grpo_loss(tape, policy_lps, rollout.old_logprobs,
                                             ref_lps, advantages, opts.clip_eps,
                                             opts.kl_coeff));
        }
        auto loss = tape.mean(tape.stack_scalars(group_losses));
        tape.backward(loss);
        const double lr = lr_at(iter, opts.iterations, cfg);
        opt.step(model.params, lr, cfg.weight_decay);

        const double mean_reward = reward_sum / reward_count;
        result.mean_rewards.push_back(mean_reward);
        if ((iter + 1) % cfg.logging_steps == 0) {
            MetricsEntry e;
            e.step = iter + 1;
            e.lr = lr;
            e.values["loss"] = loss->item();
            e.values["mean_reward"] = mean_reward;
            metrics.write(e);
            manifest.log.push_back(std::move(e));
        }
    }

    const fs::path final_dir = out_dir / "checkpoints" / "final";
    model.save(final_dir.string());
    manifest.checkpoints.push_back(fs::relative(final_dir, out_dir).string());
    manifest.save((out_dir / "manifest.json").string());
    result.model = std::move(model);
    result.manifest = std::move(manifest);
    return result;
}

// -------------------------------------------------------------- evaluation

double eval_masked_ce(const TinyLM& model, const std::vector<LabeledRecord>& data,
                      const std::string& chat_template, const std::string& system_prompt,
                      int max_seq_length) {
    if (data.empty()) throw TrainerError("eval: empty dataset");
    auto examples = build_examples(data, chat_template, system_prompt, max_seq_length,
                                   model.config.max_seq_len);
    double total = 0.0;
    for (const auto& ex : examples) {
        Tape tape;
        auto logits = model.forward(tape, ex.ts.inputs);
        total += sft_loss(tape, logits, ex.ts.targets, ex.ts.mask)->item();
    }
    return total / static_cast<double>(examples.size());
}

double eval_forward_kld_to_teacher(const TinyLM& student, const TinyLM& teacher,
                                   const std::vector<LabeledRecord>& data,
                                   const std::string& chat_template,
                                   const std::string& system_prompt, int max_seq_length) {
    if (data.empty()) throw TrainerError("eval: empty dataset");
    if (student.config.vocab_size != teacher.config.vocab_size)
        throw TrainerError("eval: student/teacher vocab mismatch");
    auto examples = build_examples(data, chat_template, system_prompt, max_seq_length,
                                   std::min(student.config.max_seq_len,
                                            teacher.config.max_seq_len));
    double total = 0.0;
    for (const auto& ex : examples) {
        Tape tt, ts;
        auto teacher_logp = tt.log_softmax(teacher.forward(tt, ex.ts.inputs));
        auto student_logits = student.forward(ts, ex.ts.inputs);
        total += forward_kld(ts, teacher_logp, student_logits, ex.ts.mask)->item();
    }
    return total / static_cast<double>(examples.size());
}

}  // namespace easydistill
