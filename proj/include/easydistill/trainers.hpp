#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "easydistill/model.hpp"
#include "easydistill/objectives.hpp"
#include "easydistill/records.hpp"

namespace easydistill {

struct TrainerError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainingConfig {
    std::string output_dir = "result/";
    int num_train_epochs = 3;
    int per_device_train_batch_size = 1;
    int gradient_accumulation_steps = 8;
    int save_steps = 1000;
    int logging_steps = 1;
    double learning_rate = 2e-5;
    double weight_decay = 0.05;
    double warmup_ratio = 0.1;
    std::string lr_scheduler_type = "cosine";  // or "constant"
    std::uint64_t seed = 42;

    void validate() const;
};

// Adaptive moments with decoupled weight decay, bias-corrected.
class AdamW {
public:
    explicit AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    // consumes and clears gradients; decay is applied directly to weights
    void step(std::map<std::string, TensorPtr>& params, double lr, double weight_decay);
    std::int64_t step_count() const { return step_; }

    void save(const std::string& dir) const;
    void load(const std::string& dir,
              const std::map<std::string, TensorPtr>& params);

private:
    struct Moments {
        std::vector<double> m, v;
    };
    double beta1_, beta2_, eps_;
    std::int64_t step_ = 0;
    std::map<std::string, Moments> state_;
};

// Linear warmup over ceil(warmup_ratio * total) steps, then cosine decay to
// zero at total_steps (or constant after warmup).
double lr_at(int step, int total_steps, const TrainingConfig& cfg);

struct MetricsEntry {
    int step = 0;
    double lr = 0.0;
    std::map<std::string, double> values;
};

struct RunManifest {
    std::string config_snapshot;  // serialized JSON
    std::string dataset_hash;
    std::uint64_t seed = 0;
    std::vector<MetricsEntry> log;          // append-only
    std::vector<std::string> checkpoints;   // relative paths under output_dir

    void save(const std::string& path) const;
};

std::string content_hash(const std::string& bytes);  // FNV-1a 64, hex
std::string file_content_hash(const std::string& path);

struct TrainResult {
    TinyLM model;
    RunManifest manifest;
};

TrainResult train_sft(const TinyLM& student, const std::vector<LabeledRecord>& data,
                      const TrainingConfig& cfg, const std::string& chat_template,
                      const std::string& system_prompt, int max_seq_length);

// Two-phase white-box KD: consumes a logits file produced by
// export_topk_logits; positions must align with the tokenized batches.
TrainResult train_white_box(const TinyLM& student, const std::vector<LabeledRecord>& data,
                            const std::string& logits_path, const DistillSpec& spec,
                            const TrainingConfig& cfg, const std::string& chat_template,
                            const std::string& system_prompt);

struct DpoResult {
    TinyLM model;
    RunManifest manifest;
    std::vector<double> epoch_accuracy;  // preferred-completion accuracy
};

DpoResult train_dpo(const TinyLM& student, const TinyLM& reference,
                    const std::vector<PreferenceRecord>& data, double beta,
                    const TrainingConfig& cfg, const std::string& chat_template,
                    const std::string& system_prompt, int max_seq_length);

// Backbone with a scalar head over the mean-pooled final hidden state.
struct RewardModel {
    TinyLM backbone;
    TensorPtr head_weight;  // [d_model x 1]
    TensorPtr head_bias;    // [1]

    static RewardModel init(const TinyLM& backbone);
    TensorPtr score(Tape& tape, const std::vector<int>& tokens) const;
    double score_value(const std::vector<int>& tokens) const;

    void save(const std::string& dir) const;
    static RewardModel load(const std::string& dir);
};

struct RewardTrainResult {
    RewardModel model;
    RunManifest manifest;
    std::vector<double> epoch_accuracy;
};

RewardTrainResult train_reward_model(const TinyLM& backbone,
                                     const std::vector<PreferenceRecord>& data,
                                     const TrainingConfig& cfg,
                                     const std::string& chat_template,
                                     const std::string& system_prompt,
                                     int max_seq_length);

double reward_pairwise_accuracy(const RewardModel& model,
                                const std::vector<PreferenceRecord>& data,
                                const std::string& chat_template,
                                const std::string& system_prompt, int max_seq_length);

using RewardFn = std::function<double(const std::string& prompt,
                                      const std::string& completion)>;

struct GrpoOptions {
    int group_size = 8;
    double clip_eps = 0.2;
    double kl_coeff = 0.04;
    double temperature = 0.8;
    int max_new_tokens = 16;
    int iterations = 50;
};

struct GrpoResult {
    TinyLM model;
    RunManifest manifest;
    std::vector<double> mean_rewards;  // one entry per iteration
};

GrpoResult train_grpo(const TinyLM& student, const std::vector<std::string>& prompts,
                      const RewardFn& reward, const GrpoOptions& opts,
                      const TrainingConfig& cfg, const std::string& chat_template,
                      const std::string& system_prompt);

// --- evaluation helpers ---
double eval_masked_ce(const TinyLM& model, const std::vector<LabeledRecord>& data,
                      const std::string& chat_template, const std::string& system_prompt,
                      int max_seq_length);
double eval_forward_kld_to_teacher(const TinyLM& student, const TinyLM& teacher,
                                   const std::vector<LabeledRecord>& data,
                                   const std::string& chat_template,
                                   const std::string& system_prompt, int max_seq_length);

}  // namespace easydistill
