#pragma once

#include <string>
#include <vector>

#include "easydistill/records.hpp"
#include "easydistill/tensor.hpp"

namespace easydistill {

struct ObjectiveError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DistillSpec {
    double kd_ratio = 0.5;
    std::string distillation_type = "forward_kld";  // or "reverse_kld"
    int k = 0;  // top-k support size, 0 = full vocabulary
    int max_seq_length = 512;

    void validate() const;
};

// Masked-mean cross entropy over response tokens.
TensorPtr sft_loss(Tape& tape, const TensorPtr& student_logits,
                   const std::vector<int>& targets, const std::vector<double>& mask);

// KL(teacher || student), masked token mean. teacher_logprobs is a constant
// [T x V] of log p_T.
TensorPtr forward_kld(Tape& tape, const TensorPtr& teacher_logprobs,
                      const TensorPtr& student_logits, const std::vector<double>& mask);

// KL(student || teacher), teacher probabilities floored at 1e-12.
TensorPtr reverse_kld(Tape& tape, const TensorPtr& teacher_logprobs,
                      const TensorPtr& student_logits, const std::vector<double>& mask);

// Divergence on the k-token support: teacher top-k probs renormalized, student
// logits restricted to the same tokens and log-softmaxed over that support.
// logits_rows[j] is the student logits row for record position j.
TensorPtr topk_kld(Tape& tape, const TopKLogitsRecord& record,
                   const TensorPtr& student_logits, const std::vector<int>& logits_rows,
                   const DistillSpec& spec);

// (1 - kd_ratio) * sft + kd_ratio * divergence; degenerates bit-exactly at 0/1.
TensorPtr combined_kd_loss(Tape& tape, const TensorPtr& sft, const TensorPtr& divergence,
                           double kd_ratio);

// -log sigma(beta * ((pi_c - ref_c) - (pi_r - ref_r))), batch mean.
TensorPtr dpo_loss(Tape& tape, const std::vector<TensorPtr>& policy_logps_chosen,
                   const std::vector<TensorPtr>& policy_logps_rejected,
                   const std::vector<double>& ref_logps_chosen,
                   const std::vector<double>& ref_logps_rejected, double beta);

// Bradley-Terry: mean -log sigma(r_chosen - r_rejected).
TensorPtr reward_model_loss(Tape& tape, const std::vector<TensorPtr>& reward_chosen,
                            const std::vector<TensorPtr>& reward_rejected);

// (r_i - mean) / (std + 1e-8); zero vector when all rewards are equal.
std::vector<double> grpo_advantages(const std::vector<double>& rewards);

struct GroupRollout {
    std::vector<int> prompt;
    std::vector<std::vector<int>> completions;
    std::vector<double> rewards;
    std::vector<std::vector<double>> old_logprobs;  // per-token, at sampling time

    void validate() const;  // G >= 2, finite rewards, old logprobs present
};

// Clipped importance-ratio surrogate with per-token KL penalty to the
// reference policy. policy_logps[i] is a length-n_i tensor on the tape.
TensorPtr grpo_loss(Tape& tape, const std::vector<TensorPtr>& policy_logps,
                    const std::vector<std::vector<double>>& old_logps,
                    const std::vector<std::vector<double>>& ref_logps,
                    const std::vector<double>& advantages, double clip_eps,
                    double kl_coeff);

}  // namespace easydistill
