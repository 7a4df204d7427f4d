#include "easydistill/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace easydistill {

namespace {
constexpr double kProbFloor = 1e-12;
const double kLogFloor = std::log(kProbFloor);

void check_aligned(const TensorPtr& teacher_logprobs, const TensorPtr& student_logits,
                   const std::vector<double>& mask, const char* op) {
    if (teacher_logprobs->shape != student_logits->shape)
        throw ObjectiveError(std::string(op) + ": teacher shape " +
                             shape_str(teacher_logprobs->shape) +
                             " misaligned with student " +
                             shape_str(student_logits->shape));
    if (student_logits->rank() != 2)
        throw ObjectiveError(std::string(op) + ": expected [T x V] logits");
    if (static_cast<int>(mask.size()) != student_logits->dim(0))
        throw ObjectiveError(std::string(op) + ": mask length " +
                             std::to_string(mask.size()) + " misaligned with " +
                             std::to_string(student_logits->dim(0)) + " positions");
}
}  // namespace

void DistillSpec::validate() const {
    if (kd_ratio < 0.0 || kd_ratio > 1.0)
        throw ObjectiveError("kd_ratio must lie in [0,1]");
    if (k < 0) throw ObjectiveError("top-k must be >= 0");
    if (distillation_type != "forward_kld" && distillation_type != "reverse_kld")
        throw ObjectiveError("unknown distillation_type '" + distillation_type + "'");
    if (max_seq_length < 2) throw ObjectiveError("max_seq_length must be >= 2");
}

TensorPtr sft_loss(Tape& tape, const TensorPtr& student_logits,
                   const std::vector<int>& targets, const std::vector<double>& mask) {
    if (targets.size() != mask.size())
        throw ObjectiveError("sft_loss: targets/mask length mismatch");
    auto logp = tape.log_softmax(student_logits);
    auto picked = tape.gather(logp, targets);
    auto m = Tensor::vector1d(mask);
    return tape.scale(tape.sum_masked(picked, m, true), -1.0);
}

TensorPtr forward_kld(Tape& tape, const TensorPtr& teacher_logprobs,
                      const TensorPtr& student_logits, const std::vector<double>& mask) {
    check_aligned(teacher_logprobs, student_logits, mask, "forward_kld");
    std::vector<double> probs(teacher_logprobs->size());
    for (std::size_t i = 0; i < probs.size(); ++i)
        probs[i] = std::exp(teacher_logprobs->data[i]);
    auto p_t = Tensor::create(teacher_logprobs->shape, std::move(probs));
    auto log_p_t = Tensor::create(teacher_logprobs->shape, teacher_logprobs->data);

    auto log_p_s = tape.log_softmax(student_logits);
    auto per_token = tape.sum_last(tape.mul(tape.sub(log_p_t, log_p_s), p_t));
    return tape.sum_masked(per_token, Tensor::vector1d(mask), true);
}

TensorPtr reverse_kld(Tape& tape, const TensorPtr& teacher_logprobs,
                      const TensorPtr& student_logits, const std::vector<double>& mask) {
    check_aligned(teacher_logprobs, student_logits, mask, "reverse_kld");
    std::vector<double> floored(teacher_logprobs->size());
    for (std::size_t i = 0; i < floored.size(); ++i)
        floored[i] = std::max(teacher_logprobs->data[i], kLogFloor);
    auto log_p_t = Tensor::create(teacher_logprobs->shape, std::move(floored));

    auto log_p_s = tape.log_softmax(student_logits);
    auto p_s = tape.exp(log_p_s);
    auto per_token = tape.sum_last(tape.mul(tape.sub(log_p_s, log_p_t), p_s));
    return tape.sum_masked(per_token, Tensor::vector1d(mask), true);
}

TensorPtr topk_kld(Tape& tape, const TopKLogitsRecord& record,
                   const TensorPtr& student_logits, const std::vector<int>& logits_rows,
                   const DistillSpec& spec) {
    spec.validate();
    record.validate();
    if (student_logits->rank() != 2)
        throw ObjectiveError("topk_kld: expected [T x V] student logits");
    const int t = student_logits->dim(0), vocab = student_logits->dim(1);
    if (logits_rows.size() != record.positions.size())
        throw ObjectiveError("topk_kld: sample " + std::to_string(record.sample_index) +
                             ": " + std::to_string(record.positions.size()) +
                             " record positions misaligned with " +
                             std::to_string(logits_rows.size()) + " logits rows");
    if (record.positions.empty())
        throw ObjectiveError("topk_kld: sample " + std::to_string(record.sample_index) +
                             " has no positions");
    const int k = static_cast<int>(record.positions.front().topk.size());
    const int expected_k = spec.k == 0 ? vocab : spec.k;
    if (k != expected_k)
        throw ObjectiveError("topk_kld: record k " + std::to_string(k) +
                             " does not match configured k " + std::to_string(expected_k));

    // one selection row per student position; rows without a record entry get
    // dummy indices and are masked out of the mean
    std::vector<std::vector<int>> ids(t);
    std::vector<double> mask(t, 0.0);
    std::vector<double> q(static_cast<std::size_t>(t) * k, 1.0 / k);
    std::vector<int> dummy(k);
    for (int j = 0; j < k; ++j) dummy[j] = j;
    for (auto& row : ids) row = dummy;

    for (std::size_t j = 0; j < record.positions.size(); ++j) {
        const auto& pos = record.positions[j];
        const int row = logits_rows[j];
        if (row < 0 || row >= t)
            throw ObjectiveError("topk_kld: logits row " + std::to_string(row) +
                                 " out of range for sample " +
                                 std::to_string(record.sample_index));
        if (static_cast<int>(pos.topk.size()) != k)
            throw ObjectiveError("topk_kld: ragged top-k in sample " +
                                 std::to_string(record.sample_index));
        ids[row].resize(k);
        double norm = 0.0;
        for (const auto& e : pos.topk) {
            if (e.token_id < 0 || e.token_id >= vocab)
                throw ObjectiveError("topk_kld: token id " + std::to_string(e.token_id) +
                                     " out of vocab " + std::to_string(vocab));
            norm += std::exp(e.logprob);
        }
        for (int c = 0; c < k; ++c) {
            ids[row][c] = pos.topk[c].token_id;
            q[static_cast<std::size_t>(row) * k + c] = std::exp(pos.topk[c].logprob) / norm;
        }
        mask[row] = 1.0;
    }

    std::vector<double> log_q(q.size());
    for (std::size_t i = 0; i < q.size(); ++i)
        log_q[i] = std::log(std::max(q[i], kProbFloor));
    auto q_t = Tensor::create({t, k}, std::move(q));
    auto log_q_t = Tensor::create({t, k}, std::move(log_q));

    auto student_sel = tape.select_cols(student_logits, ids);
    auto log_p = tape.log_softmax(student_sel);  // renormalized over the support
    TensorPtr per_token;
    if (spec.distillation_type == "forward_kld") {
        per_token = tape.sum_last(tape.mul(tape.sub(log_q_t, log_p), q_t));
    } else {
        auto p = tape.exp(log_p);
        per_token = tape.sum_last(tape.mul(tape.sub(log_p, log_q_t), p));
    }
    return tape.sum_masked(per_token, Tensor::vector1d(mask), true);
}

TensorPtr combined_kd_loss(Tape& tape, const TensorPtr& sft, const TensorPtr& divergence,
                           double kd_ratio) {
    if (kd_ratio < 0.0 || kd_ratio > 1.0)
        throw ObjectiveError("kd_ratio must lie in [0,1]");
    if (kd_ratio == 0.0) return sft;
    if (kd_ratio == 1.0) return divergence;
    return tape.add(tape.scale(sft, 1.0 - kd_ratio), tape.scale(divergence, kd_ratio));
}

TensorPtr dpo_loss(Tape& tape, const std::vector<TensorPtr>& policy_logps_chosen,
                   const std::vector<TensorPtr>& policy_logps_rejected,
                   const std::vector<double>& ref_logps_chosen,
                   const std::vector<double>& ref_logps_rejected, double beta) {
    const std::size_t n = policy_logps_chosen.size();
    if (n == 0 || policy_logps_rejected.size() != n || ref_logps_chosen.size() != n ||
        ref_logps_rejected.size() != n)
        throw ObjectiveError("dpo_loss: empty or misaligned batch");
    if (beta <= 0.0) throw ObjectiveError("dpo_loss: beta must be > 0");
    for (std::size_t i = 0; i < n; ++i)
        if (!std::isfinite(ref_logps_chosen[i]) || !std::isfinite(ref_logps_rejected[i]))
            throw ObjectiveError("dpo_loss: non-finite reference logps");

    std::vector<TensorPtr> losses;
    losses.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto policy_margin = tape.sub(policy_logps_chosen[i], policy_logps_rejected[i]);
        auto margin =
            tape.add_const(policy_margin, ref_logps_rejected[i] - ref_logps_chosen[i]);
        losses.push_back(tape.scale(tape.log_sigmoid(tape.scale(margin, beta)), -1.0));
    }
    return tape.mean(tape.stack_scalars(losses));
}

TensorPtr reward_model_loss(Tape& tape, const std::vector<TensorPtr>& reward_chosen,
                            const std::vector<TensorPtr>& reward_rejected) {
    const std::size_t n = reward_chosen.size();
    if (n == 0 || reward_rejected.size() != n)
        throw ObjectiveError("reward_model_loss: empty or misaligned batch");
    std::vector<TensorPtr> losses;
    losses.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
        losses.push_back(tape.scale(
            tape.log_sigmoid(tape.sub(reward_chosen[i], reward_rejected[i])), -1.0));
    return tape.mean(tape.stack_scalars(losses));
}

std::vector<double> grpo_advantages(const std::vector<double>& rewards) {
    const std::size_t g = rewards.size();
    if (g < 2) throw ObjectiveError("grpo_advantages: group size must be >= 2");
    double mean = 0.0;
    for (double r : rewards) {
        if (!std::isfinite(r)) throw ObjectiveError("grpo_advantages: non-finite reward");
        mean += r;
    }
    mean /= static_cast<double>(g);
    double var = 0.0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    const double stddev = std::sqrt(var / static_cast<double>(g));
    std::vector<double> adv(g);
    for (std::size_t i = 0; i < g; ++i) adv[i] = (rewards[i] - mean) / (stddev + 1e-8);
    return adv;
}

void GroupRollout::validate() const {
    if (completions.size() < 2)
        throw ObjectiveError("group rollout: need at least 2 completions");
    if (rewards.size() != completions.size() || old_logprobs.size() != completions.size())
        throw ObjectiveError("group rollout: rewards/old_logprobs misaligned");
    for (double r : rewards)
        if (!std::isfinite(r)) throw ObjectiveError("group rollout: non-finite reward");
    for (std::size_t i = 0; i < completions.size(); ++i)
        if (old_logprobs[i].size() != completions[i].size())
            throw ObjectiveError("group rollout: missing old_logprobs for completion " +
                                 std::to_string(i));
}

TensorPtr grpo_loss(Tape& tape, const std::vector<TensorPtr>& policy_logps,
                    const std::vector<std::vector<double>>& old_logps,
                    const std::vector<std::vector<double>>& ref_logps,
                    const std::vector<double>& advantages, double clip_eps,
                    double kl_coeff) {
    const std::size_t g = policy_logps.size();
    if (g == 0 || old_logps.size() != g || ref_logps.size() != g ||
        advantages.size() != g)
        throw ObjectiveError("grpo_loss: misaligned group inputs");
    std::vector<TensorPtr> token_losses;
    token_losses.reserve(g);
    for (std::size_t i = 0; i < g; ++i) {
        const auto& policy = policy_logps[i];
        if (old_logps[i].size() != policy->size())
            throw ObjectiveError("grpo_loss: missing old_logprobs for completion " +
                                 std::to_string(i));
        if (ref_logps[i].size() != policy->size())
            throw ObjectiveError("grpo_loss: missing reference logprobs for completion " +
                                 std::to_string(i));
        auto old_c = Tensor::vector1d(old_logps[i]);
        auto ref_c = Tensor::vector1d(ref_logps[i]);
        auto ratio = tape.exp(tape.sub(policy, old_c));
        auto surrogate = tape.minimum(
            tape.scale(ratio, advantages[i]),
            tape.scale(tape.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps), advantages[i]));
        // unbiased estimator: exp(ref - theta) - (ref - theta) - 1, >= 0
        auto delta = tape.sub(ref_c, policy);
        auto kl_pen = tape.add_const(tape.add(tape.exp(delta), tape.scale(delta, -1.0)),
                                     -1.0);
        token_losses.push_back(
            tape.add(tape.scale(surrogate, -1.0), tape.scale(kl_pen, kl_coeff)));
    }
    return tape.mean(tape.concat_last(token_losses));
}

}  // namespace easydistill
