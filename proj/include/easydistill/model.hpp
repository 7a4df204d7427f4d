#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "easydistill/tensor.hpp"

namespace easydistill {

struct ModelError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Reserved token ids; every byte b maps to id b + 4.
inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kByteOffset = 4;
inline constexpr int kByteVocabSize = 256 + kByteOffset;

std::vector<int> tokenize(const std::string& text);
std::string detokenize(const std::vector<int>& ids);

struct ModelConfig {
    int vocab_size = kByteVocabSize;
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 4;
    int d_ff = 256;
    int max_seq_len = 128;
    std::uint64_t seed = 42;

    void validate() const;
};

// Decoder-only transformer: learned positional embeddings, pre-norm blocks,
// GELU MLP, untied unembedding.
struct TinyLM {
    ModelConfig config;
    std::map<std::string, TensorPtr> params;  // ordered -> deterministic iteration

    static TinyLM init(const ModelConfig& cfg);

    // logits [T x vocab_size]; rejects sequences longer than max_seq_len
    TensorPtr forward(Tape& tape, const std::vector<int>& tokens) const;
    // final-norm hidden state [T x d_model]
    TensorPtr final_hidden(Tape& tape, const std::vector<int>& tokens) const;

    std::vector<int> generate(const std::vector<int>& prompt, double temperature,
                              int max_new_tokens, std::uint64_t seed) const;

    std::size_t param_count() const;
    TinyLM clone() const;
    void set_requires_grad(bool rg);

    void save(const std::string& dir) const;
    static TinyLM load(const std::string& dir);
};

// Chat template rendering: pure substitution of {system} {user} {assistant}.
struct RenderedChat {
    std::string text;
    std::size_t span_begin = 0;  // byte range of the assistant response
    std::size_t span_end = 0;
    bool has_assistant = false;
};

RenderedChat apply_chat_template(const std::string& tmpl, const std::string& system,
                                 const std::string& user,
                                 const std::optional<std::string>& assistant);

std::string load_template_file(const std::string& path);

// Next-token training view of a rendered chat: inputs feed forward(), targets
// align with logits rows, mask is 1 exactly on response-token targets
// (including the closing eos when the response runs to the end of the text).
struct TrainingSequence {
    std::vector<int> inputs;
    std::vector<int> targets;
    std::vector<double> mask;
};

TrainingSequence build_training_sequence(const RenderedChat& chat, int max_seq_length);

double sample_uniform(std::mt19937_64& rng);  // [0,1), stdlib-independent

}  // namespace easydistill
