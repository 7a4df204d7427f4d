#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "easydistill/model.hpp"
#include "easydistill/records.hpp"

namespace easydistill {

struct TeacherError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Misconfigured credentials abort immediately instead of retrying.
struct AuthError : TeacherError {
    using TeacherError::TeacherError;
};

using LogFn = std::function<void(const std::string&)>;
LogFn stderr_logger();

struct InferenceConfig {
    std::string mode = "api";  // "api" or "local"
    std::string base_url;
    std::string api_key;
    bool stream = false;
    std::string system_prompt = "You are a helpful assistant.";
    int max_new_tokens = 512;
    double temperature = 0.0;
    std::uint64_t seed = 42;
    int max_model_len = 4096;
    int max_concurrency = 4;
    int retry_base_ms = 200;
    // backend flags accepted for config compatibility, recorded in the run
    // manifest and otherwise ignored (values kept as serialized JSON)
    std::map<std::string, std::string> passthrough;

    void validate(bool has_teacher_path) const;
};

// One teacher call: system prompt + user message -> assistant text.
class ChatClient {
public:
    virtual ~ChatClient() = default;
    virtual std::string complete(const std::string& system_prompt,
                                 const std::string& user) = 0;
};

// OpenAI chat-completions client; POST {base_url}/chat/completions with
// bearer auth, 3 attempts with exponential backoff, optional SSE streaming.
class ApiChatClient : public ChatClient {
public:
    ApiChatClient(InferenceConfig cfg, LogFn log = stderr_logger());
    ~ApiChatClient() override;
    std::string complete(const std::string& system_prompt,
                         const std::string& user) override;
    int last_retry_count() const { return last_retries_; }

private:
    InferenceConfig cfg_;
    LogFn log_;
    std::string host_;
    std::string path_prefix_;
    int last_retries_ = 0;
};

// Built-in model behind the same interface; one deterministic seed per call.
class LocalChatClient : public ChatClient {
public:
    LocalChatClient(const TinyLM* model, const std::string& chat_template,
                    const InferenceConfig& cfg);
    std::string complete(const std::string& system_prompt,
                         const std::string& user) override;

private:
    const TinyLM* model_;
    std::string template_;
    InferenceConfig cfg_;
    std::uint64_t call_index_ = 0;
};

struct AnnotationResult {
    LabeledRecord record;
    bool ok = false;
    std::string error;
    int retries = 0;
};

std::vector<AnnotationResult> annotate_api(const std::vector<InstructionRecord>& instructions,
                                           const InferenceConfig& cfg,
                                           LogFn log = stderr_logger());

std::vector<LabeledRecord> annotate_local(const std::vector<InstructionRecord>& instructions,
                                          const TinyLM& teacher,
                                          const InferenceConfig& cfg,
                                          const std::string& chat_template);

// Teacher-forced forward over each templated (instruction, output) pair,
// truncated to max_seq_length; writes one JSONL TopKLogitsRecord per sample.
// Ties at the k-th logit break toward the lower token id. Returns the number
// of records written.
int export_topk_logits(const TinyLM& teacher, const std::vector<LabeledRecord>& labeled,
                       int k, int max_seq_length, const std::string& chat_template,
                       const std::string& system_prompt, const std::string& out_path);

std::string redact(const std::string& text, const std::string& secret);

}  // namespace easydistill
