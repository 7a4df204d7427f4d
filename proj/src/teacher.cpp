#include "easydistill/teacher.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <mutex>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

using nlohmann::json;

namespace easydistill {

LogFn stderr_logger() {
    return [](const std::string& msg) { std::cerr << msg << "\n"; };
}

std::string redact(const std::string& text, const std::string& secret) {
    if (secret.empty()) return text;
    std::string out = text;
    std::size_t pos = 0;
    while ((pos = out.find(secret, pos)) != std::string::npos) {
        out.replace(pos, secret.size(), "[REDACTED]");
        pos += 10;
    }
    return out;
}

void InferenceConfig::validate(bool has_teacher_path) const {
    if (mode != "api" && mode != "local")
        throw TeacherError("inference mode must be 'api' or 'local'");
    if (mode == "api") {
        if (base_url.empty()) throw TeacherError("api mode requires base_url");
        if (api_key.empty()) throw TeacherError("api mode requires api_key");
    } else if (!has_teacher_path) {
        throw TeacherError("local mode requires a teacher checkpoint path");
    }
    if (max_new_tokens <= 0) throw TeacherError("max_new_tokens must be > 0");
    if (temperature < 0.0) throw TeacherError("temperature must be >= 0");
    if (max_concurrency < 1) throw TeacherError("max_concurrency must be >= 1");
}

namespace {

// splits "http://host:port/prefix" into client target and path prefix
void split_url(const std::string& base_url, std::string& host, std::string& prefix) {
    auto scheme_end = base_url.find("://");
    std::size_t path_start =
        base_url.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
    if (path_start == std::string::npos) {
        host = base_url;
        prefix.clear();
    } else {
        host = base_url.substr(0, path_start);
        prefix = base_url.substr(path_start);
        while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
    }
}

std::string parse_completion_body(const std::string& body) {
    json j = json::parse(body);
    return j.at("choices").at(0).at("message").at("content").get<std::string>();
}

// SSE: concatenate choices[0].delta.content across "data:" events
std::string parse_stream_chunk(const std::string& chunk, std::string& carry) {
    std::string acc;
    carry += chunk;
    std::size_t pos;
    while ((pos = carry.find('\n')) != std::string::npos) {
        std::string line = carry.substr(0, pos);
        carry.erase(0, pos + 1);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.rfind("data:", 0) != 0) continue;
        std::string payload = line.substr(5);
        const auto first = payload.find_first_not_of(' ');
        if (first == std::string::npos) continue;
        payload = payload.substr(first);
        if (payload == "[DONE]") continue;
        json j = json::parse(payload);
        const auto& delta = j.at("choices").at(0).at("delta");
        if (delta.contains("content")) acc += delta.at("content").get<std::string>();
    }
    return acc;
}

}  // namespace

ApiChatClient::ApiChatClient(InferenceConfig cfg, LogFn log)
    : cfg_(std::move(cfg)), log_(std::move(log)) {
    split_url(cfg_.base_url, host_, path_prefix_);
}

ApiChatClient::~ApiChatClient() = default;

std::string ApiChatClient::complete(const std::string& system_prompt,
                                    const std::string& user) {
    json payload = {
        {"messages", json::array({{{"role", "system"}, {"content", system_prompt}},
                                  {{"role", "user"}, {"content", user}}})},
        {"max_tokens", cfg_.max_new_tokens},
        {"temperature", cfg_.temperature},
        {"stream", cfg_.stream},
    };
    const std::string body = payload.dump();
    const std::string path = path_prefix_ + "/chat/completions";

    last_retries_ = 0;
    std::string last_error;
    for (int attempt = 0; attempt < 3; ++attempt) {
        if (attempt > 0) {
            last_retries_ = attempt;
            const int delay = cfg_.retry_base_ms * (1 << (attempt - 1));
            log_("teacher api: retry " + std::to_string(attempt) + " after " +
                 std::to_string(delay) + "ms (" + redact(last_error, cfg_.api_key) + ")");
            std::this_thread::sleep_for(std::chrono::milliseconds(delay));
        }
        httplib::Client cli(host_);
        cli.set_connection_timeout(10);
        cli.set_read_timeout(60);
        httplib::Headers headers = {{"Authorization", "Bearer " + cfg_.api_key}};

        try {
            auto res = cli.Post(path, headers, body, "application/json");
            if (!res) {
                last_error = "connection failed: " + httplib::to_string(res.error());
                continue;
            }
            if (res->status == 401 || res->status == 403)
                throw AuthError("teacher api: authentication failed (HTTP " +
                                std::to_string(res->status) + ")");
            if (res->status != 200) {
                last_error = "HTTP " + std::to_string(res->status);
                continue;
            }
            if (cfg_.stream) {
                std::string carry;
                std::string acc = parse_stream_chunk(res->body, carry);
                acc += parse_stream_chunk("\n", carry);  // flush an unterminated tail
                return acc;
            }
            return parse_completion_body(res->body);
        } catch (const AuthError&) {
            throw;
        } catch (const json::exception& e) {
            last_error = std::string("malformed response body: ") + e.what();
        }
    }
    throw TeacherError("teacher api: giving up after 3 attempts: " +
                       redact(last_error, cfg_.api_key));
}

LocalChatClient::LocalChatClient(const TinyLM* model, const std::string& chat_template,
                                 const InferenceConfig& cfg)
    : model_(model), template_(chat_template), cfg_(cfg) {}

std::string LocalChatClient::complete(const std::string& system_prompt,
                                      const std::string& user) {
    auto rendered = apply_chat_template(template_, system_prompt, user, std::nullopt);
    std::vector<int> prompt;
    prompt.push_back(kBosId);
    for (int id : tokenize(rendered.text)) prompt.push_back(id);
    const int limit = std::min(cfg_.max_model_len, model_->config.max_seq_len);
    if (static_cast<int>(prompt.size()) > limit)
        prompt.assign(prompt.end() - limit, prompt.end());
    auto out = model_->generate(prompt, cfg_.temperature, cfg_.max_new_tokens,
                                cfg_.seed + call_index_++);
    return detokenize(out);
}

std::vector<AnnotationResult> annotate_api(const std::vector<InstructionRecord>& instructions,
                                           const InferenceConfig& cfg, LogFn log) {
    std::vector<AnnotationResult> results(instructions.size());
    if (instructions.empty()) return results;
    const int workers =
        std::min<int>(cfg.max_concurrency, static_cast<int>(instructions.size()));
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::atomic<bool> auth_failed{false};
    std::string auth_message;
    std::mutex auth_mu;

    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            ApiChatClient client(cfg, log);
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= instructions.size() || auth_failed.load()) break;
                AnnotationResult& r = results[i];
                r.record.instruction = instructions[i].instruction;
                try {
                    r.record.output =
                        client.complete(cfg.system_prompt, instructions[i].instruction);
                    r.retries = client.last_retry_count();
                    r.ok = true;
                } catch (const AuthError& e) {
                    std::lock_guard<std::mutex> lk(auth_mu);
                    auth_failed = true;
                    auth_message = e.what();
                    break;
                } catch (const std::exception& e) {
                    r.ok = false;
                    r.error = redact(e.what(), cfg.api_key);
                    r.retries = client.last_retry_count();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (auth_failed) throw AuthError(auth_message);
    return results;
}

std::vector<LabeledRecord> annotate_local(const std::vector<InstructionRecord>& instructions,
                                          const TinyLM& teacher,
                                          const InferenceConfig& cfg,
                                          const std::string& chat_template) {
    std::vector<LabeledRecord> out;
    out.reserve(instructions.size());
    LocalChatClient client(&teacher, chat_template, cfg);
    for (const auto& ins : instructions)
        out.push_back({ins.instruction, client.complete(cfg.system_prompt, ins.instruction)});
    return out;
}

int export_topk_logits(const TinyLM& teacher, const std::vector<LabeledRecord>& labeled,
                       int k, int max_seq_length, const std::string& chat_template,
                       const std::string& system_prompt, const std::string& out_path) {
    const int vocab = teacher.config.vocab_size;
    if (k < 1) throw TeacherError("export_topk_logits: k must be >= 1");
    if (k > vocab)
        throw TeacherError("export_topk_logits: k " + std::to_string(k) +
                           " exceeds vocab_size " + std::to_string(vocab));
    std::ofstream out(out_path, std::ios::trunc);
    if (!out) throw TeacherError("export_topk_logits: cannot write " + out_path);

    const int limit = std::min(max_seq_length, teacher.config.max_seq_len);
    int written = 0;
    for (std::size_t idx = 0; idx < labeled.size(); ++idx) {
        const auto& rec = labeled[idx];
        auto rendered = apply_chat_template(chat_template, system_prompt,
                                            rec.instruction, rec.output);
        auto ts = build_training_sequence(rendered, limit);
        std::vector<int> response_rows;
        for (std::size_t i = 0; i < ts.mask.size(); ++i)
            if (ts.mask[i] == 1.0) response_rows.push_back(static_cast<int>(i));
        if (response_rows.empty())
            throw TeacherError("export_topk_logits: sample " + std::to_string(idx) +
                               " has an empty response span");

        Tape tape;
        auto logp = tape.log_softmax(teacher.forward(tape, ts.inputs));
        TopKLogitsRecord record;
        record.sample_index = static_cast<int>(idx);
        for (int row : response_rows) {
            const double* lp = &logp->data[static_cast<std::size_t>(row) * vocab];
            std::vector<int> order(vocab);
            std::iota(order.begin(), order.end(), 0);
            std::partial_sort(order.begin(), order.begin() + k, order.end(),
                              [&](int a, int b) {
                                  if (lp[a] != lp[b]) return lp[a] > lp[b];
                                  return a < b;  // deterministic tie-break
                              });
            TopKPosition pos;
            pos.target_token = ts.targets[row];
            for (int c = 0; c < k; ++c) pos.topk.push_back({order[c], lp[order[c]]});
            record.positions.push_back(std::move(pos));
        }
        record.validate();
        append_topk_record(out, record);
        ++written;
    }
    return written;
}

}  // namespace easydistill
