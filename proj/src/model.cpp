#include "easydistill/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace easydistill {

std::vector<int> tokenize(const std::string& text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<int>(c) + kByteOffset);
    return ids;
}

std::string detokenize(const std::vector<int>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids)
        if (id >= kByteOffset && id < kByteVocabSize)
            out.push_back(static_cast<char>(id - kByteOffset));
    return out;
}

void ModelConfig::validate() const {
    if (vocab_size < 4) throw ModelError("vocab_size must be >= 4");
    if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0)
        throw ModelError("model dimensions must be positive");
    if (d_model % n_heads != 0)
        throw ModelError("d_model " + std::to_string(d_model) +
                         " not divisible by n_heads " + std::to_string(n_heads));
    if (max_seq_len < 2) throw ModelError("max_seq_len must be >= 2");
}

double sample_uniform(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

namespace {

std::vector<double> normal_init(std::size_t n, double std_dev, std::mt19937_64& rng) {
    // Box-Muller on our own uniform stream keeps init identical across stdlibs
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; i += 2) {
        double u1 = sample_uniform(rng), u2 = sample_uniform(rng);
        while (u1 <= 0.0) u1 = sample_uniform(rng);
        const double r = std::sqrt(-2.0 * std::log(u1));
        out[i] = std_dev * r * std::cos(2.0 * M_PI * u2);
        if (i + 1 < n) out[i + 1] = std_dev * r * std::sin(2.0 * M_PI * u2);
    }
    return out;
}

std::string layer_key(int i, const char* suffix) {
    return "l" + std::to_string(i) + "." + suffix;
}

}  // namespace

TinyLM TinyLM::init(const ModelConfig& cfg) {
    cfg.validate();
    TinyLM m;
    m.config = cfg;
    std::mt19937_64 rng(cfg.seed);
    const int d = cfg.d_model, v = cfg.vocab_size, ff = cfg.d_ff;

    auto weight = [&](const std::string& name, std::vector<int> shape) {
        m.params[name] =
            Tensor::create(shape, normal_init(shape_numel(shape), 0.02, rng), true);
    };
    auto zeros = [&](const std::string& name, std::vector<int> shape) {
        m.params[name] = Tensor::zeros(std::move(shape), true);
    };
    auto ones = [&](const std::string& name, int n) {
        m.params[name] = Tensor::create({n}, std::vector<double>(n, 1.0), true);
    };

    weight("tok_emb", {v, d});
    weight("pos_emb", {cfg.max_seq_len, d});
    for (int i = 0; i < cfg.n_layers; ++i) {
        ones(layer_key(i, "ln1.g"), d);
        zeros(layer_key(i, "ln1.b"), {d});
        for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"})
            weight(layer_key(i, w), {d, d});
        for (const char* b : {"attn.bq", "attn.bk", "attn.bv", "attn.bo"})
            zeros(layer_key(i, b), {d});
        ones(layer_key(i, "ln2.g"), d);
        zeros(layer_key(i, "ln2.b"), {d});
        weight(layer_key(i, "mlp.w1"), {d, ff});
        zeros(layer_key(i, "mlp.b1"), {ff});
        weight(layer_key(i, "mlp.w2"), {ff, d});
        zeros(layer_key(i, "mlp.b2"), {d});
    }
    ones("ln_f.g", d);
    zeros("ln_f.b", {d});
    weight("unembed", {d, v});
    return m;
}

TensorPtr TinyLM::final_hidden(Tape& tape, const std::vector<int>& tokens) const {
    const int t = static_cast<int>(tokens.size());
    if (t == 0) throw ModelError("forward: empty token sequence");
    if (t > config.max_seq_len)
        throw ModelError("forward: sequence length " + std::to_string(t) +
                         " exceeds max_seq_len " + std::to_string(config.max_seq_len));
    for (int id : tokens)
        if (id < 0 || id >= config.vocab_size)
            throw ModelError("forward: token id " + std::to_string(id) + " out of vocab");

    auto p = [&](const std::string& name) { return params.at(name); };
    std::vector<int> positions(tokens.size());
    for (int i = 0; i < t; ++i) positions[i] = i;

    auto x = tape.add(tape.embedding_lookup(p("tok_emb"), tokens),
                      tape.embedding_lookup(p("pos_emb"), positions));

    // causal additive mask, finite so NaN detection stays meaningful
    std::vector<double> mask_data(static_cast<std::size_t>(t) * t, 0.0);
    for (int i = 0; i < t; ++i)
        for (int j = i + 1; j < t; ++j)
            mask_data[static_cast<std::size_t>(i) * t + j] = -1e9;
    auto causal_mask = Tensor::create({t, t}, std::move(mask_data), false);

    const int n_heads = config.n_heads;
    const int head_dim = config.d_model / n_heads;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

    for (int l = 0; l < config.n_layers; ++l) {
        auto h = tape.layernorm(x, p(layer_key(l, "ln1.g")), p(layer_key(l, "ln1.b")));
        auto q = tape.add(tape.matmul(h, p(layer_key(l, "attn.wq"))), p(layer_key(l, "attn.bq")));
        auto k = tape.add(tape.matmul(h, p(layer_key(l, "attn.wk"))), p(layer_key(l, "attn.bk")));
        auto v = tape.add(tape.matmul(h, p(layer_key(l, "attn.wv"))), p(layer_key(l, "attn.bv")));

        std::vector<TensorPtr> head_outs;
        head_outs.reserve(n_heads);
        for (int hd = 0; hd < n_heads; ++hd) {
            auto qh = tape.slice_last(q, hd * head_dim, head_dim);
            auto kh = tape.slice_last(k, hd * head_dim, head_dim);
            auto vh = tape.slice_last(v, hd * head_dim, head_dim);
            auto scores = tape.add(tape.scale(tape.matmul_nt(qh, kh), att_scale),
                                   causal_mask);
            head_outs.push_back(tape.matmul(tape.softmax(scores), vh));
        }
        auto att = tape.add(tape.matmul(tape.concat_last(head_outs),
                                        p(layer_key(l, "attn.wo"))),
                            p(layer_key(l, "attn.bo")));
        x = tape.add(x, att);

        auto h2 = tape.layernorm(x, p(layer_key(l, "ln2.g")), p(layer_key(l, "ln2.b")));
        auto mlp = tape.add(
            tape.matmul(tape.gelu(tape.add(tape.matmul(h2, p(layer_key(l, "mlp.w1"))),
                                           p(layer_key(l, "mlp.b1")))),
                        p(layer_key(l, "mlp.w2"))),
            p(layer_key(l, "mlp.b2")));
        x = tape.add(x, mlp);
    }
    return tape.layernorm(x, p("ln_f.g"), p("ln_f.b"));
}

TensorPtr TinyLM::forward(Tape& tape, const std::vector<int>& tokens) const {
    return tape.matmul(final_hidden(tape, tokens), params.at("unembed"));
}

std::vector<int> TinyLM::generate(const std::vector<int>& prompt, double temperature,
                                  int max_new_tokens, std::uint64_t seed) const {
    if (prompt.empty()) throw ModelError("generate: empty prompt");
    if (temperature < 0.0) throw ModelError("generate: temperature must be >= 0");
    std::mt19937_64 rng(seed);
    std::vector<int> seq = prompt;
    std::vector<int> out;
    const int v = config.vocab_size;
    for (int step = 0; step < max_new_tokens; ++step) {
        std::vector<int> window = seq;
        if (static_cast<int>(window.size()) > config.max_seq_len)
            window.assign(seq.end() - config.max_seq_len, seq.end());
        Tape tape;
        auto logits = forward(tape, window);
        const int t = static_cast<int>(window.size());
        const double* row = &logits->data[static_cast<std::size_t>(t - 1) * v];
        int next;
        if (temperature == 0.0) {
            next = static_cast<int>(std::max_element(row, row + v) - row);
        } else {
            double mx = *std::max_element(row, row + v);
            std::vector<double> probs(v);
            double denom = 0.0;
            for (int j = 0; j < v; ++j) denom += probs[j] = std::exp((row[j] - mx) / temperature);
            const double u = sample_uniform(rng) * denom;
            double acc = 0.0;
            next = v - 1;
            for (int j = 0; j < v; ++j) {
                acc += probs[j];
                if (u < acc) {
                    next = j;
                    break;
                }
            }
        }
        out.push_back(next);
        seq.push_back(next);
        if (next == kEosId) break;
    }
    return out;
}

std::size_t TinyLM::param_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params) n += t->size();
    return n;
}

TinyLM TinyLM::clone() const {
    TinyLM m;
    m.config = config;
    for (const auto& [name, t] : params)
        m.params[name] = Tensor::create(t->shape, t->data, t->requires_grad);
    return m;
}

void TinyLM::set_requires_grad(bool rg) {
    for (auto& [name, t] : params) {
        t->requires_grad = rg;
        if (!rg) t->zero_grad();
    }
}

void TinyLM::save(const std::string& dir) const {
    fs::create_directories(dir);
    json cfg = {{"vocab_size", config.vocab_size}, {"d_model", config.d_model},
                {"n_layers", config.n_layers},    {"n_heads", config.n_heads},
                {"d_ff", config.d_ff},            {"max_seq_len", config.max_seq_len},
                {"seed", config.seed}};
    std::ofstream(fs::path(dir) / "config.json") << cfg.dump(2) << "\n";

    json index = json::object();
    for (const auto& [name, t] : params) {
        index[name] = t->shape;
        std::ofstream blob(fs::path(dir) / (name + ".bin"), std::ios::binary);
        blob.write(reinterpret_cast<const char*>(t->data.data()),
                   static_cast<std::streamsize>(t->data.size() * sizeof(double)));
        if (!blob) throw ModelError("checkpoint write failed for " + name);
    }
    std::ofstream(fs::path(dir) / "index.json") << index.dump(2) << "\n";
}

TinyLM TinyLM::load(const std::string& dir) {
    std::ifstream cfg_in(fs::path(dir) / "config.json");
    if (!cfg_in) throw ModelError("checkpoint config not found in " + dir);
    json cfg = json::parse(cfg_in);
    TinyLM m;
    m.config.vocab_size = cfg.at("vocab_size");
    m.config.d_model = cfg.at("d_model");
    m.config.n_layers = cfg.at("n_layers");
    m.config.n_heads = cfg.at("n_heads");
    m.config.d_ff = cfg.at("d_ff");
    m.config.max_seq_len = cfg.at("max_seq_len");
    m.config.seed = cfg.at("seed");
    m.config.validate();

    std::ifstream idx_in(fs::path(dir) / "index.json");
    if (!idx_in) throw ModelError("checkpoint index not found in " + dir);
    json index = json::parse(idx_in);
    for (auto& [name, shape_j] : index.items()) {
        std::vector<int> shape = shape_j.get<std::vector<int>>();
        std::size_t n = shape_numel(shape);
        std::vector<double> data(n);
        std::ifstream blob(fs::path(dir) / (name + ".bin"), std::ios::binary);
        if (!blob) throw ModelError("checkpoint blob missing for " + name);
        blob.read(reinterpret_cast<char*>(data.data()),
                  static_cast<std::streamsize>(n * sizeof(double)));
        if (blob.gcount() != static_cast<std::streamsize>(n * sizeof(double)))
            throw ModelError("checkpoint blob truncated for " + name);
        m.params[name] = Tensor::create(std::move(shape), std::move(data), true);
    }
    return m;
}

// ------------------------------------------------------------ chat template

RenderedChat apply_chat_template(const std::string& tmpl, const std::string& system,
                                 const std::string& user,
                                 const std::optional<std::string>& assistant) {
    // validation pass: every placeholder known, all three present
    bool saw_system = false, saw_user = false, saw_assistant = false;
    for (std::size_t i = 0; i < tmpl.size(); ++i) {
        if (tmpl[i] != '{') continue;
        const std::size_t close = tmpl.find('}', i);
        if (close == std::string::npos)
            throw ModelError("chat template: unterminated placeholder");
        const std::string name = tmpl.substr(i + 1, close - i - 1);
        if (name == "system")
            saw_system = true;
        else if (name == "user")
            saw_user = true;
        else if (name == "assistant")
            saw_assistant = true;
        else
            throw ModelError("chat template: unknown placeholder {" + name + "}");
        i = close;
    }
    if (!saw_system || !saw_user || !saw_assistant)
        throw ModelError("chat template: missing required placeholder "
                         "{system}/{user}/{assistant}");

    RenderedChat out;
    out.has_assistant = assistant.has_value();
    std::string& text = out.text;
    std::size_t i = 0;
    while (i < tmpl.size()) {
        if (tmpl[i] != '{') {
            text.push_back(tmpl[i++]);
            continue;
        }
        const std::size_t close = tmpl.find('}', i);
        const std::string name = tmpl.substr(i + 1, close - i - 1);
        if (name == "system") {
            text += system;
        } else if (name == "user") {
            text += user;
        } else {
            out.span_begin = text.size();
            if (!assistant) {  // prompt-only rendering stops at the response slot
                out.span_end = text.size();
                return out;
            }
            text += *assistant;
            out.span_end = text.size();
        }
        i = close + 1;
    }
    return out;
}

std::string load_template_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ModelError("template file not readable: " + path);
    std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return s;
}

TrainingSequence build_training_sequence(const RenderedChat& chat, int max_seq_length) {
    std::vector<int> seq;
    seq.reserve(chat.text.size() + 2);
    seq.push_back(kBosId);
    for (int id : tokenize(chat.text)) seq.push_back(id);
    seq.push_back(kEosId);
    // keep at most max_seq_length input positions
    if (static_cast<int>(seq.size()) > max_seq_length + 1)
        seq.resize(static_cast<std::size_t>(max_seq_length) + 1);

    TrainingSequence ts;
    const std::size_t n = seq.size();
    ts.inputs.assign(seq.begin(), seq.end() - 1);
    ts.targets.assign(seq.begin() + 1, seq.end());
    ts.mask.assign(n - 1, 0.0);
    const bool eos_in_response =
        chat.has_assistant && chat.span_end == chat.text.size();
    for (std::size_t i = 0; i < n - 1; ++i) {
        const int tgt = ts.targets[i];
        if (tgt == kEosId) {
            if (eos_in_response) ts.mask[i] = 1.0;
            continue;
        }
        // target at position i is byte i of the rendered text
        if (i >= chat.span_begin && i < chat.span_end) ts.mask[i] = 1.0;
    }
    return ts;
}

}  // namespace easydistill
