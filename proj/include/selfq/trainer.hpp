#pragma once

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "selfq/errors.hpp"
#include "selfq/model.hpp"
#include "selfq/objective.hpp"
#include "selfq/rng.hpp"
#include "selfq/taskgen.hpp"

namespace selfq {

enum class AblationMode { full, no_subq_loss, no_suba_loss, no_chain_augmentation, final_only };

inline std::string_view ablation_mode_name(AblationMode m) {
    switch (m) {
        case AblationMode::full: return "full";
        case AblationMode::no_subq_loss: return "no_subq_loss";
        case AblationMode::no_suba_loss: return "no_suba_loss";
        case AblationMode::no_chain_augmentation: return "no_chain_augmentation";
        case AblationMode::final_only: return "final_only";
    }
    return "full";
}

inline AblationMode ablation_mode_from_name(std::string_view n) {
    for (auto m : {AblationMode::full, AblationMode::no_subq_loss,
                   AblationMode::no_suba_loss, AblationMode::no_chain_augmentation,
                   AblationMode::final_only})
        if (ablation_mode_name(m) == n) return m;
    throw ConfigError("unknown ablation mode: " + std::string(n));
}

struct TrainConfig {
    double learning_rate = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps_opt = 1e-8;
    double weight_decay = 0.01;
    int batch_size = 16;
    int max_steps = 3000;
    uint64_t seed = 0;
    double lambda_ans = 0.8;
    double lambda_final = 1.0;
    double augmentation_fraction = 1.0;
    AblationMode ablation_mode = AblationMode::full;
    double clip_norm = 1.0;
    bool strict_conditioning = false;
    // Optional corpus-accuracy probe: every eval_every steps, stop once
    // supervised-token accuracy reaches stop_token_acc.
    int eval_every = 0;
    double stop_token_acc = 0.0;

    void validate() const {
        if (!(learning_rate > 0) || !(beta1 > 0 && beta1 < 1) ||
            !(beta2 > 0 && beta2 < 1) || !(eps_opt > 0))
            throw ConfigError("optimizer constants out of range");
        if (weight_decay < 0) throw ConfigError("weight_decay must be nonnegative");
        if (batch_size <= 0 || max_steps <= 0)
            throw ConfigError("batch_size and max_steps must be positive");
        if (augmentation_fraction < 0 || augmentation_fraction > 1)
            throw ConfigError("augmentation_fraction must lie in [0, 1]");
        if (clip_norm < 0) throw ConfigError("clip_norm must be nonnegative");
    }

    // Term weights after applying the ablation mode.
    double effective_lambda_sub_q() const {
        return (ablation_mode == AblationMode::no_subq_loss ||
                ablation_mode == AblationMode::final_only)
                   ? 0.0
                   : 1.0;
    }
    LossWeights effective_weights() const {
        LossWeights w{lambda_ans, lambda_final};
        if (ablation_mode == AblationMode::no_suba_loss ||
            ablation_mode == AblationMode::final_only)
            w.lambda_ans = 0.0;
        return w;
    }
};

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

struct OptimizerState {
    std::map<std::string, std::vector<double>> first_moment;
    std::map<std::string, std::vector<double>> second_moment;
    long step = 0;

    static OptimizerState init(const ModelParams& params) {
        OptimizerState s;
        for (const auto& [path, t] : params.by_path) {
            s.first_moment.emplace(path, std::vector<double>(t.size(), 0.0));
            s.second_moment.emplace(path, std::vector<double>(t.size(), 0.0));
        }
        return s;
    }
};

// One decoupled-weight-decay Adam update, in place. Missing gradients count
// as zero, so untouched parameters still decay their moments.
inline void adamw_step(ModelParams& params, OptimizerState& state,
                       const TrainConfig& tc) {
    state.step += 1;
    const double bc1 = 1.0 - std::pow(tc.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(tc.beta2, static_cast<double>(state.step));
    for (auto& [path, t] : params.by_path) {
        auto& m = state.first_moment.at(path);
        auto& v = state.second_moment.at(path);
        auto& p = t.mutable_values();
        const auto g = t.grad_or_zeros();
        for (size_t i = 0; i < p.size(); ++i) {
            if (!std::isfinite(g[i]))
                throw NumericError("non-finite gradient in parameter " + path);
            m[i] = tc.beta1 * m[i] + (1.0 - tc.beta1) * g[i];
            v[i] = tc.beta2 * v[i] + (1.0 - tc.beta2) * g[i] * g[i];
            const double m_hat = m[i] / bc1;
            const double v_hat = v[i] / bc2;
            p[i] -= tc.learning_rate *
                    (m_hat / (std::sqrt(v_hat) + tc.eps_opt) + tc.weight_decay * p[i]);
        }
    }
}

// Global-norm gradient clipping. Returns the pre-clip norm.
inline double clip_gradients(ModelParams& params, double max_norm) {
    double sq = 0.0;
    for (const auto& [path, t] : params.by_path) {
        if (!t.has_grad()) continue;
        for (double g : t.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        const double factor = max_norm / norm;
        for (auto& [path, t] : params.by_path) {
            if (!t.has_grad()) continue;
            for (auto& g : t.node().grad) g *= factor;
        }
    }
    return norm;
}

// ---------------------------------------------------------------------------
// Checkpoints: magic "SQCL", version, canonical JSON config block, parameter
// blocks, optimizer blocks, trailing CRC-32. All integers and floats little
// endian.
// ---------------------------------------------------------------------------

namespace ckpt_detail {

inline uint32_t crc32(const unsigned char* data, size_t len) {
    static const auto table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k)
                c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    uint32_t crc = 0xFFFFFFFFu;
    for (size_t i = 0; i < len; ++i)
        crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

inline void put_u32(std::string& buf, uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::string& buf, uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_f64(std::string& buf, double v) {
    put_u64(buf, std::bit_cast<uint64_t>(v));
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > buf.size()) throw ChecksumError("checkpoint truncated");
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string bytes(size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace ckpt_detail

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
    return {{"d_model", c.d_model},       {"n_layers", c.n_layers},
            {"n_heads", c.n_heads},       {"vocab_size", c.vocab_size},
            {"image_side", c.image_side}, {"channels", c.channels},
            {"patch_size", c.patch_size}, {"max_seq_len", c.max_seq_len},
            {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.d_model = j.at("d_model").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.image_side = j.at("image_side").get<int>();
    c.channels = j.at("channels").get<int>();
    c.patch_size = j.at("patch_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.seed = j.at("seed").get<uint64_t>();
    return c;
}

inline nlohmann::json train_config_to_json(const TrainConfig& t) {
    return {{"learning_rate", t.learning_rate},
            {"beta1", t.beta1},
            {"beta2", t.beta2},
            {"eps_opt", t.eps_opt},
            {"weight_decay", t.weight_decay},
            {"batch_size", t.batch_size},
            {"max_steps", t.max_steps},
            {"seed", t.seed},
            {"lambda_ans", t.lambda_ans},
            {"lambda_final", t.lambda_final},
            {"augmentation_fraction", t.augmentation_fraction},
            {"ablation_mode", std::string(ablation_mode_name(t.ablation_mode))},
            {"clip_norm", t.clip_norm},
            {"strict_conditioning", t.strict_conditioning},
            {"eval_every", t.eval_every},
            {"stop_token_acc", t.stop_token_acc}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig t;
    t.learning_rate = j.at("learning_rate").get<double>();
    t.beta1 = j.at("beta1").get<double>();
    t.beta2 = j.at("beta2").get<double>();
    t.eps_opt = j.at("eps_opt").get<double>();
    t.weight_decay = j.at("weight_decay").get<double>();
    t.batch_size = j.at("batch_size").get<int>();
    t.max_steps = j.at("max_steps").get<int>();
    t.seed = j.at("seed").get<uint64_t>();
    t.lambda_ans = j.at("lambda_ans").get<double>();
    t.lambda_final = j.at("lambda_final").get<double>();
    t.augmentation_fraction = j.at("augmentation_fraction").get<double>();
    t.ablation_mode = ablation_mode_from_name(j.at("ablation_mode").get<std::string>());
    t.clip_norm = j.at("clip_norm").get<double>();
    t.strict_conditioning = j.at("strict_conditioning").get<bool>();
    t.eval_every = j.at("eval_every").get<int>();
    t.stop_token_acc = j.at("stop_token_acc").get<double>();
    return t;
}

struct StepMetrics {
    int step = 0;
    double l_sub_q = 0.0;
    double l_sub_ans = 0.0;
    double l_final = 0.0;
    double total = 0.0;
    double token_acc = 0.0;
    double wallclock_ms = 0.0;
};

inline nlohmann::json step_metrics_to_json(const StepMetrics& m) {
    return {{"step", m.step},         {"l_sub_q", m.l_sub_q},
            {"l_sub_ans", m.l_sub_ans}, {"l_final", m.l_final},
            {"total", m.total},       {"token_acc", m.token_acc},
            {"wallclock_ms", m.wallclock_ms}};
}

struct Checkpoint {
    ModelConfig model_config;
    TrainConfig train_config;
    long step = 0;
    ModelParams params;
    OptimizerState opt_state;
    StepMetrics last_metrics;
};

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    using namespace ckpt_detail;
    std::string buf;
    buf += "SQCL";
    put_u32(buf, 1);  // format version

    nlohmann::json header = {
        {"model_config", model_config_to_json(ckpt.model_config)},
        {"train_config", train_config_to_json(ckpt.train_config)},
        {"step", ckpt.step},
        {"metrics", step_metrics_to_json(ckpt.last_metrics)}};
    const std::string header_text = header.dump();
    put_u64(buf, header_text.size());
    buf += header_text;

    put_u64(buf, ckpt.params.by_path.size());
    for (const auto& [p, t] : ckpt.params.by_path) {
        put_u32(buf, static_cast<uint32_t>(p.size()));
        buf += p;
        put_u32(buf, static_cast<uint32_t>(t.shape().size()));
        for (int d : t.shape()) put_u64(buf, static_cast<uint64_t>(d));
        put_u64(buf, t.size());
        for (double x : t.values()) put_f64(buf, x);
    }

    put_u64(buf, static_cast<uint64_t>(ckpt.opt_state.step));
    for (const auto& [p, t] : ckpt.params.by_path) {
        for (double x : ckpt.opt_state.first_moment.at(p)) put_f64(buf, x);
        for (double x : ckpt.opt_state.second_moment.at(p)) put_f64(buf, x);
    }

    put_u32(buf, crc32(reinterpret_cast<const unsigned char*>(buf.data()), buf.size()));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot open checkpoint for writing: " + path);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw ValidationError("checkpoint write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    using namespace ckpt_detail;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ChecksumError("cannot open checkpoint: " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 12 || buf.compare(0, 4, "SQCL") != 0)
        throw ChecksumError("not a checkpoint file: " + path);
    const uint32_t stored = [&] {
        Reader tail{buf, buf.size() - 4};
        return tail.u32();
    }();
    const uint32_t actual =
        crc32(reinterpret_cast<const unsigned char*>(buf.data()), buf.size() - 4);
    if (stored != actual) throw ChecksumError("checkpoint CRC mismatch: " + path);

    Reader r{buf, 4};
    if (r.u32() != 1) throw ChecksumError("unsupported checkpoint version");
    const auto header = nlohmann::json::parse(r.bytes(r.u64()));

    Checkpoint ckpt;
    ckpt.model_config = model_config_from_json(header.at("model_config"));
    ckpt.train_config = train_config_from_json(header.at("train_config"));
    ckpt.step = header.at("step").get<long>();
    const auto& jm = header.at("metrics");
    ckpt.last_metrics = {jm.at("step").get<int>(),      jm.at("l_sub_q").get<double>(),
                         jm.at("l_sub_ans").get<double>(), jm.at("l_final").get<double>(),
                         jm.at("total").get<double>(),  jm.at("token_acc").get<double>(),
                         jm.at("wallclock_ms").get<double>()};

    ckpt.params.config = ckpt.model_config;
    const uint64_t n_params = r.u64();
    for (uint64_t i = 0; i < n_params; ++i) {
        const std::string p = r.bytes(r.u32());
        Shape shape(r.u32());
        for (auto& d : shape) d = static_cast<int>(r.u64());
        const uint64_t count = r.u64();
        std::vector<double> values(count);
        for (auto& x : values) x = r.f64();
        ckpt.params.by_path.emplace(p, Tensor::param(shape, std::move(values)));
    }

    ckpt.opt_state.step = static_cast<long>(r.u64());
    for (const auto& [p, t] : ckpt.params.by_path) {
        std::vector<double> m(t.size()), v(t.size());
        for (auto& x : m) x = r.f64();
        for (auto& x : v) x = r.f64();
        ckpt.opt_state.first_moment.emplace(p, std::move(m));
        ckpt.opt_state.second_moment.emplace(p, std::move(v));
    }
    return ckpt;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct PreparedExample {
    SequenceLayout layout;
    std::vector<int> input;
    const Image* image = nullptr;
    Tensor strict_bias;  // defined only in strict mode
};

// Applies the ablation mode and augmentation fraction to every example's
// layout up front. Chain inclusion is a pure function of (seed, example id).
inline std::vector<PreparedExample> prepare_examples(const Dataset& dataset,
                                                     const TrainConfig& tc,
                                                     const ModelConfig& mc) {
    const auto& vocab = Vocabulary::standard();
    std::vector<PreparedExample> out;
    out.reserve(dataset.size());
    for (const auto& ex : dataset.examples) {
        bool include_chain = tc.ablation_mode != AblationMode::no_chain_augmentation;
        if (include_chain && tc.augmentation_fraction < 1.0) {
            Rng rng(derive_seed(tc.seed, "augment:" + ex.id));
            include_chain = rng.next_double() < tc.augmentation_fraction;
        }
        PreparedExample p;
        p.layout = build_training_sequence(ex, vocab, include_chain, mc.max_text_len());
        p.input = p.layout.input_tokens();
        p.image = &ex.image;
        if (tc.strict_conditioning)
            p.strict_bias = strict_attn_bias(p.layout, mc.num_patches());
        out.push_back(std::move(p));
    }
    return out;
}

inline double corpus_token_accuracy(const ModelParams& params,
                                    const std::vector<PreparedExample>& prepared) {
    long correct = 0, total = 0;
    for (const auto& p : prepared) {
        Tensor logits = forward(params, *p.image, p.input,
                                p.strict_bias.defined() ? &p.strict_bias : nullptr);
        const auto [c, t] = supervised_token_counts(logits, p.layout);
        correct += c;
        total += t;
    }
    return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

struct TrainHooks {
    std::function<void(const StepMetrics&)> on_step;
    // Periodic checkpoint callback; also fired on the final step when set.
    int checkpoint_every = 0;
    std::function<void(int step, const ModelParams&, const OptimizerState&,
                       const StepMetrics&)>
        on_checkpoint;
};

struct TrainResult {
    ModelParams params;
    OptimizerState opt_state;
    std::vector<StepMetrics> metrics;
    int steps_run = 0;
    bool stopped_early = false;
};

// Deterministic mini-batch training. Batch membership is a pure function of
// (seed, step), so a resumed run replays the identical trajectory.
inline TrainResult train(const TrainConfig& tc, const Dataset& dataset,
                         const ModelConfig& mc, const TrainHooks& hooks = {},
                         const Checkpoint* resume_from = nullptr) {
    tc.validate();
    mc.validate();
    if (dataset.examples.empty()) throw ConfigError("training dataset is empty");
    if (mc.vocab_size < Vocabulary::standard().size())
        throw ConfigError("model vocab_size smaller than the task vocabulary");

    const auto prepared = prepare_examples(dataset, tc, mc);
    const size_t n = prepared.size();

    TrainResult result;
    int start_step = 1;
    if (resume_from != nullptr) {
        result.params = resume_from->params.clone();
        result.opt_state = resume_from->opt_state;
        start_step = static_cast<int>(resume_from->step) + 1;
    } else {
        result.params = init_params(mc);
        result.opt_state = OptimizerState::init(result.params);
    }

    const LossWeights weights = tc.effective_weights();
    const double lambda_sub_q = tc.effective_lambda_sub_q();
    const double inv_batch = 1.0 / tc.batch_size;

    for (int step = start_step; step <= tc.max_steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        for (auto& [path, t] : result.params.by_path) t.zero_grad();

        StepMetrics metrics;
        metrics.step = step;
        long tok_correct = 0, tok_total = 0;
        for (int j = 0; j < tc.batch_size; ++j) {
            Rng pick(derive_seed(tc.seed, "batch",
                                 (static_cast<uint64_t>(step) << 20) |
                                     static_cast<uint64_t>(j)));
            const auto& ex = prepared[pick.next_below(n)];
            Tensor logits = forward(result.params, *ex.image, ex.input,
                                    ex.strict_bias.defined() ? &ex.strict_bias : nullptr);
            auto loss = total_loss(logits, ex.layout, weights, lambda_sub_q);
            backward(scale(loss.total, inv_batch));
            metrics.l_sub_q += loss.breakdown.l_sub_q * inv_batch;
            metrics.l_sub_ans += loss.breakdown.l_sub_ans * inv_batch;
            metrics.l_final += loss.breakdown.l_final * inv_batch;
            metrics.total += loss.breakdown.total * inv_batch;
            const auto [c, t] = supervised_token_counts(logits, ex.layout);
            tok_correct += c;
            tok_total += t;
        }
        metrics.token_acc =
            tok_total == 0 ? 0.0 : static_cast<double>(tok_correct) / tok_total;

        clip_gradients(result.params, tc.clip_norm);
        adamw_step(result.params, result.opt_state, tc);

        metrics.wallclock_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                .count();
        result.metrics.push_back(metrics);
        result.steps_run = step;
        if (hooks.on_step) hooks.on_step(metrics);
        if (hooks.on_checkpoint && hooks.checkpoint_every > 0 &&
            (step % hooks.checkpoint_every == 0 || step == tc.max_steps))
            hooks.on_checkpoint(step, result.params, result.opt_state, metrics);

        if (tc.eval_every > 0 && step % tc.eval_every == 0) {
            if (corpus_token_accuracy(result.params, prepared) >= tc.stop_token_acc &&
                tc.stop_token_acc > 0) {
                result.stopped_early = true;
                break;
            }
        }
    }
    return result;
}

inline void write_metrics_jsonl(const std::vector<StepMetrics>& metrics,
                                const std::string& path, bool append = false) {
    std::ofstream out(path, std::ios::binary | (append ? std::ios::app : std::ios::trunc));
    if (!out) throw ValidationError("cannot open metrics file: " + path);
    for (const auto& m : metrics) out << step_metrics_to_json(m).dump() << '\n';
}

}  // namespace selfq
