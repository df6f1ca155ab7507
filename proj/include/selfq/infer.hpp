#pragma once

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "selfq/errors.hpp"
#include "selfq/model.hpp"
#include "selfq/vocab.hpp"

namespace selfq {

// Incremental greedy decoding state. Computes the same causal forward pass
// as forward(), one position at a time, keeping per-layer key/value caches so
// each new token costs O(layers * d^2) instead of a full re-forward. The
// accumulation order mirrors the graph ops (matmul sum first, then bias, then
// positions), so logits agree with forward() to the last bits; tests pin the
// parity at 1e-12.
class DecodeContext {
public:
    DecodeContext(const ModelParams& params, const Image& image)
        : params_(&params), config_(params.config) {
        keys_.resize(static_cast<size_t>(config_.n_layers));
        vals_.resize(static_cast<size_t>(config_.n_layers));
        const auto patches = patchify(config_, image);
        const auto& w = params.at("patch_embed.weight").values();
        const auto& b = params.at("patch_embed.bias").values();
        const auto& pos = params.at("pos_visual").values();
        const int d = config_.d_model;
        const int pd = config_.patch_dim();
        for (int p = 0; p < config_.num_patches(); ++p) {
            std::vector<double> x(static_cast<size_t>(d), 0.0);
            const double* patch = patches.values().data() + static_cast<size_t>(p) * pd;
            for (int k = 0; k < pd; ++k) {
                const double a = patch[k];
                const double* wrow = w.data() + static_cast<size_t>(k) * d;
                for (int j = 0; j < d; ++j) x[static_cast<size_t>(j)] += a * wrow[j];
            }
            for (int j = 0; j < d; ++j) x[static_cast<size_t>(j)] += b[static_cast<size_t>(j)];
            for (int j = 0; j < d; ++j)
                x[static_cast<size_t>(j)] += pos[static_cast<size_t>(p) * d + j];
            advance(std::move(x));
        }
    }

    int positions() const { return positions_; }
    int text_positions() const { return positions_ - config_.num_patches(); }
    int capacity_left() const { return config_.max_seq_len - positions_; }

    void feed_token(int id) {
        if (id < 0 || id >= config_.vocab_size)
            throw IndexError("token id " + std::to_string(id) + " outside vocabulary");
        if (capacity_left() <= 0)
            throw LengthError("decode context is full at " + std::to_string(positions_) +
                              " positions");
        const int d = config_.d_model;
        const auto& emb = params_->at("token_embed").values();
        const auto& pos = params_->at("pos_text").values();
        std::vector<double> x(static_cast<size_t>(d));
        const size_t tpos = static_cast<size_t>(text_positions());
        for (int j = 0; j < d; ++j)
            x[static_cast<size_t>(j)] =
                emb[static_cast<size_t>(id) * d + j] + pos[tpos * d + j];
        advance(std::move(x));
    }

    // Logits for the most recently fed position.
    std::vector<double> logits() const {
        if (text_positions() == 0)
            throw ShapeError("no text position has been fed yet");
        const int d = config_.d_model;
        const int v = config_.vocab_size;
        auto h = layer_norm_vec(last_hidden_, params_->at("final_norm.gain").values(),
                                params_->at("final_norm.bias").values());
        std::vector<double> out(static_cast<size_t>(v), 0.0);
        vec_matmul_acc(out, h, params_->at("out_proj.weight").values(), d, v);
        add_in_place(out, params_->at("out_proj.bias").values());
        return out;
    }

    // Greedy choice; ties break toward the lowest token id.
    int top_token() const {
        const auto l = logits();
        int arg = 0;
        for (int j = 1; j < static_cast<int>(l.size()); ++j)
            if (l[static_cast<size_t>(j)] > l[static_cast<size_t>(arg)]) arg = j;
        return arg;
    }

private:
    static std::vector<double> layer_norm_vec(const std::vector<double>& x,
                                              const std::vector<double>& gain,
                                              const std::vector<double>& bias) {
        const int d = static_cast<int>(x.size());
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += x[static_cast<size_t>(j)];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double diff = x[static_cast<size_t>(j)] - mean;
            var += diff * diff;
        }
        var /= d;
        const double inv = 1.0 / std::sqrt(var + 1e-5);
        std::vector<double> out(static_cast<size_t>(d));
        for (int j = 0; j < d; ++j)
            out[static_cast<size_t>(j)] =
                gain[static_cast<size_t>(j)] * ((x[static_cast<size_t>(j)] - mean) * inv) +
                bias[static_cast<size_t>(j)];
        return out;
    }

    // out[j] += x . W[:, j] with W stored row-major [d_in, d_out].
    static void vec_matmul_acc(std::vector<double>& out, const std::vector<double>& x,
                               const std::vector<double>& w, int d_in, int d_out) {
        for (int k = 0; k < d_in; ++k) {
            const double a = x[static_cast<size_t>(k)];
            const double* wrow = w.data() + static_cast<size_t>(k) * d_out;
            for (int j = 0; j < d_out; ++j) out[static_cast<size_t>(j)] += a * wrow[j];
        }
    }

    static void add_in_place(std::vector<double>& out, const std::vector<double>& b) {
        for (size_t j = 0; j < out.size(); ++j) out[j] += b[j];
    }

    void advance(std::vector<double> x) {
        if (positions_ >= config_.max_seq_len)
            throw LengthError("decode context exceeded max_seq_len");
        const int d = config_.d_model;
        const int heads = config_.n_heads;
        const int hd = config_.head_dim();
        const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));

        for (int layer = 0; layer < config_.n_layers; ++layer) {
            const std::string p = "layers." + std::to_string(layer) + ".";
            auto h = layer_norm_vec(x, params_->at(p + "ln1.gain").values(),
                                    params_->at(p + "ln1.bias").values());
            std::vector<double> q(static_cast<size_t>(d), 0.0);
            std::vector<double> k(static_cast<size_t>(d), 0.0);
            std::vector<double> v(static_cast<size_t>(d), 0.0);
            vec_matmul_acc(q, h, params_->at(p + "attn.q.weight").values(), d, d);
            add_in_place(q, params_->at(p + "attn.q.bias").values());
            vec_matmul_acc(k, h, params_->at(p + "attn.k.weight").values(), d, d);
            add_in_place(k, params_->at(p + "attn.k.bias").values());
            vec_matmul_acc(v, h, params_->at(p + "attn.v.weight").values(), d, d);
            add_in_place(v, params_->at(p + "attn.v.bias").values());

            auto& kc = keys_[static_cast<size_t>(layer)];
            auto& vc = vals_[static_cast<size_t>(layer)];
            kc.insert(kc.end(), k.begin(), k.end());
            vc.insert(vc.end(), v.begin(), v.end());
            const int t_len = positions_ + 1;

            std::vector<double> merged(static_cast<size_t>(d), 0.0);
            std::vector<double> scores(static_cast<size_t>(t_len));
            for (int head = 0; head < heads; ++head) {
                const int off = head * hd;
                double mx = -std::numeric_limits<double>::infinity();
                for (int t = 0; t < t_len; ++t) {
                    double s = 0.0;
                    const double* krow = kc.data() + static_cast<size_t>(t) * d + off;
                    for (int j = 0; j < hd; ++j)
                        s += q[static_cast<size_t>(off + j)] * krow[j];
                    s *= att_scale;
                    scores[static_cast<size_t>(t)] = s;
                    mx = std::max(mx, s);
                }
                double sum = 0.0;
                for (int t = 0; t < t_len; ++t) {
                    scores[static_cast<size_t>(t)] =
                        std::exp(scores[static_cast<size_t>(t)] - mx);
                    sum += scores[static_cast<size_t>(t)];
                }
                const double inv = 1.0 / sum;
                for (int t = 0; t < t_len; ++t) {
                    const double w = scores[static_cast<size_t>(t)] * inv;
                    const double* vrow = vc.data() + static_cast<size_t>(t) * d + off;
                    for (int j = 0; j < hd; ++j)
                        merged[static_cast<size_t>(off + j)] += w * vrow[j];
                }
            }
            std::vector<double> attn_out(static_cast<size_t>(d), 0.0);
            vec_matmul_acc(attn_out, merged, params_->at(p + "attn.o.weight").values(), d, d);
            add_in_place(attn_out, params_->at(p + "attn.o.bias").values());
            add_in_place(x, attn_out);

            auto h2 = layer_norm_vec(x, params_->at(p + "ln2.gain").values(),
                                     params_->at(p + "ln2.bias").values());
            std::vector<double> inner(static_cast<size_t>(4 * d), 0.0);
            vec_matmul_acc(inner, h2, params_->at(p + "mlp.w1.weight").values(), d, 4 * d);
            add_in_place(inner, params_->at(p + "mlp.w1.bias").values());
            for (auto& u : inner) {
                const double t = std::tanh(0.7978845608028654 * (u + 0.044715 * u * u * u));
                u = 0.5 * u * (1.0 + t);
            }
            std::vector<double> mlp_out(static_cast<size_t>(d), 0.0);
            vec_matmul_acc(mlp_out, inner, params_->at(p + "mlp.w2.weight").values(), 4 * d, d);
            add_in_place(mlp_out, params_->at(p + "mlp.w2.bias").values());
            add_in_place(x, mlp_out);
        }
        last_hidden_ = std::move(x);
        ++positions_;
    }

    const ModelParams* params_;
    ModelConfig config_;
    std::vector<std::vector<double>> keys_;  // per layer, flattened [pos][d]
    std::vector<std::vector<double>> vals_;
    std::vector<double> last_hidden_;
    int positions_ = 0;
};

// Greedy decoding: appends argmax tokens until a stop token is produced or
// max_new tokens have been generated. The stop token, when reached, is the
// last element of the returned sequence.
inline std::vector<int> greedy_decode(const ModelParams& params, const Image& image,
                                      const std::vector<int>& prefix_tokens,
                                      const std::set<int>& stop_tokens, int max_new) {
    if (prefix_tokens.empty()) throw ShapeError("greedy_decode: empty prefix");
    DecodeContext ctx(params, image);
    if (static_cast<int>(prefix_tokens.size()) > ctx.capacity_left())
        throw LengthError("prefix does not fit in the context window");
    for (int id : prefix_tokens) ctx.feed_token(id);

    std::vector<int> out;
    for (int i = 0; i < max_new; ++i) {
        const int tok = ctx.top_token();
        out.push_back(tok);
        if (stop_tokens.count(tok)) break;
        if (i + 1 < max_new) ctx.feed_token(tok);
    }
    return out;
}

struct InferenceTrace {
    std::vector<std::vector<int>> sub_questions;  // marker-free token ids
    std::vector<std::vector<int>> sub_answers;
    std::vector<int> final_answer;  // marker-free
    bool well_formed = false;
    int steps_taken = 0;
};

namespace infer_detail {

inline constexpr int kSegmentBudget = 16;
inline constexpr int kRouterBudget = 4;
inline constexpr int kAnswerBudget = 12;

// Terminator codes beyond token ids.
inline constexpr int kTermBudget = -1;
inline constexpr int kTermOverflow = -2;

// Decodes until one of the marker stops appears, feeding every generated
// token (markers included) into the context. Returns the content tokens and
// the terminating marker (or a negative code).
inline std::pair<std::vector<int>, int> decode_segment(DecodeContext& ctx,
                                                       const std::set<int>& stops,
                                                       int budget) {
    std::vector<int> content;
    for (int i = 0; i < budget; ++i) {
        if (ctx.capacity_left() <= 0) return {std::move(content), kTermOverflow};
        const int tok = ctx.top_token();
        ctx.feed_token(tok);
        if (stops.count(tok)) return {std::move(content), tok};
        content.push_back(tok);
    }
    return {std::move(content), kTermBudget};
}

}  // namespace infer_detail

// Staged self-questioning inference: builds [BOS, Q], lets the model emit
// interleaved sub-question / sub-answer segments bounded by the structural
// markers, then decodes the final answer conditioned on everything generated
// so far. Malformed generations degrade the trace, never throw.
inline InferenceTrace self_question_infer(const ModelParams& params, const Image& image,
                                          const std::vector<int>& question_tokens,
                                          int k_max = 4) {
    using namespace infer_detail;
    InferenceTrace trace;
    const std::set<int> all_markers = {Vocabulary::kSubq, Vocabulary::kSuba,
                                       Vocabulary::kFinal, Vocabulary::kEos};

    DecodeContext ctx(params, image);
    bool ok = true;
    try {
        if (2 + static_cast<int>(question_tokens.size()) > ctx.capacity_left())
            throw LengthError("question does not fit");
        ctx.feed_token(Vocabulary::kBos);
        for (int id : question_tokens) ctx.feed_token(id);

        auto [junk, term] =
            decode_segment(ctx, {Vocabulary::kSubq, Vocabulary::kFinal}, kRouterBudget);
        if (!junk.empty() || term < 0) ok = false;

        while (term == Vocabulary::kSubq) {
            if (trace.steps_taken == k_max) {
                // Step budget exhausted: stop questioning and force the answer.
                ok = false;
                term = kTermBudget;
                break;
            }
            auto [q_toks, q_term] = decode_segment(ctx, all_markers, kSegmentBudget);
            if (q_term != Vocabulary::kSuba) {
                ok = false;
                term = q_term;
                break;
            }
            auto [a_toks, a_term] = decode_segment(ctx, all_markers, kSegmentBudget);
            trace.sub_questions.push_back(std::move(q_toks));
            trace.sub_answers.push_back(std::move(a_toks));
            trace.steps_taken += 1;
            term = a_term;
            if (term != Vocabulary::kSubq && term != Vocabulary::kFinal) ok = false;
            if (term != Vocabulary::kSubq) break;
        }

        if (term != Vocabulary::kFinal) {
            // The model never reached FINAL on its own; force the marker so
            // evaluation still gets an answer attempt.
            ok = false;
            if (ctx.capacity_left() <= 0) {
                trace.well_formed = false;
                return trace;
            }
            ctx.feed_token(Vocabulary::kFinal);
        }
        auto [answer, a_term] = decode_segment(ctx, all_markers, kAnswerBudget);
        trace.final_answer = std::move(answer);
        if (a_term != Vocabulary::kEos) ok = false;
    } catch (const LengthError&) {
        trace.well_formed = false;
        return trace;
    }
    trace.well_formed = ok;
    return trace;
}

// Baseline decoder: force the FINAL marker immediately after the question and
// decode the answer, chain-free. The result carries answer tokens plus EOS
// when one was produced; structural SUBQ/SUBA markers never appear.
inline std::vector<int> direct_infer(const ModelParams& params, const Image& image,
                                     const std::vector<int>& question_tokens) {
    using namespace infer_detail;
    DecodeContext ctx(params, image);
    if (2 + static_cast<int>(question_tokens.size()) > ctx.capacity_left())
        throw LengthError("question does not fit in the context window");
    ctx.feed_token(Vocabulary::kBos);
    for (int id : question_tokens) ctx.feed_token(id);
    ctx.feed_token(Vocabulary::kFinal);
    auto [answer, term] = decode_segment(
        ctx, {Vocabulary::kEos, Vocabulary::kSubq, Vocabulary::kSuba, Vocabulary::kFinal},
        kAnswerBudget);
    if (term == Vocabulary::kEos) answer.push_back(Vocabulary::kEos);
    return answer;
}

}  // namespace selfq
