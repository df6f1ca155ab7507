#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "selfq/errors.hpp"
#include "selfq/model.hpp"
#include "selfq/taskgen.hpp"
#include "selfq/tensor.hpp"
#include "selfq/vocab.hpp"

namespace selfq {

enum class SegmentKind : uint8_t { context, sub_question, sub_answer, final_answer };

struct SegmentLabel {
    SegmentKind kind = SegmentKind::context;
    int step = 0;  // 1-based chain step for sub_question/sub_answer, else 0

    bool operator==(const SegmentLabel&) const = default;
};

// One training stream: token ids plus per-position segment labels. Position t
// of the model input (the stream minus its last token) is supervised to
// predict token_ids[t + 1]; a prediction belongs to the loss term of its
// target token's segment.
struct SequenceLayout {
    std::string example_id;
    std::vector<int> token_ids;
    std::vector<SegmentLabel> labels;
    int num_steps = 0;

    int stream_len() const { return static_cast<int>(token_ids.size()); }
    int input_len() const { return stream_len() - 1; }

    std::vector<int> input_tokens() const {
        return {token_ids.begin(), token_ids.end() - 1};
    }
    std::vector<int> targets() const {
        return {token_ids.begin() + 1, token_ids.end()};
    }

    // Indicator weights over input positions for one loss term. step == 0
    // selects every step of that kind.
    std::vector<double> term_weights(SegmentKind kind, int step = 0) const {
        std::vector<double> w(static_cast<size_t>(input_len()), 0.0);
        for (int p = 0; p < input_len(); ++p) {
            const auto& label = labels[static_cast<size_t>(p) + 1];
            if (label.kind == kind && (step == 0 || label.step == step)) w[static_cast<size_t>(p)] = 1.0;
        }
        return w;
    }

    std::vector<double> supervised_weights() const {
        std::vector<double> w(static_cast<size_t>(input_len()), 0.0);
        for (int p = 0; p < input_len(); ++p)
            if (labels[static_cast<size_t>(p) + 1].kind != SegmentKind::context)
                w[static_cast<size_t>(p)] = 1.0;
        return w;
    }
};

// Teacher-forced stream:
//   BOS Q | for each step i: SUBQ q_i | SUBA a_i | FINAL A EOS
// with gold sub-answers in the stream. include_chain=false produces the
// unaugmented K=0 layout [BOS Q FINAL A EOS].
inline SequenceLayout build_training_sequence(const AugmentedExample& ex,
                                              const Vocabulary& vocab,
                                              bool include_chain = true,
                                              int max_stream_len = 0) {
    SequenceLayout layout;
    layout.example_id = ex.id;

    auto push = [&](int token, SegmentKind kind, int step) {
        layout.token_ids.push_back(token);
        layout.labels.push_back({kind, step});
    };

    push(Vocabulary::kBos, SegmentKind::context, 0);
    for (const auto& w : ex.question) push(vocab.id(w), SegmentKind::context, 0);

    if (include_chain) {
        layout.num_steps = ex.chain.depth();
        for (int i = 0; i < layout.num_steps; ++i) {
            const auto& step = ex.chain.steps[static_cast<size_t>(i)];
            push(Vocabulary::kSubq, SegmentKind::sub_question, i + 1);
            for (const auto& w : step.question)
                push(vocab.id(w), SegmentKind::sub_question, i + 1);
            push(Vocabulary::kSuba, SegmentKind::sub_answer, i + 1);
            for (const auto& w : step.answer)
                push(vocab.id(w), SegmentKind::sub_answer, i + 1);
        }
    }

    push(Vocabulary::kFinal, SegmentKind::final_answer, 0);
    for (const auto& w : ex.answer) push(vocab.id(w), SegmentKind::final_answer, 0);
    push(Vocabulary::kEos, SegmentKind::final_answer, 0);

    if (max_stream_len > 0 && layout.stream_len() > max_stream_len)
        throw LengthError("example " + ex.id + ": stream of " +
                          std::to_string(layout.stream_len()) +
                          " tokens exceeds budget " + std::to_string(max_stream_len));
    return layout;
}

// ---------------------------------------------------------------------------
// Loss terms
// ---------------------------------------------------------------------------

struct LossWeights {
    double lambda_ans = 0.8;
    double lambda_final = 1.0;
};

struct LossBreakdown {
    double l_sub_q = 0.0;
    double l_sub_ans = 0.0;
    double l_final = 0.0;
    double total = 0.0;
    std::vector<std::pair<double, double>> per_step;  // (l_sub_q_i, l_sub_ans_i)
};

struct TermLoss {
    Tensor value;                  // scalar; exact 0 with no graph when K == 0
    std::vector<Tensor> per_step;  // per-step token-sum losses
};

namespace objective_detail {

inline void check_logits(const Tensor& logits, const SequenceLayout& layout) {
    if (logits.rank() != 2 || logits.dim(0) != layout.input_len())
        throw ShapeError("logits rows must equal the layout's input length");
}

inline TermLoss per_step_mean_loss(const Tensor& logits, const SequenceLayout& layout,
                                   SegmentKind kind) {
    check_logits(logits, layout);
    TermLoss out;
    if (layout.num_steps == 0) {
        out.value = Tensor::scalar(0.0);
        return out;
    }
    const auto targets = layout.targets();
    Tensor acc;
    for (int i = 1; i <= layout.num_steps; ++i) {
        Tensor step = cross_entropy(logits, targets, layout.term_weights(kind, i));
        out.per_step.push_back(step);
        acc = acc.defined() ? add(acc, step) : step;
    }
    out.value = scale(acc, 1.0 / layout.num_steps);
    return out;
}

}  // namespace objective_detail

// Eq-style sub-question term: token-sum per step, mean over the K steps.
// K == 0 contributes exactly zero with zero gradient.
inline TermLoss sub_question_loss(const Tensor& logits, const SequenceLayout& layout) {
    return objective_detail::per_step_mean_loss(logits, layout, SegmentKind::sub_question);
}

inline TermLoss sub_answer_loss(const Tensor& logits, const SequenceLayout& layout) {
    return objective_detail::per_step_mean_loss(logits, layout, SegmentKind::sub_answer);
}

// Token-sum negative log-likelihood over the final-answer segment (marker,
// answer tokens and EOS).
inline Tensor final_answer_loss(const Tensor& logits, const SequenceLayout& layout) {
    objective_detail::check_logits(logits, layout);
    const auto weights = layout.term_weights(SegmentKind::final_answer);
    bool any = false;
    for (double w : weights) any = any || w != 0.0;
    if (!any)
        throw LayoutError("layout " + layout.example_id + " has no final segment");
    return cross_entropy(logits, layout.targets(), weights);
}

// Scalar combination: total = l_sub_q + lambda_ans * l_sub_ans +
// lambda_final * l_final. The sub-question weight is fixed at 1 unless a
// training variant turns the term off.
inline double combine_total(double l_sub_q, double l_sub_ans, double l_final,
                            const LossWeights& w, double lambda_sub_q = 1.0) {
    for (double x : {l_sub_q, l_sub_ans, l_final, w.lambda_ans, w.lambda_final,
                     lambda_sub_q})
        if (!std::isfinite(x)) throw NumericError("total loss over non-finite input");
    return lambda_sub_q * l_sub_q + w.lambda_ans * l_sub_ans + w.lambda_final * l_final;
}

struct ExampleLoss {
    Tensor total;
    Tensor l_sub_q;
    Tensor l_sub_ans;
    Tensor l_final;
    LossBreakdown breakdown;
};

inline ExampleLoss total_loss(const Tensor& logits, const SequenceLayout& layout,
                              const LossWeights& weights, double lambda_sub_q = 1.0) {
    ExampleLoss out;
    TermLoss subq = sub_question_loss(logits, layout);
    TermLoss suba = sub_answer_loss(logits, layout);
    out.l_sub_q = subq.value;
    out.l_sub_ans = suba.value;
    out.l_final = final_answer_loss(logits, layout);
    out.total = add(add(scale(out.l_sub_q, lambda_sub_q),
                        scale(out.l_sub_ans, weights.lambda_ans)),
                    scale(out.l_final, weights.lambda_final));

    out.breakdown.l_sub_q = out.l_sub_q.item();
    out.breakdown.l_sub_ans = out.l_sub_ans.item();
    out.breakdown.l_final = out.l_final.item();
    out.breakdown.total = combine_total(out.breakdown.l_sub_q, out.breakdown.l_sub_ans,
                                        out.breakdown.l_final, weights, lambda_sub_q);
    for (int i = 0; i < layout.num_steps; ++i)
        out.breakdown.per_step.emplace_back(subq.per_step[static_cast<size_t>(i)].item(),
                                            suba.per_step[static_cast<size_t>(i)].item());
    return out;
}

// Supervised-token accuracy of greedy predictions over one layout.
inline std::pair<long, long> supervised_token_counts(const Tensor& logits,
                                                     const SequenceLayout& layout) {
    objective_detail::check_logits(logits, layout);
    const auto targets = layout.targets();
    const auto weights = layout.supervised_weights();
    const int v = logits.dim(1);
    long correct = 0, total = 0;
    for (int t = 0; t < layout.input_len(); ++t) {
        if (weights[static_cast<size_t>(t)] == 0.0) continue;
        const double* row = logits.values().data() + static_cast<size_t>(t) * v;
        int arg = 0;
        for (int j = 1; j < v; ++j)
            if (row[j] > row[arg]) arg = j;
        ++total;
        if (arg == targets[static_cast<size_t>(t)]) ++correct;
    }
    return {correct, total};
}

// ---------------------------------------------------------------------------
// Strict per-segment conditioning (optional training mode)
// ---------------------------------------------------------------------------

// Attention bias restricting each segment to its own conditioning set:
// sub-question i sees image + question + itself; sub-answer i sees image +
// sub-question i + itself; the final answer sees image + question +
// sub-answers + itself. Everything stays causal. Information can still flow
// transitively through earlier hidden states within a step, which is as close
// as a single shared stream gets to the per-term conditioning.
inline Tensor strict_attn_bias(const SequenceLayout& layout, int num_patches) {
    const int t_len = layout.input_len();
    const int s = num_patches + t_len;
    std::vector<double> bias(static_cast<size_t>(s) * s, kAttnBan);
    auto allow = [&](int q, int k) { bias[static_cast<size_t>(q) * s + k] = 0.0; };

    // Visual block: causal within the prefix; every text query may read it.
    for (int q = 0; q < num_patches; ++q)
        for (int k = 0; k <= q; ++k) allow(q, k);

    for (int qt = 0; qt < t_len; ++qt) {
        const int q = num_patches + qt;
        for (int k = 0; k < num_patches; ++k) allow(q, k);
        const auto& ql = layout.labels[static_cast<size_t>(qt)];
        for (int kt = 0; kt <= qt; ++kt) {
            const auto& kl = layout.labels[static_cast<size_t>(kt)];
            bool ok = false;
            switch (ql.kind) {
                case SegmentKind::context:
                    ok = kl.kind == SegmentKind::context;
                    break;
                case SegmentKind::sub_question:
                    ok = kl.kind == SegmentKind::context ||
                         (kl.kind == SegmentKind::sub_question && kl.step == ql.step);
                    break;
                case SegmentKind::sub_answer:
                    ok = (kl.kind == SegmentKind::sub_question && kl.step == ql.step) ||
                         (kl.kind == SegmentKind::sub_answer && kl.step == ql.step);
                    break;
                case SegmentKind::final_answer:
                    ok = kl.kind == SegmentKind::context ||
                         kl.kind == SegmentKind::sub_answer ||
                         kl.kind == SegmentKind::final_answer;
                    break;
            }
            if (ok) allow(q, num_patches + kt);
        }
    }
    return Tensor::constant({s, s}, std::move(bias));
}

}  // namespace selfq
