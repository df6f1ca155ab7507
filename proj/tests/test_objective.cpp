#include <catch2/catch.hpp>

#include <cmath>

#include "selfq/objective.hpp"

using namespace selfq;

namespace {

AugmentedExample spec_example_k1() {
    AugmentedExample ex;
    ex.id = "spec-k1";
    ex.scene.objects = {
        {ShapeKind::circle, ColorKind::red, SizeKind::large, 0, 0},
        {ShapeKind::square, ColorKind::blue, SizeKind::large, 1, 1},
        {ShapeKind::circle, ColorKind::blue, SizeKind::small, 2, 3},
    };
    ex.question = Vocabulary::split_words("how many blue shapes");
    ChainStep s1;
    s1.question = Vocabulary::split_words("which shapes are blue");
    s1.answer = Vocabulary::split_words("square circle");
    ex.chain.steps = {s1};
    ex.answer = {"2"};
    ex.depth = 1;
    ex.answer_type = AnswerType::number;
    ex.image = render_scene(ex.scene);
    return ex;
}

int count_labels(const SequenceLayout& layout, SegmentKind kind, int step = -1) {
    int n = 0;
    for (const auto& l : layout.labels)
        if (l.kind == kind && (step < 0 || l.step == step)) ++n;
    return n;
}

}  // namespace

TEST_CASE("training sequence layout matches the contract", "[objective]") {
    const auto& vocab = Vocabulary::standard();
    auto ex = spec_example_k1();
    auto layout = build_training_sequence(ex, vocab);

    const std::vector<std::string> expected = {
        "<bos>", "how", "many", "blue", "shapes",
        "<subq>", "which", "shapes", "are", "blue",
        "<suba>", "square", "circle",
        "<final>", "2", "<eos>"};
    REQUIRE(layout.stream_len() == static_cast<int>(expected.size()));
    for (size_t i = 0; i < expected.size(); ++i)
        CHECK(vocab.token(layout.token_ids[i]) == expected[i]);

    CHECK(count_labels(layout, SegmentKind::context) == 5);
    CHECK(count_labels(layout, SegmentKind::sub_question, 1) == 5);
    CHECK(count_labels(layout, SegmentKind::sub_answer, 1) == 3);
    CHECK(count_labels(layout, SegmentKind::final_answer) == 3);
    CHECK(layout.num_steps == 1);

    // K = 0: the unaugmented layout.
    auto bare = build_training_sequence(ex, vocab, /*include_chain=*/false);
    CHECK(bare.stream_len() == 1 + 4 + 3);
    CHECK(count_labels(bare, SegmentKind::sub_question) == 0);
    CHECK(count_labels(bare, SegmentKind::sub_answer) == 0);
    CHECK(bare.num_steps == 0);

    CHECK_THROWS_AS(build_training_sequence(ex, vocab, true, 8), LengthError);
}

TEST_CASE("segment labels partition generated layouts", "[objective]") {
    const auto& vocab = Vocabulary::standard();
    for (uint64_t seed = 0; seed < 50; ++seed) {
        for (int depth = 1; depth <= 4; ++depth) {
            auto ex = generate_example(seed, depth);
            auto layout = build_training_sequence(ex, vocab);

            // Counts over segments sum to the stream length.
            int total = 0;
            for (auto kind : {SegmentKind::context, SegmentKind::sub_question,
                              SegmentKind::sub_answer, SegmentKind::final_answer})
                total += count_labels(layout, kind);
            CHECK(total == layout.stream_len());

            // Context covers BOS + question only, and nothing after it.
            CHECK(count_labels(layout, SegmentKind::context) ==
                  1 + static_cast<int>(ex.question.size()));
            for (int p = 0; p < layout.stream_len(); ++p) {
                const bool in_prefix = p <= static_cast<int>(ex.question.size());
                CHECK((layout.labels[static_cast<size_t>(p)].kind == SegmentKind::context) == in_prefix);
            }

            // Every supervised input position belongs to exactly one term.
            auto wq = layout.term_weights(SegmentKind::sub_question);
            auto wa = layout.term_weights(SegmentKind::sub_answer);
            auto wf = layout.term_weights(SegmentKind::final_answer);
            auto ws = layout.supervised_weights();
            for (int p = 0; p < layout.input_len(); ++p) {
                const double sum = wq[static_cast<size_t>(p)] + wa[static_cast<size_t>(p)] +
                                   wf[static_cast<size_t>(p)];
                CHECK(sum == ws[static_cast<size_t>(p)]);
                CHECK(sum <= 1.0);
            }

            // SUBQ_i precedes SUBA_i; FINAL is the trailing block.
            for (int i = 1; i <= layout.num_steps; ++i) {
                int last_q = -1, first_a = layout.stream_len();
                for (int p = 0; p < layout.stream_len(); ++p) {
                    const auto& l = layout.labels[static_cast<size_t>(p)];
                    if (l.kind == SegmentKind::sub_question && l.step == i)
                        last_q = std::max(last_q, p);
                    if (l.kind == SegmentKind::sub_answer && l.step == i)
                        first_a = std::min(first_a, p);
                }
                CHECK(last_q < first_a);
            }
            int first_final = layout.stream_len();
            for (int p = 0; p < layout.stream_len(); ++p)
                if (layout.labels[static_cast<size_t>(p)].kind == SegmentKind::final_answer)
                    first_final = std::min(first_final, p);
            for (int p = first_final; p < layout.stream_len(); ++p)
                CHECK(layout.labels[static_cast<size_t>(p)].kind == SegmentKind::final_answer);
        }
    }
}

TEST_CASE("loss terms against uniform-logit closed forms", "[objective]") {
    const auto& vocab = Vocabulary::standard();
    const int v = vocab.size();
    const double ln_v = std::log(static_cast<double>(v));

    auto ex = spec_example_k1();
    auto layout = build_training_sequence(ex, vocab);
    Tensor logits = Tensor::zeros({layout.input_len(), v}, true);

    auto subq = sub_question_loss(logits, layout);
    CHECK(subq.value.item() == Approx(5 * ln_v).margin(1e-9));
    REQUIRE(subq.per_step.size() == 1);

    auto suba = sub_answer_loss(logits, layout);
    CHECK(suba.value.item() == Approx(3 * ln_v).margin(1e-9));

    CHECK(final_answer_loss(logits, layout).item() == Approx(3 * ln_v).margin(1e-9));

    // K = 2: per-step sums average per Eq.-4 style mean.
    auto ex2 = generate_example(9, 2);
    auto layout2 = build_training_sequence(ex2, vocab);
    Tensor logits2 = Tensor::zeros({layout2.input_len(), v}, true);
    auto subq2 = sub_question_loss(logits2, layout2);
    REQUIRE(subq2.per_step.size() == 2);
    const double s1 = subq2.per_step[0].item();
    const double s2 = subq2.per_step[1].item();
    CHECK(subq2.value.item() == Approx((s1 + s2) / 2).margin(1e-12));
    const int n1 = count_labels(layout2, SegmentKind::sub_question, 1);
    const int n2 = count_labels(layout2, SegmentKind::sub_question, 2);
    CHECK(s1 == Approx(n1 * ln_v).margin(1e-9));
    CHECK(s2 == Approx(n2 * ln_v).margin(1e-9));

    // K = 0 layouts contribute exactly zero.
    auto bare = build_training_sequence(ex, vocab, false);
    Tensor logits0 = Tensor::zeros({bare.input_len(), v}, true);
    CHECK(sub_question_loss(logits0, bare).value.item() == 0.0);
    CHECK(sub_answer_loss(logits0, bare).value.item() == 0.0);

    // Near-one-hot correct logits drive the final loss to ~0.
    std::vector<double> confident(static_cast<size_t>(layout.input_len()) * v, 0.0);
    auto targets = layout.targets();
    for (int t = 0; t < layout.input_len(); ++t)
        confident[static_cast<size_t>(t) * v + targets[static_cast<size_t>(t)]] = 25.0;
    Tensor conf = Tensor::constant({layout.input_len(), v}, confident);
    CHECK(final_answer_loss(conf, layout).item() < 1e-6);

    // A layout without a final segment is rejected.
    SequenceLayout broken;
    broken.example_id = "broken";
    broken.token_ids = {Vocabulary::kBos, 7, 8};
    broken.labels = {{SegmentKind::context, 0}, {SegmentKind::context, 0},
                     {SegmentKind::context, 0}};
    Tensor l3 = Tensor::zeros({2, v});
    CHECK_THROWS_AS(final_answer_loss(l3, broken), LayoutError);
}

TEST_CASE("total loss combination and identities", "[objective]") {
    LossWeights w;  // lambda_ans = 0.8, lambda_final = 1.0
    CHECK(combine_total(1.0, 0.5, 2.0, w) == Approx(3.4).margin(1e-12));
    CHECK(combine_total(0.0, 0.0, 0.0, w) == 0.0);
    LossWeights no_ans{0.0, 1.0};
    CHECK(combine_total(1.0, 123.0, 2.0, no_ans) == Approx(3.0).margin(1e-12));
    CHECK_THROWS_AS(combine_total(std::numeric_limits<double>::infinity(), 0, 0, w),
                    NumericError);

    const auto& vocab = Vocabulary::standard();
    const int v = vocab.size();
    Rng rng(71);
    for (uint64_t seed = 0; seed < 10; ++seed) {
        auto ex = generate_example(seed, 1 + static_cast<int>(seed % 4));
        auto layout = build_training_sequence(ex, vocab);
        std::vector<double> raw(static_cast<size_t>(layout.input_len()) * v);
        for (auto& x : raw) x = rng.next_gaussian();

        Tensor logits = Tensor::param({layout.input_len(), v}, raw);
        auto loss = total_loss(logits, layout, w);
        CHECK(std::abs(loss.breakdown.total -
                       (loss.breakdown.l_sub_q + 0.8 * loss.breakdown.l_sub_ans +
                        loss.breakdown.l_final)) < 1e-12);
        CHECK(loss.total.item() == Approx(loss.breakdown.total).margin(1e-12));

        double mean_q = 0.0, mean_a = 0.0;
        for (auto [q, a] : loss.breakdown.per_step) {
            mean_q += q;
            mean_a += a;
        }
        if (!loss.breakdown.per_step.empty()) {
            mean_q /= static_cast<double>(loss.breakdown.per_step.size());
            mean_a /= static_cast<double>(loss.breakdown.per_step.size());
            CHECK(loss.breakdown.l_sub_q == Approx(mean_q).margin(1e-12));
            CHECK(loss.breakdown.l_sub_ans == Approx(mean_a).margin(1e-12));
        }

        // Gradient additivity: grad(total) == weighted sum of term grads.
        backward(loss.total);
        auto combined = logits.grad();

        Tensor lq = Tensor::param({layout.input_len(), v}, raw);
        backward(sub_question_loss(lq, layout).value);
        Tensor la = Tensor::param({layout.input_len(), v}, raw);
        backward(sub_answer_loss(la, layout).value);
        Tensor lf = Tensor::param({layout.input_len(), v}, raw);
        backward(final_answer_loss(lf, layout));

        const auto gq = lq.grad_or_zeros();
        const auto ga = la.grad_or_zeros();
        const auto gf = lf.grad_or_zeros();
        for (size_t i = 0; i < combined.size(); ++i)
            CHECK(std::abs(combined[i] - (gq[i] + 0.8 * ga[i] + gf[i])) < 1e-10);
    }
}

TEST_CASE("gradient support respects segment masks", "[objective]") {
    const auto& vocab = Vocabulary::standard();
    const int v = vocab.size();
    auto ex = generate_example(77, 3);
    auto layout = build_training_sequence(ex, vocab);

    // Sub-question loss touches only logits rows that predict SUBQ tokens.
    Tensor logits = Tensor::zeros({layout.input_len(), v}, true);
    backward(sub_question_loss(logits, layout).value);
    auto wq = layout.term_weights(SegmentKind::sub_question);
    for (int t = 0; t < layout.input_len(); ++t) {
        double row_norm = 0.0;
        for (int j = 0; j < v; ++j)
            row_norm += std::abs(logits.grad()[static_cast<size_t>(t) * v + j]);
        if (wq[static_cast<size_t>(t)] > 0)
            CHECK(row_norm > 0.0);
        else
            CHECK(row_norm == 0.0);
    }

    // Zeroing lambda_ans yields exactly zero gradient at SUBA rows.
    Tensor logits2 = Tensor::zeros({layout.input_len(), v}, true);
    backward(total_loss(logits2, layout, LossWeights{0.0, 1.0}).total);
    auto wa = layout.term_weights(SegmentKind::sub_answer);
    auto wf = layout.term_weights(SegmentKind::final_answer);
    auto wq2 = layout.term_weights(SegmentKind::sub_question);
    for (int t = 0; t < layout.input_len(); ++t) {
        double row_norm = 0.0;
        for (int j = 0; j < v; ++j)
            row_norm += std::abs(logits2.grad()[static_cast<size_t>(t) * v + j]);
        const bool expected_nonzero =
            wq2[static_cast<size_t>(t)] > 0 || wf[static_cast<size_t>(t)] > 0;
        if (expected_nonzero)
            CHECK(row_norm > 0.0);
        else
            CHECK(row_norm == 0.0);
        if (wa[static_cast<size_t>(t)] > 0 && !expected_nonzero) CHECK(row_norm == 0.0);
    }
}

TEST_CASE("total loss through the full model passes finite differences", "[objective]") {
    ModelConfig config;
    config.d_model = 16;
    config.n_layers = 1;
    config.n_heads = 2;
    config.vocab_size = Vocabulary::standard().size();
    config.image_side = 8;
    config.patch_size = 4;
    config.max_seq_len = 64;
    config.seed = 5;
    auto params = init_params(config);

    auto ex = generate_example(31, 2);
    auto layout = build_training_sequence(ex, Vocabulary::standard());
    Image img = render_scene(ex.scene, config.image_side);
    const auto input = layout.input_tokens();
    LossWeights w;

    auto loss_fn = [&]() {
        return total_loss(forward(params, img, input), layout, w).total;
    };
    backward(loss_fn());

    Rng rng(83);
    std::vector<std::string> paths;
    for (const auto& [path, t] : params.by_path) paths.push_back(path);
    const double h = 1e-5;
    for (int probe = 0; probe < 25; ++probe) {
        const auto& path = paths[rng.next_int(static_cast<int>(paths.size()))];
        Tensor t = params.by_path.at(path);
        const size_t idx = rng.next_below(t.size());
        const double analytic = t.grad_or_zeros()[idx];
        const double orig = t.values()[idx];
        t.mutable_values()[idx] = orig + h;
        const double plus = loss_fn().item();
        t.mutable_values()[idx] = orig - h;
        const double minus = loss_fn().item();
        t.mutable_values()[idx] = orig;
        const double numeric = (plus - minus) / (2 * h);
        const double rel = std::abs(analytic - numeric) /
                           std::max(1e-8, std::abs(analytic) + std::abs(numeric));
        INFO(path << "[" << idx << "]");
        CHECK(rel < 1e-3);
    }
}

TEST_CASE("strict conditioning masks earlier chain steps", "[objective]") {
    ModelConfig config;
    config.d_model = 16;
    config.n_layers = 2;
    config.n_heads = 2;
    config.vocab_size = Vocabulary::standard().size();
    config.image_side = 8;
    config.patch_size = 4;
    config.max_seq_len = 64;
    config.seed = 9;
    auto params = init_params(config);

    auto ex = generate_example(15, 2);  // K = 2
    auto layout = build_training_sequence(ex, Vocabulary::standard());
    REQUIRE(layout.num_steps == 2);
    Image img = render_scene(ex.scene, config.image_side);

    auto input = layout.input_tokens();
    Tensor bias = strict_attn_bias(layout, config.num_patches());
    Tensor base = forward(params, img, input, &bias);

    // Mutate one step-1 sub-answer token; step-2 sub-question logits must be
    // bit-stable under the strict mask (no attention path reaches them).
    int suba1_pos = -1;
    for (int p = 0; p < layout.input_len(); ++p)
        if (layout.labels[static_cast<size_t>(p)].kind == SegmentKind::sub_answer &&
            layout.labels[static_cast<size_t>(p)].step == 1 &&
            input[static_cast<size_t>(p)] != Vocabulary::kSuba)
            suba1_pos = p;
    REQUIRE(suba1_pos >= 0);
    auto mutated = input;
    mutated[static_cast<size_t>(suba1_pos)] =
        (mutated[static_cast<size_t>(suba1_pos)] + 1) % config.vocab_size;

    Tensor strict2 = forward(params, img, mutated, &bias);
    Tensor causal1 = forward(params, img, input);
    Tensor causal2 = forward(params, img, mutated);

    const int v = config.vocab_size;
    bool causal_differs = false;
    for (int p = 0; p < layout.input_len(); ++p) {
        if (layout.labels[static_cast<size_t>(p)].kind != SegmentKind::sub_question ||
            layout.labels[static_cast<size_t>(p)].step != 2)
            continue;
        for (int j = 0; j < v; ++j) {
            const size_t i = static_cast<size_t>(p) * v + j;
            CHECK(std::abs(base.values()[i] - strict2.values()[i]) <= 1e-12);
            if (std::abs(causal1.values()[i] - causal2.values()[i]) > 1e-12)
                causal_differs = true;
        }
    }
    CHECK(causal_differs);

    // Strict mode still trains: gradients exist and are finite.
    auto loss = total_loss(forward(params, img, input, &bias), layout, LossWeights{});
    backward(loss.total);
    CHECK(params.at("token_embed").has_grad());
}
