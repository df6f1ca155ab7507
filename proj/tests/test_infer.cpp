#include <catch2/catch.hpp>

#include <cmath>

#include "selfq/infer.hpp"
#include "selfq/taskgen.hpp"

using namespace selfq;

namespace {

ModelConfig tiny_config(uint64_t seed = 0) {
    ModelConfig c;
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.vocab_size = Vocabulary::standard().size();
    c.image_side = 8;
    c.patch_size = 4;
    c.max_seq_len = 48;
    c.seed = seed;
    return c;
}

Image test_image(const ModelConfig& c, uint64_t seed) {
    Scene s = generate_scene(seed);
    return render_scene(s, c.image_side);
}

// Zeroed weights make the final hidden state all-zero, so logits reduce to
// out_proj.bias and the model emits one constant token.
ModelParams constant_token_stub(const ModelConfig& c, int token) {
    ModelParams params;
    params.config = c;
    for (const auto& [path, shape] : param_layout(c)) {
        std::vector<double> values(numel(shape), 0.0);
        if (ends_with(path, ".gain")) std::fill(values.begin(), values.end(), 1.0);
        params.by_path.emplace(path, Tensor::param(shape, std::move(values)));
    }
    params.by_path.at("out_proj.bias").mutable_values()[static_cast<size_t>(token)] = 5.0;
    return params;
}

}  // namespace

TEST_CASE("incremental decode matches the full forward pass", "[infer]") {
    auto config = tiny_config(61);
    auto params = init_params(config);
    Rng rng(67);
    Image img = test_image(config, 3);

    std::vector<int> ids;
    for (int i = 0; i < 12; ++i) ids.push_back(rng.next_int(config.vocab_size));

    Tensor full = forward(params, img, ids);
    DecodeContext ctx(params, img);
    for (int t = 0; t < static_cast<int>(ids.size()); ++t) {
        ctx.feed_token(ids[static_cast<size_t>(t)]);
        const auto inc = ctx.logits();
        int full_arg = 0, inc_arg = 0;
        for (int j = 0; j < config.vocab_size; ++j) {
            const double f = full.values()[static_cast<size_t>(t) * config.vocab_size + j];
            CHECK(std::abs(f - inc[static_cast<size_t>(j)]) < 1e-12);
            if (f > full.values()[static_cast<size_t>(t) * config.vocab_size + full_arg])
                full_arg = j;
            if (inc[static_cast<size_t>(j)] > inc[static_cast<size_t>(inc_arg)]) inc_arg = j;
        }
        CHECK(full_arg == inc_arg);
    }
}

TEST_CASE("greedy_decode stop and budget behavior", "[infer]") {
    auto config = tiny_config();
    Image img = test_image(config, 5);

    // Stop token is the argmax at the first step: one-token result.
    auto stopper = constant_token_stub(config, Vocabulary::kEos);
    auto out = greedy_decode(stopper, img, {Vocabulary::kBos}, {Vocabulary::kEos}, 8);
    CHECK(out == std::vector<int>{Vocabulary::kEos});

    // A never-stopping model yields exactly max_new tokens.
    auto chatter = constant_token_stub(config, 20);
    auto out2 = greedy_decode(chatter, img, {Vocabulary::kBos}, {Vocabulary::kEos}, 6);
    CHECK(out2 == std::vector<int>(6, 20));

    // Context overflow raises LengthError.
    std::vector<int> long_prefix(static_cast<size_t>(config.max_text_len()) + 1, 7);
    CHECK_THROWS_AS(greedy_decode(chatter, img, long_prefix, {Vocabulary::kEos}, 4),
                    LengthError);
    CHECK_THROWS_AS(greedy_decode(chatter, img, {}, {Vocabulary::kEos}, 4), ShapeError);
}

TEST_CASE("greedy choice is invariant to positive logit rescaling", "[infer]") {
    auto config = tiny_config(71);
    auto params = init_params(config);
    Image img = test_image(config, 7);
    std::vector<int> prefix = {Vocabulary::kBos, 25, 44, 26, 27, 16};

    auto out1 = greedy_decode(params, img, prefix, {Vocabulary::kEos}, 10);
    auto scaled = params.clone();
    for (auto* path : {"out_proj.weight", "out_proj.bias"}) {
        auto& vals = scaled.by_path.at(path).mutable_values();
        for (auto& v : vals) v *= 2.5;
    }
    auto out2 = greedy_decode(scaled, img, prefix, {Vocabulary::kEos}, 10);
    CHECK(out1 == out2);
}

TEST_CASE("self_question_infer degenerate and malformed paths", "[infer]") {
    auto config = tiny_config();
    Image img = test_image(config, 11);
    std::vector<int> question = {34, 35, 21, 42};  // "how many blue shapes"

    // Immediate FINAL: zero steps, only a final answer attempt.
    auto finaler = constant_token_stub(config, Vocabulary::kFinal);
    auto trace = self_question_infer(finaler, img, question);
    CHECK(trace.steps_taken == 0);
    CHECK(trace.sub_questions.empty());
    CHECK(trace.final_answer.empty());
    // The stub keeps emitting FINAL instead of EOS, so the trace is marked
    // malformed rather than raising.
    CHECK_FALSE(trace.well_formed);

    // A SUBQ-spammer derails and the salvage path still produces a trace.
    auto spammer = constant_token_stub(config, Vocabulary::kSubq);
    auto trace2 = self_question_infer(spammer, img, question);
    CHECK_FALSE(trace2.well_formed);
    CHECK(trace2.steps_taken <= 4);

    // A plain-token babbler exhausts budgets without markers.
    auto babbler = constant_token_stub(config, 19);
    auto trace3 = self_question_infer(babbler, img, question);
    CHECK_FALSE(trace3.well_formed);
}

TEST_CASE("traces respect budgets for arbitrary parameters", "[infer]") {
    auto config = tiny_config(73);
    Image img = test_image(config, 13);
    std::vector<int> question = {34, 35, 19, 42};

    for (uint64_t seed = 0; seed < 25; ++seed) {
        ModelConfig c = config;
        c.seed = seed;
        auto params = init_params(c);
        const int k_max = 1 + static_cast<int>(seed % 4);
        InferenceTrace trace;
        CHECK_NOTHROW(trace = self_question_infer(params, img, question, k_max));
        CHECK(trace.steps_taken <= k_max);
        CHECK(trace.sub_questions.size() == trace.sub_answers.size());
        CHECK(static_cast<int>(trace.sub_questions.size()) == trace.steps_taken);

        // Determinism: the same inputs give the same trace.
        auto trace2 = self_question_infer(params, img, question, k_max);
        CHECK(trace.sub_questions == trace2.sub_questions);
        CHECK(trace.sub_answers == trace2.sub_answers);
        CHECK(trace.final_answer == trace2.final_answer);
        CHECK(trace.well_formed == trace2.well_formed);

        // Marker-free content: structural markers never leak into segments.
        auto no_markers = [](const std::vector<int>& toks) {
            for (int t : toks)
                if (t == Vocabulary::kSubq || t == Vocabulary::kSuba ||
                    t == Vocabulary::kFinal || t == Vocabulary::kEos)
                    return false;
            return true;
        };
        for (const auto& q : trace.sub_questions) CHECK(no_markers(q));
        for (const auto& a : trace.sub_answers) CHECK(no_markers(a));
        CHECK(no_markers(trace.final_answer));
    }
}

TEST_CASE("direct_infer emits no structural chain markers", "[infer]") {
    auto config = tiny_config(79);
    Image img = test_image(config, 17);
    std::vector<int> question = {26, 38, 39, 19, 17};  // "is there a red square"

    for (uint64_t seed = 0; seed < 10; ++seed) {
        ModelConfig c = config;
        c.seed = seed;
        auto params = init_params(c);
        auto out = direct_infer(params, img, question);
        for (int t : out) {
            CHECK(t != Vocabulary::kSubq);
            CHECK(t != Vocabulary::kSuba);
            CHECK(t != Vocabulary::kFinal);
        }
        CHECK(out == direct_infer(params, img, question));
    }
}

TEST_CASE("context overflow degrades traces instead of throwing", "[infer]") {
    ModelConfig c = tiny_config(83);
    c.max_seq_len = c.num_patches() + 8;  // almost no room to generate
    auto params = init_params(c);
    Image img = test_image(c, 19);

    std::vector<int> question = {34, 35, 21, 42};
    InferenceTrace trace;
    CHECK_NOTHROW(trace = self_question_infer(params, img, question));
    CHECK_FALSE(trace.well_formed);
}
