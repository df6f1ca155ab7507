#include <catch2/catch.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "selfq/trainer.hpp"

using namespace selfq;

namespace {

ModelConfig tiny_config(uint64_t seed = 0) {
    ModelConfig c;
    c.d_model = 16;
    c.n_layers = 1;
    c.n_heads = 2;
    c.vocab_size = Vocabulary::standard().size();
    c.image_side = 8;
    c.patch_size = 4;
    c.max_seq_len = 64;
    c.seed = seed;
    return c;
}

Dataset tiny_dataset(uint64_t seed, int n) {
    Dataset ds = make_dataset(seed, n, {1, 1, 0, 0});
    // Re-render at the tiny image size so the dataset matches the config.
    for (auto& ex : ds.examples) ex.image = render_scene(ex.scene, 8);
    return ds;
}

bool metrics_equal_ignoring_wallclock(const StepMetrics& a, const StepMetrics& b) {
    return a.step == b.step && a.l_sub_q == b.l_sub_q && a.l_sub_ans == b.l_sub_ans &&
           a.l_final == b.l_final && a.total == b.total && a.token_acc == b.token_acc;
}

}  // namespace

TEST_CASE("adamw closed-form updates", "[trainer]") {
    ModelConfig mc = tiny_config();
    ModelParams params;
    params.config = mc;
    params.by_path.emplace("p", Tensor::param({1}, {0.0}));
    auto state = OptimizerState::init(params);

    TrainConfig tc;
    tc.learning_rate = 1e-3;
    tc.weight_decay = 0.0;

    // Zero gradient, zero decay: parameter unchanged.
    adamw_step(params, state, tc);
    CHECK(params.at("p").values()[0] == 0.0);

    // Zero gradient with decoupled decay: p <- p * (1 - lr * wd).
    ModelParams decayed;
    decayed.config = mc;
    decayed.by_path.emplace("p", Tensor::param({1}, {2.0}));
    auto state2 = OptimizerState::init(decayed);
    TrainConfig tc2;
    tc2.learning_rate = 0.01;
    tc2.weight_decay = 0.1;
    adamw_step(decayed, state2, tc2);
    CHECK(decayed.at("p").values()[0] == Approx(2.0 * (1 - 0.001)).margin(1e-15));

    // One step from p=0 with g=1 at defaults: bias correction makes the
    // update ~ -lr.
    ModelParams scalar;
    scalar.config = mc;
    scalar.by_path.emplace("p", Tensor::param({1}, {0.0}));
    scalar.by_path.at("p").node().grad = {1.0};
    auto state3 = OptimizerState::init(scalar);
    TrainConfig tc3;
    tc3.learning_rate = 1e-3;
    tc3.weight_decay = 0.0;
    adamw_step(scalar, state3, tc3);
    CHECK(scalar.at("p").values()[0] == Approx(-1e-3).epsilon(1e-6));

    // Non-finite gradients abort with the parameter path in the message.
    ModelParams bad;
    bad.config = mc;
    bad.by_path.emplace("layers.0.broken", Tensor::param({1}, {0.0}));
    bad.by_path.at("layers.0.broken").node().grad = {
        std::numeric_limits<double>::quiet_NaN()};
    auto state4 = OptimizerState::init(bad);
    try {
        adamw_step(bad, state4, tc3);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("layers.0.broken") != std::string::npos);
    }
}

TEST_CASE("gradient clipping at the global norm", "[trainer]") {
    ModelParams params;
    params.config = tiny_config();
    params.by_path.emplace("a", Tensor::param({2}, {0.0, 0.0}));
    params.by_path.emplace("b", Tensor::param({1}, {0.0}));
    params.by_path.at("a").node().grad = {3.0, 0.0};
    params.by_path.at("b").node().grad = {4.0};

    const double norm = clip_gradients(params, 1.0);
    CHECK(norm == Approx(5.0));
    CHECK(params.at("a").grad()[0] == Approx(0.6));
    CHECK(params.at("b").grad()[0] == Approx(0.8));

    double after = 0.0;
    for (const auto& [p, t] : params.by_path)
        for (double g : t.grad()) after += g * g;
    CHECK(std::sqrt(after) == Approx(1.0));
}

TEST_CASE("training is deterministic given seed, config and data", "[trainer]") {
    auto mc = tiny_config(3);
    auto ds = tiny_dataset(5, 12);
    TrainConfig tc;
    tc.batch_size = 4;
    tc.max_steps = 15;
    tc.seed = 11;

    auto r1 = train(tc, ds, mc);
    auto r2 = train(tc, ds, mc);
    REQUIRE(r1.metrics.size() == r2.metrics.size());
    for (size_t i = 0; i < r1.metrics.size(); ++i)
        CHECK(metrics_equal_ignoring_wallclock(r1.metrics[i], r2.metrics[i]));
    for (const auto& [path, t] : r1.params.by_path)
        CHECK(t.values() == r2.params.at(path).values());
}

TEST_CASE("initial loss matches the uniform-prediction estimate", "[trainer]") {
    auto mc = tiny_config(7);
    auto ds = tiny_dataset(9, 24);
    TrainConfig tc;
    tc.batch_size = 32;
    tc.max_steps = 1;
    tc.seed = 13;

    // Uniform-prediction estimate from the layouts alone.
    const double ln_v = std::log(static_cast<double>(mc.vocab_size));
    const auto prepared = prepare_examples(ds, tc, mc);
    double expected = 0.0;
    for (const auto& p : prepared) {
        double lq = 0.0, la = 0.0, lf = 0.0;
        for (int i = 1; i <= p.layout.num_steps; ++i) {
            double nq = 0.0, na = 0.0;
            for (double w : p.layout.term_weights(SegmentKind::sub_question, i)) nq += w;
            for (double w : p.layout.term_weights(SegmentKind::sub_answer, i)) na += w;
            lq += nq * ln_v;
            la += na * ln_v;
        }
        if (p.layout.num_steps > 0) {
            lq /= p.layout.num_steps;
            la /= p.layout.num_steps;
        }
        for (double w : p.layout.term_weights(SegmentKind::final_answer)) lf += w * ln_v;
        expected += combine_total(lq, la, lf, LossWeights{});
    }
    expected /= static_cast<double>(prepared.size());

    auto result = train(tc, ds, mc);
    CHECK(result.metrics[0].total == Approx(expected).epsilon(0.15));
}

TEST_CASE("training loss trends down on a small corpus", "[trainer]") {
    auto mc = tiny_config(17);
    auto ds = tiny_dataset(19, 8);
    TrainConfig tc;
    tc.batch_size = 4;
    tc.max_steps = 120;
    tc.seed = 23;
    tc.learning_rate = 1e-3;

    auto result = train(tc, ds, mc);
    double head = 0.0, tail = 0.0;
    for (int i = 0; i < 20; ++i) head += result.metrics[static_cast<size_t>(i)].total;
    for (int i = 100; i < 120; ++i) tail += result.metrics[static_cast<size_t>(i)].total;
    CHECK(tail < head);
}

TEST_CASE("ablation modes shape the layouts and the gradient support", "[trainer]") {
    auto mc = tiny_config(29);
    auto ds = tiny_dataset(31, 10);

    TrainConfig no_chain;
    no_chain.ablation_mode = AblationMode::no_chain_augmentation;
    for (const auto& p : prepare_examples(ds, no_chain, mc))
        CHECK(p.layout.num_steps == 0);

    TrainConfig half;
    half.augmentation_fraction = 0.5;
    half.seed = 37;
    auto prepared = prepare_examples(ds, half, mc);
    int with = 0, without = 0;
    for (const auto& p : prepared) (p.layout.num_steps > 0 ? with : without)++;
    CHECK(with > 0);
    CHECK(without > 0);
    auto prepared2 = prepare_examples(ds, half, mc);
    for (size_t i = 0; i < prepared.size(); ++i)
        CHECK(prepared[i].layout.num_steps == prepared2[i].layout.num_steps);

    // final_only: gradient support is exactly the FINAL rows.
    TrainConfig fin;
    fin.ablation_mode = AblationMode::final_only;
    const auto& vocab = Vocabulary::standard();
    auto ex = generate_example(41, 2);
    auto layout = build_training_sequence(ex, vocab);
    Tensor logits = Tensor::zeros({layout.input_len(), vocab.size()}, true);
    backward(total_loss(logits, layout, fin.effective_weights(),
                        fin.effective_lambda_sub_q())
                 .total);
    auto wf = layout.term_weights(SegmentKind::final_answer);
    for (int t = 0; t < layout.input_len(); ++t) {
        double row = 0.0;
        for (int j = 0; j < vocab.size(); ++j)
            row += std::abs(logits.grad()[static_cast<size_t>(t) * vocab.size() + j]);
        if (wf[static_cast<size_t>(t)] > 0)
            CHECK(row > 0.0);
        else
            CHECK(row == 0.0);
    }
}

TEST_CASE("checkpoint round trip and resume equivalence", "[trainer]") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "selfq_trainer_test";
    fs::create_directories(dir);
    const std::string path = (dir / "ckpt.sqcl").string();

    auto mc = tiny_config(43);
    auto ds = tiny_dataset(47, 10);
    TrainConfig tc;
    tc.batch_size = 4;
    tc.max_steps = 12;
    tc.seed = 53;

    // Uninterrupted run.
    auto full = train(tc, ds, mc);

    // Run to step 6, checkpoint, reload, resume to 12.
    TrainConfig half = tc;
    half.max_steps = 6;
    auto first = train(half, ds, mc);
    Checkpoint ckpt{mc, tc, first.steps_run, first.params.clone(), first.opt_state,
                    first.metrics.back()};
    save_checkpoint(ckpt, path);
    auto loaded = load_checkpoint(path);
    CHECK(loaded.step == 6);
    CHECK(loaded.model_config == mc);
    CHECK(loaded.train_config.seed == tc.seed);

    // Reloaded parameters reproduce forward outputs bit-identically.
    const auto prepared = prepare_examples(ds, tc, mc);
    Tensor before = forward(first.params, *prepared[0].image, prepared[0].input);
    Tensor after = forward(loaded.params, *prepared[0].image, prepared[0].input);
    CHECK(before.values() == after.values());

    auto resumed = train(tc, ds, mc, {}, &loaded);
    REQUIRE(resumed.metrics.size() == 6);
    for (size_t i = 0; i < resumed.metrics.size(); ++i)
        CHECK(metrics_equal_ignoring_wallclock(resumed.metrics[i], full.metrics[i + 6]));
    for (const auto& [p, t] : full.params.by_path)
        CHECK(t.values() == resumed.params.at(p).values());
    for (const auto& [p, m] : full.opt_state.first_moment)
        CHECK(m == resumed.opt_state.first_moment.at(p));

    // A flipped byte fails the integrity check.
    std::string bytes;
    {
        std::ifstream in(path, std::ios::binary);
        bytes.assign((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    }
    bytes[bytes.size() / 2] = static_cast<char>(bytes[bytes.size() / 2] ^ 0x40);
    const std::string corrupt = (dir / "corrupt.sqcl").string();
    {
        std::ofstream out(corrupt, std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    CHECK_THROWS_AS(load_checkpoint(corrupt), ChecksumError);

    fs::remove_all(dir);
}

TEST_CASE("metrics stream serialization", "[trainer]") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "selfq_metrics_test";
    fs::create_directories(dir);
    const std::string path = (dir / "metrics.jsonl").string();

    std::vector<StepMetrics> ms = {{1, 0.5, 0.25, 1.0, 1.7, 0.125, 3.5},
                                   {2, 0.4, 0.2, 0.9, 1.5, 0.25, 3.25}};
    write_metrics_jsonl(ms, path);
    std::ifstream in(path);
    std::string line;
    int count = 0;
    while (std::getline(in, line)) {
        auto j = nlohmann::json::parse(line);
        for (const char* key :
             {"step", "l_sub_q", "l_sub_ans", "l_final", "total", "token_acc",
              "wallclock_ms"})
            CHECK(j.contains(key));
        ++count;
    }
    CHECK(count == 2);
    fs::remove_all(dir);
}

TEST_CASE("train config validation", "[trainer]") {
    TrainConfig tc;
    tc.beta1 = 1.0;
    CHECK_THROWS_AS(tc.validate(), ConfigError);
    tc = TrainConfig{};
    tc.augmentation_fraction = 1.5;
    CHECK_THROWS_AS(tc.validate(), ConfigError);
    tc = TrainConfig{};
    tc.batch_size = 0;
    CHECK_THROWS_AS(tc.validate(), ConfigError);
    CHECK_THROWS_AS(ablation_mode_from_name("bogus"), ConfigError);

    auto mc = tiny_config();
    Dataset empty;
    CHECK_THROWS_AS(train(TrainConfig{}, empty, mc), ConfigError);
}
