#include <catch2/catch.hpp>

#include <cmath>
#include <set>

#include "selfq/model.hpp"
#include "selfq/taskgen.hpp"

using namespace selfq;

namespace {

ModelConfig tiny_config(uint64_t seed = 0) {
    ModelConfig c;
    c.d_model = 16;
    c.n_layers = 1;
    c.n_heads = 2;
    c.vocab_size = Vocabulary::standard().size();
    c.image_side = 8;
    c.channels = 3;
    c.patch_size = 4;
    c.max_seq_len = 32;
    c.seed = seed;
    return c;
}

Image random_image(const ModelConfig& c, Rng& rng) {
    Image img;
    img.side = c.image_side;
    img.channels = c.channels;
    img.pixels.resize(static_cast<size_t>(c.image_side) * c.image_side * c.channels);
    for (auto& p : img.pixels) p = rng.next_double();
    return img;
}

std::vector<int> random_tokens(const ModelConfig& c, int len, Rng& rng) {
    std::vector<int> ids(static_cast<size_t>(len));
    for (auto& id : ids) id = rng.next_int(c.vocab_size);
    return ids;
}

}  // namespace

TEST_CASE("init_params is deterministic and follows the init rules", "[model]") {
    auto config = ModelConfig::desk_default(17);
    auto a = init_params(config);
    auto b = init_params(config);
    REQUIRE(a.by_path.size() == b.by_path.size());
    for (const auto& [path, t] : a.by_path)
        CHECK(t.values() == b.at(path).values());

    for (const auto& [path, t] : a.by_path) {
        if (ends_with(path, ".gain"))
            for (double v : t.values()) CHECK(v == 1.0);
        if (ends_with(path, ".bias"))
            for (double v : t.values()) CHECK(v == 0.0);
    }
}

TEST_CASE("param_count matches a hand-derived closed form", "[model]") {
    // d=64, L=2, H=4, V=64, 16x16x3 image, patch 4, seq 128.
    ModelConfig c = ModelConfig::desk_default();
    c.vocab_size = 64;

    const long d = 64, v = 64, patches = 16, patch_dim = 48, text_len = 128 - 16;
    const long embed = patch_dim * d + d + patches * d + v * d + text_len * d;
    const long per_layer = (2 * d) + 4 * (d * d + d) + (2 * d) +
                           (d * 4 * d + 4 * d) + (4 * d * d + d);
    const long head = 2 * d + d * v + v;
    const long expected = embed + 2 * per_layer + head;
    CHECK(param_count(c) == expected);
    // Regression constant, computed once from the shapes above.
    CHECK(param_count(c) == 119680);

    long total = 0;
    for (const auto& [path, t] : init_params(c).by_path)
        total += static_cast<long>(t.size());
    CHECK(total == param_count(c));

    ModelConfig doubled = c;
    doubled.n_layers = 4;
    CHECK(param_count(doubled) - param_count(c) == 2 * per_layer);
}

TEST_CASE("encode_image contract", "[model]") {
    auto config = ModelConfig::desk_default(3);
    auto params = init_params(config);

    Scene scene = generate_scene(5);
    Image img = render_scene(scene);
    Tensor vis = encode_image(params, img);
    REQUIRE(vis.shape() == Shape{16, 64});

    // All-zero image with zero projection bias: embeddings equal positions.
    Image zero;
    zero.side = 16;
    zero.channels = 3;
    zero.pixels.assign(16 * 16 * 3, 0.0);
    Tensor vis0 = encode_image(params, zero);
    CHECK(vis0.values() == params.at("pos_visual").values());

    // Two images differing in one patch differ only at that patch row.
    Image img2 = img;
    img2.at(5, 6, 1) = 1.0 - img2.at(5, 6, 1);  // inside patch (1, 1) = row 5
    Tensor vis2 = encode_image(params, img2);
    for (int p = 0; p < 16; ++p) {
        bool same = true;
        for (int j = 0; j < 64; ++j)
            if (vis.values()[p * 64 + j] != vis2.values()[p * 64 + j]) same = false;
        CHECK(same == (p != 5));
    }

    Image wrong;
    wrong.side = 8;
    wrong.channels = 3;
    wrong.pixels.assign(8 * 8 * 3, 0.0);
    CHECK_THROWS_AS(encode_image(params, wrong), ShapeError);
}

TEST_CASE("forward shape, causality and determinism", "[model]") {
    auto config = tiny_config(11);
    auto params = init_params(config);
    Rng rng(23);
    Image img = random_image(config, rng);
    auto ids = random_tokens(config, 10, rng);

    Tensor logits = forward(params, img, ids);
    REQUIRE(logits.shape() == Shape{10, config.vocab_size});

    Tensor again = forward(params, img, ids);
    CHECK(logits.values() == again.values());

    // Causality: changing tokens after position t leaves logits at <= t
    // unchanged within 1e-12.
    for (int t : {0, 4, 8}) {
        auto mutated = ids;
        for (size_t j = static_cast<size_t>(t) + 1; j < mutated.size(); ++j)
            mutated[j] = (mutated[j] + 1 + static_cast<int>(j)) % config.vocab_size;
        if (mutated == ids) continue;
        Tensor logits2 = forward(params, img, mutated);
        for (int p = 0; p <= t; ++p)
            for (int v = 0; v < config.vocab_size; ++v)
                CHECK(std::abs(logits.values()[p * config.vocab_size + v] -
                               logits2.values()[p * config.vocab_size + v]) <= 1e-12);
    }

    auto too_long = random_tokens(config, config.max_text_len() + 1, rng);
    CHECK_THROWS_AS(forward(params, img, too_long), LengthError);
    CHECK_THROWS_AS(forward(params, img, std::vector<int>{0, config.vocab_size}),
                    IndexError);
}

TEST_CASE("fresh params predict near-uniformly", "[model]") {
    auto config = ModelConfig::desk_default(29);
    auto params = init_params(config);
    Rng rng(31);
    double total = 0.0;
    int count = 0;
    for (int trial = 0; trial < 100; ++trial) {
        Image img = random_image(config, rng);
        auto ids = random_tokens(config, 8, rng);
        Tensor logits = forward(params, img, ids);
        std::vector<int> targets(8);
        for (auto& t : targets) t = rng.next_int(config.vocab_size);
        total += cross_entropy(logits, targets, std::vector<double>(8, 1.0)).item();
        count += 8;
    }
    const double mean_ce = total / count;
    const double uniform = std::log(static_cast<double>(config.vocab_size));
    CHECK(mean_ce == Approx(uniform).epsilon(0.15));
}

TEST_CASE("gradients reach every parameter and match finite differences", "[model]") {
    auto config = tiny_config(41);
    auto params = init_params(config);
    Rng rng(43);
    Image img = random_image(config, rng);
    auto ids = random_tokens(config, 6, rng);
    std::vector<int> targets = random_tokens(config, 6, rng);
    std::vector<double> weights = {1.0, 0.0, 1.0, 1.0, 0.0, 1.0};

    auto loss_fn = [&]() {
        return cross_entropy(forward(params, img, ids), targets, weights);
    };
    backward(loss_fn());
    for (const auto& [path, t] : params.by_path) {
        INFO(path);
        CHECK(t.has_grad());
    }

    // Finite-difference spot checks on randomly chosen scalar parameters.
    const double h = 1e-5;
    std::vector<std::string> paths;
    for (const auto& [path, t] : params.by_path) paths.push_back(path);
    for (int probe = 0; probe < 6; ++probe) {
        const auto& path = paths[rng.next_int(static_cast<int>(paths.size()))];
        Tensor t = params.by_path.at(path);
        const size_t idx = rng.next_below(t.size());
        const double analytic = t.grad()[idx];
        const double orig = t.values()[idx];
        t.mutable_values()[idx] = orig + h;
        const double plus = loss_fn().item();
        t.mutable_values()[idx] = orig - h;
        const double minus = loss_fn().item();
        t.mutable_values()[idx] = orig;
        const double numeric = (plus - minus) / (2 * h);
        const double rel = std::abs(analytic - numeric) /
                           std::max(1e-8, std::abs(analytic) + std::abs(numeric));
        INFO(path << "[" << idx << "] analytic " << analytic << " numeric " << numeric);
        CHECK(rel < 1e-3);
    }
}

TEST_CASE("positive logit rescaling preserves argmax", "[model]") {
    auto config = tiny_config(53);
    auto params = init_params(config);
    Rng rng(59);
    Image img = random_image(config, rng);
    auto ids = random_tokens(config, 7, rng);

    Tensor logits = forward(params, img, ids);
    auto scaled = params.clone();
    for (auto* path : {"out_proj.weight", "out_proj.bias"}) {
        auto& vals = scaled.by_path.at(path).mutable_values();
        for (auto& v : vals) v *= 3.75;
    }
    Tensor logits2 = forward(scaled, img, ids);

    const int v = config.vocab_size;
    for (int t = 0; t < 7; ++t) {
        auto row = logits.values().begin() + static_cast<size_t>(t) * v;
        auto row2 = logits2.values().begin() + static_cast<size_t>(t) * v;
        const int arg1 = static_cast<int>(std::max_element(row, row + v) - row);
        const int arg2 = static_cast<int>(std::max_element(row2, row2 + v) - row2);
        CHECK(arg1 == arg2);
    }
}

TEST_CASE("config validation", "[model]") {
    ModelConfig c = ModelConfig::desk_default();
    c.n_heads = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = ModelConfig::desk_default();
    c.patch_size = 5;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = ModelConfig::desk_default();
    c.max_seq_len = 17;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = ModelConfig::desk_default();
    c.vocab_size = 0;
    CHECK_THROWS_AS(init_params(c), ConfigError);
}
