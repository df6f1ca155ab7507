#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "selfq/errors.hpp"
#include "selfq/oracle.hpp"
#include "selfq/rng.hpp"
#include "selfq/scene.hpp"
#include "selfq/vocab.hpp"

namespace selfq {

inline constexpr int kDefaultKMax = 4;
inline constexpr int kResampleCap = 100;

struct ChainStep {
    std::vector<std::string> question;
    std::vector<std::string> answer;

    bool operator==(const ChainStep&) const = default;
};

struct ReasoningChain {
    std::vector<ChainStep> steps;

    int depth() const { return static_cast<int>(steps.size()); }
    bool operator==(const ReasoningChain&) const = default;
};

struct AugmentedExample {
    std::string id;
    Scene scene;
    Image image;
    std::vector<std::string> question;
    ReasoningChain chain;
    std::vector<std::string> answer;
    int depth = 0;
    AnswerType answer_type = AnswerType::other;

    // Oracle-consistency and vocabulary membership; throws ValidationError.
    void validate(const Vocabulary& vocab) const {
        if (depth != chain.depth())
            throw ValidationError("example " + id + ": depth != chain length");
        auto check_tokens = [&](const std::vector<std::string>& words) {
            for (const auto& w : words)
                if (!vocab.contains(w))
                    throw ValidationError("example " + id + ": token '" + w +
                                          "' not in vocabulary");
        };
        check_tokens(question);
        check_tokens(answer);
        if (oracle_answer(scene, question) != answer)
            throw ValidationError("example " + id + ": answer disagrees with oracle");
        for (const auto& step : chain.steps) {
            check_tokens(step.question);
            check_tokens(step.answer);
            if (oracle_answer(scene, step.question) != step.answer)
                throw ValidationError("example " + id +
                                      ": chain step disagrees with oracle");
        }
        if (classify_answer(answer) != answer_type)
            throw ValidationError("example " + id + ": answer_type mismatch");
    }
};

struct Dataset {
    std::vector<AugmentedExample> examples;

    size_t size() const { return examples.size(); }
};

namespace taskgen_detail {

inline std::vector<std::string> all_attr_words() {
    std::vector<std::string> words;
    for (int i = 0; i < kNumColors; ++i)
        words.emplace_back(color_name(static_cast<ColorKind>(i)));
    for (int i = 0; i < kNumShapes; ++i)
        words.emplace_back(shape_name(static_cast<ShapeKind>(i)));
    words.emplace_back("small");
    words.emplace_back("large");
    return words;
}

inline const std::vector<std::string>& dir_words() {
    static const std::vector<std::string> dirs = {"left", "right", "above", "below"};
    return dirs;
}

// Shapes occurring exactly once in the scene.
inline std::vector<std::string> unique_shapes(const Scene& scene) {
    std::vector<std::string> out;
    for (int i = 0; i < kNumShapes; ++i) {
        const std::string w{shape_name(static_cast<ShapeKind>(i))};
        if (oracle_detail::matching(scene, {w}).size() == 1) out.push_back(w);
    }
    return out;
}

struct RelationalPick {
    std::string color;
    std::string shape;
    std::string dir;
};

inline std::vector<RelationalPick> relational_candidates(const Scene& scene) {
    std::vector<RelationalPick> out;
    for (const auto& o : scene.objects) {
        const std::string c{color_name(o.color)}, s{shape_name(o.shape)};
        if (oracle_detail::matching(scene, {c, s}).size() != 1) continue;
        for (const auto& dir : dir_words()) {
            const auto [dr, dc] = oracle_detail::dir_delta(dir);
            const int r = o.row + dr, cc = o.col + dc;
            if (r < 0 || r >= kGridSide || cc < 0 || cc >= kGridSide) continue;
            if (scene.at(r, cc) == nullptr) continue;
            out.push_back({c, s, dir});
        }
    }
    return out;
}

inline std::vector<std::string> words(std::initializer_list<std::string> list) {
    return std::vector<std::string>(list);
}

}  // namespace taskgen_detail

// Builds one depth-K example: question template chosen per depth, every chain
// answer and the final answer labeled by the oracle, and the scene resampled
// (cap 100) until the chosen template family is well posed.
inline AugmentedExample generate_example(uint64_t seed, int depth,
                                         int k_max = kDefaultKMax) {
    using namespace taskgen_detail;
    if (depth < 1 || depth > k_max)
        throw ConfigError("depth " + std::to_string(depth) + " outside [1, " +
                          std::to_string(k_max) + "]");
    Rng rng(derive_seed(seed, "template", static_cast<uint64_t>(depth)));

    for (int attempt = 0; attempt < kResampleCap; ++attempt) {
        const uint64_t scene_seed =
            derive_seed(seed, "scene", static_cast<uint64_t>(depth) * 1024 + attempt);
        Scene scene = generate_scene(scene_seed);

        AugmentedExample ex;
        ex.scene = scene;

        if (depth == 1) {
            // Attribute lookup on a shape that occurs exactly once, posed on
            // low-clutter scenes: shallow questions are kept genuinely
            // shallow so depth tracks reasoning load, not scene noise.
            if (scene.objects.size() > 3) continue;
            auto shapes = unique_shapes(scene);
            if (shapes.empty()) continue;
            const std::string shape = shapes[rng.next_int(static_cast<int>(shapes.size()))];
            const std::string asked = rng.next_bool() ? "color" : "size";
            ex.question = words({"what", asked, "is", "the", shape});
            ChainStep s1;
            s1.question = words({"where", "is", "the", shape});
            s1.answer = oracle_answer(scene, s1.question);
            ex.chain.steps = {s1};
        } else if (depth == 2) {
            if (rng.next_bool()) {
                // Filtered counting.
                auto attrs = all_attr_words();
                const std::string attr = attrs[rng.next_int(static_cast<int>(attrs.size()))];
                ex.question = words({"how", "many", attr, "shapes"});
                ChainStep s1, s2;
                s1.question = words({"which", "shapes", "are", attr});
                s1.answer = oracle_answer(scene, s1.question);
                s2.question = words({"how", "many", "shapes", "are", attr});
                s2.answer = oracle_answer(scene, s2.question);
                ex.chain.steps = {s1, s2};
            } else {
                // Existence, kept near 50/50 yes/no by picking the referent
                // from present or absent (color, shape) pairs.
                std::vector<std::pair<std::string, std::string>> present, absent;
                for (int c = 0; c < kNumColors; ++c) {
                    for (int s = 0; s < kNumShapes; ++s) {
                        std::pair<std::string, std::string> pair{
                            std::string(color_name(static_cast<ColorKind>(c))),
                            std::string(shape_name(static_cast<ShapeKind>(s)))};
                        if (oracle_detail::matching(scene, {pair.first, pair.second}).empty())
                            absent.push_back(pair);
                        else
                            present.push_back(pair);
                    }
                }
                const bool want_yes = rng.next_bool();
                const auto& side = want_yes ? (present.empty() ? absent : present)
                                            : (absent.empty() ? present : absent);
                const auto pick = side[rng.next_int(static_cast<int>(side.size()))];
                ex.question = words({"is", "there", "a", pick.first, pick.second});
                ChainStep s1, s2;
                s1.question = words({"how", "many", pick.first, pick.second, "shapes"});
                s1.answer = oracle_answer(scene, s1.question);
                s2.question = words({"is", s1.answer[0], "more", "than", "0"});
                s2.answer = oracle_answer(scene, s2.question);
                ex.chain.steps = {s1, s2};
            }
        } else if (depth == 3) {
            // Relational attribute: unique (color, shape) referent with an
            // occupied in-grid neighbor.
            auto cands = relational_candidates(scene);
            if (cands.empty()) continue;
            const auto pick = cands[rng.next_int(static_cast<int>(cands.size()))];
            const std::string asked = rng.next_bool() ? "shape" : "color";
            ex.question = words({"what", asked, "is", pick.dir, "of", "the",
                                 pick.color, pick.shape});
            ChainStep s1, s2, s3;
            s1.question = words({"where", "is", "the", pick.color, pick.shape});
            s1.answer = oracle_answer(scene, s1.question);
            s2.question = words({"where", "is", "the", "shape", pick.dir, "of", "the",
                                 pick.color, pick.shape});
            s2.answer = oracle_answer(scene, s2.question);
            s3.question = words({"what", asked, "is", "at", "row", s2.answer[1],
                                 "col", s2.answer[3]});
            s3.answer = oracle_answer(scene, s3.question);
            ex.chain.steps = {s1, s2, s3};
        } else {
            // Comparison over two attribute words of the same category,
            // balanced between yes and no outcomes where the scene allows.
            std::vector<std::pair<std::string, std::string>> yes_pairs, no_pairs;
            auto consider = [&](const std::string& a, const std::string& b) {
                const auto ca = oracle_detail::matching(scene, {a}).size();
                const auto cb = oracle_detail::matching(scene, {b}).size();
                (ca > cb ? yes_pairs : no_pairs).emplace_back(a, b);
            };
            for (int i = 0; i < kNumColors; ++i)
                for (int j = 0; j < kNumColors; ++j)
                    if (i != j)
                        consider(std::string(color_name(static_cast<ColorKind>(i))),
                                 std::string(color_name(static_cast<ColorKind>(j))));
            for (int i = 0; i < kNumShapes; ++i)
                for (int j = 0; j < kNumShapes; ++j)
                    if (i != j)
                        consider(std::string(shape_name(static_cast<ShapeKind>(i))),
                                 std::string(shape_name(static_cast<ShapeKind>(j))));
            const bool want_yes = rng.next_bool();
            const auto& side = want_yes ? (yes_pairs.empty() ? no_pairs : yes_pairs)
                                        : (no_pairs.empty() ? yes_pairs : no_pairs);
            const auto [w1, w2] = side[rng.next_int(static_cast<int>(side.size()))];
            ex.question = words({"are", "there", "more", w1, "shapes", "than",
                                 w2, "shapes"});
            ChainStep s1, s2, s3, s4;
            s1.question = words({"which", "shapes", "are", w1});
            s1.answer = oracle_answer(scene, s1.question);
            s2.question = words({"how", "many", "shapes", "are", w1});
            s2.answer = oracle_answer(scene, s2.question);
            s3.question = words({"how", "many", "shapes", "are", w2});
            s3.answer = oracle_answer(scene, s3.question);
            s4.question = words({"is", s2.answer[0], "more", "than", s3.answer[0]});
            s4.answer = oracle_answer(scene, s4.question);
            ex.chain.steps = {s1, s2, s3, s4};
        }

        ex.answer = oracle_answer(scene, ex.question);
        ex.depth = ex.chain.depth();
        ex.answer_type = classify_answer(ex.answer);
        ex.image = render_scene(scene);
        char buf[32];
        std::snprintf(buf, sizeof(buf), "ex-%016llx-d%d",
                      static_cast<unsigned long long>(seed), depth);
        ex.id = buf;
        ex.validate(Vocabulary::standard());
        return ex;
    }
    throw TaskGenError("no well-posed depth-" + std::to_string(depth) +
                       " question after " + std::to_string(kResampleCap) +
                       " scene resamples (seed " + std::to_string(seed) + ")");
}

// Deterministic corpus: example i draws its own seed and depth streams, so
// generation can be sharded by index without changing the output.
inline Dataset make_dataset(uint64_t root_seed, int count,
                            const std::vector<double>& depth_weights,
                            int k_max = kDefaultKMax) {
    if (count <= 0) throw ConfigError("dataset size must be positive");
    if (depth_weights.size() != static_cast<size_t>(k_max))
        throw ConfigError("depth_mix must list one weight per depth 1..k_max");
    double total = 0.0;
    for (double w : depth_weights) {
        if (w < 0.0 || !std::isfinite(w))
            throw ConfigError("depth_mix weights must be finite and nonnegative");
        total += w;
    }
    if (total <= 0.0) throw ConfigError("depth_mix must have positive total weight");

    Dataset ds;
    ds.examples.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        Rng depth_rng(derive_seed(root_seed, "depth", static_cast<uint64_t>(i)));
        double u = depth_rng.next_double() * total;
        int depth = 1;
        for (int d = 0; d < k_max; ++d) {
            u -= depth_weights[static_cast<size_t>(d)];
            if (u < 0.0) {
                depth = d + 1;
                break;
            }
            depth = k_max;
        }
        auto ex = generate_example(derive_seed(root_seed, "example", static_cast<uint64_t>(i)),
                                   depth, k_max);
        char buf[32];
        std::snprintf(buf, sizeof(buf), "ex-%06d", i);
        ex.id = buf;
        ds.examples.push_back(std::move(ex));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Line-delimited JSON serialization. Pixels are derived data and are not
// stored; images are re-rendered from the scene on load.
// ---------------------------------------------------------------------------

inline std::string join_words(const std::vector<std::string>& words) {
    std::string out;
    for (const auto& w : words) {
        if (!out.empty()) out += ' ';
        out += w;
    }
    return out;
}

inline nlohmann::json example_to_json(const AugmentedExample& ex) {
    nlohmann::json scene = nlohmann::json::array();
    for (const auto& o : ex.scene.objects) {
        scene.push_back({{"shape", shape_name(o.shape)},
                         {"color", color_name(o.color)},
                         {"size", size_name(o.size)},
                         {"row", o.row},
                         {"col", o.col}});
    }
    nlohmann::json chain = nlohmann::json::array();
    for (const auto& step : ex.chain.steps)
        chain.push_back({{"q", join_words(step.question)}, {"a", join_words(step.answer)}});
    return {{"id", ex.id},
            {"seed", ex.scene.seed},
            {"depth", ex.depth},
            {"answer_type", answer_type_name(ex.answer_type)},
            {"scene", scene},
            {"question", join_words(ex.question)},
            {"chain", chain},
            {"answer", join_words(ex.answer)}};
}

inline AugmentedExample example_from_json(const nlohmann::json& j) {
    AugmentedExample ex;
    ex.id = j.at("id").get<std::string>();
    ex.scene.seed = j.at("seed").get<uint64_t>();
    for (const auto& o : j.at("scene")) {
        SceneObject obj;
        obj.shape = shape_from_name(o.at("shape").get<std::string>());
        obj.color = color_from_name(o.at("color").get<std::string>());
        obj.size = size_from_name(o.at("size").get<std::string>());
        obj.row = o.at("row").get<int>();
        obj.col = o.at("col").get<int>();
        ex.scene.objects.push_back(obj);
    }
    ex.scene.validate();
    ex.depth = j.at("depth").get<int>();
    ex.answer_type = answer_type_from_name(j.at("answer_type").get<std::string>());
    ex.question = Vocabulary::split_words(j.at("question").get<std::string>());
    for (const auto& s : j.at("chain")) {
        ChainStep step;
        step.question = Vocabulary::split_words(s.at("q").get<std::string>());
        step.answer = Vocabulary::split_words(s.at("a").get<std::string>());
        ex.chain.steps.push_back(std::move(step));
    }
    ex.answer = Vocabulary::split_words(j.at("answer").get<std::string>());
    ex.image = render_scene(ex.scene);
    return ex;
}

inline void write_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot open for writing: " + path);
    for (const auto& ex : ds.examples) out << example_to_json(ex).dump() << '\n';
    if (!out) throw ValidationError("write failed: " + path);
}

inline Dataset read_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open dataset file: " + path);
    Dataset ds;
    std::unordered_set<std::string> ids;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        AugmentedExample ex;
        try {
            ex = example_from_json(nlohmann::json::parse(line));
        } catch (const ValidationError&) {
            throw;
        } catch (const std::exception& e) {
            throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        if (!ids.insert(ex.id).second)
            throw ValidationError(path + ":" + std::to_string(line_no) +
                                  ": duplicate id " + ex.id);
        ds.examples.push_back(std::move(ex));
    }
    return ds;
}

}  // namespace selfq
