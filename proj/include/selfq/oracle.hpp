#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "selfq/errors.hpp"
#include "selfq/scene.hpp"

namespace selfq {

// Brute-force referee over the closed question grammar. Every answer is
// computed by exhaustive evaluation of scene.objects; the task generator
// labels its data with this oracle and evaluation re-checks generated chains
// against it.
//
// Grammar (token-level patterns):
//   what color is the <shape>
//   what size is the <shape>
//   what shape is at row <d> col <d>
//   what color is at row <d> col <d>
//   where is the <shape>
//   where is the <color> <shape>
//   where is the shape <dir> of the <color> <shape>
//   which shapes are <attr>
//   how many <attr> [<attr>] shapes
//   how many shapes are <attr>
//   is there a <color> <shape>
//   are there more <attr> shapes than <attr> shapes
//   is <d> more than <d>
//   what shape is <dir> of the <color> <shape>
//   what color is <dir> of the <color> <shape>

namespace oracle_detail {

inline bool is_shape_word(const std::string& w) {
    return w == "circle" || w == "square" || w == "triangle";
}
inline bool is_color_word(const std::string& w) {
    return w == "red" || w == "green" || w == "blue" || w == "yellow";
}
inline bool is_size_word(const std::string& w) {
    return w == "small" || w == "large";
}
inline bool is_attr_word(const std::string& w) {
    return is_shape_word(w) || is_color_word(w) || is_size_word(w);
}
inline bool is_dir_word(const std::string& w) {
    return w == "left" || w == "right" || w == "above" || w == "below";
}

inline std::optional<int> parse_digit(const std::string& w) {
    if (w.size() == 1 && w[0] >= '0' && w[0] <= '9') return w[0] - '0';
    return std::nullopt;
}

inline bool object_has_attr(const SceneObject& o, const std::string& attr) {
    if (is_shape_word(attr)) return shape_name(o.shape) == attr;
    if (is_color_word(attr)) return color_name(o.color) == attr;
    return size_name(o.size) == attr;
}

inline std::vector<const SceneObject*> matching(const Scene& scene,
                                                const std::vector<std::string>& attrs) {
    std::vector<const SceneObject*> out;
    for (const auto& o : scene.objects) {
        bool ok = true;
        for (const auto& a : attrs)
            if (!object_has_attr(o, a)) ok = false;
        if (ok) out.push_back(&o);
    }
    return out;
}

inline const SceneObject& unique_match(const Scene& scene,
                                       const std::vector<std::string>& attrs,
                                       const std::string& what) {
    auto m = matching(scene, attrs);
    if (m.size() != 1)
        throw OracleError("referent '" + what + "' matches " +
                          std::to_string(m.size()) + " objects");
    return *m[0];
}

inline std::pair<int, int> dir_delta(const std::string& dir) {
    if (dir == "left") return {0, -1};
    if (dir == "right") return {0, 1};
    if (dir == "above") return {-1, 0};
    return {1, 0};
}

inline std::vector<std::string> coords_answer(int row, int col) {
    return {"row", std::to_string(row), "col", std::to_string(col)};
}

inline const SceneObject& neighbor_of(const Scene& scene, const std::string& dir,
                                      const std::string& color, const std::string& shape) {
    const auto& ref = unique_match(scene, {color, shape}, color + " " + shape);
    const auto [dr, dc] = dir_delta(dir);
    const int r = ref.row + dr, c = ref.col + dc;
    if (r < 0 || r >= kGridSide || c < 0 || c >= kGridSide)
        throw OracleError("neighbor cell is outside the grid");
    const SceneObject* n = scene.at(r, c);
    if (n == nullptr) throw OracleError("neighbor cell is empty");
    return *n;
}

}  // namespace oracle_detail

inline std::vector<std::string> oracle_answer(const Scene& scene,
                                              const std::vector<std::string>& q) {
    using namespace oracle_detail;
    const size_t n = q.size();
    auto fail = [&] {
        std::string text;
        for (const auto& w : q) {
            if (!text.empty()) text += ' ';
            text += w;
        }
        throw GrammarError("question does not parse: '" + text + "'");
    };

    // is <d> more than <d>  -- scene-independent arithmetic step
    if (n == 5 && q[0] == "is" && q[2] == "more" && q[3] == "than") {
        auto a = parse_digit(q[1]), b = parse_digit(q[4]);
        if (!a || !b) fail();
        return {*a > *b ? "yes" : "no"};
    }

    // is there a <color> <shape>
    if (n == 5 && q[0] == "is" && q[1] == "there" && q[2] == "a") {
        if (!is_color_word(q[3]) || !is_shape_word(q[4])) fail();
        return {matching(scene, {q[3], q[4]}).empty() ? "no" : "yes"};
    }

    // are there more <attr> shapes than <attr> shapes
    if (n == 8 && q[0] == "are" && q[1] == "there" && q[2] == "more" &&
        q[4] == "shapes" && q[5] == "than" && q[7] == "shapes") {
        if (!is_attr_word(q[3]) || !is_attr_word(q[6])) fail();
        const auto c1 = matching(scene, {q[3]}).size();
        const auto c2 = matching(scene, {q[6]}).size();
        return {c1 > c2 ? "yes" : "no"};
    }

    // which shapes are <attr>
    if (n == 4 && q[0] == "which" && q[1] == "shapes" && q[2] == "are") {
        if (!is_attr_word(q[3])) fail();
        auto m = matching(scene, {q[3]});
        if (m.empty()) return {"none"};
        std::vector<std::string> out;
        for (const auto* o : m) out.emplace_back(shape_name(o->shape));
        return out;
    }

    // how many shapes are <attr>
    if (n == 5 && q[0] == "how" && q[1] == "many" && q[2] == "shapes" && q[3] == "are") {
        if (!is_attr_word(q[4])) fail();
        return {std::to_string(matching(scene, {q[4]}).size())};
    }

    // how many <attr> [<attr>] shapes
    if ((n == 4 || n == 5) && q[0] == "how" && q[1] == "many" && q[n - 1] == "shapes") {
        std::vector<std::string> attrs(q.begin() + 2, q.end() - 1);
        for (const auto& a : attrs)
            if (!is_attr_word(a)) fail();
        return {std::to_string(matching(scene, attrs).size())};
    }

    // where is the ...
    if (n >= 4 && q[0] == "where" && q[1] == "is" && q[2] == "the") {
        // where is the shape <dir> of the <color> <shape>
        if (n == 9 && q[3] == "shape" && is_dir_word(q[4]) && q[5] == "of" &&
            q[6] == "the" && is_color_word(q[7]) && is_shape_word(q[8])) {
            const auto& nb = neighbor_of(scene, q[4], q[7], q[8]);
            return coords_answer(nb.row, nb.col);
        }
        // where is the <shape>
        if (n == 4 && is_shape_word(q[3])) {
            const auto& o = unique_match(scene, {q[3]}, q[3]);
            return coords_answer(o.row, o.col);
        }
        // where is the <color> <shape>
        if (n == 5 && is_color_word(q[3]) && is_shape_word(q[4])) {
            const auto& o = unique_match(scene, {q[3], q[4]}, q[3] + " " + q[4]);
            return coords_answer(o.row, o.col);
        }
        fail();
    }

    // what ... forms
    if (n >= 5 && q[0] == "what" && (q[1] == "color" || q[1] == "size" || q[1] == "shape") &&
        q[2] == "is") {
        const std::string& asked = q[1];
        auto attr_of = [&](const SceneObject& o) -> std::vector<std::string> {
            if (asked == "color") return {std::string(color_name(o.color))};
            if (asked == "size") return {std::string(size_name(o.size))};
            return {std::string(shape_name(o.shape))};
        };
        // what <attr> is at row <d> col <d>
        if (n == 8 && q[3] == "at" && q[4] == "row" && q[6] == "col") {
            auto r = parse_digit(q[5]), c = parse_digit(q[7]);
            if (!r || !c) fail();
            if (*r >= kGridSide || *c >= kGridSide)
                throw OracleError("cell outside the grid");
            const SceneObject* o = scene.at(*r, *c);
            if (o == nullptr) throw OracleError("queried cell is empty");
            return attr_of(*o);
        }
        // what <attr> is <dir> of the <color> <shape>
        if (n == 8 && is_dir_word(q[3]) && q[4] == "of" && q[5] == "the" &&
            is_color_word(q[6]) && is_shape_word(q[7])) {
            return attr_of(neighbor_of(scene, q[3], q[6], q[7]));
        }
        // what <attr> is the <shape>
        if (n == 5 && q[3] == "the" && is_shape_word(q[4])) {
            return attr_of(unique_match(scene, {q[4]}, q[4]));
        }
        fail();
    }

    fail();
    return {};  // unreachable
}

enum class AnswerType { yes_no, number, other };

inline std::string_view answer_type_name(AnswerType t) {
    switch (t) {
        case AnswerType::yes_no: return "yes_no";
        case AnswerType::number: return "number";
        case AnswerType::other: return "other";
    }
    return "other";
}

inline AnswerType answer_type_from_name(std::string_view n) {
    if (n == "yes_no") return AnswerType::yes_no;
    if (n == "number") return AnswerType::number;
    if (n == "other") return AnswerType::other;
    throw ParseError("unknown answer type: " + std::string(n));
}

inline AnswerType classify_answer(const std::vector<std::string>& answer) {
    if (answer.size() == 1) {
        if (answer[0] == "yes" || answer[0] == "no") return AnswerType::yes_no;
        if (oracle_detail::parse_digit(answer[0])) return AnswerType::number;
    }
    return AnswerType::other;
}

}  // namespace selfq
