#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "selfq/errors.hpp"
#include "selfq/rng.hpp"

namespace selfq {

inline constexpr int kGridSide = 4;
inline constexpr int kGridCells = kGridSide * kGridSide;
inline constexpr int kMaxObjects = 6;

enum class ShapeKind : uint8_t { circle, square, triangle };
enum class ColorKind : uint8_t { red, green, blue, yellow };
enum class SizeKind : uint8_t { small, large };

inline constexpr int kNumShapes = 3;
inline constexpr int kNumColors = 4;
inline constexpr int kNumSizes = 2;

inline std::string_view shape_name(ShapeKind s) {
    static constexpr std::string_view names[] = {"circle", "square", "triangle"};
    return names[static_cast<int>(s)];
}
inline std::string_view color_name(ColorKind c) {
    static constexpr std::string_view names[] = {"red", "green", "blue", "yellow"};
    return names[static_cast<int>(c)];
}
inline std::string_view size_name(SizeKind s) {
    return static_cast<int>(s) == 0 ? "small" : "large";
}

inline ShapeKind shape_from_name(std::string_view n) {
    for (int i = 0; i < kNumShapes; ++i)
        if (shape_name(static_cast<ShapeKind>(i)) == n) return static_cast<ShapeKind>(i);
    throw ParseError("unknown shape: " + std::string(n));
}
inline ColorKind color_from_name(std::string_view n) {
    for (int i = 0; i < kNumColors; ++i)
        if (color_name(static_cast<ColorKind>(i)) == n) return static_cast<ColorKind>(i);
    throw ParseError("unknown color: " + std::string(n));
}
inline SizeKind size_from_name(std::string_view n) {
    for (int i = 0; i < kNumSizes; ++i)
        if (size_name(static_cast<SizeKind>(i)) == n) return static_cast<SizeKind>(i);
    throw ParseError("unknown size: " + std::string(n));
}

struct SceneObject {
    ShapeKind shape;
    ColorKind color;
    SizeKind size;
    int row;
    int col;

    bool operator==(const SceneObject&) const = default;
};

// A scene is a canonical (row-major) list of objects on distinct grid cells.
struct Scene {
    std::vector<SceneObject> objects;
    uint64_t seed = 0;

    bool operator==(const Scene&) const = default;

    void validate() const {
        if (objects.empty() || objects.size() > kMaxObjects)
            throw ValidationError("scene must have 1..6 objects");
        for (size_t i = 0; i < objects.size(); ++i) {
            const auto& o = objects[i];
            if (o.row < 0 || o.row >= kGridSide || o.col < 0 || o.col >= kGridSide)
                throw ValidationError("object cell out of grid");
            if (i > 0) {
                const auto& p = objects[i - 1];
                if (std::pair{p.row, p.col} >= std::pair{o.row, o.col})
                    throw ValidationError("objects must be row-major and on distinct cells");
            }
        }
    }

    const SceneObject* at(int row, int col) const {
        for (const auto& o : objects)
            if (o.row == row && o.col == col) return &o;
        return nullptr;
    }
};

inline Scene generate_scene(uint64_t seed) {
    Rng rng(derive_seed(seed, "scene"));
    const int count = 1 + rng.next_int(kMaxObjects);
    // Fisher-Yates over the 16 cells, take the first `count`.
    std::array<int, kGridCells> cells{};
    for (int i = 0; i < kGridCells; ++i) cells[static_cast<size_t>(i)] = i;
    for (int i = kGridCells - 1; i > 0; --i)
        std::swap(cells[static_cast<size_t>(i)], cells[static_cast<size_t>(rng.next_int(i + 1))]);

    Scene scene;
    scene.seed = seed;
    for (int i = 0; i < count; ++i) {
        SceneObject o;
        o.row = cells[static_cast<size_t>(i)] / kGridSide;
        o.col = cells[static_cast<size_t>(i)] % kGridSide;
        o.shape = static_cast<ShapeKind>(rng.next_int(kNumShapes));
        o.color = static_cast<ColorKind>(rng.next_int(kNumColors));
        o.size = static_cast<SizeKind>(rng.next_int(kNumSizes));
        scene.objects.push_back(o);
    }
    std::sort(scene.objects.begin(), scene.objects.end(),
              [](const SceneObject& a, const SceneObject& b) {
                  return std::pair{a.row, a.col} < std::pair{b.row, b.col};
              });
    scene.validate();
    return scene;
}

// Dense pixel image, values in [0,1], row-major (row, col, channel).
struct Image {
    int side = 0;
    int channels = 0;
    std::vector<double> pixels;

    double at(int r, int c, int ch) const {
        return pixels[(static_cast<size_t>(r) * side + c) * channels + ch];
    }
    double& at(int r, int c, int ch) {
        return pixels[(static_cast<size_t>(r) * side + c) * channels + ch];
    }
};

namespace detail {

// Glyph masks over a cell block: distinct fill patterns per shape at both
// sizes, so every (shape, size) pair is visually separable.
inline bool glyph_filled(ShapeKind shape, SizeKind size, int i, int j, int cell) {
    if (size == SizeKind::large) {
        switch (shape) {
            case ShapeKind::square:
                return true;
            case ShapeKind::circle:  // full block minus the four corners
                return !((i == 0 || i == cell - 1) && (j == 0 || j == cell - 1));
            case ShapeKind::triangle:  // lower-left triangle
                return j <= i;
        }
    }
    // Small: drawn in the centered half-size block.
    const int lo = cell / 4;
    const int hi = cell - cell / 4;
    if (i < lo || i >= hi || j < lo || j >= hi) return false;
    const int si = i - lo, sj = j - lo;
    const int small_side = hi - lo;
    switch (shape) {
        case ShapeKind::square:
            return true;
        case ShapeKind::circle:  // diagonal pair
            return si == sj;
        case ShapeKind::triangle:
            return sj <= si;
    }
    return false;
}

inline void color_channels(ColorKind c, double rgb[3]) {
    rgb[0] = rgb[1] = rgb[2] = 0.0;
    switch (c) {
        case ColorKind::red: rgb[0] = 1.0; break;
        case ColorKind::green: rgb[1] = 1.0; break;
        case ColorKind::blue: rgb[2] = 1.0; break;
        case ColorKind::yellow: rgb[0] = rgb[1] = 1.0; break;
    }
}

}  // namespace detail

inline Image render_scene(const Scene& scene, int side = 16, int channels = 3) {
    if (side % kGridSide != 0) throw ConfigError("image side must be divisible by 4");
    if (channels != 3) throw ConfigError("renderer draws 3-channel images");
    const int cell = side / kGridSide;
    Image img;
    img.side = side;
    img.channels = channels;
    img.pixels.assign(static_cast<size_t>(side) * side * channels, 0.0);
    for (const auto& o : scene.objects) {
        double rgb[3];
        detail::color_channels(o.color, rgb);
        for (int i = 0; i < cell; ++i) {
            for (int j = 0; j < cell; ++j) {
                if (!detail::glyph_filled(o.shape, o.size, i, j, cell)) continue;
                const int r = o.row * cell + i;
                const int c = o.col * cell + j;
                for (int ch = 0; ch < channels; ++ch)
                    img.at(r, c, ch) = rgb[ch];
            }
        }
    }
    return img;
}

}  // namespace selfq
