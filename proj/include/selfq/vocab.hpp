#pragma once

#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "selfq/errors.hpp"

namespace selfq {

// Closed token set shared by the task generator, the model and the decoder.
// Specials occupy fixed indices 0..5; everything else is a task word.
class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kSubq = 3;
    static constexpr int kSuba = 4;
    static constexpr int kFinal = 5;
    static constexpr int kNumSpecials = 6;

    explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
        static const char* kSpecials[kNumSpecials] = {"<pad>", "<bos>", "<eos>",
                                                      "<subq>", "<suba>", "<final>"};
        if (tokens_.size() < kNumSpecials)
            throw ConfigError("vocabulary must contain the six specials");
        for (int i = 0; i < kNumSpecials; ++i)
            if (tokens_[static_cast<size_t>(i)] != kSpecials[i])
                throw ConfigError("special tokens must occupy indices 0..5");
        for (size_t i = 0; i < tokens_.size(); ++i) {
            if (!index_.emplace(tokens_[i], static_cast<int>(i)).second)
                throw ConfigError("duplicate token: " + tokens_[i]);
        }
    }

    // The closed vocabulary of the synthetic task grammar.
    static const Vocabulary& standard() {
        static const Vocabulary v{{
            "<pad>", "<bos>", "<eos>", "<subq>", "<suba>", "<final>",
            "0", "1", "2", "3", "4", "5", "6",
            "yes", "no", "none",
            "circle", "square", "triangle",
            "red", "green", "blue", "yellow",
            "small", "large",
            "what", "is", "the", "at", "row", "col", "where", "which", "are",
            "how", "many", "more", "than", "there", "a", "of",
            "shape", "shapes", "size", "color",
            "left", "right", "above", "below",
        }};
        return v;
    }

    int size() const { return static_cast<int>(tokens_.size()); }

    int id(std::string_view token) const {
        auto it = index_.find(std::string(token));
        if (it == index_.end())
            throw IndexError("unknown token: " + std::string(token));
        return it->second;
    }

    bool contains(std::string_view token) const {
        return index_.count(std::string(token)) > 0;
    }

    const std::string& token(int id) const {
        if (id < 0 || id >= size())
            throw IndexError("token id out of range: " + std::to_string(id));
        return tokens_[static_cast<size_t>(id)];
    }

    static bool is_special(int id) { return id >= 0 && id < kNumSpecials; }

    std::vector<int> encode(const std::vector<std::string>& words) const {
        std::vector<int> out;
        out.reserve(words.size());
        for (const auto& w : words) out.push_back(id(w));
        return out;
    }

    std::vector<int> encode_text(std::string_view text) const {
        return encode(split_words(text));
    }

    std::string decode(const std::vector<int>& ids) const {
        std::string out;
        for (int i : ids) {
            if (!out.empty()) out += ' ';
            out += token(i);
        }
        return out;
    }

    static std::vector<std::string> split_words(std::string_view text) {
        std::vector<std::string> words;
        std::istringstream in{std::string(text)};
        std::string w;
        while (in >> w) words.push_back(w);
        return words;
    }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

}  // namespace selfq
