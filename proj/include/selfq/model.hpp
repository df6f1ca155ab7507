#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "selfq/errors.hpp"
#include "selfq/rng.hpp"
#include "selfq/scene.hpp"
#include "selfq/tensor.hpp"
#include "selfq/vocab.hpp"

namespace selfq {

// Additive attention bias value for banned positions. Finite on purpose:
// exp(x - max) underflows to exactly 0 and the no-NaN invariant holds.
inline constexpr double kAttnBan = -1e30;

struct ModelConfig {
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 4;
    int vocab_size = 0;
    int image_side = 16;
    int channels = 3;
    int patch_size = 4;
    int max_seq_len = 128;
    uint64_t seed = 0;

    int num_patches() const {
        const int per_side = image_side / patch_size;
        return per_side * per_side;
    }
    int patch_dim() const { return patch_size * patch_size * channels; }
    int head_dim() const { return d_model / n_heads; }
    int max_text_len() const { return max_seq_len - num_patches(); }

    void validate() const {
        if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || vocab_size <= 0 ||
            image_side <= 0 || channels <= 0 || patch_size <= 0 || max_seq_len <= 0)
            throw ConfigError("model config fields must be positive");
        if (d_model % n_heads != 0)
            throw ConfigError("d_model must be divisible by n_heads");
        if (image_side % patch_size != 0)
            throw ConfigError("image_side must be divisible by patch_size");
        if (max_seq_len < num_patches() + 2)
            throw ConfigError("max_seq_len must cover the visual prefix plus two tokens");
        if (vocab_size < Vocabulary::kNumSpecials + 1)
            throw ConfigError("vocab_size too small for the special tokens");
    }

    // The desk-scale default: trains in minutes on one CPU core.
    static ModelConfig desk_default(uint64_t seed = 0) {
        ModelConfig c;
        c.vocab_size = Vocabulary::standard().size();
        c.seed = seed;
        return c;
    }

    bool operator==(const ModelConfig&) const = default;
};

// Named parameter tensors. Tensor handles are shared; use clone() when an
// independent copy of the weights is needed.
struct ModelParams {
    ModelConfig config;
    std::map<std::string, Tensor> by_path;

    const Tensor& at(const std::string& path) const {
        auto it = by_path.find(path);
        if (it == by_path.end()) throw ConfigError("unknown parameter path: " + path);
        return it->second;
    }

    ModelParams clone() const {
        ModelParams copy;
        copy.config = config;
        for (const auto& [path, t] : by_path)
            copy.by_path.emplace(path, Tensor::param(t.shape(), t.values()));
        return copy;
    }
};

// Parameter paths and shapes in architecture order. Everything about the
// parameter set is a pure function of the config.
inline std::vector<std::pair<std::string, Shape>> param_layout(const ModelConfig& c) {
    std::vector<std::pair<std::string, Shape>> out;
    out.emplace_back("patch_embed.weight", Shape{c.patch_dim(), c.d_model});
    out.emplace_back("patch_embed.bias", Shape{c.d_model});
    out.emplace_back("pos_visual", Shape{c.num_patches(), c.d_model});
    out.emplace_back("token_embed", Shape{c.vocab_size, c.d_model});
    out.emplace_back("pos_text", Shape{c.max_text_len(), c.d_model});
    for (int l = 0; l < c.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        out.emplace_back(p + "ln1.gain", Shape{c.d_model});
        out.emplace_back(p + "ln1.bias", Shape{c.d_model});
        for (const char* name : {"q", "k", "v", "o"}) {
            out.emplace_back(p + "attn." + name + ".weight", Shape{c.d_model, c.d_model});
            out.emplace_back(p + "attn." + name + ".bias", Shape{c.d_model});
        }
        out.emplace_back(p + "ln2.gain", Shape{c.d_model});
        out.emplace_back(p + "ln2.bias", Shape{c.d_model});
        out.emplace_back(p + "mlp.w1.weight", Shape{c.d_model, 4 * c.d_model});
        out.emplace_back(p + "mlp.w1.bias", Shape{4 * c.d_model});
        out.emplace_back(p + "mlp.w2.weight", Shape{4 * c.d_model, c.d_model});
        out.emplace_back(p + "mlp.w2.bias", Shape{c.d_model});
    }
    out.emplace_back("final_norm.gain", Shape{c.d_model});
    out.emplace_back("final_norm.bias", Shape{c.d_model});
    out.emplace_back("out_proj.weight", Shape{c.d_model, c.vocab_size});
    out.emplace_back("out_proj.bias", Shape{c.vocab_size});
    return out;
}

inline long param_count(const ModelConfig& config) {
    config.validate();
    long total = 0;
    for (const auto& [path, shape] : param_layout(config))
        total += static_cast<long>(numel(shape));
    return total;
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() &&
           s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Weights ~ N(0, 0.02); normalization gains 1; every bias 0. Each parameter
// draws from its own path-derived stream, so values do not depend on the
// order the parameters are created in.
inline ModelParams init_params(const ModelConfig& config) {
    config.validate();
    ModelParams params;
    params.config = config;
    for (const auto& [path, shape] : param_layout(config)) {
        std::vector<double> values(numel(shape));
        if (ends_with(path, ".gain")) {
            std::fill(values.begin(), values.end(), 1.0);
        } else if (ends_with(path, ".bias")) {
            // already zero
        } else {
            Rng rng(derive_seed(config.seed, "param:" + path));
            for (auto& v : values) v = 0.02 * rng.next_gaussian();
        }
        params.by_path.emplace(path, Tensor::param(shape, std::move(values)));
    }
    return params;
}

// Flatten image pixels into per-patch rows: patch (pr, pc), then pixel row,
// column, channel.
inline Tensor patchify(const ModelConfig& c, const Image& image) {
    if (image.side != c.image_side || image.channels != c.channels)
        throw ShapeError("image dimensions do not match the model config");
    const int ps = c.patch_size;
    const int per_side = c.image_side / ps;
    std::vector<double> data(static_cast<size_t>(c.num_patches()) * c.patch_dim());
    size_t w = 0;
    for (int pr = 0; pr < per_side; ++pr)
        for (int pc = 0; pc < per_side; ++pc)
            for (int i = 0; i < ps; ++i)
                for (int j = 0; j < ps; ++j)
                    for (int ch = 0; ch < c.channels; ++ch)
                        data[w++] = image.at(pr * ps + i, pc * ps + j, ch);
    return Tensor::constant({c.num_patches(), c.patch_dim()}, std::move(data));
}

// Visual token embeddings: linear patch projection plus learned positions.
inline Tensor encode_image(const ModelParams& params, const Image& image) {
    const auto& c = params.config;
    Tensor patches = patchify(c, image);
    Tensor projected = add_bias_rows(matmul(patches, params.at("patch_embed.weight")),
                                     params.at("patch_embed.bias"));
    return add(projected, params.at("pos_visual"));
}

// Additive causal bias over a length-s sequence: position t may attend to
// positions <= t.
inline Tensor causal_attn_bias(int s) {
    std::vector<double> m(static_cast<size_t>(s) * s, 0.0);
    for (int i = 0; i < s; ++i)
        for (int j = i + 1; j < s; ++j)
            m[static_cast<size_t>(i) * s + j] = kAttnBan;
    return Tensor::constant({s, s}, std::move(m));
}

namespace model_detail {

inline Tensor attention_block(const ModelParams& params, int layer, const Tensor& x,
                              const Tensor& attn_bias) {
    const auto& c = params.config;
    const std::string p = "layers." + std::to_string(layer) + ".";
    const int hd = c.head_dim();
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));

    Tensor h = layer_norm(x, params.at(p + "ln1.gain"), params.at(p + "ln1.bias"), 1e-5);
    Tensor q = add_bias_rows(matmul(h, params.at(p + "attn.q.weight")),
                             params.at(p + "attn.q.bias"));
    Tensor k = add_bias_rows(matmul(h, params.at(p + "attn.k.weight")),
                             params.at(p + "attn.k.bias"));
    Tensor v = add_bias_rows(matmul(h, params.at(p + "attn.v.weight")),
                             params.at(p + "attn.v.bias"));

    std::vector<Tensor> head_outputs;
    head_outputs.reserve(static_cast<size_t>(c.n_heads));
    for (int head = 0; head < c.n_heads; ++head) {
        Tensor qh = slice_cols(q, head * hd, hd);
        Tensor kh = slice_cols(k, head * hd, hd);
        Tensor vh = slice_cols(v, head * hd, hd);
        Tensor scores = add(scale(matmul(qh, transpose(kh)), att_scale), attn_bias);
        head_outputs.push_back(matmul(softmax(scores), vh));
    }
    Tensor merged = concat_cols(head_outputs);
    return add_bias_rows(matmul(merged, params.at(p + "attn.o.weight")),
                         params.at(p + "attn.o.bias"));
}

inline Tensor mlp_block(const ModelParams& params, int layer, const Tensor& x) {
    const std::string p = "layers." + std::to_string(layer) + ".";
    Tensor h = layer_norm(x, params.at(p + "ln2.gain"), params.at(p + "ln2.bias"), 1e-5);
    Tensor inner = gelu(add_bias_rows(matmul(h, params.at(p + "mlp.w1.weight")),
                                      params.at(p + "mlp.w1.bias")));
    return add_bias_rows(matmul(inner, params.at(p + "mlp.w2.weight")),
                         params.at(p + "mlp.w2.bias"));
}

}  // namespace model_detail

// Full forward pass: logits [T, vocab_size] over the text positions. The
// visual prefix is a read-only context and produces no logit rows. An
// optional attention bias (shape [S, S], S = num_patches + T) replaces the
// default causal bias; callers must keep it at least as restrictive as
// causality for the causal contract to hold.
inline Tensor forward(const ModelParams& params, const Image& image,
                      const std::vector<int>& token_ids,
                      const Tensor* attn_bias = nullptr) {
    const auto& c = params.config;
    const int t_len = static_cast<int>(token_ids.size());
    if (t_len == 0) throw ShapeError("forward: empty token sequence");
    const int s = c.num_patches() + t_len;
    if (s > c.max_seq_len)
        throw LengthError("sequence of " + std::to_string(s) +
                          " positions exceeds max_seq_len " +
                          std::to_string(c.max_seq_len));
    for (int id : token_ids)
        if (id < 0 || id >= c.vocab_size)
            throw IndexError("token id " + std::to_string(id) + " outside vocabulary");

    Tensor vis = encode_image(params, image);
    Tensor tok = add(gather_rows(params.at("token_embed"), token_ids),
                     slice_rows(params.at("pos_text"), 0, t_len));
    Tensor x = concat_rows({vis, tok});

    Tensor bias = attn_bias != nullptr ? *attn_bias : causal_attn_bias(s);
    if (bias.rank() != 2 || bias.dim(0) != s || bias.dim(1) != s)
        throw ShapeError("attention bias must be [S, S]");

    for (int layer = 0; layer < c.n_layers; ++layer) {
        x = add(x, model_detail::attention_block(params, layer, x, bias));
        x = add(x, model_detail::mlp_block(params, layer, x));
    }
    x = layer_norm(x, params.at("final_norm.gain"), params.at("final_norm.bias"), 1e-5);
    Tensor text = slice_rows(x, c.num_patches(), t_len);
    return add_bias_rows(matmul(text, params.at("out_proj.weight")),
                         params.at("out_proj.bias"));
}

}  // namespace selfq
