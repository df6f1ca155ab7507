#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "selfq/errors.hpp"
#include "selfq/evalharness.hpp"
#include "selfq/model.hpp"
#include "selfq/trainer.hpp"

namespace selfq {

// Flat key = value run configuration. Every key has a default; a config file
// and command-line flags override it (flags win). The effective map is echoed
// into each output directory so a run can be reproduced from its own echo.
class RunConfig {
public:
    RunConfig() : kv_(default_pairs()) {}

    static const std::map<std::string, std::string>& default_pairs() {
        static const std::map<std::string, std::string> defaults = {
            {"seed", "1"},
            {"workers", "1"},
            {"out_dir", "out"},
            {"data_dir", ""},
            {"ckpt_dir", ""},
            {"report_dir", ""},
            // data generation
            {"n_train", "4000"},
            {"n_eval", "1000"},
            {"k_max", "4"},
            {"depth_mix", "1,1,1,1"},
            // model
            {"d_model", "64"},
            {"n_layers", "2"},
            {"n_heads", "4"},
            {"vocab_size", "0"},  // 0 = task vocabulary size
            {"image_side", "16"},
            {"channels", "3"},
            {"patch_size", "4"},
            {"max_seq_len", "128"},
            // training
            {"learning_rate", "3e-4"},
            {"beta1", "0.9"},
            {"beta2", "0.999"},
            {"eps_opt", "1e-8"},
            {"weight_decay", "0.01"},
            {"batch_size", "16"},
            {"max_steps", "3000"},
            {"lambda_ans", "0.8"},
            {"lambda_final", "1.0"},
            {"augmentation_fraction", "1.0"},
            {"ablation_mode", "full"},
            {"clip_norm", "1.0"},
            {"strict_conditioning", "false"},
            {"eval_every", "0"},
            {"stop_token_acc", "0"},
            {"checkpoint_every", "500"},
            // evaluation / ablation
            {"mode", "self_question"},
            {"ablate_seeds", "1,2,3,4,5"},
            {"ablate_max_steps", "0"},  // 0 = use max_steps
        };
        return defaults;
    }

    void set(const std::string& key, const std::string& value) {
        auto it = kv_.find(key);
        if (it == kv_.end()) throw ConfigError("unknown config key '" + key + "'");
        it->second = value;
    }

    void load_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file: " + path);
        std::string line;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            const auto trimmed = trim(line);
            if (trimmed.empty()) continue;
            const auto eq = trimmed.find('=');
            if (eq == std::string::npos)
                throw ConfigError(path + ":" + std::to_string(line_no) +
                                  ": expected key = value");
            try {
                set(trim(trimmed.substr(0, eq)), trim(trimmed.substr(eq + 1)));
            } catch (const ConfigError& e) {
                throw ConfigError(path + ":" + std::to_string(line_no) + ": " + e.what());
            }
        }
    }

    const std::string& raw(const std::string& key) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) throw ConfigError("unknown config key '" + key + "'");
        return it->second;
    }

    long get_int(const std::string& key) const {
        try {
            size_t used = 0;
            const long v = std::stol(raw(key), &used);
            if (used != raw(key).size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config field '" + key + "' is not an integer: '" +
                              raw(key) + "'");
        }
    }

    uint64_t get_u64(const std::string& key) const {
        try {
            size_t used = 0;
            const uint64_t v = std::stoull(raw(key), &used);
            if (used != raw(key).size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config field '" + key + "' is not an unsigned integer: '" +
                              raw(key) + "'");
        }
    }

    double get_double(const std::string& key) const {
        try {
            size_t used = 0;
            const double v = std::stod(raw(key), &used);
            if (used != raw(key).size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config field '" + key + "' is not a number: '" +
                              raw(key) + "'");
        }
    }

    bool get_bool(const std::string& key) const {
        const auto& v = raw(key);
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        throw ConfigError("config field '" + key + "' is not a boolean: '" + v + "'");
    }

    std::vector<double> get_double_list(const std::string& key) const {
        std::vector<double> out;
        std::istringstream in(raw(key));
        std::string item;
        while (std::getline(in, item, ',')) {
            try {
                out.push_back(std::stod(trim(item)));
            } catch (const std::exception&) {
                throw ConfigError("config field '" + key + "' has a non-numeric entry: '" +
                                  item + "'");
            }
        }
        if (out.empty())
            throw ConfigError("config field '" + key + "' is empty");
        return out;
    }

    std::vector<uint64_t> get_u64_list(const std::string& key) const {
        std::vector<uint64_t> out;
        for (double v : get_double_list(key)) {
            if (v < 0 || v != std::floor(v))
                throw ConfigError("config field '" + key + "' must list unsigned integers");
            out.push_back(static_cast<uint64_t>(v));
        }
        return out;
    }

    // Resolved output directories: explicit settings win, otherwise children
    // of out_dir.
    std::string data_dir() const { return dir_or_default("data_dir", "data"); }
    std::string ckpt_dir() const { return dir_or_default("ckpt_dir", "ckpt"); }
    std::string report_dir() const { return dir_or_default("report_dir", "report"); }

    ModelConfig model_config() const {
        ModelConfig c;
        c.d_model = static_cast<int>(get_int("d_model"));
        c.n_layers = static_cast<int>(get_int("n_layers"));
        c.n_heads = static_cast<int>(get_int("n_heads"));
        const long v = get_int("vocab_size");
        c.vocab_size = v == 0 ? Vocabulary::standard().size() : static_cast<int>(v);
        c.image_side = static_cast<int>(get_int("image_side"));
        c.channels = static_cast<int>(get_int("channels"));
        c.patch_size = static_cast<int>(get_int("patch_size"));
        c.max_seq_len = static_cast<int>(get_int("max_seq_len"));
        c.seed = derive_seed(get_u64("seed"), "model");
        c.validate();
        return c;
    }

    TrainConfig train_config() const {
        TrainConfig t;
        t.learning_rate = get_double("learning_rate");
        t.beta1 = get_double("beta1");
        t.beta2 = get_double("beta2");
        t.eps_opt = get_double("eps_opt");
        t.weight_decay = get_double("weight_decay");
        t.batch_size = static_cast<int>(get_int("batch_size"));
        t.max_steps = static_cast<int>(get_int("max_steps"));
        t.seed = derive_seed(get_u64("seed"), "train");
        t.lambda_ans = get_double("lambda_ans");
        t.lambda_final = get_double("lambda_final");
        t.augmentation_fraction = get_double("augmentation_fraction");
        t.ablation_mode = ablation_mode_from_name(raw("ablation_mode"));
        t.clip_norm = get_double("clip_norm");
        t.strict_conditioning = get_bool("strict_conditioning");
        t.eval_every = static_cast<int>(get_int("eval_every"));
        t.stop_token_acc = get_double("stop_token_acc");
        t.validate();
        return t;
    }

    DataGenConfig data_config() const {
        DataGenConfig d;
        d.n_train = static_cast<int>(get_int("n_train"));
        d.n_eval = static_cast<int>(get_int("n_eval"));
        d.k_max = static_cast<int>(get_int("k_max"));
        d.depth_mix = get_double_list("depth_mix");
        if (d.n_train <= 0 || d.n_eval <= 0)
            throw ConfigError("config fields n_train/n_eval must be positive");
        if (d.depth_mix.size() != static_cast<size_t>(d.k_max))
            throw ConfigError("config field 'depth_mix' must list one weight per depth 1.." +
                              std::to_string(d.k_max));
        return d;
    }

    // Sorted key = value dump; loading it back reproduces this config.
    std::string echo_text() const {
        std::string out;
        for (const auto& [k, v] : kv_) {
            out += k;
            out += " = ";
            out += v;
            out += '\n';
        }
        return out;
    }

    void echo_to(const std::string& dir) const {
        std::ofstream out(dir + "/config.effective", std::ios::binary | std::ios::trunc);
        if (!out) throw ValidationError("cannot write config echo in " + dir);
        out << echo_text();
    }

private:
    static std::string trim(const std::string& s) {
        const auto begin = s.find_first_not_of(" \t\r\n");
        if (begin == std::string::npos) return "";
        const auto end = s.find_last_not_of(" \t\r\n");
        return s.substr(begin, end - begin + 1);
    }

    std::string dir_or_default(const std::string& key, const std::string& child) const {
        const auto& v = raw(key);
        if (!v.empty()) return v;
        return raw("out_dir") + "/" + child;
    }

    std::map<std::string, std::string> kv_;
};

}  // namespace selfq
