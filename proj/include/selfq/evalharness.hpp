#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "selfq/errors.hpp"
#include "selfq/infer.hpp"
#include "selfq/taskgen.hpp"
#include "selfq/trainer.hpp"

namespace selfq {

enum class InferMode { self_question, direct };

inline std::string_view infer_mode_name(InferMode m) {
    return m == InferMode::self_question ? "self_question" : "direct";
}

inline InferMode infer_mode_from_name(std::string_view n) {
    if (n == "self_question") return InferMode::self_question;
    if (n == "direct") return InferMode::direct;
    throw ConfigError("unknown inference mode: " + std::string(n));
}

// Exact-match accuracy after stripping structural/special tokens and
// re-splitting on whitespace.
inline std::vector<int> strip_markers(const std::vector<int>& ids) {
    std::vector<int> out;
    for (int id : ids)
        if (!Vocabulary::is_special(id)) out.push_back(id);
    return out;
}

inline double accuracy(const std::vector<std::vector<int>>& predictions,
                       const std::vector<std::vector<int>>& golds) {
    if (predictions.empty() || golds.empty())
        throw EmptyEvalError("accuracy over zero examples");
    if (predictions.size() != golds.size())
        throw ShapeError("prediction and gold counts differ");
    long correct = 0;
    for (size_t i = 0; i < predictions.size(); ++i)
        if (strip_markers(predictions[i]) == strip_markers(golds[i])) ++correct;
    return static_cast<double>(correct) / static_cast<double>(predictions.size());
}

// Counts are the source of truth; every rate is derived from them, so the
// aggregation identities hold exactly.
struct MetricsReport {
    long n_examples = 0;
    long n_correct = 0;
    std::map<int, std::pair<long, long>> depth_stats;          // depth -> {correct, total}
    std::map<std::string, std::pair<long, long>> type_stats;   // answer type -> {correct, total}
    long chain_steps_checked = 0;
    long chain_steps_correct = 0;
    long well_formed_count = 0;
    uint64_t seed = 0;
    uint64_t eval_set_hash = 0;
    std::string mode;

    double overall_accuracy() const {
        return n_examples == 0 ? 0.0 : static_cast<double>(n_correct) / n_examples;
    }
    double well_formed_rate() const {
        return n_examples == 0 ? 0.0 : static_cast<double>(well_formed_count) / n_examples;
    }
    double chain_step_accuracy() const {
        return chain_steps_checked == 0
                   ? 0.0
                   : static_cast<double>(chain_steps_correct) / chain_steps_checked;
    }
    double depth_accuracy(int depth) const {
        auto it = depth_stats.find(depth);
        if (it == depth_stats.end() || it->second.second == 0) return 0.0;
        return static_cast<double>(it->second.first) / it->second.second;
    }
    double type_accuracy(const std::string& type) const {
        auto it = type_stats.find(type);
        if (it == type_stats.end() || it->second.second == 0) return 0.0;
        return static_cast<double>(it->second.first) / it->second.second;
    }

    void validate() const {
        long by_depth_correct = 0, by_depth_total = 0;
        for (const auto& [d, ct] : depth_stats) {
            by_depth_correct += ct.first;
            by_depth_total += ct.second;
        }
        long by_type_correct = 0, by_type_total = 0;
        for (const auto& [t, ct] : type_stats) {
            by_type_correct += ct.first;
            by_type_total += ct.second;
        }
        if (by_depth_correct != n_correct || by_depth_total != n_examples ||
            by_type_correct != n_correct || by_type_total != n_examples)
            throw ValidationError("metrics breakdowns do not aggregate to the overall");
    }
};

inline uint64_t dataset_hash(const Dataset& ds) {
    uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](std::string_view text) {
        for (char c : text) {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ULL;
        }
        h ^= 0x2e;
        h *= 1099511628211ULL;
    };
    for (const auto& ex : ds.examples) {
        mix(ex.id);
        mix(std::to_string(ex.scene.seed));
        mix(join_words(ex.question));
        mix(join_words(ex.answer));
    }
    return h;
}

// Scores a set of precomputed traces against a dataset. Separated from
// evaluate() so stub traces can exercise the scoring logic directly.
// Malformed traces count as wrong regardless of their answer text.
inline MetricsReport evaluate_traces(const Dataset& dataset,
                                     const std::vector<InferenceTrace>& traces,
                                     InferMode mode, uint64_t seed) {
    if (dataset.examples.empty()) throw EmptyEvalError("evaluation dataset is empty");
    if (traces.size() != dataset.examples.size())
        throw ShapeError("trace count does not match the dataset");

    const auto& vocab = Vocabulary::standard();
    MetricsReport report;
    report.seed = seed;
    report.eval_set_hash = dataset_hash(dataset);
    report.mode = infer_mode_name(mode);

    for (size_t i = 0; i < dataset.examples.size(); ++i) {
        const auto& ex = dataset.examples[i];
        const auto& trace = traces[i];
        const auto gold = strip_markers(vocab.encode(ex.answer));
        const bool match = strip_markers(trace.final_answer) == gold;
        const bool correct = trace.well_formed && match;

        report.n_examples += 1;
        report.n_correct += correct ? 1 : 0;
        auto& ds = report.depth_stats[ex.depth];
        ds.first += correct ? 1 : 0;
        ds.second += 1;
        auto& ts = report.type_stats[std::string(answer_type_name(ex.answer_type))];
        ts.first += correct ? 1 : 0;
        ts.second += 1;
        report.well_formed_count += trace.well_formed ? 1 : 0;

        // Generated sub-answers are graded by the oracle on the generated
        // sub-question, when that question parses.
        for (size_t s = 0; s < trace.sub_questions.size(); ++s) {
            std::vector<std::string> words;
            for (int id : strip_markers(trace.sub_questions[s]))
                words.push_back(vocab.token(id));
            std::vector<std::string> expect;
            try {
                expect = oracle_answer(ex.scene, words);
            } catch (const GrammarError&) {
                continue;
            } catch (const OracleError&) {
                continue;
            }
            report.chain_steps_checked += 1;
            if (strip_markers(trace.sub_answers[s]) == strip_markers(vocab.encode(expect)))
                report.chain_steps_correct += 1;
        }
    }
    report.validate();
    return report;
}

// Runs the chosen inference mode over every example and fills the report.
// When traces_out is given, the per-example traces are copied there (in
// dataset order) for inspection dumps.
inline MetricsReport evaluate(const ModelParams& params, const Dataset& dataset,
                              InferMode mode, int k_max = kDefaultKMax,
                              uint64_t seed = 0,
                              std::vector<InferenceTrace>* traces_out = nullptr) {
    if (dataset.examples.empty()) throw EmptyEvalError("evaluation dataset is empty");
    const auto& vocab = Vocabulary::standard();
    std::vector<InferenceTrace> traces;
    traces.reserve(dataset.examples.size());
    for (const auto& ex : dataset.examples) {
        const auto question = vocab.encode(ex.question);
        if (mode == InferMode::self_question) {
            traces.push_back(self_question_infer(params, ex.image, question, k_max));
        } else {
            InferenceTrace t;
            auto out = direct_infer(params, ex.image, question);
            t.well_formed = !out.empty() && out.back() == Vocabulary::kEos;
            t.final_answer = strip_markers(out);
            traces.push_back(std::move(t));
        }
    }
    auto report = evaluate_traces(dataset, traces, mode, seed);
    if (traces_out != nullptr) *traces_out = std::move(traces);
    return report;
}

// Inspection dump: one JSON line per example with the generated segments and
// its correctness under the exact-match rule.
inline std::string traces_to_jsonl(const Dataset& dataset,
                                   const std::vector<InferenceTrace>& traces) {
    if (traces.size() != dataset.examples.size())
        throw ShapeError("trace count does not match the dataset");
    const auto& vocab = Vocabulary::standard();
    auto decode = [&](const std::vector<int>& ids) {
        return vocab.decode(strip_markers(ids));
    };
    std::string out;
    for (size_t i = 0; i < traces.size(); ++i) {
        const auto& ex = dataset.examples[i];
        const auto& t = traces[i];
        nlohmann::json subq = nlohmann::json::array();
        nlohmann::json suba = nlohmann::json::array();
        for (const auto& q : t.sub_questions) subq.push_back(decode(q));
        for (const auto& a : t.sub_answers) suba.push_back(decode(a));
        const bool correct = t.well_formed &&
                             strip_markers(t.final_answer) ==
                                 strip_markers(vocab.encode(ex.answer));
        nlohmann::json j = {{"id", ex.id},
                            {"sub_questions", subq},
                            {"sub_answers", suba},
                            {"final_answer", decode(t.final_answer)},
                            {"well_formed", t.well_formed},
                            {"correct", correct}};
        out += j.dump();
        out += '\n';
    }
    return out;
}

inline nlohmann::json report_to_json(const MetricsReport& r) {
    nlohmann::json by_depth = nlohmann::json::object();
    for (const auto& [d, ct] : r.depth_stats)
        by_depth[std::to_string(d)] = {{"accuracy", r.depth_accuracy(d)},
                                       {"count", ct.second}};
    nlohmann::json by_type = nlohmann::json::object();
    for (const auto& [t, ct] : r.type_stats)
        by_type[t] = {{"accuracy", r.type_accuracy(t)}, {"count", ct.second}};
    return {{"overall_accuracy", r.overall_accuracy()},
            {"by_depth", by_depth},
            {"by_answer_type", by_type},
            {"chain_step_accuracy", r.chain_step_accuracy()},
            {"chain_steps_checked", r.chain_steps_checked},
            {"well_formed_rate", r.well_formed_rate()},
            {"n_examples", r.n_examples},
            {"seed", r.seed},
            {"eval_set_hash", r.eval_set_hash},
            {"mode", r.mode}};
}

// ---------------------------------------------------------------------------
// Ablation protocol
// ---------------------------------------------------------------------------

struct AblationVariant {
    std::string name;
    AblationMode mode = AblationMode::full;
    LossWeights weights;
    InferMode eval_mode = InferMode::self_question;
};

struct AblationSpec {
    std::vector<AblationVariant> variants;
    std::vector<uint64_t> seeds;
    int k_max = kDefaultKMax;

    void validate() const {
        if (variants.empty()) throw ConfigError("ablation spec has no variants");
        if (seeds.empty()) throw ConfigError("ablation spec needs at least one seed");
        std::set<std::string> names;
        for (const auto& v : variants)
            if (!names.insert(v.name).second)
                throw ConfigError("duplicate variant name: " + v.name);
    }

    // The Table-2-style default: full plus the three ablations, and the
    // fine-tuned-baseline analog evaluated chain-free.
    static AblationSpec default_spec(std::vector<uint64_t> seeds = {1, 2, 3, 4, 5}) {
        AblationSpec spec;
        spec.seeds = std::move(seeds);
        spec.variants = {
            {"full", AblationMode::full, {}, InferMode::self_question},
            {"no_subq_loss", AblationMode::no_subq_loss, {}, InferMode::self_question},
            {"no_suba_loss", AblationMode::no_suba_loss, {}, InferMode::self_question},
            {"no_chain_augmentation", AblationMode::no_chain_augmentation, {},
             InferMode::self_question},
            {"final_only", AblationMode::final_only, {}, InferMode::direct},
        };
        return spec;
    }
};

struct DataGenConfig {
    int n_train = 4000;
    int n_eval = 1000;
    std::vector<double> depth_mix = {1, 1, 1, 1};
    int k_max = kDefaultKMax;
};

struct AblationCell {
    std::string variant;
    uint64_t seed = 0;
    bool ok = false;
    std::string error;
    MetricsReport report;
    MetricsReport direct_report;  // direct-mode comparison metric
    double train_seconds = 0.0;
    double eval_seconds = 0.0;
};

struct VariantSummary {
    std::string name;
    int n_runs = 0;
    double mean = 0.0;
    double sd = 0.0;
    std::map<int, double> depth_mean;
    std::map<std::string, double> type_mean;
};

struct AblationTable {
    std::vector<AblationCell> cells;
    std::vector<VariantSummary> summaries;

    const AblationCell* find(const std::string& variant, uint64_t seed) const {
        for (const auto& c : cells)
            if (c.variant == variant && c.seed == seed) return &c;
        return nullptr;
    }
    const VariantSummary* summary(const std::string& variant) const {
        for (const auto& s : summaries)
            if (s.name == variant) return &s;
        return nullptr;
    }
};

namespace eval_detail {

inline void run_tasks(int n, int workers, const std::function<void(int)>& fn) {
    if (workers <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    auto worker = [&] {
        for (;;) {
            const int i = next.fetch_add(1);
            if (i >= n) return;
            fn(i);
        }
    };
    std::vector<std::thread> pool;
    const int count = std::min(workers, n);
    pool.reserve(static_cast<size_t>(count));
    for (int t = 0; t < count; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
}

inline VariantSummary summarize(const std::string& name,
                                const std::vector<const AblationCell*>& cells) {
    VariantSummary s;
    s.name = name;
    std::vector<double> vals;
    std::map<int, std::pair<double, int>> depth_acc;
    std::map<std::string, std::pair<double, int>> type_acc;
    for (const auto* c : cells) {
        if (!c->ok) continue;
        vals.push_back(c->report.overall_accuracy());
        for (const auto& [d, ct] : c->report.depth_stats) {
            depth_acc[d].first += c->report.depth_accuracy(d);
            depth_acc[d].second += 1;
        }
        for (const auto& [t, ct] : c->report.type_stats) {
            type_acc[t].first += c->report.type_accuracy(t);
            type_acc[t].second += 1;
        }
    }
    s.n_runs = static_cast<int>(vals.size());
    if (!vals.empty()) {
        for (double v : vals) s.mean += v;
        s.mean /= static_cast<double>(vals.size());
        if (vals.size() > 1) {
            double sq = 0.0;
            for (double v : vals) sq += (v - s.mean) * (v - s.mean);
            s.sd = std::sqrt(sq / static_cast<double>(vals.size() - 1));
        }
    }
    for (const auto& [d, acc] : depth_acc)
        s.depth_mean[d] = acc.second == 0 ? 0.0 : acc.first / acc.second;
    for (const auto& [t, acc] : type_acc)
        s.type_mean[t] = acc.second == 0 ? 0.0 : acc.first / acc.second;
    return s;
}

}  // namespace eval_detail

using AblationProgress = std::function<void(const AblationCell&)>;

// Table-2-style protocol: per seed, one shared train set and one shared eval
// set; per (variant, seed), train and evaluate. Failed cells are recorded and
// the table is still produced. Results do not depend on the worker count.
inline AblationTable run_ablation(const AblationSpec& spec, const ModelConfig& model_base,
                                  const TrainConfig& train_base, const DataGenConfig& data,
                                  int workers = 1, const AblationProgress& progress = {}) {
    spec.validate();
    AblationTable table;
    table.cells.resize(spec.variants.size() * spec.seeds.size());

    for (size_t si = 0; si < spec.seeds.size(); ++si) {
        const uint64_t seed = spec.seeds[si];
        const Dataset train_ds = make_dataset(derive_seed(seed, "train-data"),
                                              data.n_train, data.depth_mix, data.k_max);
        const Dataset eval_ds = make_dataset(derive_seed(seed, "eval-data"),
                                             data.n_eval, data.depth_mix, data.k_max);

        eval_detail::run_tasks(
            static_cast<int>(spec.variants.size()), workers, [&](int vi) {
                const auto& variant = spec.variants[static_cast<size_t>(vi)];
                AblationCell& cell =
                    table.cells[si * spec.variants.size() + static_cast<size_t>(vi)];
                cell.variant = variant.name;
                cell.seed = seed;
                try {
                    ModelConfig mc = model_base;
                    mc.seed = derive_seed(seed, "model");
                    TrainConfig tc = train_base;
                    tc.seed = derive_seed(seed, "train");
                    tc.ablation_mode = variant.mode;
                    tc.lambda_ans = variant.weights.lambda_ans;
                    tc.lambda_final = variant.weights.lambda_final;

                    const auto t0 = std::chrono::steady_clock::now();
                    auto result = train(tc, train_ds, mc);
                    const auto t1 = std::chrono::steady_clock::now();
                    cell.report = evaluate(result.params, eval_ds, variant.eval_mode,
                                           spec.k_max, seed);
                    cell.direct_report = variant.eval_mode == InferMode::direct
                                             ? cell.report
                                             : evaluate(result.params, eval_ds,
                                                        InferMode::direct, spec.k_max, seed);
                    const auto t2 = std::chrono::steady_clock::now();
                    cell.train_seconds = std::chrono::duration<double>(t1 - t0).count();
                    cell.eval_seconds = std::chrono::duration<double>(t2 - t1).count();
                    cell.ok = true;
                } catch (const std::exception& e) {
                    cell.ok = false;
                    cell.error = e.what();
                }
                if (progress) progress(cell);
            });
    }

    for (const auto& variant : spec.variants) {
        std::vector<const AblationCell*> cells;
        for (const auto& c : table.cells)
            if (c.variant == variant.name) cells.push_back(&c);
        table.summaries.push_back(eval_detail::summarize(variant.name, cells));
    }
    return table;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

// Depth bands mirroring the shallow / medium / deep analysis, adapted to the
// synthetic K range.
inline const std::vector<std::pair<std::string, std::pair<int, int>>>& depth_bands() {
    static const std::vector<std::pair<std::string, std::pair<int, int>>> bands = {
        {"K=1", {1, 1}}, {"K=2-3", {2, 3}}, {"K=4", {4, 1 << 20}}};
    return bands;
}

inline std::pair<long, long> band_stats(const MetricsReport& r, int lo, int hi) {
    long correct = 0, total = 0;
    for (const auto& [d, ct] : r.depth_stats) {
        if (d < lo || d > hi) continue;
        correct += ct.first;
        total += ct.second;
    }
    return {correct, total};
}

inline double band_accuracy(const MetricsReport& r, int lo, int hi) {
    const auto [c, t] = band_stats(r, lo, hi);
    return t == 0 ? 0.0 : static_cast<double>(c) / t;
}

// Per-band and per-type comparison across variants sharing one eval set.
struct DepthTypeTables {
    std::vector<std::string> variants;
    std::map<std::string, std::vector<double>> band_accuracy;  // band -> per-variant
    std::map<std::string, std::vector<double>> type_accuracy;  // type -> per-variant
    std::map<std::string, double> band_gap;  // first variant minus last variant
};

inline DepthTypeTables depth_and_type_report(
    const std::vector<std::pair<std::string, MetricsReport>>& reports) {
    if (reports.empty()) throw EmptyEvalError("no reports to compare");
    const uint64_t hash = reports.front().second.eval_set_hash;
    for (const auto& [name, r] : reports)
        if (r.eval_set_hash != hash)
            throw ValidationError("reports cover different eval sets");

    DepthTypeTables tables;
    for (const auto& [name, r] : reports) tables.variants.push_back(name);
    for (const auto& [band, range] : depth_bands()) {
        for (const auto& [name, r] : reports)
            tables.band_accuracy[band].push_back(
                band_accuracy(r, range.first, range.second));
        const auto& row = tables.band_accuracy[band];
        tables.band_gap[band] = row.front() - row.back();
    }
    for (const char* type : {"yes_no", "number", "other"})
        for (const auto& [name, r] : reports)
            tables.type_accuracy[type].push_back(r.type_accuracy(type));
    return tables;
}

inline std::string ablation_to_jsonl(const AblationTable& table) {
    std::string out;
    for (const auto& c : table.cells) {
        nlohmann::json by_depth = nlohmann::json::object();
        nlohmann::json depth_counts = nlohmann::json::object();
        for (const auto& [d, ct] : c.report.depth_stats) {
            by_depth[std::to_string(d)] = c.report.depth_accuracy(d);
            depth_counts[std::to_string(d)] = ct.second;
        }
        nlohmann::json by_type = nlohmann::json::object();
        nlohmann::json type_counts = nlohmann::json::object();
        for (const auto& [t, ct] : c.report.type_stats) {
            by_type[t] = c.report.type_accuracy(t);
            type_counts[t] = ct.second;
        }
        nlohmann::json j = {{"variant", c.variant},
                            {"seed", c.seed},
                            {"overall", c.report.overall_accuracy()},
                            {"by_depth", by_depth},
                            {"by_answer_type", by_type},
                            {"depth_counts", depth_counts},
                            {"type_counts", type_counts},
                            {"well_formed_rate", c.report.well_formed_rate()},
                            {"chain_step_accuracy", c.report.chain_step_accuracy()},
                            {"direct_overall", c.direct_report.overall_accuracy()},
                            {"ok", c.ok},
                            {"error", c.error}};
        out += j.dump();
        out += '\n';
    }
    return out;
}

inline std::string format_pct(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%5.1f", 100.0 * v);
    return buf;
}

inline std::string ablation_to_text(const AblationTable& table) {
    std::ostringstream out;
    out << "variant                 runs   mean    sd   | per-seed overall (%)\n";
    out << "----------------------- ----  -----  ----- | --------------------\n";
    for (const auto& s : table.summaries) {
        char line[96];
        std::snprintf(line, sizeof(line), "%-23s %4d  %5.1f  %5.1f |", s.name.c_str(),
                      s.n_runs, 100.0 * s.mean, 100.0 * s.sd);
        out << line;
        for (const auto& c : table.cells) {
            if (c.variant != s.name) continue;
            if (c.ok)
                out << ' ' << format_pct(c.report.overall_accuracy());
            else
                out << "  FAIL";
        }
        out << '\n';
    }
    return out.str();
}

// Markdown summary with the comparative, ablation, depth-band and answer-type
// tables.
inline std::string ablation_to_markdown(const AblationTable& table,
                                        const std::string& baseline = "no_chain_augmentation") {
    std::ostringstream out;
    out << "# Ablation report\n\n";
    out << "## Overall accuracy (mean +/- sd over seeds)\n\n";
    out << "| variant | runs | accuracy % | sd |\n|---|---|---|---|\n";
    for (const auto& s : table.summaries) {
        out << "| " << s.name << " | " << s.n_runs << " | " << format_pct(s.mean)
            << " | " << format_pct(s.sd) << " |\n";
    }

    out << "\n## Accuracy by reasoning depth band\n\n| band |";
    for (const auto& s : table.summaries) out << ' ' << s.name << " |";
    out << " full-" << baseline << " gap |\n|---|";
    for (size_t i = 0; i < table.summaries.size() + 1; ++i) out << "---|";
    out << '\n';
    for (const auto& [band, range] : depth_bands()) {
        out << "| " << band << " |";
        double full_acc = 0.0, base_acc = 0.0;
        for (const auto& s : table.summaries) {
            double acc = 0.0;
            int n = 0;
            for (const auto& c : table.cells) {
                if (c.variant != s.name || !c.ok) continue;
                acc += band_accuracy(c.report, range.first, range.second);
                n += 1;
            }
            acc = n == 0 ? 0.0 : acc / n;
            if (s.name == "full") full_acc = acc;
            if (s.name == baseline) base_acc = acc;
            out << ' ' << format_pct(acc) << " |";
        }
        out << ' ' << format_pct(full_acc - base_acc) << " |\n";
    }

    out << "\n## Accuracy by answer type\n\n| type |";
    for (const auto& s : table.summaries) out << ' ' << s.name << " |";
    out << "\n|---|";
    for (size_t i = 0; i < table.summaries.size(); ++i) out << "---|";
    out << '\n';
    for (const char* type : {"yes_no", "number", "other"}) {
        out << "| " << type << " |";
        for (const auto& s : table.summaries) {
            auto it = s.type_mean.find(type);
            out << ' ' << format_pct(it == s.type_mean.end() ? 0.0 : it->second) << " |";
        }
        out << '\n';
    }

    out << "\n## Per-seed sign of the full-minus-" << baseline << " gap\n\n";
    out << "| seed | full | " << baseline << " | gap |\n|---|---|---|---|\n";
    for (const auto& c : table.cells) {
        if (c.variant != "full" || !c.ok) continue;
        const auto* other = table.find(baseline, c.seed);
        if (other == nullptr || !other->ok) continue;
        const double gap = c.report.overall_accuracy() - other->report.overall_accuracy();
        out << "| " << c.seed << " | " << format_pct(c.report.overall_accuracy()) << " | "
            << format_pct(other->report.overall_accuracy()) << " | "
            << format_pct(gap) << " |\n";
    }
    return out.str();
}

}  // namespace selfq
