// selfq: data generation, training, evaluation and ablation experiments for
// the self-questioning grid-world VQA model, driven by one flat config.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <string>

#include <CLI11.hpp>

#include "selfq/evalharness.hpp"
#include "selfq/runconfig.hpp"

namespace fs = std::filesystem;
using namespace selfq;

namespace {

struct GlobalArgs {
    std::string config_path;
    std::string out_dir;
    long seed = -1;
    int workers = 0;
};

RunConfig effective_config(const GlobalArgs& g) {
    RunConfig cfg;
    if (!g.config_path.empty()) cfg.load_file(g.config_path);
    if (!g.out_dir.empty()) cfg.set("out_dir", g.out_dir);
    if (g.seed >= 0) cfg.set("seed", std::to_string(g.seed));
    if (g.workers > 0) cfg.set("workers", std::to_string(g.workers));
    return cfg;
}

void ensure_dir(const std::string& dir) { fs::create_directories(dir); }

void print_histograms(const char* label, const Dataset& ds) {
    std::map<int, int> by_depth;
    std::map<std::string, int> by_type;
    for (const auto& ex : ds.examples) {
        by_depth[ex.depth] += 1;
        by_type[std::string(answer_type_name(ex.answer_type))] += 1;
    }
    std::cout << label << ": " << ds.size() << " examples\n  depth:";
    for (const auto& [d, n] : by_depth) std::cout << " K=" << d << ":" << n;
    std::cout << "\n  type: ";
    for (const auto& [t, n] : by_type) std::cout << " " << t << ":" << n;
    std::cout << "\n";
}

int cmd_gen_data(const RunConfig& cfg) {
    const auto data = cfg.data_config();
    const uint64_t seed = cfg.get_u64("seed");
    ensure_dir(cfg.data_dir());

    Dataset train_ds = make_dataset(derive_seed(seed, "train-data"), data.n_train,
                                    data.depth_mix, data.k_max);
    Dataset eval_ds = make_dataset(derive_seed(seed, "eval-data"), data.n_eval,
                                   data.depth_mix, data.k_max);
    write_dataset(train_ds, cfg.data_dir() + "/train.jsonl");
    write_dataset(eval_ds, cfg.data_dir() + "/eval.jsonl");
    cfg.echo_to(cfg.data_dir());

    print_histograms("train", train_ds);
    print_histograms("eval", eval_ds);
    std::cout << "wrote " << cfg.data_dir() << "/train.jsonl and eval.jsonl\n";
    return 0;
}

int cmd_train(const RunConfig& cfg, bool resume) {
    const auto mc = cfg.model_config();
    auto tc = cfg.train_config();
    ensure_dir(cfg.ckpt_dir());
    const std::string ckpt_path = cfg.ckpt_dir() + "/checkpoint.sqcl";
    const std::string metrics_path = cfg.ckpt_dir() + "/metrics.jsonl";

    Dataset ds = read_dataset(cfg.data_dir() + "/train.jsonl");
    Checkpoint start;
    const Checkpoint* resume_from = nullptr;
    if (resume) {
        start = load_checkpoint(ckpt_path);
        resume_from = &start;
        std::cout << "resuming from step " << start.step << "\n";
        if (start.step >= tc.max_steps) {
            std::cout << "checkpoint already at max_steps; nothing to do\n";
            return 0;
        }
    }

    std::ofstream metrics_out(metrics_path,
                              std::ios::binary | (resume ? std::ios::app : std::ios::trunc));
    if (!metrics_out) throw ValidationError("cannot open " + metrics_path);

    TrainHooks hooks;
    hooks.on_step = [&](const StepMetrics& m) {
        metrics_out << step_metrics_to_json(m).dump() << '\n';
        if (m.step % 100 == 0 || m.step == 1)
            std::cout << "step " << m.step << " total " << m.total << " token_acc "
                      << m.token_acc << "\n";
    };
    hooks.checkpoint_every = static_cast<int>(cfg.get_int("checkpoint_every"));
    hooks.on_checkpoint = [&](int step, const ModelParams& params,
                              const OptimizerState& opt, const StepMetrics& m) {
        save_checkpoint(Checkpoint{mc, tc, step, params.clone(), opt, m}, ckpt_path);
    };

    auto result = train(tc, ds, mc, hooks, resume_from);
    save_checkpoint(Checkpoint{mc, tc, result.steps_run, result.params.clone(),
                               result.opt_state,
                               result.metrics.empty() ? StepMetrics{}
                                                      : result.metrics.back()},
                    ckpt_path);
    cfg.echo_to(cfg.ckpt_dir());
    std::cout << "trained " << result.steps_run << " steps; checkpoint at " << ckpt_path
              << "\n";
    return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& ckpt_flag,
             const std::string& mode_flag) {
    const std::string ckpt_path =
        ckpt_flag.empty() ? cfg.ckpt_dir() + "/checkpoint.sqcl" : ckpt_flag;
    const InferMode mode =
        infer_mode_from_name(mode_flag.empty() ? cfg.raw("mode") : mode_flag);

    auto ckpt = load_checkpoint(ckpt_path);
    Dataset ds = read_dataset(cfg.data_dir() + "/eval.jsonl");
    const int k_max = static_cast<int>(cfg.get_int("k_max"));

    std::vector<InferenceTrace> traces;
    auto report = evaluate(ckpt.params, ds, mode, k_max, cfg.get_u64("seed"), &traces);
    report.validate();

    ensure_dir(cfg.report_dir());
    const std::string out_path = cfg.report_dir() + "/eval_report.json";
    std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
    out << report_to_json(report).dump(2) << '\n';
    std::ofstream trace_out(cfg.report_dir() + "/traces.jsonl",
                            std::ios::binary | std::ios::trunc);
    trace_out << traces_to_jsonl(ds, traces);
    cfg.echo_to(cfg.report_dir());

    std::cout << report_to_json(report).dump(2) << "\n";
    std::cout << "report written to " << out_path << "\n";
    return 0;
}

int cmd_ablate(const RunConfig& cfg) {
    const auto data = cfg.data_config();
    auto mc = cfg.model_config();
    auto tc = cfg.train_config();
    const long ablate_steps = cfg.get_int("ablate_max_steps");
    if (ablate_steps > 0) tc.max_steps = static_cast<int>(ablate_steps);

    AblationSpec spec = AblationSpec::default_spec(cfg.get_u64_list("ablate_seeds"));
    spec.k_max = data.k_max;
    for (auto& v : spec.variants) v.weights = {tc.lambda_ans, tc.lambda_final};

    const int workers = static_cast<int>(cfg.get_int("workers"));
    ensure_dir(cfg.report_dir());

    std::mutex io_mutex;
    auto progress = [&](const AblationCell& cell) {
        std::lock_guard<std::mutex> lock(io_mutex);
        std::cout << "[cell] " << cell.variant << " seed " << cell.seed;
        if (cell.ok)
            std::cout << " acc " << format_pct(cell.report.overall_accuracy())
                      << "% train " << cell.train_seconds << "s eval "
                      << cell.eval_seconds << "s";
        else
            std::cout << " FAILED: " << cell.error;
        std::cout << " (wallclock " << cell.train_seconds + cell.eval_seconds << "s)\n";
        std::cout.flush();
    };

    auto table = run_ablation(spec, mc, tc, data, workers, progress);

    {
        std::ofstream out(cfg.report_dir() + "/ablation.jsonl",
                          std::ios::binary | std::ios::trunc);
        out << ablation_to_jsonl(table);
    }
    {
        std::ofstream out(cfg.report_dir() + "/ablation.txt",
                          std::ios::binary | std::ios::trunc);
        out << ablation_to_text(table);
    }
    {
        std::ofstream out(cfg.report_dir() + "/report.md",
                          std::ios::binary | std::ios::trunc);
        out << ablation_to_markdown(table);
    }
    cfg.echo_to(cfg.report_dir());

    std::cout << "\n" << ablation_to_text(table);
    std::cout << "reports written to " << cfg.report_dir() << "\n";
    return 0;
}

// Re-renders the text and markdown reports from a saved ablation.jsonl.
int cmd_report(const RunConfig& cfg) {
    const std::string path = cfg.report_dir() + "/ablation.jsonl";
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("no ablation results at " + path);

    AblationTable table;
    std::vector<std::string> variant_order;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        AblationCell cell;
        cell.variant = j.at("variant").get<std::string>();
        cell.seed = j.at("seed").get<uint64_t>();
        cell.ok = j.at("ok").get<bool>();
        cell.error = j.at("error").get<std::string>();
        for (const auto& [key, val] : j.at("depth_counts").items()) {
            const int depth = std::stoi(key);
            const long count = val.get<long>();
            const double acc = j.at("by_depth").at(key).get<double>();
            const long correct = std::lround(acc * static_cast<double>(count));
            cell.report.depth_stats[depth] = {correct, count};
            cell.report.n_examples += count;
            cell.report.n_correct += correct;
        }
        for (const auto& [key, val] : j.at("type_counts").items()) {
            const long count = val.get<long>();
            const double acc = j.at("by_answer_type").at(key).get<double>();
            cell.report.type_stats[key] = {
                std::lround(acc * static_cast<double>(count)), count};
        }
        if (std::find(variant_order.begin(), variant_order.end(), cell.variant) ==
            variant_order.end())
            variant_order.push_back(cell.variant);
        table.cells.push_back(std::move(cell));
    }
    for (const auto& name : variant_order) {
        std::vector<const AblationCell*> cells;
        for (const auto& c : table.cells)
            if (c.variant == name) cells.push_back(&c);
        table.summaries.push_back(eval_detail::summarize(name, cells));
    }

    {
        std::ofstream out(cfg.report_dir() + "/ablation.txt",
                          std::ios::binary | std::ios::trunc);
        out << ablation_to_text(table);
    }
    {
        std::ofstream out(cfg.report_dir() + "/report.md",
                          std::ios::binary | std::ios::trunc);
        out << ablation_to_markdown(table);
    }
    std::cout << ablation_to_text(table);
    std::cout << "re-rendered " << cfg.report_dir() << "/report.md\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"self-questioning grid-world VQA: data, training, evaluation, ablations"};
    app.require_subcommand(1);

    GlobalArgs g;
    app.add_option("--config", g.config_path, "flat key = value config file");
    app.add_option("--seed", g.seed, "root seed (overrides config)");
    app.add_option("--out", g.out_dir, "output root directory (overrides config)");
    app.add_option("--workers", g.workers, "parallel worker cap (overrides config)");

    auto* gen = app.add_subcommand("gen-data", "generate train/eval datasets");
    auto* tr = app.add_subcommand("train", "train a model on the generated data");
    bool resume = false;
    tr->add_flag("--resume", resume, "resume from the checkpoint in ckpt_dir");
    std::string ablation_mode_flag;
    tr->add_option("--ablation-mode", ablation_mode_flag,
                   "full|no_subq_loss|no_suba_loss|no_chain_augmentation|final_only");
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the eval set");
    std::string ckpt_flag, mode_flag;
    ev->add_option("--ckpt", ckpt_flag, "checkpoint path (default ckpt_dir/checkpoint.sqcl)");
    ev->add_option("--mode", mode_flag, "self_question|direct");
    auto* ab = app.add_subcommand("ablate", "run the full ablation protocol");
    auto* rp = app.add_subcommand("report", "re-render reports from ablation.jsonl");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        RunConfig cfg = effective_config(g);
        if (!ablation_mode_flag.empty()) cfg.set("ablation_mode", ablation_mode_flag);
        if (!mode_flag.empty()) cfg.set("mode", mode_flag);

        if (gen->parsed()) return cmd_gen_data(cfg);
        if (tr->parsed()) return cmd_train(cfg, resume);
        if (ev->parsed()) return cmd_eval(cfg, ckpt_flag, mode_flag);
        if (ab->parsed()) return cmd_ablate(cfg);
        if (rp->parsed()) return cmd_report(cfg);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
