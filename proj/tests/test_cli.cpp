#include <catch2/catch.hpp>

#include <filesystem>
#include <fstream>

#include "selfq/runconfig.hpp"

using namespace selfq;

TEST_CASE("run config defaults, overrides and round trip", "[cli]") {
    RunConfig cfg;
    CHECK(cfg.get_u64("seed") == 1);
    CHECK(cfg.get_int("n_train") == 4000);
    CHECK(cfg.raw("ablation_mode") == "full");

    cfg.set("seed", "42");
    cfg.set("max_steps", "17");
    CHECK(cfg.get_u64("seed") == 42);
    CHECK(cfg.train_config().max_steps == 17);
    CHECK_THROWS_AS(cfg.set("no_such_key", "1"), ConfigError);

    // Echo text reloads to the identical effective config.
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "selfq_cli_test";
    fs::create_directories(dir);
    cfg.echo_to(dir.string());
    RunConfig reloaded;
    reloaded.load_file((dir / "config.effective").string());
    CHECK(reloaded.echo_text() == cfg.echo_text());
    fs::remove_all(dir);
}

TEST_CASE("config file parsing and diagnostics", "[cli]") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "selfq_cli_parse";
    fs::create_directories(dir);
    const std::string path = (dir / "run.conf").string();
    {
        std::ofstream out(path);
        out << "# comment line\n";
        out << "seed = 9\n";
        out << "depth_mix = 2, 1, 1, 0.5\n";
        out << "learning_rate=1e-3   # inline comment\n";
    }
    RunConfig cfg;
    cfg.load_file(path);
    CHECK(cfg.get_u64("seed") == 9);
    CHECK(cfg.get_double("learning_rate") == Approx(1e-3));
    CHECK(cfg.data_config().depth_mix == std::vector<double>{2, 1, 1, 0.5});

    {
        std::ofstream out(path);
        out << "bogus_key = 1\n";
    }
    RunConfig cfg2;
    CHECK_THROWS_AS(cfg2.load_file(path), ConfigError);

    {
        std::ofstream out(path);
        out << "depth_mix = fast,1,1,1\n";
    }
    RunConfig cfg3;
    cfg3.load_file(path);
    try {
        cfg3.data_config();
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        // The diagnostic names the offending field.
        CHECK(std::string(e.what()).find("depth_mix") != std::string::npos);
    }

    {
        std::ofstream out(path);
        out << "depth_mix = 1,1\n";
    }
    RunConfig cfg4;
    cfg4.load_file(path);
    CHECK_THROWS_AS(cfg4.data_config(), ConfigError);

    fs::remove_all(dir);
}

TEST_CASE("derived module configs", "[cli]") {
    RunConfig cfg;
    auto mc = cfg.model_config();
    CHECK(mc.d_model == 64);
    CHECK(mc.vocab_size == Vocabulary::standard().size());
    CHECK(mc.num_patches() == 16);

    auto tc = cfg.train_config();
    CHECK(tc.learning_rate == Approx(3e-4));
    CHECK(tc.batch_size == 16);
    CHECK(tc.ablation_mode == AblationMode::full);

    cfg.set("out_dir", "runs/exp1");
    CHECK(cfg.data_dir() == "runs/exp1/data");
    cfg.set("data_dir", "elsewhere");
    CHECK(cfg.data_dir() == "elsewhere");
    CHECK(cfg.ckpt_dir() == "runs/exp1/ckpt");

    CHECK(cfg.get_u64_list("ablate_seeds") == std::vector<uint64_t>{1, 2, 3, 4, 5});
}
