#include "imilia/config.hpp"
#include "imilia/evaluate.hpp"
#include "imilia/pipeline.hpp"
#include "imilia/report.hpp"
#include "imilia/synth.hpp"
#include "test_util.hpp"

#include <doctest.h>
#include <fmt/format.h>

#include <atomic>
#include <cstdlib>
#include <fstream>

using namespace imilia;
namespace fs = std::filesystem;

TEST_CASE("config defaults are the published hyperparameters") {
    const RunConfig cfg = parse_config("");
    CHECK(cfg.chowder.n_channels == 5);
    CHECK(cfg.chowder.n_extremes == 25);
    CHECK(cfg.chowder.mlp_hidden == std::vector<int>{128, 64});
    CHECK(cfg.chowder.mlp_dropout == std::vector<double>{0.5, 0.5});
    CHECK(cfg.chowder.learning_rate == 0.01);
    CHECK(cfg.chowder.batch_size == 256);
    CHECK(cfg.chowder.max_tiles == 1000);
    CHECK(cfg.episeg_C == 1e-2);
    CHECK(cfg.episeg_folds == 3);
    CHECK(cfg.patch_size_px == 14);
    CHECK(cfg.context_px == 1022);
    CHECK(cfg.tile_size_px == 224);
    CHECK(cfg.n_extremes == 1000);
    CHECK_FALSE(cfg.seed.has_value());
}

TEST_CASE("config rejects unknown keys, sections and wrong types") {
    auto message = [](const char* text) {
        try {
            parse_config(text, "t.toml");
        } catch (const Error& e) {
            return std::string(e.what());
        }
        return std::string();
    };
    CHECK(message("[chowder]\nn_chanels = 3\n").find("chowder.n_chanels") != std::string::npos);
    CHECK(message("[chowdr]\nn_channels = 3\n").find("[chowdr]") != std::string::npos);
    CHECK(message("seed = 3\n").find("inside a section") != std::string::npos);
    CHECK(message("[chowder]\nn_channels = \"five\"\n").find("chowder.n_channels") != std::string::npos);
    CHECK(message("[chowder]\nmlp_hidden = [1.5]\n").find("mlp_hidden") != std::string::npos);
    CHECK(message("[chowder]\nmlp_hidden = [8]\n").find("mlp_dropout") != std::string::npos);
    CHECK(message("[run]\nseed = -1\n").find("run.seed") != std::string::npos);
    CHECK(message("[run\n").find("t.toml:1") != std::string::npos);
    CHECK(message("[episeg]\nC = 0\n").find("episeg.C") != std::string::npos);
}

TEST_CASE("config round-trips through its TOML form") {
    RunConfig cfg = parse_config(R"(
[run]
seed = 42
threads = 3
[chowder]
n_channels = 2
mlp_hidden = [16]
mlp_dropout = [0.25]
learning_rate = 3e-4
standardize = true
[episeg]
select_C = false
C = 0.5
C_grid = [1, 2]
context_px = 308
[extremes]
n = 17
)");
    cfg.manifest = "some dir/manifest \"x\".csv";
    const RunConfig back = parse_config(to_toml(cfg));
    CHECK(back.seed == cfg.seed);
    CHECK(back.threads == 3);
    CHECK(back.manifest == cfg.manifest);
    CHECK(back.chowder.n_channels == 2);
    CHECK(back.chowder.mlp_hidden == std::vector<int>{16});
    CHECK(back.chowder.mlp_dropout == std::vector<double>{0.25});
    CHECK(back.chowder.learning_rate == 3e-4);
    CHECK(back.chowder.standardize);
    CHECK_FALSE(back.episeg_select_C);
    CHECK(back.episeg_C == 0.5);
    CHECK(back.episeg_C_grid == std::vector<double>{1.0, 2.0});
    CHECK(back.context_px == 308);
    CHECK(back.n_extremes == 17);
    CHECK(episeg_grid(back) == std::vector<double>{0.5});
    CHECK(to_toml(back) == to_toml(cfg));
}

TEST_CASE("load_config resolves paths against the config directory") {
    testing::TempDir dir;
    write_text_file(dir / "c.toml", "[run]\nout_dir = \"out\"\n[data]\nmanifest = \"m.csv\"\ncells_dir = \"/abs/cells\"\n");
    const RunConfig cfg = load_config(dir / "c.toml");
    CHECK(fs::path(cfg.manifest) == (dir / "m.csv").lexically_normal());
    CHECK(fs::path(cfg.out_dir) == (dir / "out").lexically_normal());
    CHECK(cfg.cells_dir == "/abs/cells");
    CHECK(cfg.patch_dir.empty());
}

TEST_CASE("seed precedence: flag, config, IMILIA_SEED, zero") {
    ::unsetenv("IMILIA_SEED");
    CHECK(resolve_seed(std::nullopt, std::nullopt) == 0);
    ::setenv("IMILIA_SEED", "77", 1);
    CHECK(resolve_seed(std::nullopt, std::nullopt) == 77);
    CHECK(resolve_seed(std::nullopt, 5) == 5);
    CHECK(resolve_seed(9, 5) == 9);
    ::setenv("IMILIA_SEED", "x", 1);
    CHECK_THROWS_AS(resolve_seed(std::nullopt, std::nullopt), Error);
    ::unsetenv("IMILIA_SEED");
}

TEST_CASE("parallel_for visits every index once and rethrows the lowest failure") {
    for (int threads : {1, 4}) {
        std::vector<std::atomic<int>> hits(257);
        parallel_for(hits.size(), threads, [&](std::size_t i) { hits[i]++; });
        for (auto& h : hits) CHECK(h.load() == 1);
        try {
            parallel_for(100, threads, [](std::size_t i) {
                if (i == 13 || i == 70) throw Error("fail " + std::to_string(i));
            });
            FAIL("expected an exception");
        } catch (const Error& e) {
            CHECK(std::string(e.what()) == "fail 13");
        }
    }
}

TEST_CASE("eval joins CSVs on the first column and bootstraps deterministically") {
    testing::TempDir dir;
    std::string pred = "slide_id,score\n", gt = "slide_id,label\n";
    std::vector<double> scores;
    std::vector<int> labels;
    Rng rng(4);
    for (int i = 0; i < 40; ++i) {
        const int l = i % 2;
        const double s = rng.normal() + l;
        scores.push_back(s);
        labels.push_back(l);
        pred += fmt::format("s{},{}\n", i, format_double(s));
        gt += fmt::format("s{},{}\n", i, l);
    }
    pred += "extra,0.5\n";  // no reference: ignored
    write_text_file(dir / "pred.csv", pred);
    write_text_file(dir / "gt.csv", gt);

    EvalOptions o;
    o.bootstrap = 200;
    o.seed = 11;
    const auto a = evaluate_files(dir / "pred.csv", dir / "gt.csv", o);
    CHECK(a["estimate"].get<double>() == roc_auc(scores, labels));
    CHECK(a["n"] == 40);
    CHECK(a["ci"][0].get<double>() <= a["estimate"].get<double>());
    CHECK(a["ci"][1].get<double>() >= a["estimate"].get<double>());
    CHECK(a == evaluate_files(dir / "pred.csv", dir / "gt.csv", o));
    o.metric = EvalMetric::ap;
    CHECK(evaluate_files(dir / "pred.csv", dir / "gt.csv", o)["estimate"].get<double>() ==
          average_precision(scores, labels));
    CHECK_THROWS_AS(parse_metric("rmse"), Error);
}

TEST_CASE("instance events rebuild the same matching metrics") {
    testing::TempDir dir;
    auto square = [](double x, double y, double s) {
        return fmt::format("{} {};{} {};{} {};{} {}", x, y, x + s, y, x + s, y + s, x, y + s);
    };
    std::string gt = "tile_id,class,polygon\n", pred = "tile_id,class,polygon\n";
    gt += "t1,lymphocyte," + square(0, 0, 10) + "\n";
    gt += "t1,epithelial," + square(20, 20, 10) + "\n";
    gt += "t2,lymphocyte," + square(0, 0, 8) + "\n";
    pred += "t1,lymphocyte," + square(1, 0, 10) + "\n";   // IoU 0.82, same class
    pred += "t1,lymphocyte," + square(21, 21, 10) + "\n"; // matched, wrong class
    pred += "t3,epithelial," + square(0, 0, 8) + "\n";    // tile absent from reference
    write_text_file(dir / "gt.csv", gt);
    write_text_file(dir / "pred.csv", pred);

    const auto events = match_tiles(read_instances(dir / "pred.csv"), read_instances(dir / "gt.csv"));
    const EventMatch m = events_to_match(events);
    CHECK(m.match.matched.size() == 2);
    CHECK(m.match.unmatched_pred.size() == 1);
    CHECK(m.match.unmatched_gt.size() == 1);
    const auto f1 = f1_per_class(m.pred_labels, m.gt_labels, m.match);
    // lymphocyte: tp 1, fp 1, fn 1; epithelial: tp 0, fp 1, fn 1
    CHECK(f1.at("lymphocyte") == doctest::Approx(0.5));
    CHECK(f1.at("epithelial") == 0.0);

    EvalOptions o;
    o.metric = EvalMetric::pq;
    o.bootstrap = 50;
    const auto pq = evaluate_files(dir / "pred.csv", dir / "gt.csv", o);
    const InstanceQuality q = pq_dq_sq(m.match);
    CHECK(pq["estimate"].get<double>() == q.pq);
    CHECK(pq["dq"]["estimate"].get<double>() == q.dq);
    CHECK(pq["sq"]["estimate"].get<double>() == q.sq);
}

namespace {

// Small synthetic cohort plus interpretability inputs and a fast config.
struct MiniRun {
    testing::TempDir dir{"imilia_pipe"};
    RunConfig cfg;

    MiniRun() {
        SynthParams p;
        p.n_slides = 24;
        p.n_tiles_min = 8;
        p.n_tiles_max = 16;
        p.d = 8;
        p.seed = 5;
        SyntheticCohort cohort = synth_dataset(p);
        for (std::size_t i = 0; i < cohort.dataset.slides.size(); ++i)
            cohort.dataset.slides[i].cohort = i % 2 ? "east" : "west";
        write_synthetic(cohort, p, dir.path());
        InterpretSynthParams ip;
        ip.context_px = 252;
        ip.cells_min = 5;
        ip.cells_max = 10;
        ip.seed = 5;
        write_interpret_synthetic(cohort, ip, dir.path());

        cfg.manifest = (dir / "manifest.csv").string();
        cfg.cells_dir = (dir / "cells").string();
        cfg.patch_dir = (dir / "patches").string();
        cfg.episeg_pairs = (dir / "episeg_train").string();
        cfg.context_px = 252;
        cfg.n_folds = 3;
        cfg.n_extremes = 20;
        cfg.bootstrap = 50;
        cfg.chowder.n_channels = 2;
        cfg.chowder.n_extremes = 3;
        cfg.chowder.mlp_hidden = {8};
        cfg.chowder.mlp_dropout = {0.0};
        cfg.chowder.n_epochs = 4;
        cfg.chowder.batch_size = 8;
    }

    fs::path run(const std::string& name, int threads = 1) {
        RunConfig c = cfg;
        c.out_dir = (dir / name).string();
        return run_pipeline(c, 3, threads);
    }
};

nlohmann::json manifest_of(const fs::path& run) {
    return nlohmann::json::parse(read_text_file(run / "run_manifest.json"));
}

}  // namespace

TEST_CASE("pipeline runs every stage and reruns identically") {
    MiniRun mini;
    const fs::path a = mini.run("a", 1);
    const fs::path b = mini.run("b", 3);
    for (const char* stage : {"load", "train", "infer", "extremes", "episeg", "features", "report"})
        CHECK(fs::exists(a / "stages" / (std::string(stage) + ".done")));
    CHECK(read_text_file(a / "run_manifest.json") == read_text_file(b / "run_manifest.json"));

    const auto rows = read_feature_rows(a / "features" / "features.csv");
    CHECK(rows.size() == 2 * 2 * 20);  // cohorts x sides x n
    std::size_t masked = 0;
    for (const auto& r : rows) masked += r.has_mask ? 1 : 0;
    CHECK(masked == rows.size());
    CHECK(fs::exists(a / "report" / "violin_density_lymphocyte.svg"));
    CHECK(fs::exists(a / "report" / "pr_curve.svg"));
    const auto manifest = manifest_of(a);
    CHECK(manifest["seed"] == 3);
    CHECK(manifest["outputs"].contains("train/models/fold_00.bin"));
    CHECK_FALSE(manifest["outputs"].contains("events.jsonl"));

    // rerunning into the same directory reproduces the same manifest
    mini.run("a", 2);
    CHECK(manifest_of(a) == manifest);
}

TEST_CASE("pipeline degrades without cell files") {
    MiniRun mini;
    fs::remove(mini.dir / "cells" / "slide_0000.jsonl");
    const fs::path a = mini.run("partial");
    CHECK(fs::exists(a / "stages" / "features.done"));
    for (const auto& r : read_feature_rows(a / "features" / "features.csv")) CHECK(r.slide_id != "slide_0000");

    mini.cfg.cells_dir = (mini.dir / "no_cells").string();
    const fs::path b = mini.run("score_only");
    CHECK(fs::exists(b / "stages" / "features.skipped"));
    CHECK_FALSE(fs::exists(b / "report" / "composition.csv"));
    CHECK(fs::exists(b / "report" / "pr_curve.svg"));
    const auto metrics = nlohmann::json::parse(read_text_file(b / "report" / "metrics.json"));
    CHECK(metrics["score_only"] == true);
}

TEST_CASE("a failing stage names itself and leaves earlier outputs intact") {
    MiniRun mini;
    write_text_file(mini.dir / "episeg_train" / "train_0.mask.pgm", "P5\n3 3\n255\nxx");
    try {
        mini.run("broken");
        FAIL("expected the episeg stage to fail");
    } catch (const StageError& e) {
        CHECK(e.stage() == "episeg");
        CHECK(e.digest().size() == 64);
        CHECK(std::string(e.what()).find("episeg") != std::string::npos);
    }
    const fs::path run = mini.dir / "broken";
    CHECK(fs::exists(run / "stages" / "episeg.failed"));
    CHECK(fs::exists(run / "stages" / "extremes.done"));
    CHECK(fs::exists(run / "train" / "models" / "fold_00.json"));
    CHECK(fs::exists(run / "scores" / "tile_scores.csv"));
    CHECK_FALSE(fs::exists(run / "stages" / "features.done"));
}
