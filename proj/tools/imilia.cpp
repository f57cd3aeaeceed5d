#include "imilia/chowder.hpp"
#include "imilia/config.hpp"
#include "imilia/episeg.hpp"
#include "imilia/evaluate.hpp"
#include "imilia/ingest.hpp"
#include "imilia/pipeline.hpp"
#include "imilia/preprocess.hpp"
#include "imilia/report.hpp"
#include "imilia/synth.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace imilia;

namespace {

// Options shared by every subcommand.
struct Globals {
    std::optional<std::uint64_t> seed;
    std::optional<int> threads;
    std::string config;
    std::string log_level = "info";

    RunConfig load() const { return config.empty() ? RunConfig{} : load_config(config); }
    std::uint64_t resolved_seed(const RunConfig& cfg) const { return resolve_seed(seed, cfg.seed); }
    int resolved_threads(const RunConfig& cfg) const { return resolve_threads(threads ? *threads : cfg.threads); }
};

void print_json(const nlohmann::json& j) { std::cout << j.dump(2) << "\n"; }

std::string first_nonempty(const std::string& a, const std::string& b) { return a.empty() ? b : a; }

void require(const std::string& value, const char* flag) {
    if (value.empty()) throw Error(fmt::format("{} is required", flag));
}

void cmd_preprocess(const Globals& g, const std::string& image, int tile_size, double min_frac, double mpp,
                    int downsample, const std::string& out) {
    const RunConfig cfg = g.load();
    TissueMaskOptions opts;
    opts.downsample = downsample > 0 ? downsample : cfg.downsample;
    opts.min_saturation = cfg.min_saturation;
    opts.min_component_px = cfg.min_component_px;
    const BinaryMask mask = tissue_mask(read_ppm(image), opts);
    const TileGrid grid = tessellate(mask, tile_size, min_frac, mpp);
    fs::create_directories(out);
    write_mask_pgm(mask, fs::path(out) / "tissue_mask.pgm");
    write_tile_manifest(grid, fs::path(out) / "tiles.csv");
    print_json({{"tiles", grid.tiles.size()}, {"tissue_px", mask.count()}, {"out", out}});
}

void cmd_train(const Globals& g, const std::string& manifest_flag, std::optional<int> folds,
               std::optional<int> epochs, const std::string& out) {
    RunConfig cfg = g.load();
    const std::string manifest = first_nonempty(manifest_flag, cfg.manifest);
    require(manifest, "--manifest");
    cfg.chowder.seed = g.resolved_seed(cfg);
    if (epochs) cfg.chowder.n_epochs = *epochs;
    const CrossValidationResult cv = run_training(load_dataset(manifest), cfg.chowder, folds ? *folds : cfg.n_folds,
                                                  g.resolved_threads(cfg), out);
    nlohmann::json best = nlohmann::json::array();
    for (const auto& f : cv.folds) best.push_back(f.best_epoch);
    print_json({{"out_of_fold_auc", cv.auc}, {"folds", cv.folds.size()}, {"best_epochs", best}, {"out", out}});
}

void cmd_infer(const Globals& g, const std::string& models_dir, const std::string& manifest_flag,
               const std::string& scores_out, const std::string& predictions_out) {
    const RunConfig cfg = g.load();
    const std::string manifest = first_nonempty(manifest_flag, cfg.manifest);
    require(manifest, "--manifest");
    const auto models = load_models(models_dir);
    run_inference(load_dataset(manifest), models, g.resolved_threads(cfg), scores_out, predictions_out);
    print_json({{"models", models.size()}, {"scores", scores_out}});
}

void cmd_extremes(const Globals& g, const std::string& scores, std::optional<std::size_t> n, const std::string& side,
                  const std::string& out, const std::string& manifest, const std::string& cohort) {
    const RunConfig cfg = g.load();
    TileScoreTable table = read_score_table(scores);
    if (!cohort.empty()) {
        require(manifest, "--manifest (with --cohort)");
        table = filter_cohort(table, load_dataset(manifest), cohort);
        if (table.rows.empty()) throw Error(fmt::format("no scored tiles for cohort '{}'", cohort));
    }
    const ExtremeSide s = parse_side(side);
    const auto tiles = extract_extremes(table, n ? *n : cfg.n_extremes, s);
    if (out.empty()) {
        std::cout << "side,slide_id,tile_id,score\n";
        for (const auto& t : tiles)
            std::cout << fmt::format("{},{},{},{}\n", to_string(s), t.slide_id, t.tile_id, format_double(t.score));
    } else {
        write_extremes(tiles, s, out);
    }
}

void cmd_episeg_train(const Globals& g, const std::string& pairs_flag, std::vector<double> grid,
                      std::optional<int> folds, std::optional<int> patch_size, const std::string& out) {
    const RunConfig cfg = g.load();
    const std::string pairs_dir = first_nonempty(pairs_flag, cfg.episeg_pairs);
    require(pairs_dir, "--pairs");
    if (grid.empty()) grid = episeg_grid(cfg);
    const PatchPairs pairs = load_patch_pairs(pairs_dir, patch_size ? *patch_size : cfg.patch_size_px);
    const EpiSegModel model = run_episeg_training(pairs, grid, folds ? *folds : cfg.episeg_folds,
                                                  g.resolved_seed(cfg), out);
    print_json({{"C", model.C}, {"pairs", pairs.size()}, {"model", (fs::path(out) / "model.json").string()}});
}

void cmd_episeg_infer(const Globals& g, const std::string& model_flag, const std::string& tiles,
                      const std::string& out, std::optional<double> threshold, std::optional<int> context_px,
                      std::optional<int> tile_size, std::optional<int> patch_size) {
    const RunConfig cfg = g.load();
    const std::string model_path = first_nonempty(model_flag, cfg.episeg_model);
    require(model_path, "--model");
    const EpiSegModel model = load_episeg_model(model_path);
    const ExpansionGeometry geom = geometry_for(context_px ? *context_px : cfg.context_px,
                                                tile_size ? *tile_size : cfg.tile_size_px,
                                                patch_size ? *patch_size : cfg.patch_size_px);
    const auto names = list_containers(tiles);
    const auto summary = run_episeg_inference(model, tiles, names, geom, threshold ? *threshold : cfg.threshold,
                                              g.resolved_threads(cfg), out);
    print_json({{"tiles", summary.written}, {"out", out}});
}

void cmd_features(const Globals& g, const std::string& cells, const std::string& masks,
                  const std::string& manifest_flag, const std::string& out, const std::vector<std::string>& extremes,
                  std::optional<int> tile_size, bool strict) {
    const RunConfig cfg = g.load();
    const std::string manifest = first_nonempty(manifest_flag, cfg.manifest);
    require(manifest, "--manifest");
    const std::string cells_dir = first_nonempty(cells, cfg.cells_dir);
    require(cells_dir, "--cells");
    const Dataset dataset = load_dataset(manifest);
    std::vector<TileRequest> requests;
    if (extremes.empty()) {
        requests = requests_from_cells(dataset, cells_dir);
    } else {
        for (const auto& e : extremes) {
            auto part = requests_from_extremes(read_extremes(e));
            requests.insert(requests.end(), part.begin(), part.end());
        }
    }
    FeatureInputs fi;
    fi.cells_dir = cells_dir;
    fi.masks_dir = masks;
    fi.tile_size_px = tile_size ? *tile_size : cfg.tile_size_px;
    fi.strict_classes = strict;
    const auto rows = run_features(dataset, requests, fi, g.resolved_threads(cfg));
    if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
    write_feature_rows(rows, out);
    print_json({{"rows", rows.size()}, {"out", out}});
}

void cmd_eval(const Globals& g, const std::string& pred, const std::string& gt, const std::string& metric,
              std::optional<int> bootstrap, std::optional<double> level) {
    const RunConfig cfg = g.load();
    EvalOptions o;
    o.metric = parse_metric(metric);
    o.bootstrap = bootstrap ? *bootstrap : cfg.bootstrap;
    o.level = level ? *level : cfg.level;
    o.seed = g.resolved_seed(cfg);
    print_json(evaluate_files(pred, gt, o));
}

void cmd_report(const Globals& g, const std::string& features, const std::string& scores, const std::string& out,
                std::optional<int> bootstrap, std::optional<double> level) {
    const RunConfig cfg = g.load();
    if (features.empty() && scores.empty()) throw Error("report needs --features and/or --scores");
    ReportInputs ri;
    ri.seed = g.resolved_seed(cfg);
    ri.bootstrap = bootstrap ? *bootstrap : cfg.bootstrap;
    ri.level = level ? *level : cfg.level;
    std::map<std::string, fs::path> inputs;
    if (!features.empty()) {
        if (fs::exists(features)) {
            ri.features = read_feature_rows(features);
            inputs["features"] = features;
        } else {
            spdlog::warn("report: features file '{}' not found, writing a score-only report", features);
        }
    }
    if (!scores.empty()) {
        ri.scores = read_scored_slides(scores);
        inputs["scores"] = scores;
    }
    fs::create_directories(out);
    fs::remove(fs::path(out) / "run_manifest.json");
    const auto metrics = run_report(ri, out, g.resolved_threads(cfg));
    const auto manifest = make_run_manifest(ri.seed, inputs, out);
    write_text_file(fs::path(out) / "run_manifest.json", manifest.dump(2) + "\n");
    print_json(metrics);
}

void cmd_pipeline(const Globals& g, const std::string& out) {
    if (g.config.empty()) throw Error("pipeline needs --config");
    RunConfig cfg = load_config(g.config);
    if (!out.empty()) cfg.out_dir = out;
    const fs::path run = run_pipeline(cfg, g.resolved_seed(cfg), g.resolved_threads(cfg), g.config);
    print_json({{"run_dir", run.string()}, {"manifest", (run / "run_manifest.json").string()}});
}

struct SynthFlags {
    std::size_t slides = 50;
    std::size_t d = 32;
    double separation = 6.0;
    std::size_t tiles_min = 50;
    std::size_t tiles_max = 150;
    double signal_fraction = 0.1;
    double positive_fraction = 0.5;
    std::vector<std::string> cohorts{"cohort_a", "cohort_b"};
    bool no_interpret = false;
    int context_px = 308;
    std::size_t n_extremes = 1000;
    int n_epochs = 30;
};

void cmd_synth(const Globals& g, const SynthFlags& f, const std::string& out) {
    const RunConfig base = g.load();
    const std::uint64_t seed = g.resolved_seed(base);
    if (f.cohorts.empty()) throw Error("--cohorts needs at least one name");
    SynthParams p;
    p.n_slides = f.slides;
    p.d = f.d;
    p.separation = f.separation;
    p.n_tiles_min = f.tiles_min;
    p.n_tiles_max = f.tiles_max;
    p.signal_fraction = f.signal_fraction;
    p.positive_fraction = f.positive_fraction;
    p.seed = seed;
    SyntheticCohort cohort = synth_dataset(p);
    for (std::size_t i = 0; i < cohort.dataset.slides.size(); ++i)
        cohort.dataset.slides[i].cohort = f.cohorts[i % f.cohorts.size()];
    write_synthetic(cohort, p, out);

    RunConfig cfg;
    cfg.seed = seed;
    cfg.out_dir = "run";
    cfg.manifest = "manifest.csv";
    cfg.chowder.n_epochs = f.n_epochs;
    cfg.n_extremes = f.n_extremes;
    if (!f.no_interpret) {
        InterpretSynthParams ip;
        ip.context_px = f.context_px;
        ip.seed = seed;
        write_interpret_synthetic(cohort, ip, out);
        cfg.cells_dir = "cells";
        cfg.patch_dir = "patches";
        cfg.episeg_pairs = "episeg_train";
        cfg.context_px = f.context_px;
        cfg.patch_size_px = ip.patch_size_px;
    }
    write_text_file(fs::path(out) / "config.toml", to_toml(cfg));
    print_json({{"slides", cohort.dataset.slides.size()},
                {"manifest", (fs::path(out) / "manifest.csv").string()},
                {"config", (fs::path(out) / "config.toml").string()}});
}

void report_error(const std::string& command, const std::exception& e) {
    nlohmann::json j = {{"command", command}};
    if (const auto* se = dynamic_cast<const StageError*>(&e)) {
        j["stage"] = se->stage();
        j["input_sha256"] = se->digest();
        j["message"] = se->message();
    } else {
        j["message"] = e.what();
    }
    std::cerr << "error: " << j.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
    auto logger = spdlog::stderr_logger_mt("imilia");
    logger->set_pattern("[%l] %v");
    spdlog::set_default_logger(logger);

    CLI::App app{"imilia: slide-level inflammation classifier and its interpretability blocks"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--seed", g.seed, "global seed (default: config, then IMILIA_SEED, then 0)");
    app.add_option("--threads", g.threads, "worker threads (default: all cores)")->check(CLI::NonNegativeNumber);
    app.add_option("--config", g.config, "TOML run config")->check(CLI::ExistingFile);
    app.add_option("--log-level", g.log_level, "trace|debug|info|warn|error|off");

    std::string command;
    std::function<void()> action;

    // preprocess
    std::string pp_image, pp_out;
    int pp_tile = 224, pp_downsample = 0;
    double pp_frac = 0.5, pp_mpp = 0.5;
    auto* pp = app.add_subcommand("preprocess", "tissue mask and tile grid of one slide image (PPM)");
    pp->add_option("--image", pp_image, "RGB slide image (binary PPM)")->required()->check(CLI::ExistingFile);
    pp->add_option("--tile-size", pp_tile, "tile edge in pixels");
    pp->add_option("--min-tissue-frac", pp_frac, "minimum tissue fraction per tile");
    pp->add_option("--mpp", pp_mpp, "microns per pixel of the image");
    pp->add_option("--downsample", pp_downsample, "mask downsampling factor");
    pp->add_option("--out", pp_out, "output directory")->required();
    pp->callback([&] { action = [&] { cmd_preprocess(g, pp_image, pp_tile, pp_frac, pp_mpp, pp_downsample, pp_out); }; });

    // train
    std::string tr_manifest, tr_out;
    std::optional<int> tr_folds, tr_epochs;
    auto* tr = app.add_subcommand("train", "cross-validated Chowder training");
    tr->add_option("--manifest", tr_manifest, "dataset manifest CSV");
    tr->add_option("--folds", tr_folds, "number of CV folds");
    tr->add_option("--epochs", tr_epochs, "training epochs per fold");
    tr->add_option("--out", tr_out, "output directory")->required();
    tr->callback([&] { action = [&] { cmd_train(g, tr_manifest, tr_folds, tr_epochs, tr_out); }; });

    // infer
    std::string in_models, in_manifest, in_scores, in_pred;
    auto* in = app.add_subcommand("infer", "ensemble inference over every slide");
    in->add_option("--models", in_models, "directory of fold models")->required()->check(CLI::ExistingDirectory);
    in->add_option("--manifest", in_manifest, "dataset manifest CSV");
    in->add_option("--scores-out", in_scores, "tile score table CSV")->required();
    in->add_option("--predictions-out", in_pred, "slide prediction CSV");
    in->callback([&] { action = [&] { cmd_infer(g, in_models, in_manifest, in_scores, in_pred); }; });

    // extremes
    std::string ex_scores, ex_side, ex_out, ex_manifest, ex_cohort;
    std::optional<std::size_t> ex_n;
    auto* ex = app.add_subcommand("extremes", "top or bottom tiles by ensemble score");
    ex->add_option("--scores", ex_scores, "tile score table CSV")->required()->check(CLI::ExistingFile);
    ex->add_option("--n", ex_n, "tiles per side");
    ex->add_option("--side", ex_side, "max or min")->required()->check(CLI::IsMember({"max", "min"}));
    ex->add_option("--out", ex_out, "output CSV (default: stdout)");
    ex->add_option("--manifest", ex_manifest, "dataset manifest, needed with --cohort");
    ex->add_option("--cohort", ex_cohort, "restrict to one cohort");
    ex->callback([&] { action = [&] { cmd_extremes(g, ex_scores, ex_n, ex_side, ex_out, ex_manifest, ex_cohort); }; });

    // episeg-train
    std::string et_pairs, et_out = "episeg";
    std::vector<double> et_grid;
    std::optional<int> et_folds, et_patch;
    auto* et = app.add_subcommand("episeg-train", "fit the patch-level epithelium classifier");
    et->add_option("--pairs", et_pairs, "directory of <name>.mask.pgm + <name>.{json,bin}");
    et->add_option("--grid", et_grid, "C values, comma separated")->delimiter(',');
    et->add_option("--folds", et_folds, "CV folds for C selection");
    et->add_option("--patch-size", et_patch, "patch edge in pixels");
    et->add_option("--out", et_out, "output directory (model.json, c_selection.csv)");
    et->callback([&] { action = [&] { cmd_episeg_train(g, et_pairs, et_grid, et_folds, et_patch, et_out); }; });

    // episeg-infer
    std::string ei_model, ei_tiles, ei_out;
    std::optional<double> ei_threshold;
    std::optional<int> ei_context, ei_tile, ei_patch;
    auto* ei = app.add_subcommand("episeg-infer", "epithelium masks for expanded tiles");
    ei->add_option("--model", ei_model, "EpiSeg model JSON");
    ei->add_option("--tiles", ei_tiles, "directory of expanded patch grids")->required()->check(CLI::ExistingDirectory);
    ei->add_option("--out", ei_out, "output directory")->required();
    ei->add_option("--threshold", ei_threshold, "probability threshold");
    ei->add_option("--context-px", ei_context, "expanded context edge in pixels");
    ei->add_option("--tile-size", ei_tile, "tile-of-interest edge in pixels");
    ei->add_option("--patch-size", ei_patch, "patch edge in pixels");
    ei->callback([&] {
        action = [&] { cmd_episeg_infer(g, ei_model, ei_tiles, ei_out, ei_threshold, ei_context, ei_tile, ei_patch); };
    });

    // features
    std::string fe_cells, fe_masks, fe_manifest, fe_out;
    std::vector<std::string> fe_extremes;
    std::optional<int> fe_tile;
    bool fe_strict = false;
    auto* fe = app.add_subcommand("features", "per-tile cell counts and in-epithelium densities");
    fe->add_option("--cells", fe_cells, "directory of <slide_id>.jsonl cell files");
    fe->add_option("--masks", fe_masks, "directory of <slide>__<tile>.mask.pgm epithelium masks");
    fe->add_option("--manifest", fe_manifest, "dataset manifest CSV");
    fe->add_option("--out", fe_out, "feature CSV")->required();
    fe->add_option("--extremes", fe_extremes, "extreme tile CSV (repeatable); default: every tile with cells");
    fe->add_option("--tile-size", fe_tile, "tile edge in pixels");
    fe->add_flag("--strict-classes", fe_strict, "reject unknown cell classes instead of mapping them to other");
    fe->callback([&] {
        action = [&] { cmd_features(g, fe_cells, fe_masks, fe_manifest, fe_out, fe_extremes, fe_tile, fe_strict); };
    });

    // eval
    std::string ev_pred, ev_gt, ev_metric;
    std::optional<int> ev_boot;
    std::optional<double> ev_level;
    auto* ev = app.add_subcommand("eval", "metric with bootstrap confidence interval");
    ev->add_option("--pred", ev_pred, "predictions")->required()->check(CLI::ExistingFile);
    ev->add_option("--gt", ev_gt, "reference")->required()->check(CLI::ExistingFile);
    ev->add_option("--metric", ev_metric, "auc|ap|pearson|f1|pq")
        ->required()
        ->check(CLI::IsMember({"auc", "ap", "pearson", "f1", "pq"}));
    ev->add_option("--bootstrap", ev_boot, "bootstrap replicates");
    ev->add_option("--level", ev_level, "confidence level");
    ev->callback([&] { action = [&] { cmd_eval(g, ev_pred, ev_gt, ev_metric, ev_boot, ev_level); }; });

    // report
    std::string rp_features, rp_scores, rp_out;
    std::optional<int> rp_boot;
    std::optional<double> rp_level;
    auto* rp = app.add_subcommand("report", "composition tables, violins and precision-recall curve");
    rp->add_option("--features", rp_features, "feature CSV");
    rp->add_option("--scores", rp_scores, "slide scores CSV with score and label columns");
    rp->add_option("--out", rp_out, "output directory")->required();
    rp->add_option("--bootstrap", rp_boot, "bootstrap replicates for the AUC interval");
    rp->add_option("--level", rp_level, "confidence level");
    rp->callback([&] { action = [&] { cmd_report(g, rp_features, rp_scores, rp_out, rp_boot, rp_level); }; });

    // pipeline
    std::string pl_out;
    auto* pl = app.add_subcommand("pipeline", "end-to-end run from a config file");
    pl->add_option("--out", pl_out, "run directory (overrides run.out_dir)");
    pl->callback([&] { action = [&] { cmd_pipeline(g, pl_out); }; });

    // synth
    SynthFlags sf;
    std::string sy_out;
    auto* sy = app.add_subcommand("synth", "synthetic cohort with interpretability inputs and a run config");
    sy->add_option("--out", sy_out, "output directory")->required();
    sy->add_option("--slides", sf.slides, "number of slides");
    sy->add_option("--d", sf.d, "tile embedding dimension");
    sy->add_option("--separation", sf.separation, "signal shift of positive tiles");
    sy->add_option("--tiles-min", sf.tiles_min, "minimum tiles per slide");
    sy->add_option("--tiles-max", sf.tiles_max, "maximum tiles per slide");
    sy->add_option("--signal-fraction", sf.signal_fraction, "share of signal tiles in positive slides");
    sy->add_option("--positive-fraction", sf.positive_fraction, "share of positive slides");
    sy->add_option("--cohorts", sf.cohorts, "cohort names, assigned round-robin")->delimiter(',');
    sy->add_option("--context-px", sf.context_px, "expanded context edge of the patch grids");
    sy->add_option("--n-extremes", sf.n_extremes, "extremes per side written to the run config");
    sy->add_option("--epochs", sf.n_epochs, "training epochs written to the run config");
    sy->add_flag("--no-interpret", sf.no_interpret, "skip patch grids, cells and EpiSeg training tiles");
    sy->callback([&] { action = [&] { cmd_synth(g, sf, sy_out); }; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << nlohmann::json({{"command", "parse"}, {"message", e.what()}}).dump() << std::endl;
        return 2;
    }
    for (auto* sub : app.get_subcommands()) command = sub->get_name();

    try {
        spdlog::set_level(spdlog::level::from_str(g.log_level));
        action();
    } catch (const std::exception& e) {
        report_error(command, e);
        return 1;
    }
    return 0;
}
