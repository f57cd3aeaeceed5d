#include "imilia/pipeline.hpp"

#include "imilia/metrics.hpp"
#include "imilia/preprocess.hpp"
#include "imilia/report.hpp"

#include <fmt/chrono.h>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <fstream>
#include <map>
#include <set>

namespace fs = std::filesystem;

namespace imilia {

StageError::StageError(std::string stage, std::string digest, const std::string& message)
    : Error(fmt::format("stage '{}' failed (input sha256 {}): {}", stage, digest, message)),
      stage_(std::move(stage)),
      digest_(std::move(digest)),
      message_(message) {}

RunLog::RunLog(fs::path run_dir) : dir_(std::move(run_dir)) {
    fs::create_directories(dir_ / "stages");
}

void RunLog::event(std::string_view name, nlohmann::json fields) {
    if (!fields.is_object()) fields = nlohmann::json::object();
    const auto now = std::chrono::system_clock::now();
    fields["event"] = name;
    fields["time"] = fmt::format("{:%Y-%m-%dT%H:%M:%S}Z", fmt::gmtime(std::chrono::system_clock::to_time_t(now)));
    std::ofstream out(dir_ / "events.jsonl", std::ios::app);
    out << fields.dump() << "\n";
}

void RunLog::skip_stage(const std::string& stage, const std::string& reason) {
    fs::remove(dir_ / "stages" / (stage + ".done"));
    fs::remove(dir_ / "stages" / (stage + ".failed"));
    write_text_file(dir_ / "stages" / (stage + ".skipped"), reason + "\n");
    spdlog::warn("{} stage skipped: {}", stage, reason);
    event("stage_skipped", {{"stage", stage}, {"reason", reason}});
}

void RunLog::run_stage(const std::string& stage, const std::vector<fs::path>& inputs,
                       const std::function<void()>& body) {
    for (const char* ext : {".done", ".failed", ".skipped"}) fs::remove(dir_ / "stages" / (stage + ext));
    std::string digest;
    try {
        digest = input_digest(inputs);
    } catch (const std::exception& e) {
        digest = "unavailable";
        const nlohmann::json marker = {{"stage", stage}, {"input_sha256", digest}, {"message", e.what()}};
        write_text_file(dir_ / "stages" / (stage + ".failed"), marker.dump(2) + "\n");
        event("stage_failed", marker);
        throw StageError(stage, digest, e.what());
    }
    spdlog::info("stage {}: start", stage);
    event("stage_start", {{"stage", stage}, {"input_sha256", digest}});
    const auto t0 = std::chrono::steady_clock::now();
    try {
        body();
    } catch (const std::exception& e) {
        const nlohmann::json marker = {{"stage", stage}, {"input_sha256", digest}, {"message", e.what()}};
        write_text_file(dir_ / "stages" / (stage + ".failed"), marker.dump(2) + "\n");
        event("stage_failed", marker);
        throw StageError(stage, digest, e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_text_file(dir_ / "stages" / (stage + ".done"),
                    nlohmann::json({{"stage", stage}, {"input_sha256", digest}}).dump(2) + "\n");
    event("stage_done", {{"stage", stage}, {"seconds", secs}});
    spdlog::info("stage {}: done in {:.1f}s", stage, secs);
    completed_.push_back(stage);
}

namespace {

void digest_into(std::string& acc, const fs::path& p) {
    if (fs::is_directory(p)) {
        std::vector<fs::path> files;
        for (const auto& e : fs::recursive_directory_iterator(p))
            if (e.is_regular_file()) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) acc += fs::relative(f, p).generic_string() + ":" + sha256_file(f) + "\n";
    } else {
        acc += sha256_file(p) + "\n";
    }
}

std::string safe_name(std::string s) {
    for (char& c : s)
        if (c == '/' || c == '\\' || c == ' ' || c == ':') c = '_';
    return s;
}

}  // namespace

std::string input_digest(const std::vector<fs::path>& inputs) {
    std::string acc;
    for (const auto& p : inputs) {
        if (!fs::exists(p)) throw Error(fmt::format("input '{}' not found", p.string()));
        digest_into(acc, p);
    }
    return sha256_bytes(acc);
}

Dataset labeled_subset(const Dataset& dataset) {
    Dataset out;
    for (const auto& s : dataset.slides)
        if (s.label) out.slides.push_back(s);
    return out;
}

CrossValidationResult run_training(const Dataset& dataset, const ChowderConfig& cfg, int n_folds, int threads,
                                   const fs::path& out) {
    const Dataset labeled = labeled_subset(dataset);
    if (labeled.slides.empty()) throw Error("no labeled slides to train on");
    const FoldAssignment folds = make_folds(labeled, n_folds, cfg.seed);

    std::vector<Bag> bags(labeled.slides.size());
    parallel_for(bags.size(), threads, [&](std::size_t i) {
        const auto& rec = labeled.slides[i];
        bags[i] = Bag{rec.slide_id, load_features(rec), *rec.label};
    });
    const std::size_t d = bags.front().features.d;
    for (const auto& b : bags)
        if (b.features.d != d)
            throw Error(fmt::format("slide '{}' has {}-dimensional features, expected {}", b.slide_id, b.features.d, d));

    CrossValidationResult cv = cross_validate(bags, folds, cfg, threads);

    fs::create_directories(out / "models");
    for (const auto& e : fs::directory_iterator(out / "models")) fs::remove(e.path());
    for (std::size_t f = 0; f < cv.folds.size(); ++f)
        save_model(cv.folds[f].model, out / "models" / fmt::format("fold_{:02d}", f), static_cast<int>(f));

    std::string fold_csv = "slide_id,fold\n";
    for (const auto& s : labeled.slides) fold_csv += fmt::format("{},{}\n", s.slide_id, folds.fold_of(s.slide_id));
    write_text_file(out / "folds.csv", fold_csv);

    std::string oof = "slide_id,cohort,fold,label,score\n";
    for (const auto& p : cv.out_of_fold)
        oof += fmt::format("{},{},{},{},{}\n", p.slide_id, dataset.at(p.slide_id).cohort, p.fold, p.label,
                           format_double(p.probability));
    write_text_file(out / "out_of_fold.csv", oof);

    std::string log = "fold,epoch,train_loss,train_auc,valid_loss,valid_auc,selected\n";
    for (std::size_t f = 0; f < cv.folds.size(); ++f)
        for (const auto& e : cv.folds[f].log)
            log += fmt::format("{},{},{},{},{},{},{}\n", f, e.epoch, format_double(e.train_loss),
                               format_double(e.train_auc), format_double(e.valid_loss), format_double(e.valid_auc),
                               e.epoch == cv.folds[f].best_epoch ? 1 : 0);
    write_text_file(out / "training_log.csv", log);
    spdlog::info("cross-validation: {} folds, out-of-fold AUC {:.4f}", cv.folds.size(), cv.auc);
    return cv;
}

void run_inference(const Dataset& dataset, std::span<const ChowderModel> models, int threads,
                   const fs::path& scores_csv, const fs::path& predictions_csv) {
    if (models.empty()) throw Error("inference needs at least one model");
    std::vector<FeatureMatrix> tiles(dataset.slides.size());
    std::vector<EnsembleOutput> outputs(dataset.slides.size());
    parallel_for(dataset.slides.size(), threads, [&](std::size_t i) {
        tiles[i] = load_features(dataset.slides[i]);
        outputs[i] = ensemble_predict(models, tiles[i]);
    });

    TileScoreTable table;
    std::string pred = "slide_id,cohort,label,score\n";
    for (std::size_t i = 0; i < dataset.slides.size(); ++i) {
        const auto& rec = dataset.slides[i];
        append_scores(table, rec.slide_id, tiles[i], outputs[i]);
        pred += fmt::format("{},{},{},{}\n", rec.slide_id, rec.cohort, rec.label ? std::to_string(*rec.label) : "",
                            format_double(outputs[i].probability));
    }
    if (scores_csv.has_parent_path()) fs::create_directories(scores_csv.parent_path());
    write_score_table(table, scores_csv);
    if (!predictions_csv.empty()) {
        if (predictions_csv.has_parent_path()) fs::create_directories(predictions_csv.parent_path());
        write_text_file(predictions_csv, pred);
    }
}

TileScoreTable filter_cohort(const TileScoreTable& table, const Dataset& dataset, const std::string& cohort) {
    std::set<std::string> ids;
    for (const auto& s : dataset.slides)
        if (s.cohort == cohort) ids.insert(s.slide_id);
    TileScoreTable out;
    for (const auto& r : table.rows)
        if (ids.count(r.slide_id)) out.rows.push_back(r);
    return out;
}

std::vector<std::string> cohorts_of(const Dataset& dataset) {
    std::vector<std::string> out;
    for (const auto& s : dataset.slides)
        if (std::find(out.begin(), out.end(), s.cohort) == out.end()) out.push_back(s.cohort);
    return out;
}

std::vector<fs::path> run_extremes(const Dataset& dataset, const TileScoreTable& table, std::size_t n,
                                   const fs::path& out) {
    fs::create_directories(out);
    std::vector<fs::path> files;
    for (const auto& cohort : cohorts_of(dataset)) {
        const TileScoreTable sub = filter_cohort(table, dataset, cohort);
        if (sub.rows.empty()) {
            spdlog::warn("extremes: cohort '{}' has no scored tiles", cohort);
            continue;
        }
        for (ExtremeSide side : {ExtremeSide::max, ExtremeSide::min}) {
            const fs::path path = out / fmt::format("{}_{}.csv", safe_name(cohort), to_string(side));
            write_extremes(extract_extremes(sub, n, side), side, path);
            files.push_back(path);
        }
    }
    return files;
}

std::vector<std::string> list_containers(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw Error(fmt::format("directory '{}' not found", dir.string()));
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".json") names.push_back(e.path().stem().string());
    std::sort(names.begin(), names.end());
    return names;
}

PatchPairs load_patch_pairs(const fs::path& dir, int patch_size_px) {
    if (!fs::is_directory(dir)) throw Error(fmt::format("training pair directory '{}' not found", dir.string()));
    const std::string suffix = ".mask.pgm";
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir)) {
        const std::string f = e.path().filename().string();
        if (f.size() > suffix.size() && f.ends_with(suffix)) names.push_back(f.substr(0, f.size() - suffix.size()));
    }
    std::sort(names.begin(), names.end());
    if (names.empty()) throw Error(fmt::format("no <name>.mask.pgm files in '{}'", dir.string()));
    PatchPairs pairs;
    for (std::size_t i = 0; i < names.size(); ++i) {
        const PatchGrid grid = read_patch_grid(dir / (names[i] + ".json"));
        const BinaryMask mask = read_mask_pgm(dir / (names[i] + suffix));
        try {
            pairs.add_tile(grid, pool_mask(mask, patch_size_px), static_cast<int>(i));
        } catch (const Error& e) {
            throw Error(fmt::format("training tile '{}': {}", names[i], e.what()));
        }
    }
    return pairs;
}

EpiSegModel run_episeg_training(const PatchPairs& pairs, std::span<const double> grid, int n_folds,
                                std::uint64_t seed, const fs::path& out) {
    const CSelection sel = select_C(pairs, grid, n_folds, seed);
    FitReport rep;
    const EpiSegModel model = fit(pairs, sel.best_C, &rep);
    fs::create_directories(out);
    save_episeg_model(model, out / "model.json");
    std::string csv = "C,mean_ap,selected\n";
    for (std::size_t i = 0; i < sel.grid.size(); ++i)
        csv += fmt::format("{},{},{}\n", format_double(sel.grid[i]), format_double(sel.mean_ap[i]),
                           sel.grid[i] == sel.best_C ? 1 : 0);
    write_text_file(out / "c_selection.csv", csv);
    spdlog::info("episeg: C = {} (cv AP {:.4f}), fit converged={} after {} iterations", format_double(sel.best_C),
                 sel.mean_ap[static_cast<std::size_t>(std::find(sel.grid.begin(), sel.grid.end(), sel.best_C) -
                                                      sel.grid.begin())],
                 rep.converged, rep.iterations);
    return model;
}

ExpansionGeometry geometry_for(int context_px, int tile_size_px, int patch_size_px) {
    if (context_px < tile_size_px) throw Error("context must be at least as large as the tile");
    ExpansionGeometry g;
    g.tile_offset_x_px = g.tile_offset_y_px = (context_px - tile_size_px) / 2;
    g.tile_size_px = tile_size_px;
    g.patch_size_px = patch_size_px;
    return g;
}

EpiSegInferenceSummary run_episeg_inference(const EpiSegModel& model, const fs::path& grids,
                                            const std::vector<std::string>& names, const ExpansionGeometry& geometry,
                                            double threshold, int threads, const fs::path& out) {
    fs::create_directories(out);
    std::vector<char> found(names.size(), 0);
    parallel_for(names.size(), threads, [&](std::size_t i) {
        const fs::path src = grids / (names[i] + ".json");
        if (!fs::exists(src)) return;
        found[i] = 1;
        const CroppedTile crop = infer_extreme_tile(model, read_patch_grid(src), geometry);
        write_probability_pgm(crop.grid.cols, crop.grid.rows, crop.grid.values, out / (names[i] + ".prob.pgm"));
        write_mask_pgm(binarize(crop.grid, threshold, geometry.patch_size_px), out / (names[i] + ".mask.pgm"));
    });
    EpiSegInferenceSummary summary;
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (found[i]) ++summary.written;
        else summary.missing.push_back(names[i]);
    }
    if (!summary.missing.empty())
        spdlog::warn("episeg: {} of {} tiles have no patch grid in '{}' (first: {})", summary.missing.size(),
                     names.size(), grids.string(), summary.missing.front());
    return summary;
}

std::string tile_key(const std::string& slide_id, const std::string& tile_id) { return slide_id + "__" + tile_id; }

std::vector<TileRequest> requests_from_extremes(const std::vector<SideTile>& tiles) {
    std::vector<TileRequest> out;
    out.reserve(tiles.size());
    for (const auto& t : tiles) out.push_back({t.tile.slide_id, t.tile.tile_id, std::string(to_string(t.side))});
    return out;
}

std::vector<TileRequest> requests_from_cells(const Dataset& dataset, const fs::path& cells_dir) {
    std::vector<TileRequest> out;
    for (const auto& s : dataset.slides) {
        const fs::path path = cells_dir / (s.slide_id + ".jsonl");
        if (!fs::exists(path)) continue;
        for (const auto& [tile, cells] : load_cells(path)) out.push_back({s.slide_id, tile, "none"});
    }
    return out;
}

std::vector<TileFeatureRow> run_features(const Dataset& dataset, const std::vector<TileRequest>& tiles,
                                         const FeatureInputs& inputs, int threads,
                                         std::vector<std::string>* missing_slides) {
    if (!fs::is_directory(inputs.cells_dir))
        throw Error(fmt::format("cell directory '{}' not found", inputs.cells_dir.string()));

    std::vector<std::string> slides;
    std::map<std::string, std::vector<std::size_t>> by_slide;
    for (std::size_t i = 0; i < tiles.size(); ++i) {
        auto& list = by_slide[tiles[i].slide_id];
        if (list.empty()) slides.push_back(tiles[i].slide_id);
        list.push_back(i);
    }

    std::vector<std::optional<TileFeatureRow>> rows(tiles.size());
    std::vector<char> missing(slides.size(), 0);
    LoadCellsOptions opts;
    opts.tile_size_px = inputs.tile_size_px;
    opts.map_unknown_to_other = !inputs.strict_classes;

    parallel_for(slides.size(), threads, [&](std::size_t s) {
        const SlideRecord& rec = dataset.at(slides[s]);
        const fs::path cell_path = inputs.cells_dir / (rec.slide_id + ".jsonl");
        if (!fs::exists(cell_path)) {
            missing[s] = 1;
            return;
        }
        const auto cells = load_cells(cell_path, opts);
        for (std::size_t i : by_slide.at(slides[s])) {
            const auto& req = tiles[i];
            const auto it = cells.find(req.tile_id);
            const auto tile_cells = remap_cancer(it == cells.end() ? std::vector<CellInstance>{} : it->second);
            std::optional<BinaryMask> mask;
            if (!inputs.masks_dir.empty()) {
                const fs::path mp = inputs.masks_dir / (tile_key(req.slide_id, req.tile_id) + ".mask.pgm");
                if (fs::exists(mp)) {
                    mask = read_mask_pgm(mp);
                    if (mask->width != inputs.tile_size_px || mask->height != inputs.tile_size_px)
                        throw Error(fmt::format("mask '{}' is {}x{}, expected {}x{}", mp.string(), mask->width,
                                                mask->height, inputs.tile_size_px, inputs.tile_size_px));
                }
            }
            TileFeatureRow row = tile_features(tile_cells, mask ? &*mask : nullptr, rec.mpp_x, rec.mpp_y);
            row.slide_id = req.slide_id;
            row.tile_id = req.tile_id;
            row.cohort = rec.cohort;
            row.side = req.side;
            rows[i] = std::move(row);
        }
    });

    std::vector<std::string> missing_ids;
    for (std::size_t s = 0; s < slides.size(); ++s)
        if (missing[s]) missing_ids.push_back(slides[s]);
    if (!missing_ids.empty())
        spdlog::warn("features: no cell file for {} slide(s) in '{}', their tiles are skipped (first: {})",
                     missing_ids.size(), inputs.cells_dir.string(), missing_ids.front());
    if (missing_slides) *missing_slides = missing_ids;

    std::vector<TileFeatureRow> out;
    for (auto& r : rows)
        if (r) out.push_back(std::move(*r));
    return out;
}

ScoredSlides read_scored_slides(const fs::path& path) {
    const CsvTable csv = read_csv(path);
    std::ptrdiff_t c_score = csv.find_column("score");
    if (c_score < 0) c_score = csv.find_column("probability");
    if (c_score < 0) throw Error(fmt::format("'{}': no score column", path.string()));
    const std::size_t c_label = csv.column("label");
    ScoredSlides out;
    for (const auto& r : csv.rows) {
        if (r[c_label].empty()) continue;
        const long long label = parse_int(r[c_label], "label");
        if (label != 0 && label != 1) throw Error(fmt::format("'{}': labels must be 0 or 1", path.string()));
        out.scores.push_back(parse_double(r[static_cast<std::size_t>(c_score)], "score"));
        out.labels.push_back(static_cast<int>(label));
    }
    return out;
}

nlohmann::json run_report(const ReportInputs& in, const fs::path& out, int threads) {
    fs::create_directories(out);
    nlohmann::json metrics = nlohmann::json::object();

    if (in.features && !in.features->empty()) {
        const auto& rows = *in.features;
        write_composition(composition_table(rows), out / "composition.csv");
        const auto quantities = feature_quantities();
        parallel_for(quantities.size(), threads, [&](std::size_t i) {
            const auto specs = violins_for(rows, quantities[i]);
            write_text_file(out / fmt::format("violin_{}.svg", quantities[i]), render_violin(specs, quantities[i]));
        });
        metrics["n_feature_tiles"] = rows.size();
        std::size_t with_mask = 0;
        for (const auto& r : rows) with_mask += r.has_mask ? 1 : 0;
        if (with_mask >= 3) {
            try {
                const auto agree = epithelium_agreement(rows);
                metrics["epithelium_agreement"] = {{"r", agree.r}, {"p_value", agree.p_value}, {"n", agree.n}};
            } catch (const Error& e) {
                spdlog::warn("report: epithelium agreement undefined ({})", e.what());
            }
        }
    } else {
        spdlog::warn("report: no tile features, writing a score-only report");
        metrics["score_only"] = true;
    }

    if (in.scores) {
        const auto& s = *in.scores;
        const auto n_pos = static_cast<std::size_t>(std::count(s.labels.begin(), s.labels.end(), 1));
        if (n_pos == 0 || n_pos == s.labels.size()) {
            spdlog::warn("report: scores need both classes for AUC and precision-recall, skipped");
        } else {
            const PrCurveArtifact pr = render_pr_curve(s.scores, s.labels, "slide-level precision-recall");
            write_text_file(out / "pr_curve.svg", pr.svg);
            write_text_file(out / "pr_curve.csv", pr.csv);
            const BootstrapResult auc = stratified_bootstrap_ci(
                s.scores, s.labels, [](auto x, auto y) { return roc_auc(x, y); }, in.bootstrap, in.level, in.seed);
            metrics["auc"] = {{"estimate", auc.estimate}, {"ci_lo", auc.lo}, {"ci_hi", auc.hi}};
            metrics["average_precision"] = pr.average_precision;
            metrics["n_slides"] = s.labels.size();
            metrics["n_positive"] = n_pos;
            metrics["bootstrap"] = {{"replicates", in.bootstrap}, {"level", in.level}, {"seed", in.seed}};
        }
    }
    write_text_file(out / "metrics.json", metrics.dump(2) + "\n");
    return metrics;
}

namespace {

void run_preprocess_stage(const RunConfig& cfg, const Dataset& dataset, int threads, const fs::path& out) {
    fs::create_directories(out);
    TissueMaskOptions opts;
    opts.downsample = cfg.downsample;
    opts.min_saturation = cfg.min_saturation;
    opts.min_component_px = cfg.min_component_px;
    std::vector<char> missing(dataset.slides.size(), 0);
    parallel_for(dataset.slides.size(), threads, [&](std::size_t i) {
        const auto& rec = dataset.slides[i];
        const fs::path image = fs::path(cfg.images_dir) / (rec.slide_id + ".ppm");
        if (!fs::exists(image)) {
            missing[i] = 1;
            return;
        }
        const BinaryMask mask = tissue_mask(read_ppm(image), opts);
        write_mask_pgm(mask, out / (rec.slide_id + ".tissue.pgm"));
        write_tile_manifest(tessellate(mask, cfg.tile_size_px, cfg.min_tissue_frac, rec.mpp_x),
                            out / (rec.slide_id + ".tiles.csv"));
    });
    const auto n_missing = std::count(missing.begin(), missing.end(), 1);
    if (n_missing > 0) spdlog::warn("preprocess: {} slide(s) have no image in '{}'", n_missing, cfg.images_dir);
}

std::vector<SideTile> read_all_extremes(const std::vector<fs::path>& files) {
    std::vector<SideTile> out;
    for (const auto& f : files) {
        auto part = read_extremes(f);
        out.insert(out.end(), part.begin(), part.end());
    }
    return out;
}

}  // namespace

fs::path run_pipeline(const RunConfig& cfg_in, std::uint64_t seed, int threads, const fs::path& config_path) {
    RunConfig cfg = cfg_in;
    cfg.seed = seed;
    cfg.chowder.seed = seed;
    if (cfg.manifest.empty()) throw Error("pipeline: data.manifest is not set");
    const fs::path run = cfg.out_dir;
    RunLog log(run);
    {
        RunConfig resolved = cfg;
        resolved.out_dir = ".";
        resolved.threads = 0;
        write_text_file(run / "config.toml", to_toml(resolved));
    }
    log.event("run_start", {{"seed", seed}, {"threads", resolve_threads(threads)}});

    const fs::path manifest = cfg.manifest;
    Dataset dataset;
    log.run_stage("load", {manifest}, [&] { dataset = load_dataset(manifest); });

    if (cfg.preprocess) {
        if (cfg.images_dir.empty())
            log.skip_stage("preprocess", "data.images_dir is not set");
        else
            log.run_stage("preprocess", {manifest, cfg.images_dir},
                          [&] { run_preprocess_stage(cfg, dataset, threads, run / "preprocess"); });
    }

    std::vector<fs::path> feature_inputs{manifest};
    for (const auto& rec : dataset.slides) {
        const fs::path base = container_base(rec.feature_path);
        feature_inputs.push_back(base.string() + ".json");
        feature_inputs.push_back(base.string() + ".bin");
    }

    log.run_stage("train", feature_inputs,
                  [&] { run_training(dataset, cfg.chowder, cfg.n_folds, threads, run / "train"); });

    const fs::path scores_csv = run / "scores" / "tile_scores.csv";
    feature_inputs.push_back(run / "train" / "models");
    log.run_stage("infer", feature_inputs, [&] {
        const auto models = load_models(run / "train" / "models");
        run_inference(dataset, models, threads, scores_csv, run / "scores" / "slide_predictions.csv");
    });

    std::vector<fs::path> extreme_files;
    log.run_stage("extremes", {scores_csv}, [&] {
        fs::remove_all(run / "extremes");
        extreme_files = run_extremes(dataset, read_score_table(scores_csv), cfg.n_extremes, run / "extremes");
    });
    const std::vector<SideTile> extremes = read_all_extremes(extreme_files);

    fs::path masks_dir;
    if (cfg.patch_dir.empty()) {
        log.skip_stage("episeg", "data.patch_dir is not set");
    } else if (cfg.episeg_model.empty() && cfg.episeg_pairs.empty()) {
        log.skip_stage("episeg", "neither episeg.model nor data.episeg_pairs is set");
    } else {
        std::vector<fs::path> inputs = extreme_files;
        inputs.push_back(cfg.episeg_model.empty() ? fs::path(cfg.episeg_pairs) : fs::path(cfg.episeg_model));
        log.run_stage("episeg", inputs, [&] {
            fs::remove_all(run / "episeg");
            EpiSegModel model;
            if (!cfg.episeg_model.empty()) {
                model = load_episeg_model(cfg.episeg_model);
            } else {
                const PatchPairs pairs = load_patch_pairs(cfg.episeg_pairs, cfg.patch_size_px);
                model = run_episeg_training(pairs, episeg_grid(cfg), cfg.episeg_folds, seed, run / "episeg");
            }
            std::set<std::string> keys;
            for (const auto& t : extremes) keys.insert(tile_key(t.tile.slide_id, t.tile.tile_id));
            const auto summary = run_episeg_inference(
                model, cfg.patch_dir, std::vector<std::string>(keys.begin(), keys.end()),
                geometry_for(cfg.context_px, cfg.tile_size_px, cfg.patch_size_px), cfg.threshold, threads,
                run / "episeg" / "masks");
            log.event("episeg_masks", {{"written", summary.written}, {"missing", summary.missing.size()}});
        });
        masks_dir = run / "episeg" / "masks";
    }

    std::optional<std::vector<TileFeatureRow>> features;
    if (cfg.cells_dir.empty() || !fs::is_directory(cfg.cells_dir)) {
        log.skip_stage("features", cfg.cells_dir.empty() ? "data.cells_dir is not set"
                                                         : fmt::format("cell directory '{}' not found", cfg.cells_dir));
        fs::remove_all(run / "features");
    } else {
        std::vector<fs::path> inputs = extreme_files;
        inputs.push_back(cfg.cells_dir);
        if (!masks_dir.empty()) inputs.push_back(masks_dir);
        log.run_stage("features", inputs, [&] {
            FeatureInputs fi;
            fi.cells_dir = cfg.cells_dir;
            fi.masks_dir = masks_dir;
            fi.tile_size_px = cfg.tile_size_px;
            std::vector<std::string> missing;
            auto rows = run_features(dataset, requests_from_extremes(extremes), fi, threads, &missing);
            if (!missing.empty()) log.event("missing_cells", {{"slides", missing}});
            fs::create_directories(run / "features");
            write_feature_rows(rows, run / "features" / "features.csv");
            features = std::move(rows);
        });
    }

    const fs::path oof = run / "train" / "out_of_fold.csv";
    log.run_stage("report", {oof}, [&] {
        fs::remove_all(run / "report");
        ReportInputs ri;
        ri.features = features;
        ri.scores = read_scored_slides(oof);
        ri.seed = seed;
        ri.bootstrap = cfg.bootstrap;
        ri.level = cfg.level;
        run_report(ri, run / "report", threads);
    });

    std::map<std::string, fs::path> inputs{{"manifest", fs::absolute(manifest)}};
    if (!config_path.empty()) inputs["config"] = fs::absolute(config_path);
    const nlohmann::json m = make_run_manifest(seed, inputs, run, {{"stages", log.completed()}});
    write_text_file(run / "run_manifest.json", m.dump(2) + "\n");
    log.event("run_done", {{"stages", log.completed()}});
    return run;
}

}  // namespace imilia
