#pragma once

#include "imilia/chowder.hpp"
#include "imilia/config.hpp"
#include "imilia/episeg.hpp"
#include "imilia/interpret.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace imilia {

/// A pipeline stage failed; carries the stage name and its input digest.
class StageError : public Error {
public:
    StageError(std::string stage, std::string digest, const std::string& message);
    const std::string& stage() const { return stage_; }
    const std::string& digest() const { return digest_; }
    const std::string& message() const { return message_; }

private:
    std::string stage_, digest_, message_;
};

/// Stage bookkeeping inside a run directory: JSONL events in events.jsonl
/// and markers stages/<stage>.done or stages/<stage>.failed.
class RunLog {
public:
    explicit RunLog(std::filesystem::path run_dir);

    const std::filesystem::path& dir() const { return dir_; }
    void event(std::string_view name, nlohmann::json fields = nlohmann::json::object());

    /// Runs `body` as stage `stage`. Earlier markers of the stage are
    /// cleared first. On failure the .failed marker records the message and
    /// an Error naming the stage and the digest of `inputs` is thrown; other
    /// stages' outputs are left alone.
    void run_stage(const std::string& stage, const std::vector<std::filesystem::path>& inputs,
                   const std::function<void()>& body);

    /// Records a stage that was not run (stages/<stage>.skipped) and warns.
    void skip_stage(const std::string& stage, const std::string& reason);

    std::vector<std::string> completed() const { return completed_; }

private:
    std::filesystem::path dir_;
    std::vector<std::string> completed_;
};

/// sha256 over the digests of the given files (directories contribute their
/// path only), so one value identifies a stage's inputs.
std::string input_digest(const std::vector<std::filesystem::path>& inputs);

/// Keeps the labeled slides only.
Dataset labeled_subset(const Dataset& dataset);

/// Trains one model per fold on the labeled slides and writes under `out`:
/// models/fold_<k>.{json,bin}, folds.csv, out_of_fold.csv
/// (slide_id,cohort,fold,label,score) and training_log.csv.
CrossValidationResult run_training(const Dataset& dataset, const ChowderConfig& cfg, int n_folds, int threads,
                                   const std::filesystem::path& out);

/// Ensemble inference over every slide of `dataset`. Writes the tile score
/// table and slide predictions (slide_id,cohort,label,score).
void run_inference(const Dataset& dataset, std::span<const ChowderModel> models, int threads,
                   const std::filesystem::path& scores_csv, const std::filesystem::path& predictions_csv);

/// Rows of `table` whose slide belongs to `cohort`.
TileScoreTable filter_cohort(const TileScoreTable& table, const Dataset& dataset, const std::string& cohort);

/// Cohort names in first-appearance order.
std::vector<std::string> cohorts_of(const Dataset& dataset);

/// Per cohort and side, writes extremes/<cohort>_<side>.csv under `out`.
/// Returns the written files.
std::vector<std::filesystem::path> run_extremes(const Dataset& dataset, const TileScoreTable& table, std::size_t n,
                                                const std::filesystem::path& out);

/// Training pairs from a directory of `<name>.mask.pgm` masks, each next to
/// a patch grid container `<name>.{json,bin}`; names in sorted order.
PatchPairs load_patch_pairs(const std::filesystem::path& dir, int patch_size_px);

/// Selects C over `grid` by cross-validated AP, fits on all pairs and
/// writes model.json and c_selection.csv under `out`.
EpiSegModel run_episeg_training(const PatchPairs& pairs, std::span<const double> grid, int n_folds,
                                std::uint64_t seed, const std::filesystem::path& out);

ExpansionGeometry geometry_for(int context_px, int tile_size_px, int patch_size_px);

struct EpiSegInferenceSummary {
    std::size_t written = 0;
    std::vector<std::string> missing;  // container names without a patch grid
};

/// Infers the tile-of-interest crop of each named expanded grid
/// `<grids>/<name>.json` and writes `<out>/<name>.prob.pgm` (patch grid) and
/// `<out>/<name>.mask.pgm` (binarised, pixel resolution). Missing grids are
/// reported, not fatal.
EpiSegInferenceSummary run_episeg_inference(const EpiSegModel& model, const std::filesystem::path& grids,
                                            const std::vector<std::string>& names, const ExpansionGeometry& geometry,
                                            double threshold, int threads, const std::filesystem::path& out);

/// Container names in `dir` (stems of the .json files).
std::vector<std::string> list_containers(const std::filesystem::path& dir);

std::string tile_key(const std::string& slide_id, const std::string& tile_id);

struct FeatureInputs {
    std::filesystem::path cells_dir;
    std::filesystem::path masks_dir;  // may be empty: counts only
    int tile_size_px = 224;
    bool strict_classes = false;
};

struct TileRequest {
    std::string slide_id;
    std::string tile_id;
    std::string side;  // "min", "max" or "none"
};

std::vector<TileRequest> requests_from_extremes(const std::vector<SideTile>& tiles);

/// Every tile present in the cell files of the dataset's slides, side "none".
std::vector<TileRequest> requests_from_cells(const Dataset& dataset, const std::filesystem::path& cells_dir);

/// One feature row per requested tile, in request order. Cancer cells count
/// as epithelial. Tiles of slides without a cell file are skipped with a
/// warning and those slides are listed in `missing_slides` when given.
std::vector<TileFeatureRow> run_features(const Dataset& dataset, const std::vector<TileRequest>& tiles,
                                         const FeatureInputs& inputs, int threads,
                                         std::vector<std::string>* missing_slides = nullptr);

struct ScoredSlides {
    std::vector<double> scores;
    std::vector<int> labels;
};

/// Reads `score` and `label` columns; rows with an empty label are skipped.
ScoredSlides read_scored_slides(const std::filesystem::path& path);

struct ReportInputs {
    std::optional<std::vector<TileFeatureRow>> features;
    std::optional<ScoredSlides> scores;
    std::uint64_t seed = 0;
    int bootstrap = 1000;
    double level = 0.95;
};

/// composition.csv, violin_<quantity>.svg, pr_curve.{svg,csv} and
/// metrics.json, each when its inputs are present. Returns metrics.json.
nlohmann::json run_report(const ReportInputs& inputs, const std::filesystem::path& out, int threads);

/// The full chain; returns the run directory.
std::filesystem::path run_pipeline(const RunConfig& cfg, std::uint64_t seed, int threads,
                                   const std::filesystem::path& config_path = {});

}  // namespace imilia
