#pragma once

#include "imilia/common.hpp"

#include <json.hpp>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace imilia {

struct SlideRecord {
    std::string slide_id;
    std::string cohort;
    std::optional<int> label;  // 0 = non-inflamed, 1 = inflamed
    double mpp_x = 0.5;
    double mpp_y = 0.5;
    std::filesystem::path tile_manifest_path;
    std::filesystem::path feature_path;
};

struct Dataset {
    std::vector<SlideRecord> slides;

    const SlideRecord& at(std::string_view slide_id) const;
    std::size_t labeled_count() const;
};

/// Tile embeddings of one slide: n_tiles rows of d float32 values.
struct FeatureMatrix {
    std::size_t n_tiles = 0;
    std::size_t d = 0;
    std::vector<float> data;  // row-major
    std::vector<std::string> tile_ids;

    std::span<const float> row(std::size_t i) const { return {data.data() + i * d, d}; }
    std::span<float> row(std::size_t i) { return {data.data() + i * d, d}; }
};

/// A feature matrix plus the attributes stored in its JSON sidecar
/// (mpp, patch-grid dims, provenance). Attributes round-trip untouched.
struct FeatureContainer {
    FeatureMatrix matrix;
    nlohmann::json attributes = nlohmann::json::object();
};

/// Strips a trailing .json/.bin so either file of a container names it.
std::filesystem::path container_base(const std::filesystem::path& path);

/// Writes `<base>.json` and `<base>.bin`.
void write_features(const std::filesystem::path& base, const FeatureContainer& container);
void write_features(const std::filesystem::path& base, const FeatureMatrix& matrix);

FeatureContainer read_feature_container(const std::filesystem::path& path);
FeatureMatrix load_features(const SlideRecord& record);

/// Throws with the first offending row if any value is NaN or infinite.
void check_finite(const FeatureMatrix& matrix, std::string_view context);

/// Parses the CSV dataset manifest. Relative paths resolve against the
/// manifest's directory.
Dataset load_dataset(const std::filesystem::path& manifest_path);
void write_manifest(const Dataset& dataset, const std::filesystem::path& manifest_path);

struct FoldAssignment {
    int n_folds = 0;
    std::map<std::string, int> assignment;

    int fold_of(std::string_view slide_id) const;
};

FoldAssignment make_folds(const Dataset& dataset, int n_folds = 5, std::uint64_t seed = 0);

struct SynthParams {
    std::size_t n_slides = 200;
    std::size_t n_tiles_min = 50;
    std::size_t n_tiles_max = 150;
    std::size_t d = 32;
    double separation = 6.0;
    double signal_fraction = 0.1;    // share of tiles carrying signal in positive slides
    double positive_fraction = 0.5;
    std::uint64_t seed = 0;
    std::string cohort = "synthetic";
    double mpp = 0.5;
    int tile_size_px = 224;
};

struct SyntheticCohort {
    Dataset dataset;  // feature/tile paths are filled in by write_synthetic
    std::vector<FeatureMatrix> features;
    std::vector<std::vector<bool>> signal_tiles;
    std::vector<double> direction;  // unit vector along which signal tiles are shifted
};

/// Background tiles ~ N(0, I_d); signal tiles ~ N(separation * u, I_d) for a
/// seeded unit vector u. Only positive slides contain signal tiles.
SyntheticCohort synth_dataset(const SynthParams& params);

/// Writes manifest.csv, features/<slide>.{json,bin} and tiles/<slide>.csv
/// under `dir` and updates the records' paths.
void write_synthetic(SyntheticCohort& cohort, const SynthParams& params, const std::filesystem::path& dir);

}  // namespace imilia
