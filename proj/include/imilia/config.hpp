#pragma once

#include "imilia/chowder.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace imilia {

struct RunConfig {
    // [run]
    std::optional<std::uint64_t> seed;  // unset: --seed or IMILIA_SEED decide
    int threads = 0;  // 0 = all available cores
    std::string out_dir = "run";

    // [data]
    std::string manifest;
    std::string cells_dir;       // <slide_id>.jsonl cell predictions
    std::string patch_dir;       // expanded patch grids <slide_id>__<tile_id>
    std::string episeg_pairs;    // training tiles: <name>.json/.bin + <name>.mask.pgm
    std::string images_dir;      // optional slide images <slide_id>.ppm for preprocessing

    // [preprocess]
    bool preprocess = false;
    int tile_size_px = 224;
    double min_tissue_frac = 0.5;
    int downsample = 1;
    double min_saturation = 20.0;
    int min_component_px = 16;

    // [chowder]
    ChowderConfig chowder;
    int n_folds = 5;

    // [episeg]
    std::string episeg_model;  // pre-trained model; trained from episeg_pairs when empty
    bool episeg_select_C = true;  // false: fit with episeg_C directly
    double episeg_C = 1e-2;
    std::vector<double> episeg_C_grid{1e-3, 1e-2, 1e-1};
    int episeg_folds = 3;
    int patch_size_px = 14;
    int context_px = 1022;
    double threshold = 0.5;

    // [extremes]
    std::size_t n_extremes = 1000;

    // [report]
    int bootstrap = 1000;
    double level = 0.95;
};

/// Unknown sections or keys and type mismatches are errors naming the key.
/// Relative paths are kept as written; load_config makes them absolute,
/// relative to the config file's directory (run.out_dir included).
RunConfig parse_config(std::string_view text, std::string_view source = "config");
RunConfig load_config(const std::filesystem::path& path);
/// Canonical TOML text of a config (round-trips through load_config).
std::string to_toml(const RunConfig& cfg);

/// --seed when given, else the config value when the config set one, else
/// IMILIA_SEED, else 0.
/// The C values to cross-validate: the grid, or just C when selection is off.
std::vector<double> episeg_grid(const RunConfig& cfg);

std::uint64_t resolve_seed(std::optional<std::uint64_t> flag, std::optional<std::uint64_t> config_seed);

}  // namespace imilia
