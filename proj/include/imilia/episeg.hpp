#pragma once

#include "imilia/common.hpp"
#include "imilia/ingest.hpp"
#include "imilia/preprocess.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace imilia {

/// Fraction of epithelium pixels in each P x P patch of a tile mask.
struct PatchLabelGrid {
    int rows = 0;
    int cols = 0;
    int patch_size = 14;
    std::vector<double> values;  // row-major
    std::string tile_id;

    double at(int r, int c) const { return values[static_cast<std::size_t>(r) * cols + c]; }
};

/// Average-pools a binary mask over non-overlapping P x P patches (a P x P
/// convolution with stride P and constant weights 1/P^2). Pixels past the
/// last full patch are ignored.
PatchLabelGrid pool_mask(const BinaryMask& mask, int patch_size = 14);

/// Patch embeddings of one tile laid out on its patch grid; row
/// r * cols + c of `embeddings` is patch (r, c).
struct PatchGrid {
    int rows = 0;
    int cols = 0;
    FeatureMatrix embeddings;
};

/// Reads a feature container whose attributes carry grid_rows/grid_cols.
PatchGrid read_patch_grid(const std::filesystem::path& path);
void write_patch_grid(const PatchGrid& grid, const std::filesystem::path& base, nlohmann::json attributes = {});

/// Training pairs (x_p, y_p). `group` identifies the source tile so that
/// cross-validation can keep a tile's patches together.
struct PatchPairs {
    std::size_t d = 0;
    std::vector<double> x;  // n x d, row-major
    std::vector<double> y;  // soft labels in [0, 1]
    std::vector<int> group;

    std::size_t size() const { return y.size(); }
    void add(std::span<const double> features, double label, int group_id);
    void add_tile(const PatchGrid& grid, const PatchLabelGrid& labels, int group_id);
    PatchPairs subset(std::span<const std::size_t> rows) const;
};

struct EpiSegModel {
    std::vector<double> weights;
    double bias = 0.0;
    double C = 1e-2;  // inverse L2 strength

    double logit(std::span<const double> x) const;
    double logit(std::span<const float> x) const;
};

struct FitOptions {
    int max_iterations = 100;
    double gradient_tolerance = 1e-6;  // max-norm of the objective gradient
};

struct FitReport {
    int iterations = 0;
    double gradient_max_norm = 0.0;
    double objective = 0.0;
    bool converged = false;
};

/// Mean soft-label cross-entropy plus ||w||^2 / (2 C N); the bias is not
/// penalised.
double episeg_objective(std::span<const double> weights, double bias, const PatchPairs& pairs, double C);

/// Gradient of episeg_objective: d entries for w followed by the bias.
std::vector<double> episeg_gradient(std::span<const double> weights, double bias, const PatchPairs& pairs, double C);

/// Damped Newton iterations from zero until the gradient max-norm drops
/// below the tolerance.
EpiSegModel fit(const PatchPairs& pairs, double C = 1e-2, FitReport* report = nullptr, const FitOptions& options = {});

struct CSelection {
    double best_C = 0.0;
    std::vector<double> grid;
    std::vector<double> mean_ap;  // per grid value
};

/// k-fold CV over `grid`, scoring out-of-fold average precision with labels
/// binarised at y >= 0.5. Folds split by group when there are enough
/// groups. Ties go to the smaller C.
CSelection select_C(const PatchPairs& pairs, std::span<const double> grid, int n_folds = 3, std::uint64_t seed = 0);

struct ProbabilityGrid {
    int rows = 0;
    int cols = 0;
    std::vector<double> values;

    double at(int r, int c) const { return values[static_cast<std::size_t>(r) * cols + c]; }
};

ProbabilityGrid infer_tile(const EpiSegModel& model, const PatchGrid& grid);

/// Where the tile of interest sits inside its expanded context.
struct ExpansionGeometry {
    int tile_offset_x_px = 399;  // (1022 - 224) / 2
    int tile_offset_y_px = 399;
    int tile_size_px = 224;
    int patch_size_px = 14;
};

/// Start index of the window of tile_size/patch_size patches whose pixel
/// footprint overlaps [offset, offset + tile_size) the most; ties go to the
/// lower index.
int crop_start(int offset_px, int tile_size_px, int patch_size_px);

struct CroppedTile {
    ProbabilityGrid grid;
    int start_row = 0;
    int start_col = 0;
    bool padded = false;  // window reached past the context and was mirrored
};

CroppedTile infer_extreme_tile(const EpiSegModel& model, const PatchGrid& expanded,
                               const ExpansionGeometry& geometry = {});

/// Thresholds (>=) and replicates each patch into a P x P pixel block.
BinaryMask binarize(const ProbabilityGrid& grid, double threshold = 0.5, int patch_size = 14);

void save_episeg_model(const EpiSegModel& model, const std::filesystem::path& path);
EpiSegModel load_episeg_model(const std::filesystem::path& path);

}  // namespace imilia
