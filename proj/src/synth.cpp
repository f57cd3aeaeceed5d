#include "imilia/synth.hpp"

#include "imilia/episeg.hpp"
#include "imilia/interpret.hpp"

#include <fmt/format.h>

#include <array>
#include <cmath>
#include <numbers>

namespace fs = std::filesystem;

namespace imilia {

namespace {

struct Disc {
    double cx = 0.0, cy = 0.0, radius = 0.0;
    bool contains(double x, double y) const { return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= radius * radius; }
};

Disc draw_disc(Rng& rng, int context_px) {
    const double c = context_px;
    return {rng.uniform(0.2 * c, 0.8 * c), rng.uniform(0.2 * c, 0.8 * c), rng.uniform(0.15 * c, 0.45 * c)};
}

BinaryMask disc_mask(const Disc& disc, int size) {
    BinaryMask mask(size, size);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) mask.at(x, y) = disc.contains(x + 0.5, y + 0.5) ? 1 : 0;
    return mask;
}

PatchGrid embed(const PatchLabelGrid& labels, const InterpretSynthParams& p, Rng& rng) {
    PatchGrid grid;
    grid.rows = labels.rows;
    grid.cols = labels.cols;
    grid.embeddings.n_tiles = static_cast<std::size_t>(labels.rows) * labels.cols;
    grid.embeddings.d = p.d_patch;
    grid.embeddings.data.resize(grid.embeddings.n_tiles * p.d_patch);
    for (std::size_t i = 0; i < grid.embeddings.n_tiles; ++i) {
        auto row = grid.embeddings.row(i);
        for (auto& v : row) v = static_cast<float>(rng.normal());
        row[0] += static_cast<float>((2.0 * labels.values[i] - 1.0) * p.patch_separation);
        grid.embeddings.tile_ids.push_back(fmt::format("p{}_{}", i / labels.cols, i % labels.cols));
    }
    return grid;
}

double round2(double v) { return std::round(v * 100.0) / 100.0; }

// Order follows kAllCellClasses, plus one name the loader does not know.
constexpr std::size_t kSynthClasses = kCellClassCount;  // index 8 = unknown label
constexpr const char* kUnknownLabel = "mitotic_figure";

std::size_t draw_class(Rng& rng, const std::array<double, kSynthClasses>& weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    double u = rng.uniform() * total;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (u < weights[i]) return i;
        u -= weights[i];
    }
    return weights.size() - 1;
}

}  // namespace

void write_interpret_synthetic(const SyntheticCohort& cohort, const InterpretSynthParams& p, const fs::path& dir) {
    if (p.patch_size_px < 1 || p.tile_size_px % p.patch_size_px != 0 || p.context_px % p.patch_size_px != 0)
        throw Error("synthetic interpretability data: tile and context sizes must be multiples of the patch size");
    if (p.context_px < p.tile_size_px) throw Error("synthetic interpretability data: context smaller than the tile");
    if (p.d_patch == 0 || p.cells_min < 0 || p.cells_max < p.cells_min)
        throw Error("synthetic interpretability data: invalid parameters");

    fs::create_directories(dir / "patches");
    fs::create_directories(dir / "cells");
    fs::create_directories(dir / "episeg_train");
    const double offset = (p.context_px - p.tile_size_px) / 2;

    Rng train_rng(mix_seed(p.seed, 0xE915));
    for (int i = 0; i < p.n_training_tiles; ++i) {
        const BinaryMask mask = disc_mask(draw_disc(train_rng, p.context_px), p.context_px);
        const PatchGrid grid = embed(pool_mask(mask, p.patch_size_px), p, train_rng);
        const fs::path base = dir / "episeg_train" / fmt::format("train_{}", i);
        write_patch_grid(grid, base, {{"patch_size_px", p.patch_size_px}});
        write_mask_pgm(mask, base.string() + ".mask.pgm");
    }

    //                                          epi   lym   pla   eos   neu   endo  fib   canc  unknown
    const std::array<double, kSynthClasses> inside{0.70, 0.10, 0.04, 0.02, 0.01, 0.02, 0.02, 0.03, 0.01};
    const std::array<double, kSynthClasses> outside{0.05, 0.20, 0.15, 0.05, 0.02, 0.15, 0.30, 0.00, 0.02};

    for (std::size_t s = 0; s < cohort.dataset.slides.size(); ++s) {
        const auto& rec = cohort.dataset.slides[s];
        const auto& tiles = cohort.features[s];
        Rng rng(mix_seed(p.seed, 0xCE11 + s));
        std::map<std::string, std::vector<CellInstance>> cells;
        for (std::size_t t = 0; t < tiles.n_tiles; ++t) {
            const std::string& tile_id = tiles.tile_ids[t];
            const Disc disc = draw_disc(rng, p.context_px);
            const PatchGrid grid = embed(pool_mask(disc_mask(disc, p.context_px), p.patch_size_px), p, rng);
            write_patch_grid(grid, dir / "patches" / (rec.slide_id + "__" + tile_id),
                             {{"slide_id", rec.slide_id}, {"tile_id", tile_id}, {"patch_size_px", p.patch_size_px}});

            const bool signal = s < cohort.signal_tiles.size() && cohort.signal_tiles[s][t];
            auto& list = cells[tile_id];
            const auto n_cells = static_cast<int>(p.cells_min + rng.below(static_cast<std::size_t>(p.cells_max - p.cells_min + 1)));
            for (int k = 0; k < n_cells; ++k) {
                CellInstance cell;
                cell.cell_id = fmt::format("{}_{}", tile_id, k);
                cell.tile_id = tile_id;
                cell.centroid = {round2(rng.uniform(2.0, p.tile_size_px - 2.0)),
                                 round2(rng.uniform(2.0, p.tile_size_px - 2.0))};
                auto weights = disc.contains(offset + cell.centroid.x, offset + cell.centroid.y) ? inside : outside;
                if (signal) {
                    weights[static_cast<std::size_t>(CellClass::lymphocyte)] += 0.25;
                    weights[static_cast<std::size_t>(CellClass::neutrophil)] += 0.10;
                }
                const std::size_t c = draw_class(rng, weights);
                cell.cell_class = kAllCellClasses[c];
                if (cell.cell_class == CellClass::other) cell.other_name = kUnknownLabel;
                const double radius = rng.uniform(2.5, 5.0);
                for (int v = 0; v < 8; ++v) {
                    const double a = v * std::numbers::pi / 4.0;
                    cell.polygon.push_back(
                        {round2(cell.centroid.x + radius * std::cos(a)), round2(cell.centroid.y + radius * std::sin(a))});
                }
                list.push_back(std::move(cell));
            }
        }
        write_cells(cells, dir / "cells" / (rec.slide_id + ".jsonl"));
    }
}

}  // namespace imilia
