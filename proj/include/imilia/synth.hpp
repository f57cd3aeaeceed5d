#pragma once

#include "imilia/ingest.hpp"

#include <cstdint>
#include <filesystem>

namespace imilia {

/// Synthetic stand-ins for the external interpretability inputs: expanded
/// patch-embedding grids, epithelium-annotated training tiles and per-cell
/// predictions. Every tile gets a disc of epithelium somewhere in its
/// context; patch embeddings are shifted along one axis by the pooled
/// epithelium fraction and cells inside the disc are mostly epithelial.
struct InterpretSynthParams {
    int context_px = 308;  // small context keeps the grids cheap; 22 x 22 patches
    int tile_size_px = 224;
    int patch_size_px = 14;
    std::size_t d_patch = 4;
    double patch_separation = 2.0;
    int n_training_tiles = 4;
    int cells_min = 20;
    int cells_max = 40;
    std::uint64_t seed = 0;
};

/// Writes under `dir`:
///   patches/<slide>__<tile>.{json,bin}   expanded patch grids, one per tile
///   cells/<slide>.jsonl                  cell predictions in the tile frame
///   episeg_train/train_<i>.{json,bin} + train_<i>.mask.pgm
/// Signal tiles of `cohort` carry extra lymphocytes and neutrophils.
void write_interpret_synthetic(const SyntheticCohort& cohort, const InterpretSynthParams& params,
                               const std::filesystem::path& dir);

}  // namespace imilia
