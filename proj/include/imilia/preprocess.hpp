#pragma once

#include "imilia/common.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace imilia {

/// Interleaved 8-bit RGB image.
struct RgbImage {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;  // 3 * width * height

    std::uint8_t at(int x, int y, int c) const { return pixels[3 * (static_cast<std::size_t>(y) * width + x) + c]; }
};

/// Binary raster; `scale` is the number of level-0 pixels per mask pixel.
struct BinaryMask {
    int width = 0;
    int height = 0;
    int scale = 1;
    std::vector<std::uint8_t> values;  // 0 or 1, row-major

    BinaryMask() = default;
    BinaryMask(int w, int h, std::uint8_t fill = 0, int s = 1)
        : width(w), height(h), scale(s), values(static_cast<std::size_t>(w) * h, fill) {}

    std::uint8_t at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t& at(int x, int y) { return values[static_cast<std::size_t>(y) * width + x]; }
    std::size_t count() const;
};

struct Tile {
    std::string tile_id;
    int x_px = 0;
    int y_px = 0;
};

struct TileGrid {
    int tile_size_px = 224;
    double mpp = 0.5;
    std::vector<Tile> tiles;
};

struct TissueMaskOptions {
    int downsample = 1;             // mask pixel = downsample x downsample image pixels
    double min_saturation = 20.0;   // floor on the Otsu threshold (0-255 scale)
    int min_component_px = 16;      // 4-connected components smaller than this are dropped
};

/// Otsu threshold on a 256-bin histogram: the first t maximising the
/// between-class variance, with values > t forming the upper class. nullopt
/// when the histogram has a single occupied bin.
std::optional<int> otsu_threshold(const std::vector<std::size_t>& histogram);

/// Saturation-channel Otsu tissue detector. Degenerate (single-colour) images
/// produce an empty mask and a warning.
BinaryMask tissue_mask(const RgbImage& image, const TissueMaskOptions& options = {});

/// Row-major grid-aligned tiles whose tissue fraction is at least
/// `min_tissue_frac`. Coordinates are level-0 pixels; tile_size_px must be a
/// multiple of mask.scale.
TileGrid tessellate(const BinaryMask& mask, int tile_size_px = 224, double min_tissue_frac = 0.5,
                    double mpp = 0.5);

void write_tile_manifest(const TileGrid& grid, const std::filesystem::path& path);
TileGrid read_tile_manifest(const std::filesystem::path& path);

/// Binary PPM (P6) reader/writer, 8-bit.
RgbImage read_ppm(const std::filesystem::path& path);
void write_ppm(const RgbImage& image, const std::filesystem::path& path);

/// 8-bit PGM (P5); mask values are written as 0/255 and read back as 0/1.
void write_mask_pgm(const BinaryMask& mask, const std::filesystem::path& path);
BinaryMask read_mask_pgm(const std::filesystem::path& path);

/// 16-bit PGM (P5, big-endian samples) holding probabilities in [0,1]
/// quantised to 0..65535.
void write_probability_pgm(int width, int height, const std::vector<double>& values,
                           const std::filesystem::path& path);
std::vector<double> read_probability_pgm(const std::filesystem::path& path, int& width, int& height);

}  // namespace imilia
