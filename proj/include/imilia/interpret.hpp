#pragma once

#include "imilia/common.hpp"
#include "imilia/geometry.hpp"
#include "imilia/metrics.hpp"
#include "imilia/preprocess.hpp"

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace imilia {

enum class CellClass {
    epithelial,
    lymphocyte,
    plasmocyte,
    eosinophil,
    neutrophil,
    endothelial,
    fibroblast,
    cancer,
    other,
};

inline constexpr std::size_t kCellClassCount = 9;
inline constexpr std::array<CellClass, kCellClassCount> kAllCellClasses{
    CellClass::epithelial, CellClass::lymphocyte, CellClass::plasmocyte, CellClass::eosinophil, CellClass::neutrophil,
    CellClass::endothelial, CellClass::fibroblast, CellClass::cancer,     CellClass::other};

/// Classes whose in-epithelium density is reported.
inline constexpr std::array<CellClass, 5> kDensityClasses{CellClass::epithelial, CellClass::lymphocyte,
                                                          CellClass::plasmocyte, CellClass::eosinophil,
                                                          CellClass::neutrophil};

std::string_view to_string(CellClass c);
std::optional<CellClass> parse_cell_class(std::string_view name);

struct CellInstance {
    std::string cell_id;
    std::string tile_id;
    CellClass cell_class = CellClass::other;
    std::string other_name;  // source label when cell_class == other
    Point centroid;          // pixels, tile frame
    Polygon polygon;

    std::string label() const { return cell_class == CellClass::other ? other_name : std::string(to_string(cell_class)); }
};

struct LoadCellsOptions {
    int tile_size_px = 224;
    bool map_unknown_to_other = true;  // false: unknown class names are an error
};

/// JSON-lines, one cell per line:
///   {"cell_id": "...", "tile_id": "...", "class": "lymphocyte",
///    "centroid": [x, y], "polygon": [[x, y], ...]}
/// Returns the cells grouped by tile_id.
std::map<std::string, std::vector<CellInstance>> load_cells(const std::filesystem::path& path,
                                                            const LoadCellsOptions& options = {});
void write_cells(const std::map<std::string, std::vector<CellInstance>>& cells, const std::filesystem::path& path);

/// Relabels cancer cells as epithelial.
std::vector<CellInstance> remap_cancer(std::vector<CellInstance> cells);

struct DensityResult {
    double density = 0.0;           // cells per square micrometre
    std::size_t in_epithelium = 0;  // class-c centroids on epithelium pixels
    std::size_t epithelium_px = 0;
    double epithelium_area_um2 = 0.0;
    bool empty_epithelium = false;  // density forced to 0
};

/// Count of class-c centroids whose containing pixel (floor of the
/// coordinates) is epithelium, over the epithelium area in square
/// micrometres.
DensityResult density(std::span<const CellInstance> cells, const BinaryMask& epithelium, double mpp_x, double mpp_y,
                      CellClass cell_class);

struct TileFeatureRow {
    std::string slide_id;
    std::string tile_id;
    std::string cohort;
    std::string side;  // "min", "max" or "none"
    std::array<std::size_t, kCellClassCount> counts{};
    std::array<std::size_t, kDensityClasses.size()> in_epithelium{};
    std::array<double, kDensityClasses.size()> densities{};
    std::size_t epithelium_px = 0;
    double epithelium_area_um2 = 0.0;
    bool empty_epithelium = true;
    bool has_mask = false;

    std::size_t count(CellClass c) const { return counts[static_cast<std::size_t>(c)]; }
};

/// Per-class counts and in-epithelium densities for one tile. Without a mask
/// the densities are zero and the row is flagged empty.
TileFeatureRow tile_features(std::span<const CellInstance> cells, const BinaryMask* epithelium, double mpp_x,
                             double mpp_y);

/// Pearson correlation between per-tile epithelial cell counts and
/// epithelium areas.
PearsonResult epithelium_agreement(std::span<const TileFeatureRow> rows);

void write_feature_rows(std::span<const TileFeatureRow> rows, const std::filesystem::path& path);
std::vector<TileFeatureRow> read_feature_rows(const std::filesystem::path& path);

}  // namespace imilia
