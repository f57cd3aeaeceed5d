#pragma once

#include "imilia/interpret.hpp"

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace imilia {

/// Summary of one (cohort, side, quantity) group. Quantities are named like
/// the feature CSV columns: count_<class> or density_<class>.
struct GroupStats {
    std::string cohort;
    std::string side;
    std::string quantity;
    std::size_t n = 0;
    double mean = 0.0;
    double median = 0.0;
    double q1 = 0.0;
    double q3 = 0.0;
    double min = 0.0;
    double max = 0.0;
};

GroupStats summarize(std::span<const double> values);

/// Per-(cohort, side) stats of every class count and every density, sorted
/// by (quantity, cohort, side). Density stats only use tiles with a mask.
std::vector<GroupStats> composition_table(std::span<const TileFeatureRow> rows);
void write_composition(std::span<const GroupStats> table, const std::filesystem::path& path);

/// Quantity value for a feature row ("count_lymphocyte", "density_neutrophil"...).
double feature_value(const TileFeatureRow& row, const std::string& quantity);
bool counts_toward(const TileFeatureRow& row, const std::string& quantity);
std::vector<std::string> feature_quantities();

struct KernelDensity {
    double bandwidth = 0.0;
    std::vector<double> grid;
    std::vector<double> density;

    /// Trapezoidal integral over the grid.
    double integral() const;
};

/// Gaussian KDE with Silverman's bandwidth, evaluated on an even grid over
/// [min - 5h, max + 5h]. Bandwidth 0 (fewer than 2 values or no spread)
/// leaves the grid empty.
KernelDensity gaussian_kde(std::span<const double> values);

struct ViolinSpec {
    std::string cohort;
    std::string side;
    std::string quantity;
    std::vector<double> values;
    GroupStats summary;
    KernelDensity kde;
};

ViolinSpec make_violin(std::string cohort, std::string side, std::string quantity, std::vector<double> values);

/// Violin specs for one quantity, one per (cohort, side) present in rows.
/// Tiles without a mask do not contribute to densities.
std::vector<ViolinSpec> violins_for(std::span<const TileFeatureRow> rows, const std::string& quantity);

struct ViolinBody {
    std::string cohort;
    std::string side;
    double x0 = 0, x1 = 0;  // horizontal extent in SVG units
    double y0 = 0, y1 = 0;  // vertical extent, y0 < y1 (SVG y grows downwards)
    bool box_fallback = false;
};

struct ViolinLayout {
    double width = 0;
    double height = 0;
    double value_lo = 0;
    double value_hi = 1;
    std::vector<std::string> cohorts;  // one panel each, in order
    std::vector<ViolinBody> bodies;
    std::vector<std::string> omitted;  // "cohort/side" groups without values

    double value_to_y(double v) const;
};

ViolinLayout layout_violins(std::span<const ViolinSpec> specs);

/// One panel per cohort, min and max side by side. Groups with fewer than two
/// values or no spread are drawn as a box glyph.
std::string render_violin(std::span<const ViolinSpec> specs, const std::string& title);

struct PrCurveArtifact {
    std::vector<PrPoint> points;
    double average_precision = 0.0;
    std::string svg;
    std::string csv;  // threshold,recall,precision
};

PrCurveArtifact render_pr_curve(std::span<const double> scores, std::span<const int> labels,
                                const std::string& title = "precision-recall");

/// Output files with their digests, keyed by name relative to the run
/// directory, plus inputs and seeds.
nlohmann::json make_run_manifest(std::uint64_t seed, const std::map<std::string, std::filesystem::path>& inputs,
                                 const std::filesystem::path& run_dir, const nlohmann::json& extra = {});

extern const char* const kToolVersion;

}  // namespace imilia
