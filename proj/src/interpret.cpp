#include "imilia/interpret.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>

#include <json.hpp>
#include <fmt/format.h>

namespace imilia {

namespace fs = std::filesystem;

std::string_view to_string(CellClass c) {
    switch (c) {
        case CellClass::epithelial: return "epithelial";
        case CellClass::lymphocyte: return "lymphocyte";
        case CellClass::plasmocyte: return "plasmocyte";
        case CellClass::eosinophil: return "eosinophil";
        case CellClass::neutrophil: return "neutrophil";
        case CellClass::endothelial: return "endothelial";
        case CellClass::fibroblast: return "fibroblast";
        case CellClass::cancer: return "cancer";
        case CellClass::other: return "other";
    }
    return "other";
}

std::optional<CellClass> parse_cell_class(std::string_view name) {
    std::string lower(name);
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char ch) { return std::tolower(ch); });
    for (CellClass c : kAllCellClasses)
        if (c != CellClass::other && lower == to_string(c)) return c;
    return std::nullopt;
}

std::map<std::string, std::vector<CellInstance>> load_cells(const fs::path& path, const LoadCellsOptions& options) {
    std::ifstream in(path);
    if (!in) throw Error(fmt::format("cannot open cell file '{}'", path.string()));
    std::map<std::string, std::vector<CellInstance>> out;
    std::string line;
    std::size_t line_no = 0;
    const double size = options.tile_size_px;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = fmt::format("{}:{}", path.string(), line_no);
        CellInstance cell;
        try {
            const auto j = nlohmann::json::parse(line);
            cell.cell_id = j.contains("cell_id") ? j.at("cell_id").get<std::string>() : fmt::format("line{}", line_no);
            cell.tile_id = j.at("tile_id").get<std::string>();
            const auto name = j.at("class").get<std::string>();
            if (auto c = parse_cell_class(name)) {
                cell.cell_class = *c;
            } else if (options.map_unknown_to_other) {
                cell.cell_class = CellClass::other;
                cell.other_name = name;
            } else {
                throw Error(fmt::format("{}: cell '{}' has unknown class '{}'", where, cell.cell_id, name));
            }
            const auto c = j.at("centroid").get<std::vector<double>>();
            if (c.size() != 2) throw Error(fmt::format("{}: cell '{}' centroid must have 2 coordinates", where, cell.cell_id));
            cell.centroid = {c[0], c[1]};
            for (const auto& v : j.at("polygon")) {
                const auto xy = v.get<std::vector<double>>();
                if (xy.size() != 2) throw Error(fmt::format("{}: cell '{}' has a malformed vertex", where, cell.cell_id));
                cell.polygon.push_back({xy[0], xy[1]});
            }
        } catch (const nlohmann::json::exception& e) {
            throw Error(fmt::format("{}: {}", where, e.what()));
        }
        if (cell.polygon.size() < 3)
            throw Error(fmt::format("{}: cell '{}' polygon has {} vertices (need >= 3)", where, cell.cell_id,
                                    cell.polygon.size()));
        if (!(cell.centroid.x >= 0.0 && cell.centroid.x < size && cell.centroid.y >= 0.0 && cell.centroid.y < size))
            throw Error(fmt::format("{}: cell '{}' centroid ({}, {}) lies outside the {}px tile", where, cell.cell_id,
                                    cell.centroid.x, cell.centroid.y, options.tile_size_px));
        const auto box = bounding_box(cell.polygon);
        if (cell.centroid.x < box.min_x || cell.centroid.x > box.max_x || cell.centroid.y < box.min_y ||
            cell.centroid.y > box.max_y)
            throw Error(fmt::format("{}: cell '{}' centroid lies outside its polygon's bounding box", where, cell.cell_id));
        out[cell.tile_id].push_back(std::move(cell));
    }
    return out;
}

void write_cells(const std::map<std::string, std::vector<CellInstance>>& cells, const fs::path& path) {
    std::string out;
    for (const auto& [tile, list] : cells)
        for (const auto& c : list) {
            nlohmann::json polygon = nlohmann::json::array();
            for (const auto& p : c.polygon) polygon.push_back({p.x, p.y});
            const nlohmann::json j = {{"cell_id", c.cell_id},
                                      {"tile_id", c.tile_id},
                                      {"class", c.label()},
                                      {"centroid", {c.centroid.x, c.centroid.y}},
                                      {"polygon", polygon}};
            out += j.dump() + "\n";
        }
    write_text_file(path, out);
}

std::vector<CellInstance> remap_cancer(std::vector<CellInstance> cells) {
    for (auto& c : cells)
        if (c.cell_class == CellClass::cancer) c.cell_class = CellClass::epithelial;
    return cells;
}

namespace {

bool on_epithelium(const BinaryMask& mask, const CellInstance& cell) {
    const auto x = static_cast<long>(std::floor(cell.centroid.x));
    const auto y = static_cast<long>(std::floor(cell.centroid.y));
    if (x < 0 || y < 0 || x >= mask.width || y >= mask.height)
        throw Error(fmt::format("cell '{}' centroid ({}, {}) lies outside the {}x{} epithelium mask", cell.cell_id,
                                cell.centroid.x, cell.centroid.y, mask.width, mask.height));
    return mask.at(static_cast<int>(x), static_cast<int>(y)) != 0;
}

}  // namespace

DensityResult density(std::span<const CellInstance> cells, const BinaryMask& epithelium, double mpp_x, double mpp_y,
                      CellClass cell_class) {
    if (!(mpp_x > 0.0) || !(mpp_y > 0.0)) throw Error("density: mpp must be positive");
    DensityResult r;
    r.epithelium_px = epithelium.count();
    r.epithelium_area_um2 = static_cast<double>(r.epithelium_px) * mpp_x * mpp_y;
    for (const auto& c : cells)
        if (c.cell_class == cell_class && on_epithelium(epithelium, c)) ++r.in_epithelium;
    if (r.epithelium_px == 0) {
        r.empty_epithelium = true;
        r.density = 0.0;
    } else {
        r.density = static_cast<double>(r.in_epithelium) / r.epithelium_area_um2;
    }
    return r;
}

TileFeatureRow tile_features(std::span<const CellInstance> cells, const BinaryMask* epithelium, double mpp_x,
                             double mpp_y) {
    TileFeatureRow row;
    row.side = "none";
    for (const auto& c : cells) ++row.counts[static_cast<std::size_t>(c.cell_class)];
    row.has_mask = epithelium != nullptr;
    if (!epithelium) return row;
    for (std::size_t i = 0; i < kDensityClasses.size(); ++i) {
        const auto r = density(cells, *epithelium, mpp_x, mpp_y, kDensityClasses[i]);
        row.in_epithelium[i] = r.in_epithelium;
        row.densities[i] = r.density;
        row.epithelium_px = r.epithelium_px;
        row.epithelium_area_um2 = r.epithelium_area_um2;
        row.empty_epithelium = r.empty_epithelium;
    }
    return row;
}

PearsonResult epithelium_agreement(std::span<const TileFeatureRow> rows) {
    std::vector<double> counts, areas;
    for (const auto& r : rows) {
        if (!r.has_mask) continue;
        counts.push_back(static_cast<double>(r.count(CellClass::epithelial)));
        areas.push_back(r.epithelium_area_um2);
    }
    return pearson(counts, areas);
}

void write_feature_rows(std::span<const TileFeatureRow> rows, const fs::path& path) {
    std::string out = "slide_id,tile_id,cohort,side,has_mask,empty_epithelium,epithelium_px,epithelium_area_um2";
    for (CellClass c : kAllCellClasses) out += fmt::format(",count_{}", to_string(c));
    for (CellClass c : kDensityClasses) out += fmt::format(",in_epithelium_{}", to_string(c));
    for (CellClass c : kDensityClasses) out += fmt::format(",density_{}", to_string(c));
    out += "\n";
    for (const auto& r : rows) {
        out += fmt::format("{},{},{},{},{},{},{},{}", r.slide_id, r.tile_id, r.cohort, r.side, r.has_mask ? 1 : 0,
                           r.empty_epithelium ? 1 : 0, r.epithelium_px, format_double(r.epithelium_area_um2));
        for (auto v : r.counts) out += fmt::format(",{}", v);
        for (auto v : r.in_epithelium) out += fmt::format(",{}", v);
        for (auto v : r.densities) out += "," + format_double(v);
        out += "\n";
    }
    write_text_file(path, out);
}

std::vector<TileFeatureRow> read_feature_rows(const fs::path& path) {
    const CsvTable csv = read_csv(path);
    const auto c_s = csv.column("slide_id"), c_t = csv.column("tile_id"), c_c = csv.column("cohort"),
               c_side = csv.column("side"), c_mask = csv.column("has_mask"), c_empty = csv.column("empty_epithelium"),
               c_px = csv.column("epithelium_px"), c_area = csv.column("epithelium_area_um2");
    std::vector<TileFeatureRow> rows;
    for (const auto& r : csv.rows) {
        TileFeatureRow row;
        row.slide_id = r[c_s];
        row.tile_id = r[c_t];
        row.cohort = r[c_c];
        row.side = r[c_side];
        row.has_mask = parse_int(r[c_mask], "has_mask") != 0;
        row.empty_epithelium = parse_int(r[c_empty], "empty_epithelium") != 0;
        row.epithelium_px = static_cast<std::size_t>(parse_int(r[c_px], "epithelium_px"));
        row.epithelium_area_um2 = parse_double(r[c_area], "epithelium_area_um2");
        for (std::size_t i = 0; i < kAllCellClasses.size(); ++i)
            row.counts[i] = static_cast<std::size_t>(
                parse_int(r[csv.column(fmt::format("count_{}", to_string(kAllCellClasses[i])))], "count"));
        for (std::size_t i = 0; i < kDensityClasses.size(); ++i) {
            row.in_epithelium[i] = static_cast<std::size_t>(
                parse_int(r[csv.column(fmt::format("in_epithelium_{}", to_string(kDensityClasses[i])))], "count"));
            row.densities[i] =
                parse_double(r[csv.column(fmt::format("density_{}", to_string(kDensityClasses[i])))], "density");
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace imilia
