#include "imilia/report.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <set>
#include <tuple>

#include <fmt/format.h>

namespace imilia {

namespace fs = std::filesystem;

const char* const kToolVersion = "imilia 0.1.0";

GroupStats summarize(std::span<const double> values) {
    GroupStats s;
    s.n = values.size();
    if (values.empty()) return s;
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    s.mean = std::accumulate(sorted.begin(), sorted.end(), 0.0) / static_cast<double>(sorted.size());
    s.median = quantile_sorted(sorted, 0.5);
    s.q1 = quantile_sorted(sorted, 0.25);
    s.q3 = quantile_sorted(sorted, 0.75);
    s.min = sorted.front();
    s.max = sorted.back();
    return s;
}

std::vector<std::string> feature_quantities() {
    std::vector<std::string> out;
    for (CellClass c : kAllCellClasses) out.push_back(fmt::format("count_{}", to_string(c)));
    for (CellClass c : kDensityClasses) out.push_back(fmt::format("density_{}", to_string(c)));
    return out;
}

double feature_value(const TileFeatureRow& row, const std::string& quantity) {
    for (std::size_t i = 0; i < kAllCellClasses.size(); ++i)
        if (quantity == fmt::format("count_{}", to_string(kAllCellClasses[i])))
            return static_cast<double>(row.counts[i]);
    for (std::size_t i = 0; i < kDensityClasses.size(); ++i)
        if (quantity == fmt::format("density_{}", to_string(kDensityClasses[i]))) return row.densities[i];
    throw Error(fmt::format("unknown feature quantity '{}'", quantity));
}

namespace {

// Sides sort min, max, then anything else alphabetically.
int side_rank(const std::string& side) {
    if (side == "min") return 0;
    if (side == "max") return 1;
    return 2;
}

bool side_less(const std::string& a, const std::string& b) {
    return std::make_tuple(side_rank(a), a) < std::make_tuple(side_rank(b), b);
}

using GroupKey = std::pair<std::string, std::string>;  // cohort, side

std::vector<GroupKey> group_keys(std::span<const TileFeatureRow> rows) {
    std::set<GroupKey> keys;
    for (const auto& r : rows) keys.insert({r.cohort, r.side});
    std::vector<GroupKey> out(keys.begin(), keys.end());
    std::sort(out.begin(), out.end(), [](const GroupKey& a, const GroupKey& b) {
        if (a.first != b.first) return a.first < b.first;
        return side_less(a.second, b.second);
    });
    return out;
}

}  // namespace

// Densities of tiles without an epithelium mask are undefined, not zero.
bool counts_toward(const TileFeatureRow& r, const std::string& quantity) {
    return r.has_mask || !quantity.starts_with("density_");
}

std::vector<GroupStats> composition_table(std::span<const TileFeatureRow> rows) {
    if (rows.empty()) throw Error("composition_table: no feature rows");
    std::vector<GroupStats> out;
    const auto keys = group_keys(rows);
    for (const auto& q : feature_quantities()) {
        for (const auto& [cohort, side] : keys) {
            std::vector<double> values;
            for (const auto& r : rows)
                if (r.cohort == cohort && r.side == side && counts_toward(r, q)) values.push_back(feature_value(r, q));
            GroupStats s = summarize(values);
            s.cohort = cohort;
            s.side = side;
            s.quantity = q;
            out.push_back(std::move(s));
        }
    }
    return out;
}

void write_composition(std::span<const GroupStats> table, const fs::path& path) {
    std::string out = "quantity,cohort,side,n,mean,median,q1,q3,min,max\n";
    for (const auto& s : table)
        out += fmt::format("{},{},{},{},{},{},{},{},{},{}\n", s.quantity, s.cohort, s.side, s.n, format_double(s.mean),
                           format_double(s.median), format_double(s.q1), format_double(s.q3), format_double(s.min),
                           format_double(s.max));
    write_text_file(path, out);
}

double KernelDensity::integral() const {
    double total = 0.0;
    for (std::size_t i = 1; i < grid.size(); ++i) total += 0.5 * (density[i] + density[i - 1]) * (grid[i] - grid[i - 1]);
    return total;
}

namespace {

double kde_at(std::span<const double> values, double h, double x) {
    const double norm = 1.0 / (static_cast<double>(values.size()) * h * std::sqrt(2.0 * std::numbers::pi));
    double s = 0.0;
    for (double v : values) {
        const double z = (x - v) / h;
        s += std::exp(-0.5 * z * z);
    }
    return s * norm;
}

}  // namespace

KernelDensity gaussian_kde(std::span<const double> values) {
    KernelDensity kde;
    const std::size_t n = values.size();
    if (n < 2) return kde;
    const GroupStats s = summarize(values);
    double var = 0.0;
    for (double v : values) var += (v - s.mean) * (v - s.mean);
    const double sd = std::sqrt(var / static_cast<double>(n - 1));
    const double iqr = (s.q3 - s.q1) / 1.34;
    const double spread = iqr > 0.0 ? std::min(sd, iqr) : sd;
    const double h = 0.9 * spread * std::pow(static_cast<double>(n), -0.2);
    if (!(h > 0.0)) return kde;
    kde.bandwidth = h;
    const double lo = s.min - 5.0 * h, hi = s.max + 5.0 * h;
    // At least 8 grid points per bandwidth keeps the trapezoid sum accurate.
    const auto steps = static_cast<std::size_t>(std::clamp(std::ceil((hi - lo) / (h / 8.0)), 512.0, 20000.0));
    kde.grid.resize(steps + 1);
    kde.density.resize(steps + 1);
    for (std::size_t i = 0; i <= steps; ++i) {
        kde.grid[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(steps);
        kde.density[i] = kde_at(values, h, kde.grid[i]);
    }
    return kde;
}

ViolinSpec make_violin(std::string cohort, std::string side, std::string quantity, std::vector<double> values) {
    ViolinSpec v;
    v.cohort = std::move(cohort);
    v.side = std::move(side);
    v.quantity = std::move(quantity);
    v.values = std::move(values);
    v.summary = summarize(v.values);
    v.summary.cohort = v.cohort;
    v.summary.side = v.side;
    v.summary.quantity = v.quantity;
    v.kde = gaussian_kde(v.values);
    return v;
}

std::vector<ViolinSpec> violins_for(std::span<const TileFeatureRow> rows, const std::string& quantity) {
    std::vector<ViolinSpec> out;
    for (const auto& [cohort, side] : group_keys(rows)) {
        std::vector<double> values;
        for (const auto& r : rows)
            if (r.cohort == cohort && r.side == side && counts_toward(r, quantity))
                values.push_back(feature_value(r, quantity));
        out.push_back(make_violin(cohort, side, quantity, std::move(values)));
    }
    return out;
}

namespace {

constexpr double kMarginLeft = 70, kMarginRight = 20, kMarginTop = 50, kMarginBottom = 60;
constexpr double kPlotHeight = 320, kPanelWidth = 220, kHalfWidth = 40;

}  // namespace

double ViolinLayout::value_to_y(double v) const {
    return kMarginTop + kPlotHeight * (1.0 - (v - value_lo) / (value_hi - value_lo));
}

ViolinLayout layout_violins(std::span<const ViolinSpec> specs) {
    ViolinLayout layout;
    std::set<std::string> cohort_set;
    bool any = false;
    double lo = 0.0, hi = 0.0;
    for (const auto& s : specs) {
        cohort_set.insert(s.cohort);
        if (s.values.empty()) continue;
        lo = any ? std::min(lo, s.summary.min) : s.summary.min;
        hi = any ? std::max(hi, s.summary.max) : s.summary.max;
        any = true;
    }
    if (!(hi > lo)) {
        lo -= 0.5;
        hi += 0.5;
    }
    const double pad = 0.05 * (hi - lo);
    layout.value_lo = lo - pad;
    layout.value_hi = hi + pad;
    layout.cohorts.assign(cohort_set.begin(), cohort_set.end());
    layout.width = kMarginLeft + kMarginRight + kPanelWidth * static_cast<double>(std::max<std::size_t>(1, layout.cohorts.size()));
    layout.height = kMarginTop + kPlotHeight + kMarginBottom;

    for (std::size_t p = 0; p < layout.cohorts.size(); ++p) {
        std::vector<const ViolinSpec*> panel;
        for (const auto& s : specs)
            if (s.cohort == layout.cohorts[p]) panel.push_back(&s);
        std::stable_sort(panel.begin(), panel.end(),
                         [](const ViolinSpec* a, const ViolinSpec* b) { return side_less(a->side, b->side); });
        const double slot = kPanelWidth / static_cast<double>(panel.size());
        for (std::size_t i = 0; i < panel.size(); ++i) {
            const ViolinSpec& s = *panel[i];
            if (s.values.empty()) {
                layout.omitted.push_back(s.cohort + "/" + s.side);
                continue;
            }
            ViolinBody body;
            body.cohort = s.cohort;
            body.side = s.side;
            const double cx = kMarginLeft + kPanelWidth * static_cast<double>(p) + slot * (static_cast<double>(i) + 0.5);
            const double half = std::min(kHalfWidth, 0.45 * slot);
            body.x0 = cx - half;
            body.x1 = cx + half;
            body.y0 = layout.value_to_y(s.summary.max);
            body.y1 = layout.value_to_y(s.summary.min);
            body.box_fallback = s.kde.grid.empty();
            layout.bodies.push_back(body);
        }
    }
    return layout;
}

namespace {

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

std::string num(double v) { return fmt::format("{:.2f}", v); }

const char* side_color(const std::string& side) {
    if (side == "min") return "#4c72b0";
    if (side == "max") return "#c44e52";
    return "#8c8c8c";
}

}  // namespace

std::string render_violin(std::span<const ViolinSpec> specs, const std::string& title) {
    const ViolinLayout layout = layout_violins(specs);
    std::string svg = fmt::format(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">\n",
        num(layout.width), num(layout.height), num(layout.width), num(layout.height));
    svg += fmt::format("<rect width=\"{}\" height=\"{}\" fill=\"white\"/>\n", num(layout.width), num(layout.height));
    svg += fmt::format("<text x=\"{}\" y=\"24\" font-size=\"15\" font-family=\"sans-serif\">{}</text>\n", num(kMarginLeft),
                       xml_escape(title));

    // value axis with five ticks
    const double axis_x = kMarginLeft - 8;
    svg += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\n", num(axis_x),
                       num(kMarginTop), num(kMarginTop + kPlotHeight));
    for (int t = 0; t <= 4; ++t) {
        const double v = layout.value_lo + (layout.value_hi - layout.value_lo) * t / 4.0;
        const double y = layout.value_to_y(v);
        svg += fmt::format("<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n", num(axis_x - 4), num(y),
                           num(axis_x), num(y));
        svg += fmt::format(
            "<text x=\"{}\" y=\"{}\" font-size=\"10\" font-family=\"sans-serif\" text-anchor=\"end\">{:.4g}</text>\n",
            num(axis_x - 6), num(y + 3), v);
    }

    for (std::size_t p = 0; p < layout.cohorts.size(); ++p) {
        const double px = kMarginLeft + kPanelWidth * static_cast<double>(p);
        svg += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#cccccc\"/>\n",
                           num(px), num(kMarginTop), num(kPanelWidth), num(kPlotHeight));
        svg += fmt::format(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" font-family=\"sans-serif\" text-anchor=\"middle\">{}</text>\n",
            num(px + kPanelWidth / 2), num(kMarginTop + kPlotHeight + 36), xml_escape(layout.cohorts[p]));
    }

    for (const auto& body : layout.bodies) {
        const ViolinSpec* spec = nullptr;
        for (const auto& s : specs)
            if (s.cohort == body.cohort && s.side == body.side) spec = &s;
        const double cx = 0.5 * (body.x0 + body.x1);
        const double half = 0.5 * (body.x1 - body.x0);
        const char* color = side_color(body.side);
        const auto& st = spec->summary;
        if (body.box_fallback) {
            const double y_q3 = layout.value_to_y(st.q3), y_q1 = layout.value_to_y(st.q1);
            svg += fmt::format(
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\" fill-opacity=\"0.5\" stroke=\"{}\"/>\n",
                num(cx - half / 2), num(y_q3), num(half), num(std::max(1.0, y_q1 - y_q3)), color, color);
        } else {
            // KDE outline trimmed to the observed range.
            std::vector<std::pair<double, double>> profile;
            const auto& kde = spec->kde;
            profile.push_back({st.min, kde_at(spec->values, kde.bandwidth, st.min)});
            for (std::size_t i = 0; i < kde.grid.size(); ++i)
                if (kde.grid[i] > st.min && kde.grid[i] < st.max) profile.push_back({kde.grid[i], kde.density[i]});
            profile.push_back({st.max, kde_at(spec->values, kde.bandwidth, st.max)});
            double peak = 0.0;
            for (const auto& [v, d] : profile) peak = std::max(peak, d);
            std::string path;
            for (std::size_t i = 0; i < profile.size(); ++i) {
                const double w = peak > 0 ? half * profile[i].second / peak : 0.0;
                path += fmt::format("{}{} {} ", i == 0 ? "M" : "L", num(cx + w), num(layout.value_to_y(profile[i].first)));
            }
            for (std::size_t i = profile.size(); i-- > 0;) {
                const double w = peak > 0 ? half * profile[i].second / peak : 0.0;
                path += fmt::format("L{} {} ", num(cx - w), num(layout.value_to_y(profile[i].first)));
            }
            path += "Z";
            svg += fmt::format("<path d=\"{}\" fill=\"{}\" fill-opacity=\"0.5\" stroke=\"{}\"/>\n", path, color, color);
            svg += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\" stroke-width=\"3\"/>\n",
                               num(cx), num(layout.value_to_y(st.q3)), num(layout.value_to_y(st.q1)));
        }
        const double y_med = layout.value_to_y(st.median);
        svg += fmt::format("<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"white\" stroke-width=\"2\"/>\n",
                           num(cx - 6), num(y_med), num(cx + 6), num(y_med));
        svg += fmt::format(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" font-family=\"sans-serif\" text-anchor=\"middle\">{} (n={})</text>\n",
            num(cx), num(kMarginTop + kPlotHeight + 16), xml_escape(body.side), st.n);
    }

    double legend_y = kMarginTop + kPlotHeight + 52;
    for (const auto& g : layout.omitted) {
        svg += fmt::format("<text x=\"{}\" y=\"{}\" font-size=\"10\" font-family=\"sans-serif\">no data: {}</text>\n",
                           num(kMarginLeft), num(legend_y), xml_escape(g));
        legend_y += 12;
    }
    svg += "</svg>\n";
    return svg;
}

PrCurveArtifact render_pr_curve(std::span<const double> scores, std::span<const int> labels, const std::string& title) {
    if (std::find(labels.begin(), labels.end(), 0) == labels.end() ||
        std::find(labels.begin(), labels.end(), 1) == labels.end())
        throw Error("render_pr_curve: both classes must be present");
    PrCurveArtifact out;
    out.points = precision_recall_curve(scores, labels);
    out.average_precision = average_precision(scores, labels);

    out.csv = "threshold,recall,precision\n";
    for (const auto& p : out.points)
        out.csv += fmt::format("{},{},{}\n", format_double(p.threshold), format_double(p.recall), format_double(p.precision));

    constexpr double left = 60, top = 40, size = 360;
    const auto x = [&](double r) { return left + size * r; };
    const auto y = [&](double p) { return top + size * (1.0 - p); };
    std::string svg = fmt::format(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" viewBox=\"0 0 {0} {1}\">\n",
        num(left + size + 30), num(top + size + 50));
    svg += fmt::format("<rect width=\"{}\" height=\"{}\" fill=\"white\"/>\n", num(left + size + 30), num(top + size + 50));
    svg += fmt::format("<text x=\"{}\" y=\"24\" font-size=\"15\" font-family=\"sans-serif\">{}</text>\n", num(left),
                       xml_escape(title));
    svg += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n", num(left),
                       num(top), num(size), num(size));
    for (int t = 0; t <= 4; ++t) {
        const double v = t / 4.0;
        svg += fmt::format(
            "<text x=\"{}\" y=\"{}\" font-size=\"10\" font-family=\"sans-serif\" text-anchor=\"middle\">{:.2f}</text>\n",
            num(x(v)), num(top + size + 14), v);
        svg += fmt::format(
            "<text x=\"{}\" y=\"{}\" font-size=\"10\" font-family=\"sans-serif\" text-anchor=\"end\">{:.2f}</text>\n",
            num(left - 4), num(y(v) + 3), v);
    }
    svg += fmt::format(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" font-family=\"sans-serif\" text-anchor=\"middle\">recall</text>\n",
        num(left + size / 2), num(top + size + 32));
    svg += fmt::format(
        "<text x=\"16\" y=\"{}\" font-size=\"12\" font-family=\"sans-serif\" "
        "transform=\"rotate(-90 16 {})\" text-anchor=\"middle\">precision</text>\n",
        num(top + size / 2), num(top + size / 2));

    // Steps: precision P_i is held over (R_{i-1}, R_i].
    std::string path = fmt::format("M{} {}", num(x(0.0)), num(y(out.points.front().precision)));
    for (std::size_t i = 0; i < out.points.size(); ++i) {
        if (i > 0) path += fmt::format(" V{}", num(y(out.points[i].precision)));
        path += fmt::format(" H{}", num(x(out.points[i].recall)));
    }
    svg += fmt::format("<path d=\"{}\" fill=\"none\" stroke=\"#c44e52\" stroke-width=\"2\"/>\n", path);
    svg += fmt::format("<text x=\"{}\" y=\"{}\" font-size=\"12\" font-family=\"sans-serif\" text-anchor=\"end\">AP = {:.3f}</text>\n",
                       num(left + size - 8), num(top + size - 10), out.average_precision);
    svg += "</svg>\n";
    out.svg = std::move(svg);
    return out;
}

nlohmann::json make_run_manifest(std::uint64_t seed, const std::map<std::string, fs::path>& inputs,
                                 const fs::path& run_dir, const nlohmann::json& extra) {
    nlohmann::json j;
    j["tool_version"] = kToolVersion;
    j["seed"] = seed;
    nlohmann::json in = nlohmann::json::object();
    for (const auto& [name, path] : inputs) in[name] = {{"path", path.string()}, {"sha256", sha256_file(path)}};
    j["inputs"] = in;
    std::vector<std::string> names;
    if (fs::exists(run_dir))
        for (const auto& e : fs::recursive_directory_iterator(run_dir)) {
            if (!e.is_regular_file()) continue;
            const std::string rel = fs::relative(e.path(), run_dir).generic_string();
            // the manifest itself and the timestamped event log are not outputs
            if (rel == "run_manifest.json" || rel == "events.jsonl") continue;
            names.push_back(rel);
        }
    std::sort(names.begin(), names.end());
    nlohmann::json out = nlohmann::json::object();
    for (const auto& n : names) out[n] = sha256_file(run_dir / n);
    j["outputs"] = out;
    if (!extra.is_null())
        for (const auto& [k, v] : extra.items()) j[k] = v;
    return j;
}

}  // namespace imilia
