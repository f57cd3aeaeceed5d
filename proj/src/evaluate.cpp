#include "imilia/evaluate.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <limits>
#include <numeric>
#include <set>
#include <sstream>

namespace fs = std::filesystem;

namespace imilia {

EvalMetric parse_metric(std::string_view name) {
    if (name == "auc") return EvalMetric::auc;
    if (name == "ap") return EvalMetric::ap;
    if (name == "pearson") return EvalMetric::pearson;
    if (name == "f1") return EvalMetric::f1;
    if (name == "pq") return EvalMetric::pq;
    throw Error(fmt::format("unknown metric '{}' (expected auc, ap, pearson, f1 or pq)", name));
}

std::string_view to_string(EvalMetric m) {
    switch (m) {
        case EvalMetric::auc: return "auc";
        case EvalMetric::ap: return "ap";
        case EvalMetric::pearson: return "pearson";
        case EvalMetric::f1: return "f1";
        case EvalMetric::pq: return "pq";
    }
    return "?";
}

JoinedValues join_csv(const fs::path& pred_path, const fs::path& gt_path, EvalMetric metric) {
    const CsvTable pred = read_csv(pred_path);
    const CsvTable gt = read_csv(gt_path);
    if (pred.header.empty() || gt.header.empty()) throw Error("eval: empty CSV header");

    std::ptrdiff_t c_pred = pred.find_column("score");
    if (c_pred < 0) c_pred = pred.find_column("probability");
    if (c_pred < 0) throw Error(fmt::format("'{}': no score column", pred_path.string()));
    std::ptrdiff_t c_gt = -1;
    if (metric == EvalMetric::pearson) c_gt = gt.find_column("value");
    if (c_gt < 0) c_gt = gt.find_column("label");
    if (c_gt < 0) throw Error(fmt::format("'{}': no label column", gt_path.string()));

    std::map<std::string, std::string> reference;
    for (const auto& r : gt.rows) {
        const std::string& v = r[static_cast<std::size_t>(c_gt)];
        if (v.empty()) continue;
        if (!reference.emplace(r[0], v).second)
            throw Error(fmt::format("'{}': duplicate id '{}'", gt_path.string(), r[0]));
    }
    JoinedValues out;
    for (const auto& r : pred.rows) {
        const auto it = reference.find(r[0]);
        if (it == reference.end()) {
            ++out.unmatched;
            continue;
        }
        out.ids.push_back(r[0]);
        out.pred.push_back(parse_double(r[static_cast<std::size_t>(c_pred)], "score"));
        out.truth.push_back(parse_double(it->second, "reference"));
    }
    if (out.ids.empty()) throw Error("eval: no ids shared between prediction and reference files");
    if (out.unmatched > 0) spdlog::warn("eval: {} prediction rows have no reference and are ignored", out.unmatched);
    return out;
}

namespace {

Polygon parse_polygon_text(std::string_view text, const std::string& where) {
    Polygon poly;
    std::size_t start = 0;
    while (start <= text.size()) {
        const std::size_t end = std::min(text.find(';', start), text.size());
        const std::string vertex(text.substr(start, end - start));
        std::istringstream is(vertex);
        Point p;
        if (!(is >> p.x >> p.y)) throw Error(fmt::format("{}: bad polygon vertex '{}'", where, vertex));
        poly.push_back(p);
        start = end + 1;
    }
    if (poly.size() < 3) throw Error(fmt::format("{}: polygon needs at least 3 vertices", where));
    return poly;
}

}  // namespace

LabeledInstances read_instances(const fs::path& path) {
    LabeledInstances out;
    if (path.extension() == ".jsonl") {
        LoadCellsOptions opts;
        opts.tile_size_px = std::numeric_limits<int>::max() / 2;  // reference tiles may be any size
        for (const auto& [tile, cells] : load_cells(path, opts))
            for (const auto& c : cells) {
                out.polygons[tile].push_back(c.polygon);
                out.labels[tile].push_back(c.label());
            }
        return out;
    }
    const CsvTable csv = read_csv(path);
    const auto c_tile = csv.column("tile_id"), c_class = csv.column("class"), c_poly = csv.column("polygon");
    for (std::size_t i = 0; i < csv.rows.size(); ++i) {
        const auto& r = csv.rows[i];
        const std::string where = fmt::format("{}:{}", path.string(), csv.line_numbers[i]);
        out.polygons[r[c_tile]].push_back(parse_polygon_text(r[c_poly], where));
        out.labels[r[c_tile]].push_back(r[c_class]);
    }
    return out;
}

std::vector<InstanceEvent> match_tiles(const LabeledInstances& pred, const LabeledInstances& gt) {
    std::set<std::string> tiles;
    for (const auto& [t, _] : pred.polygons) tiles.insert(t);
    for (const auto& [t, _] : gt.polygons) tiles.insert(t);
    static const std::vector<Polygon> no_polygons;
    static const std::vector<std::string> no_labels;
    auto get = [](const auto& m, const std::string& k, const auto& fallback) -> const auto& {
        const auto it = m.find(k);
        return it == m.end() ? fallback : it->second;
    };
    std::vector<InstanceEvent> events;
    for (const auto& t : tiles) {
        const auto& pp = get(pred.polygons, t, no_polygons);
        const auto& gp = get(gt.polygons, t, no_polygons);
        const auto& pl = get(pred.labels, t, no_labels);
        const auto& gl = get(gt.labels, t, no_labels);
        const MatchResult m = match_instances(pp, gp);
        for (const auto& pair : m.matched)
            events.push_back({InstanceEvent::matched, pl[pair.pred], gl[pair.gt], pair.iou});
        for (std::size_t i : m.unmatched_pred) events.push_back({InstanceEvent::false_positive, pl[i], {}, 0.0});
        for (std::size_t j : m.unmatched_gt) events.push_back({InstanceEvent::false_negative, {}, gl[j], 0.0});
    }
    return events;
}

EventMatch events_to_match(std::span<const InstanceEvent> events) {
    EventMatch out;
    for (const auto& e : events) {
        switch (e.kind) {
            case InstanceEvent::matched:
                out.match.matched.push_back({out.pred_labels.size(), out.gt_labels.size(), e.iou});
                out.pred_labels.push_back(e.pred_label);
                out.gt_labels.push_back(e.gt_label);
                break;
            case InstanceEvent::false_positive:
                out.match.unmatched_pred.push_back(out.pred_labels.size());
                out.pred_labels.push_back(e.pred_label);
                break;
            case InstanceEvent::false_negative:
                out.match.unmatched_gt.push_back(out.gt_labels.size());
                out.gt_labels.push_back(e.gt_label);
                break;
        }
    }
    return out;
}

namespace {

nlohmann::json ci_json(const BootstrapResult& b) { return {{"estimate", b.estimate}, {"ci", {b.lo, b.hi}}}; }

std::vector<int> as_labels(const std::vector<double>& truth) {
    std::vector<int> labels;
    for (double v : truth) {
        if (v != 0.0 && v != 1.0) throw Error("eval: reference labels must be 0 or 1");
        labels.push_back(static_cast<int>(v));
    }
    return labels;
}

}  // namespace

nlohmann::json evaluate_files(const fs::path& pred, const fs::path& gt, const EvalOptions& o) {
    nlohmann::json out = {{"metric", to_string(o.metric)},
                          {"bootstrap", o.bootstrap},
                          {"level", o.level},
                          {"seed", o.seed}};
    switch (o.metric) {
        case EvalMetric::auc:
        case EvalMetric::ap: {
            const JoinedValues j = join_csv(pred, gt, o.metric);
            const auto labels = as_labels(j.truth);
            const auto stat = o.metric == EvalMetric::auc
                                  ? std::function<double(std::span<const double>, std::span<const int>)>(
                                        [](auto s, auto l) { return roc_auc(s, l); })
                                  : [](auto s, auto l) { return average_precision(s, l); };
            const auto b = stratified_bootstrap_ci(j.pred, labels, stat, o.bootstrap, o.level, o.seed);
            out.update(ci_json(b));
            out["n"] = j.ids.size();
            out["n_positive"] = std::count(labels.begin(), labels.end(), 1);
            break;
        }
        case EvalMetric::pearson: {
            const JoinedValues j = join_csv(pred, gt, o.metric);
            const PearsonResult full = pearson(j.pred, j.truth);
            std::vector<std::size_t> idx(j.ids.size());
            std::iota(idx.begin(), idx.end(), 0);
            const auto b = bootstrap_ci<std::size_t>(
                idx,
                [&](std::span<const std::size_t> rows) {
                    std::vector<double> x, y;
                    for (std::size_t r : rows) {
                        x.push_back(j.pred[r]);
                        y.push_back(j.truth[r]);
                    }
                    try {
                        return pearson(x, y).r;
                    } catch (const Error&) {
                        return 0.0;  // constant resample; only possible for tiny n
                    }
                },
                o.bootstrap, o.level, o.seed);
            out.update(ci_json(b));
            out["p_value"] = full.p_value;
            out["n"] = j.ids.size();
            break;
        }
        case EvalMetric::f1: {
            const auto events = match_tiles(read_instances(pred), read_instances(gt));
            if (events.empty()) throw Error("eval: no instances");
            const EventMatch full = events_to_match(events);
            const auto f1 = f1_per_class(full.pred_labels, full.gt_labels, full.match);
            nlohmann::json per_class = nlohmann::json::object();
            for (const auto& [cls, value] : f1) {
                const auto b = bootstrap_ci<InstanceEvent>(
                    events,
                    [&cls](std::span<const InstanceEvent> sample) {
                        const EventMatch m = events_to_match(sample);
                        const auto scores = f1_per_class(m.pred_labels, m.gt_labels, m.match);
                        const auto it = scores.find(cls);
                        return it == scores.end() ? 0.0 : it->second;
                    },
                    o.bootstrap, o.level, o.seed);
                per_class[cls] = ci_json(b);
            }
            out["per_class"] = per_class;
            out["n"] = events.size();
            break;
        }
        case EvalMetric::pq: {
            const auto events = match_tiles(read_instances(pred), read_instances(gt));
            if (events.empty()) throw Error("eval: no instances");
            for (const char* part : {"pq", "dq", "sq"}) {
                const std::string which(part);
                const auto b = bootstrap_ci<InstanceEvent>(
                    events,
                    [&which](std::span<const InstanceEvent> sample) {
                        const InstanceQuality q = pq_dq_sq(events_to_match(sample).match);
                        return which == "pq" ? q.pq : which == "dq" ? q.dq : q.sq;
                    },
                    o.bootstrap, o.level, o.seed);
                if (which == "pq") out.update(ci_json(b));
                out[which] = ci_json(b);
            }
            out["n"] = events.size();
            break;
        }
    }
    return out;
}

}  // namespace imilia
