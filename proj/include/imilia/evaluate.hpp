#pragma once

#include "imilia/interpret.hpp"
#include "imilia/metrics.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace imilia {

enum class EvalMetric { auc, ap, pearson, f1, pq };
EvalMetric parse_metric(std::string_view name);
std::string_view to_string(EvalMetric m);

struct EvalOptions {
    EvalMetric metric = EvalMetric::auc;
    int bootstrap = 1000;
    double level = 0.95;
    std::uint64_t seed = 0;
};

/// Prediction/ground-truth pairs joined on the first column of each CSV.
/// The prediction value is `score` (or `probability`); the reference is
/// `label` for auc/ap and `value` (or `label`) for pearson.
struct JoinedValues {
    std::vector<std::string> ids;
    std::vector<double> pred;
    std::vector<double> truth;
    std::size_t unmatched = 0;  // prediction rows without a reference row
};
JoinedValues join_csv(const std::filesystem::path& pred, const std::filesystem::path& gt, EvalMetric metric);

/// One matched or unmatched instance after per-tile matching.
struct InstanceEvent {
    enum Kind { matched, false_positive, false_negative } kind = matched;
    std::string pred_label;
    std::string gt_label;
    double iou = 0.0;
};

/// Instances grouped by tile; polygons in pixels.
struct LabeledInstances {
    std::map<std::string, std::vector<Polygon>> polygons;
    std::map<std::string, std::vector<std::string>> labels;
};

/// `.jsonl` files use the cell prediction format; anything else is read as
/// CSV with columns tile_id,class,polygon where polygon is "x y;x y;...".
LabeledInstances read_instances(const std::filesystem::path& path);

/// Matches prediction and reference instances tile by tile. Tiles present on
/// one side only contribute unmatched instances.
std::vector<InstanceEvent> match_tiles(const LabeledInstances& pred, const LabeledInstances& gt);

/// Rebuilds label lists and a MatchResult from events so the library
/// metrics can be applied to (resampled) events.
struct EventMatch {
    std::vector<std::string> pred_labels;
    std::vector<std::string> gt_labels;
    MatchResult match;
};
EventMatch events_to_match(std::span<const InstanceEvent> events);

/// Runs the metric with a percentile bootstrap CI and returns a JSON summary:
/// {"metric", "estimate", "ci": [lo, hi], "n", ...}; per-class entries for f1
/// and pq/dq/sq entries for pq.
nlohmann::json evaluate_files(const std::filesystem::path& pred, const std::filesystem::path& gt,
                              const EvalOptions& options);

}  // namespace imilia
