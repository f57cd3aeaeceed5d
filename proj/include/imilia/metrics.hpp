#pragma once

#include "imilia/common.hpp"
#include "imilia/geometry.hpp"

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace imilia {

/// Mann-Whitney AUC: P(score+ > score-) + 0.5 P(tie), from midranks.
double roc_auc(std::span<const double> scores, std::span<const int> labels);

struct PrPoint {
    double threshold = 0.0;
    double recall = 0.0;
    double precision = 0.0;
};

/// One point per distinct score, in descending threshold order. Tied scores
/// enter at the same threshold.
std::vector<PrPoint> precision_recall_curve(std::span<const double> scores, std::span<const int> labels);

/// Step-wise area sum_i (R_i - R_{i-1}) P_i over the curve above.
double average_precision(std::span<const double> scores, std::span<const int> labels);

/// Regularised incomplete beta I_x(a, b) by Lentz's continued fraction.
double regularized_incomplete_beta(double a, double b, double x);
/// CDF of Student's t with `dof` degrees of freedom.
double students_t_cdf(double t, double dof);

struct PearsonResult {
    double r = 0.0;
    double p_value = 1.0;  // two-sided, t-test with n - 2 dof
    std::size_t n = 0;
};
PearsonResult pearson(std::span<const double> x, std::span<const double> y);

/// Linear-interpolation quantile of sorted data, q in [0, 1].
double quantile_sorted(std::span<const double> sorted, double q);

struct BootstrapResult {
    double estimate = 0.0;  // statistic on the full sample
    double lo = 0.0;
    double hi = 0.0;
    double replicate_min = 0.0;
    double replicate_max = 0.0;
};

/// Percentile bootstrap. Replicate i draws from its own generator seeded
/// by (seed, i), so results do not depend on evaluation order.
template <class T, class Statistic>
BootstrapResult bootstrap_ci(std::span<const T> sample, Statistic&& statistic, int n_reps = 1000,
                             double level = 0.95, std::uint64_t seed = 0) {
    if (sample.empty()) throw Error("bootstrap_ci: empty sample");
    if (!(level > 0.0 && level < 1.0)) throw Error("bootstrap_ci: level must lie in (0,1)");
    if (n_reps < 1) throw Error("bootstrap_ci: n_reps must be >= 1");
    BootstrapResult out;
    out.estimate = statistic(sample);
    std::vector<double> reps;
    reps.reserve(static_cast<std::size_t>(n_reps));
    std::vector<T> resample(sample.size());
    for (int i = 0; i < n_reps; ++i) {
        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
        for (auto& v : resample) v = sample[rng.below(sample.size())];
        reps.push_back(statistic(std::span<const T>(resample)));
    }
    std::sort(reps.begin(), reps.end());
    const double tail = (1.0 - level) / 2.0;
    out.lo = quantile_sorted(reps, tail);
    out.hi = quantile_sorted(reps, 1.0 - tail);
    out.replicate_min = reps.front();
    out.replicate_max = reps.back();
    return out;
}

/// Percentile bootstrap for binary-label statistics (AUC, AP): positives and
/// negatives are resampled separately so every replicate keeps both classes.
/// Replicate seeding follows bootstrap_ci.
BootstrapResult stratified_bootstrap_ci(
    std::span<const double> scores, std::span<const int> labels,
    const std::function<double(std::span<const double>, std::span<const int>)>& statistic, int n_reps = 1000,
    double level = 0.95, std::uint64_t seed = 0);

struct MatchedPair {
    std::size_t pred = 0;
    std::size_t gt = 0;
    double iou = 0.0;
};

struct MatchResult {
    std::vector<MatchedPair> matched;
    std::vector<std::size_t> unmatched_pred;
    std::vector<std::size_t> unmatched_gt;
};

/// One-to-one matching over pairs with IoU > 0.5, maximising the number of
/// matches and then their total IoU. `iou` is n_pred x n_gt, row-major.
MatchResult match_from_iou(std::size_t n_pred, std::size_t n_gt, std::span<const double> iou);

/// Rasterises both polygon sets on the pixel grid and matches them.
MatchResult match_instances(std::span<const Polygon> pred, std::span<const Polygon> gt);

struct InstanceQuality {
    double pq = 0.0;
    double dq = 0.0;
    double sq = 0.0;
};
InstanceQuality pq_dq_sq(const MatchResult& match);

/// Classification F1 per class over matched pairs plus detection errors;
/// classes absent from both sides are omitted.
std::map<std::string, double> f1_per_class(std::span<const std::string> pred_labels,
                                           std::span<const std::string> gt_labels, const MatchResult& match);

}  // namespace imilia
