#include "imilia/metrics.hpp"

#include <cmath>
#include <limits>
#include <numeric>

#include <fmt/format.h>

namespace imilia {

namespace {

void check_binary(std::span<const double> scores, std::span<const int> labels, std::string_view what) {
    if (scores.size() != labels.size()) throw Error(fmt::format("{}: scores and labels differ in length", what));
    for (int l : labels)
        if (l != 0 && l != 1) throw Error(fmt::format("{}: labels must be 0 or 1", what));
}

}  // namespace

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
    check_binary(scores, labels, "roc_auc");
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // Twice the midrank keeps everything integral: ranks are 1-based, a tie
    // group spanning positions [i, j) gets midrank (i + 1 + j) / 2.
    std::uint64_t n_pos = 0, rank_sum_x2 = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const std::uint64_t midrank_x2 = i + 1 + j;
        for (std::size_t k = i; k < j; ++k)
            if (labels[order[k]] == 1) {
                ++n_pos;
                rank_sum_x2 += midrank_x2;
            }
        i = j;
    }
    const std::uint64_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) throw Error("roc_auc: both classes must be present");
    // U = rank_sum - n_pos (n_pos + 1) / 2; the doubled numerator is exact.
    const std::uint64_t u_x2 = rank_sum_x2 - n_pos * (n_pos + 1);
    return static_cast<double>(u_x2) / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

std::vector<PrPoint> precision_recall_curve(std::span<const double> scores, std::span<const int> labels) {
    check_binary(scores, labels, "precision_recall_curve");
    const std::size_t n = scores.size();
    const auto total_pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
    if (total_pos == 0) throw Error("average_precision: no positive labels");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    std::vector<PrPoint> curve;
    std::size_t tp = 0, seen = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) {
            tp += static_cast<std::size_t>(labels[order[j]]);
            ++j;
        }
        seen = j;
        curve.push_back({scores[order[i]], static_cast<double>(tp) / static_cast<double>(total_pos),
                         static_cast<double>(tp) / static_cast<double>(seen)});
        i = j;
    }
    return curve;
}

double average_precision(std::span<const double> scores, std::span<const int> labels) {
    const auto curve = precision_recall_curve(scores, labels);
    double ap = 0.0, prev_recall = 0.0;
    for (const auto& p : curve) {
        ap += (p.recall - prev_recall) * p.precision;
        prev_recall = p.recall;
    }
    return ap;
}

namespace {

double beta_continued_fraction(double a, double b, double x) {
    constexpr int kMaxIter = 500;
    constexpr double kEps = 1e-16;
    constexpr double kTiny = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < kEps) return h;
    }
    return h;
}

}  // namespace

double regularized_incomplete_beta(double a, double b, double x) {
    if (!(a > 0.0) || !(b > 0.0)) throw Error("incomplete beta: a and b must be positive");
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double log_front =
        std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(log_front);
    // The continued fraction converges fast for x < (a + 1) / (a + b + 2);
    // use the symmetry I_x(a,b) = 1 - I_{1-x}(b,a) otherwise.
    if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
    return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double students_t_cdf(double t, double dof) {
    if (!(dof > 0.0)) throw Error("students_t_cdf: dof must be positive");
    if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
    const double x = dof / (dof + t * t);
    const double tail = 0.5 * regularized_incomplete_beta(dof / 2.0, 0.5, x);  // P(T > |t|)
    return t >= 0.0 ? 1.0 - tail : tail;
}

PearsonResult pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw Error("pearson: x and y differ in length");
    const std::size_t n = x.size();
    if (n < 3) throw Error("pearson: need at least 3 points");
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (sxx == 0.0 || syy == 0.0) throw Error("pearson: zero variance");
    PearsonResult out;
    out.n = n;
    out.r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
    const double dof = static_cast<double>(n - 2);
    const double one_minus_r2 = (1.0 - out.r) * (1.0 + out.r);
    if (one_minus_r2 <= 0.0) {
        out.p_value = 0.0;
    } else {
        // Two-sided p = I_{dof/(dof+t^2)}(dof/2, 1/2) with t^2 = dof r^2 / (1 - r^2).
        const double t2 = dof * out.r * out.r / one_minus_r2;
        out.p_value = regularized_incomplete_beta(dof / 2.0, 0.5, dof / (dof + t2));
    }
    return out;
}

double quantile_sorted(std::span<const double> sorted, double q) {
    if (sorted.empty()) throw Error("quantile of an empty sample");
    const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

namespace {

/// Hungarian algorithm (potentials, O(n^2 m)) minimising cost over an
/// n x m matrix with n <= m. Returns the column assigned to each row.
std::vector<std::size_t> hungarian(std::size_t n, std::size_t m, const std::vector<double>& cost) {
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(m + 1, inf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = cost[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<std::size_t> assignment(n, 0);
    for (std::size_t j = 1; j <= m; ++j)
        if (p[j] != 0) assignment[p[j] - 1] = j - 1;
    return assignment;
}

std::size_t find_root(std::vector<std::size_t>& parent, std::size_t i) {
    while (parent[i] != i) i = parent[i] = parent[parent[i]];
    return i;
}

}  // namespace

MatchResult match_from_iou(std::size_t n_pred, std::size_t n_gt, std::span<const double> iou) {
    if (iou.size() != n_pred * n_gt) throw Error("match_from_iou: IoU matrix has the wrong size");
    struct Edge {
        std::size_t pred, gt;
        double iou;
    };
    std::vector<Edge> edges;
    for (std::size_t i = 0; i < n_pred; ++i)
        for (std::size_t j = 0; j < n_gt; ++j)
            if (iou[i * n_gt + j] > 0.5) edges.push_back({i, j, iou[i * n_gt + j]});

    // Components of the candidate graph; nodes 0..n_pred-1 are predictions.
    std::vector<std::size_t> parent(n_pred + n_gt);
    std::iota(parent.begin(), parent.end(), 0);
    for (const auto& e : edges) parent[find_root(parent, e.pred)] = find_root(parent, n_pred + e.gt);

    std::map<std::size_t, std::vector<Edge>> components;
    for (const auto& e : edges) components[find_root(parent, e.pred)].push_back(e);

    MatchResult out;
    std::vector<char> pred_used(n_pred, 0), gt_used(n_gt, 0);
    for (auto& [root, comp] : components) {
        if (comp.size() == 1) {
            out.matched.push_back({comp[0].pred, comp[0].gt, comp[0].iou});
            continue;
        }
        std::vector<std::size_t> rows, cols;
        for (const auto& e : comp) {
            rows.push_back(e.pred);
            cols.push_back(e.gt);
        }
        std::sort(rows.begin(), rows.end());
        rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
        std::sort(cols.begin(), cols.end());
        cols.erase(std::unique(cols.begin(), cols.end()), cols.end());
        const bool transpose = rows.size() > cols.size();
        const std::size_t n = transpose ? cols.size() : rows.size();
        const std::size_t m = transpose ? rows.size() : cols.size();
        // Each match is worth more than any total IoU, so cardinality comes first.
        const double big = static_cast<double>(n + 1);
        std::vector<double> cost(n * m, 0.0);
        for (const auto& e : comp) {
            const auto r = static_cast<std::size_t>(std::lower_bound(rows.begin(), rows.end(), e.pred) - rows.begin());
            const auto c = static_cast<std::size_t>(std::lower_bound(cols.begin(), cols.end(), e.gt) - cols.begin());
            cost[transpose ? c * m + r : r * m + c] = -(big + e.iou);
        }
        const auto assignment = hungarian(n, m, cost);
        for (std::size_t a = 0; a < n; ++a) {
            const std::size_t pi = transpose ? rows[assignment[a]] : rows[a];
            const std::size_t gi = transpose ? cols[a] : cols[assignment[a]];
            const double v = iou[pi * n_gt + gi];
            if (v > 0.5) out.matched.push_back({pi, gi, v});
        }
    }
    std::sort(out.matched.begin(), out.matched.end(),
              [](const MatchedPair& a, const MatchedPair& b) { return a.pred < b.pred; });
    for (const auto& m : out.matched) {
        pred_used[m.pred] = 1;
        gt_used[m.gt] = 1;
    }
    for (std::size_t i = 0; i < n_pred; ++i)
        if (!pred_used[i]) out.unmatched_pred.push_back(i);
    for (std::size_t j = 0; j < n_gt; ++j)
        if (!gt_used[j]) out.unmatched_gt.push_back(j);
    return out;
}

MatchResult match_instances(std::span<const Polygon> pred, std::span<const Polygon> gt) {
    std::vector<std::vector<std::uint64_t>> pred_px, gt_px;
    std::vector<BoundingBox> pred_box, gt_box;
    for (const auto& p : pred) {
        pred_px.push_back(rasterize(p));
        pred_box.push_back(bounding_box(p));
    }
    for (const auto& g : gt) {
        gt_px.push_back(rasterize(g));
        gt_box.push_back(bounding_box(g));
    }
    std::vector<double> iou(pred.size() * gt.size(), 0.0);
    for (std::size_t i = 0; i < pred.size(); ++i)
        for (std::size_t j = 0; j < gt.size(); ++j) {
            const auto& a = pred_box[i];
            const auto& b = gt_box[j];
            if (a.max_x < b.min_x || b.max_x < a.min_x || a.max_y < b.min_y || b.max_y < a.min_y) continue;
            iou[i * gt.size() + j] = pixel_iou(pred_px[i], gt_px[j]);
        }
    return match_from_iou(pred.size(), gt.size(), iou);
}

InstanceQuality pq_dq_sq(const MatchResult& match) {
    const double tp = static_cast<double>(match.matched.size());
    const double fp = static_cast<double>(match.unmatched_pred.size());
    const double fn = static_cast<double>(match.unmatched_gt.size());
    InstanceQuality q;
    const double denom = tp + 0.5 * fp + 0.5 * fn;
    q.dq = denom > 0.0 ? tp / denom : 0.0;
    double iou_sum = 0.0;
    for (const auto& m : match.matched) iou_sum += m.iou;
    q.sq = tp > 0.0 ? iou_sum / tp : 0.0;
    q.pq = q.dq * q.sq;
    return q;
}

std::map<std::string, double> f1_per_class(std::span<const std::string> pred_labels,
                                           std::span<const std::string> gt_labels, const MatchResult& match) {
    struct Counts {
        std::size_t tp = 0, fp = 0, fn = 0;
    };
    std::map<std::string, Counts> counts;
    for (const auto& m : match.matched) {
        const auto& p = pred_labels[m.pred];
        const auto& g = gt_labels[m.gt];
        if (p == g) {
            ++counts[p].tp;
        } else {
            ++counts[p].fp;
            ++counts[g].fn;
        }
    }
    for (std::size_t i : match.unmatched_pred) ++counts[pred_labels[i]].fp;
    for (std::size_t j : match.unmatched_gt) ++counts[gt_labels[j]].fn;
    std::map<std::string, double> f1;
    for (const auto& [cls, c] : counts) {
        const double denom = 2.0 * static_cast<double>(c.tp) + static_cast<double>(c.fp + c.fn);
        f1[cls] = denom > 0.0 ? 2.0 * static_cast<double>(c.tp) / denom : 0.0;
    }
    return f1;
}

BootstrapResult stratified_bootstrap_ci(
    std::span<const double> scores, std::span<const int> labels,
    const std::function<double(std::span<const double>, std::span<const int>)>& statistic, int n_reps, double level,
    std::uint64_t seed) {
    check_binary(scores, labels, "stratified_bootstrap_ci");
    if (!(level > 0.0 && level < 1.0)) throw Error("stratified_bootstrap_ci: level must lie in (0,1)");
    if (n_reps < 1) throw Error("stratified_bootstrap_ci: n_reps must be >= 1");
    std::vector<double> pos, neg;
    for (std::size_t i = 0; i < scores.size(); ++i) (labels[i] == 1 ? pos : neg).push_back(scores[i]);
    if (pos.empty() || neg.empty()) throw Error("stratified_bootstrap_ci: both classes must be present");

    std::vector<int> rep_labels(pos.size(), 1);
    rep_labels.resize(scores.size(), 0);
    std::vector<double> rep_scores(scores.size());
    BootstrapResult out;
    out.estimate = statistic(scores, labels);
    std::vector<double> reps;
    reps.reserve(static_cast<std::size_t>(n_reps));
    for (int i = 0; i < n_reps; ++i) {
        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
        for (std::size_t k = 0; k < pos.size(); ++k) rep_scores[k] = pos[rng.below(pos.size())];
        for (std::size_t k = 0; k < neg.size(); ++k) rep_scores[pos.size() + k] = neg[rng.below(neg.size())];
        reps.push_back(statistic(rep_scores, rep_labels));
    }
    std::sort(reps.begin(), reps.end());
    const double tail = (1.0 - level) / 2.0;
    out.lo = quantile_sorted(reps, tail);
    out.hi = quantile_sorted(reps, 1.0 - tail);
    out.replicate_min = reps.front();
    out.replicate_max = reps.back();
    return out;
}

}  // namespace imilia
