#pragma once

// Reference implementations for the test suites. They are deliberately
// naive (full sorts, pair counting, exhaustive search, per-pixel loops) and
// share no code with the library beyond the data types.

#include "imilia/chowder.hpp"
#include "imilia/episeg.hpp"
#include "imilia/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

namespace oracle {

using imilia::ChowderModel;
using imilia::FeatureMatrix;

/// Top and bottom score multisets of size r from a full sort; short inputs
/// repeat their boundary value.
inline std::pair<std::vector<double>, std::vector<double>> extreme_multisets(std::vector<double> scores, int r) {
    std::sort(scores.begin(), scores.end(), std::greater<>());
    const auto rr = static_cast<std::size_t>(r);
    std::vector<double> top, bottom;
    for (std::size_t i = 0; i < rr; ++i) top.push_back(scores[std::min(i, scores.size() - 1)]);
    std::reverse(scores.begin(), scores.end());
    for (std::size_t i = 0; i < rr; ++i) bottom.push_back(scores[std::min(i, scores.size() - 1)]);
    std::sort(top.begin(), top.end());
    std::sort(bottom.begin(), bottom.end());
    return {top, bottom};
}

/// Per-channel indices of the r largest then r smallest scores, ordering by
/// a stable full sort.
inline std::vector<std::size_t> full_sort_selection(const std::vector<double>& channel, int r) {
    const std::size_t n = channel.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::vector<std::size_t> desc = idx, asc = idx;
    std::stable_sort(desc.begin(), desc.end(), [&](auto a, auto b) { return channel[a] > channel[b]; });
    std::stable_sort(asc.begin(), asc.end(), [&](auto a, auto b) { return channel[a] < channel[b]; });
    std::vector<std::size_t> out;
    for (int i = 0; i < r; ++i) out.push_back(desc[std::min<std::size_t>(i, n - 1)]);
    for (int i = 0; i < r; ++i) out.push_back(asc[std::min<std::size_t>(i, n - 1)]);
    return out;
}

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Eval-mode logit computed from scratch. With `frozen` set, the per-channel
/// tile selection is taken from it instead of being recomputed; the
/// selection actually used is written to `used` when given.
inline double chowder_logit(const ChowderModel& m, const FeatureMatrix& tiles,
                            const std::vector<std::vector<std::size_t>>* frozen = nullptr,
                            std::vector<std::vector<std::size_t>>* used = nullptr) {
    const std::size_t K = m.n_channels(), d = m.input_dim, n = tiles.n_tiles;
    const int r = m.config.n_extremes;
    std::vector<std::vector<double>> channel(K, std::vector<double>(n));
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t t = 0; t < n; ++t) {
            double s = m.params[K * d + k];
            for (std::size_t j = 0; j < d; ++j) s += m.params[k * d + j] * static_cast<double>(tiles.data[t * d + j]);
            channel[k][t] = s;
        }
    std::vector<std::vector<std::size_t>> sel(K);
    std::vector<double> act;
    for (std::size_t k = 0; k < K; ++k) {
        sel[k] = frozen ? (*frozen)[k] : full_sort_selection(channel[k], r);
        for (auto t : sel[k]) act.push_back(channel[k][t]);
    }
    if (used) *used = sel;
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        const auto& L = m.layers[l];
        std::vector<double> next(L.out);
        for (std::size_t o = 0; o < L.out; ++o) {
            double s = m.params[L.bias_offset + o];
            for (std::size_t i = 0; i < L.in; ++i) s += m.params[L.weight_offset + o * L.in + i] * act[i];
            next[o] = l + 1 < m.layers.size() ? logistic(s) : s;
        }
        act = std::move(next);
    }
    return act[0];
}

inline double bce(double logit, int y) {
    const double p = logistic(logit);
    return -(y * std::log(p) + (1 - y) * std::log(1.0 - p));
}

struct GradientCheck {
    double max_rel_error = 0.0;
    std::size_t n_params = 0;
    std::size_t frozen_params = 0;  // perturbations that crossed a selection change
};

/// Central differences of the loss. A perturbation that changes the tile
/// selection crosses a kink of the piecewise-smooth loss; for those the
/// difference is taken with the selection frozen at the unperturbed point,
/// which is the derivative the subgradient convention asks for.
inline GradientCheck check_gradient(const ChowderModel& model, const FeatureMatrix& tiles, int label,
                                    const std::vector<double>& analytic, double eps = 1e-4, double floor = 1e-6) {
    GradientCheck out;
    out.n_params = model.params.size();
    std::vector<std::vector<std::size_t>> base;
    chowder_logit(model, tiles, nullptr, &base);
    ChowderModel m = model;
    for (std::size_t i = 0; i < m.params.size(); ++i) {
        const double orig = m.params[i];
        std::vector<std::vector<std::size_t>> sel_plus, sel_minus;
        m.params[i] = orig + eps;
        double lp = bce(chowder_logit(m, tiles, nullptr, &sel_plus), label);
        m.params[i] = orig - eps;
        double lm = bce(chowder_logit(m, tiles, nullptr, &sel_minus), label);
        if (sel_plus != base || sel_minus != base) {
            ++out.frozen_params;
            m.params[i] = orig + eps;
            lp = bce(chowder_logit(m, tiles, &base), label);
            m.params[i] = orig - eps;
            lm = bce(chowder_logit(m, tiles, &base), label);
        }
        m.params[i] = orig;
        const double numeric = (lp - lm) / (2.0 * eps);
        const double denom = std::max({std::fabs(numeric), std::fabs(analytic[i]), floor});
        out.max_rel_error = std::max(out.max_rel_error, std::fabs(numeric - analytic[i]) / denom);
    }
    return out;
}

/// AUC by counting every positive/negative pair: (2 wins + ties) / (2 P N).
inline double pair_count_auc(const std::vector<double>& s, const std::vector<int>& y) {
    long long twice = 0, pos = 0, neg = 0;
    for (std::size_t i = 0; i < s.size(); ++i) (y[i] ? pos : neg)++;
    for (std::size_t i = 0; i < s.size(); ++i)
        for (std::size_t j = 0; j < s.size(); ++j)
            if (y[i] == 1 && y[j] == 0) twice += s[i] > s[j] ? 2 : (s[i] == s[j] ? 1 : 0);
    return static_cast<double>(twice) / static_cast<double>(2 * pos * neg);
}

/// AP by enumerating thresholds: for each distinct score t (descending),
/// predict positive when score >= t, and add (recall - previous recall) x
/// precision.
inline double enumerate_ap(const std::vector<double>& s, const std::vector<int>& y) {
    std::vector<double> thresholds = s;
    std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
    thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
    const double total_pos = static_cast<double>(std::count(y.begin(), y.end(), 1));
    double ap = 0.0, prev_recall = 0.0;
    for (double t : thresholds) {
        double tp = 0, fp = 0;
        for (std::size_t i = 0; i < s.size(); ++i)
            if (s[i] >= t) (y[i] ? tp : fp) += 1;
        const double recall = tp / total_pos;
        ap += (recall - prev_recall) * (tp / (tp + fp));
        prev_recall = recall;
    }
    return ap;
}

struct Assignment {
    std::size_t count = 0;
    double total_iou = 0.0;
};

/// Best one-to-one matching over pairs with IoU > 0.5 by trying every
/// partial injection: most matches first, then largest IoU sum.
inline Assignment exhaustive_assignment(std::size_t n_pred, std::size_t n_gt, const std::vector<double>& iou) {
    Assignment best;
    std::vector<bool> used(n_gt, false);
    std::function<void(std::size_t, std::size_t, double)> rec = [&](std::size_t p, std::size_t count, double total) {
        if (p == n_pred) {
            if (count > best.count || (count == best.count && total > best.total_iou + 1e-12)) best = {count, total};
            return;
        }
        rec(p + 1, count, total);
        for (std::size_t g = 0; g < n_gt; ++g) {
            const double v = iou[p * n_gt + g];
            if (used[g] || !(v > 0.5)) continue;
            used[g] = true;
            rec(p + 1, count + 1, total + v);
            used[g] = false;
        }
    };
    rec(0, 0, 0.0);
    return best;
}

/// In-epithelium density by visiting every epithelium pixel and counting the
/// class-c centroids that fall inside its unit square.
inline double pixel_recount_density(const std::vector<imilia::CellInstance>& cells, const imilia::BinaryMask& mask,
                                    double mpp_x, double mpp_y, imilia::CellClass c) {
    long long hits = 0, pixels = 0;
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x) {
            if (!mask.values[static_cast<std::size_t>(y) * mask.width + x]) continue;
            ++pixels;
            for (const auto& cell : cells)
                if (cell.cell_class == c && cell.centroid.x >= x && cell.centroid.x < x + 1 && cell.centroid.y >= y &&
                    cell.centroid.y < y + 1)
                    ++hits;
        }
    if (pixels == 0) return 0.0;
    return static_cast<double>(hits) / (static_cast<double>(pixels) * mpp_x * mpp_y);
}

/// Binary-label L2 logistic regression by iteratively reweighted least
/// squares: (X'WX + L) beta = X'W z with the working response z.
inline Eigen::VectorXd irls_binary(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double C, int iters = 100) {
    const auto n = X.rows(), d = X.cols();
    Eigen::MatrixXd Xa(n, d + 1);
    Xa << X, Eigen::VectorXd::Ones(n);
    Eigen::MatrixXd L = Eigen::MatrixXd::Zero(d + 1, d + 1);
    for (Eigen::Index j = 0; j < d; ++j) L(j, j) = 1.0 / C;  // bias unpenalised
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(d + 1);
    for (int it = 0; it < iters; ++it) {
        const Eigen::VectorXd eta = Xa * beta;
        Eigen::VectorXd p(n), w(n), z(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            p[i] = logistic(eta[i]);
            w[i] = std::max(p[i] * (1.0 - p[i]), 1e-12);
            z[i] = eta[i] + (y[i] - p[i]) / w[i];
        }
        const Eigen::MatrixXd A = Xa.transpose() * w.asDiagonal() * Xa + L;
        const Eigen::VectorXd next = A.ldlt().solve(Xa.transpose() * (w.asDiagonal() * z));
        const double step = (next - beta).lpNorm<Eigen::Infinity>();
        beta = next;
        if (step < 1e-14) break;
    }
    return beta;
}

/// Patch means of a mask computed one patch at a time.
inline std::vector<double> patch_means(const imilia::BinaryMask& m, int P) {
    std::vector<double> out;
    for (int r = 0; r + P <= m.height; r += P)
        for (int c = 0; c + P <= m.width; c += P) {
            int ones = 0;
            for (int y = r; y < r + P; ++y)
                for (int x = c; x < c + P; ++x) ones += m.values[static_cast<std::size_t>(y) * m.width + x];
            out.push_back(static_cast<double>(ones) / (P * P));
        }
    return out;
}

}  // namespace oracle
