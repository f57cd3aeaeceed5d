#include "imilia/episeg.hpp"

#include "imilia/chowder.hpp"
#include "imilia/metrics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace imilia {

namespace fs = std::filesystem;

PatchLabelGrid pool_mask(const BinaryMask& mask, int patch_size) {
    if (patch_size <= 0) throw Error("pool_mask: patch size must be positive");
    if (mask.width < patch_size || mask.height < patch_size)
        throw Error(fmt::format("pool_mask: {}x{} mask is smaller than one {}px patch", mask.width, mask.height,
                                patch_size));
    PatchLabelGrid grid;
    grid.rows = mask.height / patch_size;
    grid.cols = mask.width / patch_size;
    grid.patch_size = patch_size;
    grid.values.resize(static_cast<std::size_t>(grid.rows) * grid.cols);
    const double area = static_cast<double>(patch_size) * patch_size;
    for (int r = 0; r < grid.rows; ++r)
        for (int c = 0; c < grid.cols; ++c) {
            std::size_t on = 0;
            for (int y = r * patch_size; y < (r + 1) * patch_size; ++y)
                for (int x = c * patch_size; x < (c + 1) * patch_size; ++x) on += mask.at(x, y) ? 1 : 0;
            grid.values[static_cast<std::size_t>(r) * grid.cols + c] = static_cast<double>(on) / area;
        }
    return grid;
}

PatchGrid read_patch_grid(const fs::path& path) {
    auto container = read_feature_container(path);
    PatchGrid grid;
    try {
        grid.rows = container.attributes.at("grid_rows").get<int>();
        grid.cols = container.attributes.at("grid_cols").get<int>();
    } catch (const nlohmann::json::exception&) {
        throw Error(fmt::format("'{}': patch-embedding container lacks grid_rows/grid_cols", path.string()));
    }
    if (grid.rows <= 0 || grid.cols <= 0 ||
        static_cast<std::size_t>(grid.rows) * static_cast<std::size_t>(grid.cols) != container.matrix.n_tiles)
        throw Error(fmt::format("'{}': grid {}x{} does not match {} patch rows", path.string(), grid.rows, grid.cols,
                                container.matrix.n_tiles));
    grid.embeddings = std::move(container.matrix);
    return grid;
}

void write_patch_grid(const PatchGrid& grid, const fs::path& base, nlohmann::json attributes) {
    if (!attributes.is_object()) attributes = nlohmann::json::object();
    attributes["grid_rows"] = grid.rows;
    attributes["grid_cols"] = grid.cols;
    write_features(base, FeatureContainer{grid.embeddings, std::move(attributes)});
}

void PatchPairs::add(std::span<const double> features, double label, int group_id) {
    if (d == 0) d = features.size();
    if (features.size() != d) throw Error("patch pairs: inconsistent embedding dimension");
    x.insert(x.end(), features.begin(), features.end());
    y.push_back(label);
    group.push_back(group_id);
}

void PatchPairs::add_tile(const PatchGrid& grid, const PatchLabelGrid& labels, int group_id) {
    if (grid.rows != labels.rows || grid.cols != labels.cols)
        throw Error(fmt::format("patch grid {}x{} does not match label grid {}x{}", grid.rows, grid.cols, labels.rows,
                                labels.cols));
    std::vector<double> row(grid.embeddings.d);
    for (std::size_t i = 0; i < grid.embeddings.n_tiles; ++i) {
        const auto src = grid.embeddings.row(i);
        std::copy(src.begin(), src.end(), row.begin());
        add(row, labels.values[i], group_id);
    }
}

PatchPairs PatchPairs::subset(std::span<const std::size_t> rows) const {
    PatchPairs out;
    out.d = d;
    for (std::size_t r : rows) {
        out.x.insert(out.x.end(), x.begin() + static_cast<std::ptrdiff_t>(r * d),
                     x.begin() + static_cast<std::ptrdiff_t>((r + 1) * d));
        out.y.push_back(y[r]);
        out.group.push_back(group[r]);
    }
    return out;
}

double EpiSegModel::logit(std::span<const double> x) const {
    double z = bias;
    for (std::size_t j = 0; j < weights.size(); ++j) z += weights[j] * x[j];
    return z;
}

double EpiSegModel::logit(std::span<const float> x) const {
    double z = bias;
    for (std::size_t j = 0; j < weights.size(); ++j) z += weights[j] * static_cast<double>(x[j]);
    return z;
}

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMatrix> as_matrix(const PatchPairs& pairs) {
    return {pairs.x.data(), static_cast<Eigen::Index>(pairs.size()), static_cast<Eigen::Index>(pairs.d)};
}

/// log(1 + e^z) without overflow.
double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::fabs(z))); }

double objective_at(const Eigen::VectorXd& z, const Eigen::VectorXd& w, const PatchPairs& pairs, double C) {
    const double n = static_cast<double>(pairs.size());
    double loss = 0.0;
    for (Eigen::Index i = 0; i < z.size(); ++i) loss += softplus(z[i]) - pairs.y[static_cast<std::size_t>(i)] * z[i];
    return loss / n + w.squaredNorm() / (2.0 * C * n);
}

void validate_pairs(const PatchPairs& pairs) {
    if (pairs.size() < 2) throw Error("episeg fit: need at least 2 pairs");
    if (pairs.x.size() != pairs.size() * pairs.d) throw Error("episeg fit: malformed pair matrix");
    for (double v : pairs.x)
        if (!std::isfinite(v)) throw Error("episeg fit: non-finite patch embedding");
    for (double v : pairs.y)
        if (!(v >= 0.0 && v <= 1.0)) throw Error("episeg fit: labels must lie in [0,1]");
    const auto [lo, hi] = std::minmax_element(pairs.y.begin(), pairs.y.end());
    if (*lo == *hi) throw Error("episeg fit: all labels are identical");
}

}  // namespace

double episeg_objective(std::span<const double> weights, double bias, const PatchPairs& pairs, double C) {
    const Eigen::Map<const Eigen::VectorXd> w(weights.data(), static_cast<Eigen::Index>(weights.size()));
    const Eigen::VectorXd z = (as_matrix(pairs) * w).array() + bias;
    return objective_at(z, w, pairs, C);
}

std::vector<double> episeg_gradient(std::span<const double> weights, double bias, const PatchPairs& pairs, double C) {
    const auto X = as_matrix(pairs);
    const Eigen::Map<const Eigen::VectorXd> w(weights.data(), static_cast<Eigen::Index>(weights.size()));
    const Eigen::VectorXd z = (X * w).array() + bias;
    const double n = static_cast<double>(pairs.size());
    Eigen::VectorXd resid(z.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) resid[i] = sigmoid(z[i]) - pairs.y[static_cast<std::size_t>(i)];
    const Eigen::VectorXd gw = X.transpose() * resid / n + w / (C * n);
    std::vector<double> g(gw.data(), gw.data() + gw.size());
    g.push_back(resid.sum() / n);
    return g;
}

EpiSegModel fit(const PatchPairs& pairs, double C, FitReport* report, const FitOptions& options) {
    if (!(C > 0.0)) throw Error("episeg fit: C must be positive");
    validate_pairs(pairs);
    const auto X = as_matrix(pairs);
    const auto d = static_cast<Eigen::Index>(pairs.d);
    const auto N = static_cast<Eigen::Index>(pairs.size());
    const double n = static_cast<double>(N);

    Eigen::VectorXd w = Eigen::VectorXd::Zero(d);
    double b = 0.0;
    Eigen::VectorXd z = Eigen::VectorXd::Zero(N);
    double f = objective_at(z, w, pairs, C);
    FitReport rep;
    Eigen::VectorXd p(N), s(N);
    int polish_steps = 2;
    for (rep.iterations = 0;; ++rep.iterations) {
        for (Eigen::Index i = 0; i < N; ++i) {
            p[i] = sigmoid(z[i]);
            s[i] = p[i] * (1.0 - p[i]);
        }
        Eigen::VectorXd resid = p;
        for (Eigen::Index i = 0; i < N; ++i) resid[i] -= pairs.y[static_cast<std::size_t>(i)];
        Eigen::VectorXd grad(d + 1);
        grad.head(d) = X.transpose() * resid / n + w / (C * n);
        grad[d] = resid.sum() / n;
        rep.gradient_max_norm = grad.cwiseAbs().maxCoeff();
        // Newton converges quadratically near the optimum, so two extra
        // steps past the tolerance cost little and pin the parameters down
        // far tighter than the gradient test alone.
        rep.converged = rep.gradient_max_norm < options.gradient_tolerance;
        if (rep.converged) {
            if (polish_steps-- == 0 || rep.gradient_max_norm < 1e-14) break;
        }
        if (rep.iterations >= options.max_iterations) break;

        Eigen::MatrixXd H(d + 1, d + 1);
        const RowMatrix Xs = X.array().colwise() * s.array().sqrt();
        H.topLeftCorner(d, d).noalias() = Xs.transpose() * Xs / n;
        H.topLeftCorner(d, d).diagonal().array() += 1.0 / (C * n);
        const Eigen::VectorXd hb = X.transpose() * s / n;
        H.block(0, d, d, 1) = hb;
        H.block(d, 0, 1, d) = hb.transpose();
        H(d, d) = s.sum() / n;

        Eigen::LDLT<Eigen::MatrixXd> ldlt(H);
        Eigen::VectorXd step = ldlt.solve(-grad);
        if (ldlt.info() != Eigen::Success || !step.allFinite() || grad.dot(step) >= 0.0) step = -grad;

        // Backtracking (Armijo) line search.
        double t = 1.0;
        const double slope = grad.dot(step);
        Eigen::VectorXd w_new, z_new;
        double b_new = b, f_new = f;
        for (int ls = 0; ls < 60; ++ls) {
            w_new = w + t * step.head(d);
            b_new = b + t * step[d];
            z_new = (X * w_new).array() + b_new;
            f_new = objective_at(z_new, w_new, pairs, C);
            if (f_new <= f + 1e-4 * t * slope) break;
            t *= 0.5;
        }
        if (!(f_new <= f)) break;  // no further progress possible in floating point
        w = std::move(w_new);
        b = b_new;
        z = std::move(z_new);
        f = f_new;
    }
    rep.objective = f;
    if (!rep.converged)
        spdlog::warn("episeg fit: stopped after {} iterations with gradient max-norm {:.3g}", rep.iterations,
                     rep.gradient_max_norm);
    if (report) *report = rep;

    EpiSegModel model;
    model.weights.assign(w.data(), w.data() + w.size());
    model.bias = b;
    model.C = C;
    return model;
}

CSelection select_C(const PatchPairs& pairs, std::span<const double> grid, int n_folds, std::uint64_t seed) {
    if (grid.empty()) throw Error("select_C: empty grid");
    if (n_folds < 2) throw Error("select_C: need at least 2 folds");
    validate_pairs(pairs);

    // Fold per pair: whole groups when there are enough of them.
    std::vector<int> fold(pairs.size());
    Rng rng(mix_seed(seed, 0xC5E1));
    std::vector<int> groups(pairs.group.begin(), pairs.group.end());
    std::sort(groups.begin(), groups.end());
    groups.erase(std::unique(groups.begin(), groups.end()), groups.end());
    if (groups.size() >= static_cast<std::size_t>(n_folds)) {
        rng.shuffle(groups);
        std::map<int, int> group_fold;
        for (std::size_t i = 0; i < groups.size(); ++i) group_fold[groups[i]] = static_cast<int>(i % n_folds);
        for (std::size_t i = 0; i < pairs.size(); ++i) fold[i] = group_fold[pairs.group[i]];
    } else {
        std::vector<std::size_t> order(pairs.size());
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order);
        for (std::size_t i = 0; i < order.size(); ++i) fold[order[i]] = static_cast<int>(i % n_folds);
    }

    std::vector<double> sorted_grid(grid.begin(), grid.end());
    for (double c : sorted_grid)
        if (!(c > 0.0)) throw Error("select_C: grid values must be positive");
    std::sort(sorted_grid.begin(), sorted_grid.end());

    CSelection out;
    out.grid = sorted_grid;
    double best = -std::numeric_limits<double>::infinity();
    for (double C : sorted_grid) {
        double ap_sum = 0.0;
        int scored = 0;
        for (int f = 0; f < n_folds; ++f) {
            std::vector<std::size_t> train_rows, test_rows;
            for (std::size_t i = 0; i < pairs.size(); ++i) (fold[i] == f ? test_rows : train_rows).push_back(i);
            if (test_rows.empty()) continue;
            std::vector<int> labels;
            for (std::size_t i : test_rows) labels.push_back(pairs.y[i] >= 0.5 ? 1 : 0);
            if (std::find(labels.begin(), labels.end(), 1) == labels.end()) continue;
            const auto model = fit(pairs.subset(train_rows), C);
            std::vector<double> scores;
            for (std::size_t i : test_rows)
                scores.push_back(model.logit(std::span<const double>(pairs.x.data() + i * pairs.d, pairs.d)));
            ap_sum += average_precision(scores, labels);
            ++scored;
        }
        if (scored == 0) throw Error("select_C: no fold has positive patches");
        const double mean_ap = ap_sum / scored;
        out.mean_ap.push_back(mean_ap);
        if (mean_ap > best) {
            best = mean_ap;
            out.best_C = C;
        }
    }
    return out;
}

ProbabilityGrid infer_tile(const EpiSegModel& model, const PatchGrid& grid) {
    if (grid.embeddings.d != model.weights.size())
        throw Error(fmt::format("episeg: embedding dimension {} does not match model dimension {}", grid.embeddings.d,
                                model.weights.size()));
    if (static_cast<std::size_t>(grid.rows) * static_cast<std::size_t>(grid.cols) != grid.embeddings.n_tiles)
        throw Error("episeg: patch grid dims do not match the embedding count");
    ProbabilityGrid out;
    out.rows = grid.rows;
    out.cols = grid.cols;
    out.values.resize(grid.embeddings.n_tiles);
    for (std::size_t i = 0; i < grid.embeddings.n_tiles; ++i) out.values[i] = sigmoid(model.logit(grid.embeddings.row(i)));
    return out;
}

int crop_start(int offset_px, int tile_size_px, int patch_size_px) {
    const int n = tile_size_px / patch_size_px;
    const int guess = offset_px / patch_size_px;
    int best_start = guess - 1;
    long best_overlap = -1;
    for (int s = guess - 1; s <= guess + 1; ++s) {
        const long lo = std::max<long>(static_cast<long>(s) * patch_size_px, offset_px);
        const long hi = std::min<long>(static_cast<long>(s + n) * patch_size_px, offset_px + tile_size_px);
        const long overlap = std::max(0L, hi - lo);
        if (overlap > best_overlap) {
            best_overlap = overlap;
            best_start = s;
        }
    }
    return best_start;
}

namespace {

/// Symmetric reflection of an index into [0, n).
int reflect(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * n;
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - 1 - i;
}

}  // namespace

CroppedTile infer_extreme_tile(const EpiSegModel& model, const PatchGrid& expanded, const ExpansionGeometry& g) {
    if (g.patch_size_px <= 0 || g.tile_size_px < g.patch_size_px)
        throw Error("episeg: invalid expansion geometry");
    const ProbabilityGrid full = infer_tile(model, expanded);
    const int n = g.tile_size_px / g.patch_size_px;
    CroppedTile out;
    out.start_row = crop_start(g.tile_offset_y_px, g.tile_size_px, g.patch_size_px);
    out.start_col = crop_start(g.tile_offset_x_px, g.tile_size_px, g.patch_size_px);
    out.grid.rows = n;
    out.grid.cols = n;
    out.grid.values.resize(static_cast<std::size_t>(n) * n);
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) {
            const int rr = out.start_row + r, cc = out.start_col + c;
            if (rr < 0 || cc < 0 || rr >= full.rows || cc >= full.cols) out.padded = true;
            out.grid.values[static_cast<std::size_t>(r) * n + c] = full.at(reflect(rr, full.rows), reflect(cc, full.cols));
        }
    if (out.padded) spdlog::warn("episeg: tile context truncated at the slide border, mirrored to fill the crop");
    return out;
}

BinaryMask binarize(const ProbabilityGrid& grid, double threshold, int patch_size) {
    if (!(threshold > 0.0 && threshold < 1.0)) throw Error("binarize: threshold must lie in (0,1)");
    if (patch_size <= 0) throw Error("binarize: patch size must be positive");
    BinaryMask mask(grid.cols * patch_size, grid.rows * patch_size);
    for (int r = 0; r < grid.rows; ++r)
        for (int c = 0; c < grid.cols; ++c) {
            if (grid.at(r, c) < threshold) continue;
            for (int y = r * patch_size; y < (r + 1) * patch_size; ++y)
                for (int x = c * patch_size; x < (c + 1) * patch_size; ++x) mask.at(x, y) = 1;
        }
    return mask;
}

void save_episeg_model(const EpiSegModel& model, const fs::path& path) {
    const nlohmann::json j = {{"format", "imilia-episeg"}, {"version", 1},          {"C", model.C},
                              {"bias", model.bias},        {"d", model.weights.size()}, {"weights", model.weights}};
    write_text_file(path, j.dump(2) + "\n");
}

EpiSegModel load_episeg_model(const fs::path& path) {
    try {
        const auto j = nlohmann::json::parse(read_text_file(path));
        if (j.value("format", "") != "imilia-episeg") throw Error("not an EpiSeg model");
        EpiSegModel m;
        m.C = j.at("C").get<double>();
        m.bias = j.at("bias").get<double>();
        m.weights = j.at("weights").get<std::vector<double>>();
        if (m.weights.size() != j.at("d").get<std::size_t>()) throw Error("weight count does not match d");
        if (!(m.C > 0.0)) throw Error("C must be positive");
        for (double w : m.weights)
            if (!std::isfinite(w)) throw Error("non-finite weight");
        if (!std::isfinite(m.bias)) throw Error("non-finite bias");
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw Error(fmt::format("'{}': {}", path.string(), e.what()));
    } catch (const Error& e) {
        throw Error(fmt::format("'{}': {}", path.string(), e.what()));
    }
}

}  // namespace imilia
