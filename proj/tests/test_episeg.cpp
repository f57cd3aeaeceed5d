#include "imilia/episeg.hpp"
#include "imilia/metrics.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>

using namespace imilia;

namespace {

BinaryMask random_mask(int w, int h, double p, Rng& rng) {
    BinaryMask m(w, h);
    for (auto& v : m.values) v = rng.uniform() < p ? 1 : 0;
    return m;
}

PatchPairs random_pairs(std::size_t n, std::size_t d, Rng& rng, bool binary, double noise = 1.0) {
    PatchPairs p;
    p.d = d;
    std::vector<double> w(d);
    for (auto& v : w) v = rng.normal();
    std::vector<double> x(d);
    for (std::size_t i = 0; i < n; ++i) {
        double z = 0.3;
        for (std::size_t j = 0; j < d; ++j) {
            x[j] = rng.normal();
            z += w[j] * x[j];
        }
        const double prob = 1.0 / (1.0 + std::exp(-z / noise));
        const double y = binary ? (rng.uniform() < prob ? 1.0 : 0.0) : prob;
        p.add(x, y, static_cast<int>(i % 7));
    }
    return p;
}

PatchGrid grid_from(int rows, int cols, std::size_t d, const std::function<float(int, int, std::size_t)>& f) {
    PatchGrid g;
    g.rows = rows;
    g.cols = cols;
    g.embeddings.n_tiles = static_cast<std::size_t>(rows) * cols;
    g.embeddings.d = d;
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            for (std::size_t j = 0; j < d; ++j) g.embeddings.data.push_back(f(r, c, j));
            g.embeddings.tile_ids.push_back("p" + std::to_string(r) + "_" + std::to_string(c));
        }
    return g;
}

}  // namespace

TEST_CASE("pool_mask examples") {
    const auto ones = pool_mask(BinaryMask(28, 28, 1), 14);
    CHECK(ones.rows == 2);
    CHECK(ones.cols == 2);
    for (double v : ones.values) CHECK(v == 1.0);
    for (double v : pool_mask(BinaryMask(28, 28, 0), 14).values) CHECK(v == 0.0);

    BinaryMask quarter(14, 14);
    for (int i = 0; i < 49; ++i) quarter.values[i * 4] = 1;
    CHECK(pool_mask(quarter, 14).values == std::vector<double>{0.25});

    CHECK(pool_mask(BinaryMask(1022, 1022), 14).rows == 73);
    CHECK(pool_mask(BinaryMask(30, 45), 14).cols == 2);
    CHECK(pool_mask(BinaryMask(30, 45), 14).rows == 3);
    CHECK_THROWS_AS(pool_mask(BinaryMask(28, 28), 0), Error);
    CHECK_THROWS_AS(pool_mask(BinaryMask(10, 28), 14), Error);
}

TEST_CASE("pool_mask equals per-patch means on random masks") {
    Rng rng(1);
    for (int trial = 0; trial < 200; ++trial) {
        const int P = 1 + static_cast<int>(rng.below(16));
        const int w = P + static_cast<int>(rng.below(60)), h = P + static_cast<int>(rng.below(60));
        const auto m = random_mask(w, h, rng.uniform(), rng);
        CHECK(pool_mask(m, P).values == oracle::patch_means(m, P));
    }
}

TEST_CASE("fit reaches the gradient tolerance") {
    Rng rng(2);
    for (int trial = 0; trial < 10; ++trial) {
        const auto pairs = random_pairs(200 + rng.below(200), 1 + rng.below(8), rng, trial % 2 == 0);
        for (double C : {1e-3, 1e-2, 1.0, 100.0}) {
            FitReport rep;
            const auto m = fit(pairs, C, &rep);
            CHECK(rep.converged);
            const auto g = episeg_gradient(m.weights, m.bias, pairs, C);
            double mx = 0;
            for (double v : g) mx = std::max(mx, std::fabs(v));
            CHECK(mx < 1e-6);
        }
    }
}

TEST_CASE("objective gradient matches finite differences") {
    Rng rng(3);
    const auto pairs = random_pairs(50, 4, rng, false);
    std::vector<double> w{0.3, -0.2, 0.1, 0.5};
    const double b = -0.4, C = 0.5;
    const auto g = episeg_gradient(w, b, pairs, C);
    for (std::size_t j = 0; j <= w.size(); ++j) {
        auto wp = w, wm = w;
        double bp = b, bm = b;
        if (j < w.size()) {
            wp[j] += 1e-6;
            wm[j] -= 1e-6;
        } else {
            bp += 1e-6;
            bm -= 1e-6;
        }
        const double num = (episeg_objective(wp, bp, pairs, C) - episeg_objective(wm, bm, pairs, C)) / 2e-6;
        CHECK(g[j] == doctest::Approx(num).epsilon(1e-6));
    }
}

TEST_CASE("fit is a minimum under random perturbations") {
    Rng rng(4);
    const auto pairs = random_pairs(300, 5, rng, false);
    const auto m = fit(pairs, 1e-2);
    const double best = episeg_objective(m.weights, m.bias, pairs, 1e-2);
    for (int i = 0; i < 100; ++i) {
        auto w = m.weights;
        for (auto& v : w) v += 0.1 * rng.normal();
        CHECK(episeg_objective(w, m.bias + 0.1 * rng.normal(), pairs, 1e-2) >= best - 1e-9);
    }
}

TEST_CASE("soft-label fit on binary labels equals a binary IRLS fit") {
    Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t d = 1 + rng.below(6);
        const auto pairs = random_pairs(150 + rng.below(150), d, rng, true);
        const double C = std::pow(10.0, -2.0 + static_cast<double>(rng.below(4)));
        const auto m = fit(pairs, C);
        Eigen::MatrixXd X(static_cast<Eigen::Index>(pairs.size()), static_cast<Eigen::Index>(d));
        Eigen::VectorXd y(static_cast<Eigen::Index>(pairs.size()));
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            for (std::size_t j = 0; j < d; ++j) X(i, j) = pairs.x[i * d + j];
            y[i] = pairs.y[i];
        }
        const auto beta = oracle::irls_binary(X, y, C);
        double dist = std::fabs(beta[d] - m.bias);
        for (std::size_t j = 0; j < d; ++j) dist = std::max(dist, std::fabs(beta[j] - m.weights[j]));
        CHECK(dist < 1e-6);
    }
}

TEST_CASE("fit edge cases") {
    PatchPairs sep;
    sep.d = 1;
    sep.add(std::vector<double>{-1.0}, 0.0, 0);
    sep.add(std::vector<double>{1.0}, 1.0, 1);
    const auto m = fit(sep, 1e3);
    CHECK(sigmoid(m.logit(std::vector<double>{1.0})) >= 0.9);

    PatchPairs same;
    same.d = 1;
    same.add(std::vector<double>{-1.0}, 0.3, 0);
    same.add(std::vector<double>{1.0}, 0.3, 1);
    CHECK_THROWS_AS(fit(same, 1e-2), Error);

    PatchPairs bad;
    bad.d = 1;
    bad.add(std::vector<double>{std::nan("")}, 0.0, 0);
    bad.add(std::vector<double>{1.0}, 1.0, 1);
    CHECK_THROWS_AS(fit(bad, 1e-2), Error);
    CHECK(EpiSegModel{}.C == 1e-2);
}

TEST_CASE("select_C") {
    Rng rng(6);
    const auto pairs = random_pairs(300, 3, rng, false);
    const std::vector<double> one{0.5};
    CHECK(select_C(pairs, one, 3, 1).best_C == 0.5);

    // Two informative dims plus many pure-noise dims on few samples: the
    // weakest penalty chases the noise and loses out-of-fold AP.
    PatchPairs noisy;
    noisy.d = 40;
    std::vector<double> x(40);
    for (int i = 0; i < 120; ++i) {
        for (auto& v : x) v = rng.normal();
        const double z = 1.5 * x[0] - 1.0 * x[1];
        const double y = rng.uniform() < 1.0 / (1.0 + std::exp(-z)) ? 1.0 : 0.0;
        noisy.add(x, y, i);
    }
    const std::vector<double> grid{1e-3, 1e-2, 1e-1, 1.0, 1e2, 1e4};
    const auto sel = select_C(noisy, grid, 3, 7);
    CHECK(sel.mean_ap.size() == grid.size());
    CHECK(sel.best_C < grid.back());
    CHECK(sel.mean_ap[std::find(grid.begin(), grid.end(), sel.best_C) - grid.begin()] >= sel.mean_ap.back());
}

TEST_CASE("infer_tile basics") {
    const auto g = grid_from(73, 73, 3, [](int r, int c, std::size_t j) { return static_cast<float>(r - c + j); });
    EpiSegModel zero;
    zero.weights.assign(3, 0.0);
    const auto p = infer_tile(zero, g);
    CHECK(p.rows == 73);
    for (double v : p.values) CHECK(v == 0.5);

    EpiSegModel m;
    m.weights = {1.0, 0.0, 0.0};
    const auto q = infer_tile(m, g);
    CHECK(q.at(10, 0) > q.at(5, 0));

    EpiSegModel wrong;
    wrong.weights = {1.0};
    CHECK_THROWS_AS(infer_tile(wrong, g), Error);
}

TEST_CASE("infer_tile commutes with grid shifts") {
    Rng rng(7);
    const auto base = grid_from(10, 12, 2, [&](int, int, std::size_t) { return static_cast<float>(rng.normal()); });
    EpiSegModel m;
    m.weights = {0.7, -1.1};
    m.bias = 0.2;
    const auto shifted = grid_from(10, 12, 2, [&](int r, int c, std::size_t j) {
        return base.embeddings.data[(static_cast<std::size_t>(r) * 12 + (c + 3) % 12) * 2 + j];
    });
    const auto a = infer_tile(m, base), b = infer_tile(m, shifted);
    for (int r = 0; r < 10; ++r)
        for (int c = 0; c < 12; ++c) CHECK(b.at(r, c) == a.at(r, (c + 3) % 12));
}

TEST_CASE("center crop alignment") {
    CHECK(crop_start(399, 224, 14) == 28);
    CHECK(crop_start(392, 224, 14) == 28);
    CHECK(crop_start(0, 224, 14) == 0);

    const auto g = grid_from(73, 73, 1, [](int r, int c, std::size_t) { return static_cast<float>(r * 100 + c); });
    EpiSegModel m;
    m.weights = {1e-3};
    const auto crop = infer_extreme_tile(m, g);
    CHECK(crop.grid.rows == 16);
    CHECK(crop.grid.cols == 16);
    CHECK(crop.start_row == 28);
    CHECK_FALSE(crop.padded);
    const auto full = infer_tile(m, g);
    CHECK(crop.grid.at(0, 0) == full.at(28, 28));
    CHECK(crop.grid.at(15, 15) == full.at(43, 43));

    const auto uniform = grid_from(73, 73, 1, [](int, int, std::size_t) { return 0.4f; });
    const auto u = infer_extreme_tile(m, uniform);
    for (double v : u.grid.values) CHECK(v == infer_tile(m, uniform).values[0]);
}

TEST_CASE("border tiles are mirrored to a full crop") {
    const auto small = grid_from(40, 73, 1, [](int r, int, std::size_t) { return static_cast<float>(r); });
    EpiSegModel m;
    m.weights = {0.01};
    const auto crop = infer_extreme_tile(m, small);
    CHECK(crop.grid.rows == 16);
    CHECK(crop.padded);
    const auto full = infer_tile(m, small);
    // row 28 + 12 = 40 lies one past the end and reflects onto row 39
    CHECK(crop.grid.at(12, 0) == full.at(39, 28));
}

TEST_CASE("binarize") {
    ProbabilityGrid half{2, 2, {0.5, 0.5, 0.5, 0.5}};
    CHECK(binarize(half).count() == 4u * 14 * 14);
    ProbabilityGrid hot{2, 3, {0.1, 0.9, 0.1, 0.1, 0.1, 0.1}};
    const auto m = binarize(hot, 0.5, 14);
    CHECK(m.width == 42);
    CHECK(m.height == 28);
    CHECK(m.count() == 196u);
    CHECK(m.at(14, 0) == 1);
    CHECK(m.at(27, 13) == 1);
    CHECK(m.at(28, 0) == 0);
    CHECK_THROWS_AS(binarize(hot, 1.0), Error);
}

TEST_CASE("model and patch grid files round-trip") {
    testing::TempDir dir;
    EpiSegModel m;
    m.weights = {0.1, -2.5, 1.0 / 3.0};
    m.bias = 0.7;
    m.C = 0.1;
    save_episeg_model(m, dir / "epi.json");
    const auto back = load_episeg_model(dir / "epi.json");
    CHECK(back.weights == m.weights);
    CHECK(back.bias == m.bias);
    CHECK(back.C == m.C);
    write_text_file(dir / "other.json", "{\"format\": \"something\"}");
    CHECK_THROWS_AS(load_episeg_model(dir / "other.json"), Error);

    const auto g = grid_from(3, 4, 2, [](int r, int c, std::size_t j) { return static_cast<float>(r + c * j); });
    write_patch_grid(g, dir / "grid");
    const auto gb = read_patch_grid(dir / "grid");
    CHECK(gb.rows == 3);
    CHECK(gb.cols == 4);
    CHECK(gb.embeddings.data == g.embeddings.data);
}

TEST_CASE("pairs from a tile follow the pooled labels") {
    const auto g = grid_from(2, 2, 1, [](int r, int c, std::size_t) { return static_cast<float>(r * 2 + c); });
    BinaryMask mask(28, 28);
    for (int y = 0; y < 14; ++y)
        for (int x = 0; x < 7; ++x) mask.at(x, y) = 1;
    PatchPairs pairs;
    pairs.add_tile(g, pool_mask(mask, 14), 3);
    REQUIRE(pairs.size() == 4);
    CHECK(pairs.y[0] == 0.5);
    CHECK(pairs.y[1] == 0.0);
    CHECK(pairs.x[3] == 3.0);
    CHECK(pairs.group[2] == 3);
}
