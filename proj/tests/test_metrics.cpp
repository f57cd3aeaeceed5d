#include "imilia/metrics.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <boost/math/distributions/students_t.hpp>
#include <boost/math/special_functions/beta.hpp>

#include <cmath>
#include <numeric>

using namespace imilia;

TEST_CASE("auc worked examples") {
    const std::vector<double> s{0.1, 0.4, 0.35, 0.8};
    const std::vector<int> y{0, 0, 1, 1};
    CHECK(roc_auc(s, y) == 0.75);
    const std::vector<double> sep{0.1, 0.2, 0.9, 0.95};
    CHECK(roc_auc(sep, y) == 1.0);
    const std::vector<double> flat(4, 0.3);
    CHECK(roc_auc(flat, y) == 0.5);
    const std::vector<int> single{1, 1, 1, 1};
    CHECK_THROWS_AS(roc_auc(s, single), Error);
}

TEST_CASE("auc equals pair counting exactly") {
    Rng rng(1);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 2 + rng.below(49);
        std::vector<double> s(n);
        std::vector<int> y(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = static_cast<double>(rng.below(8));  // many ties
            y[i] = static_cast<int>(rng.below(2));
        }
        y[0] = 0;
        y[1] = 1;
        CHECK(roc_auc(s, y) == oracle::pair_count_auc(s, y));
    }
}

TEST_CASE("auc invariances") {
    Rng rng(2);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 10 + rng.below(40);
        std::vector<double> s(n), t(n), neg(n);
        std::vector<int> y(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = rng.normal();
            t[i] = std::exp(3.0 * s[i]) + 7.0;
            neg[i] = -s[i];
            y[i] = static_cast<int>(rng.below(2));
        }
        y[0] = 0;
        y[1] = 1;
        CHECK(roc_auc(s, y) == roc_auc(t, y));
        CHECK(roc_auc(s, y) + roc_auc(neg, y) == doctest::Approx(1.0).epsilon(1e-15));
    }
}

TEST_CASE("average precision examples and oracle") {
    const std::vector<double> s{0.2, 0.9};
    const std::vector<int> y{1, 0};
    CHECK(average_precision(s, y) == 0.5);
    const std::vector<double> ranked{0.9, 0.8, 0.1};
    const std::vector<int> ry{1, 1, 0};
    CHECK(average_precision(ranked, ry) == 1.0);
    const std::vector<int> none{0, 0};
    CHECK_THROWS_AS(average_precision(s, none), Error);

    Rng rng(3);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 1 + rng.below(20);
        std::vector<double> sc(n);
        std::vector<int> lab(n);
        for (std::size_t i = 0; i < n; ++i) {
            sc[i] = static_cast<double>(rng.below(6));
            lab[i] = static_cast<int>(rng.below(2));
        }
        lab[0] = 1;
        CHECK(average_precision(sc, lab) == doctest::Approx(oracle::enumerate_ap(sc, lab)).epsilon(1e-14));
    }
}

TEST_CASE("average precision is one exactly when positives outrank negatives") {
    Rng rng(4);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 4 + rng.below(20);
        std::vector<double> s(n);
        std::vector<int> y(n);
        for (std::size_t i = 0; i < n; ++i) {
            y[i] = static_cast<int>(rng.below(2));
            s[i] = rng.uniform();
        }
        y[0] = 1;
        y[1] = 0;
        double min_pos = 2, max_neg = -1;
        for (std::size_t i = 0; i < n; ++i) (y[i] ? min_pos = std::min(min_pos, s[i]) : max_neg = std::max(max_neg, s[i]));
        CHECK((average_precision(s, y) == 1.0) == (min_pos > max_neg));
    }
}

TEST_CASE("pr curve has one point per distinct score") {
    const std::vector<double> s{0.5, 0.5, 0.2, 0.9};
    const std::vector<int> y{1, 0, 1, 0};
    const auto c = precision_recall_curve(s, y);
    REQUIRE(c.size() == 3);
    CHECK(c[0].threshold == 0.9);
    CHECK(c[0].precision == 0.0);
    CHECK(c[1].recall == 0.5);
    CHECK(c[1].precision == doctest::Approx(1.0 / 3.0));
    CHECK(c[2].recall == 1.0);
}

TEST_CASE("incomplete beta and t cdf against boost") {
    Rng rng(5);
    for (int i = 0; i < 200; ++i) {
        const double a = rng.uniform(0.2, 40.0), b = rng.uniform(0.2, 40.0), x = rng.uniform();
        CHECK(std::fabs(regularized_incomplete_beta(a, b, x) - boost::math::ibeta(a, b, x)) < 1e-10);
    }
    for (int i = 0; i < 200; ++i) {
        const double dof = rng.uniform(1.0, 200.0), t = rng.normal() * 5.0;
        boost::math::students_t dist(dof);
        CHECK(std::fabs(students_t_cdf(t, dof) - boost::math::cdf(dist, t)) < 1e-10);
    }
}

TEST_CASE("pearson values and p-value") {
    std::vector<double> x(10), y(10), z(10);
    std::iota(x.begin(), x.end(), 1.0);
    for (int i = 0; i < 10; ++i) {
        y[i] = 2.0 * x[i];
        z[i] = -2.0 * x[i] + 3.0;
    }
    CHECK(pearson(x, y).r == doctest::Approx(1.0));
    CHECK(pearson(x, y).p_value < 1e-10);
    CHECK(pearson(x, z).r == doctest::Approx(-1.0));
    const std::vector<double> flat(10, 1.0);
    CHECK_THROWS_AS(pearson(x, flat), Error);

    Rng rng(6);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 5 + rng.below(40);
        std::vector<double> a(n), b(n);
        for (std::size_t i = 0; i < n; ++i) {
            a[i] = rng.normal();
            b[i] = 0.3 * a[i] + rng.normal();
        }
        const auto res = pearson(a, b);
        const double dof = static_cast<double>(n - 2);
        const double t = res.r * std::sqrt(dof / (1.0 - res.r * res.r));
        boost::math::students_t dist(dof);
        const double expected = 2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(t)));
        CHECK(std::fabs(res.p_value - expected) < 1e-10);
    }
}

TEST_CASE("pearson under the null stays small at n = 10000") {
    Rng rng(7);
    std::vector<double> a(10000), b(10000);
    for (std::size_t i = 0; i < a.size(); ++i) {
        a[i] = rng.normal();
        b[i] = rng.normal();
    }
    CHECK(std::fabs(pearson(a, b).r) < 0.05);
}

TEST_CASE("bootstrap determinism and constant samples") {
    const auto mean = [](std::span<const double> s) { return std::accumulate(s.begin(), s.end(), 0.0) / s.size(); };
    std::vector<double> c(30, 2.5);
    const auto rc = bootstrap_ci(std::span<const double>(c), mean);
    CHECK(rc.lo == 2.5);
    CHECK(rc.hi == 2.5);

    Rng rng(8);
    std::vector<double> v(200);
    for (auto& x : v) x = rng.normal();
    const auto a = bootstrap_ci(std::span<const double>(v), mean, 500, 0.9, 3);
    const auto b = bootstrap_ci(std::span<const double>(v), mean, 500, 0.9, 3);
    const auto other = bootstrap_ci(std::span<const double>(v), mean, 500, 0.9, 4);
    CHECK(a.lo == b.lo);
    CHECK(a.hi == b.hi);
    CHECK(a.lo != other.lo);
    CHECK(a.lo <= a.hi);
    CHECK(a.estimate >= a.replicate_min);
    CHECK(a.estimate <= a.replicate_max);
    CHECK_THROWS_AS(bootstrap_ci(std::span<const double>(v), mean, 10, 1.0), Error);
}

TEST_CASE("bootstrap interval of a Bernoulli mean matches the normal approximation") {
    Rng rng(9);
    std::vector<double> v(1000);
    for (auto& x : v) x = rng.uniform() < 0.5 ? 1.0 : 0.0;
    const auto mean = [](std::span<const double> s) { return std::accumulate(s.begin(), s.end(), 0.0) / s.size(); };
    const auto ci = bootstrap_ci(std::span<const double>(v), mean, 1000, 0.95, 1);
    const double p = mean(v);
    const double half = 1.959963984540054 * std::sqrt(p * (1 - p) / v.size());
    CHECK(std::fabs((ci.hi - ci.lo) - 2 * half) < 0.2 * 2 * half);
    CHECK(std::fabs(ci.lo - (p - half)) < 0.2 * 2 * half);
    CHECK(std::fabs(ci.hi - (p + half)) < 0.2 * 2 * half);
}

namespace {

Polygon rect(double x0, double y0, double x1, double y1) { return {{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}}; }

}  // namespace

TEST_CASE("geometry primitives") {
    const auto r = rect(0, 0, 4, 3);
    CHECK(contains(r, {1, 1}));
    CHECK_FALSE(contains(r, {5, 1}));
    CHECK(rasterize(r).size() == 12u);
    // a triangle: pixel centres under the diagonal y < x
    const Polygon tri{{0, 0}, {4, 0}, {4, 4}};
    std::size_t brute = 0;
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) brute += contains(tri, {x + 0.5, y + 0.5});
    CHECK(rasterize(tri).size() == brute);
    CHECK(pixel_iou(rasterize(r), rasterize(rect(0, 0, 4, 3))) == 1.0);
    CHECK(pixel_iou(rasterize(r), rasterize(rect(2, 0, 6, 3))) == doctest::Approx(6.0 / 18.0));
}

TEST_CASE("rasterize agrees with the point test on random polygons") {
    Rng rng(10);
    for (int trial = 0; trial < 100; ++trial) {
        Polygon p;
        const int k = 3 + static_cast<int>(rng.below(6));
        for (int i = 0; i < k; ++i) p.push_back({rng.uniform(0, 20), rng.uniform(0, 20)});
        std::vector<std::uint64_t> brute;
        for (int y = 0; y < 21; ++y)
            for (int x = 0; x < 21; ++x)
                if (contains(p, {x + 0.5, y + 0.5}))
                    brute.push_back((static_cast<std::uint64_t>(y) << 32) | static_cast<std::uint64_t>(x));
        CHECK(rasterize(p) == brute);
    }
}

TEST_CASE("matching identical, disjoint and mixed sets") {
    std::vector<Polygon> a{rect(0, 0, 10, 10), rect(20, 20, 30, 30)};
    const auto same = match_instances(a, a);
    CHECK(same.matched.size() == 2);
    for (const auto& m : same.matched) CHECK(m.iou == 1.0);
    const auto q = pq_dq_sq(same);
    CHECK(q.pq == 1.0);
    CHECK(q.dq == 1.0);
    CHECK(q.sq == 1.0);

    std::vector<Polygon> far{rect(50, 50, 60, 60)};
    const auto none = match_instances(a, far);
    CHECK(none.matched.empty());
    CHECK(none.unmatched_pred.size() == 2);
    CHECK(none.unmatched_gt.size() == 1);
    CHECK(pq_dq_sq(none).sq == 0.0);
}

TEST_CASE("pq from one TP at IoU 0.8, one FP and one FN") {
    MatchResult m;
    m.matched.push_back({0, 0, 0.8});
    m.unmatched_pred = {1};
    m.unmatched_gt = {1};
    const auto q = pq_dq_sq(m);
    CHECK(q.dq == 0.5);
    CHECK(q.sq == 0.8);
    CHECK(q.pq == q.dq * q.sq);
    CHECK(q.pq == doctest::Approx(0.4));
}

TEST_CASE("matching equals exhaustive assignment on random IoU matrices") {
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t np = rng.below(8), ng = rng.below(8);
        std::vector<double> iou(np * ng);
        for (auto& v : iou) v = rng.uniform() < 0.5 ? rng.uniform(0.5, 1.0) : rng.uniform(0.0, 0.5);
        const auto m = match_from_iou(np, ng, iou);
        const auto best = oracle::exhaustive_assignment(np, ng, iou);
        CHECK(m.matched.size() == best.count);
        double total = 0;
        for (const auto& p : m.matched) {
            total += p.iou;
            CHECK(p.iou > 0.5);
        }
        CHECK(total == doctest::Approx(best.total_iou).epsilon(1e-12));
        CHECK(m.matched.size() + m.unmatched_pred.size() == np);
        CHECK(m.matched.size() + m.unmatched_gt.size() == ng);
        const auto q = pq_dq_sq(m);
        CHECK(q.pq == q.dq * q.sq);
    }
}

TEST_CASE("f1 per class") {
    MatchResult m;
    m.matched.push_back({0, 0, 0.9});
    std::vector<std::string> pred{"lymphocyte"}, gt{"epithelial"};
    const auto f = f1_per_class(pred, gt, m);
    CHECK(f.at("lymphocyte") == 0.0);
    CHECK(f.at("epithelial") == 0.0);

    MatchResult perfect;
    perfect.matched = {{0, 0, 1.0}, {1, 1, 1.0}};
    std::vector<std::string> labels{"a", "b"};
    const auto g = f1_per_class(labels, labels, perfect);
    CHECK(g.at("a") == 1.0);
    CHECK(g.at("b") == 1.0);
    CHECK(g.size() == 2);

    // 2 TP for a, one unmatched pred a (FP), one unmatched gt a (FN): F1 = 4 / 6
    MatchResult mixed;
    mixed.matched = {{0, 0, 0.7}, {1, 1, 0.7}};
    mixed.unmatched_pred = {2};
    mixed.unmatched_gt = {2};
    std::vector<std::string> p3{"a", "a", "a"}, g3{"a", "a", "a"};
    CHECK(f1_per_class(p3, g3, mixed).at("a") == doctest::Approx(4.0 / 6.0));
}
