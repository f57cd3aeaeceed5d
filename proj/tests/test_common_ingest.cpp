#include "imilia/common.hpp"
#include "imilia/ingest.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <set>

using namespace imilia;
namespace fs = std::filesystem;

TEST_CASE("rng streams are reproducible and uniform draws stay in range") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next() == b.next());
    Rng c(7);
    for (int i = 0; i < 1000; ++i) {
        const double u = c.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        CHECK(c.below(13) < 13u);
    }
    CHECK(mix_seed(1, 0) != mix_seed(1, 1));
    CHECK(mix_seed(1, 0) != mix_seed(2, 0));
}

TEST_CASE("normal draws have roughly unit moments") {
    Rng rng(3);
    double s = 0, s2 = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double z = rng.normal();
        s += z;
        s2 += z * z;
    }
    CHECK(std::fabs(s / n) < 0.05);
    CHECK(std::fabs(s2 / n - 1.0) < 0.05);
}

TEST_CASE("format_double round-trips") {
    for (double v : {0.1, 1.0 / 3.0, 1e-300, -2.5, 123456789.125}) CHECK(std::stod(format_double(v)) == v);
}

TEST_CASE("sha256 of a known string") {
    CHECK(sha256_bytes("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("csv reader rejects ragged rows") {
    testing::TempDir dir;
    write_text_file(dir / "a.csv", "x,y\n1,2\n3\n");
    CHECK_THROWS_AS(read_csv(dir / "a.csv"), Error);
    write_text_file(dir / "b.csv", "x,y\n1,2\n\n3,4\n");
    const auto t = read_csv(dir / "b.csv");
    CHECK(t.rows.size() == 2);
    CHECK(t.column("y") == 1);
    CHECK_THROWS_AS(t.column("z"), Error);
}

TEST_CASE("feature container round-trips bytes and attributes") {
    testing::TempDir dir;
    FeatureContainer c;
    c.matrix.n_tiles = 3;
    c.matrix.d = 2;
    c.matrix.data = {1.5f, -2.f, 0.25f, 3.f, 1e-7f, 8.f};
    c.matrix.tile_ids = {"a", "b", "c"};
    c.attributes["mpp"] = 0.5;
    c.attributes["slide_id"] = "s1";
    write_features(dir / "f", c);
    const auto back = read_feature_container(dir / "f.json");
    CHECK(back.matrix.data == c.matrix.data);
    CHECK(back.matrix.tile_ids == c.matrix.tile_ids);
    CHECK(back.attributes["mpp"] == 0.5);

    const std::string json1 = read_text_file(dir / "f.json"), bin1 = read_text_file(dir / "f.bin");
    write_features(dir / "g", back);
    CHECK(read_text_file(dir / "g.json") == json1);
    CHECK(read_text_file(dir / "g.bin") == bin1);
}

TEST_CASE("feature container with a truncated payload is rejected") {
    testing::TempDir dir;
    FeatureMatrix m;
    m.n_tiles = 2;
    m.d = 2;
    m.data = {1, 2, 3, 4};
    m.tile_ids = {"a", "b"};
    write_features(dir / "f", m);
    const auto bin = read_text_file(dir / "f.bin");
    write_text_file(dir / "f.bin", bin.substr(0, 12));
    CHECK_THROWS_AS(read_feature_container(dir / "f"), Error);
}

TEST_CASE("non-finite features name the row") {
    FeatureMatrix m;
    m.n_tiles = 2;
    m.d = 1;
    m.data = {1.f, std::nanf("")};
    m.tile_ids = {"a", "b"};
    try {
        check_finite(m, "slide x");
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("b") != std::string::npos);
    }
}

namespace {

void write_small_manifest(const fs::path& dir, const std::string& rows) {
    FeatureMatrix m;
    m.n_tiles = 1;
    m.d = 1;
    m.data = {0.f};
    m.tile_ids = {"t0"};
    write_features(dir / "f1", m);
    write_text_file(dir / "manifest.csv", "slide_id,cohort,label,mpp_x,mpp_y,tile_manifest,feature_path\n" + rows);
}

}  // namespace

TEST_CASE("dataset manifest validation") {
    testing::TempDir dir;
    SUBCASE("valid") {
        write_small_manifest(dir.path(), "s1,c,1,0.5,0.5,,f1\ns2,c,,0.5,0.5,,f1\n");
        const auto ds = load_dataset(dir / "manifest.csv");
        CHECK(ds.slides.size() == 2);
        CHECK(ds.labeled_count() == 1);
        CHECK(ds.at("s1").feature_path == dir / "f1");
    }
    SUBCASE("duplicate slide id") {
        write_small_manifest(dir.path(), "s1,c,1,0.5,0.5,,f1\ns1,c,0,0.5,0.5,,f1\n");
        CHECK_THROWS_WITH_AS(load_dataset(dir / "manifest.csv"), doctest::Contains("s1"), Error);
    }
    SUBCASE("non-positive mpp") {
        write_small_manifest(dir.path(), "s1,c,1,0,0.5,,f1\n");
        CHECK_THROWS_WITH_AS(load_dataset(dir / "manifest.csv"), doctest::Contains("mpp"), Error);
    }
    SUBCASE("missing container") {
        write_small_manifest(dir.path(), "s1,c,1,0.5,0.5,,nothere\n");
        CHECK_THROWS_WITH_AS(load_dataset(dir / "manifest.csv"), doctest::Contains("unreadable"), Error);
    }
}

TEST_CASE("folds are stratified, disjoint and seed-determined") {
    Dataset ds;
    for (int i = 0; i < 53; ++i) {
        SlideRecord r;
        r.slide_id = "s" + std::to_string(i);
        r.label = i % 3 == 0 ? 1 : 0;
        ds.slides.push_back(r);
    }
    const auto f = make_folds(ds, 5, 9);
    CHECK(f.assignment.size() == 53);
    std::map<int, int> pos, total;
    for (const auto& r : ds.slides) {
        const int k = f.fold_of(r.slide_id);
        total[k]++;
        pos[k] += *r.label;
    }
    for (int k = 0; k < 5; ++k) {
        CHECK(total[k] >= 10);
        CHECK(total[k] <= 11);
        CHECK(pos[k] >= 3);
        CHECK(pos[k] <= 4);
    }
    CHECK(make_folds(ds, 5, 9).assignment == f.assignment);
    CHECK(make_folds(ds, 5, 10).assignment != f.assignment);
}

TEST_CASE("folds need every class in every fold") {
    Dataset ds;
    for (int i = 0; i < 10; ++i) {
        SlideRecord r;
        r.slide_id = "s" + std::to_string(i);
        r.label = i < 3 ? 1 : 0;
        ds.slides.push_back(r);
    }
    CHECK_THROWS_AS(make_folds(ds, 5, 0), Error);
}

TEST_CASE("synthetic cohort shape and determinism") {
    SynthParams p;
    p.n_slides = 20;
    p.d = 8;
    p.seed = 5;
    const auto a = synth_dataset(p), b = synth_dataset(p);
    CHECK(a.features.size() == 20);
    int positives = 0;
    for (std::size_t i = 0; i < 20; ++i) {
        CHECK(a.features[i].data == b.features[i].data);
        const auto& f = a.features[i];
        CHECK(f.n_tiles >= p.n_tiles_min);
        CHECK(f.n_tiles <= p.n_tiles_max);
        const bool pos = *a.dataset.slides[i].label == 1;
        positives += pos;
        const auto n_signal = std::count(a.signal_tiles[i].begin(), a.signal_tiles[i].end(), true);
        CHECK((pos ? n_signal >= 1 : n_signal == 0));
    }
    CHECK(positives == 10);
    double norm = 0;
    for (double v : a.direction) norm += v * v;
    CHECK(norm == doctest::Approx(1.0));
}

TEST_CASE("synthetic cohort written to disk loads back") {
    testing::TempDir dir;
    SynthParams p;
    p.n_slides = 6;
    p.d = 4;
    auto c = synth_dataset(p);
    write_synthetic(c, p, dir.path());
    const auto ds = load_dataset(dir / "manifest.csv");
    REQUIRE(ds.slides.size() == 6);
    const auto f = load_features(ds.slides[2]);
    CHECK(f.data == c.features[2].data);
}
