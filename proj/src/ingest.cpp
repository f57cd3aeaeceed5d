#include "imilia/ingest.hpp"

#include "imilia/preprocess.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include <fmt/format.h>

namespace imilia {

namespace fs = std::filesystem;

const SlideRecord& Dataset::at(std::string_view slide_id) const {
    for (const auto& s : slides)
        if (s.slide_id == slide_id) return s;
    throw Error(fmt::format("unknown slide_id '{}'", slide_id));
}

std::size_t Dataset::labeled_count() const {
    return static_cast<std::size_t>(
        std::count_if(slides.begin(), slides.end(), [](const SlideRecord& s) { return s.label.has_value(); }));
}

fs::path container_base(const fs::path& path) {
    const auto ext = path.extension();
    if (ext == ".json" || ext == ".bin") {
        fs::path base = path;
        base.replace_extension();
        return base;
    }
    return path;
}

namespace {

fs::path with_suffix(const fs::path& base, std::string_view suffix) {
    fs::path p = base;
    p += suffix;
    return p;
}

std::uint32_t to_little_endian(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::big)
        v = ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
    return v;
}

}  // namespace

void check_finite(const FeatureMatrix& matrix, std::string_view context) {
    for (std::size_t i = 0; i < matrix.n_tiles; ++i)
        for (float v : matrix.row(i))
            if (!std::isfinite(v))
                throw Error(fmt::format("{}: non-finite value in row {} (tile '{}')", context, i,
                                        i < matrix.tile_ids.size() ? matrix.tile_ids[i] : std::string("?")));
}

void write_features(const fs::path& base_in, const FeatureContainer& container) {
    const fs::path base = container_base(base_in);
    const auto& m = container.matrix;
    if (m.data.size() != m.n_tiles * m.d) throw Error("feature matrix size does not match its dims");
    if (m.tile_ids.size() != m.n_tiles) throw Error("tile_ids length does not match n_tiles");

    nlohmann::json header = container.attributes.is_object() ? container.attributes : nlohmann::json::object();
    header["format"] = "imilia-features";
    header["version"] = 1;
    header["dtype"] = "float32-le";
    header["n_tiles"] = m.n_tiles;
    header["d"] = m.d;
    header["tile_ids"] = m.tile_ids;
    write_text_file(with_suffix(base, ".json"), header.dump(2) + "\n");

    std::string payload(m.data.size() * sizeof(float), '\0');
    for (std::size_t i = 0; i < m.data.size(); ++i) {
        std::uint32_t bits = to_little_endian(std::bit_cast<std::uint32_t>(m.data[i]));
        std::memcpy(payload.data() + i * sizeof(float), &bits, sizeof(bits));
    }
    write_text_file(with_suffix(base, ".bin"), payload);
}

void write_features(const fs::path& base, const FeatureMatrix& matrix) {
    write_features(base, FeatureContainer{matrix, nlohmann::json::object()});
}

FeatureContainer read_feature_container(const fs::path& path) {
    const fs::path base = container_base(path);
    const fs::path json_path = with_suffix(base, ".json");
    const fs::path bin_path = with_suffix(base, ".bin");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(read_text_file(json_path));
    } catch (const nlohmann::json::exception& e) {
        throw Error(fmt::format("unreadable feature container '{}': {}", json_path.string(), e.what()));
    }
    if (header.value("dtype", "") != "float32-le")
        throw Error(fmt::format("'{}': unsupported dtype", json_path.string()));

    FeatureContainer out;
    auto& m = out.matrix;
    try {
        m.n_tiles = header.at("n_tiles").get<std::size_t>();
        m.d = header.at("d").get<std::size_t>();
        m.tile_ids = header.at("tile_ids").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(fmt::format("'{}': malformed header: {}", json_path.string(), e.what()));
    }
    if (m.n_tiles < 1) throw Error(fmt::format("'{}': n_tiles must be >= 1", json_path.string()));
    if (m.tile_ids.size() != m.n_tiles)
        throw Error(fmt::format("'{}': {} tile_ids for {} tiles", json_path.string(), m.tile_ids.size(), m.n_tiles));

    const std::string payload = read_text_file(bin_path);
    const std::size_t expected = m.n_tiles * m.d * sizeof(float);
    if (payload.size() != expected)
        throw Error(fmt::format("'{}': header declares {}x{} floats ({} bytes) but payload has {} bytes",
                                bin_path.string(), m.n_tiles, m.d, expected, payload.size()));
    m.data.resize(m.n_tiles * m.d);
    for (std::size_t i = 0; i < m.data.size(); ++i) {
        std::uint32_t bits = 0;
        std::memcpy(&bits, payload.data() + i * sizeof(float), sizeof(bits));
        m.data[i] = std::bit_cast<float>(to_little_endian(bits));
    }
    check_finite(m, bin_path.string());

    for (const char* key : {"format", "version", "dtype", "n_tiles", "d", "tile_ids"}) header.erase(key);
    out.attributes = std::move(header);
    return out;
}

FeatureMatrix load_features(const SlideRecord& record) {
    return read_feature_container(record.feature_path).matrix;
}

Dataset load_dataset(const fs::path& manifest_path) {
    if (!fs::exists(manifest_path)) throw Error(fmt::format("manifest '{}' not found", manifest_path.string()));
    const CsvTable table = read_csv(manifest_path);
    const fs::path root = manifest_path.parent_path();
    const auto resolve = [&](const std::string& p) -> fs::path {
        if (p.empty()) return {};
        fs::path path(p);
        return path.is_absolute() ? path : root / path;
    };

    const std::size_t c_id = table.column("slide_id"), c_cohort = table.column("cohort"),
                      c_label = table.column("label"), c_mx = table.column("mpp_x"), c_my = table.column("mpp_y"),
                      c_tiles = table.column("tile_manifest"), c_feat = table.column("feature_path");

    Dataset ds;
    std::set<std::string> seen;
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
        const auto& row = table.rows[i];
        const std::string where = fmt::format("{}:{}", manifest_path.string(), table.line_numbers[i]);
        SlideRecord rec;
        rec.slide_id = row[c_id];
        if (rec.slide_id.empty()) throw Error(where + ": empty slide_id");
        if (!seen.insert(rec.slide_id).second) throw Error(fmt::format("{}: duplicate slide_id '{}'", where, rec.slide_id));
        rec.cohort = row[c_cohort];
        if (!row[c_label].empty()) {
            const auto label = parse_int(row[c_label], "label");
            if (label != 0 && label != 1) throw Error(fmt::format("{}: label must be 0 or 1", where));
            rec.label = static_cast<int>(label);
        }
        rec.mpp_x = parse_double(row[c_mx], "mpp_x");
        rec.mpp_y = parse_double(row[c_my], "mpp_y");
        if (!(rec.mpp_x > 0.0) || !(rec.mpp_y > 0.0))
            throw Error(fmt::format("{}: non-positive mpp for slide '{}'", where, rec.slide_id));
        rec.tile_manifest_path = resolve(row[c_tiles]);
        rec.feature_path = resolve(row[c_feat]);
        const fs::path header = with_suffix(container_base(rec.feature_path), ".json");
        if (rec.feature_path.empty() || !fs::is_regular_file(header))
            throw Error(fmt::format("{}: unreadable feature container for slide '{}'", where, rec.slide_id));
        ds.slides.push_back(std::move(rec));
    }
    return ds;
}

void write_manifest(const Dataset& dataset, const fs::path& manifest_path) {
    const fs::path root = manifest_path.parent_path();
    const auto rel = [&](const fs::path& p) -> std::string {
        if (p.empty()) return {};
        if (root.empty()) return p.generic_string();
        return fs::relative(p, root).generic_string();
    };
    std::string out = "slide_id,cohort,label,mpp_x,mpp_y,tile_manifest,feature_path\n";
    for (const auto& s : dataset.slides) {
        out += fmt::format("{},{},{},{},{},{},{}\n", s.slide_id, s.cohort, s.label ? std::to_string(*s.label) : "",
                           format_double(s.mpp_x), format_double(s.mpp_y), rel(s.tile_manifest_path),
                           rel(s.feature_path));
    }
    write_text_file(manifest_path, out);
}

int FoldAssignment::fold_of(std::string_view slide_id) const {
    const auto it = assignment.find(std::string(slide_id));
    if (it == assignment.end()) throw Error(fmt::format("slide '{}' has no fold", slide_id));
    return it->second;
}

FoldAssignment make_folds(const Dataset& dataset, int n_folds, std::uint64_t seed) {
    if (n_folds < 2) throw Error("n_folds must be >= 2");
    std::vector<std::string> by_class[2];
    for (const auto& s : dataset.slides)
        if (s.label) by_class[*s.label].push_back(s.slide_id);
    for (int c = 0; c < 2; ++c)
        if (by_class[c].size() < static_cast<std::size_t>(n_folds))
            throw Error(fmt::format("too few slides of class {} ({}) for {} folds", c, by_class[c].size(), n_folds));

    FoldAssignment folds;
    folds.n_folds = n_folds;
    Rng rng(mix_seed(seed, 0xF01D));
    std::size_t cursor = 0;  // round-robin continues across classes to balance fold sizes
    for (auto& ids : by_class) {
        rng.shuffle(ids);
        for (const auto& id : ids) folds.assignment[id] = static_cast<int>(cursor++ % n_folds);
    }
    return folds;
}

SyntheticCohort synth_dataset(const SynthParams& p) {
    if (!(p.separation >= 0.0)) throw Error("separation must be >= 0");
    if (p.n_slides == 0 || p.d == 0) throw Error("n_slides and d must be positive");
    if (p.n_tiles_min < 1 || p.n_tiles_max < p.n_tiles_min) throw Error("invalid n_tiles range");
    if (p.signal_fraction < 0.0 || p.signal_fraction > 1.0) throw Error("signal_fraction must lie in [0,1]");
    if (p.positive_fraction < 0.0 || p.positive_fraction > 1.0) throw Error("positive_fraction must lie in [0,1]");

    Rng rng(mix_seed(p.seed, 0x5EED));
    SyntheticCohort out;
    out.direction.resize(p.d);
    double norm = 0.0;
    for (auto& v : out.direction) {
        v = rng.normal();
        norm += v * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : out.direction) v /= norm;

    const auto n_pos = static_cast<std::size_t>(std::llround(p.positive_fraction * static_cast<double>(p.n_slides)));
    std::vector<int> labels(p.n_slides, 0);
    std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n_pos), 1);
    rng.shuffle(labels);

    for (std::size_t s = 0; s < p.n_slides; ++s) {
        SlideRecord rec;
        rec.slide_id = fmt::format("slide_{:04d}", s);
        rec.cohort = p.cohort;
        rec.label = labels[s];
        rec.mpp_x = rec.mpp_y = p.mpp;

        const std::size_t n = p.n_tiles_min + rng.below(p.n_tiles_max - p.n_tiles_min + 1);
        FeatureMatrix m;
        m.n_tiles = n;
        m.d = p.d;
        m.data.resize(n * p.d);
        for (auto& v : m.data) v = static_cast<float>(rng.normal());
        for (std::size_t t = 0; t < n; ++t) m.tile_ids.push_back(fmt::format("t{:05d}", t));

        std::vector<bool> signal(n, false);
        if (labels[s] == 1 && p.signal_fraction > 0.0) {
            const auto n_signal = std::max<std::size_t>(
                1, static_cast<std::size_t>(std::llround(p.signal_fraction * static_cast<double>(n))));
            std::vector<std::size_t> order(n);
            for (std::size_t t = 0; t < n; ++t) order[t] = t;
            rng.shuffle(order);
            for (std::size_t k = 0; k < n_signal; ++k) {
                const std::size_t t = order[k];
                signal[t] = true;
                auto row = m.row(t);
                for (std::size_t j = 0; j < p.d; ++j)
                    row[j] = static_cast<float>(row[j] + p.separation * out.direction[j]);
            }
        }
        out.dataset.slides.push_back(std::move(rec));
        out.features.push_back(std::move(m));
        out.signal_tiles.push_back(std::move(signal));
    }
    return out;
}

void write_synthetic(SyntheticCohort& cohort, const SynthParams& p, const fs::path& dir) {
    fs::create_directories(dir / "features");
    fs::create_directories(dir / "tiles");
    for (std::size_t s = 0; s < cohort.dataset.slides.size(); ++s) {
        auto& rec = cohort.dataset.slides[s];
        const auto& m = cohort.features[s];
        rec.feature_path = dir / "features" / rec.slide_id;
        rec.tile_manifest_path = dir / "tiles" / (rec.slide_id + ".csv");

        FeatureContainer container{m, nlohmann::json::object()};
        container.attributes["slide_id"] = rec.slide_id;
        container.attributes["mpp_x"] = rec.mpp_x;
        container.attributes["mpp_y"] = rec.mpp_y;
        write_features(rec.feature_path, container);

        TileGrid grid;
        grid.tile_size_px = p.tile_size_px;
        grid.mpp = p.mpp;
        const auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(m.n_tiles))));
        for (std::size_t t = 0; t < m.n_tiles; ++t)
            grid.tiles.push_back({m.tile_ids[t], static_cast<int>((t % cols) * p.tile_size_px),
                                  static_cast<int>((t / cols) * p.tile_size_px)});
        write_tile_manifest(grid, rec.tile_manifest_path);
    }
    write_manifest(cohort.dataset, dir / "manifest.csv");
}

}  // namespace imilia
