#include "imilia/preprocess.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace imilia {

namespace fs = std::filesystem;

std::size_t BinaryMask::count() const {
    return static_cast<std::size_t>(std::count(values.begin(), values.end(), std::uint8_t{1}));
}

std::optional<int> otsu_threshold(const std::vector<std::size_t>& histogram) {
    const int bins = static_cast<int>(histogram.size());
    int occupied = 0;
    double total = 0.0, weighted = 0.0;
    for (int i = 0; i < bins; ++i) {
        if (histogram[i] > 0) ++occupied;
        total += static_cast<double>(histogram[i]);
        weighted += static_cast<double>(i) * static_cast<double>(histogram[i]);
    }
    if (occupied < 2) return std::nullopt;

    double w0 = 0.0, sum0 = 0.0, best = -1.0;
    int best_t = 0;
    for (int t = 0; t < bins - 1; ++t) {
        w0 += static_cast<double>(histogram[t]);
        sum0 += static_cast<double>(t) * static_cast<double>(histogram[t]);
        const double w1 = total - w0;
        if (w0 == 0.0 || w1 == 0.0) continue;
        const double m0 = sum0 / w0;
        const double m1 = (weighted - sum0) / w1;
        const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if (between > best) {
            best = between;
            best_t = t;
        }
    }
    return best_t;
}

namespace {

void remove_small_components(BinaryMask& mask, int min_size) {
    if (min_size <= 1) return;
    std::vector<std::uint8_t> visited(mask.values.size(), 0);
    std::vector<std::size_t> stack, component;
    const int w = mask.width, h = mask.height;
    for (std::size_t start = 0; start < mask.values.size(); ++start) {
        if (!mask.values[start] || visited[start]) continue;
        component.clear();
        stack.assign(1, start);
        visited[start] = 1;
        while (!stack.empty()) {
            const std::size_t idx = stack.back();
            stack.pop_back();
            component.push_back(idx);
            const int x = static_cast<int>(idx % w), y = static_cast<int>(idx / w);
            const int nx[4] = {x - 1, x + 1, x, x};
            const int ny[4] = {y, y, y - 1, y + 1};
            for (int k = 0; k < 4; ++k) {
                if (nx[k] < 0 || ny[k] < 0 || nx[k] >= w || ny[k] >= h) continue;
                const std::size_t n = static_cast<std::size_t>(ny[k]) * w + nx[k];
                if (mask.values[n] && !visited[n]) {
                    visited[n] = 1;
                    stack.push_back(n);
                }
            }
        }
        if (component.size() < static_cast<std::size_t>(min_size))
            for (std::size_t idx : component) mask.values[idx] = 0;
    }
}

}  // namespace

BinaryMask tissue_mask(const RgbImage& image, const TissueMaskOptions& options) {
    if (image.width <= 0 || image.height <= 0) throw Error("tissue_mask: empty image");
    const int ds = std::max(1, options.downsample);
    const int w = std::max(1, image.width / ds), h = std::max(1, image.height / ds);

    std::vector<std::uint8_t> saturation(static_cast<std::size_t>(w) * h);
    std::vector<std::size_t> histogram(256, 0);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double rgb[3] = {0, 0, 0};
            int n = 0;
            for (int yy = y * ds; yy < std::min(image.height, (y + 1) * ds); ++yy)
                for (int xx = x * ds; xx < std::min(image.width, (x + 1) * ds); ++xx, ++n)
                    for (int c = 0; c < 3; ++c) rgb[c] += image.at(xx, yy, c);
            for (double& v : rgb) v /= n;
            const double mx = std::max({rgb[0], rgb[1], rgb[2]});
            const double mn = std::min({rgb[0], rgb[1], rgb[2]});
            const double s = mx > 0.0 ? 255.0 * (mx - mn) / mx : 0.0;
            const auto bin = static_cast<std::uint8_t>(std::clamp(std::lround(s), 0L, 255L));
            saturation[static_cast<std::size_t>(y) * w + x] = bin;
            ++histogram[bin];
        }
    }

    BinaryMask mask(w, h, 0, ds);
    const auto otsu = otsu_threshold(histogram);
    if (!otsu) {
        spdlog::warn("tissue_mask: degenerate single-colour image, returning an empty mask");
        return mask;
    }
    const double threshold = std::max(static_cast<double>(*otsu), options.min_saturation);
    for (std::size_t i = 0; i < saturation.size(); ++i) mask.values[i] = saturation[i] > threshold ? 1 : 0;
    remove_small_components(mask, options.min_component_px);
    return mask;
}

TileGrid tessellate(const BinaryMask& mask, int tile_size_px, double min_tissue_frac, double mpp) {
    if (tile_size_px <= 0) throw Error("tile size must be positive");
    if (min_tissue_frac < 0.0 || min_tissue_frac > 1.0) throw Error("min_tissue_frac must lie in [0,1]");
    if (mask.scale <= 0 || tile_size_px % mask.scale != 0)
        throw Error(fmt::format("tile size {} is not a multiple of the mask scale {}", tile_size_px, mask.scale));

    const int tm = tile_size_px / mask.scale;
    TileGrid grid;
    grid.tile_size_px = tile_size_px;
    grid.mpp = mpp;
    const double area = static_cast<double>(tm) * tm;
    for (int row = 0; row < mask.height / tm; ++row) {
        for (int col = 0; col < mask.width / tm; ++col) {
            std::size_t tissue = 0;
            for (int y = row * tm; y < (row + 1) * tm; ++y)
                for (int x = col * tm; x < (col + 1) * tm; ++x) tissue += mask.at(x, y);
            if (static_cast<double>(tissue) / area >= min_tissue_frac) {
                const int x_px = col * tile_size_px, y_px = row * tile_size_px;
                grid.tiles.push_back({fmt::format("x{}_y{}", x_px, y_px), x_px, y_px});
            }
        }
    }
    return grid;
}

void write_tile_manifest(const TileGrid& grid, const fs::path& path) {
    std::string out = "tile_id,x_px,y_px,tile_size_px,mpp\n";
    for (const auto& t : grid.tiles)
        out += fmt::format("{},{},{},{},{}\n", t.tile_id, t.x_px, t.y_px, grid.tile_size_px, format_double(grid.mpp));
    write_text_file(path, out);
}

TileGrid read_tile_manifest(const fs::path& path) {
    const CsvTable table = read_csv(path);
    const auto c_id = table.column("tile_id"), c_x = table.column("x_px"), c_y = table.column("y_px"),
               c_ts = table.column("tile_size_px"), c_mpp = table.column("mpp");
    TileGrid grid;
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
        const auto& r = table.rows[i];
        const int ts = static_cast<int>(parse_int(r[c_ts], "tile_size_px"));
        const double mpp = parse_double(r[c_mpp], "mpp");
        if (i == 0) {
            grid.tile_size_px = ts;
            grid.mpp = mpp;
        } else if (ts != grid.tile_size_px) {
            throw Error(fmt::format("{}: mixed tile sizes", path.string()));
        }
        grid.tiles.push_back({r[c_id], static_cast<int>(parse_int(r[c_x], "x_px")),
                              static_cast<int>(parse_int(r[c_y], "y_px"))});
    }
    return grid;
}

namespace {

struct NetpbmHeader {
    std::string magic;
    int width = 0, height = 0, maxval = 0;
    std::size_t data_offset = 0;
};

NetpbmHeader parse_netpbm(const std::string& bytes, const fs::path& path) {
    NetpbmHeader h;
    std::size_t pos = 0;
    const auto next_token = [&]() -> std::string {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else {
                break;
            }
        }
        const std::size_t start = pos;
        while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
        return bytes.substr(start, pos - start);
    };
    h.magic = next_token();
    h.width = static_cast<int>(parse_int(next_token(), "netpbm width"));
    h.height = static_cast<int>(parse_int(next_token(), "netpbm height"));
    h.maxval = static_cast<int>(parse_int(next_token(), "netpbm maxval"));
    h.data_offset = pos + 1;  // single whitespace after maxval
    if (h.width <= 0 || h.height <= 0 || h.maxval <= 0 || h.maxval > 65535)
        throw Error(fmt::format("'{}': invalid netpbm header", path.string()));
    return h;
}

}  // namespace

RgbImage read_ppm(const fs::path& path) {
    const std::string bytes = read_text_file(path);
    const auto h = parse_netpbm(bytes, path);
    if (h.magic != "P6" || h.maxval > 255) throw Error(fmt::format("'{}': expected an 8-bit P6 image", path.string()));
    RgbImage img;
    img.width = h.width;
    img.height = h.height;
    const std::size_t n = 3 * static_cast<std::size_t>(h.width) * h.height;
    if (bytes.size() < h.data_offset + n) throw Error(fmt::format("'{}': truncated image", path.string()));
    img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(h.data_offset),
                      bytes.begin() + static_cast<std::ptrdiff_t>(h.data_offset + n));
    return img;
}

void write_ppm(const RgbImage& image, const fs::path& path) {
    std::string out = fmt::format("P6\n{} {}\n255\n", image.width, image.height);
    out.append(image.pixels.begin(), image.pixels.end());
    write_text_file(path, out);
}

void write_mask_pgm(const BinaryMask& mask, const fs::path& path) {
    std::string out = fmt::format("P5\n{} {}\n255\n", mask.width, mask.height);
    for (auto v : mask.values) out.push_back(static_cast<char>(v ? 255 : 0));
    write_text_file(path, out);
}

BinaryMask read_mask_pgm(const fs::path& path) {
    const std::string bytes = read_text_file(path);
    const auto h = parse_netpbm(bytes, path);
    if (h.magic != "P5" || h.maxval > 255) throw Error(fmt::format("'{}': expected an 8-bit P5 mask", path.string()));
    BinaryMask mask(h.width, h.height);
    if (bytes.size() < h.data_offset + mask.values.size())
        throw Error(fmt::format("'{}': truncated mask", path.string()));
    for (std::size_t i = 0; i < mask.values.size(); ++i)
        mask.values[i] = static_cast<unsigned char>(bytes[h.data_offset + i]) > h.maxval / 2 ? 1 : 0;
    return mask;
}

void write_probability_pgm(int width, int height, const std::vector<double>& values, const fs::path& path) {
    if (values.size() != static_cast<std::size_t>(width) * height) throw Error("probability grid size mismatch");
    std::string out = fmt::format("P5\n{} {}\n65535\n", width, height);
    for (double v : values) {
        const auto q = static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 1.0) * 65535.0));
        out.push_back(static_cast<char>(q >> 8));
        out.push_back(static_cast<char>(q & 0xFF));
    }
    write_text_file(path, out);
}

std::vector<double> read_probability_pgm(const fs::path& path, int& width, int& height) {
    const std::string bytes = read_text_file(path);
    const auto h = parse_netpbm(bytes, path);
    if (h.magic != "P5" || h.maxval != 65535)
        throw Error(fmt::format("'{}': expected a 16-bit P5 probability map", path.string()));
    width = h.width;
    height = h.height;
    const std::size_t n = static_cast<std::size_t>(width) * height;
    if (bytes.size() < h.data_offset + 2 * n) throw Error(fmt::format("'{}': truncated map", path.string()));
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto hi = static_cast<unsigned char>(bytes[h.data_offset + 2 * i]);
        const auto lo = static_cast<unsigned char>(bytes[h.data_offset + 2 * i + 1]);
        out[i] = static_cast<double>((hi << 8) | lo) / 65535.0;
    }
    return out;
}

}  // namespace imilia
