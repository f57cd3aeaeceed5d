#include "imilia/config.hpp"

#include "imilia/common.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include <cstdlib>
#include <set>
#include <sstream>

#define TOML_EXCEPTIONS 1
#include <toml.hpp>

namespace imilia {

namespace {

// Walks one [section], remembering which keys were read so leftovers can be
// reported as unknown.
class Section {
public:
    Section(const toml::table* table, std::string name, std::string source)
        : table_(table), name_(std::move(name)), source_(std::move(source)) {}

    template <class T>
    void read(const char* key, T& out) {
        if (!table_) return;
        seen_.insert(key);
        const toml::node* node = table_->get(key);
        if (!node) return;
        assign(key, *node, out);
    }

    void finish() const {
        if (!table_) return;
        for (const auto& [k, v] : *table_) {
            if (!seen_.count(std::string(k.str())))
                throw Error(fmt::format("{}: unknown key '{}.{}'", source_, name_, k.str()));
        }
    }

private:
    [[noreturn]] void type_error(const char* key, const char* expected) const {
        throw Error(fmt::format("{}: key '{}.{}' must be {}", source_, name_, key, expected));
    }

    void assign(const char* key, const toml::node& node, std::string& out) const {
        auto v = node.value_exact<std::string>();
        if (!v) type_error(key, "a string");
        out = *v;
    }
    void assign(const char* key, const toml::node& node, bool& out) const {
        auto v = node.value_exact<bool>();
        if (!v) type_error(key, "a boolean");
        out = *v;
    }
    void assign(const char* key, const toml::node& node, int& out) const {
        auto v = node.value_exact<std::int64_t>();
        if (!v) type_error(key, "an integer");
        out = static_cast<int>(*v);
    }
    void assign(const char* key, const toml::node& node, std::size_t& out) const {
        auto v = node.value_exact<std::int64_t>();
        if (!v || *v < 0) type_error(key, "a non-negative integer");
        out = static_cast<std::size_t>(*v);
    }
    void assign(const char* key, const toml::node& node, std::optional<std::uint64_t>& out) const {
        auto v = node.value_exact<std::int64_t>();
        if (!v || *v < 0) type_error(key, "a non-negative integer");
        out = static_cast<std::uint64_t>(*v);
    }
    void assign(const char* key, const toml::node& node, double& out) const {
        // integers are accepted where floats are expected
        auto v = node.value<double>();
        if (!v || node.is_boolean() || node.is_string()) type_error(key, "a number");
        out = *v;
    }
    void assign(const char* key, const toml::node& node, std::vector<double>& out) const {
        const toml::array* arr = node.as_array();
        if (!arr) type_error(key, "an array of numbers");
        out.clear();
        for (const auto& el : *arr) {
            if (!el.is_number()) type_error(key, "an array of numbers");
            out.push_back(*el.value<double>());
        }
    }
    void assign(const char* key, const toml::node& node, std::vector<int>& out) const {
        const toml::array* arr = node.as_array();
        if (!arr) type_error(key, "an array of integers");
        out.clear();
        for (const auto& el : *arr) {
            if (!el.is_integer()) type_error(key, "an array of integers");
            out.push_back(static_cast<int>(*el.value<std::int64_t>()));
        }
    }

    const toml::table* table_;
    std::string name_;
    std::string source_;
    std::set<std::string> seen_;
};

std::string quoted(const std::string& s) {
    std::ostringstream os;
    os << toml::value<std::string>(s);
    return os.str();
}

std::string number_list(const std::vector<double>& v) {
    std::vector<std::string> parts;
    for (double x : v) parts.push_back(format_double(x));
    return fmt::format("[{}]", fmt::join(parts, ", "));
}

// toml needs a decimal point or exponent for floats to stay floats
std::string toml_float(double v) {
    std::string s = format_double(v);
    if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
    return s;
}

}  // namespace

RunConfig parse_config(std::string_view text, std::string_view source) {
    toml::table doc;
    try {
        doc = toml::parse(text, source);
    } catch (const toml::parse_error& e) {
        throw Error(fmt::format("{}:{}:{}: {}", source, e.source().begin.line, e.source().begin.column,
                                e.description()));
    }

    static const std::set<std::string> known{"run", "data", "preprocess", "chowder", "episeg", "extremes", "report"};
    for (const auto& [k, v] : doc) {
        std::string name(k.str());
        if (!known.count(name)) {
            if (v.is_table()) throw Error(fmt::format("{}: unknown section [{}]", source, name));
            throw Error(fmt::format("{}: key '{}' must sit inside a section", source, name));
        }
        if (!v.is_table()) throw Error(fmt::format("{}: '{}' must be a section", source, name));
    }

    const std::string src(source);
    auto section = [&](const char* name) { return Section(doc[name].as_table(), name, src); };

    RunConfig cfg;
    {
        Section s = section("run");
        s.read("seed", cfg.seed);
        s.read("threads", cfg.threads);
        s.read("out_dir", cfg.out_dir);
        s.finish();
    }
    {
        Section s = section("data");
        s.read("manifest", cfg.manifest);
        s.read("cells_dir", cfg.cells_dir);
        s.read("patch_dir", cfg.patch_dir);
        s.read("episeg_pairs", cfg.episeg_pairs);
        s.read("images_dir", cfg.images_dir);
        s.finish();
    }
    {
        Section s = section("preprocess");
        s.read("enabled", cfg.preprocess);
        s.read("tile_size_px", cfg.tile_size_px);
        s.read("min_tissue_frac", cfg.min_tissue_frac);
        s.read("downsample", cfg.downsample);
        s.read("min_saturation", cfg.min_saturation);
        s.read("min_component_px", cfg.min_component_px);
        s.finish();
    }
    {
        Section s = section("chowder");
        ChowderConfig& c = cfg.chowder;
        s.read("n_channels", c.n_channels);
        s.read("n_extremes", c.n_extremes);
        s.read("mlp_hidden", c.mlp_hidden);
        s.read("mlp_dropout", c.mlp_dropout);
        s.read("learning_rate", c.learning_rate);
        s.read("batch_size", c.batch_size);
        s.read("max_tiles", c.max_tiles);
        s.read("n_epochs", c.n_epochs);
        s.read("standardize", c.standardize);
        s.read("n_folds", cfg.n_folds);
        s.finish();
    }
    {
        Section s = section("episeg");
        s.read("model", cfg.episeg_model);
        s.read("select_C", cfg.episeg_select_C);
        s.read("C", cfg.episeg_C);
        s.read("C_grid", cfg.episeg_C_grid);
        s.read("n_folds", cfg.episeg_folds);
        s.read("patch_size_px", cfg.patch_size_px);
        s.read("context_px", cfg.context_px);
        s.read("threshold", cfg.threshold);
        s.finish();
    }
    {
        Section s = section("extremes");
        s.read("n", cfg.n_extremes);
        s.finish();
    }
    {
        Section s = section("report");
        s.read("bootstrap", cfg.bootstrap);
        s.read("level", cfg.level);
        s.finish();
    }

    try {
        cfg.chowder.validate();
    } catch (const Error& e) {
        throw Error(fmt::format("{}: {}", source, e.what()));
    }
    if (cfg.n_folds < 2) throw Error(fmt::format("{}: chowder.n_folds must be >= 2", source));
    if (cfg.threads < 0) throw Error(fmt::format("{}: run.threads must be >= 0", source));
    if (cfg.patch_size_px < 1 || cfg.tile_size_px % cfg.patch_size_px != 0)
        throw Error(fmt::format("{}: preprocess.tile_size_px must be a multiple of episeg.patch_size_px", source));
    if (cfg.context_px < cfg.tile_size_px)
        throw Error(fmt::format("{}: episeg.context_px must be >= preprocess.tile_size_px", source));
    if (!(cfg.episeg_C > 0.0)) throw Error(fmt::format("{}: episeg.C must be positive", source));
    for (double c : cfg.episeg_C_grid)
        if (!(c > 0.0)) throw Error(fmt::format("{}: episeg.C_grid values must be positive", source));
    if (cfg.episeg_C_grid.empty()) throw Error(fmt::format("{}: episeg.C_grid must not be empty", source));
    if (!(cfg.level > 0.0 && cfg.level < 1.0)) throw Error(fmt::format("{}: report.level must lie in (0,1)", source));
    return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
    RunConfig cfg = parse_config(read_text_file(path), path.string());
    const auto base = std::filesystem::absolute(path).parent_path();
    for (std::string* p : {&cfg.out_dir, &cfg.manifest, &cfg.cells_dir, &cfg.patch_dir, &cfg.episeg_pairs,
                           &cfg.images_dir, &cfg.episeg_model}) {
        if (!p->empty() && std::filesystem::path(*p).is_relative()) *p = (base / *p).lexically_normal().string();
    }
    return cfg;
}

std::string to_toml(const RunConfig& cfg) {
    std::string out;
    auto line = [&](std::string_view key, const std::string& value) { out += fmt::format("{} = {}\n", key, value); };
    auto b = [](bool v) { return std::string(v ? "true" : "false"); };

    out += "[run]\n";
    if (cfg.seed) line("seed", std::to_string(*cfg.seed));
    line("threads", std::to_string(cfg.threads));
    line("out_dir", quoted(cfg.out_dir));

    out += "\n[data]\n";
    line("manifest", quoted(cfg.manifest));
    line("cells_dir", quoted(cfg.cells_dir));
    line("patch_dir", quoted(cfg.patch_dir));
    line("episeg_pairs", quoted(cfg.episeg_pairs));
    line("images_dir", quoted(cfg.images_dir));

    out += "\n[preprocess]\n";
    line("enabled", b(cfg.preprocess));
    line("tile_size_px", std::to_string(cfg.tile_size_px));
    line("min_tissue_frac", toml_float(cfg.min_tissue_frac));
    line("downsample", std::to_string(cfg.downsample));
    line("min_saturation", toml_float(cfg.min_saturation));
    line("min_component_px", std::to_string(cfg.min_component_px));

    const ChowderConfig& c = cfg.chowder;
    out += "\n[chowder]\n";
    line("n_channels", std::to_string(c.n_channels));
    line("n_extremes", std::to_string(c.n_extremes));
    line("mlp_hidden", fmt::format("[{}]", fmt::join(c.mlp_hidden, ", ")));
    line("mlp_dropout", number_list(c.mlp_dropout));
    line("learning_rate", toml_float(c.learning_rate));
    line("batch_size", std::to_string(c.batch_size));
    line("max_tiles", std::to_string(c.max_tiles));
    line("n_epochs", std::to_string(c.n_epochs));
    line("standardize", b(c.standardize));
    line("n_folds", std::to_string(cfg.n_folds));

    out += "\n[episeg]\n";
    line("model", quoted(cfg.episeg_model));
    line("select_C", b(cfg.episeg_select_C));
    line("C", toml_float(cfg.episeg_C));
    line("C_grid", number_list(cfg.episeg_C_grid));
    line("n_folds", std::to_string(cfg.episeg_folds));
    line("patch_size_px", std::to_string(cfg.patch_size_px));
    line("context_px", std::to_string(cfg.context_px));
    line("threshold", toml_float(cfg.threshold));

    out += "\n[extremes]\n";
    line("n", std::to_string(cfg.n_extremes));

    out += "\n[report]\n";
    line("bootstrap", std::to_string(cfg.bootstrap));
    line("level", toml_float(cfg.level));
    return out;
}

std::vector<double> episeg_grid(const RunConfig& cfg) {
    if (cfg.episeg_select_C) return cfg.episeg_C_grid;
    return {cfg.episeg_C};
}

std::uint64_t resolve_seed(std::optional<std::uint64_t> flag, std::optional<std::uint64_t> config_seed) {
    if (flag) return *flag;
    if (config_seed) return *config_seed;
    if (const char* env = std::getenv("IMILIA_SEED"); env && *env) {
        const long long v = parse_int(env, "IMILIA_SEED");
        if (v < 0) throw Error("IMILIA_SEED must be a non-negative integer");
        return static_cast<std::uint64_t>(v);
    }
    return 0;
}

}  // namespace imilia
