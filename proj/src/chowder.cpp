#include "imilia/chowder.hpp"

#include "imilia/metrics.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <future>
#include <limits>
#include <map>
#include <numeric>
#include <tuple>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace imilia {

namespace fs = std::filesystem;

void ChowderConfig::validate() const {
    if (n_channels < 1) throw Error("chowder: n_channels (K) must be >= 1");
    if (n_extremes < 1) throw Error("chowder: n_extremes (r) must be >= 1");
    if (mlp_hidden.size() != mlp_dropout.size())
        throw Error("chowder: mlp_dropout must have one entry per hidden layer");
    for (int h : mlp_hidden)
        if (h < 1) throw Error("chowder: hidden layer widths must be >= 1");
    for (double p : mlp_dropout)
        if (!(p >= 0.0 && p < 1.0)) throw Error("chowder: dropout probabilities must lie in [0,1)");
    if (!(learning_rate > 0.0)) throw Error("chowder: learning rate must be positive");
    if (batch_size < 1) throw Error("chowder: batch size must be >= 1");
    if (max_tiles < 1) throw Error("chowder: max_tiles must be >= 1");
    if (n_epochs < 1) throw Error("chowder: n_epochs must be >= 1");
}

ChowderModel::ChowderModel(const ChowderConfig& cfg, std::size_t d) : config(cfg), input_dim(d) {
    cfg.validate();
    if (d == 0) throw Error("chowder: input dimension must be positive");
    std::size_t offset = n_channels() * d + n_channels();
    std::size_t in = cfg.extreme_width();
    std::vector<int> widths = cfg.mlp_hidden;
    widths.push_back(1);
    for (int w : widths) {
        Layer layer;
        layer.in = in;
        layer.out = static_cast<std::size_t>(w);
        layer.weight_offset = offset;
        layer.bias_offset = offset + layer.in * layer.out;
        offset = layer.bias_offset + layer.out;
        layers.push_back(layer);
        in = layer.out;
    }
    params.assign(offset, 0.0);
}

ChowderModel ChowderModel::initialize(const ChowderConfig& cfg, std::size_t d, std::uint64_t seed) {
    ChowderModel m(cfg, d);
    Rng rng(mix_seed(seed, 0x1417));
    const double scorer_bound = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t i = 0; i < m.scorer_bias_offset() + m.n_channels(); ++i)
        m.params[i] = rng.uniform(-scorer_bound, scorer_bound);
    for (const auto& layer : m.layers) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(layer.in));
        for (std::size_t i = layer.weight_offset; i < layer.bias_offset + layer.out; ++i)
            m.params[i] = rng.uniform(-bound, bound);
    }
    return m;
}

std::vector<std::size_t> select_extremes(std::span<const double> scores, int r) {
    if (scores.empty()) throw Error("select_extremes: no scores");
    const std::size_t n = scores.size();
    const auto rr = static_cast<std::size_t>(r);
    const std::size_t take = std::min(rr, n);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::vector<std::size_t> out;
    out.reserve(2 * rr);

    const auto desc = [&](std::size_t a, std::size_t b) {
        return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    };
    const auto asc = [&](std::size_t a, std::size_t b) {
        return scores[a] < scores[b] || (scores[a] == scores[b] && a < b);
    };
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take), idx.end(), desc);
    out.insert(out.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take));
    while (out.size() < rr) out.push_back(out.back());

    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take), idx.end(), asc);
    out.insert(out.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take));
    while (out.size() < 2 * rr) out.push_back(out.back());
    return out;
}

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double bce_loss(double logit, int label) {
    if (label != 0 && label != 1) throw Error("bce_loss: label must be 0 or 1");
    return std::max(logit, 0.0) - logit * label + std::log1p(std::exp(-std::fabs(logit)));
}

namespace {

/// Standardised tile row, or the raw row when the model is unstandardised.
void tile_input(const ChowderModel& model, const FeatureMatrix& tiles, std::size_t t, std::vector<double>& out) {
    const auto row = tiles.row(t);
    out.resize(row.size());
    if (model.feature_mean.empty()) {
        for (std::size_t j = 0; j < row.size(); ++j) out[j] = row[j];
    } else {
        for (std::size_t j = 0; j < row.size(); ++j)
            out[j] = (row[j] - model.feature_mean[j]) / model.feature_scale[j];
    }
}

}  // namespace

ChowderForward forward(const ChowderModel& model, const FeatureMatrix& tiles, bool train_mode, Rng* rng) {
    if (tiles.d != model.input_dim)
        throw Error(fmt::format("chowder: tile dimension {} does not match model dimension {}", tiles.d,
                                model.input_dim));
    if (tiles.n_tiles == 0) throw Error("chowder: slide has no tiles");
    if (train_mode && rng == nullptr) throw Error("chowder: training forward pass needs a generator");

    const std::size_t K = model.n_channels();
    const std::size_t n = tiles.n_tiles;
    const auto r2 = 2 * static_cast<std::size_t>(model.config.n_extremes);
    ChowderForward f;
    f.scores.resize(n * K);
    std::vector<double> x;
    for (std::size_t t = 0; t < n; ++t) {
        tile_input(model, tiles, t, x);
        for (std::size_t k = 0; k < K; ++k) {
            const auto w = model.scorer_weights(k);
            double s = model.scorer_bias(k);
            for (std::size_t j = 0; j < x.size(); ++j) s += w[j] * x[j];
            f.scores[t * K + k] = s;
        }
    }

    f.selected.resize(K * r2);
    f.extreme_scores.resize(K * r2);
    std::vector<double> channel(n);
    for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t t = 0; t < n; ++t) channel[t] = f.scores[t * K + k];
        const auto sel = select_extremes(channel, model.config.n_extremes);
        for (std::size_t j = 0; j < r2; ++j) {
            f.selected[k * r2 + j] = sel[j];
            f.extreme_scores[k * r2 + j] = channel[sel[j]];
        }
    }

    const double* p = model.params.data();
    std::vector<double> act = f.extreme_scores;
    for (std::size_t l = 0; l + 1 < model.layers.size(); ++l) {
        const auto& layer = model.layers[l];
        std::vector<double> h(layer.out);
        for (std::size_t o = 0; o < layer.out; ++o) {
            double s = p[layer.bias_offset + o];
            const double* w = p + layer.weight_offset + o * layer.in;
            for (std::size_t i = 0; i < layer.in; ++i) s += w[i] * act[i];
            h[o] = sigmoid(s);
        }
        const double drop = model.config.mlp_dropout[l];
        act = h;
        if (train_mode && drop > 0.0) {
            std::vector<double> mask(layer.out);
            const double keep_scale = 1.0 / (1.0 - drop);
            for (std::size_t o = 0; o < layer.out; ++o) {
                mask[o] = rng->uniform() >= drop ? keep_scale : 0.0;
                act[o] *= mask[o];
            }
            f.masks.push_back(std::move(mask));
        }
        f.hidden.push_back(std::move(h));
    }
    const auto& last = model.layers.back();
    double logit = p[last.bias_offset];
    for (std::size_t i = 0; i < last.in; ++i) logit += p[last.weight_offset + i] * act[i];
    f.logit = logit;
    return f;
}

std::vector<double> backward(const ChowderModel& model, const FeatureMatrix& tiles, const ChowderForward& fwd,
                             int label) {
    std::vector<double> grad(model.params.size(), 0.0);
    const double* p = model.params.data();
    const std::size_t n_hidden = model.layers.size() - 1;
    const bool dropout = !fwd.masks.empty();

    // Post-dropout activations feeding each dense layer.
    std::vector<std::vector<double>> inputs(model.layers.size());
    inputs[0] = fwd.extreme_scores;
    for (std::size_t l = 0; l < n_hidden; ++l) {
        inputs[l + 1] = fwd.hidden[l];
        if (dropout)
            for (std::size_t o = 0; o < inputs[l + 1].size(); ++o) inputs[l + 1][o] *= fwd.masks[l][o];
    }

    std::vector<double> delta{sigmoid(fwd.logit) - static_cast<double>(label)};
    for (std::size_t l = model.layers.size(); l-- > 0;) {
        const auto& layer = model.layers[l];
        const auto& in = inputs[l];
        std::vector<double> d_in(layer.in, 0.0);
        for (std::size_t o = 0; o < layer.out; ++o) {
            const double g = delta[o];
            grad[layer.bias_offset + o] += g;
            const double* w = p + layer.weight_offset + o * layer.in;
            double* gw = grad.data() + layer.weight_offset + o * layer.in;
            for (std::size_t i = 0; i < layer.in; ++i) {
                gw[i] += g * in[i];
                d_in[i] += g * w[i];
            }
        }
        if (l == 0) {
            delta = std::move(d_in);
            break;
        }
        // Through dropout and the sigmoid of hidden layer l - 1.
        const auto& h = fwd.hidden[l - 1];
        for (std::size_t i = 0; i < layer.in; ++i) {
            double g = d_in[i];
            if (dropout) g *= fwd.masks[l - 1][i];
            d_in[i] = g * h[i] * (1.0 - h[i]);
        }
        delta = std::move(d_in);
    }

    // delta now holds d loss / d extreme_scores; route it to the selected tiles.
    const std::size_t K = model.n_channels();
    const auto r2 = 2 * static_cast<std::size_t>(model.config.n_extremes);
    const std::size_t d = model.input_dim;
    std::vector<double> x;
    for (std::size_t k = 0; k < K; ++k) {
        double* gw = grad.data() + k * d;
        for (std::size_t j = 0; j < r2; ++j) {
            const double g = delta[k * r2 + j];
            if (g == 0.0) continue;
            tile_input(model, tiles, fwd.selected[k * r2 + j], x);
            for (std::size_t i = 0; i < d; ++i) gw[i] += g * x[i];
            grad[model.scorer_bias_offset() + k] += g;
        }
    }
    return grad;
}

LossGradient loss_and_gradient(const ChowderModel& model, const FeatureMatrix& tiles, int label) {
    const auto fwd = forward(model, tiles, false, nullptr);
    return {bce_loss(fwd.logit, label), backward(model, tiles, fwd, label)};
}

double predict_probability(const ChowderModel& model, const FeatureMatrix& tiles) {
    return sigmoid(forward(model, tiles).logit);
}

namespace {

FeatureMatrix subsample(const FeatureMatrix& tiles, std::size_t max_tiles, Rng& rng) {
    if (tiles.n_tiles <= max_tiles) return tiles;
    std::vector<std::size_t> idx(tiles.n_tiles);
    std::iota(idx.begin(), idx.end(), 0);
    // Partial Fisher-Yates: the first max_tiles entries are a uniform sample.
    for (std::size_t i = 0; i < max_tiles; ++i) std::swap(idx[i], idx[i + rng.below(tiles.n_tiles - i)]);
    idx.resize(max_tiles);
    std::sort(idx.begin(), idx.end());
    FeatureMatrix out;
    out.n_tiles = max_tiles;
    out.d = tiles.d;
    out.data.reserve(max_tiles * tiles.d);
    for (std::size_t t : idx) {
        const auto row = tiles.row(t);
        out.data.insert(out.data.end(), row.begin(), row.end());
        out.tile_ids.push_back(tiles.tile_ids[t]);
    }
    return out;
}

double safe_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    const auto pos = std::count(labels.begin(), labels.end(), 1);
    if (pos == 0 || pos == static_cast<std::ptrdiff_t>(labels.size())) return std::numeric_limits<double>::quiet_NaN();
    return roc_auc(scores, labels);
}

void fit_standardization(ChowderModel& model, std::span<const Bag* const> train) {
    const std::size_t d = model.input_dim;
    std::vector<double> sum(d, 0.0), sum_sq(d, 0.0);
    double count = 0.0;
    for (const Bag* bag : train) {
        for (std::size_t t = 0; t < bag->features.n_tiles; ++t) {
            const auto row = bag->features.row(t);
            for (std::size_t j = 0; j < d; ++j) {
                sum[j] += row[j];
                sum_sq[j] += static_cast<double>(row[j]) * row[j];
            }
        }
        count += static_cast<double>(bag->features.n_tiles);
    }
    model.feature_mean.resize(d);
    model.feature_scale.resize(d);
    for (std::size_t j = 0; j < d; ++j) {
        const double mean = sum[j] / count;
        const double var = std::max(0.0, sum_sq[j] / count - mean * mean);
        model.feature_mean[j] = mean;
        model.feature_scale[j] = var > 0.0 ? std::sqrt(var) : 1.0;
    }
}

struct Adam {
    double lr, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::vector<double> m, v;
    long step = 0;

    Adam(double learning_rate, std::size_t n) : lr(learning_rate), m(n, 0.0), v(n, 0.0) {}

    void update(std::vector<double>& params, const std::vector<double>& grad) {
        ++step;
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
        for (std::size_t i = 0; i < params.size(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
            params[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
        }
    }
};

}  // namespace

TrainResult train_fold(std::span<const Bag* const> train, std::span<const Bag* const> valid,
                       const ChowderConfig& cfg) {
    cfg.validate();
    if (train.empty()) throw Error("train_fold: empty training set");
    bool has[2] = {false, false};
    for (const Bag* b : train) {
        if (b->label != 0 && b->label != 1) throw Error(fmt::format("train_fold: slide '{}' is unlabeled", b->slide_id));
        has[b->label] = true;
    }
    if (!has[0] || !has[1]) throw Error("train_fold: training set contains a single class");
    const std::size_t d = train.front()->features.d;

    TrainResult result;
    ChowderModel model = ChowderModel::initialize(cfg, d, cfg.seed);
    if (cfg.standardize) fit_standardization(model, train);
    Adam adam(cfg.learning_rate, model.params.size());
    Rng rng(mix_seed(cfg.seed, 0x7A41));

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::pair<double, double> best_metric{-std::numeric_limits<double>::infinity(), 0.0};
    std::vector<double> grad_sum(model.params.size());

    for (int epoch = 1; epoch <= cfg.n_epochs; ++epoch) {
        rng.shuffle(order);
        EpochLog log;
        log.epoch = epoch;
        std::vector<double> train_scores;
        std::vector<int> train_labels;
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            std::fill(grad_sum.begin(), grad_sum.end(), 0.0);
            for (std::size_t b = start; b < stop; ++b) {
                const Bag& bag = *train[order[b]];
                const FeatureMatrix sample = subsample(bag.features, static_cast<std::size_t>(cfg.max_tiles), rng);
                const auto fwd = forward(model, sample, true, &rng);
                const auto g = backward(model, sample, fwd, bag.label);
                for (std::size_t i = 0; i < g.size(); ++i) grad_sum[i] += g[i];
                loss_sum += bce_loss(fwd.logit, bag.label);
                train_scores.push_back(fwd.logit);
                train_labels.push_back(bag.label);
            }
            const double inv = 1.0 / static_cast<double>(stop - start);
            for (auto& g : grad_sum) g *= inv;
            adam.update(model.params, grad_sum);
        }
        log.train_loss = loss_sum / static_cast<double>(train.size());
        log.train_auc = safe_auc(train_scores, train_labels);

        std::vector<double> valid_scores;
        std::vector<int> valid_labels;
        double valid_loss = 0.0;
        for (const Bag* bag : valid) {
            const double logit = forward(model, bag->features).logit;
            valid_loss += bce_loss(logit, bag->label);
            valid_scores.push_back(logit);
            valid_labels.push_back(bag->label);
        }
        log.valid_loss = valid.empty() ? std::numeric_limits<double>::quiet_NaN()
                                       : valid_loss / static_cast<double>(valid.size());
        log.valid_auc = safe_auc(valid_scores, valid_labels);
        result.log.push_back(log);

        // Validation AUC first, validation loss breaking ties (AUC saturates
        // at 1 long before the model stops improving). Without a validation
        // set the last epoch wins.
        std::pair<double, double> metric{static_cast<double>(epoch), 0.0};
        if (!std::isnan(log.valid_auc))
            metric = {log.valid_auc, -log.valid_loss};
        else if (!valid.empty())
            metric = {-log.valid_loss, 0.0};
        if (metric > best_metric) {
            best_metric = metric;
            result.best_epoch = epoch;
            result.model = model;
        }
    }
    return result;
}

CrossValidationResult cross_validate(std::span<const Bag> bags, const FoldAssignment& folds,
                                     const ChowderConfig& cfg, int threads) {
    cfg.validate();
    const int n_folds = folds.n_folds;
    if (n_folds < 2) throw Error("cross_validate: need at least 2 folds");
    std::vector<int> fold_of(bags.size());
    for (std::size_t i = 0; i < bags.size(); ++i) fold_of[i] = folds.fold_of(bags[i].slide_id);

    const auto run_fold = [&](int f) {
        const int valid_fold = (f + 1) % n_folds;
        std::vector<const Bag*> train, valid;
        for (std::size_t i = 0; i < bags.size(); ++i) {
            if (fold_of[i] == f) continue;
            (fold_of[i] == valid_fold && n_folds > 2 ? valid : train).push_back(&bags[i]);
        }
        ChowderConfig fold_cfg = cfg;
        fold_cfg.seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(f));
        return train_fold(train, valid, fold_cfg);
    };

    CrossValidationResult out;
    out.folds.resize(static_cast<std::size_t>(n_folds));
    const int workers = std::max(1, threads);
    for (int first = 0; first < n_folds; first += workers) {
        std::vector<std::future<TrainResult>> pending;
        for (int f = first; f < std::min(n_folds, first + workers); ++f)
            pending.push_back(std::async(workers > 1 ? std::launch::async : std::launch::deferred, run_fold, f));
        for (int f = first; f < std::min(n_folds, first + workers); ++f)
            out.folds[static_cast<std::size_t>(f)] = pending[static_cast<std::size_t>(f - first)].get();
    }

    std::vector<double> scores;
    std::vector<int> labels;
    for (std::size_t i = 0; i < bags.size(); ++i) {
        const auto& model = out.folds[static_cast<std::size_t>(fold_of[i])].model;
        const double prob = predict_probability(model, bags[i].features);
        out.out_of_fold.push_back({bags[i].slide_id, fold_of[i], bags[i].label, prob});
        scores.push_back(prob);
        labels.push_back(bags[i].label);
    }
    out.auc = safe_auc(scores, labels);
    return out;
}

EnsembleOutput ensemble_predict(std::span<const ChowderModel> models, const FeatureMatrix& tiles) {
    if (models.empty()) throw Error("ensemble_predict: no models");
    EnsembleOutput out;
    const std::size_t K = models.front().n_channels();
    for (const auto& m : models)
        if (m.input_dim != models.front().input_dim || m.n_channels() != K)
            throw Error("ensemble_predict: models disagree on dimensions");
    out.scores.assign(tiles.n_tiles * K, 0.0);
    double prob_sum = 0.0;
    for (const auto& m : models) {
        auto fwd = forward(m, tiles);
        const double prob = sigmoid(fwd.logit);
        out.member_probabilities.push_back(prob);
        prob_sum += prob;
        for (std::size_t i = 0; i < fwd.scores.size(); ++i) out.scores[i] += fwd.scores[i];
        out.member_scores.push_back(std::move(fwd.scores));
    }
    const double inv = static_cast<double>(models.size());
    out.probability = prob_sum / inv;
    for (auto& s : out.scores) s /= inv;
    return out;
}

void append_scores(TileScoreTable& table, const std::string& slide_id, const FeatureMatrix& tiles,
                   const EnsembleOutput& output) {
    const std::size_t n = tiles.n_tiles;
    if (n == 0 || output.scores.size() % n != 0) throw Error("append_scores: score table does not match tiles");
    const std::size_t K = output.scores.size() / n;
    for (std::size_t t = 0; t < n; ++t)
        for (std::size_t k = 0; k < K; ++k) {
            for (std::size_t m = 0; m < output.member_scores.size(); ++m)
                table.rows.push_back({slide_id, tiles.tile_ids[t], static_cast<int>(k), std::to_string(m),
                                      output.member_scores[m][t * K + k]});
            table.rows.push_back({slide_id, tiles.tile_ids[t], static_cast<int>(k), "ensemble",
                                  output.scores[t * K + k]});
        }
}

void write_score_table(const TileScoreTable& table, const fs::path& path) {
    std::string out = "slide_id,tile_id,channel,model_id,score\n";
    for (const auto& r : table.rows)
        out += fmt::format("{},{},{},{},{}\n", r.slide_id, r.tile_id, r.channel, r.model_id, format_double(r.score));
    write_text_file(path, out);
}

TileScoreTable read_score_table(const fs::path& path) {
    const CsvTable csv = read_csv(path);
    const auto c_s = csv.column("slide_id"), c_t = csv.column("tile_id"), c_c = csv.column("channel"),
               c_m = csv.column("model_id"), c_v = csv.column("score");
    TileScoreTable table;
    table.rows.reserve(csv.rows.size());
    for (const auto& r : csv.rows)
        table.rows.push_back({r[c_s], r[c_t], static_cast<int>(parse_int(r[c_c], "channel")), r[c_m],
                              parse_double(r[c_v], "score")});
    return table;
}

ExtremeSide parse_side(std::string_view text) {
    if (text == "min") return ExtremeSide::min;
    if (text == "max") return ExtremeSide::max;
    throw Error(fmt::format("invalid side '{}' (expected min or max)", text));
}

std::string_view to_string(ExtremeSide side) { return side == ExtremeSide::min ? "min" : "max"; }

std::vector<ExtremeTile> extract_extremes(const TileScoreTable& table, std::size_t n, ExtremeSide side) {
    if (table.rows.empty()) throw Error("extract_extremes: empty score table");
    using Key = std::pair<std::string, std::string>;
    struct Acc {
        std::map<int, double> ensemble;
        std::map<int, std::pair<double, int>> members;  // sum, count
    };
    std::map<Key, Acc> tiles;
    for (const auto& r : table.rows) {
        auto& acc = tiles[{r.slide_id, r.tile_id}];
        if (r.model_id == "ensemble") {
            acc.ensemble[r.channel] = r.score;
        } else {
            auto& m = acc.members[r.channel];
            m.first += r.score;
            ++m.second;
        }
    }
    std::vector<ExtremeTile> all;
    all.reserve(tiles.size());
    for (const auto& [key, acc] : tiles) {
        double sum = 0.0;
        std::size_t channels = 0;
        if (!acc.ensemble.empty()) {
            for (const auto& [k, v] : acc.ensemble) sum += v;
            channels = acc.ensemble.size();
        } else {
            for (const auto& [k, v] : acc.members) sum += v.first / v.second;
            channels = acc.members.size();
        }
        all.push_back({key.first, key.second, sum / static_cast<double>(channels)});
    }
    // `all` is in (slide_id, tile_id) order, so a stable sort keeps the
    // lexicographic tie-break.
    if (side == ExtremeSide::max)
        std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
    else
        std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.score < b.score; });
    if (n > all.size())
        spdlog::warn("extract_extremes: requested {} tiles but only {} are available", n, all.size());
    all.resize(std::min(n, all.size()));
    return all;
}

void write_extremes(const std::vector<ExtremeTile>& tiles, ExtremeSide side, const fs::path& path) {
    std::string out = "side,slide_id,tile_id,score\n";
    for (const auto& t : tiles)
        out += fmt::format("{},{},{},{}\n", to_string(side), t.slide_id, t.tile_id, format_double(t.score));
    write_text_file(path, out);
}

std::vector<SideTile> read_extremes(const fs::path& path) {
    const CsvTable csv = read_csv(path);
    const auto c_side = csv.column("side"), c_s = csv.column("slide_id"), c_t = csv.column("tile_id"),
               c_v = csv.column("score");
    std::vector<SideTile> out;
    for (const auto& r : csv.rows)
        out.push_back({parse_side(r[c_side]), {r[c_s], r[c_t], parse_double(r[c_v], "score")}});
    return out;
}

namespace {

nlohmann::json config_to_json(const ChowderConfig& c) {
    return {{"n_channels", c.n_channels}, {"n_extremes", c.n_extremes},     {"mlp_hidden", c.mlp_hidden},
            {"mlp_dropout", c.mlp_dropout}, {"learning_rate", c.learning_rate}, {"batch_size", c.batch_size},
            {"max_tiles", c.max_tiles},   {"n_epochs", c.n_epochs},         {"standardize", c.standardize},
            {"seed", c.seed}};
}

ChowderConfig config_from_json(const nlohmann::json& j) {
    ChowderConfig c;
    c.n_channels = j.at("n_channels").get<int>();
    c.n_extremes = j.at("n_extremes").get<int>();
    c.mlp_hidden = j.at("mlp_hidden").get<std::vector<int>>();
    c.mlp_dropout = j.at("mlp_dropout").get<std::vector<double>>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.batch_size = j.at("batch_size").get<int>();
    c.max_tiles = j.at("max_tiles").get<int>();
    c.n_epochs = j.at("n_epochs").get<int>();
    c.standardize = j.at("standardize").get<bool>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

void append_floats(std::string& out, const std::vector<double>& values) {
    for (double v : values) {
        std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
        if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
        char buf[4];
        std::memcpy(buf, &bits, 4);
        out.append(buf, 4);
    }
}

}  // namespace

void save_model(const ChowderModel& model, const fs::path& base_in, int fold) {
    const fs::path base = container_base(base_in);
    nlohmann::json header = {{"format", "imilia-chowder"},
                             {"version", 1},
                             {"dtype", "float32-le"},
                             {"config", config_to_json(model.config)},
                             {"input_dim", model.input_dim},
                             {"n_params", model.params.size()},
                             {"standardized", !model.feature_mean.empty()},
                             {"seed", model.config.seed}};
    if (fold >= 0) header["fold"] = fold;
    fs::path json_path = base, bin_path = base;
    json_path += ".json";
    bin_path += ".bin";
    write_text_file(json_path, header.dump(2) + "\n");
    std::string payload;
    append_floats(payload, model.params);
    append_floats(payload, model.feature_mean);
    append_floats(payload, model.feature_scale);
    write_text_file(bin_path, payload);
}

ChowderModel load_model(const fs::path& path) {
    const fs::path base = container_base(path);
    fs::path json_path = base, bin_path = base;
    json_path += ".json";
    bin_path += ".bin";
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(read_text_file(json_path));
    } catch (const nlohmann::json::exception& e) {
        throw Error(fmt::format("'{}': {}", json_path.string(), e.what()));
    }
    if (header.value("format", "") != "imilia-chowder")
        throw Error(fmt::format("'{}' is not a Chowder model", json_path.string()));
    ChowderModel model(config_from_json(header.at("config")), header.at("input_dim").get<std::size_t>());
    if (header.at("n_params").get<std::size_t>() != model.params.size())
        throw Error(fmt::format("'{}': parameter count does not match the configuration", json_path.string()));
    const bool standardized = header.value("standardized", false);
    const std::size_t n_floats = model.params.size() + (standardized ? 2 * model.input_dim : 0);
    const std::string payload = read_text_file(bin_path);
    if (payload.size() != n_floats * 4)
        throw Error(fmt::format("'{}': expected {} bytes, found {}", bin_path.string(), n_floats * 4, payload.size()));
    std::vector<double> values(n_floats);
    for (std::size_t i = 0; i < n_floats; ++i) {
        std::uint32_t bits = 0;
        std::memcpy(&bits, payload.data() + 4 * i, 4);
        if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
        values[i] = std::bit_cast<float>(bits);
        if (!std::isfinite(values[i])) throw Error(fmt::format("'{}': non-finite parameter", bin_path.string()));
    }
    std::copy(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(model.params.size()), model.params.begin());
    if (standardized) {
        const auto off = static_cast<std::ptrdiff_t>(model.params.size());
        const auto d = static_cast<std::ptrdiff_t>(model.input_dim);
        model.feature_mean.assign(values.begin() + off, values.begin() + off + d);
        model.feature_scale.assign(values.begin() + off + d, values.end());
    }
    return model;
}

std::vector<ChowderModel> load_models(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw Error(fmt::format("model directory '{}' not found", dir.string()));
    std::vector<fs::path> headers;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.path().extension() != ".json") continue;
        try {
            const auto j = nlohmann::json::parse(read_text_file(entry.path()));
            if (j.is_object() && j.value("format", "") == "imilia-chowder") headers.push_back(entry.path());
        } catch (const nlohmann::json::exception&) {
        }
    }
    std::sort(headers.begin(), headers.end());
    if (headers.empty()) throw Error(fmt::format("no Chowder models in '{}'", dir.string()));
    std::vector<ChowderModel> models;
    for (const auto& h : headers) models.push_back(load_model(h));
    return models;
}

}  // namespace imilia
