#pragma once

#include "imilia/common.hpp"
#include "imilia/ingest.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace imilia {

/// Multi-channel Chowder hyperparameters. Defaults are the published
/// training configuration; n_epochs is our own choice.
struct ChowderConfig {
    int n_channels = 5;                       // K parallel tile scorers
    int n_extremes = 25;                      // r kept per side and channel
    std::vector<int> mlp_hidden{128, 64};
    std::vector<double> mlp_dropout{0.5, 0.5};
    double learning_rate = 0.01;
    int batch_size = 256;                     // slides per Adam step
    int max_tiles = 1000;                     // training-time tile subsample per slide
    int n_epochs = 30;
    bool standardize = false;                 // per-dimension standardisation fitted on train bags
    std::uint64_t seed = 0;

    void validate() const;
    /// Width of the MLP input: 2 * r * K.
    std::size_t extreme_width() const { return 2u * static_cast<std::size_t>(n_extremes * n_channels); }
};

/// All parameters live in one flat vector (the layout Adam and the model
/// file use):
///   [K x d scorer weights][K scorer biases]
///   then per dense layer [out x in weights][out biases]
/// Dense layers map 2rK -> hidden... -> 1.
struct ChowderModel {
    struct Layer {
        std::size_t in = 0, out = 0;
        std::size_t weight_offset = 0, bias_offset = 0;
    };

    ChowderConfig config;
    std::size_t input_dim = 0;
    std::vector<double> params;
    std::vector<Layer> layers;
    std::vector<double> feature_mean;   // empty unless config.standardize
    std::vector<double> feature_scale;

    ChowderModel() = default;
    /// Zero-initialised model with the layout for `d`-dimensional tiles.
    ChowderModel(const ChowderConfig& cfg, std::size_t d);

    /// Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.
    static ChowderModel initialize(const ChowderConfig& cfg, std::size_t d, std::uint64_t seed);

    std::size_t n_channels() const { return static_cast<std::size_t>(config.n_channels); }
    std::span<const double> scorer_weights(std::size_t k) const {
        return {params.data() + k * input_dim, input_dim};
    }
    std::span<double> scorer_weights(std::size_t k) { return {params.data() + k * input_dim, input_dim}; }
    double scorer_bias(std::size_t k) const { return params[n_channels() * input_dim + k]; }
    std::size_t scorer_bias_offset() const { return n_channels() * input_dim; }
};

/// Indices of the r largest (descending) followed by the r smallest
/// (ascending) scores. Ties go to the lower index. When fewer than r scores
/// exist each group is padded by repeating its last entry.
std::vector<std::size_t> select_extremes(std::span<const double> scores, int r);

struct ChowderForward {
    double logit = 0.0;
    std::vector<double> scores;               // n_tiles x K, row-major
    std::vector<std::size_t> selected;        // K x 2r tile indices
    std::vector<double> extreme_scores;       // MLP input, K x 2r
    std::vector<std::vector<double>> hidden;  // post-activation, pre-dropout
    std::vector<std::vector<double>> masks;   // dropout multipliers (empty in eval mode)
};

/// Eval mode when `train_mode` is false; dropout needs `rng` otherwise.
ChowderForward forward(const ChowderModel& model, const FeatureMatrix& tiles, bool train_mode = false,
                       Rng* rng = nullptr);

double sigmoid(double x);
/// Binary cross-entropy on a logit, computed without overflow.
double bce_loss(double logit, int label);

/// Gradient of bce_loss(forward(...).logit, label) for a forward pass. The
/// selected tile set is held fixed, so only selected tiles receive gradient.
std::vector<double> backward(const ChowderModel& model, const FeatureMatrix& tiles, const ChowderForward& fwd,
                             int label);

struct LossGradient {
    double loss = 0.0;
    std::vector<double> gradient;
};
/// Eval-mode loss and gradient.
LossGradient loss_and_gradient(const ChowderModel& model, const FeatureMatrix& tiles, int label);

double predict_probability(const ChowderModel& model, const FeatureMatrix& tiles);

struct Bag {
    std::string slide_id;
    FeatureMatrix features;
    int label = 0;
};

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    double train_auc = 0.0;  // NaN when undefined
    double valid_loss = 0.0;
    double valid_auc = 0.0;
};

struct TrainResult {
    ChowderModel model;
    std::vector<EpochLog> log;
    int best_epoch = 0;
};

/// Adam training with per-epoch tile subsampling and best-validation
/// checkpointing (validation AUC with validation loss breaking ties, then
/// loss alone, then the last epoch).
TrainResult train_fold(std::span<const Bag* const> train, std::span<const Bag* const> valid,
                       const ChowderConfig& cfg);

struct OutOfFoldPrediction {
    std::string slide_id;
    int fold = 0;
    int label = 0;
    double probability = 0.0;
};

struct CrossValidationResult {
    std::vector<TrainResult> folds;
    std::vector<OutOfFoldPrediction> out_of_fold;
    double auc = 0.0;
};

/// One model per fold, trained without that fold. The fold after it
/// (cyclically) serves as validation for checkpoint selection.
CrossValidationResult cross_validate(std::span<const Bag> bags, const FoldAssignment& folds,
                                     const ChowderConfig& cfg, int threads = 1);

struct EnsembleOutput {
    double probability = 0.0;
    std::vector<double> member_probabilities;
    std::vector<std::vector<double>> member_scores;  // per model, n_tiles x K
    std::vector<double> scores;                      // mean over models, n_tiles x K
};

EnsembleOutput ensemble_predict(std::span<const ChowderModel> models, const FeatureMatrix& tiles);

struct TileScoreRow {
    std::string slide_id;
    std::string tile_id;
    int channel = 0;
    std::string model_id;  // fold index or "ensemble"
    double score = 0.0;
};

struct TileScoreTable {
    std::vector<TileScoreRow> rows;
};

/// Appends per-model rows (model_id = member index) and "ensemble" rows.
void append_scores(TileScoreTable& table, const std::string& slide_id, const FeatureMatrix& tiles,
                   const EnsembleOutput& output);
void write_score_table(const TileScoreTable& table, const std::filesystem::path& path);
TileScoreTable read_score_table(const std::filesystem::path& path);

enum class ExtremeSide { min, max };
ExtremeSide parse_side(std::string_view text);
std::string_view to_string(ExtremeSide side);

struct ExtremeTile {
    std::string slide_id;
    std::string tile_id;
    double score = 0.0;
};

/// Top-n (max) or bottom-n (min) tiles by channel-averaged ensemble score.
/// Tables without ensemble rows fall back to the mean over the rows present.
/// Ties go to the lexicographically smaller (slide_id, tile_id).
std::vector<ExtremeTile> extract_extremes(const TileScoreTable& table, std::size_t n, ExtremeSide side);

void write_extremes(const std::vector<ExtremeTile>& tiles, ExtremeSide side, const std::filesystem::path& path);

struct SideTile {
    ExtremeSide side;
    ExtremeTile tile;
};
std::vector<SideTile> read_extremes(const std::filesystem::path& path);

/// `<base>.json` header (config, dims, seed) + `<base>.bin` float32 payload.
void save_model(const ChowderModel& model, const std::filesystem::path& base, int fold = -1);
ChowderModel load_model(const std::filesystem::path& path);
/// Every Chowder model header in `dir`, in filename order.
std::vector<ChowderModel> load_models(const std::filesystem::path& dir);

}  // namespace imilia
