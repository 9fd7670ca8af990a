#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>

#include "osteo/backbone.hpp"
#include "osteo/dataset.hpp"
#include "osteo/metrics.hpp"
#include "osteo/model.hpp"
#include "osteo/objective.hpp"
#include "osteo/radiomics.hpp"

namespace osteo::engine {

namespace fs = std::filesystem;
using nn::Matrix;

struct TrainConfig {
    std::string row = "full";
    fs::path data_dir = "data";
    fs::path features_csv = "features.csv";
    std::string id_regex = R"(^(Case-\d+))";
    /// Exported pretrained embeddings (tile_id,f0..); empty = builtin trunk.
    fs::path backbone_embeddings;

    model::EmbeddingConfig model;
    objective::LossConfig loss;
    data::AugmentationPolicy augmentation;

    double lr = 1e-4;
    double weight_decay = 1e-4;
    int batch_size = 16;
    int max_epochs = 50;
    int early_stop_patience = 10;
    std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
    /// SHA-256 over the canonical JSON form.
    std::string hash() const;
};

/// Loaded dataset plus the radiomic feature cache. Records every tile whose
/// pixels or features are read, so tests can assert split hygiene.
class TileStore {
public:
    TileStore(std::vector<data::LabeledTile> tiles, std::vector<radiomics::FeatureRow> features = {});

    static TileStore open(const fs::path& data_dir, const fs::path& features_csv, const std::string& id_regex);

    const std::vector<data::LabeledTile>& tiles() const noexcept { return tiles_; }
    bool has_features() const noexcept { return !features_.empty(); }

    /// RGB image resized to side x side; cached.
    const cv::Mat& image(const data::LabeledTile& tile, int side);
    const radiomics::RadiomicFeatureVector& features(const data::LabeledTile& tile);

    const std::set<std::string>& access_log() const noexcept { return accessed_; }
    void clear_access_log() { accessed_.clear(); }

private:
    std::vector<data::LabeledTile> tiles_;
    std::map<std::string, radiomics::RadiomicFeatureVector> features_;
    std::map<std::pair<std::string, int>, cv::Mat> images_;
    std::set<std::string> accessed_;
};

struct Batch {
    Matrix trunk;      // B x trunk_dim
    Matrix radiomics;  // B x 29 (standardized) or empty
    std::vector<int> labels;
};

struct ObjectiveValue {
    double total = 0.0;
    double loss_a = 0.0;  // flat loss in flat mode
    double loss_b = 0.0;
};

/// Forward pass and training objective for one batch. With `backward` the
/// gradients of every parameter (and the lambdas in uncertainty mode) are
/// accumulated; callers zero them first.
ObjectiveValue compute_objective(model::MultimodalNet& net, objective::UncertaintyParams& lambdas,
                                 const objective::ClassWeights& weights, const std::array<double, 3>& flat_weights,
                                 const objective::LossConfig& loss, const Batch& batch, bool backward);

struct Checkpoint {
    TrainConfig config;
    std::string config_hash;
    std::string split_hash;
    std::uint64_t seed = 0;
    model::MultimodalNet net;
    double lambda_a = 0.0;
    double lambda_b = 0.0;
    objective::ClassWeights class_weights;
    std::array<double, 3> flat_weights{1.0, 1.0, 1.0};
    std::optional<radiomics::FeatureStandardizer> standardizer;
    /// Hash of the sorted training tile ids the standardizer was fit on.
    std::string standardizer_provenance;
    int best_epoch = -1;
    std::string manifest_hash;

    nlohmann::json to_json() const;
    static Checkpoint from_json(const nlohmann::json& j);
    void save(const fs::path& path) const;
    static Checkpoint load(const fs::path& path);
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double best_val_loss = 0.0;
    double val_macro_f1 = 0.0;
    double best_val_macro_f1 = 0.0;
    double lambda_a = 0.0;
    double lambda_b = 0.0;
};

struct StepRecord {
    long step = 0;
    double loss_a = 0.0;
    double loss_b = 0.0;
    double lambda_a = 0.0;
    double lambda_b = 0.0;
    double joint = 0.0;
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<EpochRecord> history;
    std::vector<StepRecord> steps;
    /// Parameter groups whose values changed in the first optimizer step.
    std::map<std::string, bool> first_step_moved;
};

/// Hash of a set of tile ids, used for standardizer provenance.
std::string tile_set_hash(const std::vector<data::LabeledTile>& tiles);

/// Trains one seed on the train/val subsets. Writes checkpoint.json,
/// history.csv and loss_components.csv into `run_dir` when it is non-empty.
TrainResult train_one(const TrainConfig& config, std::uint64_t seed, const data::SplitSpec& split, TileStore& store,
                      const fs::path& run_dir = {}, const std::string& manifest_hash = {});

struct EvalResult {
    metrics::MetricTable table;
    std::vector<metrics::EvalRecord> records;
};

/// Composite three-way predictions for the given tiles; no parameter change.
std::vector<metrics::EvalRecord> predict(const Checkpoint& ckpt, TileStore& store,
                                         const std::vector<data::LabeledTile>& tiles);

/// Evaluates on the split's test patients. Throws IncompatibleCheckpoint if
/// the split or config hash does not match the checkpoint.
EvalResult evaluate(const Checkpoint& ckpt, const data::SplitSpec& split, TileStore& store);

struct GridRow {
    std::string id;
    std::string label;  // backbone column of the ablation table
    BackboneKind backbone;
    objective::LossMode loss;
    bool radiomics;
};

/// The seven configurations of the ablation table, in table order.
const std::vector<GridRow>& ablation_grid();

struct AblationConfig {
    TrainConfig base;
    std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
    std::vector<std::string> rows;  // empty = all seven
    std::optional<BackboneKind> backbone_override;
    fs::path runs_dir = "runs";
    fs::path split_file;

    static AblationConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

TrainConfig row_config(const TrainConfig& base, const GridRow& row, std::optional<BackboneKind> override_kind);

struct RowOutcome {
    GridRow row;
    std::vector<std::uint64_t> seeds_ok;
    std::vector<metrics::MetricTable> tables;
    std::map<std::uint64_t, std::string> failures;
    std::string split_hash;
    std::string config_hash;
};

struct AblationReport {
    std::vector<RowOutcome> rows;
    nlohmann::json to_json() const;
    std::string table1() const;
    std::string table2() const;
};

AblationReport run_ablation(const AblationConfig& cfg, const data::SplitSpec& split, TileStore& store,
                            const std::string& manifest_hash = {});

/// Rebuilds the report from metrics.json files under runs_dir.
AblationReport collect_report(const fs::path& runs_dir, const std::vector<std::uint64_t>& seeds);

/// Exclusive advisory lock file inside a run directory.
class RunLock {
public:
    explicit RunLock(const fs::path& dir);
    ~RunLock();
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    fs::path path_;
};

void write_json(const fs::path& path, const nlohmann::json& j);
nlohmann::json read_json(const fs::path& path);

}  // namespace osteo::engine
