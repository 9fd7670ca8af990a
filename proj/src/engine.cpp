#include "osteo/engine.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <fmt/format.h>
#include <opencv2/imgproc.hpp>
#include <spdlog/spdlog.h>

#include "osteo/errors.hpp"
#include "osteo/hashing.hpp"
#include "osteo/manifest.hpp"

namespace osteo::engine {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) { return splitmix(splitmix(seed) ^ stream); }

std::string fmt_double(double v) { return fmt::format("{:.17g}", v); }

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void TrainConfig::validate() const {
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
    if (early_stop_patience < 1) throw ConfigError("early_stop_patience must be >= 1");
    if (!(loss.eta > 0.0)) throw ConfigError("eta must be positive");
    if (model.d < 2) throw ConfigError("embedding dimension must be >= 2");
    const bool flat_head = model.head == model::HeadType::flat3;
    const bool flat_loss = loss.mode == objective::LossMode::flat3;
    if (flat_head != flat_loss) throw ConfigError("flat3 loss requires the flat3 head and vice versa");
    std::set<std::uint64_t> uniq(seeds.begin(), seeds.end());
    if (uniq.size() != seeds.size()) throw ConfigError("seeds must be pairwise distinct");
}

nlohmann::json TrainConfig::to_json() const {
    return {{"row", row},
            {"data_dir", data_dir.string()},
            {"features_csv", features_csv.string()},
            {"id_regex", id_regex},
            {"backbone_embeddings", backbone_embeddings.string()},
            {"model", model.to_json()},
            {"loss", {{"eta", loss.eta}, {"mode", std::string(objective::to_string(loss.mode))}}},
            {"augmentation",
             {{"enabled", augmentation.enabled},
              {"horizontal_flip_prob", augmentation.horizontal_flip_prob},
              {"rotation_range_degrees", augmentation.rotation_range_degrees}}},
            {"optimizer", {{"name", "adamw"}, {"lr", lr}, {"weight_decay", weight_decay}}},
            {"batch_size", batch_size},
            {"max_epochs", max_epochs},
            {"early_stop_patience", early_stop_patience},
            {"seeds", seeds}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    try {
        c.row = j.value("row", c.row);
        c.data_dir = j.value("data_dir", c.data_dir.string());
        c.features_csv = j.value("features_csv", c.features_csv.string());
        c.id_regex = j.value("id_regex", c.id_regex);
        c.backbone_embeddings = j.value("backbone_embeddings", std::string());
        if (j.contains("model")) c.model = model::EmbeddingConfig::from_json(j.at("model"));
        c.model.pretrained = !c.backbone_embeddings.empty();
        if (j.contains("loss")) {
            c.loss.eta = j["loss"].value("eta", c.loss.eta);
            c.loss.mode = objective::loss_mode_from_string(
                j["loss"].value("mode", std::string(objective::to_string(c.loss.mode))));
        }
        if (j.contains("augmentation")) {
            const auto& a = j.at("augmentation");
            c.augmentation.enabled = a.value("enabled", c.augmentation.enabled);
            c.augmentation.horizontal_flip_prob = a.value("horizontal_flip_prob", c.augmentation.horizontal_flip_prob);
            c.augmentation.rotation_range_degrees =
                a.value("rotation_range_degrees", c.augmentation.rotation_range_degrees);
        }
        if (j.contains("optimizer")) {
            c.lr = j["optimizer"].value("lr", c.lr);
            c.weight_decay = j["optimizer"].value("weight_decay", c.weight_decay);
        }
        c.batch_size = j.value("batch_size", c.batch_size);
        c.max_epochs = j.value("max_epochs", c.max_epochs);
        c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
        if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed training config: ") + e.what());
    }
    c.validate();
    return c;
}

std::string TrainConfig::hash() const { return sha256_hex(to_json().dump()); }

// ---------------------------------------------------------------------------
// Data access

TileStore::TileStore(std::vector<data::LabeledTile> tiles, std::vector<radiomics::FeatureRow> features)
    : tiles_(std::move(tiles)) {
    for (auto& row : features) features_.emplace(row.tile_id, row.features);
}

TileStore TileStore::open(const fs::path& data_dir, const fs::path& features_csv, const std::string& id_regex) {
    data::IngestOptions opts;
    opts.id_regex = id_regex;
    opts.verify_images = false;
    auto ingested = data::ingest(data_dir, opts);
    std::vector<radiomics::FeatureRow> rows;
    if (!features_csv.empty() && fs::exists(features_csv)) rows = radiomics::read_feature_cache(features_csv);
    return TileStore(std::move(ingested.tiles), std::move(rows));
}

const cv::Mat& TileStore::image(const data::LabeledTile& tile, int side) {
    accessed_.insert(tile.tile_id);
    const auto key = std::make_pair(tile.tile_id, side);
    auto it = images_.find(key);
    if (it != images_.end()) return it->second;
    cv::Mat rgb = data::load_rgb(tile.image_path);
    if (rgb.empty()) throw IoError("unreadable image " + tile.image_path.string());
    if (rgb.rows != side || rgb.cols != side) {
        cv::Mat resized;
        cv::resize(rgb, resized, cv::Size(side, side), 0, 0, cv::INTER_LINEAR);
        rgb = resized;
    }
    return images_.emplace(key, std::move(rgb)).first->second;
}

const radiomics::RadiomicFeatureVector& TileStore::features(const data::LabeledTile& tile) {
    accessed_.insert(tile.tile_id);
    const auto it = features_.find(tile.tile_id);
    if (it == features_.end()) throw ConfigError("feature cache has no row for tile " + tile.tile_id);
    return it->second;
}

std::string tile_set_hash(const std::vector<data::LabeledTile>& tiles) {
    std::vector<std::string> ids;
    for (const auto& t : tiles) ids.push_back(t.tile_id);
    std::sort(ids.begin(), ids.end());
    std::string joined;
    for (const auto& id : ids) joined += id + '\n';
    return sha256_hex(joined);
}

// ---------------------------------------------------------------------------
// Objective

ObjectiveValue compute_objective(model::MultimodalNet& net, objective::UncertaintyParams& lambdas,
                                 const objective::ClassWeights& weights, const std::array<double, 3>& flat_weights,
                                 const objective::LossConfig& loss, const Batch& batch, bool backward) {
    model::MultimodalNet::Cache cache;
    const auto out = net.forward(batch.trunk, batch.radiomics, backward ? &cache : nullptr);
    const auto n = batch.labels.size();
    if (static_cast<Eigen::Index>(n) != out.z.rows()) throw ShapeError("label count does not match batch");

    ObjectiveValue v;
    Matrix dla, dlb, dl3;
    if (loss.mode == objective::LossMode::flat3) {
        v.loss_a = objective::flat3_loss(out.p3, batch.labels, flat_weights, backward ? &dl3 : nullptr);
        v.total = v.loss_a;
    } else {
        std::vector<int> y_a(n), y_b(n);
        for (std::size_t i = 0; i < n; ++i) {
            const auto t = data::derive_task_labels(batch.labels[i]);
            y_a[i] = t.y_a;
            y_b[i] = t.y_b.value_or(-1);
        }
        v.loss_a = objective::loss_a(out.p_a, y_a, weights.a, backward ? &dla : nullptr);
        v.loss_b = objective::loss_b(out.p_b, y_b, weights.b, backward ? &dlb : nullptr);
        if (loss.mode == objective::LossMode::uncertainty) {
            const auto j = objective::joint_loss(v.loss_a, v.loss_b, lambdas.a(), lambdas.b(), loss.eta);
            v.total = j.value;
            if (backward) {
                dla *= j.d_loss_a;
                dlb *= j.d_loss_b;
                lambdas.lambda_a.grad(0, 0) += j.d_lambda_a;
                lambdas.lambda_b.grad(0, 0) += j.d_lambda_b;
            }
        } else {
            v.total = v.loss_a + v.loss_b;
        }
    }
    if (backward) net.backward(cache, dla, dlb, dl3);
    return v;
}

// ---------------------------------------------------------------------------
// Checkpoints

nlohmann::json Checkpoint::to_json() const {
    nlohmann::json j = {{"format", "osteo-checkpoint-v1"},
                        {"config", config.to_json()},
                        {"config_hash", config_hash},
                        {"split_hash", split_hash},
                        {"seed", seed},
                        {"params", net.to_json()},
                        {"lambda_A", lambda_a},
                        {"lambda_B", lambda_b},
                        {"class_weights", {{"beta_A", class_weights.a}, {"beta_B", class_weights.b}}},
                        {"flat_weights", flat_weights},
                        {"best_epoch", best_epoch},
                        {"manifest_hash", manifest_hash}};
    if (standardizer) {
        j["standardizer"] = {{"mean", standardizer->mean()},
                             {"std", standardizer->std()},
                             {"train_tiles_hash", standardizer_provenance}};
    }
    return j;
}

Checkpoint Checkpoint::from_json(const nlohmann::json& j) {
    Checkpoint c;
    try {
        if (j.value("format", std::string()) != "osteo-checkpoint-v1") {
            throw IncompatibleCheckpoint("unrecognized checkpoint format");
        }
        c.config = TrainConfig::from_json(j.at("config"));
        c.config_hash = j.at("config_hash").get<std::string>();
        c.split_hash = j.at("split_hash").get<std::string>();
        c.seed = j.at("seed").get<std::uint64_t>();
        c.net = model::MultimodalNet::from_json(j.at("params"));
        c.lambda_a = j.at("lambda_A").get<double>();
        c.lambda_b = j.at("lambda_B").get<double>();
        c.class_weights.a = j.at("class_weights").at("beta_A").get<std::array<double, 2>>();
        c.class_weights.b = j.at("class_weights").at("beta_B").get<std::array<double, 2>>();
        c.flat_weights = j.at("flat_weights").get<std::array<double, 3>>();
        c.best_epoch = j.at("best_epoch").get<int>();
        c.manifest_hash = j.value("manifest_hash", std::string());
        if (j.contains("standardizer")) {
            const auto& s = j.at("standardizer");
            c.standardizer.emplace(s.at("mean").get<std::vector<double>>(), s.at("std").get<std::vector<double>>());
            c.standardizer_provenance = s.at("train_tiles_hash").get<std::string>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw IncompatibleCheckpoint(std::string("malformed checkpoint: ") + e.what());
    }
    if (c.config.hash() != c.config_hash) throw IncompatibleCheckpoint("checkpoint config hash does not match its config");
    return c;
}

void Checkpoint::save(const fs::path& path) const { write_json(path, to_json()); }

Checkpoint Checkpoint::load(const fs::path& path) { return from_json(read_json(path)); }

void write_json(const fs::path& path, const nlohmann::json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw IoError("write failed for " + path.string());
}

nlohmann::json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(fmt::format("invalid JSON in {}: {}", path.string(), e.what()));
    }
}

// ---------------------------------------------------------------------------
// Training

namespace {

// Either a builtin trunk over pixels or exported embeddings looked up by id.
class TrunkSource {
public:
    explicit TrunkSource(const TrainConfig& cfg) {
        if (!cfg.backbone_embeddings.empty()) {
            embeddings_ = PrecomputedEmbeddings::load(cfg.backbone_embeddings);
            dim_ = embeddings_->dim();
        } else {
            trunk_ = make_builtin_trunk(cfg.model.backbone);
            dim_ = trunk_->feature_dim();
            side_ = trunk_->input_size();
        }
    }

    int dim() const { return dim_; }
    bool uses_pixels() const { return trunk_ != nullptr; }

    Eigen::VectorXd features(TileStore& store, const data::LabeledTile& tile, const data::AugmentationPolicy* aug,
                             std::mt19937_64* rng) const {
        if (!trunk_) {
            store.features(tile);  // records access
            return embeddings_->at(tile.tile_id);
        }
        const cv::Mat& img = store.image(tile, side_);
        if (aug && aug->enabled) {
            return trunk_->features(data::to_tensor(data::augment(img, *aug, *rng), side_));
        }
        return trunk_->features(data::to_tensor(img, side_));
    }

private:
    std::unique_ptr<Trunk> trunk_;
    std::optional<PrecomputedEmbeddings> embeddings_;
    int dim_ = 0;
    int side_ = 0;
};

Matrix radiomics_rows(TileStore& store, const std::vector<const data::LabeledTile*>& tiles,
                      const std::optional<radiomics::FeatureStandardizer>& standardizer, bool use) {
    if (!use) return {};
    Matrix m(static_cast<Eigen::Index>(tiles.size()), static_cast<Eigen::Index>(radiomics::kFeatureCount));
    for (std::size_t i = 0; i < tiles.size(); ++i) {
        const auto z = standardizer->apply(store.features(*tiles[i]));
        for (std::size_t j = 0; j < z.size(); ++j) {
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = z[j];
        }
    }
    if (!m.allFinite()) throw InvalidInput("non-finite standardized radiomic feature");
    return m;
}

struct Scored {
    double nll = 0.0;
    double macro_f1 = 0.0;
};

Scored score(const Matrix& dist3, const std::vector<const data::LabeledTile*>& tiles) {
    std::vector<metrics::EvalRecord> recs;
    double nll = 0.0;
    for (std::size_t i = 0; i < tiles.size(); ++i) {
        metrics::EvalRecord r;
        r.true_label = tiles[i]->label;
        const auto row = static_cast<Eigen::Index>(i);
        r.dist3 = {dist3(row, 0), dist3(row, 1), dist3(row, 2)};
        r.predicted = model::predict_class(r.dist3);
        nll -= std::log(std::max(r.dist3[static_cast<std::size_t>(r.true_label)], objective::kProbClamp));
        recs.push_back(std::move(r));
    }
    return {nll / static_cast<double>(tiles.size()), metrics::f1_scores(recs).macro};
}

void write_history(const fs::path& path, const std::vector<EpochRecord>& history) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << "epoch,train_loss,val_loss,best_val_loss,val_macro_f1,best_val_macro_f1,lambda_A,lambda_B\n";
    for (const auto& h : history) {
        out << h.epoch << ',' << fmt_double(h.train_loss) << ',' << fmt_double(h.val_loss) << ','
            << fmt_double(h.best_val_loss) << ',' << fmt_double(h.val_macro_f1) << ','
            << fmt_double(h.best_val_macro_f1) << ',' << fmt_double(h.lambda_a) << ',' << fmt_double(h.lambda_b)
            << '\n';
    }
}

void write_steps(const fs::path& path, const std::vector<StepRecord>& steps, objective::LossMode mode) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << "step,L_A,L_B,lambda_A,lambda_B,joint\n";
    const bool hier = mode != objective::LossMode::flat3;
    const bool learned = mode == objective::LossMode::uncertainty;
    for (const auto& s : steps) {
        out << s.step << ',' << fmt_double(s.loss_a) << ',' << (hier ? fmt_double(s.loss_b) : "") << ','
            << (learned ? fmt_double(s.lambda_a) : "") << ',' << (learned ? fmt_double(s.lambda_b) : "") << ','
            << fmt_double(s.joint) << '\n';
    }
}

}  // namespace

TrainResult train_one(const TrainConfig& config, std::uint64_t seed, const data::SplitSpec& split, TileStore& store,
                      const fs::path& run_dir, const std::string& manifest_hash) {
    config.validate();
    if (config.model.use_radiomics && !store.has_features()) {
        throw ConfigError("radiomics enabled but no feature cache is loaded (run `extract` first)");
    }
    const auto train_tiles = data::select(store.tiles(), split, data::Subset::train);
    const auto val_tiles = data::select(store.tiles(), split, data::Subset::val);
    if (train_tiles.empty() || val_tiles.empty()) throw ConfigError("split leaves train or val empty");

    std::vector<int> train_labels;
    for (const auto& t : train_tiles) train_labels.push_back(t.label);

    Checkpoint ckpt;
    ckpt.config = config;
    ckpt.config_hash = config.hash();
    ckpt.split_hash = split.hash();
    ckpt.seed = seed;
    ckpt.manifest_hash = manifest_hash;
    if (config.loss.mode == objective::LossMode::flat3) {
        ckpt.flat_weights = objective::flat_class_weights(train_labels);
    } else {
        ckpt.class_weights = objective::compute_class_weights(train_labels);
    }
    if (store.has_features()) {
        std::vector<radiomics::RadiomicFeatureVector> vecs;
        for (const auto& t : train_tiles) vecs.push_back(store.features(t));
        ckpt.standardizer = radiomics::FeatureStandardizer::fit(vecs);
        ckpt.standardizer_provenance = tile_set_hash(train_tiles);
    }

    const TrunkSource trunk(config);
    model::MultimodalNet net(config.model, trunk.dim(), derive_seed(seed, 1));
    objective::UncertaintyParams lambdas;
    std::vector<nn::Parameter*> params = net.parameters();
    if (config.loss.mode == objective::LossMode::uncertainty) {
        params.push_back(&lambdas.lambda_a);
        params.push_back(&lambdas.lambda_b);
    }
    nn::AdamW opt(params, {config.lr, config.weight_decay});
    std::mt19937_64 aug_rng(derive_seed(seed, 2));
    std::mt19937_64 shuffle_rng(derive_seed(seed, 3));

    std::vector<const data::LabeledTile*> train_ptrs, val_ptrs;
    for (const auto& t : train_tiles) train_ptrs.push_back(&t);
    for (const auto& t : val_tiles) val_ptrs.push_back(&t);

    const bool use_rad = config.model.use_radiomics;
    const Matrix train_rad = radiomics_rows(store, train_ptrs, ckpt.standardizer, use_rad);
    const Matrix val_rad = radiomics_rows(store, val_ptrs, ckpt.standardizer, use_rad);
    Matrix val_trunk(static_cast<Eigen::Index>(val_ptrs.size()), trunk.dim());
    for (std::size_t i = 0; i < val_ptrs.size(); ++i) {
        val_trunk.row(static_cast<Eigen::Index>(i)) = trunk.features(store, *val_ptrs[i], nullptr, nullptr).transpose();
    }
    const bool augment = config.augmentation.enabled && trunk.uses_pixels();
    // Unaugmented training features: the batch source without augmentation,
    // and the statistics for the frozen trunk standardization either way.
    Matrix train_trunk_fixed(static_cast<Eigen::Index>(train_ptrs.size()), trunk.dim());
    for (std::size_t i = 0; i < train_ptrs.size(); ++i) {
        train_trunk_fixed.row(static_cast<Eigen::Index>(i)) =
            trunk.features(store, *train_ptrs[i], nullptr, nullptr).transpose();
    }
    {
        const Eigen::RowVectorXd mean = train_trunk_fixed.colwise().mean();
        const Eigen::RowVectorXd var =
            (train_trunk_fixed.rowwise() - mean).array().square().colwise().mean().matrix();
        net.set_trunk_normalization(mean, var.cwiseSqrt());
    }

    TrainResult result;
    std::vector<std::size_t> order(train_ptrs.size());
    std::iota(order.begin(), order.end(), 0);
    double best_f1 = -1.0;
    double best_val_loss = std::numeric_limits<double>::infinity();
    int since_best = 0;
    long step = 0;
    model::MultimodalNet best_net = net;
    double best_la = 0.0, best_lb = 0.0;

    for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double epoch_loss = 0.0;
        std::size_t seen = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
            const auto b = static_cast<Eigen::Index>(end - start);
            Batch batch;
            batch.trunk.resize(b, trunk.dim());
            if (use_rad) batch.radiomics.resize(b, static_cast<Eigen::Index>(radiomics::kFeatureCount));
            for (std::size_t k = start; k < end; ++k) {
                const auto row = static_cast<Eigen::Index>(k - start);
                const std::size_t idx = order[k];
                batch.trunk.row(row) =
                    augment ? trunk.features(store, *train_ptrs[idx], &config.augmentation, &aug_rng).transpose()
                            : Eigen::RowVectorXd(train_trunk_fixed.row(static_cast<Eigen::Index>(idx)));
                if (use_rad) batch.radiomics.row(row) = train_rad.row(static_cast<Eigen::Index>(idx));
                batch.labels.push_back(train_ptrs[idx]->label);
            }

            opt.zero_grad();
            lambdas.lambda_a.zero_grad();
            lambdas.lambda_b.zero_grad();
            const auto v = compute_objective(net, lambdas, ckpt.class_weights, ckpt.flat_weights, config.loss, batch, true);
            if (!std::isfinite(v.total)) {
                std::vector<std::string> ids;
                for (std::size_t k = start; k < end; ++k) ids.push_back(train_ptrs[order[k]]->tile_id);
                if (!run_dir.empty()) {
                    write_json(run_dir / "nonfinite_batch.json",
                               {{"step", step}, {"epoch", epoch}, {"tile_ids", ids}, {"L_A", v.loss_a},
                                {"L_B", v.loss_b}, {"lambda_A", lambdas.a()}, {"lambda_B", lambdas.b()}});
                }
                throw NonFiniteLoss(fmt::format("non-finite loss at step {} (epoch {}); batch starts with {}", step,
                                                epoch, ids.front()));
            }

            std::vector<nn::Matrix> before;
            if (step == 0) {
                for (auto& g : net.parameter_groups()) {
                    for (auto* p : g.params) before.push_back(p->value);
                }
            }
            opt.step();
            if (step == 0) {
                std::size_t k = 0;
                for (auto& g : net.parameter_groups()) {
                    bool moved = false;
                    for (auto* p : g.params) moved = moved || (p->value - before[k++]).cwiseAbs().maxCoeff() > 0.0;
                    result.first_step_moved[g.name] = moved;
                }
                if (config.loss.mode == objective::LossMode::uncertainty) {
                    result.first_step_moved["lambda"] = lambdas.a() != 0.0 && lambdas.b() != 0.0;
                }
            }
            result.steps.push_back({step, v.loss_a, v.loss_b, lambdas.a(), lambdas.b(), v.total});
            epoch_loss += v.total * static_cast<double>(b);
            seen += static_cast<std::size_t>(b);
            ++step;
        }

        const auto val_out = net.forward(val_trunk, val_rad);
        const Scored s = score(val_out.dist3, val_ptrs);
        best_val_loss = std::min(best_val_loss, s.nll);
        if (s.macro_f1 > best_f1) {
            best_f1 = s.macro_f1;
            best_net = net;
            best_la = lambdas.a();
            best_lb = lambdas.b();
            ckpt.best_epoch = epoch;
            since_best = 0;
        } else {
            ++since_best;
        }
        result.history.push_back({epoch, epoch_loss / static_cast<double>(seen), s.nll, best_val_loss, s.macro_f1,
                                  best_f1, lambdas.a(), lambdas.b()});
        spdlog::debug("epoch {} loss {:.4f} val_nll {:.4f} val_f1 {:.4f} lambda ({:.3f}, {:.3f})", epoch,
                      result.history.back().train_loss, s.nll, s.macro_f1, lambdas.a(), lambdas.b());
        if (since_best >= config.early_stop_patience) break;
    }

    ckpt.net = std::move(best_net);
    ckpt.lambda_a = best_la;
    ckpt.lambda_b = best_lb;
    result.checkpoint = std::move(ckpt);

    if (!run_dir.empty()) {
        fs::create_directories(run_dir);
        result.checkpoint.save(run_dir / "checkpoint.json");
        write_history(run_dir / "history.csv", result.history);
        write_steps(run_dir / "loss_components.csv", result.steps, config.loss.mode);
        if (!manifest_hash.empty()) {
            write_manifest_sidecar(run_dir / "history.csv", manifest_hash);
            write_manifest_sidecar(run_dir / "loss_components.csv", manifest_hash);
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Evaluation

std::vector<metrics::EvalRecord> predict(const Checkpoint& ckpt, TileStore& store,
                                         const std::vector<data::LabeledTile>& tiles) {
    const TrunkSource trunk(ckpt.config);
    if (trunk.dim() != ckpt.net.trunk_dim()) throw IncompatibleCheckpoint("trunk feature size differs from checkpoint");
    const bool use_rad = ckpt.net.config().use_radiomics;
    if (use_rad && !ckpt.standardizer) throw IncompatibleCheckpoint("checkpoint lacks standardizer state");

    std::vector<metrics::EvalRecord> out;
    constexpr std::size_t kChunk = 64;
    for (std::size_t start = 0; start < tiles.size(); start += kChunk) {
        const std::size_t end = std::min(tiles.size(), start + kChunk);
        std::vector<const data::LabeledTile*> ptrs;
        for (std::size_t i = start; i < end; ++i) ptrs.push_back(&tiles[i]);
        Matrix feats(static_cast<Eigen::Index>(ptrs.size()), trunk.dim());
        for (std::size_t i = 0; i < ptrs.size(); ++i) {
            feats.row(static_cast<Eigen::Index>(i)) = trunk.features(store, *ptrs[i], nullptr, nullptr).transpose();
        }
        const Matrix rad = radiomics_rows(store, ptrs, ckpt.standardizer, use_rad);
        const auto res = ckpt.net.forward(feats, rad);
        for (std::size_t i = 0; i < ptrs.size(); ++i) {
            metrics::EvalRecord r;
            r.tile_id = ptrs[i]->tile_id;
            r.true_label = ptrs[i]->label;
            const auto row = static_cast<Eigen::Index>(i);
            r.dist3 = {res.dist3(row, 0), res.dist3(row, 1), res.dist3(row, 2)};
            r.predicted = model::predict_class(r.dist3);
            out.push_back(std::move(r));
        }
    }
    return out;
}

EvalResult evaluate(const Checkpoint& ckpt, const data::SplitSpec& split, TileStore& store) {
    if (ckpt.config.hash() != ckpt.config_hash) throw IncompatibleCheckpoint("checkpoint config hash mismatch");
    if (split.hash() != ckpt.split_hash) {
        throw IncompatibleCheckpoint("split does not match the one the checkpoint was trained on");
    }
    const auto test_tiles = data::select(store.tiles(), split, data::Subset::test);
    if (test_tiles.empty()) throw ConfigError("split has no test tiles");
    EvalResult r;
    r.records = predict(ckpt, store, test_tiles);
    r.table = metrics::evaluate_records(r.records);
    return r;
}

// ---------------------------------------------------------------------------
// Ablation grid

const std::vector<GridRow>& ablation_grid() {
    using objective::LossMode;
    static const std::vector<GridRow> rows = {
        {"incv3_flat3", "IncV3(3-class)", BackboneKind::inception_v3, LossMode::flat3, false},
        {"vit", "ViT", BackboneKind::vit, LossMode::equal_weight, false},
        {"effnet", "EffNet", BackboneKind::efficientnet_b0, LossMode::equal_weight, false},
        {"incv3", "IncV3", BackboneKind::inception_v3, LossMode::equal_weight, false},
        {"incv3_rad", "IncV3", BackboneKind::inception_v3, LossMode::equal_weight, true},
        {"incv3_hloss", "IncV3", BackboneKind::inception_v3, LossMode::uncertainty, false},
        {"incv3_hloss_rad", "IncV3 (Ours)", BackboneKind::inception_v3, LossMode::uncertainty, true},
    };
    return rows;
}

TrainConfig row_config(const TrainConfig& base, const GridRow& row, std::optional<BackboneKind> override_kind) {
    TrainConfig c = base;
    c.row = row.id;
    c.model.backbone = override_kind.value_or(row.backbone);
    c.model.use_radiomics = row.radiomics;
    c.loss.mode = row.loss;
    c.model.head = row.loss == objective::LossMode::flat3 ? model::HeadType::flat3 : model::HeadType::hierarchical;
    c.validate();
    return c;
}

AblationConfig AblationConfig::from_json(const nlohmann::json& j) {
    AblationConfig c;
    c.base = TrainConfig::from_json(j.value("base", nlohmann::json::object()));
    try {
        if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        if (j.contains("rows")) c.rows = j.at("rows").get<std::vector<std::string>>();
        if (j.contains("backbone_override") && !j.at("backbone_override").is_null()) {
            c.backbone_override = backbone_from_string(j.at("backbone_override").get<std::string>());
        }
        c.runs_dir = j.value("runs_dir", c.runs_dir.string());
        c.split_file = j.value("split_file", std::string());
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed ablation config: ") + e.what());
    }
    std::set<std::uint64_t> uniq(c.seeds.begin(), c.seeds.end());
    if (uniq.size() != c.seeds.size() || c.seeds.empty()) throw ConfigError("ablation seeds must be distinct and non-empty");
    for (const auto& id : c.rows) {
        const auto& g = ablation_grid();
        if (std::none_of(g.begin(), g.end(), [&](const GridRow& r) { return r.id == id; })) {
            throw ConfigError("unknown ablation row " + id);
        }
    }
    return c;
}

nlohmann::json AblationConfig::to_json() const {
    return {{"base", base.to_json()},
            {"seeds", seeds},
            {"rows", rows},
            {"backbone_override",
             backbone_override ? nlohmann::json(std::string(to_string(*backbone_override))) : nlohmann::json()},
            {"runs_dir", runs_dir.string()},
            {"split_file", split_file.string()}};
}

RunLock::RunLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) throw Error("run directory is locked by another process: " + dir.string());
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
}

RunLock::~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
}

AblationReport run_ablation(const AblationConfig& cfg, const data::SplitSpec& split, TileStore& store,
                            const std::string& manifest_hash) {
    AblationReport report;
    for (const auto& row : ablation_grid()) {
        if (!cfg.rows.empty() && std::find(cfg.rows.begin(), cfg.rows.end(), row.id) == cfg.rows.end()) continue;
        RowOutcome outcome;
        outcome.row = row;
        outcome.split_hash = split.hash();
        const TrainConfig rc = row_config(cfg.base, row, cfg.backbone_override);
        outcome.config_hash = rc.hash();
        for (const auto seed : cfg.seeds) {
            const fs::path run_dir = cfg.runs_dir / row.id / std::to_string(seed);
            try {
                RunLock lock(run_dir);
                spdlog::info("ablation row {} seed {}", row.id, seed);
                const auto trained = train_one(rc, seed, split, store, run_dir, manifest_hash);
                const auto eval = evaluate(trained.checkpoint, split, store);
                auto j = eval.table.to_json(1, outcome.config_hash);
                j["seed"] = seed;
                j["row"] = row.id;
                j["split_hash"] = outcome.split_hash;
                j["manifest_hash"] = manifest_hash;
                write_json(run_dir / "metrics.json", j);
                outcome.seeds_ok.push_back(seed);
                outcome.tables.push_back(eval.table);
            } catch (const Error& e) {
                spdlog::error("row {} seed {} failed: {}", row.id, seed, e.what());
                outcome.failures[seed] = e.what();
            }
        }
        report.rows.push_back(std::move(outcome));
    }
    return report;
}

AblationReport collect_report(const fs::path& runs_dir, const std::vector<std::uint64_t>& seeds) {
    AblationReport report;
    for (const auto& row : ablation_grid()) {
        if (!fs::is_directory(runs_dir / row.id)) continue;
        RowOutcome outcome;
        outcome.row = row;
        for (const auto seed : seeds) {
            const fs::path p = runs_dir / row.id / std::to_string(seed) / "metrics.json";
            if (!fs::exists(p)) {
                outcome.failures[seed] = "missing metrics.json";
                continue;
            }
            const auto j = read_json(p);
            outcome.tables.push_back(metrics::MetricTable::from_json(j));
            outcome.seeds_ok.push_back(seed);
            outcome.split_hash = j.value("split_hash", std::string());
            outcome.config_hash = j.value("config_hash", std::string());
        }
        report.rows.push_back(std::move(outcome));
    }
    return report;
}

namespace {

const char* mark(bool on) { return on ? "✓" : "✗"; }

std::vector<double> metric_values(const RowOutcome& row, const std::string& name) {
    std::vector<double> out;
    for (const auto& t : row.tables) {
        for (const auto& [k, v] : t.flatten()) {
            if (k == name) out.push_back(v);
        }
    }
    return out;
}

std::string cell(const RowOutcome& row, const std::string& name) {
    const auto v = metric_values(row, name);
    if (v.empty()) return "n/a";
    if (v.size() == 1) return fmt::format("{:.2f}", v.front());
    const auto agg = metrics::aggregate_runs(row.tables);
    return metrics::format_pm(agg.at(name));
}

const RowOutcome* full_row(const std::vector<RowOutcome>& rows) {
    for (const auto& r : rows) {
        if (r.row.id == "incv3_hloss_rad") return &r;
    }
    return nullptr;
}

}  // namespace

nlohmann::json AblationReport::to_json() const {
    static const std::vector<std::string> kSigMetrics = {"accuracy",         "f1_macro",         "auc_ovr",
                                                         "NVT.sen_at_spe90", "VT.sen_at_spe90", "VT.spe_at_sen90"};
    nlohmann::json out = {{"rows", nlohmann::json::array()}};
    std::set<std::string> split_hashes;
    const RowOutcome* full = full_row(rows);
    for (const auto& r : rows) {
        nlohmann::json jr = {{"id", r.row.id},
                             {"backbone", r.row.label},
                             {"h_loss", r.row.loss == objective::LossMode::uncertainty},
                             {"radiomics", r.row.radiomics},
                             {"loss_mode", std::string(objective::to_string(r.row.loss))},
                             {"n_runs", r.tables.size()},
                             {"seeds_ok", r.seeds_ok},
                             {"complete", r.failures.empty()},
                             {"split_hash", r.split_hash},
                             {"config_hash", r.config_hash}};
        nlohmann::json fails = nlohmann::json::object();
        for (const auto& [seed, msg] : r.failures) fails[std::to_string(seed)] = msg;
        jr["failures"] = fails;
        if (r.tables.size() >= 2) jr["aggregate"] = metrics::aggregate_runs(r.tables).to_json();
        nlohmann::json runs = nlohmann::json::array();
        for (const auto& t : r.tables) runs.push_back(t.to_json(1, r.config_hash));
        jr["runs"] = runs;
        if (full && full != &r && full->tables.size() >= 2 && r.tables.size() >= 2) {
            nlohmann::json sig = nlohmann::json::object();
            for (const auto& m : kSigMetrics) {
                sig[m] = metrics::significance(metric_values(*full, m), metric_values(r, m));
            }
            jr["significance_vs_full"] = sig;
        }
        if (!r.split_hash.empty()) split_hashes.insert(r.split_hash);
        out["rows"].push_back(jr);
    }
    out["split_hashes_identical"] = split_hashes.size() <= 1;
    out["significance_test"] = "welch_t_two_sided_over_runs";
    return out;
}

std::string AblationReport::table1() const {
    std::ostringstream out;
    out << fmt::format("{:<16} {:<7} {:<5} {:<11} {:<11} {:<11} {:<11}\n", "Backbone", "H-loss", "Rad.", "Acc.",
                       "F1,macro", "F1,weighted", "AUC_ovr");
    for (const auto& r : rows) {
        out << fmt::format("{:<16} {:<7} {:<5} {:<11} {:<11} {:<11} {:<11}{}\n", r.row.label,
                           mark(r.row.loss == objective::LossMode::uncertainty), mark(r.row.radiomics),
                           cell(r, "accuracy"), cell(r, "f1_macro"), cell(r, "f1_weighted"), cell(r, "auc_ovr"),
                           r.failures.empty() ? "" : "  (incomplete)");
    }
    return out.str();
}

std::string AblationReport::table2() const {
    std::ostringstream out;
    out << fmt::format("{:<16} {:<7} {:<5} {:<5} {:<11} {:<11} {:<11} {:<11}\n", "Backbone", "H-loss", "Rad", "type",
                       "Sen@Spe90", "Spe@Sen90", "F1", "AUC");
    for (const auto& r : rows) {
        for (std::size_t c = 0; c < 3; ++c) {
            const std::string p = std::string(data::kClassShort[c]) + ".";
            out << fmt::format("{:<16} {:<7} {:<5} {:<5} {:<11} {:<11} {:<11} {:<11}\n", c == 0 ? r.row.label : "",
                               c == 0 ? mark(r.row.loss == objective::LossMode::uncertainty) : "",
                               c == 0 ? mark(r.row.radiomics) : "", data::kClassShort[c],
                               cell(r, p + "sen_at_spe90"), cell(r, p + "spe_at_sen90"), cell(r, p + "f1"),
                               cell(r, p + "auc"));
        }
    }
    return out.str();
}

}  // namespace osteo::engine
