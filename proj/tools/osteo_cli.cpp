// osteo: command suite for the osteosarcoma tile classification pipeline.
//
//   osteo synth   --patients 10 --tiles-per-patient 30 --seed 1 --out data
//   osteo extract --data data --out features.csv
//   osteo split   --data data --fractions 0.7,0.1,0.2 --seed 0 --out split.json
//   osteo train   --config train.json --split split.json --seed 0
//   osteo eval    --checkpoint runs/full/0/checkpoint.json --split split.json
//   osteo ablate  --config grid.json
//   osteo report  --runs runs
//
// All relative paths resolve against --workdir.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "osteo/dataset.hpp"
#include "osteo/engine.hpp"
#include "osteo/errors.hpp"
#include "osteo/hashing.hpp"
#include "osteo/manifest.hpp"
#include "osteo/radiomics.hpp"

namespace fs = std::filesystem;
using namespace osteo;

namespace {

constexpr int kExitEmptyDataset = 3;
constexpr int kExitIncomplete = 1;

bool deterministic_mode() {
    const char* v = std::getenv("OSTEO_DETERMINISTIC");
    return v && std::string(v) != "0" && std::string(v) != "";
}

struct Context {
    fs::path workdir = ".";
    std::string log_level = "info";
};

void print_class_table(const std::string& title, const std::vector<data::LabeledTile>& tiles) {
    std::array<std::size_t, 3> c{};
    std::set<std::string> patients;
    for (const auto& t : tiles) {
        ++c[static_cast<std::size_t>(t.label)];
        patients.insert(t.patient_id);
    }
    std::cout << fmt::format("{:<8} {:>8} {:>6} {:>6} {:>6} {:>6}\n", title, patients.size(), tiles.size(), c[0],
                             c[1], c[2]);
}

std::string dataset_checksum(const std::vector<data::LabeledTile>& tiles, const fs::path& root) {
    std::string joined;
    for (const auto& t : tiles) {
        joined += fs::relative(t.image_path, root).generic_string() + ' ' + sha256_file(t.image_path) + '\n';
    }
    if (fs::exists(root / "labels.csv")) joined += "labels.csv " + sha256_file(root / "labels.csv") + '\n';
    return sha256_hex(joined);
}

// ---------------------------------------------------------------------------

struct SynthArgs {
    data::SynthConfig cfg;
    fs::path out = "data";
    bool force = false;
};

int cmd_synth(const SynthArgs& a) {
    if (fs::exists(a.out) && !fs::is_empty(a.out)) {
        if (!a.force) throw ConfigError(fmt::format("output directory {} is not empty (use --force)", a.out.string()));
        fs::remove_all(a.out);
    }
    auto manifest = RunManifest::begin("synth", "",
                                       {{"patients", a.cfg.n_patients},
                                        {"tiles_per_patient", a.cfg.tiles_per_patient},
                                        {"seed", a.cfg.seed},
                                        {"tile_size", a.cfg.tile_size},
                                        {"class_mix", a.cfg.class_mix},
                                        {"out", a.out.generic_string()}});
    const auto tiles = data::synth_generate(a.cfg, a.out);
    write_manifest_sidecar(a.out / "labels.csv", manifest.hash);

    std::cout << fmt::format("{:<8} {:>8} {:>6} {:>6} {:>6} {:>6}\n", "subset", "patients", "tiles", "NT", "NVT", "VT");
    print_class_table("all", tiles);
    std::cout << "checksum " << dataset_checksum(tiles, a.out) << '\n';
    manifest.finish(0);
    manifest.save(".");
    return 0;
}

// ---------------------------------------------------------------------------

struct ExtractArgs {
    fs::path data = "data";
    fs::path out = "features.csv";
    std::string id_regex = R"(^(Case-\d+))";
    unsigned threads = 1;
};

int cmd_extract(const ExtractArgs& a) {
    auto manifest = RunManifest::begin(
        "extract", "", {{"data", a.data.generic_string()}, {"out", a.out.generic_string()}, {"id_regex", a.id_regex}});
    data::IngestOptions opts;
    opts.id_regex = a.id_regex;
    opts.verify_images = false;
    const auto ingested = data::ingest(a.data, opts);
    const auto& tiles = ingested.tiles;
    if (tiles.empty()) {
        spdlog::error("no labeled tiles under {}", a.data.string());
        return kExitEmptyDataset;
    }

    std::vector<std::optional<radiomics::FeatureRow>> rows(tiles.size());
    std::vector<std::string> errors(tiles.size());
    auto work = [&](std::size_t begin, std::size_t step) {
        for (std::size_t i = begin; i < tiles.size(); i += step) {
            const auto& t = tiles[i];
            const cv::Mat rgb = data::load_rgb(t.image_path);
            if (rgb.empty()) {
                errors[i] = "unreadable image";
                continue;
            }
            try {
                rows[i] = radiomics::FeatureRow{t.tile_id, t.patient_id, t.label, radiomics::extract(rgb)};
            } catch (const Error& e) {
                errors[i] = e.what();
            }
        }
    };
    const unsigned n_threads = deterministic_mode() ? 1U : std::max(1U, a.threads);
    if (n_threads == 1) {
        work(0, 1);
    } else {
        std::vector<std::thread> pool;
        for (unsigned k = 0; k < n_threads; ++k) pool.emplace_back(work, k, n_threads);
        for (auto& th : pool) th.join();
    }

    std::vector<radiomics::FeatureRow> ok;
    std::size_t failed = 0;
    for (std::size_t i = 0; i < tiles.size(); ++i) {
        if (rows[i]) {
            ok.push_back(std::move(*rows[i]));
        } else {
            ++failed;
            std::cerr << "failed: " << tiles[i].image_path.string() << ": " << errors[i] << '\n';
        }
    }
    radiomics::write_feature_cache(a.out, ok);
    write_manifest_sidecar(a.out, manifest.hash);
    std::cout << fmt::format("extracted {} tiles x {} features -> {}\n", ok.size(), radiomics::kFeatureCount,
                             a.out.string());
    const int code = failed > 0 || ingested.skipped_unreadable > 0 ? IoError("").exit_code() : 0;
    if (code != 0) std::cerr << fmt::format("{} tiles failed, {} skipped at ingest\n", failed, ingested.skipped_unreadable);
    manifest.finish(code);
    manifest.save(".");
    return code;
}

// ---------------------------------------------------------------------------

struct SplitArgs {
    fs::path data = "data";
    std::string fractions = "0.7,0.1,0.2";
    std::uint64_t seed = 0;
    fs::path out = "split.json";
    std::string id_regex = R"(^(Case-\d+))";
};

data::SplitFractions parse_fractions(const std::string& s) {
    std::vector<double> v;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            v.push_back(std::stod(item));
        } catch (const std::exception&) {
            throw ConfigError("bad fraction '" + item + "'");
        }
    }
    if (v.size() != 3) throw ConfigError("--fractions needs three comma-separated values");
    return {v[0], v[1], v[2]};
}

int cmd_split(const SplitArgs& a) {
    auto manifest = RunManifest::begin("split", "",
                                       {{"data", a.data.generic_string()},
                                        {"fractions", a.fractions},
                                        {"seed", a.seed},
                                        {"out", a.out.generic_string()},
                                        {"id_regex", a.id_regex}});
    data::IngestOptions opts;
    opts.id_regex = a.id_regex;
    opts.verify_images = false;
    const auto tiles = data::ingest(a.data, opts).tiles;
    if (tiles.empty()) {
        spdlog::error("no labeled tiles under {}", a.data.string());
        return kExitEmptyDataset;
    }
    const auto split = data::patient_split(tiles, parse_fractions(a.fractions), a.seed);
    auto j = split.to_json();
    j["split_hash"] = split.hash();
    j["manifest_hash"] = manifest.hash;
    engine::write_json(a.out, j);

    std::cout << fmt::format("{:<8} {:>8} {:>6} {:>6} {:>6} {:>6}\n", "subset", "patients", "tiles", "NT", "NVT", "VT");
    print_class_table("train", data::select(tiles, split, data::Subset::train));
    print_class_table("val", data::select(tiles, split, data::Subset::val));
    print_class_table("test", data::select(tiles, split, data::Subset::test));
    std::cout << "split_hash " << split.hash() << '\n';
    manifest.finish(0);
    manifest.save(".");
    return 0;
}

// ---------------------------------------------------------------------------

struct TrainOverrides {
    std::string data, features, backbone, embeddings;
    std::optional<int> epochs, patience, d, batch_size;
    std::optional<double> lr;
    std::optional<bool> radiomics, augment;
    std::optional<std::string> loss;
};

engine::TrainConfig load_train_config(const std::string& path, const TrainOverrides& o) {
    nlohmann::json j = path.empty() ? nlohmann::json::object() : engine::read_json(path);
    auto c = engine::TrainConfig::from_json(j);
    if (!o.data.empty()) c.data_dir = o.data;
    if (!o.features.empty()) c.features_csv = o.features;
    if (!o.backbone.empty()) c.model.backbone = backbone_from_string(o.backbone);
    if (!o.embeddings.empty()) {
        c.backbone_embeddings = o.embeddings;
        c.model.pretrained = true;
    }
    if (o.epochs) c.max_epochs = *o.epochs;
    if (o.patience) c.early_stop_patience = *o.patience;
    if (o.d) c.model.d = *o.d;
    if (o.batch_size) c.batch_size = *o.batch_size;
    if (o.lr) c.lr = *o.lr;
    if (o.radiomics) c.model.use_radiomics = *o.radiomics;
    if (o.augment) c.augmentation.enabled = *o.augment;
    if (o.loss) {
        c.loss.mode = objective::loss_mode_from_string(*o.loss);
        c.model.head = c.loss.mode == objective::LossMode::flat3 ? model::HeadType::flat3 : model::HeadType::hierarchical;
    }
    c.validate();
    return c;
}

data::SplitSpec load_split(const fs::path& path) { return data::SplitSpec::from_json(engine::read_json(path)); }

struct TrainArgs {
    std::string config;
    fs::path split = "split.json";
    std::optional<std::uint64_t> seed;
    fs::path out;
    TrainOverrides overrides;
};

int cmd_train(const TrainArgs& a) {
    const auto cfg = load_train_config(a.config, a.overrides);
    const std::uint64_t seed = a.seed.value_or(cfg.seeds.empty() ? 0 : cfg.seeds.front());
    const fs::path run_dir = a.out.empty() ? fs::path("runs") / cfg.row / std::to_string(seed) : a.out;
    auto manifest = RunManifest::begin(
        "train", a.config,
        {{"config", cfg.to_json()}, {"seed", seed}, {"split", a.split.generic_string()}, {"out", run_dir.generic_string()}});

    const auto split = load_split(a.split);
    engine::RunLock lock(run_dir);
    auto store = engine::TileStore::open(cfg.data_dir, cfg.features_csv, cfg.id_regex);
    if (store.tiles().empty()) {
        spdlog::error("no labeled tiles under {}", cfg.data_dir.string());
        return kExitEmptyDataset;
    }
    const auto result = engine::train_one(cfg, seed, split, store, run_dir, manifest.hash);
    const auto& best = result.history.at(static_cast<std::size_t>(result.checkpoint.best_epoch));
    std::cout << fmt::format("trained {} epochs; best epoch {} val macro-F1 {:.4f}; lambda_A {:.4f} lambda_B {:.4f}\n",
                             result.history.size(), best.epoch, best.val_macro_f1, result.checkpoint.lambda_a,
                             result.checkpoint.lambda_b);
    std::cout << "checkpoint " << (run_dir / "checkpoint.json").string() << '\n';
    manifest.finish(0);
    manifest.save(".");
    return 0;
}

// ---------------------------------------------------------------------------

void write_roc(const fs::path& path, const std::vector<metrics::EvalRecord>& records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << "class,threshold,fpr,tpr\n";
    for (std::size_t c = 0; c < 3; ++c) {
        std::vector<double> scores;
        std::vector<int> labels;
        for (const auto& r : records) {
            scores.push_back(r.dist3[c]);
            labels.push_back(r.true_label == static_cast<int>(c) ? 1 : 0);
        }
        for (const auto& p : metrics::roc_curve(scores, labels)) {
            out << data::kClassShort[c] << ',' << fmt::format("{:.17g},{:.17g},{:.17g}", p.threshold, p.fpr, p.tpr)
                << '\n';
        }
    }
}

void print_table(const metrics::MetricTable& t) {
    std::cout << fmt::format("accuracy {:.4f}  f1_macro {:.4f}  f1_weighted {:.4f}  auc_ovr {:.4f}\n", t.accuracy,
                             t.f1_macro, t.f1_weighted, t.auc_ovr);
    std::cout << fmt::format("{:<5} {:>10} {:>10} {:>8} {:>8}\n", "type", "Sen@Spe90", "Spe@Sen90", "F1", "AUC");
    for (std::size_t c = 0; c < 3; ++c) {
        const auto& m = t.per_class[c];
        std::cout << fmt::format("{:<5} {:>10.4f} {:>10.4f} {:>8.4f} {:>8.4f}\n", data::kClassShort[c],
                                 m.sen_at_spe90, m.spe_at_sen90, m.f1, m.auc);
    }
}

struct EvalArgs {
    fs::path checkpoint;
    fs::path split = "split.json";
    fs::path out;
    std::string data;
    std::string features;
};

int cmd_eval(const EvalArgs& a) {
    const fs::path out = a.out.empty() ? a.checkpoint.parent_path() / "metrics.json" : a.out;
    auto manifest = RunManifest::begin("eval", "",
                                       {{"checkpoint", a.checkpoint.generic_string()},
                                        {"split", a.split.generic_string()},
                                        {"out", out.generic_string()},
                                        {"data", a.data},
                                        {"features", a.features}});
    const auto ckpt = engine::Checkpoint::load(a.checkpoint);
    const auto split = load_split(a.split);
    const fs::path data_dir = a.data.empty() ? ckpt.config.data_dir : fs::path(a.data);
    const fs::path features = a.features.empty() ? ckpt.config.features_csv : fs::path(a.features);
    auto store = engine::TileStore::open(data_dir, features, ckpt.config.id_regex);
    if (store.tiles().empty()) {
        spdlog::error("no labeled tiles under {}", data_dir.string());
        return kExitEmptyDataset;
    }
    const auto result = engine::evaluate(ckpt, split, store);
    auto j = result.table.to_json(1, ckpt.config_hash);
    j["row"] = ckpt.config.row;
    j["seed"] = ckpt.seed;
    j["split_hash"] = ckpt.split_hash;
    j["manifest_hash"] = manifest.hash;
    engine::write_json(out, j);
    const fs::path roc = out.parent_path() / "roc.csv";
    write_roc(roc, result.records);
    write_manifest_sidecar(roc, manifest.hash);
    print_table(result.table);
    manifest.finish(0);
    manifest.save(".");
    return 0;
}

// ---------------------------------------------------------------------------

void emit_report(const engine::AblationReport& report, const fs::path& runs_dir, const std::string& manifest_hash) {
    auto j = report.to_json();
    j["manifest_hash"] = manifest_hash;
    engine::write_json(runs_dir / "report.json", j);
    const auto t1 = report.table1();
    const auto t2 = report.table2();
    std::ofstream(runs_dir / "table1.txt", std::ios::binary) << t1;
    std::ofstream(runs_dir / "table2.txt", std::ios::binary) << t2;
    write_manifest_sidecar(runs_dir / "table1.txt", manifest_hash);
    write_manifest_sidecar(runs_dir / "table2.txt", manifest_hash);
    std::cout << t1 << '\n' << t2;
}

struct AblateArgs {
    std::string config;
    std::string split;
    std::vector<std::uint64_t> seeds;
    std::vector<std::string> rows;
    std::string backbone_override;
    std::string runs;
    TrainOverrides overrides;
};

int cmd_ablate(const AblateArgs& a) {
    nlohmann::json j = engine::read_json(a.config);
    auto cfg = engine::AblationConfig::from_json(j);
    if (!a.split.empty()) cfg.split_file = a.split;
    if (!a.seeds.empty()) cfg.seeds = a.seeds;
    if (!a.rows.empty()) cfg.rows = a.rows;
    if (!a.backbone_override.empty()) cfg.backbone_override = backbone_from_string(a.backbone_override);
    if (!a.runs.empty()) cfg.runs_dir = a.runs;
    if (a.overrides.epochs) cfg.base.max_epochs = *a.overrides.epochs;
    if (a.overrides.patience) cfg.base.early_stop_patience = *a.overrides.patience;
    if (a.overrides.lr) cfg.base.lr = *a.overrides.lr;
    if (a.overrides.d) cfg.base.model.d = *a.overrides.d;
    if (cfg.split_file.empty()) throw ConfigError("ablation needs a split file (split_file or --split)");
    cfg = engine::AblationConfig::from_json(cfg.to_json());

    auto manifest = RunManifest::begin("ablate", a.config, cfg.to_json());
    const auto split = load_split(cfg.split_file);
    auto store = engine::TileStore::open(cfg.base.data_dir, cfg.base.features_csv, cfg.base.id_regex);
    if (store.tiles().empty()) {
        spdlog::error("no labeled tiles under {}", cfg.base.data_dir.string());
        return kExitEmptyDataset;
    }
    const auto report = engine::run_ablation(cfg, split, store, manifest.hash);
    emit_report(report, cfg.runs_dir, manifest.hash);
    const bool complete = std::all_of(report.rows.begin(), report.rows.end(),
                                      [](const engine::RowOutcome& r) { return r.failures.empty(); });
    const int code = complete ? 0 : kExitIncomplete;
    manifest.finish(code);
    manifest.save(".");
    return code;
}

struct ReportArgs {
    fs::path runs = "runs";
    std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
};

int cmd_report(const ReportArgs& a) {
    auto manifest = RunManifest::begin("report", "", {{"runs", a.runs.generic_string()}, {"seeds", a.seeds}});
    const auto report = engine::collect_report(a.runs, a.seeds);
    if (report.rows.empty()) {
        spdlog::error("no ablation rows under {}", a.runs.string());
        return kExitEmptyDataset;
    }
    emit_report(report, a.runs, manifest.hash);
    const bool complete = std::all_of(report.rows.begin(), report.rows.end(),
                                      [](const engine::RowOutcome& r) { return r.failures.empty(); });
    const int code = complete ? 0 : kExitIncomplete;
    manifest.finish(code);
    manifest.save(".");
    return code;
}

void add_train_overrides(CLI::App* cmd, TrainOverrides& o, bool full) {
    cmd->add_option("--epochs", o.epochs, "Maximum epochs");
    cmd->add_option("--patience", o.patience, "Early-stopping patience (epochs)");
    cmd->add_option("--lr", o.lr, "Learning rate");
    cmd->add_option("--embedding-dim", o.d, "Shared embedding size d");
    if (!full) return;
    cmd->add_option("--data", o.data, "Dataset root");
    cmd->add_option("--features", o.features, "Radiomic feature cache CSV");
    cmd->add_option("--backbone", o.backbone, "tiny | inception_v3 | vit | efficientnet_b0");
    cmd->add_option("--embeddings", o.embeddings, "Exported backbone embeddings CSV");
    cmd->add_option("--batch-size", o.batch_size, "Batch size");
    cmd->add_option("--radiomics", o.radiomics, "Fuse radiomic features (true/false)");
    cmd->add_option("--augment", o.augment, "Training augmentation (true/false)");
    cmd->add_option("--loss", o.loss, "uncertainty | equal_weight | flat3");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Osteosarcoma tile classification: synthetic data, radiomics, hierarchical multimodal training"};
    app.require_subcommand(1);
    Context ctx;
    app.add_option("--workdir", ctx.workdir, "Directory all relative paths resolve against");
    app.add_option("--log-level", ctx.log_level, "trace | debug | info | warn | error");

    SynthArgs synth;
    auto* c_synth = app.add_subcommand("synth", "Generate a synthetic tile dataset");
    c_synth->add_option("--patients", synth.cfg.n_patients, "Number of patients");
    c_synth->add_option("--tiles-per-patient", synth.cfg.tiles_per_patient, "Tiles per patient");
    c_synth->add_option("--seed", synth.cfg.seed, "Generator seed");
    c_synth->add_option("--tile-size", synth.cfg.tile_size, "Tile side in pixels");
    c_synth->add_option("--out", synth.out, "Output directory");
    c_synth->add_flag("--force", synth.force, "Replace a non-empty output directory");

    ExtractArgs extract;
    auto* c_extract = app.add_subcommand("extract", "Compute the radiomic feature cache");
    c_extract->add_option("--data", extract.data, "Dataset root");
    c_extract->add_option("--out", extract.out, "Feature cache CSV");
    c_extract->add_option("--id-regex", extract.id_regex, "Patient id regex (group 1 or whole match)");
    c_extract->add_option("--threads", extract.threads, "Worker threads (1 when OSTEO_DETERMINISTIC is set)");

    SplitArgs split;
    auto* c_split = app.add_subcommand("split", "Patient-level train/val/test split");
    c_split->add_option("--data", split.data, "Dataset root");
    c_split->add_option("--fractions", split.fractions, "train,val,test tile fractions");
    c_split->add_option("--seed", split.seed, "Split seed");
    c_split->add_option("--out", split.out, "Split JSON");
    c_split->add_option("--id-regex", split.id_regex, "Patient id regex");

    TrainArgs train;
    auto* c_train = app.add_subcommand("train", "Train one seed");
    c_train->add_option("--config", train.config, "Training config JSON (defaults when omitted)");
    c_train->add_option("--split", train.split, "Split JSON");
    c_train->add_option("--seed", train.seed, "Run seed (default: first config seed)");
    c_train->add_option("--out", train.out, "Run directory (default runs/<row>/<seed>)");
    add_train_overrides(c_train, train.overrides, true);

    EvalArgs eval;
    auto* c_eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test patients");
    c_eval->add_option("--checkpoint", eval.checkpoint, "checkpoint.json")->required();
    c_eval->add_option("--split", eval.split, "Split JSON");
    c_eval->add_option("--out", eval.out, "metrics.json (default next to the checkpoint)");
    c_eval->add_option("--data", eval.data, "Dataset root override");
    c_eval->add_option("--features", eval.features, "Feature cache override");

    AblateArgs ablate;
    auto* c_ablate = app.add_subcommand("ablate", "Run the seven-row ablation grid");
    c_ablate->add_option("--config", ablate.config, "Ablation config JSON")->required();
    c_ablate->add_option("--split", ablate.split, "Split JSON override");
    c_ablate->add_option("--seeds", ablate.seeds, "Seeds override");
    c_ablate->add_option("--rows", ablate.rows, "Subset of row ids");
    c_ablate->add_option("--backbone-override", ablate.backbone_override, "Use this trunk for every row");
    c_ablate->add_option("--runs", ablate.runs, "Runs directory override");
    add_train_overrides(c_ablate, ablate.overrides, false);

    ReportArgs report;
    auto* c_report = app.add_subcommand("report", "Aggregate finished runs into tables");
    c_report->add_option("--runs", report.runs, "Runs directory");
    c_report->add_option("--seeds", report.seeds, "Seeds to collect");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    spdlog::set_level(spdlog::level::from_str(ctx.log_level));
    spdlog::set_pattern("[%l] %v");
    try {
        fs::create_directories(ctx.workdir);
        fs::current_path(ctx.workdir);
        if (*c_synth) return cmd_synth(synth);
        if (*c_extract) return cmd_extract(extract);
        if (*c_split) return cmd_split(split);
        if (*c_train) return cmd_train(train);
        if (*c_eval) return cmd_eval(eval);
        if (*c_ablate) return cmd_ablate(ablate);
        if (*c_report) return cmd_report(report);
    } catch (const Error& e) {
        spdlog::error("{}", e.what());
        return e.exit_code();
    } catch (const fs::filesystem_error& e) {
        spdlog::error("{}", e.what());
        return IoError("").exit_code();
    }
    return 2;
}
