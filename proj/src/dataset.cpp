#include "osteo/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <regex>
#include <sstream>

#include <fmt/format.h>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <spdlog/spdlog.h>

#include "osteo/errors.hpp"
#include "osteo/hashing.hpp"

namespace fs = std::filesystem;

namespace osteo::data {

TaskLabels derive_task_labels(int label) {
    if (label < 0 || label >= kNumClasses) throw InvalidInput(fmt::format("label {} out of range", label));
    if (label == 0) return {0, std::nullopt};
    return {1, label - 1};
}

int label_from_tasks(const TaskLabels& t) {
    if (t.y_a == 0) return 0;
    if (!t.y_b) throw InvalidInput("tumor sample without a viability label");
    return 1 + *t.y_b;
}

std::optional<int> parse_label(std::string name) {
    std::string key;
    for (char ch : name) {
        if (std::isalnum(static_cast<unsigned char>(ch))) {
            key.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        }
    }
    if (key == "0" || key == "nontumor" || key == "nontumour") return 0;
    if (key == "1" || key == "nonviabletumor" || key == "nonviable" || key == "necrotic" ||
        key == "necrosis" || key == "nonviabletumour") {
        return 1;
    }
    if (key == "2" || key == "viabletumor" || key == "viable" || key == "viabletumour") return 2;
    return std::nullopt;
}

namespace {

bool is_image(const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return ext == ".jpg" || ext == ".jpeg" || ext == ".png";
}

std::map<std::string, int> read_label_file(const fs::path& file) {
    std::map<std::string, int> out;
    std::ifstream in(file);
    if (!in) throw IoError("cannot read " + file.string());
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw IoError("malformed label row: " + line);
        const std::string name = line.substr(0, comma);
        const auto label = parse_label(line.substr(comma + 1));
        if (!label) throw IoError("unknown class name in label row: " + line);
        out[fs::path(name).stem().string()] = *label;
    }
    return out;
}

}  // namespace

IngestResult ingest(const fs::path& root, const IngestOptions& opts) {
    if (!fs::is_directory(root)) throw IoError("dataset root is not a directory: " + root.string());
    std::optional<std::map<std::string, int>> label_file;
    if (fs::exists(root / "labels.csv")) label_file = read_label_file(root / "labels.csv");

    const std::regex id_re(opts.id_regex);
    IngestResult result;
    std::vector<fs::path> files;
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
        if (entry.is_regular_file() && is_image(entry.path())) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());

    for (const auto& path : files) {
        LabeledTile tile;
        tile.tile_id = path.stem().string();
        tile.image_path = path;

        std::optional<int> label;
        if (label_file) {
            const auto it = label_file->find(tile.tile_id);
            if (it != label_file->end()) label = it->second;
        } else {
            for (const auto& part : fs::relative(path.parent_path(), root)) {
                if (auto l = parse_label(part.string())) label = l;
            }
        }
        if (!label) {
            spdlog::warn("no label for {}; skipped", path.string());
            ++result.skipped_unreadable;
            continue;
        }
        tile.label = *label;

        std::smatch m;
        const std::string name = path.filename().string();
        if (!std::regex_search(name, m, id_re) || m.empty()) {
            throw PatientIdError(fmt::format("cannot parse patient id from '{}' with /{}/", name,
                                             opts.id_regex));
        }
        tile.patient_id = m.size() > 1 && m[1].matched ? m[1].str() : m[0].str();
        if (tile.patient_id.empty()) throw PatientIdError("empty patient id for " + name);

        if (opts.verify_images && load_rgb(path).empty()) {
            spdlog::warn("unreadable image {}; skipped", path.string());
            ++result.skipped_unreadable;
            continue;
        }
        result.tiles.push_back(std::move(tile));
    }
    std::sort(result.tiles.begin(), result.tiles.end(),
              [](const LabeledTile& a, const LabeledTile& b) { return a.tile_id < b.tile_id; });
    for (const auto& t : result.tiles) ++result.class_counts[static_cast<std::size_t>(t.label)];
    spdlog::info("ingested {} tiles (NT {}, NVT {}, VT {}), skipped {}", result.tiles.size(),
                 result.class_counts[0], result.class_counts[1], result.class_counts[2],
                 result.skipped_unreadable);
    return result;
}

nlohmann::json SplitSpec::to_json() const {
    return {{"seed", seed},
            {"train", std::vector<std::string>(train.begin(), train.end())},
            {"val", std::vector<std::string>(val.begin(), val.end())},
            {"test", std::vector<std::string>(test.begin(), test.end())}};
}

SplitSpec SplitSpec::from_json(const nlohmann::json& j) {
    SplitSpec s;
    try {
        s.seed = j.at("seed").get<std::uint64_t>();
        for (const auto& id : j.at("train")) s.train.insert(id.get<std::string>());
        for (const auto& id : j.at("val")) s.val.insert(id.get<std::string>());
        for (const auto& id : j.at("test")) s.test.insert(id.get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed split file: ") + e.what());
    }
    return s;
}

std::string SplitSpec::hash() const { return sha256_hex(to_json().dump()); }

SplitSpec patient_split(const std::vector<LabeledTile>& tiles, const SplitFractions& fractions,
                        std::uint64_t seed) {
    struct Patient {
        std::string id;
        std::array<int, kNumClasses> counts{};
        int total = 0;
    };
    std::map<std::string, Patient> by_id;
    for (const auto& t : tiles) {
        auto& p = by_id[t.patient_id];
        p.id = t.patient_id;
        ++p.counts[static_cast<std::size_t>(t.label)];
        ++p.total;
    }
    if (by_id.size() < 3) {
        throw InfeasibleSplit(fmt::format("need at least 3 patients, have {}", by_id.size()));
    }
    for (int c = 0; c < kNumClasses; ++c) {
        const auto holders = std::count_if(by_id.begin(), by_id.end(),
                                           [c](const auto& kv) { return kv.second.counts[c] > 0; });
        if (holders < 2) {
            throw InfeasibleSplit(fmt::format("class {} is held by {} patient(s); need >= 2",
                                              kClassNames[static_cast<std::size_t>(c)], holders));
        }
    }
    const double fsum = fractions.train + fractions.val + fractions.test;
    if (fractions.train <= 0 || fractions.val <= 0 || fractions.test <= 0 || fsum <= 0) {
        throw InvalidInput("split fractions must be positive");
    }
    const std::array<double, 3> target = {fractions.train / fsum, fractions.val / fsum,
                                          fractions.test / fsum};

    std::vector<Patient> patients;
    for (auto& kv : by_id) patients.push_back(kv.second);
    const double total_tiles = static_cast<double>(tiles.size());

    std::mt19937_64 rng(seed);
    constexpr int kAttempts = 500;
    std::optional<std::array<std::vector<std::string>, 3>> best;
    double best_dev = 0.0;
    for (int attempt = 0; attempt < kAttempts; ++attempt) {
        std::shuffle(patients.begin(), patients.end(), rng);
        std::array<std::vector<std::string>, 3> assign;
        std::array<double, 3> filled{};
        std::array<std::array<int, kNumClasses>, 3> cls{};
        for (const auto& p : patients) {
            std::size_t pick = 0;
            double best_need = -std::numeric_limits<double>::infinity();
            for (std::size_t s = 0; s < 3; ++s) {
                const double need = (target[s] * total_tiles - filled[s]) / (target[s] * total_tiles);
                if (need > best_need) {
                    best_need = need;
                    pick = s;
                }
            }
            assign[pick].push_back(p.id);
            filled[pick] += p.total;
            for (int c = 0; c < kNumClasses; ++c) cls[pick][c] += p.counts[c];
        }
        bool feasible = true;
        for (std::size_t s = 0; s < 3; ++s) {
            for (int c = 0; c < kNumClasses; ++c) feasible = feasible && cls[s][c] > 0;
        }
        if (!feasible) continue;
        double dev = 0.0;
        for (std::size_t s = 0; s < 3; ++s) dev += std::abs(filled[s] / total_tiles - target[s]);
        if (!best || dev < best_dev) {
            best = assign;
            best_dev = dev;
        }
    }
    if (!best) {
        throw InfeasibleSplit(fmt::format(
            "no assignment of {} patients covers all classes in train/val/test after {} attempts",
            patients.size(), kAttempts));
    }
    SplitSpec spec;
    spec.seed = seed;
    spec.train.insert((*best)[0].begin(), (*best)[0].end());
    spec.val.insert((*best)[1].begin(), (*best)[1].end());
    spec.test.insert((*best)[2].begin(), (*best)[2].end());
    return spec;
}

std::vector<LabeledTile> select(const std::vector<LabeledTile>& tiles, const SplitSpec& split,
                                Subset subset) {
    const auto& ids = subset == Subset::train ? split.train
                      : subset == Subset::val ? split.val
                                              : split.test;
    std::vector<LabeledTile> out;
    for (const auto& t : tiles) {
        if (ids.count(t.patient_id)) out.push_back(t);
    }
    return out;
}

AugmentDraw draw_augmentation(const AugmentationPolicy& policy, std::mt19937_64& rng) {
    if (!policy.enabled) return {};
    std::bernoulli_distribution flip(policy.horizontal_flip_prob);
    std::uniform_real_distribution<double> angle(-policy.rotation_range_degrees,
                                                 policy.rotation_range_degrees);
    AugmentDraw d;
    d.flip = flip(rng);
    d.angle_degrees = angle(rng);
    return d;
}

cv::Mat apply_augmentation(const cv::Mat& image, const AugmentDraw& draw) {
    cv::Mat out;
    if (draw.flip) {
        cv::flip(image, out, 1);
    } else {
        out = image.clone();
    }
    if (draw.angle_degrees != 0.0) {
        const cv::Point2f centre(static_cast<float>(out.cols - 1) / 2.0f,
                                 static_cast<float>(out.rows - 1) / 2.0f);
        const cv::Mat rot = cv::getRotationMatrix2D(centre, draw.angle_degrees, 1.0);
        cv::Mat rotated;
        cv::warpAffine(out, rotated, rot, out.size(), cv::INTER_LINEAR, cv::BORDER_REFLECT);
        out = rotated;
    }
    return out;
}

cv::Mat augment(const cv::Mat& image, const AugmentationPolicy& policy, std::mt19937_64& rng) {
    if (!policy.enabled) return image.clone();
    return apply_augmentation(image, draw_augmentation(policy, rng));
}

void normalize_imagenet(ImageTensor& t) {
    for (int ch = 0; ch < t.channels; ++ch) {
        const float m = kImageNetMean[static_cast<std::size_t>(ch)];
        const float s = kImageNetStd[static_cast<std::size_t>(ch)];
        for (int r = 0; r < t.height; ++r) {
            for (int c = 0; c < t.width; ++c) t.at(ch, r, c) = (t.at(ch, r, c) - m) / s;
        }
    }
}

ImageTensor to_tensor(const cv::Mat& rgb, int side) {
    if (rgb.empty() || rgb.channels() != 3 || rgb.depth() != CV_8U) {
        throw InvalidInput("expected 3-channel 8-bit RGB image");
    }
    cv::Mat resized;
    if (rgb.rows != side || rgb.cols != side) {
        cv::resize(rgb, resized, cv::Size(side, side), 0, 0, cv::INTER_LINEAR);
    } else {
        resized = rgb;
    }
    ImageTensor t(3, side, side);
    for (int r = 0; r < side; ++r) {
        const auto* row = resized.ptr<cv::Vec3b>(r);
        for (int c = 0; c < side; ++c) {
            for (int ch = 0; ch < 3; ++ch) t.at(ch, r, c) = static_cast<float>(row[c][ch]) / 255.0f;
        }
    }
    normalize_imagenet(t);
    return t;
}

ImageTensor preprocess(const cv::Mat& rgb, BackboneKind kind) {
    return to_tensor(rgb, native_input_size(kind));
}

cv::Mat load_rgb(const fs::path& path) {
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) return {};
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    return rgb;
}

void save_rgb(const fs::path& path, const cv::Mat& rgb) {
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    const std::vector<int> params = {cv::IMWRITE_JPEG_QUALITY, 95};
    if (!cv::imwrite(path.string(), bgr, params)) throw IoError("cannot write " + path.string());
}

namespace {

struct Canvas {
    int size;
    std::vector<std::array<double, 3>> px;

    Canvas(int s, const std::array<double, 3>& fill)
        : size(s), px(static_cast<std::size_t>(s) * s, fill) {}

    std::array<double, 3>& at(int r, int c) { return px[static_cast<std::size_t>(r) * size + c]; }

    // Anti-aliased disc blended over the canvas.
    void disc(double cy, double cx, double radius, const std::array<double, 3>& colour,
              double opacity = 1.0) {
        const int r0 = std::max(0, static_cast<int>(std::floor(cy - radius - 1)));
        const int r1 = std::min(size - 1, static_cast<int>(std::ceil(cy + radius + 1)));
        const int c0 = std::max(0, static_cast<int>(std::floor(cx - radius - 1)));
        const int c1 = std::min(size - 1, static_cast<int>(std::ceil(cx + radius + 1)));
        for (int r = r0; r <= r1; ++r) {
            for (int c = c0; c <= c1; ++c) {
                const double d = std::hypot(r - cy, c - cx);
                const double a = opacity * std::clamp(radius + 0.5 - d, 0.0, 1.0);
                if (a <= 0.0) continue;
                auto& p = at(r, c);
                for (int k = 0; k < 3; ++k) p[k] = p[k] * (1.0 - a) + colour[k] * a;
            }
        }
    }

    cv::Mat to_mat(std::mt19937_64& rng, double noise_sigma) const {
        std::normal_distribution<double> noise(0.0, noise_sigma);
        cv::Mat out(size, size, CV_8UC3);
        for (int r = 0; r < size; ++r) {
            auto* row = out.ptr<cv::Vec3b>(r);
            for (int c = 0; c < size; ++c) {
                const auto& p = px[static_cast<std::size_t>(r) * size + c];
                for (int k = 0; k < 3; ++k) {
                    row[c][k] = cv::saturate_cast<std::uint8_t>(std::lround(p[k] + noise(rng)));
                }
            }
        }
        return out;
    }
};

std::array<double, 3> add(const std::array<double, 3>& a, const std::array<double, 3>& b,
                          double wb = 1.0) {
    return {a[0] + wb * b[0], a[1] + wb * b[1], a[2] + wb * b[2]};
}

}  // namespace

cv::Mat synth_tile(int label, int size, std::mt19937_64& rng, const std::array<double, 3>& tint,
                   double scale) {
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };

    if (label == 0) {
        // Smooth low-frequency colour field (stroma / normal tissue).
        Canvas cv(size, add({228, 176, 204}, tint));
        struct Wave {
            double fy, fx, phase, amp;
        };
        std::vector<Wave> waves;
        for (int i = 0; i < 3; ++i) {
            waves.push_back({uni(0.3, 1.6), uni(0.3, 1.6), uni(0, 2 * M_PI), uni(8, 18)});
        }
        for (int r = 0; r < size; ++r) {
            for (int c = 0; c < size; ++c) {
                double v = 0.0;
                for (const auto& w : waves) {
                    v += w.amp * std::sin(2 * M_PI * (w.fy * r + w.fx * c) / size + w.phase);
                }
                auto& p = cv.at(r, c);
                p[0] += v;
                p[1] += 0.8 * v;
                p[2] += 0.6 * v;
            }
        }
        return cv.to_mat(rng, 3.0);
    }
    if (label == 1) {
        // Clusters of dark blobs on pale ground (necrosis-like).
        Canvas cv(size, add({240, 218, 228}, tint));
        const std::array<double, 3> blob = add({112, 72, 122}, tint, 0.5);
        const int clusters = 1 + static_cast<int>(u01(rng) * 2.0);
        for (int k = 0; k < clusters; ++k) {
            const double cy = uni(0.2, 0.8) * size, cx = uni(0.2, 0.8) * size;
            const int blobs = 3 + static_cast<int>(u01(rng) * 4.0);
            for (int b = 0; b < blobs; ++b) {
                const double spread = 0.15 * size * scale;
                cv.disc(cy + uni(-spread, spread), cx + uni(-spread, spread),
                        uni(5.0, 10.0) * scale * size / 96.0, blob, uni(0.75, 1.0));
            }
        }
        return cv.to_mat(rng, 3.0);
    }
    // Dense high-frequency dot texture (nuclei-like).
    Canvas cv(size, add({214, 158, 200}, tint));
    const std::array<double, 3> nucleus = add({72, 32, 112}, tint, 0.5);
    const int dots = static_cast<int>(0.02 * size * size / (scale * scale));
    for (int i = 0; i < dots; ++i) {
        cv.disc(uni(0, size), uni(0, size), uni(1.1, 2.1) * scale, nucleus, uni(0.7, 1.0));
    }
    return cv.to_mat(rng, 4.0);
}

std::vector<LabeledTile> synth_generate(const SynthConfig& cfg, const fs::path& out) {
    if (cfg.n_patients < 3) {
        throw InvalidInput(fmt::format("need at least 3 patients, got {}", cfg.n_patients));
    }
    if (cfg.tiles_per_patient < 1 || cfg.tile_size < 16) throw InvalidInput("invalid synth sizes");
    const double mix_sum = cfg.class_mix[0] + cfg.class_mix[1] + cfg.class_mix[2];

    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> tint_noise(0.0, 10.0);
    std::uniform_real_distribution<double> scale_dist(0.85, 1.2);
    std::normal_distribution<double> mix_noise(0.0, 0.25);

    fs::create_directories(out / "synthetic");
    std::vector<LabeledTile> tiles;
    nlohmann::json meta = {{"n_patients", cfg.n_patients},
                           {"tiles_per_patient", cfg.tiles_per_patient},
                           {"seed", cfg.seed},
                           {"tile_size", cfg.tile_size},
                           {"class_mix", cfg.class_mix},
                           {"patients", nlohmann::json::array()}};

    for (int p = 1; p <= cfg.n_patients; ++p) {
        const std::string pid = fmt::format("Case-{}", p);
        std::array<double, 3> tint{};
        for (double& t : tint) t = std::clamp(tint_noise(rng), -18.0, 18.0);
        const double scale = scale_dist(rng);

        // Per-patient class proportions jittered around the global mix; each
        // class gets at least one tile when there is room for it.
        std::array<double, kNumClasses> w{};
        for (int c = 0; c < kNumClasses; ++c) w[c] = cfg.class_mix[c] / mix_sum * std::exp(mix_noise(rng));
        const double wsum = w[0] + w[1] + w[2];
        std::array<int, kNumClasses> counts{};
        const int floor_each = cfg.tiles_per_patient >= kNumClasses ? 1 : 0;
        const int free_tiles = cfg.tiles_per_patient - floor_each * kNumClasses;
        std::array<double, kNumClasses> rem{};
        int assigned = 0;
        for (int c = 0; c < kNumClasses; ++c) {
            const double exact = free_tiles * w[c] / wsum;
            counts[c] = floor_each + static_cast<int>(std::floor(exact));
            rem[c] = exact - std::floor(exact);
            assigned += counts[c];
        }
        while (assigned < cfg.tiles_per_patient) {
            const auto c = static_cast<std::size_t>(std::max_element(rem.begin(), rem.end()) - rem.begin());
            ++counts[c];
            rem[c] = -1.0;
            ++assigned;
        }

        const fs::path dir = out / "synthetic" / pid;
        fs::create_directories(dir);
        int k = 0;
        for (int c = 0; c < kNumClasses; ++c) {
            for (int i = 0; i < counts[c]; ++i, ++k) {
                LabeledTile t;
                t.patient_id = pid;
                t.tile_id = fmt::format("{}-T{:03d}", pid, k);
                t.label = c;
                t.image_path = dir / (t.tile_id + ".jpg");
                save_rgb(t.image_path, synth_tile(c, cfg.tile_size, rng, tint, scale));
                tiles.push_back(std::move(t));
            }
        }
        meta["patients"].push_back(
            {{"patient_id", pid}, {"tint", tint}, {"scale", scale}, {"class_counts", counts}});
    }

    std::sort(tiles.begin(), tiles.end(),
              [](const LabeledTile& a, const LabeledTile& b) { return a.tile_id < b.tile_id; });
    {
        std::ofstream labels(out / "labels.csv", std::ios::binary);
        labels << "filename,label\n";
        for (const auto& t : tiles) {
            labels << t.image_path.filename().string() << ','
                   << kClassNames[static_cast<std::size_t>(t.label)] << '\n';
        }
    }
    {
        std::ofstream m(out / "synthetic_meta.json", std::ios::binary);
        m << meta.dump(2) << '\n';
    }
    return tiles;
}

}  // namespace osteo::data
