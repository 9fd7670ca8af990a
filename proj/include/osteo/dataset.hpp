#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>

#include "osteo/backbone.hpp"

namespace osteo::data {

inline constexpr int kNumClasses = 3;
inline constexpr std::array<const char*, kNumClasses> kClassNames = {"Non-tumor", "Non-viable-tumor",
                                                                      "Viable-tumor"};
inline constexpr std::array<const char*, kNumClasses> kClassShort = {"NT", "NVT", "VT"};

struct LabeledTile {
    std::string tile_id;
    std::string patient_id;
    std::filesystem::path image_path;
    int label = 0;  // 0 non-tumor, 1 non-viable tumor, 2 viable tumor
};

struct TaskLabels {
    int y_a = 0;
    std::optional<int> y_b;
};

TaskLabels derive_task_labels(int label);
/// Inverse of derive_task_labels.
int label_from_tasks(const TaskLabels& t);

/// Parses class names used by the TCIA annotations and folder names
/// ("Non-Tumor", "Non-Viable-Tumor", "Viable", ...) or a bare 0/1/2.
std::optional<int> parse_label(std::string name);

struct IngestOptions {
    std::string id_regex = R"(^(Case-\d+))";
    /// Decode every image and skip unreadable ones.
    bool verify_images = true;
};

struct IngestResult {
    std::vector<LabeledTile> tiles;  // sorted by tile_id
    std::size_t skipped_unreadable = 0;
    std::array<std::size_t, kNumClasses> class_counts{};
};

/// Walks `root` for .jpg/.jpeg/.png tiles. Labels come from `labels.csv`
/// at the root (columns filename,label) when present, otherwise from a path
/// component naming the class. A tile whose patient id cannot be parsed is
/// a hard error (PatientIdError).
IngestResult ingest(const std::filesystem::path& root, const IngestOptions& opts = {});

struct SplitFractions {
    double train = 0.7;
    double val = 0.1;
    double test = 0.2;
};

struct SplitSpec {
    std::uint64_t seed = 0;
    std::set<std::string> train;
    std::set<std::string> val;
    std::set<std::string> test;

    /// Canonical content hash over seed and the three patient sets.
    std::string hash() const;
    nlohmann::json to_json() const;
    static SplitSpec from_json(const nlohmann::json& j);
    bool operator==(const SplitSpec&) const = default;
};

enum class Subset { train, val, test };

/// Greedy randomized packing of whole patients into subsets, best of many
/// seeded attempts by total deviation from the target tile fractions, with
/// every class present in every subset as a hard constraint.
SplitSpec patient_split(const std::vector<LabeledTile>& tiles, const SplitFractions& fractions,
                        std::uint64_t seed);

std::vector<LabeledTile> select(const std::vector<LabeledTile>& tiles, const SplitSpec& split,
                                Subset subset);

struct AugmentationPolicy {
    double horizontal_flip_prob = 0.5;
    double rotation_range_degrees = 15.0;
    bool enabled = true;
};

struct AugmentDraw {
    bool flip = false;
    double angle_degrees = 0.0;
};

AugmentDraw draw_augmentation(const AugmentationPolicy& policy, std::mt19937_64& rng);
/// Horizontal flip then rotation about the centre with reflected borders.
cv::Mat apply_augmentation(const cv::Mat& image, const AugmentDraw& draw);
cv::Mat augment(const cv::Mat& image, const AugmentationPolicy& policy, std::mt19937_64& rng);

inline constexpr std::array<float, 3> kImageNetMean = {0.485f, 0.456f, 0.406f};
inline constexpr std::array<float, 3> kImageNetStd = {0.229f, 0.224f, 0.225f};

/// [0,1]-scaled RGB tensor -> ImageNet-normalized, in place.
void normalize_imagenet(ImageTensor& t);
/// Resize to `side` x `side` (bilinear), scale to [0,1], normalize.
ImageTensor to_tensor(const cv::Mat& rgb, int side);
ImageTensor preprocess(const cv::Mat& rgb, BackboneKind kind);

/// Reads an image as 8-bit RGB. Returns an empty Mat when unreadable.
cv::Mat load_rgb(const std::filesystem::path& path);
void save_rgb(const std::filesystem::path& path, const cv::Mat& rgb);

struct SynthConfig {
    int n_patients = 10;
    int tiles_per_patient = 30;
    std::uint64_t seed = 1;
    int tile_size = 96;
    /// Class mix; the default mirrors the TCIA histogram 536/263/345.
    std::array<double, kNumClasses> class_mix = {536.0, 263.0, 345.0};
};

/// Procedural dataset written as <out>/synthetic/<Case-N>/<Case-N-Tk>.jpg with
/// labels.csv and synthetic_meta.json at the root. Returns the tile list.
std::vector<LabeledTile> synth_generate(const SynthConfig& cfg, const std::filesystem::path& out);

/// Renders one synthetic tile (exposed for tests).
cv::Mat synth_tile(int label, int size, std::mt19937_64& rng, const std::array<double, 3>& tint,
                   double scale);

}  // namespace osteo::data
