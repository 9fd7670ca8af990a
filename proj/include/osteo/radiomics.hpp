#pragma once

// Handcrafted radiomic descriptors for a histology tile: 19 first-order
// intensity statistics and 10 two-dimensional shape descriptors computed
// over a foreground mask, plus train-set z-score standardization.
//
// Conventions follow the common reference radiomics toolkits: population
// variance, fixed bin width 25 for histogram features, marching-squares
// contour at pixel-edge midpoints for the shape block.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <opencv2/core.hpp>

namespace osteo::radiomics {

inline constexpr std::size_t kFirstOrderCount = 19;
inline constexpr std::size_t kShapeCount = 10;
inline constexpr std::size_t kFeatureCount = kFirstOrderCount + kShapeCount;
inline constexpr double kBinWidth = 25.0;
inline constexpr double kStdFloor = 1e-8;
inline constexpr double kMinForegroundFraction = 0.01;

struct GrayscaleTile {
    int height = 0;
    int width = 0;
    double spacing = 1.0;
    std::vector<double> pixels;  // row-major

    GrayscaleTile() = default;
    GrayscaleTile(int h, int w, double fill = 0.0);

    double& at(int r, int c) { return pixels[static_cast<std::size_t>(r) * width + c]; }
    double at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * width + c]; }
};

struct ForegroundMask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> mask;  // row-major, 0/1

    ForegroundMask() = default;
    ForegroundMask(int h, int w, bool fill = false);

    bool at(int r, int c) const { return mask[static_cast<std::size_t>(r) * width + c] != 0; }
    void set(int r, int c, bool v) { mask[static_cast<std::size_t>(r) * width + c] = v ? 1 : 0; }
    std::size_t count() const;
};

using FirstOrderValues = std::array<double, kFirstOrderCount>;
using ShapeValues = std::array<double, kShapeCount>;

const std::array<std::string_view, kFirstOrderCount>& first_order_names();
const std::array<std::string_view, kShapeCount>& shape_names();
/// Canonical 29-name order: first-order block then shape block.
const std::vector<std::string>& feature_names();

struct RadiomicFeatureVector {
    std::array<double, kFeatureCount> values{};

    static const std::vector<std::string>& names() { return feature_names(); }
    double operator[](std::size_t i) const { return values[i]; }
};

/// Rec. 601 luminance of an 8-bit RGB (R,G,B channel order) image.
/// Throws InvalidInput for anything but a 3-channel 8-bit matrix.
GrayscaleTile to_grayscale(const cv::Mat& rgb);

/// Otsu threshold on a 256-bin histogram of floor(gray). Foreground is the
/// dark class; if it covers under 1% of the tile the mask becomes all-true.
ForegroundMask compute_mask(const GrayscaleTile& gray);

/// Index (0..254) of the Otsu threshold bin; foreground = bins <= index.
int otsu_threshold_bin(const GrayscaleTile& gray);

FirstOrderValues first_order_features(const GrayscaleTile& gray, const ForegroundMask& mask);

ShapeValues shape2d_features(const ForegroundMask& mask, double spacing = 1.0);

RadiomicFeatureVector extract(const cv::Mat& rgb);
RadiomicFeatureVector extract(const GrayscaleTile& gray, const ForegroundMask& mask);

class FeatureStandardizer {
public:
    FeatureStandardizer() = default;
    FeatureStandardizer(std::vector<double> mean, std::vector<double> std);

    /// Fits per-dimension mean and population std. Needs >= 2 vectors.
    static FeatureStandardizer fit(std::span<const RadiomicFeatureVector> train);

    bool fitted() const noexcept { return fitted_; }
    const std::vector<double>& mean() const noexcept { return mean_; }
    const std::vector<double>& std() const noexcept { return std_; }

    /// (v - mean) / max(std, 1e-8). Throws NotFitted before fit().
    std::array<double, kFeatureCount> apply(const RadiomicFeatureVector& v) const;

private:
    std::vector<double> mean_;
    std::vector<double> std_;
    bool fitted_ = false;
};

struct FeatureRow {
    std::string tile_id;
    std::string patient_id;
    int label = 0;
    RadiomicFeatureVector features;
};

/// Writes the cache CSV (header: tile_id,patient_id,label,<29 names>),
/// rows sorted by tile_id, values printed with round-trip precision.
void write_feature_cache(const std::filesystem::path& path, std::vector<FeatureRow> rows);
std::vector<FeatureRow> read_feature_cache(const std::filesystem::path& path);

}  // namespace osteo::radiomics
