#pragma once

#include <filesystem>
#include <random>
#include <string>

#include <fmt/format.h>
#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

namespace osteo::test {

inline std::filesystem::path data_dir() { return OSTEO_TEST_DATA_DIR; }

inline std::filesystem::path temp_dir(const std::string& tag) {
    static std::mt19937_64 rng(std::random_device{}());
    auto p = std::filesystem::temp_directory_path() / fmt::format("osteo-{}-{:x}", tag, rng());
    std::filesystem::create_directories(p);
    return p;
}

/// Smooth random RGB field with some dark blobs so the Otsu mask is non-trivial.
inline cv::Mat random_rgb(int h, int w, unsigned seed) {
    cv::RNG rng(seed + 1);
    cv::Mat img(h, w, CV_8UC3);
    rng.fill(img, cv::RNG::UNIFORM, cv::Scalar(150, 120, 160), cv::Scalar(240, 210, 240));
    for (int k = 0; k < 4; ++k) {
        const cv::Point c(rng.uniform(0, w), rng.uniform(0, h));
        cv::circle(img, c, rng.uniform(2, std::max(3, h / 5)), cv::Scalar(60, 30, 100), cv::FILLED);
    }
    cv::GaussianBlur(img, img, cv::Size(3, 3), 0.8);
    return img;
}

}  // namespace osteo::test
