#include "osteo/radiomics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include <fmt/format.h>

#include "osteo/errors.hpp"

namespace osteo::radiomics {

GrayscaleTile::GrayscaleTile(int h, int w, double fill)
    : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, fill) {}

ForegroundMask::ForegroundMask(int h, int w, bool fill)
    : height(h), width(w), mask(static_cast<std::size_t>(h) * w, fill ? 1 : 0) {}

std::size_t ForegroundMask::count() const {
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

const std::array<std::string_view, kFirstOrderCount>& first_order_names() {
    static constexpr std::array<std::string_view, kFirstOrderCount> names = {
        "Energy",       "TotalEnergy",        "Entropy",
        "Minimum",      "10Percentile",       "90Percentile",
        "Maximum",      "Mean",               "Median",
        "InterquartileRange", "Range",        "MeanAbsoluteDeviation",
        "RobustMeanAbsoluteDeviation", "RootMeanSquared", "StandardDeviation",
        "Skewness",     "Kurtosis",           "Variance",
        "Uniformity"};
    return names;
}

const std::array<std::string_view, kShapeCount>& shape_names() {
    static constexpr std::array<std::string_view, kShapeCount> names = {
        "MeshSurface",     "PixelSurface",    "Perimeter",
        "PerimeterSurfaceRatio", "Sphericity", "SphericalDisproportion",
        "MaximumDiameter", "MajorAxisLength", "MinorAxisLength",
        "Elongation"};
    return names;
}

const std::vector<std::string>& feature_names() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> out;
        for (auto n : first_order_names()) out.emplace_back("firstorder_" + std::string(n));
        for (auto n : shape_names()) out.emplace_back("shape2D_" + std::string(n));
        return out;
    }();
    return names;
}

GrayscaleTile to_grayscale(const cv::Mat& rgb) {
    if (rgb.empty() || rgb.channels() != 3 || rgb.depth() != CV_8U) {
        throw InvalidInput(fmt::format("expected 3-channel 8-bit image, got {} channel(s)",
                                       rgb.empty() ? 0 : rgb.channels()));
    }
    GrayscaleTile gray(rgb.rows, rgb.cols);
    for (int r = 0; r < rgb.rows; ++r) {
        const auto* row = rgb.ptr<cv::Vec3b>(r);
        for (int c = 0; c < rgb.cols; ++c) {
            gray.at(r, c) = 0.299 * row[c][0] + 0.587 * row[c][1] + 0.114 * row[c][2];
        }
    }
    return gray;
}

int otsu_threshold_bin(const GrayscaleTile& gray) {
    std::array<double, 256> hist{};
    for (double v : gray.pixels) {
        hist[static_cast<std::size_t>(std::clamp(std::floor(v), 0.0, 255.0))] += 1.0;
    }
    const double total = static_cast<double>(gray.pixels.size());
    double mean_total = 0.0;
    for (int i = 0; i < 256; ++i) mean_total += i * hist[i] / total;

    int best = 0;
    double best_var = -1.0;
    double w0 = 0.0;
    double mu0 = 0.0;
    for (int t = 0; t < 255; ++t) {
        w0 += hist[t] / total;
        mu0 += t * hist[t] / total;
        if (w0 <= 0.0 || w0 >= 1.0) continue;
        const double num = mean_total * w0 - mu0;
        const double between = num * num / (w0 * (1.0 - w0));
        if (between > best_var) {
            best_var = between;
            best = t;
        }
    }
    return best;
}

ForegroundMask compute_mask(const GrayscaleTile& gray) {
    const int t = otsu_threshold_bin(gray);
    ForegroundMask mask(gray.height, gray.width);
    for (std::size_t i = 0; i < gray.pixels.size(); ++i) {
        mask.mask[i] = std::floor(gray.pixels[i]) <= t ? 1 : 0;
    }
    const double frac = static_cast<double>(mask.count()) / static_cast<double>(gray.pixels.size());
    if (frac < kMinForegroundFraction) {
        std::fill(mask.mask.begin(), mask.mask.end(), std::uint8_t{1});
    }
    return mask;
}

namespace {

void check_mask(const GrayscaleTile* gray, const ForegroundMask& mask) {
    if (gray && (gray->height != mask.height || gray->width != mask.width)) {
        throw ShapeError(fmt::format("mask {}x{} does not match tile {}x{}", mask.height,
                                     mask.width, gray->height, gray->width));
    }
    if (mask.count() == 0) throw EmptyMask("foreground mask has no pixels");
}

// Linear-interpolated percentile of a sorted sample (rank q*(n-1)).
double percentile(const std::vector<double>& sorted, double q) {
    const double pos = q / 100.0 * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
}

}  // namespace

FirstOrderValues first_order_features(const GrayscaleTile& gray, const ForegroundMask& mask) {
    check_mask(&gray, mask);
    std::vector<double> x;
    x.reserve(mask.count());
    for (std::size_t i = 0; i < gray.pixels.size(); ++i) {
        if (mask.mask[i]) x.push_back(gray.pixels[i]);
    }
    const auto n = static_cast<double>(x.size());

    double sum = 0.0, sum_sq = 0.0;
    for (double v : x) {
        sum += v;
        sum_sq += v * v;
    }
    const double mean = sum / n;

    double m2 = 0.0, m3 = 0.0, m4 = 0.0, mad = 0.0;
    for (double v : x) {
        const double d = v - mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
        mad += std::abs(d);
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    mad /= n;

    std::vector<double> sorted = x;
    std::sort(sorted.begin(), sorted.end());
    const double p10 = percentile(sorted, 10.0);
    const double p25 = percentile(sorted, 25.0);
    const double median = percentile(sorted, 50.0);
    const double p75 = percentile(sorted, 75.0);
    const double p90 = percentile(sorted, 90.0);

    double robust_sum = 0.0;
    std::size_t robust_n = 0;
    for (double v : x) {
        if (v >= p10 && v <= p90) {
            robust_sum += v;
            ++robust_n;
        }
    }
    const double robust_mean = robust_sum / static_cast<double>(robust_n);
    double rmad = 0.0;
    for (double v : x) {
        if (v >= p10 && v <= p90) rmad += std::abs(v - robust_mean);
    }
    rmad /= static_cast<double>(robust_n);

    // Bins of fixed width anchored at 0: [0,25), [25,50), ...
    std::vector<double> hist;
    for (double v : x) {
        const auto bin = static_cast<std::size_t>(std::floor(v / kBinWidth));
        if (bin >= hist.size()) hist.resize(bin + 1, 0.0);
        hist[bin] += 1.0;
    }
    double entropy = 0.0, uniformity = 0.0;
    for (double c : hist) {
        if (c <= 0.0) continue;
        const double p = c / n;
        entropy -= p * std::log2(p);
        uniformity += p * p;
    }

    const double skewness = m2 < 1e-12 ? 0.0 : m3 / std::pow(m2, 1.5);
    const double kurtosis = m2 < 1e-12 ? 0.0 : m4 / (m2 * m2);
    const double area = gray.spacing * gray.spacing;

    return {sum_sq,
            area * sum_sq,
            entropy,
            sorted.front(),
            p10,
            p90,
            sorted.back(),
            mean,
            median,
            p75 - p25,
            sorted.back() - sorted.front(),
            mad,
            rmad,
            std::sqrt(sum_sq / n),
            std::sqrt(m2),
            skewness,
            kurtosis,
            m2,
            uniformity};
}

namespace {

struct Point {
    double r;
    double c;
};

// Square corners in (row, col) offsets, ordered clockwise in image space;
// bit k of the case index is set when corner k is foreground.
constexpr std::array<std::array<int, 2>, 4> kCorners = {{{0, 0}, {0, 1}, {1, 1}, {1, 0}}};
// Edge k joins corner k and corner (k+1)%4; vertices sit at edge midpoints.
constexpr std::array<Point, 4> kEdgeMid = {{{0.0, 0.5}, {0.5, 1.0}, {1.0, 0.5}, {0.5, 0.0}}};

struct Segment {
    int from;
    int to;
};

struct CaseEntry {
    std::array<Segment, 2> segments{};
    int count = 0;
};

// Segments of each of the 16 cases, oriented so foreground lies to the left
// when walking from -> to. Diagonal (saddle) cases keep the two foreground
// corners disconnected.
const std::array<CaseEntry, 16>& case_table() {
    static const std::array<CaseEntry, 16> table = [] {
        std::array<CaseEntry, 16> t{};
        auto orient = [](Segment s, int corner, bool corner_is_fg) {
            const Point a = kEdgeMid[s.from];
            const Point b = kEdgeMid[s.to];
            const Point p{static_cast<double>(kCorners[corner][0]),
                          static_cast<double>(kCorners[corner][1])};
            // x = col, y = row: cross of (b - a) x (p - a).
            const double cross = (b.c - a.c) * (p.r - a.r) - (b.r - a.r) * (p.c - a.c);
            const bool left = cross > 0.0;
            return left == corner_is_fg ? s : Segment{s.to, s.from};
        };
        for (int idx = 1; idx < 15; ++idx) {
            auto fg = [&](int k) { return (idx >> k) & 1; };
            const int n_fg = fg(0) + fg(1) + fg(2) + fg(3);
            CaseEntry& e = t[idx];
            if (n_fg == 1 || n_fg == 3) {
                const bool odd_is_fg = n_fg == 1;
                int odd = 0;
                for (int k = 0; k < 4; ++k) {
                    if (static_cast<bool>(fg(k)) == odd_is_fg) odd = k;
                }
                // The corner is cut by the edges adjacent to it.
                e.segments[0] = orient({(odd + 3) % 4, odd}, odd, odd_is_fg);
                e.count = 1;
            } else if (fg(0) == fg(2)) {
                // Saddle: cut each foreground corner separately.
                int c = 0;
                for (int k = 0; k < 4; ++k) {
                    if (fg(k)) e.segments[c++] = orient({(k + 3) % 4, k}, k, true);
                }
                e.count = 2;
            } else {
                // Two adjacent corners: a straight cut across the square.
                int first = 0;
                for (int k = 0; k < 4; ++k) {
                    if (fg(k) && fg((k + 1) % 4)) first = k;
                }
                // Foreground edge is `first`; cut runs between the two edges
                // flanking it.
                Segment s{(first + 3) % 4, (first + 1) % 4};
                e.segments[0] = orient(s, first, true);
                e.count = 1;
            }
        }
        return t;
    }();
    return table;
}

double cross(const Point& o, const Point& a, const Point& b) {
    return (a.c - o.c) * (b.r - o.r) - (a.r - o.r) * (b.c - o.c);
}

// Maximum pairwise distance, searched over the convex hull only.
double max_diameter(std::vector<Point> pts) {
    if (pts.size() < 2) return 0.0;
    std::sort(pts.begin(), pts.end(), [](const Point& a, const Point& b) {
        return a.r < b.r || (a.r == b.r && a.c < b.c);
    });
    pts.erase(std::unique(pts.begin(), pts.end(),
                          [](const Point& a, const Point& b) { return a.r == b.r && a.c == b.c; }),
              pts.end());
    if (pts.size() < 3) {
        return std::hypot(pts.front().r - pts.back().r, pts.front().c - pts.back().c);
    }
    std::vector<Point> hull(2 * pts.size());
    std::size_t k = 0;
    for (const auto& p : pts) {
        while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
        hull[k++] = p;
    }
    for (std::size_t i = pts.size() - 1, lower = k + 1; i-- > 0;) {
        while (k >= lower && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
        hull[k++] = pts[i];
    }
    hull.resize(k - 1);
    double best = 0.0;
    for (std::size_t i = 0; i < hull.size(); ++i) {
        for (std::size_t j = i + 1; j < hull.size(); ++j) {
            best = std::max(best, std::hypot(hull[i].r - hull[j].r, hull[i].c - hull[j].c));
        }
    }
    return best;
}

}  // namespace

ShapeValues shape2d_features(const ForegroundMask& mask, double spacing) {
    check_mask(nullptr, mask);
    const auto& table = case_table();

    // Zero padding of one pixel on each side; cell (r, c) has its top-left
    // corner at padded pixel (r, c), i.e. original pixel (r-1, c-1).
    auto padded = [&](int r, int c) {
        const int rr = r - 1, cc = c - 1;
        return rr >= 0 && cc >= 0 && rr < mask.height && cc < mask.width && mask.at(rr, cc);
    };

    double twice_area = 0.0;
    double perimeter = 0.0;
    std::vector<Point> vertices;
    for (int r = 0; r <= mask.height; ++r) {
        for (int c = 0; c <= mask.width; ++c) {
            int idx = 0;
            for (int k = 0; k < 4; ++k) {
                if (padded(r + kCorners[k][0], c + kCorners[k][1])) idx |= 1 << k;
            }
            const CaseEntry& e = table[idx];
            for (int s = 0; s < e.count; ++s) {
                const Point a{(r + kEdgeMid[e.segments[s].from].r) * spacing,
                              (c + kEdgeMid[e.segments[s].from].c) * spacing};
                const Point b{(r + kEdgeMid[e.segments[s].to].r) * spacing,
                              (c + kEdgeMid[e.segments[s].to].c) * spacing};
                twice_area += a.c * b.r - a.r * b.c;
                perimeter += std::hypot(b.r - a.r, b.c - a.c);
                vertices.push_back(a);
                vertices.push_back(b);
            }
        }
    }
    const double surface = std::abs(twice_area) / 2.0;
    const auto n_pixels = static_cast<double>(mask.count());
    const double pixel_surface = n_pixels * spacing * spacing;

    // Population covariance of pixel-centre coordinates.
    double mr = 0.0, mc = 0.0;
    for (int r = 0; r < mask.height; ++r) {
        for (int c = 0; c < mask.width; ++c) {
            if (mask.at(r, c)) {
                mr += r * spacing;
                mc += c * spacing;
            }
        }
    }
    mr /= n_pixels;
    mc /= n_pixels;
    double srr = 0.0, scc = 0.0, src = 0.0;
    for (int r = 0; r < mask.height; ++r) {
        for (int c = 0; c < mask.width; ++c) {
            if (!mask.at(r, c)) continue;
            const double dr = r * spacing - mr;
            const double dc = c * spacing - mc;
            srr += dr * dr;
            scc += dc * dc;
            src += dr * dc;
        }
    }
    srr /= n_pixels;
    scc /= n_pixels;
    src /= n_pixels;
    const double half_trace = 0.5 * (srr + scc);
    const double disc = std::sqrt(std::max(0.0, 0.25 * (srr - scc) * (srr - scc) + src * src));
    const double lambda_major = std::max(0.0, half_trace + disc);
    const double lambda_minor = std::max(0.0, half_trace - disc);

    const double major = 4.0 * std::sqrt(lambda_major);
    const double minor = 4.0 * std::sqrt(lambda_minor);
    const double elongation = lambda_major > 0.0 ? std::sqrt(lambda_minor / lambda_major) : 1.0;
    const double sphericity = 2.0 * std::sqrt(M_PI * surface) / perimeter;

    return {surface,
            pixel_surface,
            perimeter,
            perimeter / surface,
            sphericity,
            1.0 / sphericity,
            max_diameter(std::move(vertices)),
            major,
            minor,
            elongation};
}

RadiomicFeatureVector extract(const GrayscaleTile& gray, const ForegroundMask& mask) {
    RadiomicFeatureVector out;
    const auto fo = first_order_features(gray, mask);
    const auto sh = shape2d_features(mask, gray.spacing);
    std::copy(fo.begin(), fo.end(), out.values.begin());
    std::copy(sh.begin(), sh.end(), out.values.begin() + kFirstOrderCount);
    for (double v : out.values) {
        if (!std::isfinite(v)) throw InvalidInput("non-finite radiomic feature");
    }
    return out;
}

RadiomicFeatureVector extract(const cv::Mat& rgb) {
    const GrayscaleTile gray = to_grayscale(rgb);
    return extract(gray, compute_mask(gray));
}

FeatureStandardizer::FeatureStandardizer(std::vector<double> mean, std::vector<double> std)
    : mean_(std::move(mean)), std_(std::move(std)), fitted_(true) {
    if (mean_.size() != kFeatureCount || std_.size() != kFeatureCount) {
        throw ShapeError("standardizer state must have 29 entries");
    }
    for (double& s : std_) s = std::max(s, kStdFloor);
}

FeatureStandardizer FeatureStandardizer::fit(std::span<const RadiomicFeatureVector> train) {
    if (train.size() < 2) throw InvalidInput("standardizer needs at least 2 training vectors");
    std::vector<double> mean(kFeatureCount, 0.0), sd(kFeatureCount, 0.0);
    const auto n = static_cast<double>(train.size());
    for (const auto& v : train) {
        for (std::size_t j = 0; j < kFeatureCount; ++j) mean[j] += v[j];
    }
    for (double& m : mean) m /= n;
    for (const auto& v : train) {
        for (std::size_t j = 0; j < kFeatureCount; ++j) sd[j] += (v[j] - mean[j]) * (v[j] - mean[j]);
    }
    for (double& s : sd) s = std::sqrt(s / n);
    return FeatureStandardizer(std::move(mean), std::move(sd));
}

std::array<double, kFeatureCount> FeatureStandardizer::apply(const RadiomicFeatureVector& v) const {
    if (!fitted_) throw NotFitted("feature standardizer applied before fit");
    std::array<double, kFeatureCount> out{};
    for (std::size_t j = 0; j < kFeatureCount; ++j) out[j] = (v[j] - mean_[j]) / std_[j];
    return out;
}

void write_feature_cache(const std::filesystem::path& path, std::vector<FeatureRow> rows) {
    std::sort(rows.begin(), rows.end(),
              [](const FeatureRow& a, const FeatureRow& b) { return a.tile_id < b.tile_id; });
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << "tile_id,patient_id,label";
    for (const auto& n : feature_names()) out << ',' << n;
    out << '\n';
    for (const auto& row : rows) {
        out << row.tile_id << ',' << row.patient_id << ',' << row.label;
        for (double v : row.features.values) out << ',' << fmt::format("{:.17g}", v);
        out << '\n';
    }
    if (!out) throw IoError("write failed for " + path.string());
}

std::vector<FeatureRow> read_feature_cache(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read feature cache " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw IoError("empty feature cache " + path.string());
    {
        std::vector<std::string> header;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) header.push_back(cell);
        if (header.size() != 3 + kFeatureCount || header[0] != "tile_id" ||
            header[1] != "patient_id" || header[2] != "label" ||
            !std::equal(feature_names().begin(), feature_names().end(), header.begin() + 3)) {
            throw IoError("feature cache header mismatch in " + path.string());
        }
    }
    std::vector<FeatureRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        FeatureRow row;
        std::getline(ss, row.tile_id, ',');
        std::getline(ss, row.patient_id, ',');
        std::getline(ss, cell, ',');
        row.label = std::stoi(cell);
        for (std::size_t j = 0; j < kFeatureCount; ++j) {
            if (!std::getline(ss, cell, ',')) {
                throw IoError("short row for tile " + row.tile_id + " in " + path.string());
            }
            row.features.values[j] = std::stod(cell);
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace osteo::radiomics
