#include "osteo/backbone.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include <fmt/format.h>

#include "osteo/errors.hpp"

namespace osteo {

std::string_view to_string(BackboneKind kind) {
    switch (kind) {
        case BackboneKind::tiny: return "tiny";
        case BackboneKind::inception_v3: return "inception_v3";
        case BackboneKind::vit: return "vit";
        case BackboneKind::efficientnet_b0: return "efficientnet_b0";
    }
    return "unknown";
}

BackboneKind backbone_from_string(std::string_view name) {
    if (name == "tiny") return BackboneKind::tiny;
    if (name == "inception_v3") return BackboneKind::inception_v3;
    if (name == "vit") return BackboneKind::vit;
    if (name == "efficientnet_b0") return BackboneKind::efficientnet_b0;
    throw ConfigError(fmt::format("unknown backbone '{}'", name));
}

int native_input_size(BackboneKind kind) {
    switch (kind) {
        case BackboneKind::tiny: return 64;
        case BackboneKind::inception_v3: return 299;
        case BackboneKind::vit: return 224;
        case BackboneKind::efficientnet_b0: return 224;
    }
    return 224;
}

Eigen::VectorXd FlattenTrunk::features(const ImageTensor& x) const {
    Eigen::VectorXd out(static_cast<Eigen::Index>(x.data.size()));
    for (std::size_t i = 0; i < x.data.size(); ++i) out[static_cast<Eigen::Index>(i)] = x.data[i];
    return out;
}

namespace {

// Single-channel plane, row-major.
struct Plane {
    int h = 0;
    int w = 0;
    std::vector<double> v;

    Plane(int hh, int ww) : h(hh), w(ww), v(static_cast<std::size_t>(hh) * ww, 0.0) {}
    double& at(int r, int c) { return v[static_cast<std::size_t>(r) * w + c]; }
    double at(int r, int c) const { return v[static_cast<std::size_t>(r) * w + c]; }
};

using Kernel = std::array<double, 9>;

constexpr Kernel kBox = {1 / 9.0, 1 / 9.0, 1 / 9.0, 1 / 9.0, 1 / 9.0, 1 / 9.0, 1 / 9.0, 1 / 9.0, 1 / 9.0};
constexpr Kernel kDx = {0, 0, 0, -0.5, 0, 0.5, 0, 0, 0};
constexpr Kernel kDy = {0, -0.5, 0, 0, 0, 0, 0, 0.5, 0};
constexpr Kernel kLaplace = {0, 1, 0, 1, -4, 1, 0, 1, 0};
constexpr std::array<const Kernel*, 4> kBank = {&kBox, &kDx, &kDy, &kLaplace};

int reflect(int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) i = i < 0 ? -i : 2 * n - 2 - i;
    return i;
}

Plane convolve(const Plane& p, const Kernel& k) {
    Plane out(p.h, p.w);
    for (int r = 0; r < p.h; ++r) {
        for (int c = 0; c < p.w; ++c) {
            double acc = 0.0;
            for (int dr = -1; dr <= 1; ++dr) {
                const int rr = reflect(r + dr, p.h);
                for (int dc = -1; dc <= 1; ++dc) {
                    acc += k[(dr + 1) * 3 + (dc + 1)] * p.at(rr, reflect(c + dc, p.w));
                }
            }
            out.at(r, c) = acc;
        }
    }
    return out;
}

Plane avg_pool2(const Plane& p) {
    Plane out(std::max(1, p.h / 2), std::max(1, p.w / 2));
    for (int r = 0; r < out.h; ++r) {
        for (int c = 0; c < out.w; ++c) {
            double acc = 0.0;
            int n = 0;
            for (int dr = 0; dr < 2; ++dr) {
                for (int dc = 0; dc < 2; ++dc) {
                    const int rr = 2 * r + dr, cc = 2 * c + dc;
                    if (rr < p.h && cc < p.w) {
                        acc += p.at(rr, cc);
                        ++n;
                    }
                }
            }
            out.at(r, c) = acc / n;
        }
    }
    return out;
}

std::vector<Plane> split_channels(const ImageTensor& x) {
    std::vector<Plane> out;
    for (int ch = 0; ch < x.channels; ++ch) {
        Plane p(x.height, x.width);
        for (int r = 0; r < x.height; ++r) {
            for (int c = 0; c < x.width; ++c) p.at(r, c) = x.at(ch, r, c);
        }
        out.push_back(std::move(p));
    }
    return out;
}

void push_mean_std(const std::vector<double>& v, std::vector<double>& out, bool absolute) {
    double s = 0.0, s2 = 0.0;
    for (double x : v) {
        const double y = absolute ? std::abs(x) : x;
        s += y;
        s2 += y * y;
    }
    const double n = static_cast<double>(v.size());
    const double mean = s / n;
    out.push_back(mean);
    out.push_back(std::sqrt(std::max(0.0, s2 / n - mean * mean)));
}

// Channel stats plus rectified filter-bank responses at one scale.
void filter_bank_stats(const std::vector<Plane>& channels, std::vector<double>& out) {
    for (const auto& p : channels) {
        push_mean_std(p.v, out, false);
        for (const Kernel* k : kBank) push_mean_std(convolve(p, *k).v, out, true);
    }
}

void dark_fractions(const std::vector<Plane>& channels, std::vector<double>& out) {
    const std::size_t n = channels.front().v.size();
    std::size_t below_neg1 = 0, below_zero = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double lum = 0.0;
        for (const auto& p : channels) lum += p.v[i];
        lum /= static_cast<double>(channels.size());
        below_neg1 += lum < -1.0;
        below_zero += lum < 0.0;
    }
    out.push_back(static_cast<double>(below_neg1) / static_cast<double>(n));
    out.push_back(static_cast<double>(below_zero) / static_cast<double>(n));
}

Eigen::VectorXd to_vector(const std::vector<double>& v) {
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

void require_size(const ImageTensor& x, int side, const std::string& name) {
    if (x.channels != 3 || x.height != side || x.width != side) {
        throw ShapeError(fmt::format("{} trunk expects 3x{}x{}, got {}x{}x{}", name, side, side,
                                     x.channels, x.height, x.width));
    }
}

// Filter bank at full resolution plus a coarser gradient pass.
class TinyTrunk final : public Trunk {
public:
    int feature_dim() const override { return 3 * 10 + 3 * 3 + 2; }
    int input_size() const override { return native_input_size(BackboneKind::tiny); }
    std::string name() const override { return "tiny"; }

    Eigen::VectorXd features(const ImageTensor& x) const override {
        require_size(x, input_size(), name());
        const auto channels = split_channels(x);
        std::vector<double> out;
        filter_bank_stats(channels, out);
        for (const auto& p : channels) {
            const Plane coarse = avg_pool2(p);
            for (const Kernel* k : {&kDx, &kDy, &kLaplace}) {
                const Plane r = convolve(coarse, *k);
                double s = 0.0;
                for (double v : r.v) s += std::abs(v);
                out.push_back(s / static_cast<double>(r.v.size()));
            }
        }
        dark_fractions(channels, out);
        return to_vector(out);
    }
};

// Parallel branches at three scales, concatenated.
class InceptionStandIn final : public Trunk {
public:
    int feature_dim() const override { return 3 * 3 * 10 + 2; }
    int input_size() const override { return native_input_size(BackboneKind::inception_v3); }
    std::string name() const override { return "inception_v3(builtin)"; }

    Eigen::VectorXd features(const ImageTensor& x) const override {
        require_size(x, input_size(), name());
        auto channels = split_channels(x);
        std::vector<double> out;
        dark_fractions(channels, out);
        for (int scale = 0; scale < 3; ++scale) {
            filter_bank_stats(channels, out);
            for (auto& p : channels) p = avg_pool2(p);
        }
        return to_vector(out);
    }
};

// Non-overlapping 16x16 patch tokens, fixed random linear embedding,
// rectification, mean and max pooling over tokens.
class VitStandIn final : public Trunk {
public:
    static constexpr int kPatch = 16;
    static constexpr int kEmbed = 48;

    explicit VitStandIn(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(3.0 * kPatch * kPatch));
        embed_ = Eigen::MatrixXd(kEmbed, 3 * kPatch * kPatch);
        for (Eigen::Index i = 0; i < embed_.size(); ++i) embed_.data()[i] = normal(rng);
    }
    int feature_dim() const override { return 2 * kEmbed; }
    int input_size() const override { return native_input_size(BackboneKind::vit); }
    std::string name() const override { return "vit(builtin)"; }

    Eigen::VectorXd features(const ImageTensor& x) const override {
        require_size(x, input_size(), name());
        const int grid = x.height / kPatch;
        Eigen::VectorXd mean = Eigen::VectorXd::Zero(kEmbed);
        Eigen::VectorXd mx = Eigen::VectorXd::Zero(kEmbed);
        Eigen::VectorXd patch(3 * kPatch * kPatch);
        for (int pr = 0; pr < grid; ++pr) {
            for (int pc = 0; pc < grid; ++pc) {
                Eigen::Index k = 0;
                for (int ch = 0; ch < 3; ++ch) {
                    for (int r = 0; r < kPatch; ++r) {
                        for (int c = 0; c < kPatch; ++c) {
                            patch[k++] = x.at(ch, pr * kPatch + r, pc * kPatch + c);
                        }
                    }
                }
                const Eigen::VectorXd tok = (embed_ * patch).cwiseMax(0.0);
                mean += tok;
                mx = mx.cwiseMax(tok);
            }
        }
        mean /= static_cast<double>(grid * grid);
        Eigen::VectorXd out(2 * kEmbed);
        out << mean, mx;
        return out;
    }

private:
    Eigen::MatrixXd embed_;
};

// Depthwise filter bank followed by fixed random pointwise mixing and
// global average pooling, at two strides.
class EfficientNetStandIn final : public Trunk {
public:
    static constexpr int kMixed = 32;

    explicit EfficientNetStandIn(std::uint64_t seed) {
        std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
        std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(12.0));
        for (auto& m : mix_) {
            m = Eigen::MatrixXd(kMixed, 12);
            for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
        }
    }
    int feature_dim() const override { return 2 * kMixed; }
    int input_size() const override { return native_input_size(BackboneKind::efficientnet_b0); }
    std::string name() const override { return "efficientnet_b0(builtin)"; }

    Eigen::VectorXd features(const ImageTensor& x) const override {
        require_size(x, input_size(), name());
        auto channels = split_channels(x);
        for (auto& p : channels) p = avg_pool2(p);
        Eigen::VectorXd out(2 * kMixed);
        for (int stage = 0; stage < 2; ++stage) {
            std::vector<Plane> dw;
            for (const auto& p : channels) {
                for (const Kernel* k : kBank) dw.push_back(convolve(p, *k));
            }
            const std::size_t n = dw.front().v.size();
            Eigen::VectorXd pooled = Eigen::VectorXd::Zero(kMixed);
            Eigen::VectorXd px(12);
            for (std::size_t i = 0; i < n; ++i) {
                for (int j = 0; j < 12; ++j) px[j] = dw[static_cast<std::size_t>(j)].v[i];
                pooled += (mix_[static_cast<std::size_t>(stage)] * px).cwiseMax(0.0);
            }
            out.segment(stage * kMixed, kMixed) = pooled / static_cast<double>(n);
            for (auto& p : channels) p = avg_pool2(p);
        }
        return out;
    }

private:
    std::array<Eigen::MatrixXd, 2> mix_;
};

}  // namespace

std::unique_ptr<Trunk> make_builtin_trunk(BackboneKind kind, std::uint64_t seed) {
    switch (kind) {
        case BackboneKind::tiny: return std::make_unique<TinyTrunk>();
        case BackboneKind::inception_v3: return std::make_unique<InceptionStandIn>();
        case BackboneKind::vit: return std::make_unique<VitStandIn>(seed);
        case BackboneKind::efficientnet_b0: return std::make_unique<EfficientNetStandIn>(seed);
    }
    throw ConfigError("unhandled backbone kind");
}

PrecomputedEmbeddings PrecomputedEmbeddings::load(const std::filesystem::path& csv) {
    std::ifstream in(csv);
    if (!in) throw IoError("cannot read embeddings " + csv.string());
    PrecomputedEmbeddings out;
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string id, cell;
        std::getline(ss, id, ',');
        std::vector<double> vals;
        while (std::getline(ss, cell, ',')) vals.push_back(std::stod(cell));
        if (out.dim_ == 0) out.dim_ = static_cast<int>(vals.size());
        if (static_cast<int>(vals.size()) != out.dim_ || out.dim_ == 0) {
            throw ShapeError(fmt::format("embedding row for '{}' has {} values, expected {}", id,
                                         vals.size(), out.dim_));
        }
        out.rows_.emplace(id, to_vector(vals));
    }
    return out;
}

const Eigen::VectorXd& PrecomputedEmbeddings::at(const std::string& tile_id) const {
    const auto it = rows_.find(tile_id);
    if (it == rows_.end()) throw ConfigError("no precomputed embedding for tile " + tile_id);
    return it->second;
}

}  // namespace osteo
