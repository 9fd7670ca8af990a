#pragma once

// Frozen image trunks. Each trunk maps a normalized CHW tensor at its native
// input size to a fixed-length feature vector; the trainable projection to
// the embedding dimension lives in the model.
//
// Published ImageNet weights cannot be loaded from C++ here, so the named
// backbones come in two flavours:
//   * builtin: a deterministic, seeded stand-in trunk with the architectural
//     texture of the named family (multi-branch filter bank, patch-token
//     projection, depthwise + pointwise mixing);
//   * precomputed: per-tile embeddings exported once from the real pretrained
//     network (see tools/export_backbone_features.py) and looked up by id.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

namespace osteo {

enum class BackboneKind { tiny, inception_v3, vit, efficientnet_b0 };

std::string_view to_string(BackboneKind kind);
BackboneKind backbone_from_string(std::string_view name);

/// Square input side length the trunk expects.
int native_input_size(BackboneKind kind);

/// Normalized image, channel-major (C x H x W).
struct ImageTensor {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<float> data;

    ImageTensor() = default;
    ImageTensor(int c, int h, int w, float fill = 0.0f)
        : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

    float& at(int ch, int r, int c) {
        return data[(static_cast<std::size_t>(ch) * height + r) * width + c];
    }
    float at(int ch, int r, int c) const {
        return data[(static_cast<std::size_t>(ch) * height + r) * width + c];
    }
};

class Trunk {
public:
    virtual ~Trunk() = default;
    virtual int feature_dim() const = 0;
    /// Spatial side the trunk accepts; 0 when the trunk does not consume pixels.
    virtual int input_size() const = 0;
    virtual Eigen::VectorXd features(const ImageTensor& x) const = 0;
    virtual std::string name() const = 0;
};

/// Builtin stand-in trunk for the given family, fixed by `seed`.
std::unique_ptr<Trunk> make_builtin_trunk(BackboneKind kind, std::uint64_t seed = 0x05c0ffee);

/// Flattens the input tensor; used for tiny synthetic checks.
class FlattenTrunk final : public Trunk {
public:
    FlattenTrunk(int channels, int side) : channels_(channels), side_(side) {}
    int feature_dim() const override { return channels_ * side_ * side_; }
    int input_size() const override { return side_; }
    Eigen::VectorXd features(const ImageTensor& x) const override;
    std::string name() const override { return "flatten"; }

private:
    int channels_;
    int side_;
};

/// Embeddings computed offline by the pretrained network, keyed by tile id.
/// CSV layout: tile_id,f0,f1,...
class PrecomputedEmbeddings {
public:
    static PrecomputedEmbeddings load(const std::filesystem::path& csv);
    int dim() const noexcept { return dim_; }
    const Eigen::VectorXd& at(const std::string& tile_id) const;
    bool contains(const std::string& tile_id) const { return rows_.count(tile_id) != 0; }

private:
    int dim_ = 0;
    std::unordered_map<std::string, Eigen::VectorXd> rows_;
};

}  // namespace osteo
