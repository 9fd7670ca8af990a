#pragma once

// Multimodal network: projected image trunk features and an MLP radiomic
// embedding, fused by a softmax gate, then either two hierarchical binary
// heads (tumor / viability) or a flat three-way head.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "osteo/backbone.hpp"
#include "osteo/nn.hpp"
#include "osteo/radiomics.hpp"

namespace osteo::model {

using nn::Matrix;

enum class HeadType { hierarchical, flat3 };

std::string_view to_string(HeadType h);
HeadType head_from_string(std::string_view s);

struct EmbeddingConfig {
    int d = 256;
    BackboneKind backbone = BackboneKind::inception_v3;
    bool pretrained = false;  // trunk features come from exported pretrained embeddings
    int rad_hidden = 128;
    int gate_hidden = 128;
    HeadType head = HeadType::hierarchical;
    bool use_radiomics = true;

    nlohmann::json to_json() const;
    static EmbeddingConfig from_json(const nlohmann::json& j);
};

struct FusionWeights {
    double alpha_img = 0.5;
    double alpha_rad = 0.5;
};

struct HierarchicalPrediction {
    std::array<double, 2> p_a{};
    std::array<double, 2> p_b{};
    std::array<double, 3> dist3{};
};

/// P(0) = pA0, P(1) = pA1 * pB0, P(2) = pA1 * pB1.
HierarchicalPrediction compose(const std::array<double, 2>& p_a, const std::array<double, 2>& p_b);

/// Argmax with ties resolved toward the lower class index.
int predict_class(const std::array<double, 3>& dist3);

/// z = alpha_img * z_img + alpha_rad * z_rad, row by row.
Matrix fuse_with_weights(const Matrix& z_img, const Matrix& z_rad, const Matrix& alpha);

struct ParamGroup {
    std::string name;
    std::vector<nn::Parameter*> params;

    Eigen::Index count() const;
};

class MultimodalNet {
public:
    struct Outputs {
        Matrix z_img;
        Matrix z_rad;   // empty without radiomics
        Matrix alpha;   // B x 2 (img, rad); empty without radiomics
        Matrix z;
        Matrix p_a;     // hierarchical heads
        Matrix p_b;
        Matrix p3;      // flat head
        Matrix dist3;   // B x 3 composite distribution for either head type
    };

    struct Cache {
        Matrix trunk;
        Matrix z_img;
        Matrix z_rad;
        Matrix alpha;
        Matrix z;
        Matrix concat;
        nn::Mlp2::Cache rad;
        nn::Mlp2::Cache gate;
    };

    MultimodalNet() = default;
    MultimodalNet(const EmbeddingConfig& cfg, int trunk_dim, std::uint64_t seed);

    const EmbeddingConfig& config() const noexcept { return cfg_; }
    int trunk_dim() const noexcept { return trunk_dim_; }

    /// trunk_feats: B x trunk_dim; radiomics: B x 29 standardized (ignored
    /// when radiomics are disabled).
    Outputs forward(const Matrix& trunk_feats, const Matrix& radiomics, Cache* cache = nullptr) const;

    /// Backpropagates head-logit gradients through every module in use.
    void backward(const Cache& cache, const Matrix& dlogits_a, const Matrix& dlogits_b,
                  const Matrix& dlogits3);

    /// Frozen per-dimension standardization applied to trunk features
    /// before the projection; identity until set.
    void set_trunk_normalization(const Eigen::RowVectorXd& mean, const Eigen::RowVectorXd& std);
    Matrix normalize_trunk(const Matrix& trunk_feats) const;

    Matrix project_image(const Matrix& trunk_feats) const;
    Matrix encode_radiomics(const Matrix& radiomics, nn::Mlp2::Cache* cache = nullptr) const;
    /// Gate + fusion; returns (z, alpha).
    std::pair<Matrix, Matrix> fuse(const Matrix& z_img, const Matrix& z_rad, Cache* cache = nullptr) const;
    /// Hierarchical heads, one prediction per row.
    std::vector<HierarchicalPrediction> heads(const Matrix& z) const;
    /// Flat head probabilities (B x 3).
    Matrix flat3_head(const Matrix& z) const;

    std::vector<ParamGroup> parameter_groups();
    std::vector<nn::Parameter*> parameters();
    Eigen::Index parameter_count();
    std::string summary();

    nlohmann::json to_json() const;
    static MultimodalNet from_json(const nlohmann::json& j);

private:
    EmbeddingConfig cfg_;
    int trunk_dim_ = 0;
    Eigen::RowVectorXd trunk_shift_;
    Eigen::RowVectorXd trunk_scale_;
    nn::Linear image_proj_;
    nn::Mlp2 rad_encoder_;
    nn::Mlp2 gate_;
    nn::Linear head_a_;
    nn::Linear head_b_;
    nn::Linear head_flat_;
};

/// Trunk features for a batch of images, validating the spatial size.
Matrix trunk_features(const Trunk& trunk, std::span<const ImageTensor> images);

/// Image encoder: frozen trunk followed by the network's projection.
Matrix encode_image(const Trunk& trunk, const MultimodalNet& net, std::span<const ImageTensor> images);

/// Packs standardized radiomic vectors into a B x 29 matrix, rejecting
/// non-finite entries.
Matrix radiomics_matrix(std::span<const std::array<double, radiomics::kFeatureCount>> rows);

}  // namespace osteo::model
