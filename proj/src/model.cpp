#include "osteo/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <fmt/format.h>

#include "osteo/errors.hpp"

namespace osteo::model {

std::string_view to_string(HeadType h) { return h == HeadType::hierarchical ? "hierarchical" : "flat3"; }

HeadType head_from_string(std::string_view s) {
    if (s == "hierarchical") return HeadType::hierarchical;
    if (s == "flat3") return HeadType::flat3;
    throw ConfigError(fmt::format("unknown head type '{}'", s));
}

nlohmann::json EmbeddingConfig::to_json() const {
    return {{"d", d},
            {"backbone", std::string(osteo::to_string(backbone))},
            {"pretrained", pretrained},
            {"rad_hidden", rad_hidden},
            {"gate_hidden", gate_hidden},
            {"head", std::string(to_string(head))},
            {"use_radiomics", use_radiomics}};
}

EmbeddingConfig EmbeddingConfig::from_json(const nlohmann::json& j) {
    EmbeddingConfig c;
    c.d = j.value("d", c.d);
    c.backbone = backbone_from_string(j.value("backbone", std::string(osteo::to_string(c.backbone))));
    c.pretrained = j.value("pretrained", c.pretrained);
    c.rad_hidden = j.value("rad_hidden", c.rad_hidden);
    c.gate_hidden = j.value("gate_hidden", c.gate_hidden);
    c.head = head_from_string(j.value("head", std::string(to_string(c.head))));
    c.use_radiomics = j.value("use_radiomics", c.use_radiomics);
    if (c.d < 2) throw ConfigError("embedding dimension must be >= 2");
    return c;
}

HierarchicalPrediction compose(const std::array<double, 2>& p_a, const std::array<double, 2>& p_b) {
    HierarchicalPrediction h;
    h.p_a = p_a;
    h.p_b = p_b;
    h.dist3 = {p_a[0], p_a[1] * p_b[0], p_a[1] * p_b[1]};
    return h;
}

int predict_class(const std::array<double, 3>& dist3) {
    int best = 0;
    for (int c = 1; c < 3; ++c) {
        if (dist3[static_cast<std::size_t>(c)] > dist3[static_cast<std::size_t>(best)]) best = c;
    }
    return best;
}

Matrix fuse_with_weights(const Matrix& z_img, const Matrix& z_rad, const Matrix& alpha) {
    if (z_img.rows() != z_rad.rows() || z_img.cols() != z_rad.cols()) {
        throw ShapeError(fmt::format("fusion inputs differ: {}x{} vs {}x{}", z_img.rows(), z_img.cols(),
                                     z_rad.rows(), z_rad.cols()));
    }
    if (alpha.rows() != z_img.rows() || alpha.cols() != 2) throw ShapeError("fusion weights must be B x 2");
    return (z_img.array().colwise() * alpha.col(0).array() + z_rad.array().colwise() * alpha.col(1).array())
        .matrix();
}

Eigen::Index ParamGroup::count() const {
    Eigen::Index n = 0;
    for (const auto* p : params) n += p->size();
    return n;
}

MultimodalNet::MultimodalNet(const EmbeddingConfig& cfg, int trunk_dim, std::uint64_t seed)
    : cfg_(cfg), trunk_dim_(trunk_dim) {
    if (cfg.d < 2) throw ConfigError("embedding dimension must be >= 2");
    std::mt19937_64 rng(seed);
    image_proj_ = nn::Linear(trunk_dim, cfg.d, rng);
    if (cfg.use_radiomics) {
        rad_encoder_ = nn::Mlp2(static_cast<int>(radiomics::kFeatureCount), cfg.rad_hidden, cfg.d, rng);
        gate_ = nn::Mlp2(2 * cfg.d, cfg.gate_hidden, 2, rng);
    }
    if (cfg.head == HeadType::hierarchical) {
        head_a_ = nn::Linear(cfg.d, 2, rng);
        head_b_ = nn::Linear(cfg.d, 2, rng);
    } else {
        head_flat_ = nn::Linear(cfg.d, 3, rng);
    }
}

Matrix MultimodalNet::project_image(const Matrix& trunk_feats) const {
    if (trunk_feats.cols() != trunk_dim_) {
        throw ShapeError(fmt::format("image projection expects {} trunk features, got {}", trunk_dim_,
                                     trunk_feats.cols()));
    }
    return image_proj_.forward(normalize_trunk(trunk_feats));
}

Matrix MultimodalNet::normalize_trunk(const Matrix& trunk_feats) const {
    if (trunk_shift_.size() == 0) return trunk_feats;
    return (trunk_feats.rowwise() - trunk_shift_).array().rowwise() * trunk_scale_.array();
}

void MultimodalNet::set_trunk_normalization(const Eigen::RowVectorXd& mean, const Eigen::RowVectorXd& std) {
    if (mean.size() != trunk_dim_ || std.size() != trunk_dim_) throw ShapeError("trunk normalization size mismatch");
    trunk_shift_ = mean;
    trunk_scale_ = std.unaryExpr([](double s) { return 1.0 / std::max(s, radiomics::kStdFloor); });
}

Matrix MultimodalNet::encode_radiomics(const Matrix& r, nn::Mlp2::Cache* cache) const {
    if (!cfg_.use_radiomics) throw ConfigError("model was built without a radiomic encoder");
    if (r.cols() != static_cast<Eigen::Index>(radiomics::kFeatureCount)) {
        throw ShapeError(fmt::format("radiomic input must have 29 columns, got {}", r.cols()));
    }
    if (!r.allFinite()) throw InvalidInput("non-finite radiomic feature value");
    return rad_encoder_.forward(r, cache);
}

std::pair<Matrix, Matrix> MultimodalNet::fuse(const Matrix& z_img, const Matrix& z_rad, Cache* cache) const {
    if (z_img.rows() != z_rad.rows() || z_img.cols() != cfg_.d || z_rad.cols() != cfg_.d) {
        throw ShapeError("fusion expects two B x d embeddings");
    }
    Matrix concat(z_img.rows(), 2 * cfg_.d);
    concat << z_img, z_rad;
    Matrix alpha = nn::softmax_rows(gate_.forward(concat, cache ? &cache->gate : nullptr));
    Matrix z = fuse_with_weights(z_img, z_rad, alpha);
    if (cache) cache->concat = std::move(concat);
    return {std::move(z), std::move(alpha)};
}

std::vector<HierarchicalPrediction> MultimodalNet::heads(const Matrix& z) const {
    if (cfg_.head != HeadType::hierarchical) throw ConfigError("model has a flat head");
    const Matrix pa = nn::softmax_rows(head_a_.forward(z));
    const Matrix pb = nn::softmax_rows(head_b_.forward(z));
    std::vector<HierarchicalPrediction> out;
    out.reserve(static_cast<std::size_t>(z.rows()));
    for (Eigen::Index i = 0; i < z.rows(); ++i) out.push_back(compose({pa(i, 0), pa(i, 1)}, {pb(i, 0), pb(i, 1)}));
    return out;
}

Matrix MultimodalNet::flat3_head(const Matrix& z) const {
    if (cfg_.head != HeadType::flat3) throw ConfigError("model has hierarchical heads");
    return nn::softmax_rows(head_flat_.forward(z));
}

MultimodalNet::Outputs MultimodalNet::forward(const Matrix& trunk_feats, const Matrix& radiomics,
                                              Cache* cache) const {
    Outputs out;
    out.z_img = project_image(trunk_feats);
    if (cfg_.use_radiomics) {
        if (radiomics.rows() != trunk_feats.rows()) throw ShapeError("batch size mismatch between modalities");
        out.z_rad = encode_radiomics(radiomics, cache ? &cache->rad : nullptr);
        auto [z, alpha] = fuse(out.z_img, out.z_rad, cache);
        out.z = std::move(z);
        out.alpha = std::move(alpha);
    } else {
        out.z = out.z_img;
    }
    const Eigen::Index b = out.z.rows();
    out.dist3 = Matrix(b, 3);
    if (cfg_.head == HeadType::hierarchical) {
        out.p_a = nn::softmax_rows(head_a_.forward(out.z));
        out.p_b = nn::softmax_rows(head_b_.forward(out.z));
        out.dist3.col(0) = out.p_a.col(0);
        out.dist3.col(1) = out.p_a.col(1).cwiseProduct(out.p_b.col(0));
        out.dist3.col(2) = out.p_a.col(1).cwiseProduct(out.p_b.col(1));
    } else {
        out.p3 = nn::softmax_rows(head_flat_.forward(out.z));
        out.dist3 = out.p3;
    }
    if (cache) {
        cache->trunk = normalize_trunk(trunk_feats);
        cache->z_img = out.z_img;
        cache->z_rad = out.z_rad;
        cache->alpha = out.alpha;
        cache->z = out.z;
    }
    return out;
}

void MultimodalNet::backward(const Cache& cache, const Matrix& dlogits_a, const Matrix& dlogits_b,
                             const Matrix& dlogits3) {
    Matrix dz;
    if (cfg_.head == HeadType::hierarchical) {
        dz = head_a_.backward(cache.z, dlogits_a);
        dz += head_b_.backward(cache.z, dlogits_b);
    } else {
        dz = head_flat_.backward(cache.z, dlogits3);
    }

    Matrix dz_img;
    if (cfg_.use_radiomics) {
        const Matrix& a = cache.alpha;
        dz_img = (dz.array().colwise() * a.col(0).array()).matrix();
        Matrix dz_rad = (dz.array().colwise() * a.col(1).array()).matrix();
        // d alpha_k = <dz, z_k>; softmax backward to gate logits.
        Matrix dalpha(dz.rows(), 2);
        dalpha.col(0) = dz.cwiseProduct(cache.z_img).rowwise().sum();
        dalpha.col(1) = dz.cwiseProduct(cache.z_rad).rowwise().sum();
        const Eigen::VectorXd inner = a.cwiseProduct(dalpha).rowwise().sum();
        const Matrix dgate = (a.array() * (dalpha.colwise() - inner).array()).matrix();
        const Matrix dconcat = gate_.backward(cache.gate, dgate);
        dz_img += dconcat.leftCols(cfg_.d);
        dz_rad += dconcat.rightCols(cfg_.d);
        rad_encoder_.backward(cache.rad, dz_rad);
    } else {
        dz_img = dz;
    }
    image_proj_.backward(cache.trunk, dz_img);
}

std::vector<ParamGroup> MultimodalNet::parameter_groups() {
    std::vector<ParamGroup> groups;
    groups.push_back({"theta_img", {&image_proj_.weight, &image_proj_.bias}});
    if (cfg_.use_radiomics) {
        groups.push_back({"theta_rad",
                          {&rad_encoder_.first.weight, &rad_encoder_.first.bias, &rad_encoder_.second.weight,
                           &rad_encoder_.second.bias}});
        groups.push_back(
            {"psi_g", {&gate_.first.weight, &gate_.first.bias, &gate_.second.weight, &gate_.second.bias}});
    }
    if (cfg_.head == HeadType::hierarchical) {
        groups.push_back({"omega_A", {&head_a_.weight, &head_a_.bias}});
        groups.push_back({"omega_B", {&head_b_.weight, &head_b_.bias}});
    } else {
        groups.push_back({"omega_flat", {&head_flat_.weight, &head_flat_.bias}});
    }
    return groups;
}

std::vector<nn::Parameter*> MultimodalNet::parameters() {
    std::vector<nn::Parameter*> out;
    for (auto& g : parameter_groups()) out.insert(out.end(), g.params.begin(), g.params.end());
    return out;
}

Eigen::Index MultimodalNet::parameter_count() {
    Eigen::Index n = 0;
    for (const auto& g : parameter_groups()) n += g.count();
    return n;
}

std::string MultimodalNet::summary() {
    std::ostringstream out;
    out << fmt::format("MultimodalNet(d={}, backbone={}, head={}, radiomics={}, trunk_dim={})\n", cfg_.d,
                       osteo::to_string(cfg_.backbone), to_string(cfg_.head), cfg_.use_radiomics, trunk_dim_);
    for (const auto& g : parameter_groups()) out << fmt::format("  {:<12} {:>10}\n", g.name, g.count());
    out << fmt::format("  {:<12} {:>10}\n", "total", parameter_count());
    return out.str();
}

nlohmann::json MultimodalNet::to_json() const {
    nlohmann::json j = {{"config", cfg_.to_json()}, {"trunk_dim", trunk_dim_}};
    j["theta_img"] = image_proj_.to_json();
    if (trunk_shift_.size() > 0) {
        j["trunk_norm"] = {{"shift", std::vector<double>(trunk_shift_.data(), trunk_shift_.data() + trunk_shift_.size())},
                           {"scale", std::vector<double>(trunk_scale_.data(), trunk_scale_.data() + trunk_scale_.size())}};
    }
    if (cfg_.use_radiomics) {
        j["theta_rad"] = rad_encoder_.to_json();
        j["psi_g"] = gate_.to_json();
    }
    if (cfg_.head == HeadType::hierarchical) {
        j["omega_A"] = head_a_.to_json();
        j["omega_B"] = head_b_.to_json();
    } else {
        j["omega_flat"] = head_flat_.to_json();
    }
    return j;
}

MultimodalNet MultimodalNet::from_json(const nlohmann::json& j) {
    MultimodalNet net;
    try {
        net.cfg_ = EmbeddingConfig::from_json(j.at("config"));
        net.trunk_dim_ = j.at("trunk_dim").get<int>();
        net.image_proj_ = nn::Linear::from_json(j.at("theta_img"));
        if (j.contains("trunk_norm")) {
            const auto shift = j.at("trunk_norm").at("shift").get<std::vector<double>>();
            const auto scale = j.at("trunk_norm").at("scale").get<std::vector<double>>();
            if (shift.size() != static_cast<std::size_t>(net.trunk_dim_) || scale.size() != shift.size()) {
                throw IncompatibleCheckpoint("trunk normalization size mismatch");
            }
            net.trunk_shift_ = Eigen::Map<const Eigen::RowVectorXd>(shift.data(), static_cast<Eigen::Index>(shift.size()));
            net.trunk_scale_ = Eigen::Map<const Eigen::RowVectorXd>(scale.data(), static_cast<Eigen::Index>(scale.size()));
        }
        if (net.cfg_.use_radiomics) {
            net.rad_encoder_ = nn::Mlp2::from_json(j.at("theta_rad"));
            net.gate_ = nn::Mlp2::from_json(j.at("psi_g"));
        }
        if (net.cfg_.head == HeadType::hierarchical) {
            net.head_a_ = nn::Linear::from_json(j.at("omega_A"));
            net.head_b_ = nn::Linear::from_json(j.at("omega_B"));
        } else {
            net.head_flat_ = nn::Linear::from_json(j.at("omega_flat"));
        }
    } catch (const nlohmann::json::exception& e) {
        throw IncompatibleCheckpoint(std::string("malformed model parameters: ") + e.what());
    }
    if (net.image_proj_.in_features() != net.trunk_dim_ || net.image_proj_.out_features() != net.cfg_.d) {
        throw IncompatibleCheckpoint("image projection shape does not match config");
    }
    return net;
}

Matrix trunk_features(const Trunk& trunk, std::span<const ImageTensor> images) {
    Matrix out(static_cast<Eigen::Index>(images.size()), trunk.feature_dim());
    for (std::size_t i = 0; i < images.size(); ++i) {
        const auto& x = images[i];
        if (trunk.input_size() > 0 && (x.height != trunk.input_size() || x.width != trunk.input_size())) {
            throw ShapeError(fmt::format("{} expects {}x{} input, got {}x{}", trunk.name(), trunk.input_size(),
                                         trunk.input_size(), x.height, x.width));
        }
        out.row(static_cast<Eigen::Index>(i)) = trunk.features(x).transpose();
    }
    return out;
}

Matrix encode_image(const Trunk& trunk, const MultimodalNet& net, std::span<const ImageTensor> images) {
    return net.project_image(trunk_features(trunk, images));
}

Matrix radiomics_matrix(std::span<const std::array<double, radiomics::kFeatureCount>> rows) {
    Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(radiomics::kFeatureCount));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < radiomics::kFeatureCount; ++j) {
            if (!std::isfinite(rows[i][j])) throw InvalidInput("non-finite radiomic feature value");
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
        }
    }
    return m;
}

}  // namespace osteo::model
