#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "osteo/backbone.hpp"
#include "osteo/engine.hpp"
#include "osteo/errors.hpp"
#include "osteo/model.hpp"

using namespace osteo;
using namespace osteo::model;
using nn::Matrix;

namespace {

EmbeddingConfig small_config(bool radiomics, HeadType head = HeadType::hierarchical) {
    EmbeddingConfig c;
    c.d = 8;
    c.rad_hidden = 16;
    c.gate_hidden = 12;
    c.use_radiomics = radiomics;
    c.head = head;
    c.backbone = BackboneKind::tiny;
    return c;
}

Matrix randn(Eigen::Index r, Eigen::Index c, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    return Matrix::NullaryExpr(r, c, [&] { return n(rng); });
}

}  // namespace

TEST(ImageEncoder, BatchShapeDeterminismAndZeroInput) {
    const auto trunk = make_builtin_trunk(BackboneKind::tiny);
    const MultimodalNet net(small_config(false), trunk->feature_dim(), 1);
    std::vector<ImageTensor> batch;
    for (int i = 0; i < 16; ++i) {
        ImageTensor t{3, trunk->input_size(), trunk->input_size(), {}};
        t.data.assign(static_cast<std::size_t>(3 * t.height * t.width), 0.1f * static_cast<float>(i % 5));
        batch.push_back(t);
    }
    const Matrix a = encode_image(*trunk, net, batch);
    const Matrix b = encode_image(*trunk, net, batch);
    EXPECT_EQ(a.rows(), 16);
    EXPECT_EQ(a.cols(), 8);
    EXPECT_EQ(a, b);

    ImageTensor zero{3, trunk->input_size(), trunk->input_size(), {}};
    zero.data.assign(static_cast<std::size_t>(3 * zero.height * zero.width), 0.0f);
    const std::vector<ImageTensor> z = {zero};
    EXPECT_TRUE(encode_image(*trunk, net, z).allFinite());
}

TEST(ImageEncoder, WrongSpatialSizeThrows) {
    const auto trunk = make_builtin_trunk(BackboneKind::tiny);
    ImageTensor t(3, 10, 10);
    const std::vector<ImageTensor> batch = {t};
    EXPECT_THROW(trunk_features(*trunk, batch), ShapeError);
}

TEST(RadiomicEncoder, ShapeValidationAndNonDegeneracy) {
    const MultimodalNet net(small_config(true), 5, 2);
    const Matrix out = net.encode_radiomics(randn(16, 29, 3));
    EXPECT_EQ(out.rows(), 16);
    EXPECT_EQ(out.cols(), 8);
    EXPECT_THROW(net.encode_radiomics(randn(4, 28, 3)), ShapeError);
    Matrix bad = randn(2, 29, 4);
    bad(1, 5) = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(net.encode_radiomics(bad), InvalidInput);
    const Matrix two = net.encode_radiomics(randn(2, 29, 5));
    EXPECT_GT((two.row(0) - two.row(1)).norm(), 1e-9);
}

TEST(Fusion, FixedWeightsArithmetic) {
    Matrix zi(1, 2), zr(1, 2), alpha(1, 2);
    zi << 1, 0;
    zr << 0, 1;
    alpha << 0.5, 0.5;
    const Matrix z = fuse_with_weights(zi, zr, alpha);
    EXPECT_DOUBLE_EQ(z(0, 0), 0.5);
    EXPECT_DOUBLE_EQ(z(0, 1), 0.5);
}

TEST(Fusion, SaturatedGateReturnsImageEmbedding) {
    Matrix logits(1, 2);
    logits << 1000.0, -1000.0;
    const Matrix alpha = nn::softmax_rows(logits);
    const Matrix zi = randn(1, 6, 1), zr = randn(1, 6, 2);
    EXPECT_LT((fuse_with_weights(zi, zr, alpha) - zi).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Fusion, GateIsConvexAndNormalized) {
    const MultimodalNet net(small_config(true), 5, 7);
    for (unsigned s = 0; s < 20; ++s) {
        const Matrix zi = randn(4, 8, s), zr = randn(4, 8, s + 100);
        const auto [z, alpha] = net.fuse(zi, zr);
        for (Eigen::Index r = 0; r < 4; ++r) {
            EXPECT_NEAR(alpha(r, 0) + alpha(r, 1), 1.0, 1e-6);
            for (Eigen::Index c = 0; c < 8; ++c) {
                EXPECT_GE(z(r, c), std::min(zi(r, c), zr(r, c)) - 1e-12);
                EXPECT_LE(z(r, c), std::max(zi(r, c), zr(r, c)) + 1e-12);
            }
        }
    }
    EXPECT_THROW(net.fuse(randn(2, 8, 1), randn(2, 7, 1)), ShapeError);
}

TEST(Heads, CompositeExamples) {
    const auto a = compose({0.3, 0.7}, {0.4, 0.6});
    EXPECT_NEAR(a.dist3[0], 0.3, 1e-12);
    EXPECT_NEAR(a.dist3[1], 0.28, 1e-12);
    EXPECT_NEAR(a.dist3[2], 0.42, 1e-12);
    const auto b = compose({1.0, 0.0}, {0.2, 0.8});
    EXPECT_EQ(b.dist3, (std::array<double, 3>{1.0, 0.0, 0.0}));
}

TEST(Heads, CompositeSumsToOneForRandomLogits) {
    const MultimodalNet net(small_config(false), 5, 3);
    for (const auto& p : net.heads(randn(200, 8, 9) * 5.0)) {
        EXPECT_NEAR(p.dist3[0] + p.dist3[1] + p.dist3[2], 1.0, 1e-6);
    }
}

TEST(PredictClass, ArgmaxWithLowerIndexTies) {
    EXPECT_EQ(predict_class({0.3, 0.28, 0.42}), 2);
    EXPECT_EQ(predict_class({1.0, 0.0, 0.0}), 0);
    EXPECT_EQ(predict_class({0.4, 0.4, 0.2}), 0);
    EXPECT_EQ(predict_class({0.2, 0.4, 0.4}), 1);
}

TEST(FlatHead, SimplexAndParameterCount) {
    MultimodalNet flat(small_config(true, HeadType::flat3), 5, 1);
    const Matrix p = flat.flat3_head(randn(16, 8, 2));
    EXPECT_EQ(p.rows(), 16);
    EXPECT_EQ(p.cols(), 3);
    for (Eigen::Index r = 0; r < 16; ++r) EXPECT_NEAR(p.row(r).sum(), 1.0, 1e-6);

    MultimodalNet hier(small_config(true), 5, 1);
    // Two binary heads (2 x (d+1) each) versus one three-way head (3 x (d+1)).
    const Eigen::Index d1 = 8 + 1;
    EXPECT_EQ(hier.parameter_count() - flat.parameter_count(), 4 * d1 - 3 * d1);
    EXPECT_NE(flat.summary().find("omega_flat"), std::string::npos);
}

TEST(Model, JsonRoundTripIsExact) {
    MultimodalNet net(small_config(true), 5, 11);
    net.set_trunk_normalization(randn(1, 5, 1).row(0), randn(1, 5, 2).cwiseAbs().row(0));
    const auto back = MultimodalNet::from_json(nlohmann::json::parse(net.to_json().dump()));
    const Matrix t = randn(3, 5, 4), r = randn(3, 29, 5);
    EXPECT_EQ(net.forward(t, r).dist3, back.forward(t, r).dist3);
}

TEST(Model, MalformedParametersRejected) {
    MultimodalNet net(small_config(false), 5, 1);
    auto j = net.to_json();
    j["trunk_dim"] = 6;
    EXPECT_THROW(MultimodalNet::from_json(j), IncompatibleCheckpoint);
    j.erase("theta_img");
    EXPECT_THROW(MultimodalNet::from_json(j), IncompatibleCheckpoint);
}

TEST(Model, EveryGroupMovesAfterOneStep) {
    MultimodalNet net(small_config(true), 5, 5);
    objective::UncertaintyParams lambdas;
    std::vector<nn::Parameter*> params = net.parameters();
    params.push_back(&lambdas.lambda_a);
    params.push_back(&lambdas.lambda_b);
    nn::AdamW opt(params, {1e-3, 1e-4});
    engine::Batch batch{randn(12, 5, 1), randn(12, 29, 2), {0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2}};
    std::vector<std::pair<std::string, std::vector<Matrix>>> before;
    for (auto& g : net.parameter_groups()) {
        std::vector<Matrix> v;
        for (auto* p : g.params) v.push_back(p->value);
        before.emplace_back(g.name, v);
    }
    opt.zero_grad();
    engine::compute_objective(net, lambdas, {}, {1, 1, 1}, {}, batch, true);
    opt.step();
    const auto groups = net.parameter_groups();
    ASSERT_EQ(groups.size(), 5u);
    for (std::size_t g = 0; g < groups.size(); ++g) {
        double delta = 0.0;
        for (std::size_t k = 0; k < groups[g].params.size(); ++k) {
            delta += (groups[g].params[k]->value - before[g].second[k]).cwiseAbs().sum();
        }
        EXPECT_GT(delta, 0.0) << groups[g].name;
    }
    EXPECT_NE(lambdas.a(), 0.0);
    EXPECT_NE(lambdas.b(), 0.0);
}

TEST(GradientCheck, FullObjectiveAllModes) {
    for (auto mode : {objective::LossMode::uncertainty, objective::LossMode::equal_weight, objective::LossMode::flat3}) {
        for (bool rad : {true, false}) {
            for (std::uint64_t s = 0; s < 3; ++s) {
                const auto r = test::gradient_check(s, mode, rad);
                EXPECT_EQ(r.failures, 0u) << objective::to_string(mode) << " rad=" << rad << " worst " << r.worst
                                          << " rel " << r.max_rel;
            }
        }
    }
}

TEST(Backbones, NativeSizesAndFiniteFeatures) {
    for (auto k : {BackboneKind::tiny, BackboneKind::inception_v3, BackboneKind::vit, BackboneKind::efficientnet_b0}) {
        const auto t = make_builtin_trunk(k);
        EXPECT_EQ(t->input_size(), native_input_size(k));
        ImageTensor x{3, t->input_size(), t->input_size(), {}};
        x.data.assign(static_cast<std::size_t>(3 * x.height * x.width), 0.3f);
        const auto f = t->features(x);
        EXPECT_EQ(f.size(), t->feature_dim());
        EXPECT_TRUE(f.allFinite());
        EXPECT_EQ(backbone_from_string(to_string(k)), k);
    }
}
