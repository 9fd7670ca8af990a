#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "osteo/errors.hpp"
#include "osteo/objective.hpp"

using namespace osteo;
using namespace osteo::objective;
using nn::Matrix;

namespace {

Matrix probs(std::initializer_list<std::initializer_list<double>> rows) {
    Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
    Eigen::Index r = 0;
    for (const auto& row : rows) {
        Eigen::Index c = 0;
        for (double v : row) m(r, c++) = v;
        ++r;
    }
    return m;
}

std::vector<int> labels_from_counts(int n0, int n1, int n2) {
    std::vector<int> y;
    y.insert(y.end(), static_cast<std::size_t>(n0), 0);
    y.insert(y.end(), static_cast<std::size_t>(n1), 1);
    y.insert(y.end(), static_cast<std::size_t>(n2), 2);
    return y;
}

}  // namespace

TEST(ClassWeights, FullDatasetCounts) {
    const auto w = compute_class_weights(labels_from_counts(536, 263, 345));
    EXPECT_NEAR(w.a[0], 1.0629, 1e-4);
    EXPECT_NEAR(w.a[1], 0.9371, 1e-4);
    EXPECT_NEAR(w.b[0], 1.1349, 1e-4);
    EXPECT_NEAR(w.b[1], 0.8651, 1e-4);
    EXPECT_NEAR((w.a[0] + w.a[1]) / 2.0, 1.0, 1e-15);
    EXPECT_NEAR((w.b[0] + w.b[1]) / 2.0, 1.0, 1e-15);
}

TEST(ClassWeights, BalancedIsUnit) {
    const auto w = inverse_count_weights<2>({40, 40});
    EXPECT_DOUBLE_EQ(w[0], 1.0);
    EXPECT_DOUBLE_EQ(w[1], 1.0);
}

TEST(ClassWeights, AbsentClassIsDegenerate) {
    EXPECT_THROW(compute_class_weights(labels_from_counts(10, 0, 5)), DegenerateClassCounts);
    EXPECT_THROW(compute_class_weights(labels_from_counts(0, 3, 5)), DegenerateClassCounts);
}

TEST(ClassWeights, FlatThreeWay) {
    const auto w = flat_class_weights(labels_from_counts(536, 263, 345));
    // Same inverse-count-over-mean rule as the binary weights (numpy reference).
    EXPECT_NEAR(w[0], 0.65336047, 1e-6);
    EXPECT_NEAR(w[1], 1.33156355, 1e-6);
    EXPECT_NEAR(w[2], 1.01507598, 1e-6);
    EXPECT_NEAR(w[0] * 536, w[1] * 263, 1e-9);
    EXPECT_NEAR(w[1] * 263, w[2] * 345, 1e-9);
}

TEST(LossA, HandValue) {
    const std::vector<int> y = {0};
    EXPECT_NEAR(loss_a(probs({{0.8, 0.2}}), y, {1.0629, 0.9371}, nullptr), 0.23718, 1e-5);
}

TEST(LossA, CertainCorrectIsZeroAndUnitWeightsAreCrossEntropy) {
    const std::vector<int> y = {1, 0};
    EXPECT_DOUBLE_EQ(loss_a(probs({{0.0, 1.0}, {1.0, 0.0}}), y, {3.0, 0.4}, nullptr), 0.0);
    const Matrix p = probs({{0.3, 0.7}, {0.6, 0.4}});
    EXPECT_NEAR(loss_a(p, y, {1.0, 1.0}, nullptr), -(std::log(0.7) + std::log(0.6)) / 2.0, 1e-15);
}

TEST(LossA, ClampKeepsZeroProbabilityFinite) {
    const std::vector<int> y = {0};
    const double l = loss_a(probs({{0.0, 1.0}}), y, {1.0, 1.0}, nullptr);
    EXPECT_TRUE(std::isfinite(l));
    EXPECT_NEAR(l, -std::log(1e-12), 1e-9);
}

TEST(LossB, NoTumorRowsGivesZeroAndNoGradient) {
    const std::vector<int> y = {-1, -1, -1};
    Matrix d;
    EXPECT_DOUBLE_EQ(loss_b(probs({{0.3, 0.7}, {0.5, 0.5}, {0.9, 0.1}}), y, {1.2, 0.8}, &d), 0.0);
    EXPECT_EQ(d.cwiseAbs().maxCoeff(), 0.0);
}

TEST(LossB, UniformSingleTumor) {
    const std::vector<int> y = {1};
    EXPECT_NEAR(loss_b(probs({{0.5, 0.5}}), y, {1.0, 1.0}, nullptr), 0.69315, 1e-5);
}

TEST(LossB, NonTumorRowsDoNotChangeValue) {
    const std::vector<int> y1 = {0, 1};
    const std::vector<int> y2 = {-1, 0, -1, 1, -1};
    const double a = loss_b(probs({{0.3, 0.7}, {0.2, 0.8}}), y1, {1.1, 0.9}, nullptr);
    const double b = loss_b(probs({{0.9, 0.1}, {0.3, 0.7}, {0.5, 0.5}, {0.2, 0.8}, {0.01, 0.99}}), y2, {1.1, 0.9},
                            nullptr);
    EXPECT_DOUBLE_EQ(a, b);
}

TEST(JointLoss, HandValues) {
    EXPECT_EQ(joint_loss(1.0, 1.0, 0.0, 0.0, 0.2).value, 2.0);
    EXPECT_NEAR(joint_loss(1.0, 0.5, std::log(2.0), 0.0, 0.2).value, 1.13863, 1e-5);
    EXPECT_NEAR(joint_loss(1.0, 1.0, 0.0, 0.0, 0.2).d_lambda_a, -0.8, 1e-15);
}

TEST(JointLoss, LambdaGradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0.05, 3.0), l(-2.0, 2.0);
    for (int i = 0; i < 200; ++i) {
        const double la = u(rng), lb = u(rng), xa = l(rng), xb = l(rng);
        const auto j = joint_loss(la, lb, xa, xb, 0.2);
        const double h = 1e-6;
        const double na = (joint_loss(la, lb, xa + h, xb, 0.2).value - joint_loss(la, lb, xa - h, xb, 0.2).value) / (2 * h);
        const double nb = (joint_loss(la, lb, xa, xb + h, 0.2).value - joint_loss(la, lb, xa, xb - h, 0.2).value) / (2 * h);
        EXPECT_LE(std::abs(na - j.d_lambda_a), 1e-4 * std::max(1.0, std::abs(na)));
        EXPECT_LE(std::abs(nb - j.d_lambda_b), 1e-4 * std::max(1.0, std::abs(nb)));
    }
}

TEST(JointLoss, MonotoneInTaskLosses) {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(0.0, 3.0), l(-3.0, 3.0);
    for (int i = 0; i < 200; ++i) {
        const double a = u(rng), b = u(rng), xa = l(rng), xb = l(rng), e = 0.01 + u(rng);
        EXPECT_LT(joint_loss(a, b, xa, xb, 0.2).value, joint_loss(a + e, b, xa, xb, 0.2).value);
        EXPECT_LT(joint_loss(a, b, xa, xb, 0.2).value, joint_loss(a, b + e, xa, xb, 0.2).value);
    }
}

TEST(JointLoss, StationaryPoint) {
    const double lam = stationary_lambda(1.0, 0.2);
    EXPECT_NEAR(lam, std::log(5.0), 1e-15);
    EXPECT_NEAR(std::exp(-lam), 0.2 / 1.0, 1e-15);
    EXPECT_NEAR(joint_loss(1.0, 1.0, lam, lam, 0.2).d_lambda_a, 0.0, 1e-15);
}

TEST(Flat3Loss, Examples) {
    const std::vector<int> y = {2};
    EXPECT_NEAR(flat3_loss(probs({{1.0 / 3, 1.0 / 3, 1.0 / 3}}), y, {1, 1, 1}, nullptr), 1.09861, 1e-5);
    EXPECT_DOUBLE_EQ(flat3_loss(probs({{0.0, 0.0, 1.0}}), y, {1, 1, 1}, nullptr), 0.0);
}

TEST(LossMode, StringRoundTrip) {
    for (auto m : {LossMode::uncertainty, LossMode::equal_weight, LossMode::flat3}) {
        EXPECT_EQ(loss_mode_from_string(to_string(m)), m);
    }
    EXPECT_THROW(loss_mode_from_string("focal"), ConfigError);
}
