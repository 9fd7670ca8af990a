#pragma once

// Per-head inverse-count class weights, masked weighted cross-entropy, and
// the homoscedastic uncertainty-weighted joint loss
//     L = exp(-lambda_A) * LA + exp(-lambda_B) * LB + eta * (lambda_A + lambda_B)
// with lambda = log sigma^2 learned alongside the network.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "osteo/nn.hpp"

namespace osteo::objective {

using nn::Matrix;

inline constexpr double kProbClamp = 1e-12;

struct ClassWeights {
    std::array<double, 2> a{1.0, 1.0};
    std::array<double, 2> b{1.0, 1.0};
};

/// w_c = 1/n_c normalized to unit mean. Throws DegenerateClassCounts on a
/// zero count.
template <std::size_t N>
std::array<double, N> inverse_count_weights(const std::array<std::size_t, N>& counts);

/// Task-A counts over all labels, Task-B counts over tumor labels only.
ClassWeights compute_class_weights(std::span<const int> labels);

/// Unit-mean inverse-count weights over the three flat classes.
std::array<double, 3> flat_class_weights(std::span<const int> labels);

/// Mean over rows with include[i] of -w[y_i] * log(max(p[i, y_i], 1e-12)).
/// Returns 0 when no row is included. When `dlogits` is given it receives
/// dL/dlogits (softmax outputs assumed), zero on excluded rows.
double weighted_ce(const Matrix& probs, std::span<const int> targets, std::span<const double> class_weights,
                   std::span<const std::uint8_t> include, Matrix* dlogits = nullptr);

/// Task-A loss averaged over the whole batch.
double loss_a(const Matrix& p_a, std::span<const int> y_a, const std::array<double, 2>& beta_a,
              Matrix* dlogits = nullptr);

/// Task-B loss averaged over tumor rows only (y_b < 0 marks absent).
double loss_b(const Matrix& p_b, std::span<const int> y_b, const std::array<double, 2>& beta_b,
              Matrix* dlogits = nullptr);

double flat3_loss(const Matrix& p3, std::span<const int> y, const std::array<double, 3>& weights,
                  Matrix* dlogits = nullptr);

struct UncertaintyParams {
    nn::Parameter lambda_a{1, 1, false};
    nn::Parameter lambda_b{1, 1, false};

    double a() const { return lambda_a.value(0, 0); }
    double b() const { return lambda_b.value(0, 0); }
};

struct JointLoss {
    double value = 0.0;
    double d_loss_a = 0.0;    // dL/dLA = exp(-lambda_A)
    double d_loss_b = 0.0;
    double d_lambda_a = 0.0;  // -exp(-lambda_A) LA + eta
    double d_lambda_b = 0.0;
};

JointLoss joint_loss(double loss_a, double loss_b, double lambda_a, double lambda_b, double eta);

/// Value of lambda where dL/dlambda = 0 for a fixed task loss: log(L / eta).
double stationary_lambda(double task_loss, double eta);

enum class LossMode {
    uncertainty,   // hierarchical heads, learned task weights (H-loss)
    equal_weight,  // hierarchical heads, LA + LB
    flat3,         // flat three-class head
};

std::string_view to_string(LossMode m);
LossMode loss_mode_from_string(std::string_view s);

struct LossConfig {
    double eta = 0.2;
    LossMode mode = LossMode::uncertainty;
};

}  // namespace osteo::objective
