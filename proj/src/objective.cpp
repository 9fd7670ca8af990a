#include "osteo/objective.hpp"

#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "osteo/errors.hpp"

namespace osteo::objective {

template <std::size_t N>
std::array<double, N> inverse_count_weights(const std::array<std::size_t, N>& counts) {
    std::array<double, N> w{};
    for (std::size_t c = 0; c < N; ++c) {
        if (counts[c] == 0) throw DegenerateClassCounts(fmt::format("class {} has no training samples", c));
        w[c] = 1.0 / static_cast<double>(counts[c]);
    }
    const double mean = std::accumulate(w.begin(), w.end(), 0.0) / static_cast<double>(N);
    for (double& x : w) x /= mean;
    return w;
}

template std::array<double, 2> inverse_count_weights<2>(const std::array<std::size_t, 2>&);
template std::array<double, 3> inverse_count_weights<3>(const std::array<std::size_t, 3>&);

ClassWeights compute_class_weights(std::span<const int> labels) {
    std::array<std::size_t, 2> a{}, b{};
    for (int y : labels) {
        if (y < 0 || y > 2) throw InvalidInput(fmt::format("label {} out of range", y));
        ++a[y == 0 ? 0 : 1];
        if (y != 0) ++b[static_cast<std::size_t>(y - 1)];
    }
    return {inverse_count_weights(a), inverse_count_weights(b)};
}

std::array<double, 3> flat_class_weights(std::span<const int> labels) {
    std::array<std::size_t, 3> n{};
    for (int y : labels) {
        if (y < 0 || y > 2) throw InvalidInput(fmt::format("label {} out of range", y));
        ++n[static_cast<std::size_t>(y)];
    }
    return inverse_count_weights(n);
}

double weighted_ce(const Matrix& probs, std::span<const int> targets, std::span<const double> class_weights,
                   std::span<const std::uint8_t> include, Matrix* dlogits) {
    const auto rows = static_cast<std::size_t>(probs.rows());
    if (targets.size() != rows || include.size() != rows) throw ShapeError("loss inputs differ in batch size");
    if (class_weights.size() != static_cast<std::size_t>(probs.cols())) {
        throw ShapeError("class weight count does not match probability width");
    }
    std::size_t n = 0;
    for (auto inc : include) n += inc ? 1 : 0;
    if (dlogits) *dlogits = Matrix::Zero(probs.rows(), probs.cols());
    if (n == 0) return 0.0;

    double total = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
        if (!include[i]) continue;
        const int y = targets[i];
        if (y < 0 || y >= probs.cols()) throw InvalidInput(fmt::format("target {} out of range", y));
        const auto r = static_cast<Eigen::Index>(i);
        const double p = probs(r, y);
        const double w = class_weights[static_cast<std::size_t>(y)];
        total += -w * std::log(std::max(p, kProbClamp));
        if (dlogits && p > kProbClamp) {
            dlogits->row(r) = w * probs.row(r) / static_cast<double>(n);
            (*dlogits)(r, y) -= w / static_cast<double>(n);
        }
    }
    return total / static_cast<double>(n);
}

double loss_a(const Matrix& p_a, std::span<const int> y_a, const std::array<double, 2>& beta_a, Matrix* dlogits) {
    const std::vector<std::uint8_t> all(y_a.size(), 1);
    return weighted_ce(p_a, y_a, beta_a, all, dlogits);
}

double loss_b(const Matrix& p_b, std::span<const int> y_b, const std::array<double, 2>& beta_b, Matrix* dlogits) {
    std::vector<std::uint8_t> mask(y_b.size());
    std::vector<int> targets(y_b.size());
    for (std::size_t i = 0; i < y_b.size(); ++i) {
        mask[i] = y_b[i] >= 0 ? 1 : 0;
        targets[i] = y_b[i] >= 0 ? y_b[i] : 0;
    }
    return weighted_ce(p_b, targets, beta_b, mask, dlogits);
}

double flat3_loss(const Matrix& p3, std::span<const int> y, const std::array<double, 3>& weights, Matrix* dlogits) {
    const std::vector<std::uint8_t> all(y.size(), 1);
    return weighted_ce(p3, y, weights, all, dlogits);
}

JointLoss joint_loss(double la, double lb, double lambda_a, double lambda_b, double eta) {
    if (eta <= 0.0) throw ConfigError("eta must be positive");
    JointLoss j;
    j.d_loss_a = std::exp(-lambda_a);
    j.d_loss_b = std::exp(-lambda_b);
    j.value = j.d_loss_a * la + j.d_loss_b * lb + eta * (lambda_a + lambda_b);
    j.d_lambda_a = -j.d_loss_a * la + eta;
    j.d_lambda_b = -j.d_loss_b * lb + eta;
    return j;
}

double stationary_lambda(double task_loss, double eta) {
    if (task_loss <= 0.0 || eta <= 0.0) throw InvalidInput("stationary lambda needs positive loss and eta");
    return std::log(task_loss / eta);
}

std::string_view to_string(LossMode m) {
    switch (m) {
        case LossMode::uncertainty: return "uncertainty";
        case LossMode::equal_weight: return "equal_weight";
        case LossMode::flat3: return "flat3";
    }
    return "unknown";
}

LossMode loss_mode_from_string(std::string_view s) {
    if (s == "uncertainty") return LossMode::uncertainty;
    if (s == "equal_weight") return LossMode::equal_weight;
    if (s == "flat3") return LossMode::flat3;
    throw ConfigError(fmt::format("unknown loss mode '{}'", s));
}

}  // namespace osteo::objective
