#pragma once

// Central finite-difference check of the full training objective on a
// d=4 network fed by a two-pixel flatten encoder.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "osteo/backbone.hpp"
#include "osteo/engine.hpp"
#include "osteo/model.hpp"

namespace osteo::test {

struct GradCheckResult {
    double max_rel = 0.0;
    std::string worst;
    std::size_t checked = 0;
    std::size_t failures = 0;
};

inline GradCheckResult gradient_check(std::uint64_t seed, objective::LossMode mode, bool radiomics,
                                      double tol = 1e-3) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> uni(-1.0, 1.0);

    model::EmbeddingConfig cfg;
    cfg.d = 4;
    cfg.rad_hidden = 6;
    cfg.gate_hidden = 5;
    cfg.use_radiomics = radiomics;
    cfg.head = mode == objective::LossMode::flat3 ? model::HeadType::flat3 : model::HeadType::hierarchical;

    const FlattenTrunk trunk(2, 1);
    constexpr int kBatch = 7;
    std::vector<ImageTensor> images;
    for (int i = 0; i < kBatch; ++i) {
        ImageTensor img(2, 1, 1);
        img.data = {static_cast<float>(normal(rng)), static_cast<float>(normal(rng))};
        images.push_back(std::move(img));
    }

    engine::Batch batch;
    batch.trunk = model::trunk_features(trunk, images);
    if (radiomics) batch.radiomics = nn::Matrix::NullaryExpr(kBatch, 29, [&] { return normal(rng); });
    batch.labels = {0, 1, 2, 2, 1, 0, static_cast<int>(seed % 3)};

    model::MultimodalNet net(cfg, trunk.feature_dim(), rng());
    objective::UncertaintyParams lambdas;
    lambdas.lambda_a.value(0, 0) = uni(rng);
    lambdas.lambda_b.value(0, 0) = uni(rng);
    objective::ClassWeights w{{0.5 + std::abs(uni(rng)), 0.5 + std::abs(uni(rng))},
                              {0.5 + std::abs(uni(rng)), 0.5 + std::abs(uni(rng))}};
    const std::array<double, 3> wf{0.7, 1.4, 1.1};
    objective::LossConfig loss{0.2, mode};

    std::vector<std::pair<std::string, nn::Parameter*>> params;
    for (auto& g : net.parameter_groups()) {
        for (std::size_t k = 0; k < g.params.size(); ++k) params.emplace_back(g.name + "#" + std::to_string(k), g.params[k]);
    }
    if (mode == objective::LossMode::uncertainty) {
        params.emplace_back("lambda_A", &lambdas.lambda_a);
        params.emplace_back("lambda_B", &lambdas.lambda_b);
    }
    for (auto& [name, p] : params) p->zero_grad();
    engine::compute_objective(net, lambdas, w, wf, loss, batch, true);

    GradCheckResult r;
    constexpr double h = 1e-6;
    for (auto& [name, p] : params) {
        for (Eigen::Index i = 0; i < p->value.size(); ++i) {
            const double orig = p->value(i);
            p->value(i) = orig + h;
            const double up = engine::compute_objective(net, lambdas, w, wf, loss, batch, false).total;
            p->value(i) = orig - h;
            const double down = engine::compute_objective(net, lambdas, w, wf, loss, batch, false).total;
            p->value(i) = orig;
            const double numeric = (up - down) / (2.0 * h);
            const double analytic = p->grad(i);
            const double diff = std::abs(numeric - analytic);
            const double rel = diff / std::max({std::abs(numeric), std::abs(analytic), 1e-300});
            ++r.checked;
            // Gradients that vanish up to finite-difference noise are compared absolutely.
            const bool ok = rel <= tol || diff <= 1e-8;
            if (!ok) ++r.failures;
            if (std::max(std::abs(numeric), std::abs(analytic)) > 1e-5 && rel > r.max_rel) {
                r.max_rel = rel;
                r.worst = name + "[" + std::to_string(i) + "]";
            }
        }
    }
    return r;
}

}  // namespace osteo::test
