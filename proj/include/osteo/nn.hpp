#pragma once

// Minimal dense layers with hand-written backward passes. Batches are row
// matrices (B x features). Gradients accumulate into Parameter::grad until
// zero_grad().

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

namespace osteo::nn {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;

struct Parameter {
    Matrix value;
    Matrix grad;
    bool decay = true;  // participates in decoupled weight decay

    Parameter() = default;
    Parameter(Eigen::Index rows, Eigen::Index cols, bool decay_ = true)
        : value(Matrix::Zero(rows, cols)), grad(Matrix::Zero(rows, cols)), decay(decay_) {}

    void zero_grad() { grad.setZero(); }
    Eigen::Index size() const { return value.size(); }
};

class Linear {
public:
    Linear() = default;
    /// Uniform(-1/sqrt(in), 1/sqrt(in)) init for weight and bias.
    Linear(int in, int out, std::mt19937_64& rng);

    int in_features() const { return static_cast<int>(weight.value.cols()); }
    int out_features() const { return static_cast<int>(weight.value.rows()); }

    Matrix forward(const Matrix& x) const;
    /// Accumulates dW, db for the given input/upstream pair; returns dL/dx.
    Matrix backward(const Matrix& x, const Matrix& dy);

    nlohmann::json to_json() const;
    static Linear from_json(const nlohmann::json& j);

    Parameter weight;  // out x in
    Parameter bias;    // 1 x out
};

/// Affine -> ReLU -> affine.
class Mlp2 {
public:
    struct Cache {
        Matrix input;
        Matrix pre;     // hidden pre-activation
        Matrix hidden;  // after ReLU
    };

    Mlp2() = default;
    Mlp2(int in, int hidden, int out, std::mt19937_64& rng);

    Matrix forward(const Matrix& x, Cache* cache = nullptr) const;
    Matrix backward(const Cache& cache, const Matrix& dy);

    nlohmann::json to_json() const;
    static Mlp2 from_json(const nlohmann::json& j);

    Linear first;
    Linear second;
};

Matrix softmax_rows(const Matrix& logits);

nlohmann::json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const nlohmann::json& j);

/// Decoupled weight decay Adam: p -= lr*wd*p, then the Adam step.
class AdamW {
public:
    struct Options {
        double lr = 1e-4;
        double weight_decay = 1e-4;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
    };

    AdamW(std::vector<Parameter*> params, Options opts);
    void step();
    void zero_grad();
    long steps() const noexcept { return t_; }

private:
    std::vector<Parameter*> params_;
    std::vector<Matrix> m_;
    std::vector<Matrix> v_;
    Options opts_;
    long t_ = 0;
};

}  // namespace osteo::nn
