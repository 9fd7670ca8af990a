#include "osteo/nn.hpp"

#include <cmath>

#include "osteo/errors.hpp"

namespace osteo::nn {

Linear::Linear(int in, int out, std::mt19937_64& rng) : weight(out, in), bias(1, out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Eigen::Index i = 0; i < weight.value.size(); ++i) weight.value.data()[i] = dist(rng);
    for (Eigen::Index i = 0; i < bias.value.size(); ++i) bias.value.data()[i] = dist(rng);
}

Matrix Linear::forward(const Matrix& x) const {
    if (x.cols() != weight.value.cols()) {
        throw ShapeError("linear layer expects " + std::to_string(weight.value.cols()) +
                         " inputs, got " + std::to_string(x.cols()));
    }
    Matrix y = x * weight.value.transpose();
    y.rowwise() += bias.value.row(0);
    return y;
}

Matrix Linear::backward(const Matrix& x, const Matrix& dy) {
    weight.grad.noalias() += dy.transpose() * x;
    bias.grad.row(0) += dy.colwise().sum();
    return dy * weight.value;
}

nlohmann::json Linear::to_json() const {
    return {{"weight", matrix_to_json(weight.value)}, {"bias", matrix_to_json(bias.value)}};
}

Linear Linear::from_json(const nlohmann::json& j) {
    Linear l;
    l.weight.value = matrix_from_json(j.at("weight"));
    l.weight.grad = Matrix::Zero(l.weight.value.rows(), l.weight.value.cols());
    l.bias.value = matrix_from_json(j.at("bias"));
    l.bias.grad = Matrix::Zero(l.bias.value.rows(), l.bias.value.cols());
    if (l.bias.value.rows() != 1 || l.bias.value.cols() != l.weight.value.rows()) {
        throw ShapeError("linear bias does not match weight");
    }
    return l;
}

Mlp2::Mlp2(int in, int hidden, int out, std::mt19937_64& rng)
    : first(in, hidden, rng), second(hidden, out, rng) {}

Matrix Mlp2::forward(const Matrix& x, Cache* cache) const {
    Matrix pre = first.forward(x);
    Matrix hidden = pre.cwiseMax(0.0);
    Matrix y = second.forward(hidden);
    if (cache) {
        cache->input = x;
        cache->pre = std::move(pre);
        cache->hidden = std::move(hidden);
    }
    return y;
}

Matrix Mlp2::backward(const Cache& cache, const Matrix& dy) {
    Matrix dh = second.backward(cache.hidden, dy);
    dh = dh.cwiseProduct((cache.pre.array() > 0.0).cast<double>().matrix());
    return first.backward(cache.input, dh);
}

nlohmann::json Mlp2::to_json() const { return {{"first", first.to_json()}, {"second", second.to_json()}}; }

Mlp2 Mlp2::from_json(const nlohmann::json& j) {
    Mlp2 m;
    m.first = Linear::from_json(j.at("first"));
    m.second = Linear::from_json(j.at("second"));
    return m;
}

Matrix softmax_rows(const Matrix& logits) {
    Matrix out(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const double mx = logits.row(i).maxCoeff();
        const RowVector e = (logits.row(i).array() - mx).exp().matrix();
        out.row(i) = e / e.sum();
    }
    return out;
}

nlohmann::json matrix_to_json(const Matrix& m) {
    std::vector<double> data(static_cast<std::size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            data[static_cast<std::size_t>(r * m.cols() + c)] = m(r, c);
        }
    }
    return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

Matrix matrix_from_json(const nlohmann::json& j) {
    const auto rows = j.at("rows").get<Eigen::Index>();
    const auto cols = j.at("cols").get<Eigen::Index>();
    const auto data = j.at("data").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(data.size()) != rows * cols) throw ShapeError("matrix payload size mismatch");
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = data[static_cast<std::size_t>(r * cols + c)];
    }
    return m;
}

AdamW::AdamW(std::vector<Parameter*> params, Options opts) : params_(std::move(params)), opts_(opts) {
    for (const Parameter* p : params_) {
        m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
        v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    }
}

void AdamW::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Parameter& p = *params_[i];
        if (p.decay) p.value *= 1.0 - opts_.lr * opts_.weight_decay;
        m_[i] = opts_.beta1 * m_[i] + (1.0 - opts_.beta1) * p.grad;
        v_[i] = opts_.beta2 * v_[i] + (1.0 - opts_.beta2) * p.grad.cwiseProduct(p.grad);
        const Matrix denom = ((v_[i] / bc2).array().sqrt() + opts_.eps).matrix();
        p.value.array() -= opts_.lr * (m_[i] / bc1).array() / denom.array();
    }
}

void AdamW::zero_grad() {
    for (Parameter* p : params_) p->zero_grad();
}

}  // namespace osteo::nn
