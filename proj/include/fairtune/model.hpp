#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fairtune/data.hpp"
#include "fairtune/errors.hpp"
#include "fairtune/linalg.hpp"
#include "fairtune/rng.hpp"

namespace fairtune {

// ============================================================================
// Network structure
// ============================================================================

enum class Activation { relu, identity };

struct DenseLayer {
    Matrix weight;             // in_dim x out_dim
    std::vector<double> bias;  // empty when has_bias is false
    bool has_bias = true;
    bool frozen = false;
    Activation activation = Activation::identity;

    std::size_t in_dim() const { return weight.rows; }
    std::size_t out_dim() const { return weight.cols; }
};

struct NeuralNet {
    std::vector<DenseLayer> layers;

    std::size_t input_dim() const { return layers.front().in_dim(); }
    std::size_t output_dim() const { return layers.back().out_dim(); }
    DenseLayer& head() { return layers.back(); }
    const DenseLayer& head() const { return layers.back(); }

    void validate() const {
        if (layers.empty()) throw ShapeError("NeuralNet: no layers");
        for (const auto& l : layers) {
            if (l.has_bias && l.bias.size() != l.out_dim())
                throw ShapeError("NeuralNet: bias length mismatch");
            if (!l.has_bias && !l.bias.empty())
                throw ShapeError("NeuralNet: bias present on bias-free layer");
        }
        for (std::size_t i = 0; i + 1 < layers.size(); ++i)
            if (layers[i].out_dim() != layers[i + 1].in_dim())
                throw ShapeError("NeuralNet: dim chain broken at layer " +
                                 std::to_string(i));
        if (layers.back().activation != Activation::identity)
            throw ShapeError("NeuralNet: head must have identity activation");
    }

    /// Sets frozen on every layer except the last n_trainable ones.
    void freeze_all_but_last(std::size_t n_trainable) {
        for (std::size_t i = 0; i < layers.size(); ++i)
            layers[i].frozen = i + n_trainable < layers.size() ? true : false;
    }
};

struct GradientSet {
    std::vector<Matrix> weight;
    std::vector<std::vector<double>> bias;  // empty entry for bias-free layers

    static GradientSet zeros_like(const NeuralNet& net) {
        GradientSet g;
        for (const auto& l : net.layers) {
            g.weight.emplace_back(l.in_dim(), l.out_dim());
            g.bias.emplace_back(l.bias.size(), 0.0);
        }
        return g;
    }
};

/// Glorot-uniform MLP: ReLU hidden layers, identity head, zero biases.
inline NeuralNet build_mlp(std::size_t input_dim,
                           const std::vector<std::size_t>& hidden,
                           std::size_t out_dim, std::uint64_t seed) {
    if (input_dim == 0 || out_dim == 0)
        throw InputError("build_mlp: dimensions must be positive");
    Rng rng(seed);
    NeuralNet net;
    std::size_t in = input_dim;
    std::vector<std::size_t> dims = hidden;
    dims.push_back(out_dim);
    for (std::size_t li = 0; li < dims.size(); ++li) {
        DenseLayer l;
        l.weight = Matrix(in, dims[li]);
        const double bound = std::sqrt(6.0 / static_cast<double>(in + dims[li]));
        for (double& w : l.weight.data) w = rng.uniform(-bound, bound);
        l.bias.assign(dims[li], 0.0);
        l.activation = li + 1 == dims.size() ? Activation::identity
                                             : Activation::relu;
        net.layers.push_back(std::move(l));
        in = dims[li];
    }
    net.validate();
    return net;
}

// ============================================================================
// Forward pass
// ============================================================================

struct ForwardResult {
    Matrix logits;          // n x k
    Matrix representation;  // n x (head in_dim): the input to the final layer
};

namespace detail {

inline Matrix affine(const Matrix& x, const DenseLayer& l) {
    if (x.cols != l.in_dim())
        throw ShapeError("forward: input width " + std::to_string(x.cols) +
                         " != layer in_dim " + std::to_string(l.in_dim()));
    Matrix z = matmul(x, l.weight);
    if (l.has_bias)
        for (std::size_t i = 0; i < z.rows; ++i)
            for (std::size_t j = 0; j < z.cols; ++j) z(i, j) += l.bias[j];
    return z;
}

inline void apply_activation(Matrix& z, Activation act) {
    if (act == Activation::relu)
        for (double& v : z.data) v = v > 0.0 ? v : 0.0;
}

// Pre-activations per layer plus the layer inputs, kept for backprop.
struct ForwardCache {
    std::vector<Matrix> inputs;  // inputs[l] feeds layer l; size L
    std::vector<Matrix> preact;  // preact[l] = inputs[l]·W_l + b_l; size L
};

inline ForwardCache forward_cached(const NeuralNet& net, const Matrix& x) {
    net.validate();
    ForwardCache c;
    Matrix a = x;
    for (const auto& l : net.layers) {
        c.inputs.push_back(a);
        Matrix z = affine(a, l);
        c.preact.push_back(z);
        apply_activation(z, l.activation);
        a = std::move(z);
    }
    return c;
}

}  // namespace detail

inline ForwardResult forward(const NeuralNet& net, const Matrix& x) {
    auto cache = detail::forward_cached(net, x);
    return {std::move(cache.preact.back()), std::move(cache.inputs.back())};
}

// ============================================================================
// Loss and gradients
// ============================================================================

enum class FairnessKind { none, dp, eo };

inline std::string to_string(FairnessKind k) {
    switch (k) {
        case FairnessKind::none: return "none";
        case FairnessKind::dp: return "dp";
        case FairnessKind::eo: return "eo";
    }
    return "none";
}

inline FairnessKind fairness_from_string(const std::string& s) {
    if (s == "none") return FairnessKind::none;
    if (s == "dp" || s == "DP") return FairnessKind::dp;
    if (s == "eo" || s == "EO") return FairnessKind::eo;
    throw ConfigError("unknown fairness kind: " + s);
}

struct LossConfig {
    FairnessKind fairness = FairnessKind::none;
    double intensity = 0.0;  // weight of the fairness relaxation
};

namespace detail {

// Row-wise 2-class softmax with the usual max shift.
inline void softmax2(double z0, double z1, double& p0, double& p1) {
    const double m = z0 > z1 ? z0 : z1;
    const double e0 = std::exp(z0 - m);
    const double e1 = std::exp(z1 - m);
    const double sum = e0 + e1;
    p0 = e0 / sum;
    p1 = e1 / sum;
}

inline double log_sum_exp2(double z0, double z1) {
    const double m = z0 > z1 ? z0 : z1;
    return m + std::log(std::exp(z0 - m) + std::exp(z1 - m));
}

// Adds the gradient of intensity·|mean p+(rows A) − mean p+(rows B)| to dz.
// Skips silently when either side is empty (possible in small minibatches).
inline double soft_gap_term(const std::vector<std::size_t>& a,
                            const std::vector<std::size_t>& b,
                            const std::vector<double>& p_pos, double intensity,
                            Matrix& dz) {
    if (a.empty() || b.empty()) return 0.0;
    double ma = 0.0, mb = 0.0;
    for (std::size_t i : a) ma += p_pos[i];
    for (std::size_t i : b) mb += p_pos[i];
    ma /= static_cast<double>(a.size());
    mb /= static_cast<double>(b.size());
    const double gap = ma - mb;
    const double sign = gap > 0.0 ? 1.0 : gap < 0.0 ? -1.0 : 0.0;
    // d p+ / dz1 = p+(1 − p+),  d p+ / dz0 = −p+(1 − p+)
    for (std::size_t i : a) {
        const double q = p_pos[i] * (1.0 - p_pos[i]);
        const double c = intensity * sign / static_cast<double>(a.size());
        dz(i, 1) += c * q;
        dz(i, 0) -= c * q;
    }
    for (std::size_t i : b) {
        const double q = p_pos[i] * (1.0 - p_pos[i]);
        const double c = -intensity * sign / static_cast<double>(b.size());
        dz(i, 1) += c * q;
        dz(i, 0) -= c * q;
    }
    return std::abs(gap);
}

}  // namespace detail

/// Mean softmax cross-entropy over the batch plus an optional differentiable
/// fairness relaxation; gradients for unfrozen layers only.
inline std::pair<double, GradientSet> loss_and_grad(const NeuralNet& net,
                                                    const Dataset& batch,
                                                    const LossConfig& cfg = {}) {
    if (batch.size() == 0) throw InputError("loss_and_grad: empty batch");
    if (net.output_dim() != 2)
        throw ShapeError("loss_and_grad: head must emit 2 logits");
    for (int y : batch.y)
        if (y != -1 && y != 1)
            throw InputError("loss_and_grad: labels must be in {-1, +1}");

    const auto cache = detail::forward_cached(net, batch.x);
    const Matrix& logits = cache.preact.back();
    const std::size_t n = batch.size();
    const double inv_n = 1.0 / static_cast<double>(n);

    // Task loss and its logit gradient.
    double loss = 0.0;
    Matrix dz(n, 2);
    std::vector<double> p_pos(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int target = batch.y[i] > 0 ? 1 : 0;
        double p0, p1;
        detail::softmax2(logits(i, 0), logits(i, 1), p0, p1);
        p_pos[i] = p1;
        loss += detail::log_sum_exp2(logits(i, 0), logits(i, 1)) -
                logits(i, target);
        dz(i, 0) = (p0 - (target == 0 ? 1.0 : 0.0)) * inv_n;
        dz(i, 1) = (p1 - (target == 1 ? 1.0 : 0.0)) * inv_n;
    }
    loss *= inv_n;

    // Fairness relaxation on the soft positive probability.
    if (cfg.fairness != FairnessKind::none && cfg.intensity != 0.0) {
        std::vector<std::size_t> g1, g2, g1p, g2p, g1n, g2n;
        for (std::size_t i = 0; i < n; ++i) {
            (batch.s[i] == 1 ? g1 : g2).push_back(i);
            if (batch.y[i] > 0)
                (batch.s[i] == 1 ? g1p : g2p).push_back(i);
            else
                (batch.s[i] == 1 ? g1n : g2n).push_back(i);
        }
        if (cfg.fairness == FairnessKind::dp) {
            loss += cfg.intensity *
                    detail::soft_gap_term(g1, g2, p_pos, cfg.intensity, dz);
        } else {
            loss += cfg.intensity *
                    detail::soft_gap_term(g1p, g2p, p_pos, cfg.intensity, dz);
            loss += cfg.intensity *
                    detail::soft_gap_term(g1n, g2n, p_pos, cfg.intensity, dz);
        }
    }

    // Backward pass.
    GradientSet grads = GradientSet::zeros_like(net);
    Matrix delta = std::move(dz);
    for (std::size_t li = net.layers.size(); li-- > 0;) {
        const DenseLayer& l = net.layers[li];
        if (!l.frozen) {
            grads.weight[li] = matmul(transpose(cache.inputs[li]), delta);
            if (l.has_bias)
                for (std::size_t i = 0; i < delta.rows; ++i)
                    for (std::size_t j = 0; j < delta.cols; ++j)
                        grads.bias[li][j] += delta(i, j);
        }
        if (li > 0) {
            Matrix prev = matmul(delta, transpose(l.weight));
            if (net.layers[li - 1].activation == Activation::relu) {
                const Matrix& z = cache.preact[li - 1];
                for (std::size_t i = 0; i < prev.rows; ++i)
                    for (std::size_t j = 0; j < prev.cols; ++j)
                        if (z(i, j) <= 0.0) prev(i, j) = 0.0;
            }
            delta = std::move(prev);
        }
    }
    return {loss, std::move(grads)};
}

/// One SGD step; returns the updated copy, frozen layers untouched.
inline NeuralNet sgd_step(const NeuralNet& net, const GradientSet& grads,
                          double lr) {
    if (lr < 0.0) throw InputError("sgd_step: negative learning rate");
    if (grads.weight.size() != net.layers.size())
        throw ShapeError("sgd_step: gradient/layer count mismatch");
    NeuralNet out = net;
    for (std::size_t li = 0; li < out.layers.size(); ++li) {
        DenseLayer& l = out.layers[li];
        if (l.frozen) continue;
        if (!grads.weight[li].same_shape(l.weight))
            throw ShapeError("sgd_step: gradient shape mismatch at layer " +
                             std::to_string(li));
        for (std::size_t e = 0; e < l.weight.data.size(); ++e)
            l.weight.data[e] -= lr * grads.weight[li].data[e];
        for (std::size_t j = 0; j < l.bias.size(); ++j)
            l.bias[j] -= lr * grads.bias[li][j];
    }
    return out;
}

/// Gradient of the single-sample cross-entropy w.r.t. the final layer only:
/// grad_W = repᵀ(p − t), grad_b = p − t.
inline std::pair<Matrix, std::vector<double>> per_sample_grad_final_layer(
    const NeuralNet& net, const Matrix& x_row, int y) {
    if (x_row.rows != 1) throw ShapeError("per_sample_grad: expected one row");
    if (net.output_dim() != 2)
        throw ShapeError("per_sample_grad: head must emit 2 logits");
    const auto fr = forward(net, x_row);
    double p0, p1;
    detail::softmax2(fr.logits(0, 0), fr.logits(0, 1), p0, p1);
    const int target = y > 0 ? 1 : 0;
    const double d0 = p0 - (target == 0 ? 1.0 : 0.0);
    const double d1 = p1 - (target == 1 ? 1.0 : 0.0);
    const Matrix& rep = fr.representation;
    Matrix grad_w(rep.cols, 2);
    for (std::size_t j = 0; j < rep.cols; ++j) {
        grad_w(j, 0) = rep(0, j) * d0;
        grad_w(j, 1) = rep(0, j) * d1;
    }
    return {std::move(grad_w), std::vector<double>{d0, d1}};
}

// ============================================================================
// Checkpoints
// ============================================================================

inline constexpr int kCheckpointFormatVersion = 1;

/// Header lines (if any) are written as '#'-prefixed comments before the
/// JSON body; load_checkpoint skips them.
inline void save_checkpoint(const NeuralNet& net, const std::string& path,
                            const std::vector<std::string>& header_lines = {}) {
    net.validate();
    nlohmann::json j;
    j["format_version"] = kCheckpointFormatVersion;
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : net.layers) {
        nlohmann::json jl;
        jl["in"] = l.in_dim();
        jl["out"] = l.out_dim();
        jl["activation"] = l.activation == Activation::relu ? "relu"
                                                            : "identity";
        jl["has_bias"] = l.has_bias;
        jl["frozen"] = l.frozen;
        jl["weight"] = l.weight.data;  // row-major
        jl["bias"] = l.bias;
        layers.push_back(std::move(jl));
    }
    j["layers"] = std::move(layers);
    std::ofstream out(path);
    if (!out) throw FileError("cannot write checkpoint: " + path);
    for (const auto& line : header_lines) out << "# " << line << "\n";
    out << j.dump(2) << "\n";
    if (!out) throw FileError("write failed: " + path);
}

inline NeuralNet load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FileError("cannot open checkpoint: " + path);
    std::string body, line;
    while (std::getline(in, line)) {
        if (body.empty() && !line.empty() && line[0] == '#') continue;
        body += line;
        body += '\n';
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
        throw FileError("invalid checkpoint JSON in " + path + ": " + e.what());
    }
    try {
        if (j.at("format_version").get<int>() != kCheckpointFormatVersion)
            throw ConfigError("unsupported checkpoint format_version in " +
                              path);
        NeuralNet net;
        for (const auto& jl : j.at("layers")) {
            DenseLayer l;
            const auto in_dim = jl.at("in").get<std::size_t>();
            const auto out_dim = jl.at("out").get<std::size_t>();
            l.weight = Matrix(in_dim, out_dim);
            l.weight.data = jl.at("weight").get<std::vector<double>>();
            if (l.weight.data.size() != in_dim * out_dim)
                throw ConfigError("checkpoint weight size mismatch in " + path);
            l.bias = jl.at("bias").get<std::vector<double>>();
            l.has_bias = jl.at("has_bias").get<bool>();
            l.frozen = jl.at("frozen").get<bool>();
            const auto act = jl.at("activation").get<std::string>();
            if (act == "relu")
                l.activation = Activation::relu;
            else if (act == "identity")
                l.activation = Activation::identity;
            else
                throw ConfigError("unknown activation '" + act + "' in " +
                                  path);
            net.layers.push_back(std::move(l));
        }
        net.validate();
        return net;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("malformed checkpoint " + path + ": " + e.what());
    }
}

}  // namespace fairtune
