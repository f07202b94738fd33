#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "fairtune/data.hpp"
#include "fairtune/errors.hpp"
#include "fairtune/linalg.hpp"
#include "fairtune/model.hpp"

namespace fairtune {

// ============================================================================
// Per-group Fisher information of the final linear layer
// ============================================================================

enum class GroupTag { group1, group2, neutralized };

inline std::string to_string(GroupTag t) {
    switch (t) {
        case GroupTag::group1: return "group1";
        case GroupTag::group2: return "group2";
        case GroupTag::neutralized: return "neutralized";
    }
    return "neutralized";
}

/// Diagonal importance matrix: entries sqrt(sum_j fisher_ij) per weight row.
struct FisherDiagonal {
    std::size_t dim = 0;
    std::vector<double> diag;
    GroupTag group_tag = GroupTag::neutralized;

    DiagonalMatrix to_diagonal() const {
        DiagonalMatrix d;
        d.dim = dim;
        d.diag = diag;
        return d;
    }
};

namespace detail {

// Shared accumulation for weight (always) and bias (optional) Fisher entries.
// Uses the closed-form per-sample head gradient grad_W = rep^T (p - t).
inline void accumulate_fisher(const NeuralNet& net, const Dataset& ds,
                              double loss_scale, Matrix& weight_out,
                              std::vector<double>* bias_out) {
    if (ds.size() == 0) throw InputError("empirical_fisher: empty dataset");
    if (net.output_dim() != 2)
        throw ShapeError("empirical_fisher: head must emit 2 logits");
    const auto fr = forward(net, ds.x);
    const Matrix& rep = fr.representation;
    const std::size_t d = net.head().in_dim();
    const std::size_t k = net.head().out_dim();

    weight_out = Matrix(d, k);
    if (bias_out) bias_out->assign(k, 0.0);
    for (std::size_t nidx = 0; nidx < ds.size(); ++nidx) {
        double p0, p1;
        detail::softmax2(fr.logits(nidx, 0), fr.logits(nidx, 1), p0, p1);
        const int target = ds.y[nidx] > 0 ? 1 : 0;
        const double dlogit[2] = {p0 - (target == 0 ? 1.0 : 0.0),
                                  p1 - (target == 1 ? 1.0 : 0.0)};
        for (std::size_t i = 0; i < d; ++i) {
            const double r = rep(nidx, i);
            for (std::size_t j = 0; j < k; ++j) {
                const double g = r * dlogit[j];
                weight_out(i, j) += g * g;
            }
        }
        if (bias_out)
            for (std::size_t j = 0; j < k; ++j)
                (*bias_out)[j] += dlogit[j] * dlogit[j];
    }
    const double scale =
        loss_scale * loss_scale / static_cast<double>(ds.size());
    for (double& v : weight_out.data) v *= scale;
    if (bias_out)
        for (double& v : *bias_out) v *= scale;
}

}  // namespace detail

/// Empirical Fisher of the final-layer weights: entry (i,j) is the mean of
/// squared per-sample cross-entropy gradients w.r.t. W_ij. loss_scale
/// multiplies the loss (entries scale by loss_scale^2).
inline Matrix empirical_fisher(const NeuralNet& net, const Dataset& ds,
                               double loss_scale = 1.0) {
    Matrix w;
    detail::accumulate_fisher(net, ds, loss_scale, w, nullptr);
    return w;
}

/// Weight and bias Fisher entries together (the bias block is reported by the
/// heatmap export but never enters the importance diagonal).
inline std::pair<Matrix, std::vector<double>> empirical_fisher_full(
    const NeuralNet& net, const Dataset& ds, double loss_scale = 1.0) {
    Matrix w;
    std::vector<double> b;
    detail::accumulate_fisher(net, ds, loss_scale, w, &b);
    return {std::move(w), std::move(b)};
}

/// diag[i] = sqrt(sum_j fisher[i][j]).
inline FisherDiagonal row_importance(const Matrix& fisher,
                                     GroupTag tag = GroupTag::neutralized) {
    for (double v : fisher.data) {
        if (!(v >= 0.0) || !std::isfinite(v))
            throw InvariantError(
                "row_importance: fisher entries must be non-negative finite");
    }
    FisherDiagonal out;
    out.dim = fisher.rows;
    out.diag.resize(fisher.rows);
    out.group_tag = tag;
    for (std::size_t i = 0; i < fisher.rows; ++i) {
        double row_sum = 0.0;
        for (std::size_t j = 0; j < fisher.cols; ++j) row_sum += fisher(i, j);
        out.diag[i] = std::sqrt(row_sum);
    }
    return out;
}

/// alpha*i1 + (1-alpha)*i2 with alpha in [0.5, 1).
inline FisherDiagonal blend(const FisherDiagonal& i1, const FisherDiagonal& i2,
                            double alpha) {
    if (i1.dim != i2.dim)
        throw ShapeError("blend: dimension mismatch " + std::to_string(i1.dim) +
                         " vs " + std::to_string(i2.dim));
    if (!(alpha >= 0.5 && alpha < 1.0))
        throw InputError("blend: alpha must be in [0.5, 1)");
    FisherDiagonal out;
    out.dim = i1.dim;
    out.group_tag = GroupTag::neutralized;
    out.diag.resize(i1.dim);
    for (std::size_t i = 0; i < i1.dim; ++i)
        out.diag[i] = alpha * i1.diag[i] + (1.0 - alpha) * i2.diag[i];
    return out;
}

/// Equal-weight neutralization; defined as blend at alpha = 0.5 so the two
/// paths are bit-identical.
inline FisherDiagonal neutralize(const FisherDiagonal& i1,
                                 const FisherDiagonal& i2) {
    return blend(i1, i2, 0.5);
}

/// Floors diagonal entries at rel_eps * max(diag) so inversion is defined on
/// dead rows. An all-zero diagonal cannot be repaired.
inline FisherDiagonal floor_importance(const FisherDiagonal& imp,
                                       double rel_eps = 1e-8) {
    double mx = 0.0;
    for (double v : imp.diag) mx = std::max(mx, v);
    if (mx <= 0.0)
        throw NumericalError("floor_importance: importance diagonal is zero");
    FisherDiagonal out = imp;
    const double floor = rel_eps * mx;
    for (double& v : out.diag)
        if (v < floor) v = floor;
    return out;
}

// ============================================================================
// Heatmap export
// ============================================================================

namespace detail {

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace detail

/// Per-parameter Fisher values of the two groups, one CSV row per final-layer
/// parameter: d*k weight rows (row-major) then k bias rows flagged is_bias=1.
/// Group g is measured with net_g on ds_g, so per-group-trained models and the
/// shared-model protocol both fit. header_lines are prepended as '#' comments.
inline void export_fisher_heatmap(const NeuralNet& net1, const NeuralNet& net2,
                                  const Dataset& ds_group1,
                                  const Dataset& ds_group2,
                                  const std::string& out_path,
                                  const std::vector<std::string>& header_lines =
                                      {}) {
    if (ds_group1.size() == 0 || ds_group2.size() == 0)
        throw GroupEmptyError("export_fisher_heatmap: empty group dataset");
    if (net1.head().in_dim() != net2.head().in_dim() ||
        net1.head().out_dim() != net2.head().out_dim())
        throw ShapeError("export_fisher_heatmap: head shapes differ");
    const auto [w1, b1] = empirical_fisher_full(net1, ds_group1);
    const auto [w2, b2] = empirical_fisher_full(net2, ds_group2);

    std::ofstream out(out_path);
    if (!out) throw FileError("cannot write heatmap: " + out_path);
    for (const auto& line : header_lines) out << "# " << line << "\n";
    out << "index,group1,group2,is_bias\n";
    std::size_t index = 0;
    for (std::size_t e = 0; e < w1.data.size(); ++e, ++index)
        out << index << ',' << detail::format_double(w1.data[e]) << ','
            << detail::format_double(w2.data[e]) << ",0\n";
    for (std::size_t j = 0; j < b1.size(); ++j, ++index)
        out << index << ',' << detail::format_double(b1[j]) << ','
            << detail::format_double(b2[j]) << ",1\n";
    if (!out) throw FileError("write failed: " + out_path);
}

/// Shared-model variant: both groups measured on the same network.
inline void export_fisher_heatmap(const NeuralNet& net,
                                  const Dataset& ds_group1,
                                  const Dataset& ds_group2,
                                  const std::string& out_path,
                                  const std::vector<std::string>& header_lines =
                                      {}) {
    export_fisher_heatmap(net, net, ds_group1, ds_group2, out_path,
                          header_lines);
}

}  // namespace fairtune
