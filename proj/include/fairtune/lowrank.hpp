#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "fairtune/errors.hpp"
#include "fairtune/fisher.hpp"
#include "fairtune/linalg.hpp"
#include "fairtune/model.hpp"

namespace fairtune {

// ============================================================================
// Importance-weighted truncated factorization of the final layer
// ============================================================================

/// Rank-r replacement of a dense head W (d x k), bias carried unchanged:
/// the head becomes x -> (x * a) * b_factor + bias.
struct LowRankHead {
    Matrix a;                  // d x r, solves min ||imp*(W - A*B)||_F
    Matrix b_factor;           // r x k
    std::vector<double> bias;  // k, copied from the dense head
    std::size_t rank = 0;
};

namespace detail {

inline void check_factorize_inputs(const Matrix& w, const FisherDiagonal& imp,
                                   std::size_t r) {
    if (imp.dim != w.rows)
        throw ShapeError("weighted_factorize: importance dim " +
                         std::to_string(imp.dim) + " != weight rows " +
                         std::to_string(w.rows));
    const std::size_t max_rank = std::min(w.rows, w.cols);
    if (r < 1 || r > max_rank)
        throw RankError("weighted_factorize: rank " + std::to_string(r) +
                        " outside [1, " + std::to_string(max_rank) + "]");
    for (double v : imp.diag)
        if (!(v > 0.0) || !std::isfinite(v))
            throw NumericalError(
                "weighted_factorize: importance diagonal must be strictly "
                "positive (apply floor_importance first)");
}

}  // namespace detail

/// Solves min_{rank r} ||imp*W - imp*A*B||_F via the SVD of imp*W:
/// A = imp^-1 * U_r * S_r, B = V_r^T. bias is attached to the second factor.
inline LowRankHead weighted_factorize(const Matrix& w,
                                      const std::vector<double>& bias,
                                      const FisherDiagonal& imp,
                                      std::size_t r) {
    detail::check_factorize_inputs(w, imp, r);
    const SvdResult decomp = truncate(svd(scale_rows(imp.to_diagonal(), w)), r);
    LowRankHead head;
    head.rank = r;
    head.bias = bias;
    head.a = Matrix(w.rows, r);
    for (std::size_t i = 0; i < w.rows; ++i)
        for (std::size_t l = 0; l < r; ++l)
            head.a(i, l) = decomp.u(i, l) * decomp.s[l] / imp.diag[i];
    head.b_factor = transpose(decomp.v);
    return head;
}

/// l1: d -> r, no bias; l2: r -> k with the carried bias; both trainable.
inline std::pair<DenseLayer, DenseLayer> build_replacement_layers(
    const LowRankHead& head) {
    DenseLayer l1;
    l1.weight = head.a;
    l1.has_bias = false;
    l1.activation = Activation::identity;
    DenseLayer l2;
    l2.weight = head.b_factor;
    l2.bias = head.bias;
    l2.has_bias = true;
    l2.activation = Activation::identity;
    return {std::move(l1), std::move(l2)};
}

// ============================================================================
// Rank diagnostics
// ============================================================================

struct ReconstructionRow {
    std::size_t rank = 0;
    double weighted_error = 0.0;    // ||imp*(W - A*B)||_F
    double unweighted_error = 0.0;  // ||W - A*B||_F
    double retained_energy = 0.0;   // sum_{i<=r} s_i^2 / sum_i s_i^2
};

inline ReconstructionRow reconstruction_report(const Matrix& w,
                                               const FisherDiagonal& imp,
                                               std::size_t r) {
    detail::check_factorize_inputs(w, imp, r);
    const LowRankHead head =
        weighted_factorize(w, std::vector<double>(w.cols, 0.0), imp, r);
    const Matrix approx = matmul(head.a, head.b_factor);
    const Matrix diff = subtract(w, approx);

    ReconstructionRow row;
    row.rank = r;
    row.unweighted_error = frobenius_norm(diff);
    row.weighted_error = frobenius_norm(scale_rows(imp.to_diagonal(), diff));

    const SvdResult full = svd(scale_rows(imp.to_diagonal(), w));
    double total = 0.0, kept = 0.0;
    for (std::size_t i = 0; i < full.s.size(); ++i) {
        total += full.s[i] * full.s[i];
        if (i < r) kept += full.s[i] * full.s[i];
    }
    row.retained_energy = total > 0.0 ? kept / total : 1.0;
    return row;
}

/// Smallest rank whose weighted singular energy reaches the threshold.
inline std::size_t rank_for_energy(const Matrix& w, const FisherDiagonal& imp,
                                   double threshold) {
    if (!(threshold > 0.0 && threshold <= 1.0))
        throw InputError("rank_for_energy: threshold must be in (0, 1]");
    detail::check_factorize_inputs(w, imp, 1);
    const SvdResult full = svd(scale_rows(imp.to_diagonal(), w));
    double total = 0.0;
    for (double s : full.s) total += s * s;
    if (total <= 0.0) return 1;
    double kept = 0.0;
    for (std::size_t r = 1; r <= full.s.size(); ++r) {
        kept += full.s[r - 1] * full.s[r - 1];
        if (kept / total >= threshold) return r;
    }
    return full.s.size();
}

}  // namespace fairtune
