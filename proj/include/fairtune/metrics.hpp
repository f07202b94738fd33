#pragma once

#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fairtune/data.hpp"
#include "fairtune/errors.hpp"
#include "fairtune/linalg.hpp"
#include "fairtune/model.hpp"

namespace fairtune {

// ============================================================================
// Predictions
// ============================================================================

/// argmax over the two logits mapped to {-1, +1}; ties go to -1.
inline std::vector<int> predictions_from_logits(const Matrix& logits) {
    if (logits.cols != 2)
        throw ShapeError("predictions_from_logits: expected 2 logits");
    std::vector<int> preds(logits.rows);
    for (std::size_t i = 0; i < logits.rows; ++i)
        preds[i] = logits(i, 1) > logits(i, 0) ? +1 : -1;
    return preds;
}

inline std::vector<int> predict(const NeuralNet& net, const Dataset& ds) {
    return predictions_from_logits(forward(net, ds.x).logits);
}

// ============================================================================
// Contingency counts and gap metrics
// ============================================================================

/// counts[group-1][y][yhat] with y, yhat encoded as 0 for -1 and 1 for +1.
struct GroupCounts {
    std::array<std::array<std::array<std::size_t, 2>, 2>, 2> counts{};

    std::size_t n(int s, int y, int yhat) const {
        return counts[s - 1][y > 0 ? 1 : 0][yhat > 0 ? 1 : 0];
    }
    std::size_t group_total(int s) const {
        const auto& g = counts[s - 1];
        return g[0][0] + g[0][1] + g[1][0] + g[1][1];
    }
    std::size_t label_total(int s, int y) const {
        const auto& r = counts[s - 1][y > 0 ? 1 : 0];
        return r[0] + r[1];
    }
};

inline GroupCounts contingency_counts(const std::vector<int>& preds,
                                      const Dataset& ds) {
    if (preds.size() != ds.size())
        throw ShapeError("contingency_counts: prediction count mismatch");
    GroupCounts gc;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        if (ds.s[i] != 1 && ds.s[i] != 2)
            throw InputError("contingency_counts: sensitive value not in "
                             "{1, 2}");
        ++gc.counts[ds.s[i] - 1][ds.y[i] > 0 ? 1 : 0][preds[i] > 0 ? 1 : 0];
    }
    return gc;
}

/// |P(yhat=+1 | s=1) - P(yhat=+1 | s=2)|.
inline double demographic_parity_gap(const std::vector<int>& preds,
                                     const Dataset& ds) {
    const GroupCounts gc = contingency_counts(preds, ds);
    for (int s : {1, 2})
        if (gc.group_total(s) == 0)
            throw GroupEmptyError("demographic_parity_gap: group " +
                                  std::to_string(s) + " absent");
    const double r1 = static_cast<double>(gc.n(1, -1, +1) + gc.n(1, +1, +1)) /
                      static_cast<double>(gc.group_total(1));
    const double r2 = static_cast<double>(gc.n(2, -1, +1) + gc.n(2, +1, +1)) /
                      static_cast<double>(gc.group_total(2));
    return std::abs(r1 - r2);
}

struct OddsGaps {
    double delta_tpr = 0.0;
    double delta_fpr = 0.0;
    double delta_eo = 0.0;  // always delta_tpr + delta_fpr
};

inline OddsGaps equalized_odds_gap(const std::vector<int>& preds,
                                   const Dataset& ds) {
    const GroupCounts gc = contingency_counts(preds, ds);
    for (int s : {1, 2})
        for (int y : {-1, +1})
            if (gc.label_total(s, y) == 0)
                throw DegenerateCellError(
                    "equalized_odds_gap: empty cell (group " +
                    std::to_string(s) + ", y=" + (y > 0 ? "+1" : "-1") + ")");
    auto positive_rate = [&](int s, int y) {
        return static_cast<double>(gc.n(s, y, +1)) /
               static_cast<double>(gc.label_total(s, y));
    };
    OddsGaps g;
    g.delta_tpr = std::abs(positive_rate(1, +1) - positive_rate(2, +1));
    g.delta_fpr = std::abs(positive_rate(1, -1) - positive_rate(2, -1));
    g.delta_eo = g.delta_tpr + g.delta_fpr;
    return g;
}

/// Support-weighted two-class F1 and Err = 100·(1 − F1). Per-class F1 with an
/// empty precision or recall denominator counts as 0.
inline std::pair<double, double> weighted_f1_err(const std::vector<int>& preds,
                                                 const Dataset& ds) {
    if (preds.size() != ds.size())
        throw ShapeError("weighted_f1_err: prediction count mismatch");
    if (ds.size() == 0) throw InputError("weighted_f1_err: empty dataset");
    double f1_weighted = 0.0;
    for (int cls : {-1, +1}) {
        std::size_t tp = 0, fp = 0, fn = 0, support = 0;
        for (std::size_t i = 0; i < ds.size(); ++i) {
            const bool truth = ds.y[i] == cls;
            const bool claimed = preds[i] == cls;
            support += truth ? 1 : 0;
            if (truth && claimed) ++tp;
            if (!truth && claimed) ++fp;
            if (truth && !claimed) ++fn;
        }
        // F1 = 2tp / (2tp + fp + fn); zero denominator -> 0
        const double denom = static_cast<double>(2 * tp + fp + fn);
        const double f1 = denom > 0.0 ? 2.0 * static_cast<double>(tp) / denom
                                      : 0.0;
        f1_weighted +=
            f1 * static_cast<double>(support) / static_cast<double>(ds.size());
    }
    return {f1_weighted, 100.0 * (1.0 - f1_weighted)};
}

// ============================================================================
// Composite report
// ============================================================================

struct FairnessReport {
    double err_percent = 0.0;
    double f1_weighted = 0.0;
    double delta_dp = 0.0;
    double delta_tpr = 0.0;
    double delta_fpr = 0.0;
    double delta_eo = 0.0;
    GroupCounts group_counts;

    /// Metric value matching a fairness constraint kind.
    double bias_for(FairnessKind kind) const {
        if (kind == FairnessKind::dp) return delta_dp;
        if (kind == FairnessKind::eo) return delta_eo;
        throw InputError("FairnessReport: no bias metric for 'none'");
    }
};

inline FairnessReport evaluate(const NeuralNet& net, const Dataset& ds) {
    const auto preds = predict(net, ds);
    FairnessReport r;
    const auto [f1, err] = weighted_f1_err(preds, ds);
    r.f1_weighted = f1;
    r.err_percent = err;
    r.delta_dp = demographic_parity_gap(preds, ds);
    const OddsGaps odds = equalized_odds_gap(preds, ds);
    r.delta_tpr = odds.delta_tpr;
    r.delta_fpr = odds.delta_fpr;
    r.delta_eo = odds.delta_eo;
    r.group_counts = contingency_counts(preds, ds);
    return r;
}

inline void to_json(nlohmann::json& j, const FairnessReport& r) {
    nlohmann::json counts = nlohmann::json::array();
    for (int s : {1, 2})
        for (int y : {-1, +1})
            for (int yhat : {-1, +1})
                counts.push_back({{"s", s},
                                  {"y", y},
                                  {"yhat", yhat},
                                  {"n", r.group_counts.n(s, y, yhat)}});
    j = nlohmann::json{{"err_percent", r.err_percent},
                       {"f1_weighted", r.f1_weighted},
                       {"delta_dp", r.delta_dp},
                       {"delta_tpr", r.delta_tpr},
                       {"delta_fpr", r.delta_fpr},
                       {"delta_eo", r.delta_eo},
                       {"group_counts", std::move(counts)}};
}

// ============================================================================
// PCA projection of representations
// ============================================================================

/// Mean-centered projection onto the top principal components (SVD based).
inline Matrix pca_project(const Matrix& representations, std::size_t dims) {
    if (representations.rows == 0)
        throw InputError("pca_project: empty matrix");
    if (dims < 1 || dims > representations.cols)
        throw InputError("pca_project: dims outside [1, width]");
    Matrix centered = representations;
    for (std::size_t j = 0; j < centered.cols; ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < centered.rows; ++i) mean += centered(i, j);
        mean /= static_cast<double>(centered.rows);
        for (std::size_t i = 0; i < centered.rows; ++i) centered(i, j) -= mean;
    }
    const SvdResult decomp = svd(centered);
    Matrix v_top(centered.cols, dims);
    for (std::size_t i = 0; i < centered.cols; ++i)
        for (std::size_t j = 0; j < dims; ++j) v_top(i, j) = decomp.v(i, j);
    return matmul(centered, v_top);
}

}  // namespace fairtune
