#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fairtune/errors.hpp"
#include "fairtune/linalg.hpp"
#include "fairtune/rng.hpp"

namespace fairtune {

// ============================================================================
// Core data model
// ============================================================================

/// Tabular classification dataset. Labels are -1/+1, the sensitive attribute
/// is 1/2, features are standardized columns.
struct Dataset {
    Matrix x;
    std::vector<int> y;  // values in {-1, +1}
    std::vector<int> s;  // values in {1, 2}
    std::string name;

    std::size_t size() const { return x.rows; }
};

struct SplitSpec {
    double train_fraction = 0.6;
    double validation_fraction = 0.2;
    double test_fraction = 0.2;
    std::uint64_t seed = 0;
};

/// Column roles for CSV ingestion. Label and sensitive values must match one
/// of the two declared strings; rows containing missing_token in any used
/// column are dropped.
struct ColumnSchema {
    std::string label_column;
    std::string label_positive;
    std::string label_negative;
    std::string sensitive_column;
    std::string sensitive_privileged;  // mapped to s = 1
    std::string sensitive_protected;   // mapped to s = 2
    std::vector<std::string> numeric_columns;
    std::vector<std::string> categorical_columns;
    std::string missing_token = "?";
};

// ============================================================================
// Standardization helpers
// ============================================================================

struct ColumnStats {
    std::vector<double> mean;
    std::vector<double> stddev;  // population; 0 marks a constant column
};

inline ColumnStats column_stats(const Matrix& x) {
    ColumnStats st;
    st.mean.assign(x.cols, 0.0);
    st.stddev.assign(x.cols, 0.0);
    if (x.rows == 0) return st;
    for (std::size_t j = 0; j < x.cols; ++j) {
        double m = 0.0;
        for (std::size_t i = 0; i < x.rows; ++i) m += x(i, j);
        m /= static_cast<double>(x.rows);
        double v = 0.0;
        for (std::size_t i = 0; i < x.rows; ++i) {
            const double d = x(i, j) - m;
            v += d * d;
        }
        st.mean[j] = m;
        st.stddev[j] = std::sqrt(v / static_cast<double>(x.rows));
    }
    return st;
}

/// Center every column; scale by 1/std unless the column is constant.
inline void apply_standardization(Matrix& x, const ColumnStats& st) {
    for (std::size_t j = 0; j < x.cols; ++j) {
        const double m = st.mean[j];
        const double sd = st.stddev[j] > 1e-12 ? st.stddev[j] : 1.0;
        for (std::size_t i = 0; i < x.rows; ++i)
            x(i, j) = (x(i, j) - m) / sd;
    }
}

// ============================================================================
// CSV ingestion
// ============================================================================

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
    if (!line.empty() && line.back() == ',') out.push_back("");
    return out;
}

}  // namespace detail

/// Load a comma-separated file (header row required). Categoricals are
/// one-hot encoded with levels in lexicographic order, categorical blocks
/// first (schema order) followed by numeric columns; all feature columns are
/// then standardized with the file's own statistics.
inline Dataset load_csv(const std::string& path, const ColumnSchema& schema) {
    std::ifstream in(path);
    if (!in) throw FileError("load_csv: cannot open " + path);

    std::string header_line;
    if (!std::getline(in, header_line))
        throw DataError("load_csv: empty file " + path);
    const auto header = detail::split_line(header_line);

    auto col_index = [&](const std::string& name) -> std::size_t {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return i;
        throw DataError("load_csv: column '" + name + "' not found in " + path);
    };

    const std::size_t label_idx = col_index(schema.label_column);
    const std::size_t sens_idx = col_index(schema.sensitive_column);
    std::vector<std::size_t> num_idx, cat_idx;
    for (const auto& c : schema.numeric_columns) num_idx.push_back(col_index(c));
    for (const auto& c : schema.categorical_columns)
        cat_idx.push_back(col_index(c));

    std::vector<int> y, s;
    std::vector<std::vector<double>> numerics;   // per row
    std::vector<std::vector<std::string>> cats;  // per row
    std::string line;
    std::size_t row_no = 1;  // header was row 1
    while (std::getline(in, line)) {
        ++row_no;
        if (detail::trim(line).empty()) continue;
        const auto cells = detail::split_line(line);
        if (cells.size() != header.size())
            throw DataError("load_csv: row " + std::to_string(row_no) +
                            " has " + std::to_string(cells.size()) +
                            " cells, expected " +
                            std::to_string(header.size()));

        bool missing = false;
        auto is_missing = [&](std::size_t idx) {
            return cells[idx] == schema.missing_token;
        };
        if (is_missing(label_idx) || is_missing(sens_idx)) missing = true;
        for (auto i : num_idx) missing = missing || is_missing(i);
        for (auto i : cat_idx) missing = missing || is_missing(i);
        if (missing) continue;

        const std::string& lv = cells[label_idx];
        if (lv == schema.label_positive)
            y.push_back(+1);
        else if (lv == schema.label_negative)
            y.push_back(-1);
        else
            throw DataError("load_csv: row " + std::to_string(row_no) +
                            ": unmappable label value '" + lv + "'");

        const std::string& sv = cells[sens_idx];
        if (sv == schema.sensitive_privileged)
            s.push_back(1);
        else if (sv == schema.sensitive_protected)
            s.push_back(2);
        else
            throw DataError("load_csv: row " + std::to_string(row_no) +
                            ": unmappable sensitive value '" + sv + "'");

        std::vector<double> nums;
        for (auto i : num_idx) {
            try {
                nums.push_back(std::stod(cells[i]));
            } catch (const std::exception&) {
                throw DataError("load_csv: row " + std::to_string(row_no) +
                                ": non-numeric value '" + cells[i] +
                                "' in column '" + header[i] + "'");
            }
        }
        numerics.push_back(std::move(nums));
        std::vector<std::string> cs;
        for (auto i : cat_idx) cs.push_back(cells[i]);
        cats.push_back(std::move(cs));
    }
    if (y.empty()) throw DataError("load_csv: no usable rows in " + path);

    // Discover categorical levels (sorted for a stable column order).
    std::vector<std::vector<std::string>> levels(cat_idx.size());
    for (std::size_t c = 0; c < cat_idx.size(); ++c) {
        std::set<std::string> uniq;
        for (const auto& row : cats) uniq.insert(row[c]);
        levels[c].assign(uniq.begin(), uniq.end());
    }

    std::size_t width = num_idx.size();
    for (const auto& lv : levels) width += lv.size();

    Dataset ds;
    ds.x = Matrix(y.size(), width);
    for (std::size_t i = 0; i < y.size(); ++i) {
        std::size_t j = 0;
        for (std::size_t c = 0; c < cat_idx.size(); ++c) {
            const auto& lv = levels[c];
            const auto it =
                std::lower_bound(lv.begin(), lv.end(), cats[i][c]);
            ds.x(i, j + static_cast<std::size_t>(it - lv.begin())) = 1.0;
            j += lv.size();
        }
        for (std::size_t c = 0; c < num_idx.size(); ++c)
            ds.x(i, j + c) = numerics[i][c];
    }
    ds.y = std::move(y);
    ds.s = std::move(s);
    ds.name = path;
    apply_standardization(ds.x, column_stats(ds.x));
    ensure_finite(ds.x, "load_csv");
    return ds;
}

// ============================================================================
// Synthetic biased data
// ============================================================================

namespace detail {

inline double normal_cdf(double x) {
    return 0.5 * std::erfc(-x / std::sqrt(2.0));
}

inline double normal_quantile(double p) {
    p = std::min(std::max(p, 1e-12), 1.0 - 1e-12);
    double lo = -12.0, hi = 12.0;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (normal_cdf(mid) < p)
            lo = mid;
        else
            hi = mid;
    }
    return 0.5 * (lo + hi);
}

}  // namespace detail

/// Deterministic biased-data fixture. Balanced sensitive groups. The label is
/// a group-blind function of the signal features, but the signal features
/// themselves have group-shifted means calibrated so corr(s, y) ~
/// bias_strength: group 2 sits higher on the label-relevant coordinates, so
/// the base-rate gap flows through the feature geometry rather than through a
/// group intercept the model could reconstruct. For d >= 5 two coordinates
/// carry label signal for one group only (with asymmetric gains), and for
/// d >= 7 the last two coordinates are pure group proxies with no effect on
/// the label, built participation-style: near-zero for one group, active with
/// large mean and spread for the other (one proxy per group). Weight a model
/// places on them is avoidable bias, and because their second moments differ
/// sharply across groups, the per-group weight importances genuinely
/// diverge.
inline Dataset synth_biased(std::size_t n, std::size_t d, double bias_strength,
                            std::uint64_t seed) {
    if (n < 40) throw InputError("synth_biased: n must be >= 40");
    if (d < 2) throw InputError("synth_biased: d must be >= 2");
    if (bias_strength < 0.0 || bias_strength > 1.0)
        throw InputError("synth_biased: bias_strength must be in [0, 1]");

    const std::size_t n_shared = std::min<std::size_t>(3, d);
    const bool has_gates = d >= 5;
    const bool has_markers = d >= 7;
    const double g_shared = 0.9;
    const double g_gate1 = 1.2;   // group-1 gate is strong,
    const double g_gate2 = 0.6;   // the group-2 gate deliberately weaker
    const double marker_mean = 2.0;   // active-state mean of a group proxy
    const double marker_quiet = 0.2;  // sd of the quiet state (active sd = 1)
    const double noise_sd = 0.5;

    // Solve for the per-coordinate mean shift delta so that the group gap in
    // P(y = +1) matches the target correlation: the score is Gaussian within
    // each group with sd sigma_g, mean +/- delta * sum(shared gains).
    const double shared_gain_sum = static_cast<double>(n_shared) * g_shared;
    const double gate_var =
        has_gates ? 0.5 * (g_gate1 * g_gate1 + g_gate2 * g_gate2) : 0.0;
    const double score_sd =
        std::sqrt(static_cast<double>(n_shared) * g_shared * g_shared +
                  gate_var + noise_sd * noise_sd);
    const double delta = shared_gain_sum <= 0.0
                             ? 0.0
                             : score_sd *
                                   detail::normal_quantile(
                                       0.5 * (1.0 + bias_strength)) /
                                   shared_gain_sum;

    Rng rng(seed);
    Dataset ds;
    ds.x = Matrix(n, d);
    ds.y.resize(n);
    ds.s.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int s_sign = rng.uniform() < 0.5 ? +1 : -1;
        ds.s[i] = s_sign > 0 ? 1 : 2;
        const double group_dir = s_sign > 0 ? -1.0 : +1.0;  // s = 2 favoured
        for (std::size_t j = 0; j < d; ++j) ds.x(i, j) = rng.normal();
        for (std::size_t j = 0; j < n_shared; ++j)
            ds.x(i, j) += delta * group_dir;
        if (has_markers) {
            // One participation proxy per group: quiet (small noise around
            // zero) unless the sample belongs to the proxy's group.
            ds.x(i, d - 2) = ds.s[i] == 2 ? marker_mean + ds.x(i, d - 2)
                                          : marker_quiet * ds.x(i, d - 2);
            ds.x(i, d - 1) = ds.s[i] == 1
                                 ? 0.75 * marker_mean + ds.x(i, d - 1)
                                 : marker_quiet * ds.x(i, d - 1);
        }
        double score = 0.0;
        for (std::size_t j = 0; j < n_shared; ++j) score += g_shared * ds.x(i, j);
        if (has_gates) {
            if (s_sign > 0)
                score += g_gate1 * ds.x(i, n_shared);
            else
                score += g_gate2 * ds.x(i, n_shared + 1);
        }
        score += noise_sd * rng.normal();
        ds.y[i] = score >= 0.0 ? +1 : -1;
    }
    apply_standardization(ds.x, column_stats(ds.x));
    ds.name = "synth(n=" + std::to_string(n) + ",d=" + std::to_string(d) +
              ",bias=" + std::to_string(bias_strength) +
              ",seed=" + std::to_string(seed) + ")";
    return ds;
}

// ============================================================================
// Splitting and group views
// ============================================================================

struct Splits {
    Dataset train;
    Dataset validation;
    Dataset test;
};

namespace detail {

inline Dataset take_rows(const Dataset& ds, const std::vector<std::size_t>& idx,
                         const std::string& suffix) {
    Dataset out;
    out.x = Matrix(idx.size(), ds.x.cols);
    out.y.reserve(idx.size());
    out.s.reserve(idx.size());
    for (std::size_t r = 0; r < idx.size(); ++r) {
        for (std::size_t j = 0; j < ds.x.cols; ++j)
            out.x(r, j) = ds.x(idx[r], j);
        out.y.push_back(ds.y[idx[r]]);
        out.s.push_back(ds.s[idx[r]]);
    }
    out.name = ds.name + suffix;
    return out;
}

inline void check_groups_present(const Dataset& ds, const std::string& which) {
    bool g1 = false, g2 = false;
    for (int v : ds.s) {
        g1 = g1 || v == 1;
        g2 = g2 || v == 2;
    }
    if (!g1 || !g2)
        throw StratificationError("split: " + which +
                                  " split is missing a sensitive group");
}

}  // namespace detail

/// Stratified (by label and group jointly) three-way split. Deterministic
/// given the seed. All three outputs are re-standardized with the training
/// split's column statistics.
inline Splits split(const Dataset& ds, const SplitSpec& spec) {
    const double sum = spec.train_fraction + spec.validation_fraction +
                       spec.test_fraction;
    if (spec.train_fraction <= 0 || spec.validation_fraction <= 0 ||
        spec.test_fraction <= 0 || std::abs(sum - 1.0) > 1e-9)
        throw InputError("split: fractions must be positive and sum to 1");

    // Strata in a fixed order; one shared rng keeps the procedure pinned.
    std::vector<std::size_t> parts[3];
    Rng rng(spec.seed);
    for (int yv : {-1, +1}) {
        for (int sv : {1, 2}) {
            std::vector<std::size_t> idx;
            for (std::size_t i = 0; i < ds.size(); ++i)
                if (ds.y[i] == yv && ds.s[i] == sv) idx.push_back(i);
            rng.shuffle(idx);

            const double fr[3] = {spec.train_fraction, spec.validation_fraction,
                                  spec.test_fraction};
            const double n = static_cast<double>(idx.size());
            std::size_t base[3];
            double rem[3];
            std::size_t used = 0;
            for (int k = 0; k < 3; ++k) {
                const double share = fr[k] * n;
                base[k] = static_cast<std::size_t>(std::floor(share));
                rem[k] = share - static_cast<double>(base[k]);
                used += base[k];
            }
            // Largest remainder; ties go to the earlier split.
            std::size_t leftover = idx.size() - used;
            while (leftover-- > 0) {
                int arg = 0;
                for (int k = 1; k < 3; ++k)
                    if (rem[k] > rem[arg]) arg = k;
                ++base[arg];
                rem[arg] = -1.0;
            }
            std::size_t pos = 0;
            for (int k = 0; k < 3; ++k)
                for (std::size_t c = 0; c < base[k]; ++c)
                    parts[k].push_back(idx[pos++]);
        }
    }
    for (auto& p : parts) std::sort(p.begin(), p.end());

    Splits out{detail::take_rows(ds, parts[0], "/train"),
               detail::take_rows(ds, parts[1], "/validation"),
               detail::take_rows(ds, parts[2], "/test")};
    if (out.train.size() == 0 || out.validation.size() == 0 ||
        out.test.size() == 0)
        throw StratificationError("split: a split is empty");
    detail::check_groups_present(out.train, "train");
    detail::check_groups_present(out.validation, "validation");
    detail::check_groups_present(out.test, "test");

    const auto stats = column_stats(out.train.x);
    apply_standardization(out.train.x, stats);
    apply_standardization(out.validation.x, stats);
    apply_standardization(out.test.x, stats);
    return out;
}

/// Two-way stratified partition (pretraining data vs new task), same
/// mechanics as split() but without re-standardization.
inline std::pair<Dataset, Dataset> partition(const Dataset& ds,
                                             double first_fraction,
                                             std::uint64_t seed) {
    if (first_fraction <= 0.0 || first_fraction >= 1.0)
        throw InputError("partition: fraction must be in (0, 1)");
    std::vector<std::size_t> a, b;
    Rng rng(seed);
    for (int yv : {-1, +1}) {
        for (int sv : {1, 2}) {
            std::vector<std::size_t> idx;
            for (std::size_t i = 0; i < ds.size(); ++i)
                if (ds.y[i] == yv && ds.s[i] == sv) idx.push_back(i);
            rng.shuffle(idx);
            const std::size_t na = static_cast<std::size_t>(
                std::llround(first_fraction * static_cast<double>(idx.size())));
            for (std::size_t i = 0; i < idx.size(); ++i)
                (i < na ? a : b).push_back(idx[i]);
        }
    }
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    auto da = detail::take_rows(ds, a, "/part1");
    auto db = detail::take_rows(ds, b, "/part2");
    detail::check_groups_present(da, "first");
    detail::check_groups_present(db, "second");
    return {std::move(da), std::move(db)};
}

/// Rows with the given sensitive value, order preserved.
inline Dataset group_subset(const Dataset& ds, int s_value) {
    if (s_value != 1 && s_value != 2)
        throw InputError("group_subset: sensitive value must be 1 or 2");
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < ds.size(); ++i)
        if (ds.s[i] == s_value) idx.push_back(i);
    if (idx.empty())
        throw GroupEmptyError("group_subset: no rows with s = " +
                              std::to_string(s_value));
    return detail::take_rows(ds, idx, "/s=" + std::to_string(s_value));
}

}  // namespace fairtune
