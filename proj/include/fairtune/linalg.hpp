#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "fairtune/errors.hpp"

namespace fairtune {

// ============================================================================
// Dense matrix
// ============================================================================

/// Row-major dense matrix of doubles. Immutable by convention once it leaves
/// a public operation; all entries are kept finite.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    double& operator()(std::size_t i, std::size_t j) {
        return data[i * cols + j];
    }
    double operator()(std::size_t i, std::size_t j) const {
        return data[i * cols + j];
    }

    bool same_shape(const Matrix& o) const {
        return rows == o.rows && cols == o.cols;
    }
};

/// Diagonal matrix stored as its diagonal vector.
struct DiagonalMatrix {
    std::size_t dim = 0;
    std::vector<double> diag;

    DiagonalMatrix() = default;
    explicit DiagonalMatrix(std::vector<double> d)
        : dim(d.size()), diag(std::move(d)) {}
    static DiagonalMatrix identity(std::size_t n) {
        return DiagonalMatrix(std::vector<double>(n, 1.0));
    }
};

inline void ensure_finite(const Matrix& m, const std::string& context) {
    for (double v : m.data) {
        if (!std::isfinite(v))
            throw NumericalError(context + ": non-finite entry");
    }
}

inline Matrix transpose(const Matrix& m) {
    Matrix t(m.cols, m.rows);
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = 0; j < m.cols; ++j) t(j, i) = m(i, j);
    return t;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows)
        throw ShapeError("matmul: " + std::to_string(a.rows) + "x" +
                         std::to_string(a.cols) + " * " +
                         std::to_string(b.rows) + "x" +
                         std::to_string(b.cols));
    Matrix c(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < b.cols; ++j)
                c(i, j) += aik * b(k, j);
        }
    }
    ensure_finite(c, "matmul");
    return c;
}

/// Left-multiplication by a diagonal: row i of m scaled by d.diag[i].
inline Matrix scale_rows(const DiagonalMatrix& d, const Matrix& m) {
    if (d.dim != m.rows)
        throw ShapeError("scale_rows: diagonal dim " + std::to_string(d.dim) +
                         " vs " + std::to_string(m.rows) + " rows");
    Matrix out = m;
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = 0; j < m.cols; ++j) out(i, j) *= d.diag[i];
    ensure_finite(out, "scale_rows");
    return out;
}

inline Matrix to_dense(const DiagonalMatrix& d) {
    Matrix m(d.dim, d.dim);
    for (std::size_t i = 0; i < d.dim; ++i) m(i, i) = d.diag[i];
    return m;
}

inline Matrix subtract(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw ShapeError("subtract: shape mismatch");
    Matrix c = a;
    for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] -= b.data[i];
    return c;
}

inline double frobenius_norm(const Matrix& m) {
    double s = 0.0;
    for (double v : m.data) s += v * v;
    return std::sqrt(s);
}

// ============================================================================
// Singular value decomposition
// ============================================================================

/// Thin SVD: m = u * diag(s) * v^T with u (rows x p), v (cols x p),
/// p = min(rows, cols), s sorted descending.
struct SvdResult {
    Matrix u;
    std::vector<double> s;
    Matrix v;
};

namespace detail {

inline double col_dot(const Matrix& m, std::size_t p, std::size_t q) {
    double s = 0.0;
    for (std::size_t i = 0; i < m.rows; ++i) s += m(i, p) * m(i, q);
    return s;
}

/// Fill column j of u with a unit vector orthogonal to columns [0, j).
/// Candidates are the standard basis vectors in order, so the completion is
/// deterministic.
inline void complete_column(Matrix& u, std::size_t j) {
    for (std::size_t cand = 0; cand < u.rows; ++cand) {
        std::vector<double> w(u.rows, 0.0);
        w[cand] = 1.0;
        for (std::size_t k = 0; k < j; ++k) {
            double d = 0.0;
            for (std::size_t i = 0; i < u.rows; ++i) d += w[i] * u(i, k);
            for (std::size_t i = 0; i < u.rows; ++i) w[i] -= d * u(i, k);
        }
        double nrm = 0.0;
        for (double x : w) nrm += x * x;
        nrm = std::sqrt(nrm);
        if (nrm > 0.5) {  // candidate not (nearly) in the span already
            for (std::size_t i = 0; i < u.rows; ++i) u(i, j) = w[i] / nrm;
            return;
        }
    }
    throw NumericalError("svd: failed to complete orthonormal basis");
}

}  // namespace detail

/// One-sided Jacobi SVD. Works on the taller orientation (transposes when
/// rows < cols), sweeps column pairs until every off-diagonal inner product
/// is below 1e-12 relative to the column norms.
///
/// Conventions: singular values descending (ties keep column order); the
/// largest-magnitude entry of each u column is non-negative, with v adjusted
/// to match, so factorizations are reproducible.
inline SvdResult svd(const Matrix& m) {
    if (m.rows == 0 || m.cols == 0)
        throw InputError("svd: matrix must have at least one row and column");
    ensure_finite(m, "svd input");

    const bool transposed = m.rows < m.cols;
    Matrix a = transposed ? transpose(m) : m;
    const std::size_t n = a.cols;  // a.rows >= n

    Matrix v = Matrix::identity(n);

    constexpr double kTol = 1e-12;
    constexpr int kMaxSweeps = 100;
    bool converged = false;
    int sweep = 0;
    for (; sweep < kMaxSweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double app = detail::col_dot(a, p, p);
                const double aqq = detail::col_dot(a, q, q);
                const double apq = detail::col_dot(a, p, q);
                if (std::abs(apq) <= kTol * std::sqrt(app * aqq)) continue;
                rotated = true;
                const double zeta = (aqq - app) / (2.0 * apq);
                const double t =
                    (zeta >= 0 ? 1.0 : -1.0) /
                    (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < a.rows; ++i) {
                    const double aip = a(i, p), aiq = a(i, q);
                    a(i, p) = c * aip - s * aiq;
                    a(i, q) = s * aip + c * aiq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double vip = v(i, p), viq = v(i, q);
                    v(i, p) = c * vip - s * viq;
                    v(i, q) = s * vip + c * viq;
                }
            }
        }
        if (!rotated) {
            converged = true;
            break;
        }
    }
    if (!converged)
        throw NumericalError("svd: no convergence after " +
                                 std::to_string(kMaxSweeps) + " sweeps",
                             kMaxSweeps);

    // Column norms are the singular values.
    std::vector<double> sv(n);
    for (std::size_t j = 0; j < n; ++j)
        sv[j] = std::sqrt(detail::col_dot(a, j, j));

    // Descending order, stable so equal values keep their column order.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t i, std::size_t j) { return sv[i] > sv[j]; });

    Matrix u_out(a.rows, n);
    Matrix v_out(n, n);
    std::vector<double> s_out(n);
    const double s_max = sv[order[0]];
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t src = order[j];
        s_out[j] = sv[src];
        for (std::size_t i = 0; i < n; ++i) v_out(i, j) = v(i, src);
        if (sv[src] > 0.0 && sv[src] > s_max * 1e-300) {
            for (std::size_t i = 0; i < a.rows; ++i)
                u_out(i, j) = a(i, src) / sv[src];
        } else {
            s_out[j] = 0.0;
            detail::complete_column(u_out, j);
        }
    }

    // Sign convention: largest-magnitude entry of each u column >= 0.
    for (std::size_t j = 0; j < n; ++j) {
        std::size_t arg = 0;
        double best = 0.0;
        for (std::size_t i = 0; i < u_out.rows; ++i) {
            if (std::abs(u_out(i, j)) > best) {
                best = std::abs(u_out(i, j));
                arg = i;
            }
        }
        if (u_out(arg, j) < 0.0) {
            for (std::size_t i = 0; i < u_out.rows; ++i) u_out(i, j) = -u_out(i, j);
            for (std::size_t i = 0; i < n; ++i) v_out(i, j) = -v_out(i, j);
        }
    }

    SvdResult res;
    if (transposed) {
        res.u = std::move(v_out);
        res.v = std::move(u_out);
    } else {
        res.u = std::move(u_out);
        res.v = std::move(v_out);
    }
    res.s = std::move(s_out);
    ensure_finite(res.u, "svd u");
    ensure_finite(res.v, "svd v");
    return res;
}

/// Keep the first r singular triplets.
inline SvdResult truncate(const SvdResult& in, std::size_t r) {
    const std::size_t p = in.s.size();
    if (r < 1 || r > p)
        throw RankError("truncate: rank " + std::to_string(r) +
                        " outside [1, " + std::to_string(p) + "]");
    SvdResult out;
    out.s.assign(in.s.begin(), in.s.begin() + static_cast<std::ptrdiff_t>(r));
    out.u = Matrix(in.u.rows, r);
    out.v = Matrix(in.v.rows, r);
    for (std::size_t i = 0; i < in.u.rows; ++i)
        for (std::size_t j = 0; j < r; ++j) out.u(i, j) = in.u(i, j);
    for (std::size_t i = 0; i < in.v.rows; ++i)
        for (std::size_t j = 0; j < r; ++j) out.v(i, j) = in.v(i, j);
    return out;
}

/// u * diag(s) * v^T.
inline Matrix reconstruct(const SvdResult& f) {
    Matrix us = f.u;
    for (std::size_t i = 0; i < us.rows; ++i)
        for (std::size_t j = 0; j < us.cols; ++j) us(i, j) *= f.s[j];
    return matmul(us, transpose(f.v));
}

}  // namespace fairtune
