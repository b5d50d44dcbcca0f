// SPDX-License-Identifier: Apache-2.0
#include "lorafuse/svd.hpp"

#include <algorithm>
#include <cmath>

namespace lorafuse {

namespace {

// One-sided Jacobi: orthogonalize column pairs of an m x n matrix (m >= n)
// until every inner product is negligible. Column norms are then the
// singular values. Columns whose norm falls under the numerical-zero floor
// (eps * ||M||_F) are exact zeros at working precision; rotating against
// them only churns rounding residue, so they are excluded.
std::vector<double> jacobi_onesided(std::vector<double>& a, int m, int n, const SvdOptions& opts) {
    auto col = [&](int j) { return a.data() + static_cast<size_t>(j); };
    auto dot = [&](int p, int q) {
        double acc = 0.0;
        const double* cp = col(p);
        const double* cq = col(q);
        for (int i = 0; i < m; ++i) acc += cp[static_cast<size_t>(i) * n] * cq[static_cast<size_t>(i) * n];
        return acc;
    };

    double scale2 = 0.0;
    for (double v : a) scale2 += v * v;
    constexpr double eps = 2.220446049250313e-16;
    const double floor2 = scale2 * eps * eps;

    bool converged = (n <= 1);
    for (int sweep = 0; sweep < opts.max_sweeps && !converged; ++sweep) {
        converged = true;
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                const double app = dot(p, p);
                const double aqq = dot(q, q);
                if (app <= floor2 || aqq <= floor2) continue;
                const double apq = dot(p, q);
                if (std::abs(apq) <= opts.tol * std::sqrt(app * aqq) || apq == 0.0) continue;
                converged = false;
                const double zeta = (aqq - app) / (2.0 * apq);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                double* cp = col(p);
                double* cq = col(q);
                for (int i = 0; i < m; ++i) {
                    const size_t off = static_cast<size_t>(i) * n;
                    const double x = cp[off];
                    const double y = cq[off];
                    cp[off] = c * x - s * y;
                    cq[off] = s * x + c * y;
                }
            }
        }
    }
    if (!converged) throw svd_error("svdvals: one-sided Jacobi failed to converge within sweep cap");

    std::vector<double> sv(static_cast<size_t>(n));
    for (int j = 0; j < n; ++j) sv[static_cast<size_t>(j)] = std::sqrt(dot(j, j));
    std::sort(sv.begin(), sv.end(), std::greater<double>());
    return sv;
}

std::vector<double> svdvals_impl(const double* src, int rows, int cols, const SvdOptions& opts) {
    if (rows == 0 || cols == 0) return {};
    // Keep rows >= cols so the pair loop runs over the short dimension.
    const bool flip = rows < cols;
    const int m = flip ? cols : rows;
    const int n = flip ? rows : cols;
    std::vector<double> work(static_cast<size_t>(m) * n);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) {
            const double v = src[static_cast<size_t>(i) * cols + j];
            if (flip)
                work[static_cast<size_t>(j) * n + i] = v;
            else
                work[static_cast<size_t>(i) * n + j] = v;
        }
    return jacobi_onesided(work, m, n, opts);
}

}  // namespace

std::vector<double> svdvals(const Mat<double>& m, const SvdOptions& opts) {
    return svdvals_impl(m.data.data(), m.rows, m.cols, opts);
}

std::vector<double> svdvals(const Mat<float>& m, const SvdOptions& opts) {
    std::vector<double> wide(m.data.begin(), m.data.end());
    return svdvals_impl(wide.data(), m.rows, m.cols, opts);
}

double spectral_norm(const Mat<double>& m) {
    auto sv = svdvals(m);
    return sv.empty() ? 0.0 : sv.front();
}

double spectral_norm(const Mat<float>& m) {
    auto sv = svdvals(m);
    return sv.empty() ? 0.0 : sv.front();
}

}  // namespace lorafuse
