// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "lorafuse/mat.hpp"

namespace lorafuse {

struct SvdOptions {
    double tol = 1e-12;
    int max_sweeps = 100;
};

/// Singular values of a general matrix, descending, computed by one-sided
/// Jacobi in 64-bit accumulation. Throws svd_error if the sweep cap is hit
/// before the off-diagonal mass falls under tol.
std::vector<double> svdvals(const Mat<double>& m, const SvdOptions& opts = {});
std::vector<double> svdvals(const Mat<float>& m, const SvdOptions& opts = {});

/// Largest singular value (operator 2-norm); 0 for an empty matrix.
double spectral_norm(const Mat<double>& m);
double spectral_norm(const Mat<float>& m);

struct svd_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace lorafuse
