// SPDX-License-Identifier: Apache-2.0
#include "lorafuse/hypernet.hpp"

namespace lorafuse {

LoraPair apply_patch(const LoraPair& pair, const Mat<double>& delta_b, double alpha) {
    if (delta_b.rows != pair.B.rows || delta_b.cols != pair.B.cols)
        throw hypernet_error("apply_patch: delta shape does not match B");
    LoraPair out = pair;
    for (size_t i = 0; i < out.B.data.size(); ++i)
        out.B.data[i] = static_cast<float>(static_cast<double>(pair.B.data[i]) + alpha * delta_b.data[i]);
    return out;
}

StabilityBound stability_bound(const Mat<double>& b, const Mat<double>& a, const Mat<double>& delta_b, double alpha) {
    if (delta_b.rows != b.rows || delta_b.cols != b.cols)
        throw hypernet_error("stability_bound: delta shape does not match B");
    if (b.cols != a.rows) throw hypernet_error("stability_bound: rank dimensions differ");

    Mat<double> patched = b;
    for (size_t i = 0; i < patched.data.size(); ++i) patched.data[i] += alpha * delta_b.data[i];
    Mat<double> diff = matmul(patched, a);
    const Mat<double> base = matmul(b, a);
    for (size_t i = 0; i < diff.data.size(); ++i) diff.data[i] -= base.data[i];

    StabilityBound out;
    out.lhs = fro_norm(diff);
    out.frob_identity = std::abs(alpha) * fro_norm(matmul(delta_b, a));
    out.bound = std::abs(alpha) * fro_norm(delta_b) * spectral_norm(a);
    return out;
}

StabilityBound stability_bound(const LoraPair& pair, const Mat<double>& delta_b, double alpha) {
    return stability_bound(mat_cast<double>(pair.B), mat_cast<double>(pair.A), delta_b, alpha);
}

}  // namespace lorafuse
