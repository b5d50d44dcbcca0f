// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <type_traits>
#include <utility>
#include <vector>

#include "lorafuse/context.hpp"
#include "lorafuse/rng.hpp"
#include "lorafuse/tape.hpp"

namespace lorafuse {

/// Row/column view maps: flatten(x) and flatten(x^T) through independent
/// affine projections into the embedding space.
template <class S>
struct ViewProjections {
    Mat<S> row_w;  // (c*r) x d
    Mat<S> row_b;  // 1 x d
    Mat<S> col_w;
    Mat<S> col_b;
};

template <class S>
struct ViewVars {
    Var row_w, row_b, col_w, col_b;
};

/// clip(ReLU(MLP(s) + mu), 0, 1). The output layer starts zeroed so the
/// initial gate is the constant clip(ReLU(mu), 0, 1).
template <class S>
struct GateParams {
    Mat<S> w1;  // s_len x hidden
    Mat<S> b1;  // 1 x hidden
    Mat<S> w2;  // hidden x d
    Mat<S> b2;  // 1 x d
    Mat<S> mu;  // 1 x 1
};

template <class S>
struct GateVars {
    Var w1, b1, w2, b2, mu;
};

struct RdmConfig {
    int n_proj = 2048;
    double mu_target = 0.0;
    double sigma_target = 1.0;
    uint64_t seed = 0;
};

template <class S>
using NoiseDraw = std::function<Mat<S>(int rows, int cols)>;

/// i.i.d. N(mu, sigma^2) sampler with a fixed stream.
template <class S>
NoiseDraw<S> gaussian_noise(uint64_t seed, double mu, double sigma) {
    return [seed, mu, sigma](int rows, int cols) {
        Rng rng(seed);
        Mat<S> m(rows, cols);
        for (auto& v : m.data) v = static_cast<S>(mu + sigma * rng.normal());
        return m;
    };
}

/// Projection bank: n_proj rows drawn i.i.d. standard normal, each normalized
/// to unit Euclidean length. Deterministic in (seed, n_proj, d).
template <class S>
Mat<S> make_projection_bank(int n_proj, int d, uint64_t seed) {
    Rng rng(seed);
    Mat<S> bank(n_proj, d);
    for (int i = 0; i < n_proj; ++i) {
        double norm2 = 0.0;
        for (int j = 0; j < d; ++j) {
            const double v = rng.normal();
            bank(i, j) = static_cast<S>(v);
            norm2 += v * v;
        }
        const double norm = std::sqrt(norm2);
        if (norm > 0.0)
            for (int j = 0; j < d; ++j) bank(i, j) = static_cast<S>(static_cast<double>(bank(i, j)) / norm);
        else
            bank(i, 0) = S(1);
    }
    return bank;
}

template <class S>
Mat<S> flatten_row_major(const Mat<float>& m) {
    Mat<S> out(1, m.rows * m.cols);
    for (size_t i = 0; i < m.data.size(); ++i) out.data[i] = static_cast<S>(m.data[i]);
    return out;
}

/// f_row = P_row(flatten(x)), f_col = P_col(flatten(x^T)).
template <class S>
std::pair<Var, Var> view_features(Tape<S>& t, const BlockToken& token, const ViewVars<S>& views) {
    Var x_row = t.input(flatten_row_major<S>(token.data));
    Var x_col = t.input(flatten_row_major<S>(transpose(token.data)));
    Var f_row = t.add_rowvec(t.matmul(x_row, views.row_w), views.row_b);
    Var f_col = t.add_rowvec(t.matmul(x_col, views.col_w), views.col_b);
    return {f_row, f_col};
}

template <class S>
Var gate_values(Tape<S>& t, const SvdDescriptor& desc, const GateVars<S>& gate) {
    Mat<S> s(1, static_cast<int>(desc.values.size()));
    for (size_t i = 0; i < desc.values.size(); ++i) s.data[i] = static_cast<S>(desc.values[i]);
    Var sv = t.input(std::move(s));
    Var hidden = t.relu(t.add_rowvec(t.matmul(sv, gate.w1), gate.b1));
    Var out = t.add_rowvec(t.matmul(hidden, gate.w2), gate.b2);
    return t.clip01(t.relu(t.add_scalar(out, gate.mu)));
}

/// z = LN((f_row + f_col) .* g), one row per token.
template <class S>
Var denoise_tokens(Tape<S>& t, const std::vector<BlockToken>& tokens, const std::vector<SvdDescriptor>& descriptors,
                   const ViewVars<S>& views, const GateVars<S>& gate) {
    if (tokens.empty()) throw tape_error("denoise_tokens: no tokens");
    if (tokens.size() != descriptors.size()) throw tape_error("denoise_tokens: tokens and descriptors misaligned");
    std::vector<Var> rows;
    rows.reserve(tokens.size());
    for (size_t i = 0; i < tokens.size(); ++i) {
        auto [f_row, f_col] = view_features(t, tokens[i], views);
        Var g = gate_values(t, descriptors[i], gate);
        rows.push_back(t.mul(t.add(f_row, f_col), g));
    }
    return t.layernorm_rows(t.concat_rows(rows), S(1e-5));
}

/// Sliced-Wasserstein surrogate: MSE between per-projection sorted sequences
/// of rectified embeddings and a rectified Gaussian draw of the same shape.
template <class S>
Var rdm_loss(Tape<S>& t, Var z, const RdmConfig& cfg, const Mat<S>& bank,
             const std::type_identity_t<NoiseDraw<S>>& draw) {
    const Mat<S>& Z = t.val(z);
    if (Z.rows == 0) throw tape_error("rdm_loss: no tokens");
    if (bank.rows != cfg.n_proj || bank.cols != Z.cols) throw tape_error("rdm_loss: bank shape mismatch");
    Var y = t.input(draw(Z.rows, Z.cols));
    Var bank_v = t.input(bank);
    Var u = t.sort_cols_asc(t.matmul_nt(t.relu(z), bank_v));
    Var v = t.sort_cols_asc(t.matmul_nt(t.relu(y), bank_v));
    return t.mse(u, v);
}

}  // namespace lorafuse
