// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "lorafuse/denoise.hpp"
#include "lorafuse/svd.hpp"

namespace lorafuse {

struct hypernet_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

template <class S>
struct PositionTable {
    Mat<S> token;    // max_pos x d, shared by both sides; indices restart per source run
    Mat<S> segment;  // 4 x d (TargetA, TargetB, SourceA, SourceB)
    Mat<S> source;   // one row per source index
};

struct HyperNetConfig {
    int embed_dim = 1024;
    int heads = 8;
    int max_positions = 4096;
    int block_rows = 8;
    int token_cols = 8;
    int s_len = 8;
    int gate_hidden = 0;     // 0: 4 * s_len
    int decoder_hidden = 0;  // 0: 4 * embed_dim
    double mu_gate = 0.10;
    double alpha_init = 0.3;
    int n_sources = 1;
    int n_groups = 1;
    uint64_t seed = 0;
};

/// All trainable parameters phi plus the group-wise scales.
template <class S>
struct HyperNetParams {
    HyperNetConfig cfg;
    ViewProjections<S> views;
    GateParams<S> gate;
    PositionTable<S> positions;
    Mat<S> wq, wk, wv, wo;              // d x d; heads partition the columns
    Mat<S> dec_w1, dec_b1;              // d x h_dec
    Mat<S> dec_w2, dec_b2;              // h_dec x (c * r_tok); starts zeroed
    Mat<S> alphas;                      // n_groups x 1

    struct BlockRef {
        std::string name;
        Mat<S>* mat;
    };
    std::vector<BlockRef> blocks() {
        return {
            {"views.row.weight", &views.row_w}, {"views.row.bias", &views.row_b},
            {"views.col.weight", &views.col_w}, {"views.col.bias", &views.col_b},
            {"gate.mlp.0.weight", &gate.w1},    {"gate.mlp.0.bias", &gate.b1},
            {"gate.mlp.1.weight", &gate.w2},    {"gate.mlp.1.bias", &gate.b2},
            {"gate.mu", &gate.mu},              {"positions.token", &positions.token},
            {"positions.segment", &positions.segment}, {"positions.source", &positions.source},
            {"attention.wq", &wq},              {"attention.wk", &wk},
            {"attention.wv", &wv},              {"attention.wo", &wo},
            {"decoder.0.weight", &dec_w1},      {"decoder.0.bias", &dec_b1},
            {"decoder.1.weight", &dec_w2},      {"decoder.1.bias", &dec_b2},
            {"alphas", &alphas},
        };
    }
};

template <class S>
Mat<S> glorot_uniform(int rows, int cols, Rng& rng) {
    const double limit = std::sqrt(6.0 / (rows + cols));
    return rng.uniform_mat<S>(rows, cols, -limit, limit);
}

template <class S>
HyperNetParams<S> init_hypernet(const HyperNetConfig& cfg_in) {
    HyperNetConfig cfg = cfg_in;
    if (cfg.embed_dim % cfg.heads != 0) throw hypernet_error("embed_dim must be divisible by heads");
    if (cfg.gate_hidden <= 0) cfg.gate_hidden = 4 * cfg.s_len;
    if (cfg.decoder_hidden <= 0) cfg.decoder_hidden = 4 * cfg.embed_dim;

    Rng rng(cfg.seed);
    const int d = cfg.embed_dim;
    const int flat = cfg.block_rows * cfg.token_cols;

    HyperNetParams<S> p;
    p.cfg = cfg;
    p.views.row_w = glorot_uniform<S>(flat, d, rng);
    p.views.row_b = glorot_uniform<S>(1, d, rng);
    p.views.col_w = glorot_uniform<S>(flat, d, rng);
    p.views.col_b = glorot_uniform<S>(1, d, rng);
    p.gate.w1 = glorot_uniform<S>(cfg.s_len, cfg.gate_hidden, rng);
    p.gate.b1 = glorot_uniform<S>(1, cfg.gate_hidden, rng);
    p.gate.w2 = Mat<S>(cfg.gate_hidden, d);  // zeroed: initial gate is clip(ReLU(mu),0,1)
    p.gate.b2 = Mat<S>(1, d);
    p.gate.mu = Mat<S>::scalar(static_cast<S>(cfg.mu_gate));
    p.positions.token = glorot_uniform<S>(cfg.max_positions, d, rng);
    p.positions.segment = glorot_uniform<S>(4, d, rng);
    p.positions.source = glorot_uniform<S>(cfg.n_sources, d, rng);
    p.wq = glorot_uniform<S>(d, d, rng);
    p.wk = glorot_uniform<S>(d, d, rng);
    p.wv = glorot_uniform<S>(d, d, rng);
    p.wo = glorot_uniform<S>(d, d, rng);
    p.dec_w1 = glorot_uniform<S>(d, cfg.decoder_hidden, rng);
    p.dec_b1 = glorot_uniform<S>(1, cfg.decoder_hidden, rng);
    p.dec_w2 = Mat<S>(cfg.decoder_hidden, flat);  // zeroed: every initial delta is exactly 0
    p.dec_b2 = Mat<S>(1, flat);
    p.alphas = Mat<S>(cfg.n_groups, 1);
    for (auto& v : p.alphas.data) v = static_cast<S>(cfg.alpha_init);
    return p;
}

/// Tape mirror of the parameter blocks, aligned with blocks().
template <class S>
struct StagedParams {
    std::vector<Var> vars;
    ViewVars<S> views;
    GateVars<S> gate;
    Var pos_token, pos_segment, pos_source;
    Var wq, wk, wv, wo;
    Var dec_w1, dec_b1, dec_w2, dec_b2;
    Var alphas;
};

template <class S>
StagedParams<S> stage_params(Tape<S>& t, HyperNetParams<S>& p) {
    StagedParams<S> s;
    for (auto& b : p.blocks()) s.vars.push_back(t.input(*b.mat));
    int i = 0;
    s.views.row_w = s.vars[i++]; s.views.row_b = s.vars[i++];
    s.views.col_w = s.vars[i++]; s.views.col_b = s.vars[i++];
    s.gate.w1 = s.vars[i++]; s.gate.b1 = s.vars[i++];
    s.gate.w2 = s.vars[i++]; s.gate.b2 = s.vars[i++];
    s.gate.mu = s.vars[i++];
    s.pos_token = s.vars[i++]; s.pos_segment = s.vars[i++]; s.pos_source = s.vars[i++];
    s.wq = s.vars[i++]; s.wk = s.vars[i++]; s.wv = s.vars[i++]; s.wo = s.vars[i++];
    s.dec_w1 = s.vars[i++]; s.dec_b1 = s.vars[i++];
    s.dec_w2 = s.vars[i++]; s.dec_b2 = s.vars[i++];
    s.alphas = s.vars[i++];
    return s;
}

struct EmbedOptions {
    /// Test hook: drop position/segment/source additions so attention becomes
    /// order-invariant over source tokens.
    bool use_encodings = true;
};

template <class S>
struct EmbeddedContext {
    Var target;           // n_t x d, encodings added
    Var source;           // n_s x d
    Var target_denoised;  // z before encodings (RDM input)
    Var source_denoised;
};

namespace detail {

inline int segment_index(Segment s) {
    switch (s) {
        case Segment::TargetA: return 0;
        case Segment::TargetB: return 1;
        case Segment::SourceA: return 2;
        case Segment::SourceB: return 3;
    }
    return 0;
}

/// Position indices for the encoding table: target side counts 0..n-1,
/// source side restarts at the beginning of each source run.
inline std::vector<int> run_positions(const std::vector<BlockToken>& tokens) {
    std::vector<int> out(tokens.size(), 0);
    int run = 0;
    int last_source = tokens.empty() ? -1 : tokens.front().source_index;
    for (size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i].source_index != last_source) {
            run = 0;
            last_source = tokens[i].source_index;
        }
        out[i] = run++;
    }
    return out;
}

template <class S>
Var add_encodings(Tape<S>& t, Var z, const std::vector<BlockToken>& tokens, const StagedParams<S>& sp,
                  int max_positions) {
    const auto positions = run_positions(tokens);
    std::vector<Var> enc_rows;
    enc_rows.reserve(tokens.size());
    for (size_t i = 0; i < tokens.size(); ++i) {
        if (positions[i] >= max_positions) throw hypernet_error("embed_context: sequence exceeds max positions");
        Var row = t.add(t.row_of(sp.pos_token, positions[i]),
                        t.row_of(sp.pos_segment, segment_index(tokens[i].segment)));
        if (tokens[i].source_index >= 0) {
            if (tokens[i].source_index >= t.val(sp.pos_source).rows)
                throw hypernet_error("embed_context: source index outside the source table");
            row = t.add(row, t.row_of(sp.pos_source, tokens[i].source_index));
        }
        enc_rows.push_back(row);
    }
    return t.add(z, t.concat_rows(enc_rows));
}

}  // namespace detail

/// Denoise both sides and add positional/segment/source encodings.
template <class S>
EmbeddedContext<S> embed_context(Tape<S>& t, const GroupContext& ctx, const StagedParams<S>& sp,
                                 const HyperNetConfig& cfg, const EmbedOptions& opts = {}) {
    if (ctx.source_tokens.empty()) throw hypernet_error("embed_context: no source tokens");
    EmbeddedContext<S> out;
    out.target_denoised = denoise_tokens(t, ctx.target_tokens, ctx.target_descriptors, sp.views, sp.gate);
    out.source_denoised = denoise_tokens(t, ctx.source_tokens, ctx.source_descriptors, sp.views, sp.gate);
    if (opts.use_encodings) {
        out.target = detail::add_encodings(t, out.target_denoised, ctx.target_tokens, sp, cfg.max_positions);
        out.source = detail::add_encodings(t, out.source_denoised, ctx.source_tokens, sp, cfg.max_positions);
    } else {
        out.target = out.target_denoised;
        out.source = out.source_denoised;
    }
    return out;
}

/// Multi-head scaled dot-product attention, target rows as queries, source
/// rows as keys/values, concatenated heads through the output map. No
/// residual path. Optionally reports the mean attention-row entropy (nats).
template <class S>
Var cross_attend(Tape<S>& t, Var z_target, Var z_source, const StagedParams<S>& sp, int heads,
                 double* mean_entropy = nullptr) {
    const int d = t.val(z_target).cols;
    if (d % heads != 0) throw hypernet_error("cross_attend: embed dim not divisible by heads");
    const int dh = d / heads;
    Var q = t.matmul(z_target, sp.wq);
    Var k = t.matmul(z_source, sp.wk);
    Var v = t.matmul(z_source, sp.wv);

    double entropy_acc = 0.0;
    std::vector<Var> head_outputs;
    head_outputs.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Var qh = t.cols(q, h * dh, (h + 1) * dh);
        Var kh = t.cols(k, h * dh, (h + 1) * dh);
        Var vh = t.cols(v, h * dh, (h + 1) * dh);
        Var scores = t.scale(t.matmul_nt(qh, kh), S(1.0 / std::sqrt(static_cast<double>(dh))));
        Var attn = t.softmax_rows(scores);
        if (mean_entropy) {
            const Mat<S>& a = t.val(attn);
            for (int i = 0; i < a.rows; ++i) {
                double hrow = 0.0;
                for (int j = 0; j < a.cols; ++j) {
                    const double p = static_cast<double>(a(i, j));
                    if (p > 0.0) hrow -= p * std::log(p);
                }
                entropy_acc += hrow / a.rows;
            }
        }
        head_outputs.push_back(t.matmul(attn, vh));
    }
    if (mean_entropy) *mean_entropy = entropy_acc / heads;
    return t.matmul(t.concat_cols(head_outputs), sp.wo);
}

/// Decode per-token block deltas, keep only the B segment, and assemble the
/// d_out x rank update.
template <class S>
Var decode_delta(Tape<S>& t, Var h, const GroupContext& ctx, const StagedParams<S>& sp) {
    int first_b = -1;
    for (size_t i = 0; i < ctx.target_tokens.size(); ++i)
        if (ctx.target_tokens[i].segment == Segment::TargetB) {
            first_b = static_cast<int>(i);
            break;
        }
    if (first_b < 0) throw hypernet_error("decode_delta: context has no target B tokens");

    Var decoded = t.add_rowvec(t.matmul(t.relu(t.add_rowvec(t.matmul(h, sp.dec_w1), sp.dec_b1)), sp.dec_w2),
                               sp.dec_b2);
    Var b_rows = t.rows(decoded, first_b, static_cast<int>(ctx.target_tokens.size()));
    const int d_out = ctx.unit.target_pair.d_out();
    const int rank = ctx.unit.group.rank;
    return t.unblockify_rows(b_rows, ctx.block_rows, ctx.token_cols, d_out, rank);
}

template <class S>
struct DeltaPrediction {
    Var delta_b;              // d_out x rank
    double attention_entropy = 0.0;
};

template <class S>
DeltaPrediction<S> predict_delta(Tape<S>& t, const GroupContext& ctx, const StagedParams<S>& sp,
                                 const HyperNetConfig& cfg, const EmbedOptions& opts = {}) {
    auto embedded = embed_context(t, ctx, sp, cfg, opts);
    DeltaPrediction<S> out;
    Var h = cross_attend(t, embedded.target, embedded.source, sp, cfg.heads, &out.attention_entropy);
    out.delta_b = decode_delta(t, h, ctx, sp);
    return out;
}

/// B <- B + alpha * delta (one f64 addition, rounded once to f32); A is
/// byte-identical to the input.
LoraPair apply_patch(const LoraPair& pair, const Mat<double>& delta_b, double alpha);

struct StabilityBound {
    double lhs = 0.0;            // ||(B + a dB) A - B A||_F
    double frob_identity = 0.0;  // |a| ||dB A||_F
    double bound = 0.0;          // |a| ||dB||_F sigma_max(A)
};

StabilityBound stability_bound(const Mat<double>& b, const Mat<double>& a, const Mat<double>& delta_b, double alpha);
StabilityBound stability_bound(const LoraPair& pair, const Mat<double>& delta_b, double alpha);

}  // namespace lorafuse
