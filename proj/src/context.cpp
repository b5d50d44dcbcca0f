// SPDX-License-Identifier: Apache-2.0
#include "lorafuse/context.hpp"

#include <algorithm>

#include "lorafuse/svd.hpp"

namespace lorafuse {

const char* segment_name(Segment s) {
    switch (s) {
        case Segment::TargetA: return "target_A";
        case Segment::TargetB: return "target_B";
        case Segment::SourceA: return "source_A";
        case Segment::SourceB: return "source_B";
    }
    return "?";
}

bool is_b_segment(Segment s) { return s == Segment::TargetB || s == Segment::SourceB; }

Mat<float> compute_delta_w(const LoraPair& pair) {
    if (pair.B.cols != pair.A.rows) throw context_error("compute_delta_w: rank dimensions differ");
    return matmul(pair.B, pair.A);
}

std::vector<BlockToken> blockify(const Mat<float>& m, int block_rows, Segment segment, int source_index,
                                 int token_cols) {
    if (m.rows == 0 || m.cols == 0) throw context_error("blockify: empty matrix");
    if (block_rows < 1) throw context_error("blockify: block row count below 1");
    if (token_cols < 0) token_cols = m.cols;
    if (token_cols < m.cols) throw context_error("blockify: token_cols narrower than matrix");

    const int n_tokens = (m.rows + block_rows - 1) / block_rows;
    std::vector<BlockToken> tokens;
    tokens.reserve(static_cast<size_t>(n_tokens));
    for (int t = 0; t < n_tokens; ++t) {
        const int row0 = t * block_rows;
        const int live = std::min(block_rows, m.rows - row0);
        BlockToken tok;
        tok.data = Mat<float>(block_rows, token_cols);
        for (int i = 0; i < live; ++i)
            for (int j = 0; j < m.cols; ++j) tok.data(i, j) = m(row0 + i, j);
        tok.segment = segment;
        tok.source_index = source_index;
        tok.position = t;
        tok.pad_rows = block_rows - live;
        tok.pad_cols = token_cols - m.cols;
        tokens.push_back(std::move(tok));
    }
    return tokens;
}

Mat<float> unblockify(const std::vector<BlockToken>& tokens, int rows, int cols) {
    if (tokens.empty()) throw context_error("unblockify: no tokens");
    const int c = tokens.front().data.rows;
    const int expected = (rows + c - 1) / c;
    if (static_cast<int>(tokens.size()) != expected)
        throw context_error("unblockify: token count inconsistent with row count");
    Mat<float> out(rows, cols);
    for (size_t t = 0; t < tokens.size(); ++t) {
        const auto& tok = tokens[t];
        if (tok.data.cols < cols) throw context_error("unblockify: token narrower than requested width");
        const int row0 = static_cast<int>(t) * c;
        const int live = std::min(c, rows - row0);
        if (c - live != tok.pad_rows) throw context_error("unblockify: pad_rows inconsistent with row count");
        for (int i = 0; i < live; ++i)
            for (int j = 0; j < cols; ++j) out(row0 + i, j) = tok.data(i, j);
    }
    return out;
}

SvdDescriptor svd_descriptor(const BlockToken& token, int s_len) {
    if (!token.data.all_finite()) throw context_error("svd_descriptor: non-finite block");
    const int live_rows = token.data.rows - token.pad_rows;
    const int live_cols = token.data.cols - token.pad_cols;
    Mat<float> sub(live_rows, live_cols);
    for (int i = 0; i < live_rows; ++i)
        for (int j = 0; j < live_cols; ++j) sub(i, j) = token.data(i, j);
    auto sv = svdvals(sub);
    SvdDescriptor d;
    d.values.assign(static_cast<size_t>(s_len), 0.0);
    for (size_t i = 0; i < sv.size() && i < static_cast<size_t>(s_len); ++i) d.values[i] = sv[i];
    return d;
}

namespace {

void append_side(std::vector<BlockToken>& side, const LoraPair& pair, int block_rows, int token_cols, bool target,
                 int source_index) {
    auto a_tokens = blockify(transpose(pair.A), block_rows, target ? Segment::TargetA : Segment::SourceA,
                             source_index, token_cols);
    auto b_tokens =
        blockify(pair.B, block_rows, target ? Segment::TargetB : Segment::SourceB, source_index, token_cols);
    side.insert(side.end(), std::make_move_iterator(a_tokens.begin()), std::make_move_iterator(a_tokens.end()));
    side.insert(side.end(), std::make_move_iterator(b_tokens.begin()), std::make_move_iterator(b_tokens.end()));
}

}  // namespace

GroupContext build_context(const TransferUnit& unit, int block_rows, int s_len, int token_cols) {
    GroupContext ctx;
    ctx.unit = unit;
    ctx.block_rows = block_rows;
    ctx.token_cols = token_cols < 0 ? unit.group.rank : token_cols;

    append_side(ctx.target_tokens, unit.target_pair, block_rows, ctx.token_cols, true, -1);
    for (const auto& [k, pair] : unit.source_pairs)
        append_side(ctx.source_tokens, pair, block_rows, ctx.token_cols, false, k);

    for (size_t i = 0; i < ctx.target_tokens.size(); ++i) ctx.target_tokens[i].position = static_cast<int>(i);
    for (size_t i = 0; i < ctx.source_tokens.size(); ++i) ctx.source_tokens[i].position = static_cast<int>(i);

    ctx.target_descriptors.reserve(ctx.target_tokens.size());
    for (const auto& tok : ctx.target_tokens) ctx.target_descriptors.push_back(svd_descriptor(tok, s_len));
    ctx.source_descriptors.reserve(ctx.source_tokens.size());
    for (const auto& tok : ctx.source_tokens) ctx.source_descriptors.push_back(svd_descriptor(tok, s_len));
    return ctx;
}

}  // namespace lorafuse
