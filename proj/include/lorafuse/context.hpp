// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "lorafuse/mat.hpp"
#include "lorafuse/topology.hpp"

namespace lorafuse {

enum class Segment { TargetA, TargetB, SourceA, SourceB };

const char* segment_name(Segment s);
bool is_b_segment(Segment s);

/// One row-tile of an adapter factor. `data` is c x r_tok; the trailing
/// pad_rows rows and pad_cols columns are exactly zero.
struct BlockToken {
    Mat<float> data;
    Segment segment = Segment::TargetA;
    int source_index = -1;  // -1 on target-side tokens
    int position = 0;       // unique within its side of the context
    int pad_rows = 0;
    int pad_cols = 0;
};

/// Sorted singular values of the unpadded block, zero-padded to a fixed length.
struct SvdDescriptor {
    std::vector<double> values;
};

struct GroupContext {
    TransferUnit unit;
    int block_rows = 0;   // c
    int token_cols = 0;   // r_tok (run-wide rank axis)
    std::vector<BlockToken> target_tokens;
    std::vector<BlockToken> source_tokens;
    std::vector<SvdDescriptor> target_descriptors;
    std::vector<SvdDescriptor> source_descriptors;
};

struct context_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Dense update carried by a pair: B * A.
Mat<float> compute_delta_w(const LoraPair& pair);

/// Tile M (n x r) into ceil(n/c) tokens of c rows, zero-padding the last one.
/// token_cols >= r widens every token with zero columns (mixed-rank runs).
std::vector<BlockToken> blockify(const Mat<float>& m, int block_rows, Segment segment, int source_index = -1,
                                 int token_cols = -1);

/// Exact inverse of blockify for the stated original row count.
Mat<float> unblockify(const std::vector<BlockToken>& tokens, int rows, int cols);

SvdDescriptor svd_descriptor(const BlockToken& token, int s_len);

/// Assemble the target/source token sequences (Blk(A^T) then Blk(B), sources
/// concatenated in index order) and their descriptors.
GroupContext build_context(const TransferUnit& unit, int block_rows, int s_len, int token_cols = -1);

}  // namespace lorafuse
