// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "lorafuse/mat.hpp"

namespace lorafuse {

struct Var {
    int idx = -1;
    bool valid() const { return idx >= 0; }
};

struct tape_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Reverse-mode tape over dense matrices. Every op records a closure that
/// pulls the output gradient into its parents; backward() replays them in
/// reverse creation order. All loops are sequential, so runs are bit
/// reproducible for a fixed op sequence.
template <class S>
class Tape {
public:
    Var input(Mat<S> value) {
        return push(std::move(value), nullptr);
    }

    const Mat<S>& val(Var v) const { return node(v).value; }
    const Mat<S>& grad(Var v) const { return node(v).grad; }
    size_t size() const { return nodes_.size(); }

    Var add(Var a, Var b) {
        const Mat<S>&A = val(a), &B = val(b);
        require(A.same_shape(B), "add: shape mismatch");
        Mat<S> out = A;
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += B.data[i];
        return push(std::move(out), [a, b](Tape& t, const Mat<S>& g) {
            t.accumulate(a, g);
            t.accumulate(b, g);
        });
    }

    Var sub(Var a, Var b) {
        const Mat<S>&A = val(a), &B = val(b);
        require(A.same_shape(B), "sub: shape mismatch");
        Mat<S> out = A;
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= B.data[i];
        return push(std::move(out), [a, b](Tape& t, const Mat<S>& g) {
            t.accumulate(a, g);
            Mat<S> neg = g;
            for (auto& v : neg.data) v = -v;
            t.accumulate(b, neg);
        });
    }

    /// X (n x m) + broadcast row vector b (1 x m).
    Var add_rowvec(Var x, Var b) {
        const Mat<S>&X = val(x), &B = val(b);
        require(B.rows == 1 && B.cols == X.cols, "add_rowvec: bias must be 1 x cols");
        Mat<S> out = X;
        for (int i = 0; i < out.rows; ++i)
            for (int j = 0; j < out.cols; ++j) out(i, j) += B(0, j);
        return push(std::move(out), [x, b](Tape& t, const Mat<S>& g) {
            t.accumulate(x, g);
            Mat<S> gb(1, g.cols);
            for (int i = 0; i < g.rows; ++i)
                for (int j = 0; j < g.cols; ++j) gb(0, j) += g(i, j);
            t.accumulate(b, gb);
        });
    }

    /// X + broadcast scalar s (1 x 1).
    Var add_scalar(Var x, Var s) {
        const Mat<S>&X = val(x), &Sc = val(s);
        require(Sc.rows == 1 && Sc.cols == 1, "add_scalar: shift must be 1 x 1");
        Mat<S> out = X;
        for (auto& v : out.data) v += Sc.data[0];
        return push(std::move(out), [x, s](Tape& t, const Mat<S>& g) {
            t.accumulate(x, g);
            S acc = S(0);
            for (S v : g.data) acc += v;
            t.accumulate(s, Mat<S>::scalar(acc));
        });
    }

    Var mul(Var a, Var b) {
        const Mat<S>&A = val(a), &B = val(b);
        require(A.same_shape(B), "mul: shape mismatch");
        Mat<S> out = A;
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= B.data[i];
        return push(std::move(out), [a, b](Tape& t, const Mat<S>& g) {
            const Mat<S>&A2 = t.val(a), &B2 = t.val(b);
            Mat<S> ga = g, gb = g;
            for (size_t i = 0; i < g.data.size(); ++i) {
                ga.data[i] *= B2.data[i];
                gb.data[i] *= A2.data[i];
            }
            t.accumulate(a, ga);
            t.accumulate(b, gb);
        });
    }

    Var scale(Var x, S c) {
        Mat<S> out = val(x);
        for (auto& v : out.data) v *= c;
        return push(std::move(out), [x, c](Tape& t, const Mat<S>& g) {
            Mat<S> gx = g;
            for (auto& v : gx.data) v *= c;
            t.accumulate(x, gx);
        });
    }

    /// out = s * X with trainable scalar s (1 x 1).
    Var scale_var(Var s, Var x) {
        const Mat<S>&Sc = val(s), &X = val(x);
        require(Sc.rows == 1 && Sc.cols == 1, "scale_var: scale must be 1 x 1");
        Mat<S> out = X;
        for (auto& v : out.data) v *= Sc.data[0];
        return push(std::move(out), [s, x](Tape& t, const Mat<S>& g) {
            const Mat<S>& X2 = t.val(x);
            const S sv = t.val(s).data[0];
            S ds = S(0);
            Mat<S> gx = g;
            for (size_t i = 0; i < g.data.size(); ++i) {
                ds += g.data[i] * X2.data[i];
                gx.data[i] *= sv;
            }
            t.accumulate(s, Mat<S>::scalar(ds));
            t.accumulate(x, gx);
        });
    }

    Var matmul(Var a, Var b) {
        Mat<S> out = lorafuse::matmul(val(a), val(b));
        return push(std::move(out), [a, b](Tape& t, const Mat<S>& g) {
            t.accumulate(a, lorafuse::matmul_nt(g, t.val(b)));          // g * B^T
            t.accumulate(b, lorafuse::matmul(transpose(t.val(a)), g));  // A^T * g
        });
    }

    /// out = A * B^T.
    Var matmul_nt(Var a, Var b) {
        Mat<S> out = lorafuse::matmul_nt(val(a), val(b));
        return push(std::move(out), [a, b](Tape& t, const Mat<S>& g) {
            t.accumulate(a, lorafuse::matmul(g, t.val(b)));
            t.accumulate(b, lorafuse::matmul(transpose(g), t.val(a)));
        });
    }

    Var relu(Var x) {
        Mat<S> out = val(x);
        for (auto& v : out.data) v = v > S(0) ? v : S(0);
        return push(std::move(out), [x](Tape& t, const Mat<S>& g) {
            const Mat<S>& X2 = t.val(x);
            Mat<S> gx = g;
            for (size_t i = 0; i < g.data.size(); ++i)
                if (X2.data[i] <= S(0)) gx.data[i] = S(0);
            t.accumulate(x, gx);
        });
    }

    /// clip to [0, 1]; derivative is 1 strictly inside and 0 at the boundaries.
    Var clip01(Var x) {
        Mat<S> out = val(x);
        for (auto& v : out.data) v = std::min(S(1), std::max(S(0), v));
        return push(std::move(out), [x](Tape& t, const Mat<S>& g) {
            const Mat<S>& X2 = t.val(x);
            Mat<S> gx = g;
            for (size_t i = 0; i < g.data.size(); ++i)
                if (!(X2.data[i] > S(0) && X2.data[i] < S(1))) gx.data[i] = S(0);
            t.accumulate(x, gx);
        });
    }

    /// Non-affine LayerNorm over each row with population variance.
    Var layernorm_rows(Var x, S eps) {
        const Mat<S>& X = val(x);
        require(X.cols >= 2, "layernorm_rows: needs at least 2 columns");
        Mat<S> out(X.rows, X.cols);
        Mat<S> inv_store(X.rows, 1);
        for (int i = 0; i < X.rows; ++i) {
            S mean = S(0);
            for (int j = 0; j < X.cols; ++j) mean += X(i, j);
            mean /= S(X.cols);
            S var = S(0);
            for (int j = 0; j < X.cols; ++j) {
                const S d = X(i, j) - mean;
                var += d * d;
            }
            var /= S(X.cols);
            const S inv = S(1) / std::sqrt(var + eps);
            inv_store(i, 0) = inv;
            for (int j = 0; j < X.cols; ++j) out(i, j) = (X(i, j) - mean) * inv;
        }
        Var outv = push(std::move(out), nullptr);
        node(outv).back = [x, outv, inv_store](Tape& t, const Mat<S>& g) {
            const Mat<S>& Y = t.val(outv);
            Mat<S> gx(g.rows, g.cols);
            for (int i = 0; i < g.rows; ++i) {
                S mean_g = S(0), mean_gy = S(0);
                for (int j = 0; j < g.cols; ++j) {
                    mean_g += g(i, j);
                    mean_gy += g(i, j) * Y(i, j);
                }
                mean_g /= S(g.cols);
                mean_gy /= S(g.cols);
                const S inv = inv_store(i, 0);
                for (int j = 0; j < g.cols; ++j) gx(i, j) = inv * (g(i, j) - mean_g - Y(i, j) * mean_gy);
            }
            t.accumulate(x, gx);
        };
        return outv;
    }

    Var softmax_rows(Var x) {
        const Mat<S>& X = val(x);
        Mat<S> out(X.rows, X.cols);
        for (int i = 0; i < X.rows; ++i) {
            S peak = X(i, 0);
            for (int j = 1; j < X.cols; ++j) peak = std::max(peak, X(i, j));
            S denom = S(0);
            for (int j = 0; j < X.cols; ++j) {
                out(i, j) = std::exp(X(i, j) - peak);
                denom += out(i, j);
            }
            for (int j = 0; j < X.cols; ++j) out(i, j) /= denom;
        }
        Var outv = push(std::move(out), nullptr);
        node(outv).back = [x, outv](Tape& t, const Mat<S>& g) {
            const Mat<S>& Y = t.val(outv);
            Mat<S> gx(g.rows, g.cols);
            for (int i = 0; i < g.rows; ++i) {
                S dot = S(0);
                for (int j = 0; j < g.cols; ++j) dot += g(i, j) * Y(i, j);
                for (int j = 0; j < g.cols; ++j) gx(i, j) = Y(i, j) * (g(i, j) - dot);
            }
            t.accumulate(x, gx);
        };
        return outv;
    }

    Var concat_rows(const std::vector<Var>& parts) {
        require(!parts.empty(), "concat_rows: nothing to stack");
        const int cols = val(parts[0]).cols;
        int rows = 0;
        for (Var p : parts) {
            require(val(p).cols == cols, "concat_rows: column mismatch");
            rows += val(p).rows;
        }
        Mat<S> out(rows, cols);
        int at = 0;
        for (Var p : parts) {
            const Mat<S>& m = val(p);
            for (int i = 0; i < m.rows; ++i)
                for (int j = 0; j < cols; ++j) out(at + i, j) = m(i, j);
            at += m.rows;
        }
        return push(std::move(out), [parts](Tape& t, const Mat<S>& g) {
            int at2 = 0;
            for (Var p : parts) {
                const int r = t.val(p).rows;
                Mat<S> gp(r, g.cols);
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < g.cols; ++j) gp(i, j) = g(at2 + i, j);
                t.accumulate(p, gp);
                at2 += r;
            }
        });
    }

    Var concat_cols(const std::vector<Var>& parts) {
        require(!parts.empty(), "concat_cols: nothing to stack");
        const int rows = val(parts[0]).rows;
        int cols = 0;
        for (Var p : parts) {
            require(val(p).rows == rows, "concat_cols: row mismatch");
            cols += val(p).cols;
        }
        Mat<S> out(rows, cols);
        int at = 0;
        for (Var p : parts) {
            const Mat<S>& m = val(p);
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < m.cols; ++j) out(i, at + j) = m(i, j);
            at += m.cols;
        }
        return push(std::move(out), [parts](Tape& t, const Mat<S>& g) {
            int at2 = 0;
            for (Var p : parts) {
                const int c = t.val(p).cols;
                Mat<S> gp(g.rows, c);
                for (int i = 0; i < g.rows; ++i)
                    for (int j = 0; j < c; ++j) gp(i, j) = g(i, at2 + j);
                t.accumulate(p, gp);
                at2 += c;
            }
        });
    }

    /// Row slice [r0, r1).
    Var rows(Var x, int r0, int r1) {
        const Mat<S>& X = val(x);
        require(0 <= r0 && r0 < r1 && r1 <= X.rows, "rows: slice out of range");
        Mat<S> out(r1 - r0, X.cols);
        for (int i = r0; i < r1; ++i)
            for (int j = 0; j < X.cols; ++j) out(i - r0, j) = X(i, j);
        return push(std::move(out), [x, r0](Tape& t, const Mat<S>& g) {
            Mat<S> gx(t.val(x).rows, t.val(x).cols);
            for (int i = 0; i < g.rows; ++i)
                for (int j = 0; j < g.cols; ++j) gx(r0 + i, j) = g(i, j);
            t.accumulate(x, gx);
        });
    }

    /// Column slice [c0, c1).
    Var cols(Var x, int c0, int c1) {
        const Mat<S>& X = val(x);
        require(0 <= c0 && c0 < c1 && c1 <= X.cols, "cols: slice out of range");
        Mat<S> out(X.rows, c1 - c0);
        for (int i = 0; i < X.rows; ++i)
            for (int j = c0; j < c1; ++j) out(i, j - c0) = X(i, j);
        return push(std::move(out), [x, c0](Tape& t, const Mat<S>& g) {
            Mat<S> gx(t.val(x).rows, t.val(x).cols);
            for (int i = 0; i < g.rows; ++i)
                for (int j = 0; j < g.cols; ++j) gx(i, c0 + j) = g(i, j);
            t.accumulate(x, gx);
        });
    }

    Var row_of(Var x, int r) { return rows(x, r, r + 1); }

    /// Each input row is a (block_rows x block_cols) block in row-major order;
    /// blocks stack vertically. Output keeps out_rows rows and out_cols
    /// columns, dropping row/column padding.
    Var unblockify_rows(Var x, int block_rows, int block_cols, int out_rows, int out_cols) {
        const Mat<S>& X = val(x);
        require(X.cols == block_rows * block_cols, "unblockify_rows: row length is not c*r");
        require(X.rows * block_rows >= out_rows, "unblockify_rows: too few blocks");
        require(block_cols >= out_cols, "unblockify_rows: block narrower than output");
        Mat<S> out(out_rows, out_cols);
        for (int t = 0; t < X.rows; ++t) {
            const int row0 = t * block_rows;
            for (int i = 0; i < block_rows && row0 + i < out_rows; ++i)
                for (int j = 0; j < out_cols; ++j) out(row0 + i, j) = X(t, i * block_cols + j);
        }
        return push(std::move(out), [x, block_rows, block_cols, out_rows, out_cols](Tape& t2, const Mat<S>& g) {
            Mat<S> gx(t2.val(x).rows, t2.val(x).cols);
            for (int t = 0; t < gx.rows; ++t) {
                const int row0 = t * block_rows;
                for (int i = 0; i < block_rows && row0 + i < out_rows; ++i)
                    for (int j = 0; j < out_cols; ++j) gx(t, i * block_cols + j) = g(row0 + i, j);
            }
            t2.accumulate(x, gx);
        });
    }

    /// Sort each column ascending; gradients follow the permutation.
    Var sort_cols_asc(Var x) {
        const Mat<S>& X = val(x);
        Mat<S> out(X.rows, X.cols);
        std::vector<int> perm(static_cast<size_t>(X.rows) * X.cols);
        std::vector<int> order(static_cast<size_t>(X.rows));
        for (int j = 0; j < X.cols; ++j) {
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return X(a, j) < X(b, j); });
            for (int i = 0; i < X.rows; ++i) {
                out(i, j) = X(order[static_cast<size_t>(i)], j);
                perm[static_cast<size_t>(i) * X.cols + j] = order[static_cast<size_t>(i)];
            }
        }
        return push(std::move(out), [x, perm](Tape& t, const Mat<S>& g) {
            Mat<S> gx(g.rows, g.cols);
            for (int i = 0; i < g.rows; ++i)
                for (int j = 0; j < g.cols; ++j) gx(perm[static_cast<size_t>(i) * g.cols + j], j) += g(i, j);
            t.accumulate(x, gx);
        });
    }

    /// Mean of elementwise squared difference, as a 1 x 1 node.
    Var mse(Var a, Var b) {
        const Mat<S>&A = val(a), &B = val(b);
        require(A.same_shape(B), "mse: shape mismatch");
        require(!A.data.empty(), "mse: empty operands");
        S acc = S(0);
        for (size_t i = 0; i < A.data.size(); ++i) {
            const S d = A.data[i] - B.data[i];
            acc += d * d;
        }
        acc /= S(A.data.size());
        return push(Mat<S>::scalar(acc), [a, b](Tape& t, const Mat<S>& g) {
            const Mat<S>&A2 = t.val(a), &B2 = t.val(b);
            const S w = g.data[0] * S(2) / S(A2.data.size());
            Mat<S> ga(A2.rows, A2.cols), gb(A2.rows, A2.cols);
            for (size_t i = 0; i < A2.data.size(); ++i) {
                const S d = w * (A2.data[i] - B2.data[i]);
                ga.data[i] = d;
                gb.data[i] = -d;
            }
            t.accumulate(a, ga);
            t.accumulate(b, gb);
        });
    }

    Var mean_all(Var x) {
        const Mat<S>& X = val(x);
        require(!X.data.empty(), "mean_all: empty operand");
        S acc = S(0);
        for (S v : X.data) acc += v;
        acc /= S(X.data.size());
        return push(Mat<S>::scalar(acc), [x](Tape& t, const Mat<S>& g) {
            const Mat<S>& X2 = t.val(x);
            Mat<S> gx(X2.rows, X2.cols);
            const S w = g.data[0] / S(X2.data.size());
            for (auto& v : gx.data) v = w;
            t.accumulate(x, gx);
        });
    }

    void backward(Var loss) {
        require(loss.valid() && loss.idx < static_cast<int>(nodes_.size()), "backward: invalid loss node");
        require(val(loss).rows == 1 && val(loss).cols == 1, "backward: loss must be 1 x 1");
        node(loss).grad.data[0] = S(1);
        for (int i = loss.idx; i >= 0; --i)
            if (nodes_[static_cast<size_t>(i)].back) nodes_[static_cast<size_t>(i)].back(*this, nodes_[static_cast<size_t>(i)].grad);
    }

private:
    struct Node {
        Mat<S> value;
        Mat<S> grad;
        std::function<void(Tape&, const Mat<S>&)> back;
    };
    std::vector<Node> nodes_;

    Node& node(Var v) { return nodes_[static_cast<size_t>(v.idx)]; }
    const Node& node(Var v) const { return nodes_[static_cast<size_t>(v.idx)]; }

    static void require(bool ok, const char* msg) {
        if (!ok) throw tape_error(msg);
    }

    Var push(Mat<S> value, std::function<void(Tape&, const Mat<S>&)> back) {
        Node n;
        n.grad = Mat<S>(value.rows, value.cols);
        n.value = std::move(value);
        n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    void accumulate(Var v, const Mat<S>& g) {
        Mat<S>& dst = node(v).grad;
        for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += g.data[i];
    }
};

}  // namespace lorafuse
