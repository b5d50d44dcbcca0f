// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace lorafuse {

/// Dense row-major matrix. Row vectors are 1xN, column vectors Nx1.
template <class T>
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<T> data;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * static_cast<size_t>(c), T(0)) {}
    Mat(int r, int c, std::vector<T> d) : rows(r), cols(c), data(std::move(d)) {
        if (data.size() != static_cast<size_t>(r) * static_cast<size_t>(c)) {
            throw std::invalid_argument("Mat: buffer size does not match shape");
        }
    }

    T& operator()(int i, int j) { return data[static_cast<size_t>(i) * cols + j]; }
    const T& operator()(int i, int j) const { return data[static_cast<size_t>(i) * cols + j]; }

    size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }

    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }

    bool all_finite() const {
        for (T v : data) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    static Mat scalar(T v) {
        Mat m(1, 1);
        m.data[0] = v;
        return m;
    }
};

template <class T>
Mat<T> transpose(const Mat<T>& a) {
    Mat<T> out(a.cols, a.rows);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < a.cols; ++j) out(j, i) = a(i, j);
    return out;
}

/// C = A * B, accumulated in T.
template <class T>
Mat<T> matmul(const Mat<T>& a, const Mat<T>& b) {
    if (a.cols != b.rows) throw std::invalid_argument("matmul: inner dimensions differ");
    Mat<T> out(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        for (int k = 0; k < a.cols; ++k) {
            const T aik = a(i, k);
            if (aik == T(0)) continue;
            for (int j = 0; j < b.cols; ++j) out(i, j) += aik * b(k, j);
        }
    }
    return out;
}

/// C = A * B^T.
template <class T>
Mat<T> matmul_nt(const Mat<T>& a, const Mat<T>& b) {
    if (a.cols != b.cols) throw std::invalid_argument("matmul_nt: inner dimensions differ");
    Mat<T> out(a.rows, b.rows);
    for (int i = 0; i < a.rows; ++i) {
        for (int j = 0; j < b.rows; ++j) {
            T acc = T(0);
            for (int k = 0; k < a.cols; ++k) acc += a(i, k) * b(j, k);
            out(i, j) = acc;
        }
    }
    return out;
}

/// Frobenius norm in double precision regardless of T.
template <class T>
double fro_norm(const Mat<T>& a) {
    double acc = 0.0;
    for (T v : a.data) {
        const double d = static_cast<double>(v);
        acc += d * d;
    }
    return std::sqrt(acc);
}

template <class To, class From>
Mat<To> mat_cast(const Mat<From>& a) {
    Mat<To> out(a.rows, a.cols);
    for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = static_cast<To>(a.data[i]);
    return out;
}

}  // namespace lorafuse
