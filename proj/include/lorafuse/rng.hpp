// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>

#include "lorafuse/mat.hpp"

namespace lorafuse {

/// Deterministic random stream. All distributions are implemented by hand so
/// generated sequences do not depend on the standard library version.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    /// Uniform integer in [0, n).
    int64_t index(int64_t n) { return static_cast<int64_t>(gen_() % static_cast<uint64_t>(n)); }

    template <class T>
    Mat<T> normal_mat(int rows, int cols, double scale = 1.0) {
        Mat<T> m(rows, cols);
        for (auto& v : m.data) v = static_cast<T>(scale * normal());
        return m;
    }

    template <class T>
    Mat<T> uniform_mat(int rows, int cols, double lo, double hi) {
        Mat<T> m(rows, cols);
        for (auto& v : m.data) v = static_cast<T>(uniform(lo, hi));
        return m;
    }

    /// splitmix64 finalizer, the seed-derivation primitive.
    static uint64_t split(uint64_t x) {
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    /// Derive a child seed from a parent seed and a stream tag.
    static uint64_t mix(uint64_t seed, uint64_t tag) { return split(split(seed) ^ tag); }

private:
    std::mt19937_64 gen_;
};

}  // namespace lorafuse
