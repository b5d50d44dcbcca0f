// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>

#include "lorafuse/hypernet.hpp"
#include "oracles.hpp"

using namespace lorafuse;

namespace {

HyperNetConfig desk_config(uint64_t seed, int n_sources = 1, int n_groups = 1) {
    HyperNetConfig cfg;
    cfg.embed_dim = 32;
    cfg.heads = 4;
    cfg.max_positions = 64;
    cfg.block_rows = 8;
    cfg.token_cols = 8;
    cfg.s_len = 8;
    cfg.n_sources = n_sources;
    cfg.n_groups = n_groups;
    cfg.seed = seed;
    return cfg;
}

TransferUnit make_unit(int d_in, int d_out, int rank, int n_sources, uint64_t seed) {
    Rng rng(seed);
    TransferUnit unit;
    unit.group = TransferGroup{"up_proj.r" + std::to_string(rank), "up_proj", rank, 0};
    unit.target_layer = 0;
    unit.target_pair = make_pair(0, "up_proj", rng.normal_mat<float>(rank, d_in), rng.normal_mat<float>(d_out, rank));
    for (int k = 0; k < n_sources; ++k)
        unit.source_pairs.emplace_back(
            k, make_pair(0, "up_proj", rng.normal_mat<float>(rank, d_in + 8), rng.normal_mat<float>(d_out + 8, rank)));
    return unit;
}

Mat<double> identity(int n) {
    Mat<double> m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

}  // namespace

TEST_CASE("init_hypernet honors the documented initialization") {
    HyperNetConfig cfg = desk_config(7, 2, 3);
    auto p = init_hypernet<double>(cfg);

    for (double v : p.dec_w2.data) CHECK(v == 0.0);
    for (double v : p.dec_b2.data) CHECK(v == 0.0);
    for (double v : p.gate.w2.data) CHECK(v == 0.0);
    for (double v : p.gate.b2.data) CHECK(v == 0.0);
    CHECK(p.gate.mu.data[0] == doctest::Approx(0.10));
    REQUIRE(p.alphas.rows == 3);
    for (double v : p.alphas.data) CHECK(v == doctest::Approx(0.3));
    CHECK(p.positions.source.rows == 2);

    // Glorot bounds on a non-zeroed block.
    const double limit = std::sqrt(6.0 / (32 + 32));
    for (double v : p.wq.data) {
        CHECK(v <= limit);
        CHECK(v >= -limit);
    }

    CHECK_THROWS_AS(([&] {
                        HyperNetConfig bad = cfg;
                        bad.heads = 5;  // 32 % 5 != 0
                        init_hypernet<double>(bad);
                    })(),
                    hypernet_error);
}

TEST_CASE("embed_context shapes, determinism, and errors") {
    HyperNetConfig cfg = desk_config(11);
    auto params = init_hypernet<double>(cfg);
    TransferUnit unit = make_unit(16, 16, 8, 1, 12);
    GroupContext ctx = build_context(unit, 8, 8);

    Tape<double> t;
    auto sp = stage_params(t, params);
    auto emb = embed_context(t, ctx, sp, cfg);
    CHECK(t.val(emb.target).rows == 4);   // 2 A-tokens + 2 B-tokens
    CHECK(t.val(emb.target).cols == 32);
    CHECK(t.val(emb.source).rows == 6);   // source is 24-wide: 3 + 3 tokens
    CHECK(t.val(emb.target_denoised).rows == 4);

    // Determinism: same context, fresh tape, identical embeddings.
    Tape<double> t2;
    auto sp2 = stage_params(t2, params);
    auto emb2 = embed_context(t2, ctx, sp2, cfg);
    CHECK(t.val(emb.target).data == t2.val(emb2.target).data);
    CHECK(t.val(emb.source).data == t2.val(emb2.source).data);

    // Empty source side errors.
    GroupContext empty = ctx;
    empty.source_tokens.clear();
    empty.source_descriptors.clear();
    Tape<double> t3;
    auto sp3 = stage_params(t3, params);
    CHECK_THROWS_WITH_AS(embed_context(t3, empty, sp3, cfg), doctest::Contains("no source tokens"), hypernet_error);

    // Sequences beyond max_positions error.
    HyperNetConfig tiny = cfg;
    tiny.max_positions = 2;
    auto params_tiny = init_hypernet<double>(tiny);
    Tape<double> t4;
    auto sp4 = stage_params(t4, params_tiny);
    CHECK_THROWS_AS(embed_context(t4, ctx, sp4, tiny), hypernet_error);
}

TEST_CASE("cross_attend basics") {
    SUBCASE("single source token attends with weight one") {
        Rng rng(13);
        const int d = 8;
        HyperNetConfig cfg = desk_config(14);
        cfg.embed_dim = d;
        cfg.heads = 2;
        auto params = init_hypernet<double>(cfg);
        Tape<double> t;
        auto sp = stage_params(t, params);
        Var zt = t.input(rng.normal_mat<double>(3, d));
        Mat<double> source_token = rng.normal_mat<double>(1, d);
        Var zs = t.input(source_token);
        double entropy = 0.0;
        Var h = cross_attend(t, zt, zs, sp, cfg.heads, &entropy);
        CHECK(entropy == doctest::Approx(0.0));  // one key: zero-entropy rows

        // H = (V row) * Wo repeated for every query.
        Mat<double> v = matmul(source_token, params.wv);
        Mat<double> expected = matmul(v, params.wo);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < d; ++j) CHECK(t.val(h)(i, j) == doctest::Approx(expected(0, j)).epsilon(1e-12));
    }

    SUBCASE("identity projections and symmetric keys give half/half weights") {
        const int d = 4;
        HyperNetConfig cfg = desk_config(15);
        cfg.embed_dim = d;
        cfg.heads = 1;
        auto params = init_hypernet<double>(cfg);
        params.wq = identity(d);
        params.wk = identity(d);
        params.wv = identity(d);
        params.wo = identity(d);
        Tape<double> t;
        auto sp = stage_params(t, params);
        Mat<double> keys(2, d);
        keys(0, 0) = 1.0;  // orthogonal, equal norm
        keys(1, 1) = 1.0;
        Mat<double> query(1, d);
        query(0, 0) = 1.0;
        query(0, 1) = 1.0;  // equal logits against both keys
        Var h = cross_attend(t, t.input(query), t.input(keys), sp, 1);
        // Output = 0.5 * k0 + 0.5 * k1.
        CHECK(t.val(h)(0, 0) == doctest::Approx(0.5));
        CHECK(t.val(h)(0, 1) == doctest::Approx(0.5));
        CHECK(t.val(h)(0, 2) == doctest::Approx(0.0));
    }

    SUBCASE("attention entropy of uniform weights is log(n)") {
        const int d = 4;
        HyperNetConfig cfg = desk_config(16);
        cfg.embed_dim = d;
        cfg.heads = 1;
        auto params = init_hypernet<double>(cfg);
        params.wq = Mat<double>(d, d);  // zero queries -> uniform attention
        params.wk = identity(d);
        params.wv = identity(d);
        params.wo = identity(d);
        Rng rng(17);
        Tape<double> t;
        auto sp = stage_params(t, params);
        double entropy = 0.0;
        cross_attend(t, t.input(rng.normal_mat<double>(2, d)), t.input(rng.normal_mat<double>(5, d)), sp, 1,
                     &entropy);
        CHECK(entropy == doctest::Approx(std::log(5.0)).epsilon(1e-12));
    }
}

TEST_CASE("source token permutation leaves attention output unchanged when encodings are off") {
    HyperNetConfig cfg = desk_config(18, 2);
    auto params = init_hypernet<double>(cfg);
    TransferUnit unit = make_unit(16, 16, 8, 2, 19);
    GroupContext ctx = build_context(unit, 8, 8);

    EmbedOptions no_enc;
    no_enc.use_encodings = false;

    Tape<double> t;
    auto sp = stage_params(t, params);
    auto emb = embed_context(t, ctx, sp, cfg, no_enc);
    Var h = cross_attend(t, emb.target, emb.source, sp, cfg.heads);
    const Mat<double> base = t.val(h);

    Rng rng(20);
    for (int trial = 0; trial < 5; ++trial) {
        GroupContext shuffled = ctx;
        for (size_t i = shuffled.source_tokens.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(rng.index(static_cast<int64_t>(i)));
            std::swap(shuffled.source_tokens[i - 1], shuffled.source_tokens[j]);
            std::swap(shuffled.source_descriptors[i - 1], shuffled.source_descriptors[j]);
        }
        Tape<double> t2;
        auto sp2 = stage_params(t2, params);
        auto emb2 = embed_context(t2, shuffled, sp2, cfg, no_enc);
        Var h2 = cross_attend(t2, emb2.target, emb2.source, sp2, cfg.heads);
        for (size_t i = 0; i < base.data.size(); ++i)
            CHECK(std::abs(t2.val(h2).data[i] - base.data[i]) < 1e-12);
    }
}

TEST_CASE("decode_delta") {
    HyperNetConfig cfg = desk_config(21);
    auto params = init_hypernet<double>(cfg);
    TransferUnit unit = make_unit(16, 16, 8, 1, 22);
    GroupContext ctx = build_context(unit, 8, 8);

    SUBCASE("zero-initialized decoder emits exactly zero") {
        Tape<double> t;
        auto sp = stage_params(t, params);
        auto pred = predict_delta(t, ctx, sp, cfg);
        CHECK(t.val(pred.delta_b).rows == 16);
        CHECK(t.val(pred.delta_b).cols == 8);
        for (double v : t.val(pred.delta_b).data) CHECK(v == 0.0);
    }

    SUBCASE("d_out=16, c=8 assembles from exactly 2 decoded blocks") {
        Rng rng(23);
        params.dec_w2 = rng.normal_mat<double>(params.cfg.decoder_hidden, 64, 0.05);
        Tape<double> t;
        auto sp = stage_params(t, params);
        auto emb = embed_context(t, ctx, sp, cfg);
        Var h = cross_attend(t, emb.target, emb.source, sp, cfg.heads);
        Var delta = decode_delta(t, h, ctx, sp);
        CHECK(t.val(delta).rows == 16);
        CHECK(t.val(delta).cols == 8);
        // The two B tokens map to rows [0,8) and [8,16).
        Var decoded = t.val(delta).rows ? delta : delta;  // shape checked above
        (void)decoded;
    }

    SUBCASE("pad rows are dropped, never written") {
        TransferUnit odd = make_unit(16, 13, 8, 1, 24);  // d_out=13 -> 2 B tokens, pad_rows=3
        GroupContext ctx_odd = build_context(odd, 8, 8);
        Rng rng(25);
        params.dec_w2 = rng.normal_mat<double>(params.cfg.decoder_hidden, 64, 0.05);
        Tape<double> t;
        auto sp = stage_params(t, params);
        auto pred = predict_delta(t, ctx_odd, sp, cfg);
        CHECK(t.val(pred.delta_b).rows == 13);
        CHECK(t.val(pred.delta_b).cols == 8);
    }

    SUBCASE("context without B tokens errors") {
        GroupContext no_b = ctx;
        no_b.target_tokens.erase(no_b.target_tokens.begin() + 2, no_b.target_tokens.end());
        no_b.target_descriptors.resize(2);
        Tape<double> t;
        auto sp = stage_params(t, params);
        auto emb = embed_context(t, no_b, sp, cfg);
        Var h = cross_attend(t, emb.target, emb.source, sp, cfg.heads);
        CHECK_THROWS_AS(decode_delta(t, h, no_b, sp), hypernet_error);
    }
}

TEST_CASE("apply_patch") {
    Rng rng(26);
    LoraPair pair = make_pair(0, "up_proj", rng.normal_mat<float>(2, 4), rng.normal_mat<float>(2, 2));

    SUBCASE("alpha = 0 leaves B bit-identical") {
        Mat<double> delta = rng.normal_mat<double>(2, 2);
        LoraPair out = apply_patch(pair, delta, 0.0);
        CHECK(out.B.data == pair.B.data);
        CHECK(out.A.data == pair.A.data);
    }

    SUBCASE("hand-computed patch") {
        LoraPair eye = pair;
        eye.B = Mat<float>(2, 2, {1, 0, 0, 1});
        Mat<double> ones(2, 2);
        for (auto& v : ones.data) v = 1.0;
        LoraPair out = apply_patch(eye, ones, 0.3);
        CHECK(out.B(0, 0) == doctest::Approx(1.3f));
        CHECK(out.B(0, 1) == doctest::Approx(0.3f));
        CHECK(out.B(1, 0) == doctest::Approx(0.3f));
        CHECK(out.B(1, 1) == doctest::Approx(1.3f));
    }

    SUBCASE("zero delta keeps the dense update") {
        Mat<double> zero(2, 2);
        LoraPair out = apply_patch(pair, zero, 0.3);
        CHECK(compute_delta_w(out).data == compute_delta_w(pair).data);
    }

    SUBCASE("shape mismatch errors") {
        CHECK_THROWS_AS(apply_patch(pair, Mat<double>(3, 2), 0.3), hypernet_error);
    }
}

TEST_CASE("stability_bound") {
    SUBCASE("worked example: alpha=0.3, dB=I2, A=diag(2,1)") {
        Mat<double> b = identity(2);
        Mat<double> a(2, 2);
        a(0, 0) = 2.0;
        a(1, 1) = 1.0;
        Mat<double> db = identity(2);
        StabilityBound sb = stability_bound(b, a, db, 0.3);
        CHECK(sb.lhs == doctest::Approx(0.3 * std::sqrt(5.0)).epsilon(1e-12));
        CHECK(sb.frob_identity == doctest::Approx(sb.lhs).epsilon(1e-12));
        CHECK(sb.bound == doctest::Approx(0.3 * std::sqrt(2.0) * 2.0).epsilon(1e-9));
        CHECK(sb.lhs <= sb.bound);
    }

    SUBCASE("scaled identity A achieves equality") {
        Rng rng(27);
        Mat<double> b = rng.normal_mat<double>(3, 3);
        Mat<double> db = rng.normal_mat<double>(3, 3);
        Mat<double> a = identity(3);
        for (auto& v : a.data) v *= 1.7;
        StabilityBound sb = stability_bound(b, a, db, 0.45);
        CHECK(sb.lhs == doctest::Approx(sb.bound).epsilon(1e-9));
    }

    SUBCASE("alpha = 0 gives all zeros") {
        Rng rng(28);
        Mat<double> b = rng.normal_mat<double>(3, 2);
        Mat<double> a = rng.normal_mat<double>(2, 5);
        Mat<double> db = rng.normal_mat<double>(3, 2);
        StabilityBound sb = stability_bound(b, a, db, 0.0);
        CHECK(sb.lhs == 0.0);
        CHECK(sb.frob_identity == 0.0);
        CHECK(sb.bound == 0.0);
    }

    SUBCASE("identity and bound hold over random instances") {
        Rng rng(29);
        for (int trial = 0; trial < 100; ++trial) {
            const int d_out = 1 + static_cast<int>(rng.index(12));
            const int r = 1 + static_cast<int>(rng.index(6));
            const int d_in = 1 + static_cast<int>(rng.index(12));
            Mat<double> b = rng.normal_mat<double>(d_out, r);
            Mat<double> a = rng.normal_mat<double>(r, d_in);
            Mat<double> db = rng.normal_mat<double>(d_out, r);
            const double alpha = rng.uniform(-1.0, 1.0);
            StabilityBound sb = stability_bound(b, a, db, alpha);
            CHECK(sb.lhs == doctest::Approx(sb.frob_identity).epsilon(1e-6));
            CHECK(sb.lhs <= sb.bound * (1.0 + 1e-9) + 1e-14);
        }
    }
}
