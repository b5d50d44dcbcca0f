// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cstring>

#include "lorafuse/pipeline.hpp"
#include "tmpdir.hpp"

using namespace lorafuse;
using testutil::slurp;
using testutil::tmp_path;

namespace {

ScenarioSpec mini_spec() {
    ScenarioSpec spec;
    spec.task_in = 6;
    spec.task_out = 4;
    spec.teacher_hidden = 12;
    spec.rank = 4;
    spec.batch_size = 16;
    spec.replay_batches_per_task = 4;
    spec.eval_batches_per_task = 4;
    spec.expert_lr = 1e-2;
    spec.expert_max_epochs = 300;
    return spec;
}

FusionConfig mini_config(uint64_t seed, const std::string& workspace) {
    FusionConfig cfg = desk_fusion_config(seed);
    cfg.scenario_spec = mini_spec();
    cfg.embed_dim = 16;
    cfg.heads = 2;
    cfg.max_positions = 64;
    cfg.rdm.n_proj = 16;
    cfg.train.epochs = 4;
    cfg.workspace = workspace;
    return cfg;
}

}  // namespace

TEST_CASE("config file parsing and hashing") {
    const std::string text = R"(
# fusion config
[fusion]
target = target.safetensors
sources = a.safetensors, b.safetensors
[train]
lr = 5e-5
epochs = 3
seed = 7
precision = f64
[rdm]
n_proj = 128
[aliases]
wi = up_proj
)";
    ConfigFile file = ConfigFile::parse_string(text);
    FusionConfig cfg = fusion_config_from(file);
    CHECK(cfg.target_path == "target.safetensors");
    REQUIRE(cfg.source_paths.size() == 2);
    CHECK(cfg.source_paths[1] == "b.safetensors");
    CHECK(cfg.train.learning_rate == doctest::Approx(5e-5));
    CHECK(cfg.train.epochs == 3);
    CHECK(cfg.train.seed == 7);
    CHECK(cfg.rdm.n_proj == 128);
    CHECK(cfg.rdm_seed_set == false);
    CHECK(cfg.aliases.at("wi") == "up_proj");
    // Documented defaults fill the gaps.
    CHECK(cfg.train.grad_accum == 8);
    CHECK(cfg.train.lambda_reg == doctest::Approx(0.005));
    CHECK(cfg.train.alpha_init == doctest::Approx(0.3));
    CHECK(cfg.mu_gate == doctest::Approx(0.10));
    CHECK(cfg.embed_dim == 1024);
    CHECK(cfg.heads == 8);
    CHECK(cfg.max_positions == 4096);

    CHECK(file.hash() == ConfigFile::parse_string(text).hash());
    ConfigFile other = ConfigFile::parse_string(text);
    other.set("train", "epochs", "4");
    CHECK(file.hash() != other.hash());

    CHECK_THROWS_AS(ConfigFile::parse_string("key_without_value\n"), config_error);
    CHECK_THROWS_AS(fusion_config_from(ConfigFile::parse_string("[train]\nprecision = f16\n")), config_error);
}

TEST_CASE("run_fusion with zero epochs and zero decoder reproduces the target") {
    FusionConfig cfg = mini_config(5, tmp_path("fuse_zero"));
    cfg.train.epochs = 0;
    FusionProducts products = fuse(cfg);

    // Every delta is zero, so fused bytes equal target bytes.
    for (const auto& row : products.report.rows) {
        CHECK(row.delta_fro == 0.0);
        CHECK(row.lhs == 0.0);
    }
    const std::string fused_bytes = slurp(products.fused_path);
    const std::string target_bytes = slurp(tmp_path("fuse_zero") + "/target.safetensors");
    // Identical tensor payloads; only the family_id metadata may differ.
    AdapterSet fused = load_adapter(products.fused_path);
    AdapterSet target = load_adapter(tmp_path("fuse_zero") + "/target.safetensors");
    REQUIRE(fused.pairs.size() == target.pairs.size());
    for (const auto& [key, pair] : target.pairs) {
        CHECK(fused.pairs.at(key).B.data == pair.B.data);
        CHECK(fused.pairs.at(key).A.data == pair.A.data);
    }
    CHECK(products.metrics.at("fused_eval") == products.metrics.at("target_only_eval"));
}

TEST_CASE("nothing fuseable raises the dedicated error") {
    Rng rng(77);
    AdapterSet target;
    target.family_id = "t";
    target.layer_count = 1;
    LoraPair tp = make_pair(0, "q_proj", rng.normal_mat<float>(4, 8), rng.normal_mat<float>(8, 4));
    target.pairs.emplace(tp.key, tp);

    AdapterSet source;
    source.family_id = "s";
    source.layer_count = 1;
    LoraPair sp = make_pair(0, "up_proj", rng.normal_mat<float>(4, 8), rng.normal_mat<float>(8, 4));
    source.pairs.emplace(sp.key, sp);

    struct NoSurrogate : SurrogateObjective<double> {
        Var loss(Tape<double>& t, const PatchedModel<double>&, const Batch<double>&) const override {
            return t.input(Mat<double>::scalar(0.0));
        }
    } surrogate;
    FusionConfig cfg = mini_config(6, "");
    cfg.train.epochs = 0;
    CHECK_THROWS_AS(run_fusion<double>(cfg, target, {source}, surrogate, {}), nothing_fuseable_error);

    // Validation failures surface as validation_error.
    AdapterSet broken = target;
    broken.pairs.begin()->second.B(0, 0) = std::nanf("");
    CHECK_THROWS_AS(run_fusion<double>(cfg, broken, {source}, surrogate, {}), validation_error);
}

TEST_CASE("trained fusion export preserves A and non-aligned tensors byte-for-byte") {
    const std::string ws = tmp_path("fuse_trained");
    FusionConfig cfg = mini_config(7, ws);
    cfg.output_deltas = ws + "/deltas.safetensors";
    cfg.output_losses = ws + "/losses.csv";
    cfg.output_checkpoint = ws + "/hypernet.safetensors";
    FusionProducts products = fuse(cfg);
    REQUIRE(!products.report.rows.empty());

    AdapterSet target = load_adapter(ws + "/target.safetensors");
    AdapterSet fused = load_adapter(products.fused_path);
    CHECK(validate_adapter(fused).empty());

    bool some_delta_nonzero = false;
    for (const auto& row : products.report.rows) {
        CHECK(row.lhs <= row.bound * (1.0 + 1e-9) + 1e-14);
        CHECK(row.lhs == doctest::Approx(row.frob_identity).epsilon(1e-6));
        some_delta_nonzero = some_delta_nonzero || row.delta_fro > 0.0;
    }
    CHECK(some_delta_nonzero);

    for (const auto& [key, pair] : target.pairs) {
        const LoraPair& out = fused.pairs.at(key);
        CHECK(std::memcmp(out.A.data.data(), pair.A.data.data(), pair.A.data.size() * 4) == 0);
    }

    // Report consistency: recompute the bound quantities from the exported
    // file and the logged deltas.
    AdapterSet deltas = load_adapter(cfg.output_deltas);
    REQUIRE(deltas.extras.size() == products.report.rows.size());
    for (size_t i = 0; i < products.report.rows.size(); ++i) {
        const ReportRow& row = products.report.rows[i];
        const TensorRecord* rec = nullptr;
        for (const auto& r : deltas.extras)
            if (r.name.find(row.module_type) != std::string::npos &&
                r.name.find("layers." + std::to_string(row.layer) + ".") != std::string::npos)
                rec = &r;
        REQUIRE(rec != nullptr);
        Mat<double> delta(static_cast<int>(rec->shape[0]), static_cast<int>(rec->shape[1]));
        for (size_t j = 0; j < rec->data.size(); ++j) delta.data[j] = static_cast<double>(rec->data[j]);

        ModuleKey key{row.layer, row.module_type, row.rank};
        const LoraPair& target_pair = target.pairs.at(key);
        StabilityBound sb = stability_bound(target_pair, delta, row.alpha);
        CHECK(sb.lhs == doctest::Approx(row.lhs).epsilon(1e-6));
        CHECK(sb.bound == doctest::Approx(row.bound).epsilon(1e-6));

        // Exported B equals target B + alpha * delta; the logged delta is
        // itself f32-rounded, so allow ulp-level slack here (the exact
        // one-addition check runs against the in-memory deltas below).
        const LoraPair& fused_pair = fused.pairs.at(key);
        for (size_t j = 0; j < fused_pair.B.data.size(); ++j) {
            const float expected =
                static_cast<float>(static_cast<double>(target_pair.B.data[j]) + row.alpha * delta.data[j]);
            CHECK(fused_pair.B.data[j] == doctest::Approx(expected).epsilon(1e-6));
        }
    }

    // The loss curve and checkpoint landed on disk.
    CHECK(!slurp(cfg.output_losses).empty());
    AdapterSet checkpoint = load_adapter(cfg.output_checkpoint);
    CHECK(!checkpoint.extras.empty());
}

TEST_CASE("fused B equals B + alpha*dB within one f32 addition of the in-memory deltas") {
    Rng rng(55);
    SyntheticFamily fam = gen_family(FamilyShape{"t", 2, 12}, 6, 4, 56);
    AdapterSet target = noise_adapter(fam, 4, 57, 0.15);
    SyntheticFamily src_fam = gen_family(FamilyShape{"s", 3, 10}, 6, 4, 58);
    std::vector<AdapterSet> sources = {noise_adapter(src_fam, 4, 59, 0.2)};

    FusionConfig cfg = mini_config(60, "");
    cfg.embed_dim = 16;
    cfg.heads = 2;
    cfg.train.epochs = 2;
    FamilySurrogate<double> surrogate(fam);
    Teacher teacher = gen_teacher(6, 4, 12, 61);
    std::vector<Batch<double>> replay = task_batches(teacher, 6, 4, 8, 62);
    FusionOutcome<double> outcome = run_fusion<double>(cfg, target, sources, surrogate, replay);

    REQUIRE(outcome.units.size() == outcome.unit_deltas.size());
    for (size_t i = 0; i < outcome.units.size(); ++i) {
        const ModuleKey& key = outcome.units[i].target_pair.key;
        const LoraPair& fused_pair = outcome.fused.pairs.at(key);
        const LoraPair& target_pair = target.pairs.at(key);
        const double alpha = outcome.report.rows[i].alpha;
        for (size_t j = 0; j < fused_pair.B.data.size(); ++j) {
            const float expected = static_cast<float>(static_cast<double>(target_pair.B.data[j]) +
                                                      alpha * outcome.unit_deltas[i].data[j]);
            CHECK(fused_pair.B.data[j] == expected);
        }
        CHECK(fused_pair.A.data == target_pair.A.data);
    }
}

TEST_CASE("mixed-rank groups run through the shared token geometry") {
    Rng rng(91);
    auto square_pair = [&](int layer, const char* type, int rank, int width) {
        return make_pair(layer, type, rng.normal_mat<float>(rank, width), rng.normal_mat<float>(width, rank));
    };
    AdapterSet target;
    target.family_id = "t";
    target.layer_count = 1;
    for (auto& p : {square_pair(0, "q_proj", 4, 16), square_pair(0, "up_proj", 8, 16)})
        target.pairs.emplace(p.key, p);
    AdapterSet source;
    source.family_id = "s";
    source.layer_count = 2;
    for (auto& p : {square_pair(1, "q_proj", 4, 12), square_pair(1, "up_proj", 8, 12)})
        source.pairs.emplace(p.key, p);

    struct NoSurrogate : SurrogateObjective<double> {
        Var loss(Tape<double>& t, const PatchedModel<double>&, const Batch<double>&) const override {
            return t.input(Mat<double>::scalar(0.0));
        }
    } surrogate;

    FusionConfig cfg = mini_config(92, "");
    cfg.embed_dim = 16;
    cfg.heads = 2;
    cfg.train.epochs = 0;

    // Warm start with a randomized decoder so deltas are nonzero and flow
    // through the column padding/slicing path.
    FusionOutcome<double> init = run_fusion<double>(cfg, target, {source}, surrogate, {});
    Rng rng2(93);
    init.params.dec_w2 = rng2.normal_mat<double>(init.params.dec_w2.rows, init.params.dec_w2.cols, 0.05);
    FusionOutcome<double> out = run_fusion<double>(cfg, target, {source}, surrogate, {}, &init.params);

    REQUIRE(out.units.size() == 2);
    for (size_t i = 0; i < out.units.size(); ++i) {
        const auto& unit = out.units[i];
        CHECK(out.unit_deltas[i].rows == 16);
        CHECK(out.unit_deltas[i].cols == unit.group.rank);  // 4 for q_proj, 8 for up_proj
        CHECK(out.unit_deltas[i].all_finite());
        CHECK(fro_norm(out.unit_deltas[i]) > 0.0);
        CHECK(out.report.rows[i].lhs <= out.report.rows[i].bound * (1 + 1e-9));
    }
}

TEST_CASE("export_from_checkpoint reproduces the trained transfer") {
    const std::string ws = tmp_path("fuse_ckpt");
    FusionConfig cfg = mini_config(8, ws);
    cfg.output_checkpoint = ws + "/hypernet.safetensors";
    FusionProducts trained = fuse(cfg);

    FusionConfig cfg2 = mini_config(8, ws + "_replay");
    FusionProducts replayed = export_from_checkpoint(cfg2, cfg.output_checkpoint);
    REQUIRE(replayed.report.rows.size() == trained.report.rows.size());
    for (size_t i = 0; i < trained.report.rows.size(); ++i) {
        // f32 checkpoint storage rounds the parameters once.
        CHECK(replayed.report.rows[i].delta_fro ==
              doctest::Approx(trained.report.rows[i].delta_fro).epsilon(1e-4));
    }
}

TEST_CASE("f32 precision trains end to end") {
    FusionConfig cfg = mini_config(44, tmp_path("fuse_f32"));
    cfg.train.precision = "f32";
    cfg.train.epochs = 3;
    FusionProducts products = fuse(cfg);
    REQUIRE(!products.report.rows.empty());
    for (const auto& row : products.report.rows) {
        CHECK(std::isfinite(row.delta_fro));
        CHECK(row.lhs <= row.bound * (1 + 1e-9) + 1e-14);
        CHECK(row.lhs == doctest::Approx(row.frob_identity).epsilon(1e-6));
    }
    CHECK(std::isfinite(products.metrics.at("fused_eval")));
    // Same config in f64 differs numerically but reaches a similar loss scale.
    FusionConfig cfg64 = cfg;
    cfg64.train.precision = "f64";
    cfg64.workspace = tmp_path("fuse_f64");
    FusionProducts p64 = fuse(cfg64);
    CHECK(products.metrics.at("fused_eval") ==
          doctest::Approx(p64.metrics.at("fused_eval")).epsilon(0.25));
}

TEST_CASE("pure-noise sources never degrade the fused model beyond 5% of target-only") {
    for (uint64_t seed : {1, 3}) {
        TransferScenario s = build_scenario("noisy-source", seed);
        std::vector<AdapterSet> sources = {s.source_adapters[1], s.source_adapters[2]};  // noise only
        auto replay = scenario_replay(s, {1, 2});  // target task alone
        auto eval = scenario_eval(s, {1, 2});
        FusionConfig cfg = desk_fusion_config(seed);
        FamilySurrogate<double> surrogate(s.target_family);
        auto out = run_fusion<double>(cfg, s.target_adapter, sources, surrogate, replay);
        const double fused = eval_adapter(s.target_family, out.fused, eval);
        const double target_only = eval_adapter(s.target_family, s.target_adapter, eval);
        INFO("seed ", seed, " fused=", fused, " target_only=", target_only);
        CHECK(fused <= 1.05 * target_only);
    }
}

TEST_CASE("sweep echoes values in order and a singleton sweep bit-matches the single run") {
    FusionConfig cfg = mini_config(9, tmp_path("sweep"));
    cfg.train.epochs = 2;

    FusionProducts single = fuse(cfg);
    auto rows = sweep(cfg, "alpha_init", {0.3});
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].value == 0.3);
    CHECK(rows[0].metrics.at("fused_eval") == single.metrics.at("fused_eval"));
    CHECK(rows[0].metrics.at("target_only_eval") == single.metrics.at("target_only_eval"));

    auto multi = sweep(cfg, "mu_gate", {-0.1, 0.1});
    REQUIRE(multi.size() == 2);
    CHECK(multi[0].value == -0.1);
    CHECK(multi[1].value == 0.1);
    for (const auto& row : multi)
        for (const auto& [key, value] : row.metrics) CHECK(std::isfinite(value));

    CHECK_THROWS_AS(sweep(cfg, "alpha_init", {}), config_error);
    CHECK_THROWS_AS(sweep(cfg, "unknown", {0.1}), config_error);
}
