// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "lorafuse/harness.hpp"

using namespace lorafuse;

namespace {

// Small enough to train in well under a second.
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

}  // namespace

TEST_CASE("gen_family determinism and moments") {
    FamilyShape shape{"fam-a", 3, 24};
    SyntheticFamily f1 = gen_family(shape, 6, 4, 42);
    SyntheticFamily f2 = gen_family(shape, 6, 4, 42);
    CHECK(f1.w_embed.data == f2.w_embed.data);
    CHECK(f1.base[2][1].data == f2.base[2][1].data);
    SyntheticFamily f3 = gen_family(shape, 6, 4, 43);
    CHECK(f1.w_embed.data != f3.w_embed.data);

    // Declared init scale: He-style variance 2/width on the hidden blocks.
    double acc = 0.0;
    for (float v : f1.base[0][0].data) {
        CHECK(std::isfinite(v));
        acc += static_cast<double>(v) * v;
    }
    const double var = acc / static_cast<double>(f1.base[0][0].data.size());
    CHECK(var == doctest::Approx(2.0 / 24).epsilon(0.25));
}

TEST_CASE("scenario families are heterogeneous") {
    TransferScenario s = build_scenario("single-source", 3, mini_spec());
    CHECK(s.target_family.depth != s.source_families[0].depth);
    CHECK(s.target_family.width != s.source_families[0].width);
}

TEST_CASE("init_adapter carries a zero update; noise_adapter does not") {
    SyntheticFamily fam = gen_family(FamilyShape{"f", 2, 16}, 6, 4, 5);
    AdapterSet fresh = init_adapter(fam, 4, 6);
    CHECK(fresh.pairs.size() == 4);  // 2 layers x {up, down}
    for (const auto& [key, pair] : fresh.pairs) {
        CHECK(key.rank == 4);
        for (float v : pair.B.data) CHECK(v == 0.0f);
    }
    CHECK(validate_adapter(fresh).empty());

    AdapterSet noisy = noise_adapter(fam, 4, 7);
    double norm = 0.0;
    for (const auto& [key, pair] : noisy.pairs) norm += fro_norm(pair.B);
    CHECK(norm > 0.0);
}

TEST_CASE("experts specialize: own task converges, foreign task stays high") {
    ScenarioSpec spec = mini_spec();
    SyntheticFamily fam = gen_family(FamilyShape{"f", 2, 16}, spec.task_in, spec.task_out, 11);
    Teacher own = gen_teacher(spec.task_in, spec.task_out, spec.teacher_hidden, 12);
    Teacher foreign = gen_teacher(spec.task_in, spec.task_out, spec.teacher_hidden, 13);
    auto own_data = task_batches(own, spec.task_in, spec.replay_batches_per_task, spec.batch_size, 14);
    auto foreign_data = task_batches(foreign, spec.task_in, spec.eval_batches_per_task, spec.batch_size, 15);

    AdapterSet adapter = init_adapter(fam, spec.rank, 16);
    const double foreign_initial = eval_adapter(fam, adapter, foreign_data);

    AdapterTrainOptions opts;
    opts.lr = spec.expert_lr;
    opts.max_epochs = spec.expert_max_epochs;
    opts.target_fraction = 0.1;
    AdapterTrainResult result = train_adapter_direct(fam, adapter, own_data, opts);
    CHECK(result.converged);
    CHECK(result.final_loss < 0.1 * result.initial_loss);

    const double foreign_after = eval_adapter(fam, adapter, foreign_data);
    CHECK(foreign_after >= 0.5 * foreign_initial);
}

TEST_CASE("scenario build is deterministic under a fixed seed") {
    ScenarioSpec spec = mini_spec();
    TransferScenario s1 = build_scenario("single-source", 21, spec);
    TransferScenario s2 = build_scenario("single-source", 21, spec);
    CHECK(s1.target_adapter.pairs.begin()->second.B.data == s2.target_adapter.pairs.begin()->second.B.data);
    CHECK(s1.source_adapters[0].pairs.begin()->second.B.data == s2.source_adapters[0].pairs.begin()->second.B.data);

    auto r1 = scenario_replay(s1);
    auto r2 = scenario_replay(s2);
    REQUIRE(r1.size() == r2.size());
    CHECK(r1[0].inputs.data == r2[0].inputs.data);
    // Replay and eval draws are disjoint streams.
    auto e1 = scenario_eval(s1);
    CHECK(e1[0].inputs.data != r1[0].inputs.data);
}

TEST_CASE("noisy-source scenario marks noise adapters and keeps their tasks out of replay") {
    ScenarioSpec spec = mini_spec();
    TransferScenario s = build_scenario("noisy-source", 31, spec);
    REQUIRE(s.source_adapters.size() == 3);
    CHECK(s.noise_sources == std::vector<int>{1, 2});
    // Replay covers target + one useful source task only.
    auto replay = scenario_replay(s);
    CHECK(replay.size() == static_cast<size_t>(2 * spec.replay_batches_per_task));
}
