// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <set>

#include "lorafuse/rng.hpp"
#include "lorafuse/topology.hpp"

using namespace lorafuse;

namespace {

AdapterSet set_with(const std::vector<std::tuple<int, std::string, int>>& modules, int d_in = 16, int d_out = 16,
                    uint64_t seed = 1) {
    Rng rng(seed);
    AdapterSet set;
    set.family_id = "fam";
    int max_layer = 0;
    for (const auto& [layer, type, rank] : modules) {
        LoraPair pair = make_pair(layer, type, rng.normal_mat<float>(rank, d_in), rng.normal_mat<float>(d_out, rank));
        set.pairs.emplace(pair.key, std::move(pair));
        max_layer = std::max(max_layer, layer);
    }
    set.layer_count = max_layer + 1;
    return set;
}

}  // namespace

TEST_CASE("classify_module parses the PEFT naming") {
    auto c = classify_module("base_model.model.layers.5.self_attn.q_proj.lora_A.weight");
    CHECK(c.layer == 5);
    CHECK(c.module_type == "q_proj");
    CHECK(c.factor == LoraFactor::A);

    c = classify_module("base_model.model.layers.2.mlp.down_proj.lora_B.weight");
    CHECK(c.layer == 2);
    CHECK(c.module_type == "down_proj");
    CHECK(c.factor == LoraFactor::B);

    CHECK_THROWS_WITH_AS(classify_module("embed_tokens.weight"), doctest::Contains("unclassifiable"), topology_error);
    CHECK_THROWS_AS(classify_module("base_model.model.h.0.q_proj.lora_A.weight"), topology_error);
}

TEST_CASE("map_layer tail alignment") {
    CHECK(map_layer(4, 6, 0) == 2);
    CHECK(map_layer(4, 6, 3) == 5);
    CHECK(map_layer(32, 32, 17) == 17);
    CHECK(map_layer(4, 3, 0) == 0);  // clamped
    CHECK_THROWS_AS(map_layer(4, 6, 4), topology_error);
    CHECK_THROWS_AS(map_layer(4, 6, -1), topology_error);
}

TEST_CASE("map_layer properties hold exhaustively for all depths <= 16") {
    for (int lt = 1; lt <= 16; ++lt) {
        for (int ls = 1; ls <= 16; ++ls) {
            CHECK(map_layer(lt, ls, lt - 1) == ls - 1);  // tail anchor
            int prev = map_layer(lt, ls, 0);
            for (int l = 0; l < lt; ++l) {
                const int cur = map_layer(lt, ls, l);
                CHECK(cur >= 0);
                CHECK(cur < ls);
                CHECK(prev <= cur);  // monotone
                prev = cur;
                if (lt == ls) CHECK(cur == l);  // identity at equal depth
            }
        }
    }
}

TEST_CASE("build_groups activates only target-and-source matches") {
    AdapterSet target = set_with({{0, "q_proj", 8}});
    AdapterSet src = set_with({{0, "q_proj", 8}, {0, "up_proj", 8}});
    auto groups = build_groups(target, {src});
    REQUIRE(groups.size() == 1);
    CHECK(groups[0].module_type == "q_proj");
    CHECK(groups[0].rank == 8);
    CHECK(groups[0].group_id == "q_proj.r8");

    // Rank mismatch deactivates.
    AdapterSet src16 = set_with({{0, "q_proj", 16}});
    CHECK(build_groups(target, {src16}).empty());
}

TEST_CASE("build_groups matches the enumeration oracle on the full vocabulary") {
    std::vector<std::tuple<int, std::string, int>> all;
    for (const auto& type : canonical_module_vocabulary()) all.push_back({0, type, 8});
    AdapterSet target = set_with(all);
    AdapterSet s1 = set_with(all, 16, 16, 2);
    AdapterSet s2 = set_with(all, 16, 16, 3);
    auto groups = build_groups(target, {s1, s2});
    CHECK(groups.size() == 7);

    // Enumeration oracle over randomized vocabularies.
    Rng rng(99);
    const auto& vocab = canonical_module_vocabulary();
    for (int trial = 0; trial < 50; ++trial) {
        auto pick = [&](uint64_t) {
            std::vector<std::tuple<int, std::string, int>> mods;
            for (const auto& type : vocab) {
                if (rng.uniform() < 0.5) continue;
                const int rank = rng.uniform() < 0.3 ? 4 : 8;
                mods.push_back({0, type, rank});
            }
            return mods;
        };
        auto t_mods = pick(0);
        auto s_mods = pick(1);
        if (t_mods.empty() || s_mods.empty()) continue;
        AdapterSet t = set_with(t_mods);
        AdapterSet s = set_with(s_mods);
        auto got = build_groups(t, {s});

        std::set<std::pair<std::string, int>> expected;
        for (const auto& [l1, type1, r1] : t_mods)
            for (const auto& [l2, type2, r2] : s_mods)
                if (type1 == type2 && r1 == r2) expected.insert({type1, r1});
        CHECK(got.size() == expected.size());
        for (const auto& g : got) CHECK(expected.count({g.module_type, g.rank}) == 1);
        // Deterministic ordering: type lexicographic, then rank.
        for (size_t i = 1; i < got.size(); ++i)
            CHECK((got[i - 1].module_type < got[i].module_type ||
                   (got[i - 1].module_type == got[i].module_type && got[i - 1].rank < got[i].rank)));
    }
}

TEST_CASE("group activation ignores source order") {
    AdapterSet target = set_with({{0, "q_proj", 8}, {0, "up_proj", 8}});
    AdapterSet s1 = set_with({{0, "q_proj", 8}});
    AdapterSet s2 = set_with({{0, "up_proj", 8}});
    auto g12 = build_groups(target, {s1, s2});
    auto g21 = build_groups(target, {s2, s1});
    REQUIRE(g12.size() == g21.size());
    for (size_t i = 0; i < g12.size(); ++i) CHECK(g12[i].group_id == g21[i].group_id);
}

TEST_CASE("alias table maps foreign tokens onto the vocabulary") {
    AdapterSet target = set_with({{0, "up_proj", 8}});
    AdapterSet src = set_with({{0, "wi", 8}});
    CHECK(build_groups(target, {src}).empty());
    AliasTable aliases{{"wi", "up_proj"}};
    auto groups = build_groups(target, {src}, aliases);
    REQUIRE(groups.size() == 1);
    CHECK(groups[0].module_type == "up_proj");
}

TEST_CASE("select_active_units gathers mapped source pairs") {
    AdapterSet target = set_with({{0, "q_proj", 8}, {1, "q_proj", 8}});
    AdapterSet s1 = set_with({{0, "q_proj", 8}, {1, "q_proj", 8}});
    AdapterSet s2 = set_with({{0, "q_proj", 8}, {1, "q_proj", 8}});
    auto groups = build_groups(target, {s1, s2});
    std::vector<LayerMap> maps = {{0, 2, 2}, {1, 2, 2}};

    SUBCASE("both sources present everywhere") {
        auto units = select_active_units(groups, target, {s1, s2}, maps);
        REQUIRE(units.size() == 2);
        for (const auto& u : units) {
            CHECK(u.source_pairs.size() == 2);
            CHECK(u.source_pairs[0].first == 0);
            CHECK(u.source_pairs[1].first == 1);
        }
    }

    SUBCASE("a source missing at the mapped layer drops out of that unit") {
        AdapterSet s2_missing = set_with({{0, "q_proj", 8}});
        s2_missing.layer_count = 2;
        auto units = select_active_units(groups, target, {s1, s2_missing}, maps);
        REQUIRE(units.size() == 2);
        CHECK(units[0].source_pairs.size() == 2);
        CHECK(units[1].source_pairs.size() == 1);
        CHECK(units[1].source_pairs[0].first == 0);
    }

    SUBCASE("units with no sources at all are excluded") {
        AdapterSet s1_missing = set_with({{0, "q_proj", 8}});
        s1_missing.layer_count = 2;
        AdapterSet s2_missing = set_with({{0, "q_proj", 8}});
        s2_missing.layer_count = 2;
        auto units = select_active_units(groups, target, {s1_missing, s2_missing}, maps);
        CHECK(units.size() == 1);
        CHECK(units[0].target_layer == 0);
    }
}
