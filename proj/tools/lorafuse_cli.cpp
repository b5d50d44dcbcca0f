// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "lorafuse/context.hpp"
#include "lorafuse/harness.hpp"
#include "lorafuse/pipeline.hpp"

namespace {

using namespace lorafuse;

int cmd_inspect(const std::string& path) {
    LoadReport report;
    AdapterSet set = load_adapter(path, &report);
    int s_len = 1;
    for (const auto& [key, pair] : set.pairs) s_len = std::max(s_len, key.rank);

    std::printf("unit_id,segment,position");
    for (int i = 1; i <= s_len; ++i) std::printf(",s%d", i);
    std::printf("\n");
    for (const auto& [key, pair] : set.pairs) {
        auto emit = [&](const std::vector<BlockToken>& tokens) {
            for (const auto& tok : tokens) {
                SvdDescriptor desc = svd_descriptor(tok, s_len);
                std::printf("%s,%s,%d", key.str().c_str(), segment_name(tok.segment), tok.position);
                for (double v : desc.values) std::printf(",%.9g", v);
                std::printf("\n");
            }
        };
        emit(blockify(transpose(pair.A), key.rank, Segment::TargetA));
        emit(blockify(pair.B, key.rank, Segment::TargetB));
    }
    for (const auto& name : report.unrecognized) std::fprintf(stderr, "note: unrecognized tensor %s\n", name.c_str());
    for (const auto& t : report.unknown_module_types)
        std::fprintf(stderr, "note: unknown module type %s (excluded from fusion)\n", t.c_str());
    return 0;
}

int cmd_align(const std::string& target_path, const std::vector<std::string>& source_paths) {
    AdapterSet target = load_adapter(target_path);
    std::vector<AdapterSet> sources;
    for (const auto& p : source_paths) sources.push_back(load_adapter(p));

    for (size_t k = 0; k < sources.size(); ++k) {
        std::printf("layer map pi_%zu (%s -> %s), L_t=%d L_s=%d\n", k, target.family_id.c_str(),
                    sources[k].family_id.c_str(), target.layer_count, sources[k].layer_count);
        for (int l = 0; l < target.layer_count; ++l)
            std::printf("  %d -> %d\n", l, map_layer(target.layer_count, sources[k].layer_count, l));
    }

    auto groups = build_groups(target, sources);
    std::printf("active groups: %zu\n", groups.size());
    std::printf("group_id,module_type,rank\n");
    for (const auto& g : groups) std::printf("%s,%s,%d\n", g.group_id.c_str(), g.module_type.c_str(), g.rank);

    std::vector<LayerMap> maps;
    for (size_t k = 0; k < sources.size(); ++k)
        maps.push_back(LayerMap{static_cast<int>(k), target.layer_count, sources[k].layer_count});
    auto units = select_active_units(groups, target, sources, maps);
    std::printf("active units: %zu\n", units.size());
    return groups.empty() ? 2 : 0;
}

int cmd_verify(const std::string& path) {
    AdapterSet set = load_adapter(path);
    auto violations = validate_adapter(set);
    for (const auto& v : violations) std::printf("violation: %s\n", v.c_str());

    // Determinism probe: saving twice must produce identical bytes.
    const std::string tmp1 = path + ".verify1.tmp";
    const std::string tmp2 = path + ".verify2.tmp";
    save_adapter(set, tmp1);
    save_adapter(set, tmp2);
    std::ifstream a(tmp1, std::ios::binary), b(tmp2, std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    std::remove(tmp1.c_str());
    std::remove(tmp2.c_str());
    if (sa != sb) {
        std::printf("violation: save is not deterministic\n");
        return 1;
    }
    std::printf("%s: %zu pairs, %d layers, %zu extra tensors, %zu violations\n", path.c_str(), set.pairs.size(),
                set.layer_count, set.extras.size(), violations.size());
    return violations.empty() ? 0 : 1;
}

void print_metrics(const std::map<std::string, double>& metrics) {
    std::printf("metric,value\n");
    for (const auto& [key, value] : metrics) std::printf("%s,%.17g\n", key.c_str(), value);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"heterogeneous LoRA adapter fusion toolkit"};
    app.require_subcommand(1);

    std::string adapter_path;
    auto* inspect = app.add_subcommand("inspect", "dump per-token singular-value descriptors as CSV");
    inspect->add_option("adapter", adapter_path, "adapter file")->required();

    std::string align_target;
    std::vector<std::string> align_sources;
    auto* align = app.add_subcommand("align", "print layer maps and the active group matrix");
    align->add_option("target", align_target, "target adapter")->required();
    align->add_option("sources", align_sources, "source adapters")->required()->expected(-1);

    std::string fuse_config;
    auto* fuse_cmd = app.add_subcommand("fuse", "align, train, and export the fused adapter");
    fuse_cmd->add_option("-c,--config", fuse_config, "fusion config file")->required();

    std::string export_config, export_checkpoint;
    auto* export_cmd = app.add_subcommand("export", "re-run the transfer from a checkpoint and export");
    export_cmd->add_option("-c,--config", export_config, "fusion config file")->required();
    export_cmd->add_option("--checkpoint", export_checkpoint, "hypernet checkpoint")->required();

    std::string verify_path;
    auto* verify = app.add_subcommand("verify", "run the adapter invariant suite");
    verify->add_option("adapter", verify_path, "adapter file")->required();

    std::string sweep_config, sweep_param, sweep_out;
    std::vector<double> sweep_values;
    auto* sweep_cmd = app.add_subcommand("sweep", "re-run fusion across parameter values");
    sweep_cmd->add_option("-c,--config", sweep_config, "fusion config file")->required();
    sweep_cmd->add_option("--param", sweep_param, "alpha_init or mu_gate")->required();
    sweep_cmd->add_option("--values", sweep_values, "values to sweep")->required()->expected(-1);
    sweep_cmd->add_option("--out", sweep_out, "output CSV path");

    std::string harness_preset = "single-source";
    uint64_t harness_seed = 1;
    auto* harness_cmd = app.add_subcommand("harness", "run a synthetic transfer scenario end to end");
    harness_cmd->add_option("--preset", harness_preset,
                            "single-source | multi-source | noisy-source | anchor-variants");
    harness_cmd->add_option("--seed", harness_seed, "scenario seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*inspect) return cmd_inspect(adapter_path);
        if (*align) return cmd_align(align_target, align_sources);
        if (*verify) return cmd_verify(verify_path);
        if (*fuse_cmd) {
            FusionProducts products = lorafuse::fuse(load_fusion_config(fuse_config));
            if (!products.fused_path.empty()) std::printf("fused adapter: %s\n", products.fused_path.c_str());
            if (!products.report_path.empty()) std::printf("report: %s\n", products.report_path.c_str());
            print_metrics(products.metrics);
            return 0;
        }
        if (*export_cmd) {
            FusionProducts products = export_from_checkpoint(load_fusion_config(export_config), export_checkpoint);
            if (!products.fused_path.empty()) std::printf("fused adapter: %s\n", products.fused_path.c_str());
            print_metrics(products.metrics);
            return 0;
        }
        if (*sweep_cmd) {
            auto rows = lorafuse::sweep(load_fusion_config(sweep_config), sweep_param, sweep_values);
            if (!sweep_out.empty()) write_sweep_csv(rows, sweep_param, sweep_out);
            std::printf("%s", sweep_param.c_str());
            if (!rows.empty())
                for (const auto& [key, value] : rows.front().metrics) std::printf(",%s", key.c_str());
            std::printf("\n");
            for (const auto& row : rows) {
                std::printf("%.17g", row.value);
                for (const auto& [key, value] : row.metrics) std::printf(",%.17g", value);
                std::printf("\n");
            }
            return 0;
        }
        if (*harness_cmd) {
            auto metrics = run_experiment(harness_preset, harness_seed, desk_fusion_config(harness_seed));
            print_metrics(metrics);
            return 0;
        }
    } catch (const nothing_fuseable_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const training_abort_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
