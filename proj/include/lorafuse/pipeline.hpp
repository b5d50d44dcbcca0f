// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include "lorafuse/config.hpp"
#include "lorafuse/harness.hpp"

namespace lorafuse {

struct validation_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct nothing_fuseable_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct FusionConfig {
    // [fusion]
    std::string target_path;
    std::vector<std::string> source_paths;
    std::string output_adapter;
    std::string output_report;
    std::string output_deltas;
    std::string output_checkpoint;
    std::string output_losses;
    std::string workspace;
    // [context]
    int block_rows = 0;  // 0: run-wide max rank
    int s_len = 0;       // 0: run-wide max rank
    // [hypernet]
    int embed_dim = 1024;
    int heads = 8;
    int max_positions = 4096;
    // [gate]
    double mu_gate = 0.10;
    // [rdm]
    RdmConfig rdm;
    bool rdm_seed_set = false;  // unset: bank seed follows the train seed
    // [train]
    TrainConfig train;
    // [aliases]
    AliasTable aliases;
    // [surrogate]
    std::string surrogate_kind;  // "" (file mode, transfer only) or "scenario"
    std::string scenario_preset = "single-source";
    uint64_t scenario_seed = 1;
    ScenarioSpec scenario_spec;

    std::string config_hash;
};

FusionConfig fusion_config_from(const ConfigFile& file);
FusionConfig load_fusion_config(const std::string& path);

struct ReportRow {
    std::string unit_id;
    std::string group_id;
    std::string module_type;
    int rank = 0;
    int layer = 0;
    double alpha = 0.0;
    double delta_fro = 0.0;
    double lhs = 0.0;
    double frob_identity = 0.0;
    double bound = 0.0;
    double attention_entropy = 0.0;
};

struct FusionReport {
    std::vector<ReportRow> rows;
    uint64_t seed = 0;
    std::string config_hash;
};

template <class S>
struct FusionOutcome {
    AdapterSet fused;
    FusionReport report;
    std::vector<StepLoss> curve;
    HyperNetParams<S> params;
    std::vector<TransferUnit> units;
    std::vector<Mat<double>> unit_deltas;
};

/// Align, train under the joint objective, run the transfer once more, and
/// patch a copy of the target. The input sets are never mutated. A warm-start
/// parameter set (e.g. a loaded checkpoint) replaces the fresh initialization.
template <class S>
FusionOutcome<S> run_fusion(const FusionConfig& cfg, const AdapterSet& target, const std::vector<AdapterSet>& sources,
                            const SurrogateObjective<S>& surrogate, const std::vector<Batch<S>>& replay,
                            const HyperNetParams<S>* warm_start = nullptr) {
    {
        auto violations = validate_adapter(target);
        for (const auto& src : sources) {
            auto more = validate_adapter(src);
            violations.insert(violations.end(), more.begin(), more.end());
        }
        if (!violations.empty()) {
            std::string msg = "adapter validation failed:";
            for (const auto& v : violations) msg += "\n  " + v;
            throw validation_error(msg);
        }
    }

    auto groups = build_groups(target, sources, cfg.aliases);
    if (groups.empty()) throw nothing_fuseable_error("nothing fuseable: no (module type, rank) overlap");

    int max_rank = 0;
    for (const auto& g : groups) max_rank = std::max(max_rank, g.rank);
    const int token_cols = max_rank;
    const int block_rows = cfg.block_rows > 0 ? cfg.block_rows : max_rank;
    const int s_len = cfg.s_len > 0 ? cfg.s_len : max_rank;

    std::vector<LayerMap> maps;
    for (size_t k = 0; k < sources.size(); ++k)
        maps.push_back(LayerMap{static_cast<int>(k), target.layer_count, sources[k].layer_count});
    auto units = select_active_units(groups, target, sources, maps, cfg.aliases);
    if (units.empty()) throw nothing_fuseable_error("nothing fuseable: no unit has a mapped source pair");

    std::vector<GroupContext> contexts;
    contexts.reserve(units.size());
    for (const auto& unit : units) contexts.push_back(build_context(unit, block_rows, s_len, token_cols));

    HyperNetConfig hcfg;
    hcfg.embed_dim = cfg.embed_dim;
    hcfg.heads = cfg.heads;
    hcfg.max_positions = cfg.max_positions;
    hcfg.block_rows = block_rows;
    hcfg.token_cols = token_cols;
    hcfg.s_len = s_len;
    hcfg.mu_gate = cfg.mu_gate;
    hcfg.alpha_init = cfg.train.alpha_init;
    hcfg.n_sources = static_cast<int>(sources.size());
    hcfg.n_groups = static_cast<int>(groups.size());
    hcfg.seed = cfg.train.seed;

    RdmConfig rdm = cfg.rdm;
    if (!cfg.rdm_seed_set) rdm.seed = cfg.train.seed;

    HyperNetParams<S> params = init_hypernet<S>(hcfg);
    if (warm_start) {
        if (warm_start->cfg.n_groups != hcfg.n_groups || warm_start->cfg.n_sources != hcfg.n_sources ||
            warm_start->cfg.embed_dim != hcfg.embed_dim)
            throw validation_error("warm start parameters do not match this fusion's geometry");
        params = *warm_start;
    }

    FusionOutcome<S> out;
    AdapterSet live = target;
    TrainerState<S> trainer = make_trainer<S>(live, contexts, static_cast<int>(groups.size()), std::move(params),
                                              cfg.train, rdm, surrogate);
    if (cfg.train.epochs > 0) {
        if (replay.empty()) throw training_abort_error("training requested but the replay dataset is empty");
        out.curve = fit(trainer, replay);
    }

    TransferOutcome<S> transfer = run_transfer(trainer.params, contexts);
    out.fused = target;
    out.units = units;
    out.unit_deltas = transfer.unit_deltas;
    out.params = std::move(trainer.params);
    out.report.seed = cfg.train.seed;
    out.report.config_hash = cfg.config_hash;
    for (size_t i = 0; i < units.size(); ++i) {
        const ModuleKey& key = units[i].target_pair.key;
        LoraPair& pair = out.fused.pairs.at(key);
        const StabilityBound sb = stability_bound(pair, transfer.unit_deltas[i], transfer.unit_alphas[i]);
        pair = apply_patch(pair, transfer.unit_deltas[i], transfer.unit_alphas[i]);

        ReportRow row;
        row.unit_id = units[i].id();
        row.group_id = units[i].group.group_id;
        row.module_type = units[i].group.module_type;
        row.rank = units[i].group.rank;
        row.layer = units[i].target_layer;
        row.alpha = transfer.unit_alphas[i];
        row.delta_fro = fro_norm(transfer.unit_deltas[i]);
        row.lhs = sb.lhs;
        row.frob_identity = sb.frob_identity;
        row.bound = sb.bound;
        row.attention_entropy = transfer.unit_entropies[i];
        out.report.rows.push_back(std::move(row));
    }
    return out;
}

/// Write the fused adapter and the report CSV.
void export_fused(const AdapterSet& fused, const FusionReport& report, const std::string& adapter_path,
                  const std::string& report_path);

void write_report_csv(const FusionReport& report, const std::string& path);
void write_loss_csv(const std::vector<StepLoss>& curve, const std::string& path);

/// Hypernet checkpoint in the adapter container, names prefixed `hypernet.`;
/// the provenance tag (config hash) rides in the container metadata.
template <class S>
void save_checkpoint(HyperNetParams<S>& params, const std::string& path, const std::string& provenance = "") {
    AdapterSet holder;
    holder.family_id = provenance.empty() ? "hypernet" : "hypernet-" + provenance;
    holder.layer_count = 0;
    for (auto& b : params.blocks()) {
        TensorRecord rec;
        rec.name = "hypernet." + b.name;
        rec.shape = {b.mat->rows, b.mat->cols};
        rec.data.assign(b.mat->data.size(), 0.0f);
        for (size_t i = 0; i < b.mat->data.size(); ++i) rec.data[i] = static_cast<float>(b.mat->data[i]);
        holder.extras.push_back(std::move(rec));
    }
    save_adapter(holder, path);
}

template <class S>
void load_checkpoint(HyperNetParams<S>& params, const std::string& path) {
    AdapterSet holder = load_adapter(path);
    std::map<std::string, const TensorRecord*> by_name;
    for (const auto& rec : holder.extras) by_name[rec.name] = &rec;
    for (auto& b : params.blocks()) {
        auto it = by_name.find("hypernet." + b.name);
        if (it == by_name.end()) throw store_error("checkpoint missing tensor: hypernet." + b.name);
        const TensorRecord& rec = *it->second;
        if (rec.shape.size() != 2 || rec.shape[0] != b.mat->rows || rec.shape[1] != b.mat->cols)
            throw store_error("checkpoint shape mismatch for hypernet." + b.name);
        for (size_t i = 0; i < b.mat->data.size(); ++i) b.mat->data[i] = static_cast<S>(rec.data[i]);
    }
}

struct FusionProducts {
    FusionReport report;
    std::vector<StepLoss> curve;
    std::map<std::string, double> metrics;  // populated for scenario-backed runs
    std::string fused_path;
    std::string report_path;
};

/// Config-driven fusion. Scenario-backed configs generate families and
/// experts, write the adapter files into the workspace, fuse through the file
/// path, and evaluate; file-mode configs load the given adapters and run the
/// (transfer-only unless epochs=0) pipeline.
FusionProducts fuse(const FusionConfig& cfg);

/// Transfer + export using a saved hypernet checkpoint, no training.
FusionProducts export_from_checkpoint(const FusionConfig& cfg, const std::string& checkpoint_path);

struct SweepRow {
    double value = 0.0;
    std::map<std::string, double> metrics;
};

std::vector<SweepRow> sweep(const FusionConfig& cfg, const std::string& parameter, const std::vector<double>& values);
void write_sweep_csv(const std::vector<SweepRow>& rows, const std::string& parameter, const std::string& path);

/// Scenario experiment metrics (fused vs target-only vs joint oracle, plus
/// per-preset variants).
std::map<std::string, double> run_experiment(const std::string& preset, uint64_t seed, const FusionConfig& base);

/// Desk-scale fusion defaults used by the harness presets and tests.
FusionConfig desk_fusion_config(uint64_t seed);

}  // namespace lorafuse
