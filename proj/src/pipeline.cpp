// SPDX-License-Identifier: Apache-2.0
#include "lorafuse/pipeline.hpp"

#include <unistd.h>

#include <algorithm>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "lorafuse/harness.hpp"

namespace lorafuse {

namespace fs = std::filesystem;

FusionConfig fusion_config_from(const ConfigFile& file) {
    FusionConfig cfg;
    cfg.target_path = file.get("fusion", "target");
    cfg.source_paths = file.get_list("fusion", "sources");
    cfg.output_adapter = file.get("fusion", "output_adapter");
    cfg.output_report = file.get("fusion", "output_report");
    cfg.output_deltas = file.get("fusion", "output_deltas");
    cfg.output_checkpoint = file.get("fusion", "output_checkpoint");
    cfg.output_losses = file.get("fusion", "output_losses");
    cfg.workspace = file.get("fusion", "workspace");

    cfg.block_rows = file.get_int("context", "block_rows", 0);
    cfg.s_len = file.get_int("context", "s_len", 0);

    cfg.embed_dim = file.get_int("hypernet", "embed_dim", 1024);
    cfg.heads = file.get_int("hypernet", "heads", 8);
    cfg.max_positions = file.get_int("hypernet", "max_positions", 4096);

    cfg.mu_gate = file.get_double("gate", "mu_gate", 0.10);

    cfg.rdm.n_proj = file.get_int("rdm", "n_proj", 2048);
    cfg.rdm.mu_target = file.get_double("rdm", "mu_target", 0.0);
    cfg.rdm.sigma_target = file.get_double("rdm", "sigma_target", 1.0);
    cfg.rdm_seed_set = file.has("rdm", "seed");
    cfg.rdm.seed = file.get_u64("rdm", "seed", 0);

    cfg.train.learning_rate = file.get_double("train", "lr", 5e-5);
    cfg.train.epochs = file.get_int("train", "epochs", 3);
    cfg.train.grad_accum = file.get_int("train", "grad_accum", 8);
    cfg.train.lambda_reg = file.get_double("train", "lambda_reg", 0.005);
    cfg.train.alpha_init = file.get_double("train", "alpha_init", 0.3);
    cfg.train.seed = file.get_u64("train", "seed", 42);
    cfg.train.beta1 = file.get_double("train", "beta1", 0.9);
    cfg.train.beta2 = file.get_double("train", "beta2", 0.999);
    cfg.train.eps = file.get_double("train", "eps", 1e-8);
    cfg.train.precision = file.get("train", "precision", "f64");
    if (cfg.train.precision != "f32" && cfg.train.precision != "f64")
        throw config_error("train.precision must be f32 or f64");
    if (cfg.train.learning_rate <= 0) throw config_error("train.lr must be positive");
    if (cfg.train.epochs < 0) throw config_error("train.epochs must be >= 0");
    if (cfg.train.grad_accum < 1) throw config_error("train.grad_accum must be >= 1");
    if (cfg.rdm.n_proj < 1) throw config_error("rdm.n_proj must be >= 1");
    if (cfg.rdm.sigma_target <= 0) throw config_error("rdm.sigma_target must be positive");

    for (const auto& [key, value] : file.section("aliases")) cfg.aliases[key] = value;

    cfg.surrogate_kind = file.get("surrogate", "kind", "");
    cfg.scenario_preset = file.get("surrogate", "preset", "single-source");
    cfg.scenario_seed = file.get_u64("surrogate", "seed", 1);
    cfg.scenario_spec.rank = file.get_int("surrogate", "rank", cfg.scenario_spec.rank);
    cfg.scenario_spec.batch_size = file.get_int("surrogate", "batch_size", cfg.scenario_spec.batch_size);
    cfg.scenario_spec.replay_batches_per_task =
        file.get_int("surrogate", "replay_batches_per_task", cfg.scenario_spec.replay_batches_per_task);
    cfg.scenario_spec.eval_batches_per_task =
        file.get_int("surrogate", "eval_batches_per_task", cfg.scenario_spec.eval_batches_per_task);
    cfg.scenario_spec.expert_lr = file.get_double("surrogate", "expert_lr", cfg.scenario_spec.expert_lr);
    cfg.scenario_spec.expert_max_epochs =
        file.get_int("surrogate", "expert_max_epochs", cfg.scenario_spec.expert_max_epochs);

    cfg.config_hash = file.hash();
    return cfg;
}

FusionConfig load_fusion_config(const std::string& path) {
    return fusion_config_from(ConfigFile::parse_file(path));
}

FusionConfig desk_fusion_config(uint64_t seed) {
    FusionConfig cfg;
    cfg.embed_dim = 32;
    cfg.heads = 4;
    cfg.max_positions = 256;
    cfg.rdm.n_proj = 64;
    cfg.train.learning_rate = 3e-3;
    cfg.train.epochs = 12;
    cfg.train.grad_accum = 2;
    cfg.train.seed = seed;
    cfg.surrogate_kind = "scenario";
    cfg.scenario_seed = seed;
    cfg.config_hash = "desk-default";
    return cfg;
}

namespace {

std::string fresh_workspace(const std::string& requested) {
    if (!requested.empty()) {
        fs::create_directories(requested);
        return requested;
    }
    static int counter = 0;
    std::ostringstream name;
    name << "lorafuse-" << ::getpid() << "-" << counter++;
    fs::path dir = fs::temp_directory_path() / name.str();
    fs::create_directories(dir);
    return dir.string();
}

void write_csv_header_comments(std::ofstream& out, const FusionReport& report) {
    out << "# seed=" << report.seed << "\n";
    out << "# config_hash=" << report.config_hash << "\n";
}

struct ScenarioMaterial {
    TransferScenario scenario;
    std::string dir;
    std::string target_path;
    std::vector<std::string> source_paths;
    AdapterSet target;
    std::vector<AdapterSet> sources;
    std::vector<Batch<double>> replay;    // tasks of the active sources only
    std::vector<Batch<double>> eval_all;  // all non-noise tasks of the scenario
};

/// Write the scenario adapters to disk, reload them, and assemble replay/eval.
ScenarioMaterial stage_scenario(const FusionConfig& cfg, const std::vector<int>& active_sources) {
    ScenarioMaterial m;
    m.scenario = build_scenario(cfg.scenario_preset, cfg.scenario_seed, cfg.scenario_spec);
    m.dir = fresh_workspace(cfg.workspace);

    m.target_path = (fs::path(m.dir) / "target.safetensors").string();
    save_adapter(m.scenario.target_adapter, m.target_path);
    m.target = load_adapter(m.target_path);

    std::vector<int> active = active_sources;
    if (active.empty())
        for (size_t k = 0; k < m.scenario.source_adapters.size(); ++k) active.push_back(static_cast<int>(k));
    for (int k : active) {
        std::ostringstream name;
        name << "source_" << k << ".safetensors";
        const std::string path = (fs::path(m.dir) / name.str()).string();
        save_adapter(m.scenario.source_adapters[static_cast<size_t>(k)], path);
        m.source_paths.push_back(path);
        m.sources.push_back(load_adapter(path));
    }

    m.replay = scenario_replay(m.scenario, active);
    m.eval_all = scenario_eval(m.scenario, {});
    return m;
}

template <class S>
Batch<S> cast_batch(const Batch<double>& b) {
    return Batch<S>{mat_cast<S>(b.inputs), mat_cast<S>(b.targets)};
}

struct TypedRunResult {
    AdapterSet fused;
    FusionReport report;
    std::vector<StepLoss> curve;
    std::vector<TransferUnit> units;
    std::vector<Mat<double>> unit_deltas;
};

template <class S>
TypedRunResult run_scenario_fusion_typed(const FusionConfig& cfg, const ScenarioMaterial& m,
                                         const std::string& checkpoint_to_load) {
    FamilySurrogate<S> surrogate(m.scenario.target_family);
    std::vector<Batch<S>> replay;
    replay.reserve(m.replay.size());
    for (const auto& b : m.replay) replay.push_back(cast_batch<S>(b));

    FusionOutcome<S> outcome;
    if (!checkpoint_to_load.empty()) {
        FusionConfig transfer_cfg = cfg;
        transfer_cfg.train.epochs = 0;
        // Initialize with matching geometry, then overwrite from the checkpoint.
        outcome = run_fusion<S>(transfer_cfg, m.target, m.sources, surrogate, replay);
        load_checkpoint<S>(outcome.params, checkpoint_to_load);
        outcome = run_fusion<S>(transfer_cfg, m.target, m.sources, surrogate, replay, &outcome.params);
    } else {
        outcome = run_fusion<S>(cfg, m.target, m.sources, surrogate, replay);
    }

    if (!cfg.output_checkpoint.empty()) save_checkpoint<S>(outcome.params, cfg.output_checkpoint, cfg.config_hash);

    TypedRunResult r;
    r.fused = std::move(outcome.fused);
    r.report = std::move(outcome.report);
    r.curve = std::move(outcome.curve);
    r.units = std::move(outcome.units);
    r.unit_deltas = std::move(outcome.unit_deltas);
    return r;
}

TypedRunResult run_scenario_fusion(const FusionConfig& cfg, const ScenarioMaterial& m,
                                   const std::string& checkpoint_to_load = "") {
    if (cfg.train.precision == "f32") return run_scenario_fusion_typed<float>(cfg, m, checkpoint_to_load);
    return run_scenario_fusion_typed<double>(cfg, m, checkpoint_to_load);
}

void write_deltas(const TypedRunResult& r, const std::string& path) {
    AdapterSet holder;
    holder.family_id = "delta_b";
    holder.layer_count = 0;
    for (size_t i = 0; i < r.units.size(); ++i) {
        TensorRecord rec;
        rec.name = "delta_b." + r.units[i].target_pair.key.str();
        rec.shape = {r.unit_deltas[i].rows, r.unit_deltas[i].cols};
        rec.data.assign(r.unit_deltas[i].data.size(), 0.0f);
        for (size_t j = 0; j < r.unit_deltas[i].data.size(); ++j)
            rec.data[j] = static_cast<float>(r.unit_deltas[i].data[j]);
        holder.extras.push_back(std::move(rec));
    }
    save_adapter(holder, path);
}

FusionProducts finish_products(const FusionConfig& cfg, TypedRunResult r, const ScenarioMaterial* m) {
    FusionProducts products;
    products.report = r.report;
    products.curve = r.curve;

    std::string adapter_path = cfg.output_adapter;
    std::string report_path = cfg.output_report;
    if (m) {
        if (adapter_path.empty()) adapter_path = (fs::path(m->dir) / "fused.safetensors").string();
        if (report_path.empty()) report_path = (fs::path(m->dir) / "report.csv").string();
    }
    if (!adapter_path.empty()) {
        export_fused(r.fused, r.report, adapter_path, report_path);
        products.fused_path = adapter_path;
        products.report_path = report_path;
    }
    if (!cfg.output_deltas.empty()) write_deltas(r, cfg.output_deltas);
    if (!cfg.output_losses.empty()) write_loss_csv(r.curve, cfg.output_losses);

    if (m) {
        products.metrics["fused_eval"] = eval_adapter(m->scenario.target_family, r.fused, m->eval_all);
        products.metrics["target_only_eval"] = eval_adapter(m->scenario.target_family, m->target, m->eval_all);
    }
    return products;
}

// Trains A and B jointly on all involved tasks in the fresh-data regime, so
// generalization gap cannot push it above the fused run.
double joint_oracle_eval(const ScenarioMaterial& m, uint64_t seed) {
    const TransferScenario& s = m.scenario;
    std::vector<const Teacher*> teachers = {&s.target_task};
    for (size_t k = 0; k < s.source_adapters.size(); ++k) {
        const bool noise =
            std::find(s.noise_sources.begin(), s.noise_sources.end(), static_cast<int>(k)) != s.noise_sources.end();
        if (!noise) teachers.push_back(&s.source_tasks[k]);
    }
    AdapterSet oracle = init_adapter(s.target_family, s.spec.rank, Rng::mix(seed, 900));
    AdapterTrainOptions opts;
    opts.lr = s.spec.expert_lr;
    opts.max_epochs = 2 * s.spec.expert_max_epochs;
    opts.target_fraction = 0.05;
    train_adapter_stream(
        s.target_family, oracle,
        [&](int epoch) {
            return mixed_batches(teachers, s.spec.task_in, s.spec.replay_batches_per_task, s.spec.batch_size,
                                 Rng::mix(Rng::mix(seed, 910), static_cast<uint64_t>(epoch)));
        },
        opts);
    return eval_adapter(s.target_family, oracle, m.eval_all);
}

}  // namespace

void write_report_csv(const FusionReport& report, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw store_error("cannot write report: " + path);
    write_csv_header_comments(out, report);
    out << "unit_id,group_id,module_type,rank,layer,alpha,delta_b_fro,lhs,frob_identity,bound,attention_entropy\n";
    out.precision(17);
    for (const auto& row : report.rows) {
        out << row.unit_id << "," << row.group_id << "," << row.module_type << "," << row.rank << "," << row.layer
            << "," << row.alpha << "," << row.delta_fro << "," << row.lhs << "," << row.frob_identity << ","
            << row.bound << "," << row.attention_entropy << "\n";
    }
}

void write_loss_csv(const std::vector<StepLoss>& curve, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw store_error("cannot write loss curve: " + path);
    out << "step,surrogate,rdm,total\n";
    out.precision(17);
    for (const auto& step : curve)
        out << step.step << "," << step.surrogate << "," << step.rdm << "," << step.total << "\n";
}

void export_fused(const AdapterSet& fused, const FusionReport& report, const std::string& adapter_path,
                  const std::string& report_path) {
    save_adapter(fused, adapter_path);
    if (!report_path.empty()) write_report_csv(report, report_path);
}

FusionProducts fuse(const FusionConfig& cfg) {
    if (cfg.surrogate_kind == "scenario") {
        ScenarioMaterial m = stage_scenario(cfg, {});
        return finish_products(cfg, run_scenario_fusion(cfg, m), &m);
    }
    if (!cfg.surrogate_kind.empty()) throw config_error("unknown surrogate kind: " + cfg.surrogate_kind);

    // File mode: transfer-only (training needs a surrogate objective).
    if (cfg.train.epochs != 0)
        throw config_error("file-mode fusion has no surrogate; set train.epochs = 0 or surrogate.kind = scenario");
    if (cfg.target_path.empty() || cfg.source_paths.empty())
        throw config_error("file-mode fusion needs fusion.target and fusion.sources");
    for (const auto& p : cfg.source_paths)
        if (p == cfg.target_path) throw config_error("target and source paths must be distinct");

    AdapterSet target = load_adapter(cfg.target_path);
    std::vector<AdapterSet> sources;
    for (const auto& p : cfg.source_paths) sources.push_back(load_adapter(p));

    struct NoSurrogate : SurrogateObjective<double> {
        Var loss(Tape<double>& t, const PatchedModel<double>&, const Batch<double>&) const override {
            return t.input(Mat<double>::scalar(0.0));
        }
    } surrogate;
    FusionOutcome<double> outcome = run_fusion<double>(cfg, target, sources, surrogate, {});
    if (!cfg.output_checkpoint.empty()) save_checkpoint<double>(outcome.params, cfg.output_checkpoint, cfg.config_hash);

    TypedRunResult r;
    r.fused = std::move(outcome.fused);
    r.report = std::move(outcome.report);
    r.curve = std::move(outcome.curve);
    r.units = std::move(outcome.units);
    r.unit_deltas = std::move(outcome.unit_deltas);
    return finish_products(cfg, std::move(r), nullptr);
}

FusionProducts export_from_checkpoint(const FusionConfig& cfg, const std::string& checkpoint_path) {
    if (cfg.surrogate_kind == "scenario") {
        ScenarioMaterial m = stage_scenario(cfg, {});
        return finish_products(cfg, run_scenario_fusion(cfg, m, checkpoint_path), &m);
    }

    // File mode: transfer-only with the checkpointed parameters.
    if (cfg.target_path.empty() || cfg.source_paths.empty())
        throw config_error("export needs fusion.target and fusion.sources (or a scenario surrogate)");
    AdapterSet target = load_adapter(cfg.target_path);
    std::vector<AdapterSet> sources;
    for (const auto& p : cfg.source_paths) sources.push_back(load_adapter(p));

    struct NoSurrogate : SurrogateObjective<double> {
        Var loss(Tape<double>& t, const PatchedModel<double>&, const Batch<double>&) const override {
            return t.input(Mat<double>::scalar(0.0));
        }
    } surrogate;
    FusionConfig transfer_cfg = cfg;
    transfer_cfg.train.epochs = 0;
    FusionOutcome<double> outcome = run_fusion<double>(transfer_cfg, target, sources, surrogate, {});
    load_checkpoint<double>(outcome.params, checkpoint_path);
    outcome = run_fusion<double>(transfer_cfg, target, sources, surrogate, {}, &outcome.params);

    TypedRunResult r;
    r.fused = std::move(outcome.fused);
    r.report = std::move(outcome.report);
    r.curve = std::move(outcome.curve);
    r.units = std::move(outcome.units);
    r.unit_deltas = std::move(outcome.unit_deltas);
    return finish_products(cfg, std::move(r), nullptr);
}

std::vector<SweepRow> sweep(const FusionConfig& cfg, const std::string& parameter, const std::vector<double>& values) {
    if (values.empty()) throw config_error("sweep: no values given");
    if (parameter != "alpha_init" && parameter != "mu_gate")
        throw config_error("sweep: parameter must be alpha_init or mu_gate");
    std::vector<SweepRow> rows;
    int idx = 0;
    for (double value : values) {
        FusionConfig variant = cfg;
        if (parameter == "alpha_init")
            variant.train.alpha_init = value;
        else
            variant.mu_gate = value;
        if (!cfg.workspace.empty()) variant.workspace = cfg.workspace + "/sweep_" + std::to_string(idx);
        variant.output_adapter.clear();
        variant.output_report.clear();
        variant.output_deltas.clear();
        variant.output_checkpoint.clear();
        variant.output_losses.clear();
        FusionProducts products = fuse(variant);
        SweepRow row;
        row.value = value;
        row.metrics = products.metrics;
        rows.push_back(std::move(row));
        ++idx;
    }
    return rows;
}

void write_sweep_csv(const std::vector<SweepRow>& rows, const std::string& parameter, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw store_error("cannot write sweep table: " + path);
    out << parameter;
    if (!rows.empty())
        for (const auto& [key, value] : rows.front().metrics) out << "," << key;
    out << "\n";
    out.precision(17);
    for (const auto& row : rows) {
        out << row.value;
        for (const auto& [key, value] : row.metrics) out << "," << value;
        out << "\n";
    }
}

std::map<std::string, double> run_experiment(const std::string& preset, uint64_t seed, const FusionConfig& base) {
    FusionConfig cfg = base;
    cfg.surrogate_kind = "scenario";
    cfg.scenario_preset = preset;
    cfg.scenario_seed = seed;
    cfg.train.seed = seed;

    std::map<std::string, double> metrics;
    if (preset == "single-source") {
        ScenarioMaterial m = stage_scenario(cfg, {});
        TypedRunResult r = run_scenario_fusion(cfg, m);
        metrics["target_only_eval"] = eval_adapter(m.scenario.target_family, m.target, m.eval_all);
        metrics["fused_eval"] = eval_adapter(m.scenario.target_family, r.fused, m.eval_all);
        metrics["joint_oracle_eval"] = joint_oracle_eval(m, seed);
    } else if (preset == "multi-source") {
        FusionConfig one = cfg;
        one.workspace = cfg.workspace.empty() ? "" : cfg.workspace + "/one_source";
        ScenarioMaterial m1 = stage_scenario(one, {0});
        TypedRunResult r1 = run_scenario_fusion(one, m1);
        FusionConfig two = cfg;
        two.workspace = cfg.workspace.empty() ? "" : cfg.workspace + "/two_sources";
        ScenarioMaterial m2 = stage_scenario(two, {0, 1});
        TypedRunResult r2 = run_scenario_fusion(two, m2);
        metrics["target_only_eval"] = eval_adapter(m2.scenario.target_family, m2.target, m2.eval_all);
        metrics["fused_eval_one_source"] = eval_adapter(m1.scenario.target_family, r1.fused, m1.eval_all);
        metrics["fused_eval_two_sources"] = eval_adapter(m2.scenario.target_family, r2.fused, m2.eval_all);
        metrics["joint_oracle_eval"] = joint_oracle_eval(m2, seed);
    } else if (preset == "noisy-source") {
        FusionConfig clean = cfg;
        clean.workspace = cfg.workspace.empty() ? "" : cfg.workspace + "/clean";
        ScenarioMaterial mc = stage_scenario(clean, {0});
        TypedRunResult rc = run_scenario_fusion(clean, mc);
        FusionConfig noisy = cfg;
        noisy.workspace = cfg.workspace.empty() ? "" : cfg.workspace + "/noisy";
        ScenarioMaterial mn = stage_scenario(noisy, {});
        TypedRunResult rn = run_scenario_fusion(noisy, mn);
        metrics["target_only_eval"] = eval_adapter(mn.scenario.target_family, mn.target, mn.eval_all);
        metrics["fused_eval_clean"] = eval_adapter(mc.scenario.target_family, rc.fused, mc.eval_all);
        metrics["fused_eval_noisy"] = eval_adapter(mn.scenario.target_family, rn.fused, mn.eval_all);
    } else if (preset == "anchor-variants") {
        FusionConfig anchor0 = cfg;
        anchor0.scenario_preset = "single-source";
        anchor0.workspace = cfg.workspace.empty() ? "" : cfg.workspace + "/anchor0";
        ScenarioMaterial m0 = stage_scenario(anchor0, {});
        TypedRunResult r0 = run_scenario_fusion(anchor0, m0);
        FusionConfig anchor1 = cfg;
        anchor1.workspace = cfg.workspace.empty() ? "" : cfg.workspace + "/anchor1";
        ScenarioMaterial m1 = stage_scenario(anchor1, {});
        TypedRunResult r1 = run_scenario_fusion(anchor1, m1);
        metrics["anchor0_target_only_eval"] = eval_adapter(m0.scenario.target_family, m0.target, m0.eval_all);
        metrics["anchor0_fused_eval"] = eval_adapter(m0.scenario.target_family, r0.fused, m0.eval_all);
        metrics["anchor1_target_only_eval"] = eval_adapter(m1.scenario.target_family, m1.target, m1.eval_all);
        metrics["anchor1_fused_eval"] = eval_adapter(m1.scenario.target_family, r1.fused, m1.eval_all);
    } else {
        throw harness_error("unknown scenario preset: " + preset);
    }
    return metrics;
}

}  // namespace lorafuse
