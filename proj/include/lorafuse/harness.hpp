// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "lorafuse/trainer.hpp"

namespace lorafuse {

struct harness_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Desk-scale stand-in for a transformer family: an MLP stack whose per-layer
/// up/down projections carry the LoRA modules. All families share the task
/// input/output space but differ in depth and width.
struct SyntheticFamily {
    std::string family_id;
    int depth = 0;
    int width = 0;
    int task_in = 0;
    int task_out = 0;
    Mat<float> w_embed;                           // width x task_in
    Mat<float> w_out;                             // task_out x width
    std::vector<std::array<Mat<float>, 2>> base;  // per layer {up_proj, down_proj}
};

/// Random fixed teacher: y = W2 tanh(W1 x + b1).
struct Teacher {
    Mat<double> w1, b1, w2;
};

struct FamilyShape {
    std::string family_id;
    int depth = 0;
    int width = 0;
};

struct ScenarioSpec {
    int task_in = 12;
    int task_out = 6;
    int teacher_hidden = 24;
    int rank = 8;
    int batch_size = 16;
    int replay_batches_per_task = 6;
    int eval_batches_per_task = 8;
    double expert_lr = 5e-3;
    int expert_max_epochs = 400;
    double expert_target_fraction = 0.1;
};

SyntheticFamily gen_family(const FamilyShape& shape, int task_in, int task_out, uint64_t seed);
Teacher gen_teacher(int task_in, int task_out, int hidden, uint64_t seed);
Mat<double> teacher_eval(const Teacher& teacher, const Mat<double>& inputs);

/// Freshly initialized rank-r adapter over every (layer, up/down) module:
/// A ~ N(0, 0.1), B = 0, so the initial update is exactly zero.
AdapterSet init_adapter(const SyntheticFamily& family, int rank, uint64_t seed);

/// Task-irrelevant adapter with random nonzero B (junk update of a realistic scale).
AdapterSet noise_adapter(const SyntheticFamily& family, int rank, uint64_t seed, double b_scale = 0.25);

std::vector<Batch<double>> task_batches(const Teacher& teacher, int task_in, int n_batches, int batch_size,
                                        uint64_t seed);
/// Union of per-task batch lists (epoch shuffling happens in fit()).
std::vector<Batch<double>> mixed_batches(const std::vector<const Teacher*>& teachers, int task_in, int n_batches_each,
                                         int batch_size, uint64_t seed);

/// Forward pass with per-module effective weights W0 + B A taken from the
/// patched model (plain W0 where no pair exists).
template <class S>
Var family_forward(Tape<S>& t, const SyntheticFamily& family, const PatchedModel<S>& model, Var x) {
    Var h = t.relu(t.matmul_nt(x, t.input(mat_cast<S>(family.w_embed))));
    for (int layer = 0; layer < family.depth; ++layer) {
        for (int half = 0; half < 2; ++half) {
            const char* type = half == 0 ? "up_proj" : "down_proj";
            Var w0 = t.input(mat_cast<S>(family.base[static_cast<size_t>(layer)][static_cast<size_t>(half)]));
            Var w_eff = w0;
            if (const auto* entry = model.find(layer, type)) w_eff = t.add(w0, model.delta_w(t, *entry));
            h = t.relu(t.matmul_nt(h, w_eff));
        }
    }
    return t.matmul_nt(h, t.input(mat_cast<S>(family.w_out)));
}

/// Replay-MSE surrogate: the desk-scale stand-in for the language-modeling
/// loss. Gradients flow from the batch loss through every patched B.
template <class S>
class FamilySurrogate : public SurrogateObjective<S> {
public:
    explicit FamilySurrogate(const SyntheticFamily& family) : family_(&family) {}

    Var loss(Tape<S>& t, const PatchedModel<S>& model, const Batch<S>& batch) const override {
        Var pred = family_forward(t, *family_, model, t.input(batch.inputs));
        return t.mse(pred, t.input(batch.targets));
    }

private:
    const SyntheticFamily* family_;
};

template <class S>
PatchedModel<S> model_from_set(const AdapterSet& set) {
    PatchedModel<S> model;
    for (const auto& [key, pair] : set.pairs)
        model.entries.emplace(key, typename PatchedModel<S>::Entry{mat_cast<S>(pair.A), mat_cast<S>(pair.B), {}, {}});
    return model;
}

/// Mean MSE of the adapted family over the batches (no patching).
double eval_adapter(const SyntheticFamily& family, const AdapterSet& adapter,
                    const std::vector<Batch<double>>& batches);

struct AdapterTrainOptions {
    double lr = 5e-3;
    int max_epochs = 400;
    double target_fraction = 0.1;  // stop once epoch loss < fraction * initial
    bool train_a = true;
    uint64_t seed = 0;
};

struct AdapterTrainResult {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    int epochs = 0;
    bool converged = false;
};

/// Plain Adam on the adapter factors themselves (expert and joint-oracle training).
AdapterTrainResult train_adapter_direct(const SyntheticFamily& family, AdapterSet& adapter,
                                        const std::vector<Batch<double>>& batches, const AdapterTrainOptions& opts);

/// Same loop with a per-epoch batch provider (fresh-data training regime).
AdapterTrainResult train_adapter_stream(const SyntheticFamily& family, AdapterSet& adapter,
                                        const std::function<std::vector<Batch<double>>(int epoch)>& batches_for,
                                        const AdapterTrainOptions& opts);

struct TransferScenario {
    ScenarioSpec spec;
    uint64_t seed = 0;
    SyntheticFamily target_family;
    std::vector<SyntheticFamily> source_families;
    Teacher target_task;
    std::vector<Teacher> source_tasks;        // aligned with source_families; unused for noise sources
    AdapterSet target_adapter;                // trained anchor
    std::vector<AdapterSet> source_adapters;  // trained experts or noise adapters
    std::vector<int> noise_sources;           // indices into source_adapters
    std::vector<AdapterTrainResult> expert_reports;
};

/// Presets: "single-source", "multi-source", "noisy-source", "anchor-variants".
TransferScenario build_scenario(const std::string& preset, uint64_t seed, const ScenarioSpec& spec = {});

/// Replay/eval unions over the target task plus all non-noise source tasks
/// restricted to `active_sources` (empty = all).
std::vector<Batch<double>> scenario_replay(const TransferScenario& s, const std::vector<int>& active_sources = {});
std::vector<Batch<double>> scenario_eval(const TransferScenario& s, const std::vector<int>& active_sources = {});

}  // namespace lorafuse
