// SPDX-License-Identifier: Apache-2.0
#include "lorafuse/harness.hpp"

#include <algorithm>
#include <cmath>

namespace lorafuse {

SyntheticFamily gen_family(const FamilyShape& shape, int task_in, int task_out, uint64_t seed) {
    if (shape.depth < 1 || shape.width < 1) throw harness_error("gen_family: bad shape");
    Rng rng(seed);
    SyntheticFamily fam;
    fam.family_id = shape.family_id;
    fam.depth = shape.depth;
    fam.width = shape.width;
    fam.task_in = task_in;
    fam.task_out = task_out;
    fam.w_embed = rng.normal_mat<float>(shape.width, task_in, std::sqrt(2.0 / task_in));
    for (int l = 0; l < shape.depth; ++l) {
        const double scale = std::sqrt(2.0 / shape.width);
        fam.base.push_back({rng.normal_mat<float>(shape.width, shape.width, scale),
                            rng.normal_mat<float>(shape.width, shape.width, scale)});
    }
    fam.w_out = rng.normal_mat<float>(task_out, shape.width, std::sqrt(1.0 / shape.width));
    return fam;
}

Teacher gen_teacher(int task_in, int task_out, int hidden, uint64_t seed) {
    Rng rng(seed);
    Teacher t;
    t.w1 = rng.normal_mat<double>(hidden, task_in, 1.0 / std::sqrt(static_cast<double>(task_in)));
    t.b1 = rng.normal_mat<double>(hidden, 1, 0.1);
    t.w2 = rng.normal_mat<double>(task_out, hidden, std::sqrt(2.5 / hidden));
    return t;
}

Mat<double> teacher_eval(const Teacher& teacher, const Mat<double>& inputs) {
    Mat<double> hidden = matmul_nt(inputs, teacher.w1);  // n x hidden
    for (int i = 0; i < hidden.rows; ++i)
        for (int j = 0; j < hidden.cols; ++j) hidden(i, j) = std::tanh(hidden(i, j) + teacher.b1(j, 0));
    return matmul_nt(hidden, teacher.w2);
}

AdapterSet init_adapter(const SyntheticFamily& family, int rank, uint64_t seed) {
    Rng rng(seed);
    AdapterSet set;
    set.family_id = family.family_id;
    set.layer_count = family.depth;
    for (int l = 0; l < family.depth; ++l) {
        for (const char* type : {"up_proj", "down_proj"}) {
            Mat<float> a = rng.normal_mat<float>(rank, family.width, 0.1);
            Mat<float> b(family.width, rank);
            LoraPair pair = make_pair(l, type, std::move(a), std::move(b));
            set.pairs.emplace(pair.key, std::move(pair));
        }
    }
    return set;
}

AdapterSet noise_adapter(const SyntheticFamily& family, int rank, uint64_t seed, double b_scale) {
    Rng rng(seed);
    AdapterSet set = init_adapter(family, rank, Rng::mix(seed, 17));
    for (auto& [key, pair] : set.pairs) pair.B = rng.normal_mat<float>(family.width, rank, b_scale);
    return set;
}

std::vector<Batch<double>> task_batches(const Teacher& teacher, int task_in, int n_batches, int batch_size,
                                        uint64_t seed) {
    Rng rng(seed);
    std::vector<Batch<double>> out;
    out.reserve(static_cast<size_t>(n_batches));
    for (int b = 0; b < n_batches; ++b) {
        Batch<double> batch;
        batch.inputs = rng.normal_mat<double>(batch_size, task_in);
        batch.targets = teacher_eval(teacher, batch.inputs);
        out.push_back(std::move(batch));
    }
    return out;
}

std::vector<Batch<double>> mixed_batches(const std::vector<const Teacher*>& teachers, int task_in, int n_batches_each,
                                         int batch_size, uint64_t seed) {
    std::vector<Batch<double>> out;
    for (size_t k = 0; k < teachers.size(); ++k) {
        auto part = task_batches(*teachers[k], task_in, n_batches_each, batch_size, Rng::mix(seed, k));
        out.insert(out.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
    }
    return out;
}

double eval_adapter(const SyntheticFamily& family, const AdapterSet& adapter,
                    const std::vector<Batch<double>>& batches) {
    if (batches.empty()) throw harness_error("eval_adapter: no batches");
    PatchedModel<double> model = model_from_set<double>(adapter);
    double acc = 0.0;
    for (const auto& batch : batches) {
        Tape<double> tape;
        Var pred = family_forward(tape, family, model, tape.input(batch.inputs));
        acc += tape.val(tape.mse(pred, tape.input(batch.targets))).data[0];
    }
    return acc / static_cast<double>(batches.size());
}

AdapterTrainResult train_adapter_stream(const SyntheticFamily& family, AdapterSet& adapter,
                                        const std::function<std::vector<Batch<double>>(int epoch)>& batches_for,
                                        const AdapterTrainOptions& opts) {
    // Factor matrices in double, flat block list for Adam.
    std::vector<ModuleKey> keys;
    std::vector<Mat<double>> factors;  // A then B per key
    for (const auto& [key, pair] : adapter.pairs) {
        keys.push_back(key);
        factors.push_back(mat_cast<double>(pair.A));
        factors.push_back(mat_cast<double>(pair.B));
    }
    std::vector<Mat<double>> m(factors.size()), v(factors.size());
    for (size_t i = 0; i < factors.size(); ++i) {
        m[i] = Mat<double>(factors[i].rows, factors[i].cols);
        v[i] = Mat<double>(factors[i].rows, factors[i].cols);
    }

    auto epoch_pass = [&](const std::vector<Batch<double>>& batches, bool update) {
        if (batches.empty()) throw harness_error("adapter training: no batches");
        double epoch_loss = 0.0;
        for (const auto& batch : batches) {
            Tape<double> tape;
            PatchedModel<double> model;
            std::vector<Var> vars(factors.size());
            for (size_t i = 0; i < keys.size(); ++i) {
                Var av = tape.input(factors[2 * i]);
                Var bv = tape.input(factors[2 * i + 1]);
                vars[2 * i] = av;
                vars[2 * i + 1] = bv;
                model.entries.emplace(
                    keys[i], typename PatchedModel<double>::Entry{factors[2 * i], factors[2 * i + 1], av, bv});
            }
            Var pred = family_forward(tape, family, model, tape.input(batch.inputs));
            Var loss = tape.mse(pred, tape.input(batch.targets));
            epoch_loss += tape.val(loss).data[0];
            if (!update) continue;
            tape.backward(loss);
            for (size_t i = 0; i < factors.size(); ++i) {
                if (!opts.train_a && i % 2 == 0) continue;
                const Mat<double>& g = tape.grad(vars[i]);
                for (size_t j = 0; j < g.data.size(); ++j) {
                    m[i].data[j] = 0.9 * m[i].data[j] + 0.1 * g.data[j];
                    v[i].data[j] = 0.999 * v[i].data[j] + 0.001 * g.data[j] * g.data[j];
                    factors[i].data[j] -= opts.lr * m[i].data[j] / (std::sqrt(v[i].data[j]) + 1e-8);
                }
            }
        }
        return epoch_loss / static_cast<double>(batches.size());
    };

    AdapterTrainResult result;
    result.initial_loss = epoch_pass(batches_for(0), false);
    const double target = opts.target_fraction * result.initial_loss;
    double loss = result.initial_loss;
    while (result.epochs < opts.max_epochs && loss >= target) {
        loss = epoch_pass(batches_for(result.epochs), true);
        ++result.epochs;
    }
    result.final_loss = loss;
    result.converged = loss < target;

    for (size_t i = 0; i < keys.size(); ++i) {
        auto& pair = adapter.pairs.at(keys[i]);
        pair.A = mat_cast<float>(factors[2 * i]);
        pair.B = mat_cast<float>(factors[2 * i + 1]);
    }
    return result;
}

AdapterTrainResult train_adapter_direct(const SyntheticFamily& family, AdapterSet& adapter,
                                        const std::vector<Batch<double>>& batches, const AdapterTrainOptions& opts) {
    if (batches.empty()) throw harness_error("train_adapter_direct: no batches");
    return train_adapter_stream(
        family, adapter, [&](int) { return batches; }, opts);
}

namespace {

struct SourceShape {
    FamilyShape shape;
    bool noise;
};

TransferScenario assemble(const ScenarioSpec& spec, uint64_t seed, const FamilyShape& target_shape,
                          const std::vector<SourceShape>& source_shapes, uint64_t target_task_tag) {
    TransferScenario s;
    s.spec = spec;
    s.seed = seed;

    s.target_family = gen_family(target_shape, spec.task_in, spec.task_out, Rng::mix(seed, 100));
    s.target_task = gen_teacher(spec.task_in, spec.task_out, spec.teacher_hidden, Rng::mix(seed, target_task_tag));

    s.target_adapter = init_adapter(s.target_family, spec.rank, Rng::mix(seed, 300));
    AdapterTrainOptions opts;
    opts.lr = spec.expert_lr;
    opts.max_epochs = spec.expert_max_epochs;
    opts.target_fraction = spec.expert_target_fraction;
    auto target_data = task_batches(s.target_task, spec.task_in, spec.replay_batches_per_task, spec.batch_size,
                                    Rng::mix(seed, 400));
    s.expert_reports.push_back(train_adapter_direct(s.target_family, s.target_adapter, target_data, opts));

    for (size_t k = 0; k < source_shapes.size(); ++k) {
        s.source_families.push_back(
            gen_family(source_shapes[k].shape, spec.task_in, spec.task_out, Rng::mix(seed, 110 + k)));
        s.source_tasks.push_back(
            gen_teacher(spec.task_in, spec.task_out, spec.teacher_hidden, Rng::mix(seed, 210 + k)));
        if (source_shapes[k].noise) {
            s.noise_sources.push_back(static_cast<int>(k));
            s.source_adapters.push_back(noise_adapter(s.source_families[k], spec.rank, Rng::mix(seed, 310 + k)));
        } else {
            AdapterSet adapter = init_adapter(s.source_families[k], spec.rank, Rng::mix(seed, 310 + k));
            auto data = task_batches(s.source_tasks[k], spec.task_in, spec.replay_batches_per_task, spec.batch_size,
                                     Rng::mix(seed, 410 + k));
            s.expert_reports.push_back(train_adapter_direct(s.source_families[k], adapter, data, opts));
            s.source_adapters.push_back(std::move(adapter));
        }
    }
    return s;
}

}  // namespace

TransferScenario build_scenario(const std::string& preset, uint64_t seed, const ScenarioSpec& spec) {
    const FamilyShape target{"fam-target", 4, 64};
    const FamilyShape src_a{"fam-src-a", 6, 48};
    const FamilyShape src_b{"fam-src-b", 3, 32};
    const FamilyShape noise_a{"fam-noise-a", 5, 40};
    const FamilyShape noise_b{"fam-noise-b", 3, 36};

    if (preset == "single-source") return assemble(spec, seed, target, {{src_a, false}}, 200);
    if (preset == "multi-source") return assemble(spec, seed, target, {{src_a, false}, {src_b, false}}, 200);
    if (preset == "noisy-source")
        return assemble(spec, seed, target, {{src_a, false}, {noise_a, true}, {noise_b, true}}, 200);
    if (preset == "anchor-variants")
        // Same pool, alternative anchor task; callers fuse per anchor by reseeding.
        return assemble(spec, seed, target, {{src_a, false}}, 201);
    throw harness_error("unknown scenario preset: " + preset);
}

std::vector<Batch<double>> scenario_replay(const TransferScenario& s, const std::vector<int>& active_sources) {
    std::vector<const Teacher*> teachers = {&s.target_task};
    for (size_t k = 0; k < s.source_adapters.size(); ++k) {
        const bool active = active_sources.empty() ||
                            std::find(active_sources.begin(), active_sources.end(), static_cast<int>(k)) !=
                                active_sources.end();
        const bool noise = std::find(s.noise_sources.begin(), s.noise_sources.end(), static_cast<int>(k)) !=
                           s.noise_sources.end();
        if (active && !noise) teachers.push_back(&s.source_tasks[k]);
    }
    return mixed_batches(teachers, s.spec.task_in, s.spec.replay_batches_per_task, s.spec.batch_size,
                         Rng::mix(s.seed, 500));
}

std::vector<Batch<double>> scenario_eval(const TransferScenario& s, const std::vector<int>& active_sources) {
    std::vector<const Teacher*> teachers = {&s.target_task};
    for (size_t k = 0; k < s.source_adapters.size(); ++k) {
        const bool active = active_sources.empty() ||
                            std::find(active_sources.begin(), active_sources.end(), static_cast<int>(k)) !=
                                active_sources.end();
        const bool noise = std::find(s.noise_sources.begin(), s.noise_sources.end(), static_cast<int>(k)) !=
                           s.noise_sources.end();
        if (active && !noise) teachers.push_back(&s.source_tasks[k]);
    }
    return mixed_batches(teachers, s.spec.task_in, s.spec.eval_batches_per_task, s.spec.batch_size,
                         Rng::mix(s.seed, 600));
}

}  // namespace lorafuse
