// SPDX-License-Identifier: Apache-2.0
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>

#include "lorafuse/pipeline.hpp"

namespace py = pybind11;
using namespace lorafuse;

namespace {

Mat<float> mat_from_array(const py::array_t<float, py::array::c_style | py::array::forcecast>& arr) {
    if (arr.ndim() != 2) throw std::invalid_argument("expected a 2-D array");
    Mat<float> m(static_cast<int>(arr.shape(0)), static_cast<int>(arr.shape(1)));
    std::memcpy(m.data.data(), arr.data(), m.data.size() * sizeof(float));
    return m;
}

Mat<double> dmat_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& arr) {
    if (arr.ndim() != 2) throw std::invalid_argument("expected a 2-D array");
    Mat<double> m(static_cast<int>(arr.shape(0)), static_cast<int>(arr.shape(1)));
    std::memcpy(m.data.data(), arr.data(), m.data.size() * sizeof(double));
    return m;
}

template <class T>
py::array_t<T> array_from_mat(const Mat<T>& m) {
    py::array_t<T> arr({m.rows, m.cols});
    std::memcpy(arr.mutable_data(), m.data.data(), m.data.size() * sizeof(T));
    return arr;
}

py::dict report_to_dict(const FusionReport& report) {
    py::dict out;
    out["seed"] = report.seed;
    out["config_hash"] = report.config_hash;
    py::list rows;
    for (const auto& row : report.rows) {
        py::dict r;
        r["unit_id"] = row.unit_id;
        r["group_id"] = row.group_id;
        r["module_type"] = row.module_type;
        r["rank"] = row.rank;
        r["layer"] = row.layer;
        r["alpha"] = row.alpha;
        r["delta_b_fro"] = row.delta_fro;
        r["lhs"] = row.lhs;
        r["frob_identity"] = row.frob_identity;
        r["bound"] = row.bound;
        r["attention_entropy"] = row.attention_entropy;
        rows.append(r);
    }
    out["rows"] = rows;
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "heterogeneous LoRA adapter fusion toolkit";

    py::class_<ModuleKey>(m, "ModuleKey")
        .def_readonly("layer", &ModuleKey::layer)
        .def_readonly("module_type", &ModuleKey::module_type)
        .def_readonly("rank", &ModuleKey::rank)
        .def("__repr__", &ModuleKey::str);

    py::class_<AdapterSet>(m, "AdapterSet")
        .def(py::init<>())
        .def_readwrite("family_id", &AdapterSet::family_id)
        .def_readwrite("layer_count", &AdapterSet::layer_count)
        .def("keys",
             [](const AdapterSet& set) {
                 std::vector<ModuleKey> keys;
                 for (const auto& [key, pair] : set.pairs) keys.push_back(key);
                 return keys;
             })
        .def("pair",
             [](const AdapterSet& set, int layer, const std::string& module_type) {
                 for (const auto& [key, pair] : set.pairs)
                     if (key.layer == layer && key.module_type == module_type)
                         return py::make_tuple(array_from_mat(pair.A), array_from_mat(pair.B));
                 throw py::key_error("no such module");
             })
        .def("add_pair", [](AdapterSet& set, int layer, const std::string& module_type,
                            const py::array_t<float, py::array::c_style | py::array::forcecast>& a,
                            const py::array_t<float, py::array::c_style | py::array::forcecast>& b) {
            LoraPair pair = make_pair(layer, module_type, mat_from_array(a), mat_from_array(b));
            set.layer_count = std::max(set.layer_count, layer + 1);
            set.pairs.emplace(pair.key, std::move(pair));
        });

    m.def(
        "load_adapter", [](const std::string& path) { return load_adapter(path); }, py::arg("path"));
    m.def("save_adapter", &save_adapter, py::arg("set"), py::arg("path"));
    m.def("validate_adapter", &validate_adapter, py::arg("set"));

    m.def("map_layer", &map_layer, py::arg("target_layers"), py::arg("source_layers"), py::arg("target_layer"));

    m.def(
        "svdvals",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& arr) {
            return svdvals(dmat_from_array(arr));
        },
        py::arg("matrix"), "Singular values by one-sided Jacobi, descending.");

    m.def(
        "compute_delta_w",
        [](const py::array_t<float, py::array::c_style | py::array::forcecast>& a,
           const py::array_t<float, py::array::c_style | py::array::forcecast>& b) {
            LoraPair pair;
            pair.A = mat_from_array(a);
            pair.B = mat_from_array(b);
            return array_from_mat(compute_delta_w(pair));
        },
        py::arg("a"), py::arg("b"), "Dense update B @ A.");

    m.def(
        "rdm_loss",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& z, int n_proj, uint64_t bank_seed,
           uint64_t noise_seed, double mu_target, double sigma_target) {
            Mat<double> zm = dmat_from_array(z);
            RdmConfig cfg;
            cfg.n_proj = n_proj;
            cfg.mu_target = mu_target;
            cfg.sigma_target = sigma_target;
            Mat<double> bank = make_projection_bank<double>(n_proj, zm.cols, bank_seed);
            Tape<double> t;
            Var loss =
                rdm_loss(t, t.input(zm), cfg, bank, gaussian_noise<double>(noise_seed, mu_target, sigma_target));
            return t.val(loss).data[0];
        },
        py::arg("z"), py::arg("n_proj") = 64, py::arg("bank_seed") = 0, py::arg("noise_seed") = 1,
        py::arg("mu_target") = 0.0, py::arg("sigma_target") = 1.0,
        "Rectified sliced-Wasserstein distance to a Gaussian draw.");

    m.def(
        "stability_bound",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& b,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& a,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& delta_b, double alpha) {
            StabilityBound sb =
                stability_bound(dmat_from_array(b), dmat_from_array(a), dmat_from_array(delta_b), alpha);
            return py::make_tuple(sb.lhs, sb.frob_identity, sb.bound);
        },
        py::arg("b"), py::arg("a"), py::arg("delta_b"), py::arg("alpha"),
        "(lhs, |alpha| ||dB A||_F, |alpha| ||dB||_F sigma_max(A)).");

    m.def(
        "fuse",
        [](const std::string& config_path) {
            FusionProducts products = fuse(load_fusion_config(config_path));
            py::dict out;
            out["report"] = report_to_dict(products.report);
            out["metrics"] = products.metrics;
            out["fused_path"] = products.fused_path;
            out["report_path"] = products.report_path;
            return out;
        },
        py::arg("config_path"), "Run the full fusion pipeline from a config file.");

    m.def(
        "run_harness",
        [](const std::string& preset, uint64_t seed) {
            return run_experiment(preset, seed, desk_fusion_config(seed));
        },
        py::arg("preset") = "single-source", py::arg("seed") = 1,
        "Run a synthetic transfer scenario and return its metrics.");

    m.attr("module_vocabulary") = canonical_module_vocabulary();
}
