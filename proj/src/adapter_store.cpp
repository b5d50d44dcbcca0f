// SPDX-License-Identifier: Apache-2.0
#include "lorafuse/adapter_store.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "lorafuse/topology.hpp"

namespace lorafuse {

using nlohmann::json;

const std::vector<std::string>& canonical_module_vocabulary() {
    static const std::vector<std::string> vocab = {"q_proj",  "k_proj",    "v_proj",   "o_proj",
                                                   "up_proj", "down_proj", "gate_proj"};
    return vocab;
}

bool is_canonical_module_type(const std::string& type) {
    const auto& v = canonical_module_vocabulary();
    return std::find(v.begin(), v.end(), type) != v.end();
}

std::string ModuleKey::str() const {
    std::ostringstream os;
    os << "layers." << layer << "." << module_type << ".r" << rank;
    return os.str();
}

LoraPair make_pair(int layer, const std::string& module_type, Mat<float> a, Mat<float> b) {
    static const std::set<std::string> attn = {"q_proj", "k_proj", "v_proj", "o_proj"};
    const std::string path = attn.count(module_type) ? "self_attn" : "mlp";
    LoraPair p;
    p.key = ModuleKey{layer, module_type, a.rows};
    p.name_prefix =
        "base_model.model.layers." + std::to_string(layer) + "." + path + "." + module_type;
    p.A = std::move(a);
    p.B = std::move(b);
    return p;
}

namespace {

constexpr const char* kMetadataKey = "__metadata__";

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw store_error("cannot open adapter file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

uint64_t read_u64_le(const unsigned char* p) {
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

struct RawTensor {
    std::vector<int64_t> shape;
    std::vector<float> data;
};

// Parse the container into name -> raw f32 tensor plus metadata.
std::map<std::string, RawTensor> parse_container(const std::string& bytes,
                                                 std::map<std::string, std::string>& metadata) {
    if (bytes.size() < 8) throw store_error("malformed header: file shorter than length field");
    const uint64_t header_len = read_u64_le(reinterpret_cast<const unsigned char*>(bytes.data()));
    if (8 + header_len > bytes.size()) throw store_error("malformed header: header length exceeds file size");

    bool duplicate = false;
    std::set<std::string> seen;
    json header;
    try {
        header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(header_len),
                             [&](int depth, json::parse_event_t event, json& parsed) {
                                 if (depth == 1 && event == json::parse_event_t::key) {
                                     if (!seen.insert(parsed.get<std::string>()).second) duplicate = true;
                                 }
                                 return true;
                             });
    } catch (const json::exception& e) {
        throw store_error(std::string("malformed header: ") + e.what());
    }
    if (duplicate) throw store_error("duplicate names in header");
    if (!header.is_object()) throw store_error("malformed header: not a JSON object");

    const char* buffer = bytes.data() + 8 + header_len;
    const size_t buffer_len = bytes.size() - 8 - header_len;

    std::map<std::string, RawTensor> out;
    for (auto it = header.begin(); it != header.end(); ++it) {
        const std::string& name = it.key();
        if (name == kMetadataKey) {
            for (auto mit = it.value().begin(); mit != it.value().end(); ++mit)
                metadata[mit.key()] = mit.value().get<std::string>();
            continue;
        }
        const json& desc = it.value();
        if (!desc.contains("dtype") || !desc.contains("shape") || !desc.contains("data_offsets"))
            throw store_error("malformed header: incomplete descriptor for " + name);
        if (desc["dtype"].get<std::string>() != "F32")
            throw store_error("shape/dtype mismatch: unsupported dtype for " + name);

        RawTensor t;
        uint64_t count = 1;
        for (const auto& d : desc["shape"]) {
            const int64_t s = d.get<int64_t>();
            if (s < 0) throw store_error("shape/dtype mismatch: negative extent in " + name);
            t.shape.push_back(s);
            count *= static_cast<uint64_t>(s);
        }
        const uint64_t begin = desc["data_offsets"][0].get<uint64_t>();
        const uint64_t end = desc["data_offsets"][1].get<uint64_t>();
        if (end < begin || end > buffer_len) throw store_error("malformed header: offsets out of range for " + name);
        if (end - begin != count * 4) throw store_error("shape/dtype mismatch: byte length of " + name);
        t.data.resize(count);
        std::memcpy(t.data.data(), buffer + begin, count * 4);
        out.emplace(name, std::move(t));
    }
    return out;
}

Mat<float> to_matrix(const std::string& name, const RawTensor& t) {
    if (t.shape.size() != 2) throw store_error("shape/dtype mismatch: " + name + " is not 2-D");
    return Mat<float>(static_cast<int>(t.shape[0]), static_cast<int>(t.shape[1]), t.data);
}

}  // namespace

AdapterSet load_adapter(const std::string& path, LoadReport* report) {
    const std::string bytes = read_file(path);
    std::map<std::string, std::string> metadata;
    auto tensors = parse_container(bytes, metadata);

    AdapterSet set;
    if (auto it = metadata.find("family_id"); it != metadata.end()) set.family_id = it->second;

    // Pair lora_A/lora_B by common prefix; everything else is kept verbatim.
    struct PendingPair {
        std::optional<Mat<float>> a, b;
        int layer = 0;
        std::string module_type;
    };
    std::map<std::string, PendingPair> pending;
    std::set<std::string> unknown_types;
    int max_layer = -1;

    for (auto& [name, raw] : tensors) {
        ClassifiedName cls;
        try {
            cls = classify_module(name);
        } catch (const topology_error&) {
            if (report) report->unrecognized.push_back(name);
            set.extras.push_back(TensorRecord{name, raw.shape, raw.data});
            continue;
        }
        auto& slot = pending[cls.prefix];
        slot.layer = cls.layer;
        slot.module_type = cls.module_type;
        if (cls.factor == LoraFactor::A)
            slot.a = to_matrix(name, raw);
        else
            slot.b = to_matrix(name, raw);
        if (!is_canonical_module_type(cls.module_type)) unknown_types.insert(cls.module_type);
        max_layer = std::max(max_layer, cls.layer);
    }

    for (auto& [prefix, slot] : pending) {
        if (!slot.a || !slot.b) throw store_error("unpaired factor: " + prefix);
        if (slot.a->rows != slot.b->cols)
            throw store_error("shape/dtype mismatch: rank of A and B differ for " + prefix);
        LoraPair pair;
        pair.key = ModuleKey{slot.layer, slot.module_type, slot.a->rows};
        pair.name_prefix = prefix;
        pair.A = std::move(*slot.a);
        pair.B = std::move(*slot.b);
        set.pairs.emplace(pair.key, std::move(pair));
    }

    set.layer_count = max_layer + 1;
    if (auto it = metadata.find("layer_count"); it != metadata.end()) {
        const int declared = std::stoi(it->second);
        if (declared > set.layer_count) set.layer_count = declared;
    }
    if (report)
        report->unknown_module_types.assign(unknown_types.begin(), unknown_types.end());
    return set;
}

void save_adapter(const AdapterSet& set, const std::string& path) {
    struct Out {
        std::string name;
        std::vector<int64_t> shape;
        const float* data;
        size_t count;
    };
    std::vector<Out> outs;
    auto push = [&](const std::string& name, int rows, int cols, const Mat<float>& m) {
        if (!m.all_finite()) throw store_error("non-finite entries in " + name);
        outs.push_back(Out{name, {rows, cols}, m.data.data(), m.data.size()});
    };
    for (const auto& [key, pair] : set.pairs) {
        push(pair.name_prefix + ".lora_A.weight", pair.A.rows, pair.A.cols, pair.A);
        push(pair.name_prefix + ".lora_B.weight", pair.B.rows, pair.B.cols, pair.B);
    }
    for (const auto& extra : set.extras) {
        for (float v : extra.data)
            if (!std::isfinite(v)) throw store_error("non-finite entries in " + extra.name);
        outs.push_back(Out{extra.name, extra.shape, extra.data.data(), extra.data.size()});
    }

    std::sort(outs.begin(), outs.end(), [](const Out& a, const Out& b) { return a.name < b.name; });
    for (size_t i = 1; i < outs.size(); ++i)
        if (outs[i].name == outs[i - 1].name) throw store_error("duplicate names: " + outs[i].name);

    json header = json::object();
    header[kMetadataKey] = {{"family_id", set.family_id}, {"layer_count", std::to_string(set.layer_count)}};
    uint64_t offset = 0;
    for (const auto& o : outs) {
        const uint64_t bytes = o.count * 4;
        header[o.name] = {{"dtype", "F32"}, {"shape", o.shape}, {"data_offsets", {offset, offset + bytes}}};
        offset += bytes;
    }
    const std::string header_text = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw store_error("cannot write adapter file: " + path);
    const uint64_t header_len = header_text.size();
    unsigned char len_le[8];
    for (int i = 0; i < 8; ++i) len_le[i] = static_cast<unsigned char>((header_len >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(len_le), 8);
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    for (const auto& o : outs)
        out.write(reinterpret_cast<const char*>(o.data), static_cast<std::streamsize>(o.count * 4));
    if (!out) throw store_error("write failed: " + path);
}

std::vector<std::string> validate_adapter(const AdapterSet& set) {
    std::vector<std::string> violations;
    // module_type -> (rank, d_in, d_out) of the first pair seen
    std::map<std::string, std::tuple<int, int, int>> shapes;
    for (const auto& [key, pair] : set.pairs) {
        const std::string at = " @ " + key.str();
        if (pair.A.rows != pair.B.cols || pair.A.rows != key.rank) violations.push_back("rank mismatch" + at);
        if (key.layer >= set.layer_count) violations.push_back("layer out of range" + at);
        if (key.rank < 1) violations.push_back("rank below 1" + at);
        if (!pair.A.all_finite() || !pair.B.all_finite()) violations.push_back("non-finite entries" + at);
        auto [it, fresh] = shapes.emplace(key.module_type, std::make_tuple(key.rank, pair.d_in(), pair.d_out()));
        if (!fresh && it->second != std::make_tuple(key.rank, pair.d_in(), pair.d_out()))
            violations.push_back("inconsistent module shape: " + key.module_type);
    }
    return violations;
}

}  // namespace lorafuse
