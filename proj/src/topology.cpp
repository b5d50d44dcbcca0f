// SPDX-License-Identifier: Apache-2.0
#include "lorafuse/topology.hpp"

#include <algorithm>
#include <set>
#include <sstream>

namespace lorafuse {

std::string TransferUnit::id() const {
    std::ostringstream os;
    os << group.group_id << "@L" << target_layer;
    return os.str();
}

ClassifiedName classify_module(const std::string& tensor_name) {
    static const std::string suffix_a = ".lora_A.weight";
    static const std::string suffix_b = ".lora_B.weight";

    ClassifiedName out;
    std::string prefix;
    if (tensor_name.size() > suffix_a.size() &&
        tensor_name.compare(tensor_name.size() - suffix_a.size(), suffix_a.size(), suffix_a) == 0) {
        out.factor = LoraFactor::A;
        prefix = tensor_name.substr(0, tensor_name.size() - suffix_a.size());
    } else if (tensor_name.size() > suffix_b.size() &&
               tensor_name.compare(tensor_name.size() - suffix_b.size(), suffix_b.size(), suffix_b) == 0) {
        out.factor = LoraFactor::B;
        prefix = tensor_name.substr(0, tensor_name.size() - suffix_b.size());
    } else {
        throw topology_error("unclassifiable: no lora suffix in " + tensor_name);
    }

    // Layer index comes from the "layers.{l}." segment.
    const std::string marker = "layers.";
    const size_t pos = prefix.find(marker);
    if (pos == std::string::npos) throw topology_error("unclassifiable: no layer segment in " + tensor_name);
    size_t digits = pos + marker.size();
    size_t end = digits;
    while (end < prefix.size() && std::isdigit(static_cast<unsigned char>(prefix[end]))) ++end;
    if (end == digits || end >= prefix.size() || prefix[end] != '.')
        throw topology_error("unclassifiable: bad layer segment in " + tensor_name);
    out.layer = std::stoi(prefix.substr(digits, end - digits));

    const size_t last_dot = prefix.rfind('.');
    out.module_type = prefix.substr(last_dot + 1);
    if (out.module_type.empty()) throw topology_error("unclassifiable: empty module type in " + tensor_name);
    out.prefix = prefix;
    return out;
}

int map_layer(int target_layers, int source_layers, int target_layer) {
    if (target_layer < 0 || target_layer >= target_layers)
        throw topology_error("map_layer: target layer out of range");
    if (source_layers < 1) throw topology_error("map_layer: source has no layers");
    const int shifted = target_layer + (source_layers - target_layers);
    return std::clamp(shifted, 0, source_layers - 1);
}

std::optional<std::string> canonical_type(const std::string& raw, const AliasTable& aliases) {
    std::string token = raw;
    if (auto it = aliases.find(raw); it != aliases.end()) token = it->second;
    if (is_canonical_module_type(token)) return token;
    return std::nullopt;
}

std::vector<TransferGroup> build_groups(const AdapterSet& target, const std::vector<AdapterSet>& sources,
                                        const AliasTable& aliases) {
    std::set<std::pair<std::string, int>> target_keys;
    for (const auto& [key, pair] : target.pairs)
        if (auto canon = canonical_type(key.module_type, aliases)) target_keys.insert({*canon, key.rank});

    std::set<std::pair<std::string, int>> source_keys;
    for (const auto& src : sources)
        for (const auto& [key, pair] : src.pairs)
            if (auto canon = canonical_type(key.module_type, aliases)) source_keys.insert({*canon, key.rank});

    std::vector<TransferGroup> groups;
    for (const auto& tk : target_keys) {
        if (!source_keys.count(tk)) continue;
        TransferGroup g;
        g.module_type = tk.first;
        g.rank = tk.second;
        g.group_id = tk.first + ".r" + std::to_string(tk.second);
        g.alpha_index = static_cast<int>(groups.size());
        groups.push_back(std::move(g));
    }
    // std::set ordering already gives (module_type lexicographic, rank ascending).
    return groups;
}

namespace {

const LoraPair* find_pair(const AdapterSet& set, int layer, const std::string& canon_type, int rank,
                          const AliasTable& aliases) {
    for (const auto& [key, pair] : set.pairs) {
        if (key.layer != layer || key.rank != rank) continue;
        if (auto c = canonical_type(key.module_type, aliases); c && *c == canon_type) return &pair;
    }
    return nullptr;
}

}  // namespace

std::vector<TransferUnit> select_active_units(const std::vector<TransferGroup>& groups, const AdapterSet& target,
                                              const std::vector<AdapterSet>& sources,
                                              const std::vector<LayerMap>& layer_maps, const AliasTable& aliases) {
    if (layer_maps.size() != sources.size())
        throw topology_error("select_active_units: one layer map required per source");

    std::vector<TransferUnit> units;
    for (const auto& group : groups) {
        for (int layer = 0; layer < target.layer_count; ++layer) {
            const LoraPair* tgt = find_pair(target, layer, group.module_type, group.rank, aliases);
            if (!tgt) continue;
            TransferUnit unit;
            unit.group = group;
            unit.target_layer = layer;
            unit.target_pair = *tgt;
            for (size_t k = 0; k < sources.size(); ++k) {
                const int mapped = layer_maps[k](layer);
                if (const LoraPair* src = find_pair(sources[k], mapped, group.module_type, group.rank, aliases))
                    unit.source_pairs.emplace_back(static_cast<int>(k), *src);
            }
            if (!unit.source_pairs.empty()) units.push_back(std::move(unit));
        }
    }
    return units;
}

}  // namespace lorafuse
