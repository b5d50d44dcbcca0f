// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lorafuse/adapter_store.hpp"

namespace lorafuse {

struct FamilySpec {
    std::string family_id;
    int layer_count = 0;
    std::vector<std::string> module_vocabulary;
};

enum class LoraFactor { A, B };

struct ClassifiedName {
    int layer = 0;
    std::string module_type;
    LoraFactor factor = LoraFactor::A;
    std::string prefix;  // name with the lora suffix stripped
};

struct topology_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Parse `...layers.{l}.<path>.{type}.lora_{A|B}.weight`; throws on anything else.
ClassifiedName classify_module(const std::string& tensor_name);

/// Tail-aligned layer correspondence: clamp(l + (L_s - L_t), 0, L_s - 1).
int map_layer(int target_layers, int source_layers, int target_layer);

struct LayerMap {
    int source_index = 0;
    int target_layers = 0;
    int source_layers = 0;

    int operator()(int target_layer) const { return map_layer(target_layers, source_layers, target_layer); }
};

struct TransferGroup {
    std::string group_id;  // "<module_type>.r<rank>"
    std::string module_type;
    int rank = 0;
    int alpha_index = 0;
};

struct TransferUnit {
    TransferGroup group;
    int target_layer = 0;
    LoraPair target_pair;
    /// (source index, pair at the mapped layer), ordered by source index.
    std::vector<std::pair<int, LoraPair>> source_pairs;

    std::string id() const;
};

using AliasTable = std::map<std::string, std::string>;

/// Map a raw module token to its canonical type, or nullopt when the token is
/// outside the vocabulary even after aliasing.
std::optional<std::string> canonical_type(const std::string& raw, const AliasTable& aliases);

/// One group per (module type, rank) present in the target and at least one
/// source, ordered by type then rank.
std::vector<TransferGroup> build_groups(const AdapterSet& target, const std::vector<AdapterSet>& sources,
                                        const AliasTable& aliases = {});

/// One unit per (group, target layer) with the target pair present and at
/// least one source pair at the mapped layer.
std::vector<TransferUnit> select_active_units(const std::vector<TransferGroup>& groups, const AdapterSet& target,
                                              const std::vector<AdapterSet>& sources,
                                              const std::vector<LayerMap>& layer_maps,
                                              const AliasTable& aliases = {});

}  // namespace lorafuse
