// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "lorafuse/mat.hpp"

namespace lorafuse {

/// Module types eligible for fusion. Foreign tokens can be mapped onto these
/// through the alias table (see topology).
const std::vector<std::string>& canonical_module_vocabulary();
bool is_canonical_module_type(const std::string& type);

struct ModuleKey {
    int layer = 0;
    std::string module_type;
    int rank = 0;

    auto operator<=>(const ModuleKey&) const = default;
    std::string str() const;
};

/// One module's low-rank factors: A is rank x d_in, B is d_out x rank.
struct LoraPair {
    ModuleKey key;
    /// Tensor name up to and including the module type; factors serialize as
    /// `<name_prefix>.lora_A.weight` / `<name_prefix>.lora_B.weight`.
    std::string name_prefix;
    Mat<float> A;
    Mat<float> B;

    int d_in() const { return A.cols; }
    int d_out() const { return B.rows; }
};

/// Raw f32 tensor preserved verbatim (used for tensors outside the LoRA
/// naming scheme; they never enter fusion but round-trip byte-identically).
struct TensorRecord {
    std::string name;
    std::vector<int64_t> shape;
    std::vector<float> data;
};

struct AdapterSet {
    std::string family_id;
    int layer_count = 0;
    std::map<ModuleKey, LoraPair> pairs;
    std::vector<TensorRecord> extras;
};

struct LoadReport {
    std::vector<std::string> unrecognized;
    std::vector<std::string> unknown_module_types;
};

struct store_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Container layout: 8-byte little-endian header length, UTF-8 JSON header
/// mapping tensor name -> {dtype, shape, data_offsets}, then one contiguous
/// byte buffer. Only F32 is accepted. Header keys are written in
/// lexicographic order and offsets follow that order.
AdapterSet load_adapter(const std::string& path, LoadReport* report = nullptr);
void save_adapter(const AdapterSet& set, const std::string& path);

/// Invariant sweep; an empty result means the set is well-formed.
std::vector<std::string> validate_adapter(const AdapterSet& set);

/// Construct a pair with the default PEFT-style name prefix for its type.
LoraPair make_pair(int layer, const std::string& module_type, Mat<float> a, Mat<float> b);

}  // namespace lorafuse
