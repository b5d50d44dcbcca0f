// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace lorafuse {

struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Flat `key = value` file with [section] headers, `#`/`;` comments, and
/// comma-separated lists.
class ConfigFile {
public:
    static ConfigFile parse_file(const std::string& path);
    static ConfigFile parse_string(const std::string& text);

    bool has(const std::string& section, const std::string& key) const;
    std::string get(const std::string& section, const std::string& key, const std::string& fallback = "") const;
    int get_int(const std::string& section, const std::string& key, int fallback) const;
    uint64_t get_u64(const std::string& section, const std::string& key, uint64_t fallback) const;
    double get_double(const std::string& section, const std::string& key, double fallback) const;
    std::vector<std::string> get_list(const std::string& section, const std::string& key) const;
    const std::map<std::string, std::string>& section(const std::string& name) const;

    void set(const std::string& section, const std::string& key, const std::string& value);

    /// Sorted `section.key=value` lines; the hash input.
    std::string canonical() const;
    /// FNV-1a 64 over the canonical form, as fixed-width hex.
    std::string hash() const;

private:
    std::map<std::string, std::map<std::string, std::string>> sections_;
};

}  // namespace lorafuse
