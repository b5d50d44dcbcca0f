// SPDX-License-Identifier: Apache-2.0
#include "lorafuse/config.hpp"

#include <fstream>
#include <sstream>

namespace lorafuse {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace

ConfigFile ConfigFile::parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw config_error("cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_string(buf.str());
}

ConfigFile ConfigFile::parse_string(const std::string& text) {
    ConfigFile cfg;
    std::istringstream in(text);
    std::string line;
    std::string section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find_first_of("#;");
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw config_error("unterminated section header at line " + std::to_string(lineno));
            section = trim(line.substr(1, line.size() - 2));
            cfg.sections_[section];
            continue;
        }
        const size_t eq = line.find('=');
        if (eq == std::string::npos) throw config_error("expected key = value at line " + std::to_string(lineno));
        const std::string key = trim(line.substr(0, eq));
        if (key.empty()) throw config_error("empty key at line " + std::to_string(lineno));
        cfg.sections_[section][key] = trim(line.substr(eq + 1));
    }
    return cfg;
}

bool ConfigFile::has(const std::string& section, const std::string& key) const {
    auto it = sections_.find(section);
    return it != sections_.end() && it->second.count(key) > 0;
}

std::string ConfigFile::get(const std::string& section, const std::string& key, const std::string& fallback) const {
    auto it = sections_.find(section);
    if (it == sections_.end()) return fallback;
    auto kit = it->second.find(key);
    return kit == it->second.end() ? fallback : kit->second;
}

int ConfigFile::get_int(const std::string& section, const std::string& key, int fallback) const {
    if (!has(section, key)) return fallback;
    return std::stoi(get(section, key));
}

uint64_t ConfigFile::get_u64(const std::string& section, const std::string& key, uint64_t fallback) const {
    if (!has(section, key)) return fallback;
    return std::stoull(get(section, key));
}

double ConfigFile::get_double(const std::string& section, const std::string& key, double fallback) const {
    if (!has(section, key)) return fallback;
    return std::stod(get(section, key));
}

std::vector<std::string> ConfigFile::get_list(const std::string& section, const std::string& key) const {
    std::vector<std::string> out;
    std::string raw = get(section, key);
    std::istringstream in(raw);
    std::string item;
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

const std::map<std::string, std::string>& ConfigFile::section(const std::string& name) const {
    static const std::map<std::string, std::string> empty;
    auto it = sections_.find(name);
    return it == sections_.end() ? empty : it->second;
}

void ConfigFile::set(const std::string& section, const std::string& key, const std::string& value) {
    sections_[section][key] = value;
}

std::string ConfigFile::canonical() const {
    std::ostringstream out;
    for (const auto& [section, kv] : sections_)
        for (const auto& [key, value] : kv) out << section << "." << key << "=" << value << "\n";
    return out.str();
}

std::string ConfigFile::hash() const {
    const std::string text = canonical();
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    std::ostringstream out;
    out << std::hex;
    for (int i = 15; i >= 0; --i) out << ((h >> (4 * i)) & 0xf);
    return out.str();
}

}  // namespace lorafuse
