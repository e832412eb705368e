#include "u5mr/config.hpp"

#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace u5mr::config {

namespace {

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
}

}  // namespace

Config Config::from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("config: cannot open " + path.string());
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return from_string(buf.str(), path.string());
}

Config Config::from_string(const std::string& text, const std::string& origin) {
    Config cfg;
    cfg.origin_ = origin;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::runtime_error(origin + ":" + std::to_string(lineno) +
                                     ": expected 'key = value'");
        }
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) {
            throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": empty key");
        }
        cfg.entries_[key] = value;
    }
    return cfg;
}

bool Config::has(const std::string& key) const { return entries_.count(key) > 0; }

void Config::set(const std::string& key, const std::string& value) {
    entries_[key] = value;
}

const std::string& Config::require(const std::string& key) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) {
        throw std::runtime_error("config " + origin_ + ": missing key '" + key + "'");
    }
    return it->second;
}

std::string Config::get_string(const std::string& key) const { return require(key); }

std::string Config::get_string(const std::string& key, const std::string& def) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? def : it->second;
}

int Config::get_int(const std::string& key) const {
    try {
        size_t pos = 0;
        int v = std::stoi(require(key), &pos);
        if (pos != require(key).size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::logic_error&) {
        throw std::runtime_error("config " + origin_ + ": key '" + key + "' is not an integer");
    }
}

int Config::get_int(const std::string& key, int def) const {
    return has(key) ? get_int(key) : def;
}

double Config::get_double(const std::string& key) const {
    try {
        size_t pos = 0;
        double v = std::stod(require(key), &pos);
        if (pos != require(key).size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::logic_error&) {
        throw std::runtime_error("config " + origin_ + ": key '" + key + "' is not a number");
    }
}

double Config::get_double(const std::string& key, double def) const {
    return has(key) ? get_double(key) : def;
}

bool Config::get_bool(const std::string& key, bool def) const {
    if (!has(key)) return def;
    const std::string& v = require(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw std::runtime_error("config " + origin_ + ": key '" + key + "' is not a boolean");
}

std::vector<std::string> Config::get_list(const std::string& key) const {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(require(key));
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::string Config::digest() const {
    // 64-bit FNV-1a over the sorted entries; std::map iteration is sorted.
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const std::string& s) {
        for (unsigned char c : s) {
            h ^= c;
            h *= 1099511628211ULL;
        }
    };
    for (const auto& [k, v] : entries_) {
        mix(k);
        mix("=");
        mix(v);
        mix("\n");
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

}  // namespace u5mr::config
