#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace u5mr::config {

// Plain-text key-value configuration: one `key = value` per line, `#` starts
// a comment. Values are strings; typed getters parse on demand.
class Config {
  public:
    Config() = default;
    static Config from_file(const std::filesystem::path& path);
    static Config from_string(const std::string& text, const std::string& origin = "<string>");

    bool has(const std::string& key) const;
    void set(const std::string& key, const std::string& value);

    std::string get_string(const std::string& key) const;
    std::string get_string(const std::string& key, const std::string& def) const;
    int get_int(const std::string& key) const;
    int get_int(const std::string& key, int def) const;
    double get_double(const std::string& key) const;
    double get_double(const std::string& key, double def) const;
    bool get_bool(const std::string& key, bool def) const;
    // Comma-separated list value.
    std::vector<std::string> get_list(const std::string& key) const;

    // Deterministic FNV-1a digest over the sorted key=value pairs.
    std::string digest() const;

    const std::map<std::string, std::string>& entries() const { return entries_; }

  private:
    std::map<std::string, std::string> entries_;
    std::string origin_ = "<empty>";

    const std::string& require(const std::string& key) const;
};

}  // namespace u5mr::config
