#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace u5mr::csv {

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    // Column index for a header name; throws std::runtime_error if absent.
    size_t col(const std::string& name) const;
};

Table read_file(const std::filesystem::path& path);

// Writes header + rows, comma separated, LF line endings. The write goes to a
// temporary file in the same directory which is renamed into place.
void write_file(const std::filesystem::path& path, const Table& table);

// Atomic whole-file write used by every artifact writer.
void write_text_atomic(const std::filesystem::path& path, const std::string& content);

}  // namespace u5mr::csv
