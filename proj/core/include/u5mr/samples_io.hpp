#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace u5mr::samples_io {

// Dense float64 array written as raw little-endian binary plus a JSON sidecar
// (`<path>.json`) describing the dimensions, in storage order (first dimension
// slowest).
struct SampleArray {
    std::vector<std::string> dim_names;
    std::vector<int> shape;
    std::vector<double> data;  // row-major in `shape` order

    size_t expected_size() const;
    void validate() const;
};

void save(const std::filesystem::path& path, const SampleArray& array);
SampleArray load(const std::filesystem::path& path);

}  // namespace u5mr::samples_io
