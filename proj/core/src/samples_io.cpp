#include "u5mr/samples_io.hpp"

#include <fstream>
#include <nlohmann/json.hpp>
#include <stdexcept>

namespace u5mr::samples_io {

size_t SampleArray::expected_size() const {
    size_t n = 1;
    for (int s : shape) n *= static_cast<size_t>(s);
    return n;
}

void SampleArray::validate() const {
    if (dim_names.size() != shape.size()) {
        throw std::invalid_argument("SampleArray: dim_names/shape length mismatch");
    }
    for (int s : shape) {
        if (s <= 0) throw std::invalid_argument("SampleArray: non-positive dimension");
    }
    if (data.size() != expected_size()) {
        throw std::invalid_argument("SampleArray: data size does not match shape");
    }
}

void save(const std::filesystem::path& path, const SampleArray& array) {
    array.validate();
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("samples_io: cannot open " + tmp.string());
        out.write(reinterpret_cast<const char*>(array.data.data()),
                  static_cast<std::streamsize>(array.data.size() * sizeof(double)));
        if (!out) throw std::runtime_error("samples_io: write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);

    nlohmann::json meta;
    meta["dtype"] = "float64";
    meta["byte_order"] = "little";
    meta["dims"] = array.dim_names;
    meta["shape"] = array.shape;
    auto sidecar = path;
    sidecar += ".json";
    auto sidecar_tmp = sidecar;
    sidecar_tmp += ".tmp";
    {
        std::ofstream out(sidecar_tmp, std::ios::trunc);
        out << meta.dump(2) << "\n";
    }
    std::filesystem::rename(sidecar_tmp, sidecar);
}

SampleArray load(const std::filesystem::path& path) {
    auto sidecar = path;
    sidecar += ".json";
    std::ifstream meta_in(sidecar);
    if (!meta_in) throw std::runtime_error("samples_io: missing sidecar " + sidecar.string());
    nlohmann::json meta = nlohmann::json::parse(meta_in);
    SampleArray a;
    a.dim_names = meta.at("dims").get<std::vector<std::string>>();
    a.shape = meta.at("shape").get<std::vector<int>>();
    a.data.resize(a.expected_size());
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("samples_io: cannot open " + path.string());
    in.read(reinterpret_cast<char*>(a.data.data()),
            static_cast<std::streamsize>(a.data.size() * sizeof(double)));
    if (static_cast<size_t>(in.gcount()) != a.data.size() * sizeof(double)) {
        throw std::runtime_error("samples_io: short read from " + path.string());
    }
    a.validate();
    return a;
}

}  // namespace u5mr::samples_io
