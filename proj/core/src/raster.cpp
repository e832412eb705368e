#include "u5mr/raster.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "u5mr/csv.hpp"

namespace u5mr::raster {

int Grid::cell_of(double lon, double lat) const {
    int col = static_cast<int>(std::floor((lon - xllcorner) / cellsize));
    int row_from_bottom = static_cast<int>(std::floor((lat - yllcorner) / cellsize));
    if (col < 0 || col >= ncols || row_from_bottom < 0 || row_from_bottom >= nrows) {
        return -1;
    }
    int row = nrows - 1 - row_from_bottom;
    return row * ncols + col;
}

void Grid::validate() const {
    if (ncols <= 0 || nrows <= 0) {
        throw std::invalid_argument("raster: non-positive dimensions");
    }
    if (!(cellsize > 0.0)) {
        throw std::invalid_argument("raster: cellsize must be positive");
    }
    if (values.size() != static_cast<size_t>(ncols) * static_cast<size_t>(nrows)) {
        throw std::invalid_argument("raster: value count does not match dimensions");
    }
}

Grid read_ascii_grid(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("raster: cannot open " + path.string());
    }
    Grid g;
    for (int i = 0; i < 6; ++i) {
        std::string key;
        in >> key;
        double val;
        if (!(in >> val)) {
            throw std::runtime_error("raster: bad header in " + path.string());
        }
        if (key == "ncols") g.ncols = static_cast<int>(val);
        else if (key == "nrows") g.nrows = static_cast<int>(val);
        else if (key == "xllcorner") g.xllcorner = val;
        else if (key == "yllcorner") g.yllcorner = val;
        else if (key == "cellsize") g.cellsize = val;
        else if (key == "NODATA_value" || key == "nodata_value") g.nodata = val;
        else throw std::runtime_error("raster: unknown header key '" + key + "'");
    }
    g.values.reserve(static_cast<size_t>(g.ncols) * static_cast<size_t>(g.nrows));
    double v;
    while (in >> v) g.values.push_back(v);
    g.validate();
    return g;
}

void write_ascii_grid(const std::filesystem::path& path, const Grid& g) {
    g.validate();
    std::ostringstream out;
    out << "ncols " << g.ncols << "\n"
        << "nrows " << g.nrows << "\n"
        << std::setprecision(17)
        << "xllcorner " << g.xllcorner << "\n"
        << "yllcorner " << g.yllcorner << "\n"
        << "cellsize " << g.cellsize << "\n"
        << "NODATA_value " << g.nodata << "\n";
    for (int r = 0; r < g.nrows; ++r) {
        for (int c = 0; c < g.ncols; ++c) {
            if (c) out << ' ';
            out << g.at(r, c);
        }
        out << '\n';
    }
    csv::write_text_atomic(path, out.str());
}

}  // namespace u5mr::raster
