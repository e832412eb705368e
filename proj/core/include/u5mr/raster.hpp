#pragma once

#include <filesystem>
#include <vector>

namespace u5mr::raster {

// Regular lon/lat grid with the plain-text ASCII grid header convention
// (ncols, nrows, xllcorner, yllcorner, cellsize, NODATA_value) followed by
// row-major values, first row = northernmost.
struct Grid {
    int ncols = 0;
    int nrows = 0;
    double xllcorner = 0.0;
    double yllcorner = 0.0;
    double cellsize = 0.0;
    double nodata = -9999.0;
    std::vector<double> values;  // row-major, north to south

    int size() const { return ncols * nrows; }
    // Linear cell index with row 0 = northernmost.
    double& at(int row, int col) { return values[static_cast<size_t>(row * ncols + col)]; }
    double at(int row, int col) const { return values[static_cast<size_t>(row * ncols + col)]; }

    double cell_center_lon(int col) const { return xllcorner + (col + 0.5) * cellsize; }
    double cell_center_lat(int row) const {
        return yllcorner + (nrows - row - 0.5) * cellsize;
    }
    // Cell containing the point, or -1 when outside the grid.
    int cell_of(double lon, double lat) const;

    void validate() const;
};

Grid read_ascii_grid(const std::filesystem::path& path);
void write_ascii_grid(const std::filesystem::path& path, const Grid& g);

}  // namespace u5mr::raster
