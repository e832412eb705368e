#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "u5mr/gmrf.hpp"

namespace u5mr::aggregate {

using gmrf::Matrix;
using gmrf::Vector;

// Administrative regions as lon/lat polygons; cells are assigned by
// point-in-polygon on their centers (even-odd rule, so holes work).
struct RegionSet {
    struct Region {
        std::string id;
        // Each ring is a closed sequence of (lon, lat) vertices.
        std::vector<std::vector<std::array<double, 2>>> rings;
    };
    std::vector<Region> regions;

    static RegionSet from_geojson(const std::filesystem::path& path);
    void to_geojson(const std::filesystem::path& path) const;

    // Region index per mesh cell, -1 for cells outside every region.
    std::vector<int> assign_cells(const gmrf::SpatialMesh& mesh) const;
};

bool point_in_region(const RegionSet::Region& region, double lon, double lat);

struct CountySummary {
    double mean = 0.0;
    double median = 0.0;
    double q025 = 0.0;
    double q975 = 0.0;
};

struct CountySeries {
    std::string region_id;
    std::vector<int> years;
    Matrix samples;  // n_samples x n_years
    std::vector<CountySummary> summary;

    int year_index(int year) const;  // throws when the year is absent
};

// Population-weighted mean of the surface over each region, per posterior
// sample. `surface_samples` maps year -> (n_samples x n_cells) matrix.
std::vector<CountySeries> aggregate_region(const std::map<int, Matrix>& surface_samples,
                                           const Vector& density,
                                           const gmrf::SpatialMesh& mesh,
                                           const RegionSet& regions);

struct MdgDrop {
    double median_drop_pct = 0.0;  // posterior median of 100 (1 - later/earlier)
    double prob_target = 0.0;      // P(drop >= 67%), boundary counts as achieved
};

MdgDrop mdg_drop(const CountySeries& series, int year_from = 1990, int year_to = 2015,
                 double target_pct = 67.0);

struct PixelRatioSummary {
    double q05 = 0.0;
    double q95 = 0.0;
    double ratio = 1.0;
};

// 5% / 95% points of the per-cell posterior medians and their ratio.
PixelRatioSummary pixel_ratio_summary(const Matrix& surface_samples);

// Type-7 quantile of a copy of the data.
double quantile(std::vector<double> values, double p);

// Output CSV: region, year, median, q025, q975
void save_county_series(const std::filesystem::path& path,
                        const std::vector<CountySeries>& series);

}  // namespace u5mr::aggregate
