#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <stdexcept>

#include "u5mr/aggregate.hpp"

using namespace u5mr;

namespace {

gmrf::SpatialMesh unit_mesh(int ncols, int nrows, double cellsize = 1.0) {
    gmrf::SpatialMesh mesh;
    mesh.ncols = ncols;
    mesh.nrows = nrows;
    mesh.xllcorner = 0.0;
    mesh.yllcorner = 0.0;
    mesh.cellsize = cellsize;
    return mesh;
}

aggregate::RegionSet::Region rectangle(const std::string& id, double x0, double y0, double x1,
                                       double y1) {
    aggregate::RegionSet::Region r;
    r.id = id;
    r.rings = {{{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}, {x0, y0}}};
    return r;
}

}  // namespace

TEST_CASE("type-7 quantiles interpolate order statistics") {
    std::vector<double> v = {4.0, 1.0, 3.0, 2.0};
    CHECK(aggregate::quantile(v, 0.0) == doctest::Approx(1.0));
    CHECK(aggregate::quantile(v, 1.0) == doctest::Approx(4.0));
    CHECK(aggregate::quantile(v, 0.5) == doctest::Approx(2.5));
    CHECK(aggregate::quantile(v, 0.25) == doctest::Approx(1.75));
    CHECK(aggregate::quantile({7.0}, 0.3) == doctest::Approx(7.0));
}

TEST_CASE("point-in-polygon honors the even-odd rule for holes") {
    aggregate::RegionSet::Region donut;
    donut.id = "d";
    donut.rings = {{{0, 0}, {4, 0}, {4, 4}, {0, 4}, {0, 0}},
                   {{1, 1}, {3, 1}, {3, 3}, {1, 3}, {1, 1}}};
    CHECK(aggregate::point_in_region(donut, 0.5, 0.5));
    CHECK_FALSE(aggregate::point_in_region(donut, 2.0, 2.0));  // inside the hole
    CHECK_FALSE(aggregate::point_in_region(donut, 5.0, 2.0));
}

TEST_CASE("cell assignment splits a grid between two rectangles") {
    auto mesh = unit_mesh(4, 2);
    aggregate::RegionSet set;
    set.regions.push_back(rectangle("west", 0, 0, 2, 2));
    set.regions.push_back(rectangle("east", 2, 0, 4, 2));
    auto assign = set.assign_cells(mesh);
    REQUIRE(assign.size() == 8);
    for (int cell = 0; cell < 8; ++cell) {
        int expected = (cell % 4) < 2 ? 0 : 1;
        CHECK(assign[static_cast<size_t>(cell)] == expected);
    }
}

TEST_CASE("aggregating a constant surface returns the constant") {
    auto mesh = unit_mesh(3, 3);
    aggregate::RegionSet set;
    set.regions.push_back(rectangle("all", 0, 0, 3, 3));
    aggregate::Vector density(9);
    for (int i = 0; i < 9; ++i) density(i) = 1.0 + i;  // arbitrary positive weights
    std::map<int, aggregate::Matrix> surfaces;
    surfaces[2000] = aggregate::Matrix::Constant(10, 9, 0.07);
    auto series = aggregate::aggregate_region(surfaces, density, mesh, set);
    REQUIRE(series.size() == 1);
    REQUIRE(series[0].years.size() == 1);
    CHECK((series[0].samples.array() - 0.07).abs().maxCoeff() < 1e-14);
    CHECK(series[0].summary[0].mean == doctest::Approx(0.07));
    CHECK(series[0].summary[0].q025 == doctest::Approx(0.07));
}

TEST_CASE("population weights average two cells as expected") {
    auto mesh = unit_mesh(3, 3);
    aggregate::RegionSet set;
    set.regions.push_back(rectangle("pair", 0, 2, 2, 3));  // top row, first two cells
    aggregate::Vector density = aggregate::Vector::Zero(9);
    density(0) = 3.0;
    density(1) = 1.0;
    std::map<int, aggregate::Matrix> surfaces;
    aggregate::Matrix s = aggregate::Matrix::Zero(1, 9);
    s(0, 0) = 0.1;
    s(0, 1) = 0.2;
    surfaces[2000] = s;
    auto series = aggregate::aggregate_region(surfaces, density, mesh, set);
    REQUIRE(series.size() == 1);
    CHECK(series[0].samples(0, 0) == doctest::Approx(0.125).epsilon(1e-12));
}

TEST_CASE("region aggregation is a convex combination of cell values") {
    auto mesh = unit_mesh(4, 4);
    aggregate::RegionSet set;
    set.regions.push_back(rectangle("all", 0, 0, 4, 4));
    std::mt19937_64 rng(5);
    aggregate::Vector density(16);
    aggregate::Matrix s(7, 16);
    for (int i = 0; i < 16; ++i) {
        density(i) = 0.1 + static_cast<double>(rng() % 100);
        for (int r = 0; r < 7; ++r) {
            s(r, i) = static_cast<double>(rng() % 1000) / 1000.0;
        }
    }
    std::map<int, aggregate::Matrix> surfaces;
    surfaces[1999] = s;
    auto series = aggregate::aggregate_region(surfaces, density, mesh, set);
    for (int r = 0; r < 7; ++r) {
        double lo = s.row(r).minCoeff();
        double hi = s.row(r).maxCoeff();
        CHECK(series[0].samples(r, 0) >= lo - 1e-12);
        CHECK(series[0].samples(r, 0) <= hi + 1e-12);
    }
}

TEST_CASE("rescaling density leaves regional aggregates unchanged") {
    auto mesh = unit_mesh(3, 3);
    aggregate::RegionSet set;
    set.regions.push_back(rectangle("all", 0, 0, 3, 3));
    std::mt19937_64 rng(8);
    aggregate::Vector density(9);
    aggregate::Matrix s(4, 9);
    for (int i = 0; i < 9; ++i) {
        density(i) = 1.0 + static_cast<double>(rng() % 50);
        for (int r = 0; r < 4; ++r) s(r, i) = static_cast<double>(rng() % 1000) / 1000.0;
    }
    std::map<int, aggregate::Matrix> surfaces{{2005, s}};
    auto a = aggregate::aggregate_region(surfaces, density, mesh, set);
    auto b = aggregate::aggregate_region(surfaces, aggregate::Vector(13.7 * density), mesh, set);
    CHECK((a[0].samples - b[0].samples).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("decline summaries count the target boundary as achieved") {
    aggregate::CountySeries series;
    series.region_id = "r";
    series.years = {1990, 2015};
    series.samples = aggregate::Matrix(3, 2);
    // Declines of exactly 67%, more, and less.
    series.samples << 0.300, 0.099, 0.300, 0.060, 0.300, 0.200;
    auto drop = aggregate::mdg_drop(series, 1990, 2015, 67.0);
    CHECK(drop.prob_target == doctest::Approx(2.0 / 3.0));
    CHECK(drop.median_drop_pct == doctest::Approx(67.0).epsilon(1e-9));

    aggregate::CountySeries flat = series;
    flat.samples.col(1) = flat.samples.col(0);
    auto none = aggregate::mdg_drop(flat, 1990, 2015, 67.0);
    CHECK(none.prob_target == doctest::Approx(0.0));
    CHECK(none.median_drop_pct == doctest::Approx(0.0));
}

TEST_CASE("missing years in a decline summary are rejected") {
    aggregate::CountySeries series;
    series.region_id = "r";
    series.years = {1990, 2014};
    series.samples = aggregate::Matrix::Constant(2, 2, 0.1);
    CHECK_THROWS(aggregate::mdg_drop(series, 1990, 2015, 67.0));
}

TEST_CASE("pixel spread of a constant surface is one") {
    auto summary = aggregate::pixel_ratio_summary(aggregate::Matrix::Constant(50, 30, 0.08));
    CHECK(summary.ratio == doctest::Approx(1.0));
    CHECK(summary.q05 == doctest::Approx(0.08));
    CHECK(summary.q95 == doctest::Approx(0.08));
}

TEST_CASE("pixel spread of a lognormal field approaches its theoretical ratio") {
    // Cell medians are exp(z_i) with z ~ N(0, sigma^2): the 95/5 ratio of the
    // medians converges to exp(2 * 1.645 * sigma).
    double sigma = 0.4;
    std::mt19937_64 rng(21);
    int n_cells = 20000;
    aggregate::Matrix s(1, n_cells);
    for (int i = 0; i < n_cells; ++i) s(0, i) = std::exp(sigma * gmrf::standard_normal(rng));
    auto summary = aggregate::pixel_ratio_summary(s);
    double expected = std::exp(2.0 * 1.6449 * sigma);
    CHECK(std::abs(summary.ratio - expected) / expected < 0.05);
}

TEST_CASE("geojson region files round trip") {
    auto dir = std::filesystem::temp_directory_path() / "u5mr_regions";
    std::filesystem::create_directories(dir);
    aggregate::RegionSet set;
    set.regions.push_back(rectangle("alpha", 0, 0, 2, 2));
    set.regions.push_back(rectangle("beta", 2, 0, 4, 2));
    set.to_geojson(dir / "regions.geojson");
    auto loaded = aggregate::RegionSet::from_geojson(dir / "regions.geojson");
    REQUIRE(loaded.regions.size() == 2);
    CHECK(loaded.regions[0].id == "alpha");
    CHECK(loaded.regions[1].id == "beta");
    auto mesh = unit_mesh(4, 2);
    CHECK(loaded.assign_cells(mesh) == set.assign_cells(mesh));
}

TEST_CASE("county series files carry the summaries") {
    auto dir = std::filesystem::temp_directory_path() / "u5mr_regions";
    std::filesystem::create_directories(dir);
    aggregate::CountySeries series;
    series.region_id = "c1";
    series.years = {2000, 2001};
    series.samples = aggregate::Matrix(4, 2);
    series.samples << 0.1, 0.2, 0.2, 0.3, 0.3, 0.4, 0.4, 0.5;
    series.summary.resize(2);
    for (int y = 0; y < 2; ++y) {
        std::vector<double> col;
        for (int s = 0; s < 4; ++s) col.push_back(series.samples(s, y));
        series.summary[static_cast<size_t>(y)].median = aggregate::quantile(col, 0.5);
        series.summary[static_cast<size_t>(y)].q025 = aggregate::quantile(col, 0.025);
        series.summary[static_cast<size_t>(y)].q975 = aggregate::quantile(col, 0.975);
    }
    aggregate::save_county_series(dir / "series.csv", {series});
    CHECK(std::filesystem::file_size(dir / "series.csv") > 0);
    CHECK(series.year_index(2001) == 1);
    CHECK_THROWS(series.year_index(1999));
}
