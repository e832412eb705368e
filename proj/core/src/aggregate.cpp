#include "u5mr/aggregate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <stdexcept>

#include "u5mr/csv.hpp"

namespace u5mr::aggregate {

namespace {

std::vector<std::vector<std::array<double, 2>>> rings_from_polygon(
    const nlohmann::json& coords) {
    std::vector<std::vector<std::array<double, 2>>> rings;
    for (const auto& ring : coords) {
        std::vector<std::array<double, 2>> r;
        for (const auto& pt : ring) {
            r.push_back({pt.at(0).get<double>(), pt.at(1).get<double>()});
        }
        rings.push_back(std::move(r));
    }
    return rings;
}

}  // namespace

RegionSet RegionSet::from_geojson(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("regions: cannot open " + path.string());
    nlohmann::json doc = nlohmann::json::parse(in);
    if (doc.at("type") != "FeatureCollection") {
        throw std::runtime_error("regions: expected a GeoJSON FeatureCollection");
    }
    RegionSet rs;
    for (const auto& feature : doc.at("features")) {
        Region region;
        const auto& props = feature.at("properties");
        if (props.contains("id")) {
            const auto& id = props.at("id");
            region.id = id.is_string() ? id.get<std::string>() : id.dump();
        } else {
            throw std::runtime_error("regions: feature without an 'id' property");
        }
        const auto& geom = feature.at("geometry");
        std::string type = geom.at("type").get<std::string>();
        if (type == "Polygon") {
            region.rings = rings_from_polygon(geom.at("coordinates"));
        } else if (type == "MultiPolygon") {
            for (const auto& poly : geom.at("coordinates")) {
                for (auto& ring : rings_from_polygon(poly)) {
                    region.rings.push_back(std::move(ring));
                }
            }
        } else {
            throw std::runtime_error("regions: unsupported geometry type " + type);
        }
        rs.regions.push_back(std::move(region));
    }
    if (rs.regions.empty()) throw std::runtime_error("regions: no features in " + path.string());
    return rs;
}

void RegionSet::to_geojson(const std::filesystem::path& path) const {
    nlohmann::json features = nlohmann::json::array();
    for (const auto& region : regions) {
        nlohmann::json rings = nlohmann::json::array();
        for (const auto& ring : region.rings) {
            nlohmann::json r = nlohmann::json::array();
            for (const auto& pt : ring) r.push_back({pt[0], pt[1]});
            rings.push_back(std::move(r));
        }
        features.push_back({{"type", "Feature"},
                            {"properties", {{"id", region.id}}},
                            {"geometry", {{"type", "Polygon"}, {"coordinates", rings}}}});
    }
    nlohmann::json doc = {{"type", "FeatureCollection"}, {"features", features}};
    csv::write_text_atomic(path, doc.dump(2) + "\n");
}

bool point_in_region(const RegionSet::Region& region, double lon, double lat) {
    // Even-odd ray casting across all rings.
    bool inside = false;
    for (const auto& ring : region.rings) {
        size_t n = ring.size();
        for (size_t i = 0, j = n - 1; i < n; j = i++) {
            double xi = ring[i][0], yi = ring[i][1];
            double xj = ring[j][0], yj = ring[j][1];
            bool crosses = (yi > lat) != (yj > lat);
            if (crosses && lon < (xj - xi) * (lat - yi) / (yj - yi) + xi) {
                inside = !inside;
            }
        }
    }
    return inside;
}

std::vector<int> RegionSet::assign_cells(const gmrf::SpatialMesh& mesh) const {
    std::vector<int> assignment(static_cast<size_t>(mesh.size()), -1);
    for (int cell = 0; cell < mesh.size(); ++cell) {
        double lon = mesh.center_lon(cell);
        double lat = mesh.center_lat(cell);
        for (size_t r = 0; r < regions.size(); ++r) {
            if (point_in_region(regions[r], lon, lat)) {
                assignment[static_cast<size_t>(cell)] = static_cast<int>(r);
                break;
            }
        }
    }
    return assignment;
}

int CountySeries::year_index(int year) const {
    for (size_t i = 0; i < years.size(); ++i) {
        if (years[i] == year) return static_cast<int>(i);
    }
    throw std::invalid_argument("CountySeries " + region_id + ": year " +
                                std::to_string(year) + " not present");
}

double quantile(std::vector<double> values, double p) {
    if (values.empty()) throw std::invalid_argument("quantile: empty input");
    std::sort(values.begin(), values.end());
    double h = p * (static_cast<double>(values.size()) - 1.0);
    size_t lo = static_cast<size_t>(std::floor(h));
    size_t hi = std::min(lo + 1, values.size() - 1);
    double f = h - static_cast<double>(lo);
    return values[lo] * (1.0 - f) + values[hi] * f;
}

namespace {

CountySummary summarize(const Eigen::Ref<const Vector>& column) {
    std::vector<double> v(column.data(), column.data() + column.size());
    CountySummary s;
    s.mean = column.mean();
    s.median = quantile(v, 0.5);
    s.q025 = quantile(v, 0.025);
    s.q975 = quantile(v, 0.975);
    return s;
}

}  // namespace

std::vector<CountySeries> aggregate_region(const std::map<int, Matrix>& surface_samples,
                                           const Vector& density,
                                           const gmrf::SpatialMesh& mesh,
                                           const RegionSet& regions) {
    if (surface_samples.empty()) {
        throw std::invalid_argument("aggregate_region: no surface samples");
    }
    int n_cells = mesh.size();
    if (density.size() != n_cells) {
        throw std::invalid_argument("aggregate_region: density/mesh size mismatch");
    }
    auto assignment = regions.assign_cells(mesh);

    // Per-region weights, normalized over the region; the cell area cancels.
    std::vector<std::vector<std::pair<int, double>>> weights(regions.regions.size());
    std::vector<double> totals(regions.regions.size(), 0.0);
    for (int cell = 0; cell < n_cells; ++cell) {
        int r = assignment[static_cast<size_t>(cell)];
        if (r < 0) continue;
        weights[static_cast<size_t>(r)].emplace_back(cell, density[cell]);
        totals[static_cast<size_t>(r)] += density[cell];
    }
    for (size_t r = 0; r < regions.regions.size(); ++r) {
        if (weights[r].empty()) {
            throw std::invalid_argument("aggregate_region: region " + regions.regions[r].id +
                                        " contains no cells");
        }
        if (!(totals[r] > 0.0)) {
            throw std::invalid_argument("aggregate_region: region " + regions.regions[r].id +
                                        " has zero total density");
        }
    }

    int n_samples = static_cast<int>(surface_samples.begin()->second.rows());
    std::vector<CountySeries> out;
    out.reserve(regions.regions.size());
    for (size_t r = 0; r < regions.regions.size(); ++r) {
        CountySeries cs;
        cs.region_id = regions.regions[r].id;
        cs.samples.resize(n_samples, static_cast<Eigen::Index>(surface_samples.size()));
        int yi = 0;
        for (const auto& [year, surf] : surface_samples) {
            if (surf.cols() != n_cells || surf.rows() != n_samples) {
                throw std::invalid_argument("aggregate_region: sample matrix shape mismatch");
            }
            cs.years.push_back(year);
            Vector agg = Vector::Zero(n_samples);
            for (const auto& [cell, w] : weights[r]) {
                agg += (w / totals[r]) * surf.col(cell);
            }
            cs.samples.col(yi) = agg;
            cs.summary.push_back(summarize(agg));
            ++yi;
        }
        out.push_back(std::move(cs));
    }
    return out;
}

MdgDrop mdg_drop(const CountySeries& series, int year_from, int year_to, double target_pct) {
    int i_from = series.year_index(year_from);
    int i_to = series.year_index(year_to);
    int n = static_cast<int>(series.samples.rows());
    std::vector<double> drops(static_cast<size_t>(n));
    int achieved = 0;
    for (int s = 0; s < n; ++s) {
        double before = series.samples(s, i_from);
        double after = series.samples(s, i_to);
        if (!(before > 0.0)) {
            throw std::invalid_argument("mdg_drop: zero baseline U5MR in sample " +
                                        std::to_string(s));
        }
        double drop = 100.0 * (before - after) / before;
        drops[static_cast<size_t>(s)] = drop;
        if (drop >= target_pct) ++achieved;
    }
    MdgDrop out;
    out.median_drop_pct = quantile(drops, 0.5);
    out.prob_target = static_cast<double>(achieved) / static_cast<double>(n);
    return out;
}

PixelRatioSummary pixel_ratio_summary(const Matrix& surface_samples) {
    if (surface_samples.size() == 0) {
        throw std::invalid_argument("pixel_ratio_summary: empty surface");
    }
    std::vector<double> medians;
    medians.reserve(static_cast<size_t>(surface_samples.cols()));
    for (Eigen::Index c = 0; c < surface_samples.cols(); ++c) {
        std::vector<double> col(surface_samples.col(c).data(),
                                surface_samples.col(c).data() + surface_samples.rows());
        medians.push_back(quantile(std::move(col), 0.5));
    }
    PixelRatioSummary s;
    s.q05 = quantile(medians, 0.05);
    s.q95 = quantile(medians, 0.95);
    s.ratio = s.q05 != 0.0 ? s.q95 / s.q05 : std::numeric_limits<double>::infinity();
    return s;
}

void save_county_series(const std::filesystem::path& path,
                        const std::vector<CountySeries>& series) {
    csv::Table t;
    t.header = {"region", "year", "median", "q025", "q975"};
    for (const auto& cs : series) {
        for (size_t i = 0; i < cs.years.size(); ++i) {
            std::ostringstream m, lo, hi;
            m.precision(10);
            lo.precision(10);
            hi.precision(10);
            m << cs.summary[i].median;
            lo << cs.summary[i].q025;
            hi << cs.summary[i].q975;
            t.rows.push_back({cs.region_id, std::to_string(cs.years[i]), m.str(), lo.str(),
                              hi.str()});
        }
    }
    csv::write_file(path, t);
}

}  // namespace u5mr::aggregate
