#include "u5mr/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace u5mr::simulate {

double uniform01(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

int poisson_draw(double mean, std::mt19937_64& rng) {
    if (mean < 0.0 || !std::isfinite(mean)) {
        throw std::invalid_argument("poisson_draw: mean must be finite and nonnegative");
    }
    if (mean == 0.0) return 0;
    double u = uniform01(rng);
    double p = std::exp(-mean);
    double cdf = p;
    int k = 0;
    while (u > cdf && k < 1000) {
        ++k;
        p *= mean / k;
        cdf += p;
    }
    return k;
}

namespace {

int clamp_year(int year, int lo, int hi) { return std::min(hi, std::max(lo, year)); }

// Block index along one axis: `blocks` contiguous segments covering 0..extent-1.
int block_of(int index, int extent, int blocks) {
    return static_cast<int>((static_cast<long long>(index) * blocks) / extent);
}

}  // namespace

void TruthParams::validate() const {
    if (ncols <= 0 || nrows <= 0 || cellsize <= 0.0) {
        throw std::invalid_argument("TruthParams: grid dimensions must be positive");
    }
    if (year_end < year_begin) {
        throw std::invalid_argument("TruthParams: year_end before year_begin");
    }
    if (mean_households < 1.0) {
        throw std::invalid_argument("TruthParams: mean_households must be at least 1");
    }
    if (urban_quantile <= 0.0 || urban_quantile >= 1.0) {
        throw std::invalid_argument("TruthParams: urban_quantile must be in (0,1)");
    }
    if (provinces_x <= 0 || provinces_y <= 0 || counties_x <= 0 || counties_y <= 0) {
        throw std::invalid_argument("TruthParams: block counts must be positive");
    }
    if (provinces_x > ncols || counties_x > ncols || provinces_y > nrows || counties_y > nrows) {
        throw std::invalid_argument("TruthParams: more blocks than grid cells along an axis");
    }
    hyper.validate();
}

TruthParams TruthParams::from_config(const config::Config& cfg) {
    TruthParams p;
    p.ncols = cfg.get_int("truth.ncols", p.ncols);
    p.nrows = cfg.get_int("truth.nrows", p.nrows);
    p.xllcorner = cfg.get_double("truth.xllcorner", p.xllcorner);
    p.yllcorner = cfg.get_double("truth.yllcorner", p.yllcorner);
    p.cellsize = cfg.get_double("truth.cellsize", p.cellsize);
    p.year_begin = cfg.get_int("truth.year_begin", p.year_begin);
    p.year_end = cfg.get_int("truth.year_end", p.year_end);
    p.knots.year0 = p.year_begin;
    p.knots.num_knots = cfg.get_int("truth.num_knots", p.knots.num_knots);
    for (int a = 0; a < hazard::kNumAgeBands; ++a) {
        p.beta[static_cast<size_t>(a)] = cfg.get_double(
            "truth.beta" + std::to_string(a + 1), p.beta[static_cast<size_t>(a)]);
    }
    p.delta = cfg.get_double("truth.delta", p.delta);
    p.trend_slope = cfg.get_double("truth.trend_slope", p.trend_slope);
    p.hyper.sigma_rw2 = cfg.get_double("truth.sigma_rw2", p.hyper.sigma_rw2);
    p.hyper.range = cfg.get_double("truth.range", p.hyper.range);
    p.hyper.sigma_spatial = cfg.get_double("truth.sigma_spatial", p.hyper.sigma_spatial);
    p.hyper.rho = cfg.get_double("truth.rho", p.hyper.rho);
    p.mean_households = cfg.get_double("truth.mean_households", p.mean_households);
    p.density_range = cfg.get_double("truth.density_range", p.density_range);
    p.density_sigma = cfg.get_double("truth.density_sigma", p.density_sigma);
    p.urban_quantile = cfg.get_double("truth.urban_quantile", p.urban_quantile);
    p.provinces_x = cfg.get_int("truth.provinces_x", p.provinces_x);
    p.provinces_y = cfg.get_int("truth.provinces_y", p.provinces_y);
    p.counties_x = cfg.get_int("truth.counties_x", p.counties_x);
    p.counties_y = cfg.get_int("truth.counties_y", p.counties_y);
    p.seed = static_cast<std::uint64_t>(cfg.get_int("truth.seed", static_cast<int>(p.seed)));
    p.validate();
    return p;
}

std::string TruthSurface::province_id(int idx) const { return "p" + std::to_string(idx); }
std::string TruthSurface::county_id(int idx) const { return "c" + std::to_string(idx); }

Vector TruthSurface::density_vector() const {
    Vector d(mesh.size());
    for (int c = 0; c < mesh.size(); ++c) d[c] = density.values[static_cast<size_t>(c)];
    return d;
}

double TruthSurface::logit_hazard(int cell, int year, int band, bool rural) const {
    if (cell < 0 || cell >= mesh.size()) {
        throw std::out_of_range("TruthSurface: cell out of range");
    }
    if (band < 1 || band > hazard::kNumAgeBands) {
        throw std::out_of_range("TruthSurface: band out of range");
    }
    int y = clamp_year(year, year_begin, year_end) - year_begin;
    return beta[static_cast<size_t>(band - 1)] + (rural ? delta : 0.0) +
           phi(model::trend_of_band(band), y) + u(y, cell);
}

hazard::HazardVector TruthSurface::band_hazards(int cell, int year, bool rural) const {
    hazard::HazardVector h;
    for (int a = 1; a <= hazard::kNumAgeBands; ++a) {
        h.q[static_cast<size_t>(a - 1)] = hazard::expit(logit_hazard(cell, year, a, rural));
    }
    return h;
}

double TruthSurface::u5mr(int cell, int year, bool rural) const {
    return hazard::u5mr_from_hazards(band_hazards(cell, year, rural));
}

Vector TruthSurface::u5mr_surface(int year, bool rural) const {
    Vector out(mesh.size());
    for (int c = 0; c < mesh.size(); ++c) out[c] = u5mr(c, year, rural);
    return out;
}

Vector TruthSurface::u5mr_surface(int year) const {
    Vector out(mesh.size());
    for (int c = 0; c < mesh.size(); ++c) {
        out[c] = u5mr(c, year, urban[static_cast<size_t>(c)] == 0);
    }
    return out;
}

namespace {

aggregate::RegionSet block_regions(const gmrf::SpatialMesh& mesh, int bx, int by,
                                   const std::string& prefix) {
    aggregate::RegionSet rs;
    for (int row_block = 0; row_block < by; ++row_block) {
        for (int col_block = 0; col_block < bx; ++col_block) {
            // Column/row spans covered by this block (rows count from the north).
            int c0 = -1, c1 = -1, r0 = -1, r1 = -1;
            for (int c = 0; c < mesh.ncols; ++c) {
                if (block_of(c, mesh.ncols, bx) == col_block) {
                    if (c0 < 0) c0 = c;
                    c1 = c + 1;
                }
            }
            for (int r = 0; r < mesh.nrows; ++r) {
                if (block_of(r, mesh.nrows, by) == row_block) {
                    if (r0 < 0) r0 = r;
                    r1 = r + 1;
                }
            }
            double lon0 = mesh.xllcorner + c0 * mesh.cellsize;
            double lon1 = mesh.xllcorner + c1 * mesh.cellsize;
            double lat1 = mesh.yllcorner + (mesh.nrows - r0) * mesh.cellsize;
            double lat0 = mesh.yllcorner + (mesh.nrows - r1) * mesh.cellsize;
            aggregate::RegionSet::Region region;
            region.id = prefix + std::to_string(row_block * bx + col_block);
            region.rings.push_back({{lon0, lat0}, {lon1, lat0}, {lon1, lat1},
                                    {lon0, lat1}, {lon0, lat0}});
            rs.regions.push_back(std::move(region));
        }
    }
    return rs;
}

}  // namespace

aggregate::RegionSet TruthSurface::province_regions() const {
    int by = n_provinces;
    // Recover the block split from the stored assignment.
    int bx = 1;
    for (int c = 1; c < mesh.ncols; ++c) {
        if (province_of[static_cast<size_t>(c)] != province_of[static_cast<size_t>(c - 1)]) ++bx;
    }
    by = n_provinces / bx;
    return block_regions(mesh, bx, by, "p");
}

aggregate::RegionSet TruthSurface::county_regions() const {
    int bx = 1;
    for (int c = 1; c < mesh.ncols; ++c) {
        if (county_of[static_cast<size_t>(c)] != county_of[static_cast<size_t>(c - 1)]) ++bx;
    }
    int by = n_counties / bx;
    return block_regions(mesh, bx, by, "c");
}

void TruthSurface::validate() const {
    if (mesh.size() <= 0) throw std::invalid_argument("TruthSurface: empty mesh");
    if (static_cast<int>(density.values.size()) != mesh.size() ||
        static_cast<int>(urban.size()) != mesh.size() ||
        static_cast<int>(province_of.size()) != mesh.size() ||
        static_cast<int>(county_of.size()) != mesh.size()) {
        throw std::invalid_argument("TruthSurface: per-cell arrays disagree with the mesh");
    }
    for (double d : density.values) {
        if (!(d >= 0.0) || !std::isfinite(d)) {
            throw std::invalid_argument("TruthSurface: density must be finite and nonnegative");
        }
    }
    if (phi.rows() != 3 || phi.cols() != num_years() || u.rows() != num_years() ||
        u.cols() != mesh.size()) {
        throw std::invalid_argument("TruthSurface: field dimensions disagree with the mesh");
    }
    if (!phi.allFinite() || !u.allFinite()) {
        throw std::invalid_argument("TruthSurface: non-finite field values");
    }
}

TruthSurface make_truth(const TruthParams& params) {
    params.validate();
    TruthSurface t;
    t.mesh.ncols = params.ncols;
    t.mesh.nrows = params.nrows;
    t.mesh.xllcorner = params.xllcorner;
    t.mesh.yllcorner = params.yllcorner;
    t.mesh.cellsize = params.cellsize;
    t.year_begin = params.year_begin;
    t.year_end = params.year_end;
    t.knots = params.knots;
    t.beta = params.beta;
    t.delta = params.delta;
    const int n_cells = t.mesh.size();
    const int T = t.num_years();

    std::mt19937_64 rng(params.seed);

    // Log-density field, scaled to the requested mean household count.
    auto q_density = gmrf::spde_matern_precision(t.mesh, params.density_range,
                                                 params.density_sigma);
    gmrf::ConstrainedSampler density_sampler(q_density, {});
    Vector z = density_sampler.sample(rng);
    double mean_exp = 0.0;
    for (int c = 0; c < n_cells; ++c) mean_exp += std::exp(z[c]);
    mean_exp /= n_cells;
    t.density = t.mesh.to_grid();
    for (int c = 0; c < n_cells; ++c) {
        double h = std::round(params.mean_households * std::exp(z[c]) / mean_exp);
        t.density.values[static_cast<size_t>(c)] = std::max(1.0, h);
    }

    double threshold = aggregate::quantile(
        std::vector<double>(t.density.values.begin(), t.density.values.end()),
        params.urban_quantile);
    t.urban.resize(static_cast<size_t>(n_cells));
    t.province_of.resize(static_cast<size_t>(n_cells));
    t.county_of.resize(static_cast<size_t>(n_cells));
    for (int c = 0; c < n_cells; ++c) {
        int col = c % t.mesh.ncols;
        int row = c / t.mesh.ncols;
        t.urban[static_cast<size_t>(c)] =
            t.density.values[static_cast<size_t>(c)] >= threshold ? 1 : 0;
        t.province_of[static_cast<size_t>(c)] =
            block_of(row, t.mesh.nrows, params.provinces_y) * params.provinces_x +
            block_of(col, t.mesh.ncols, params.provinces_x);
        t.county_of[static_cast<size_t>(c)] =
            block_of(row, t.mesh.nrows, params.counties_y) * params.counties_x +
            block_of(col, t.mesh.ncols, params.counties_x);
    }
    t.n_provinces = params.provinces_x * params.provinces_y;
    t.n_counties = params.counties_x * params.counties_y;

    // Temporal trends: RW2 wiggle (sum-to-zero and detrended so the explicit
    // slope is the only systematic drift) around a shared linear decline.
    t.phi.resize(3, T);
    {
        gmrf::ConstraintSet trend_con;
        trend_con.A.resize(2, T);
        for (int y = 0; y < T; ++y) {
            trend_con.A(0, y) = 1.0;
            trend_con.A(1, y) = y - (T - 1) / 2.0;
        }
        auto q_rw2 = gmrf::rw2_precision(T, params.hyper.sigma_rw2);
        gmrf::ConstrainedSampler trend_sampler(q_rw2, trend_con);
        double mid = (T - 1) / 2.0;
        for (int trend = 0; trend < 3; ++trend) {
            Vector wiggle = trend_sampler.sample(rng);
            for (int y = 0; y < T; ++y) {
                t.phi(trend, y) = params.trend_slope * (y - mid) + wiggle[y];
            }
        }
    }

    // Space-time field at the knots, population-constrained, interpolated to years.
    {
        auto q_s = gmrf::spde_matern_precision(t.mesh, params.hyper.range,
                                               params.hyper.sigma_spatial);
        auto q_t = gmrf::ar1_precision(params.knots.num_knots, params.hyper.rho);
        auto q_st = gmrf::separable_st_precision(q_t, q_s);
        auto con = gmrf::population_constraints(t.mesh, t.density_vector(),
                                                params.knots.num_knots);
        gmrf::ConstrainedSampler st_sampler(q_st, con);
        Vector knots = st_sampler.sample(rng);
        t.u.resize(T, n_cells);
        for (int y = 0; y < T; ++y) {
            auto [h, alpha] = params.knots.locate(params.year_begin + y);
            for (int c = 0; c < n_cells; ++c) {
                double lower = knots[h * n_cells + c];
                double upper = knots[(h + 1) * n_cells + c];
                t.u(y, c) = (1.0 - alpha) * lower + alpha * upper;
            }
        }
    }

    t.validate();
    return t;
}

model::ModelSpec model_spec(const TruthSurface& truth) {
    model::ModelSpec spec;
    spec.variant = model::Variant::Yearly;
    spec.mesh = truth.mesh;
    spec.density = truth.density_vector();
    spec.year_begin = truth.year_begin;
    spec.year_end = truth.year_end;
    spec.knots = truth.knots;
    return spec;
}

void SurveyDesign::validate() const {
    if (survey_id.empty()) throw std::invalid_argument("SurveyDesign: empty survey_id");
    if (interview_month < 0 || interview_month > 11) {
        throw std::invalid_argument("SurveyDesign: interview_month must be 0..11");
    }
    if (clusters_per_stratum <= 0 || households_per_cluster <= 0 || recall_years <= 0) {
        throw std::invalid_argument("SurveyDesign: counts must be positive");
    }
    if (births_per_household < 0.0) {
        throw std::invalid_argument("SurveyDesign: births_per_household must be nonnegative");
    }
}

SurveyDesign SurveyDesign::from_config(const config::Config& cfg, const std::string& prefix) {
    SurveyDesign d;
    d.survey_id = cfg.get_string(prefix + "id", d.survey_id);
    d.interview_year = cfg.get_int(prefix + "interview_year", d.interview_year);
    d.interview_month = cfg.get_int(prefix + "interview_month", d.interview_month);
    d.clusters_per_stratum = cfg.get_int(prefix + "clusters_per_stratum", d.clusters_per_stratum);
    d.households_per_cluster =
        cfg.get_int(prefix + "households_per_cluster", d.households_per_cluster);
    d.births_per_household =
        cfg.get_double(prefix + "births_per_household", d.births_per_household);
    d.recall_years = cfg.get_int(prefix + "recall_years", d.recall_years);
    d.validate();
    return d;
}

HivEpidemicSpec::Cell HivEpidemicSpec::at(const std::string& province, int year) const {
    auto p = table.find(province);
    if (p == table.end()) {
        throw std::out_of_range("HivEpidemicSpec: no province " + province);
    }
    auto y = p->second.find(year);
    if (y == p->second.end()) {
        throw std::out_of_range("HivEpidemicSpec: province " + province + " missing year " +
                                std::to_string(year));
    }
    return y->second;
}

bool HivEpidemicSpec::is_null() const {
    for (const auto& [prov, years] : table) {
        for (const auto& [year, cell] : years) {
            if (cell.prevalence > 0.0 && cell.selection_prob > 0.0) return false;
        }
    }
    return true;
}

void HivEpidemicSpec::validate() const {
    for (const auto& [prov, years] : table) {
        for (const auto& [year, cell] : years) {
            if (cell.prevalence < 0.0 || cell.prevalence > 1.0 || cell.selection_prob < 0.0 ||
                cell.selection_prob > 1.0) {
                throw std::invalid_argument("HivEpidemicSpec: probabilities must be in [0,1] (" +
                                            prov + ", " + std::to_string(year) + ")");
            }
            if (cell.multiplier < 1.0) {
                throw std::invalid_argument("HivEpidemicSpec: multiplier must be >= 1 (" + prov +
                                            ", " + std::to_string(year) + ")");
            }
        }
    }
}

HivEpidemicSpec HivEpidemicSpec::uniform(const TruthSurface& truth, const Cell& cell) {
    HivEpidemicSpec spec;
    for (int p = 0; p < truth.n_provinces; ++p) {
        auto& years = spec.table[truth.province_id(p)];
        for (int y = truth.year_begin; y <= truth.year_end; ++y) years[y] = cell;
    }
    spec.validate();
    return spec;
}

HivEpidemicSpec HivEpidemicSpec::from_config(const config::Config& cfg,
                                             const TruthSurface& truth,
                                             const std::string& prefix) {
    Cell base;
    base.prevalence = cfg.get_double(prefix + "prevalence", 0.0);
    base.selection_prob = cfg.get_double(prefix + "selection_prob", 0.0);
    base.multiplier = cfg.get_double(prefix + "multiplier", 1.0);
    HivEpidemicSpec spec = uniform(truth, base);
    for (int p = 0; p < truth.n_provinces; ++p) {
        std::string key = prefix + truth.province_id(p) + ".";
        Cell cell;
        cell.prevalence = cfg.get_double(key + "prevalence", base.prevalence);
        cell.selection_prob = cfg.get_double(key + "selection_prob", base.selection_prob);
        cell.multiplier = cfg.get_double(key + "multiplier", base.multiplier);
        for (auto& [year, value] : spec.table[truth.province_id(p)]) value = cell;
    }
    spec.validate();
    return spec;
}

namespace {

SimulatedSurvey simulate_impl(const TruthSurface& truth, const SurveyDesign& design,
                              const HivEpidemicSpec* epidemic, std::uint64_t seed) {
    truth.validate();
    design.validate();
    if (epidemic) epidemic->validate();

    const int n_cells = truth.mesh.size();
    SimulatedSurvey out;
    out.interview_dates[design.survey_id] = {design.interview_year, design.interview_month};
    std::mt19937_64 rng(seed);

    const long long interview_abs =
        static_cast<long long>(design.interview_year) * 12 + design.interview_month;
    const int window_months = design.recall_years * 12;
    long cluster_counter = 0;
    long child_counter = 0;

    for (int p = 0; p < truth.n_provinces; ++p) {
        for (int rural = 0; rural < 2; ++rural) {
            std::vector<int> cells;
            double total_households = 0.0;
            for (int c = 0; c < n_cells; ++c) {
                if (truth.province_of[static_cast<size_t>(c)] != p) continue;
                bool cell_rural = truth.urban[static_cast<size_t>(c)] == 0;
                if (cell_rural != (rural == 1)) continue;
                cells.push_back(c);
                total_households += truth.density.values[static_cast<size_t>(c)];
            }
            std::string stratum = truth.province_id(p) + (rural ? "_rural" : "_urban");
            if (cells.empty() || total_households <= 0.0) {
                throw std::invalid_argument("simulate_survey: stratum " + stratum +
                                            " has zero density");
            }
            for (int k = 0; k < design.clusters_per_stratum; ++k) {
                // PPS with replacement on household counts.
                double r = uniform01(rng) * total_households;
                double acc = 0.0;
                int cell = cells.back();
                for (int c : cells) {
                    acc += truth.density.values[static_cast<size_t>(c)];
                    if (r < acc) {
                        cell = c;
                        break;
                    }
                }
                double cell_households = truth.density.values[static_cast<size_t>(cell)];
                int sampled_households = std::min(
                    design.households_per_cluster, static_cast<int>(cell_households));
                double weight =
                    total_households / (design.clusters_per_stratum * sampled_households);

                survey::Cluster cl;
                cl.cluster_id = design.survey_id + "_c" + std::to_string(cluster_counter++);
                cl.survey_id = design.survey_id;
                cl.stratum_id = stratum;
                cl.province = truth.province_id(p);
                cl.lon = truth.mesh.center_lon(cell);
                cl.lat = truth.mesh.center_lat(cell);
                cl.weight = weight;
                out.data.clusters.push_back(cl);

                bool is_rural = rural == 1;
                for (int hh = 0; hh < sampled_households; ++hh) {
                    int n_children = poisson_draw(design.births_per_household, rng);
                    for (int ch = 0; ch < n_children; ++ch) {
                        int months_before =
                            static_cast<int>(uniform01(rng) * window_months);
                        if (months_before >= window_months) months_before = window_months - 1;
                        long long birth_abs = interview_abs - months_before;
                        hazard::BirthRecord rec;
                        rec.child_id = design.survey_id + "_b" + std::to_string(child_counter++);
                        rec.cluster_id = cl.cluster_id;
                        rec.survey_id = design.survey_id;
                        rec.birth_year = static_cast<int>(birth_abs / 12);
                        rec.birth_month = static_cast<int>(birth_abs % 12);
                        rec.months_observed = std::min(hazard::kMaxMonths, months_before);

                        bool affected = false;
                        double multiplier = 1.0;
                        if (epidemic) {
                            auto cellspec = epidemic->at(
                                cl.province,
                                clamp_year(rec.birth_year, truth.year_begin, truth.year_end));
                            // Skip the draw entirely at zero prevalence so a
                            // null epidemic reproduces the plain protocol
                            // draw for draw.
                            if (cellspec.prevalence > 0.0) {
                                affected = uniform01(rng) < cellspec.prevalence;
                            }
                            multiplier = cellspec.multiplier;
                        }
                        for (int m = 0; m < rec.months_observed; ++m) {
                            int band = hazard::age_band_of_month(m);
                            int year = rec.birth_year + m / 12;
                            double q = hazard::expit(
                                truth.logit_hazard(cell, year, band, is_rural));
                            if (affected) q = std::min(0.99, q * multiplier);
                            if (uniform01(rng) < q) {
                                rec.died = true;
                                rec.death_month = m;
                                break;
                            }
                        }
                        if (affected) out.affected_children.insert(rec.child_id);
                        out.data.births.push_back(std::move(rec));
                    }
                }
            }
        }
    }
    out.data.validate();
    return out;
}

}  // namespace

SimulatedSurvey simulate_survey(const TruthSurface& truth, const SurveyDesign& design,
                                std::uint64_t seed) {
    return simulate_impl(truth, design, nullptr, seed);
}

SimulatedSurvey simulate_survey(const TruthSurface& truth, const SurveyDesign& design,
                                const HivEpidemicSpec& epidemic, std::uint64_t seed) {
    return simulate_impl(truth, design, &epidemic, seed);
}

model::BiasOffsetTable expected_bias_table(const TruthSurface& truth,
                                           const HivEpidemicSpec& epidemic,
                                           const std::string& survey_id) {
    epidemic.validate();
    model::BiasOffsetTable table;
    constexpr int n_bands = hazard::kNumAgeBands;

    // Expected per-band deaths and exposure of one synthetic birth living the
    // whole 60 months under year-t hazards.
    auto cohort_tallies = [](const hazard::HazardVector& h, std::array<double, n_bands>& deaths,
                             std::array<double, n_bands>& exposure) {
        deaths.fill(0.0);
        exposure.fill(0.0);
        double surv = 1.0;
        for (int m = 0; m < hazard::kMaxMonths; ++m) {
            int a = hazard::age_band_of_month(m) - 1;
            double q = h.q[static_cast<size_t>(a)];
            exposure[static_cast<size_t>(a)] += surv;
            deaths[static_cast<size_t>(a)] += surv * q;
            surv *= 1.0 - q;
        }
    };

    for (int p = 0; p < truth.n_provinces; ++p) {
        std::string province = truth.province_id(p);
        for (int year = truth.year_begin; year <= truth.year_end; ++year) {
            auto spec = epidemic.at(province, year);
            std::array<double, n_bands> true_deaths{}, true_expo{};
            std::array<double, n_bands> rep_deaths{}, rep_expo{};
            for (int c = 0; c < truth.mesh.size(); ++c) {
                if (truth.province_of[static_cast<size_t>(c)] != p) continue;
                double households = truth.density.values[static_cast<size_t>(c)];
                bool rural = truth.urban[static_cast<size_t>(c)] == 0;
                hazard::HazardVector base = truth.band_hazards(c, year, rural);
                hazard::HazardVector boosted = base;
                for (auto& q : boosted.q) q = std::min(0.99, q * spec.multiplier);

                std::array<double, n_bands> d_base{}, e_base{}, d_boost{}, e_boost{};
                cohort_tallies(base, d_base, e_base);
                cohort_tallies(boosted, d_boost, e_boost);
                double w_pos_true = households * spec.prevalence;
                double w_pos_rep = w_pos_true * (1.0 - spec.selection_prob);
                double w_neg = households * (1.0 - spec.prevalence);
                for (size_t a = 0; a < n_bands; ++a) {
                    true_deaths[a] += w_pos_true * d_boost[a] + w_neg * d_base[a];
                    true_expo[a] += w_pos_true * e_boost[a] + w_neg * e_base[a];
                    rep_deaths[a] += w_pos_rep * d_boost[a] + w_neg * d_base[a];
                    rep_expo[a] += w_pos_rep * e_boost[a] + w_neg * e_base[a];
                }
            }
            hazard::HazardVector q_true, q_rep;
            for (size_t a = 0; a < n_bands; ++a) {
                q_true.q[a] = true_deaths[a] / true_expo[a];
                q_rep.q[a] = rep_deaths[a] / rep_expo[a];
            }
            double ratio = hazard::u5mr_from_hazards(q_true) / hazard::u5mr_from_hazards(q_rep);
            table.set(province, survey_id, year, std::max(1.0, ratio));
        }
    }
    return table;
}

SelectionResult apply_hiv_selection(const SimulatedSurvey& sim, const TruthSurface& truth,
                                    const HivEpidemicSpec& epidemic, std::uint64_t seed) {
    epidemic.validate();
    SelectionResult out;
    out.data.clusters = sim.data.clusters;

    std::map<std::string, std::string> province_of_cluster;
    std::map<std::string, std::string> survey_of_cluster;
    for (const auto& cl : sim.data.clusters) {
        province_of_cluster[cl.cluster_id] = cl.province;
        survey_of_cluster[cl.cluster_id] = cl.survey_id;
    }

    std::mt19937_64 rng(seed);
    for (const auto& rec : sim.data.births) {
        bool drop = false;
        if (sim.affected_children.count(rec.child_id)) {
            auto spec = epidemic.at(province_of_cluster.at(rec.cluster_id),
                                    clamp_year(rec.birth_year, truth.year_begin, truth.year_end));
            drop = uniform01(rng) < spec.selection_prob;
        }
        if (drop) {
            ++out.removed;
        } else {
            out.data.births.push_back(rec);
        }
    }

    std::set<std::string> surveys;
    for (const auto& cl : sim.data.clusters) surveys.insert(cl.survey_id);
    for (const auto& sid : surveys) {
        auto partial = expected_bias_table(truth, epidemic, sid);
        for (const auto& [key, ratio] : partial.entries()) {
            out.bias.set(std::get<0>(key), std::get<1>(key), std::get<2>(key), ratio);
        }
    }
    out.data.validate();
    return out;
}

}  // namespace u5mr::simulate
