#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "u5mr/aggregate.hpp"
#include "u5mr/config.hpp"
#include "u5mr/gmrf.hpp"
#include "u5mr/model.hpp"
#include "u5mr/raster.hpp"
#include "u5mr/survey.hpp"

namespace u5mr::simulate {

using gmrf::Matrix;
using gmrf::Vector;

// Knobs for synthetic ground truth. Provinces and counties are rectangular
// blocks of the grid; the density raster doubles as the household count per
// cell, so sampling proportional to density is exact.
struct TruthParams {
    int ncols = 20;
    int nrows = 20;
    double xllcorner = 0.0;
    double yllcorner = 0.0;
    double cellsize = 0.5;
    int year_begin = 1980;
    int year_end = 2014;
    gmrf::KnotGrid knots{1980, 8};

    std::array<double, hazard::kNumAgeBands> beta = {-3.9, -6.6, -7.6, -8.0, -8.3, -8.6};
    double delta = 0.35;          // rural excess on the logit scale
    double trend_slope = -0.015;  // shared yearly decline added to each trend
    gmrf::Hyperparameters hyper;  // sigma_rw2, range, sigma_spatial, rho drive the draws

    double mean_households = 200.0;  // per cell, before the lognormal field
    double density_range = 3.0;      // spatial range of the log-density field
    double density_sigma = 0.8;
    double urban_quantile = 0.8;     // density quantile above which cells are urban

    int provinces_x = 2;
    int provinces_y = 2;
    int counties_x = 4;
    int counties_y = 4;

    std::uint64_t seed = 1;

    void validate() const;
    static TruthParams from_config(const config::Config& cfg);
};

// Known generating field: everything the estimation pipeline tries to recover.
struct TruthSurface {
    gmrf::SpatialMesh mesh;
    raster::Grid density;          // households per cell, >= 1
    std::vector<char> urban;       // per cell
    std::vector<int> province_of;  // per cell
    std::vector<int> county_of;    // per cell
    int n_provinces = 0;
    int n_counties = 0;
    int year_begin = 1980;
    int year_end = 2014;
    gmrf::KnotGrid knots{1980, 8};

    std::array<double, hazard::kNumAgeBands> beta{};
    double delta = 0.0;
    Matrix phi;  // 3 trends x years
    Matrix u;    // years x cells

    int num_years() const { return year_end - year_begin + 1; }
    std::string province_id(int idx) const;
    std::string county_id(int idx) const;
    Vector density_vector() const;

    // Logit monthly hazard for age band 1..6 at (cell, calendar year).
    double logit_hazard(int cell, int year, int band, bool rural) const;
    hazard::HazardVector band_hazards(int cell, int year, bool rural) const;
    double u5mr(int cell, int year, bool rural) const;
    // Per-cell U5MR with the stated stratum applied everywhere.
    Vector u5mr_surface(int year, bool rural) const;
    // Per-cell U5MR using each cell's own urban/rural designation.
    Vector u5mr_surface(int year) const;

    aggregate::RegionSet province_regions() const;
    aggregate::RegionSet county_regions() const;

    void validate() const;
};

TruthSurface make_truth(const TruthParams& params);

// Model spec matching the truth geometry (mesh, density, years, knots).
model::ModelSpec model_spec(const TruthSurface& truth);

// Two-stage stratified design: strata are province x urban/rural, clusters
// drawn with replacement with probability proportional to households.
struct SurveyDesign {
    std::string survey_id = "sim";
    int interview_year = 2015;
    int interview_month = 5;  // 0..11
    int clusters_per_stratum = 10;
    int households_per_cluster = 25;
    double births_per_household = 1.0;  // Poisson mean over the recall window
    int recall_years = 35;

    void validate() const;
    static SurveyDesign from_config(const config::Config& cfg, const std::string& prefix = "survey.");
};

// Reduced-form epidemic: a mother is HIV-positive with `prevalence`, her
// children face `multiplier` times the monthly hazard, and at interview time
// her records are missing from the frame with `selection_prob`.
struct HivEpidemicSpec {
    struct Cell {
        double prevalence = 0.0;
        double selection_prob = 0.0;
        double multiplier = 1.0;
    };
    // province id -> year -> parameters; lookups for a missing province or
    // year throw std::out_of_range.
    std::map<std::string, std::map<int, Cell>> table;

    Cell at(const std::string& province, int year) const;
    bool is_null() const;  // zero prevalence or selection everywhere
    void validate() const;

    // Uniform epidemic over every province and year in range.
    static HivEpidemicSpec uniform(const TruthSurface& truth, const Cell& cell);
    static HivEpidemicSpec from_config(const config::Config& cfg, const TruthSurface& truth,
                                       const std::string& prefix = "hiv.");
};

struct SimulatedSurvey {
    survey::SurveyDataset data;
    std::map<std::string, std::pair<int, int>> interview_dates;  // survey -> (year, month)
    std::set<std::string> affected_children;  // children of HIV-positive mothers
};

SimulatedSurvey simulate_survey(const TruthSurface& truth, const SurveyDesign& design,
                                std::uint64_t seed);
// Same protocol with HIV-positive mothers drawn per record and their
// children's hazards multiplied.
SimulatedSurvey simulate_survey(const TruthSurface& truth, const SurveyDesign& design,
                                const HivEpidemicSpec& epidemic, std::uint64_t seed);

struct SelectionResult {
    survey::SurveyDataset data;
    model::BiasOffsetTable bias;  // expected true-over-reported ratio, >= 1
    long removed = 0;
};

// Drops each affected child's record with the province-year selection
// probability and returns the analytically expected bias-ratio table.
SelectionResult apply_hiv_selection(const SimulatedSurvey& sim, const TruthSurface& truth,
                                    const HivEpidemicSpec& epidemic, std::uint64_t seed);

// Expected BIAS ratio per (province, year): U5MR of the full birth cohort over
// the U5MR reported once selected mothers are missing, both computed in closed
// form from the truth hazards.
model::BiasOffsetTable expected_bias_table(const TruthSurface& truth,
                                           const HivEpidemicSpec& epidemic,
                                           const std::string& survey_id);

// Uniform double in [0, 1) from the top 53 bits; reproducible across
// standard libraries, like gmrf::standard_normal.
double uniform01(std::mt19937_64& rng);
// Poisson by inversion; mean must be modest (used for births per household).
int poisson_draw(double mean, std::mt19937_64& rng);

}  // namespace u5mr::simulate
