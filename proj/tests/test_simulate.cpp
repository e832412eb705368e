#include <doctest.h>

#include <cmath>
#include <random>
#include <set>
#include <stdexcept>

#include "u5mr/simulate.hpp"

using namespace u5mr;

namespace {

simulate::TruthParams small_params(std::uint64_t seed = 3) {
    simulate::TruthParams p;
    p.ncols = 8;
    p.nrows = 8;
    p.cellsize = 0.5;
    p.year_begin = 2000;
    p.year_end = 2009;
    p.knots = gmrf::KnotGrid{2000, 3};
    p.provinces_x = 2;
    p.provinces_y = 1;
    p.counties_x = 2;
    p.counties_y = 2;
    p.mean_households = 60.0;
    p.seed = seed;
    return p;
}

simulate::SurveyDesign small_design() {
    simulate::SurveyDesign d;
    d.survey_id = "sv";
    d.interview_year = 2010;
    d.interview_month = 3;
    d.clusters_per_stratum = 6;
    d.households_per_cluster = 15;
    d.births_per_household = 1.2;
    d.recall_years = 10;
    return d;
}

}  // namespace

TEST_CASE("the generated truth is internally consistent") {
    auto truth = simulate::make_truth(small_params());
    truth.validate();
    CHECK(truth.mesh.size() == 64);
    CHECK(truth.n_provinces == 2);
    CHECK(truth.n_counties == 4);
    CHECK(truth.density.values.size() == 64);
    for (double v : truth.density.values) {
        CHECK(v >= 1.0);
        CHECK(v == doctest::Approx(std::round(v)));  // integer household counts
    }
    // Urban share respects the quantile threshold approximately.
    int n_urban = 0;
    for (char u : truth.urban) n_urban += u ? 1 : 0;
    CHECK(n_urban >= 6);
    CHECK(n_urban <= 26);
    // Rural cells are riskier at fixed cell and year.
    CHECK(truth.u5mr(10, 2005, true) > truth.u5mr(10, 2005, false));
}

TEST_CASE("truth generation is deterministic in the seed") {
    auto a = simulate::make_truth(small_params(11));
    auto b = simulate::make_truth(small_params(11));
    auto c = simulate::make_truth(small_params(12));
    CHECK(a.density.values == b.density.values);
    CHECK((a.u - b.u).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
    CHECK((a.phi - b.phi).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
    CHECK((a.u - c.u).cwiseAbs().maxCoeff() > 1e-12);
}

TEST_CASE("province and county blocks tile the grid") {
    auto truth = simulate::make_truth(small_params());
    auto provs = truth.province_regions();
    auto counties = truth.county_regions();
    REQUIRE(provs.regions.size() == 2);
    REQUIRE(counties.regions.size() == 4);
    auto pa = provs.assign_cells(truth.mesh);
    auto ca = counties.assign_cells(truth.mesh);
    for (int cell = 0; cell < 64; ++cell) {
        CHECK(pa[static_cast<size_t>(cell)] == truth.province_of[static_cast<size_t>(cell)]);
        CHECK(ca[static_cast<size_t>(cell)] == truth.county_of[static_cast<size_t>(cell)]);
    }
}

TEST_CASE("simulated surveys are reproducible and self-weighting") {
    auto truth = simulate::make_truth(small_params());
    auto design = small_design();
    auto a = simulate::simulate_survey(truth, design, 5);
    auto b = simulate::simulate_survey(truth, design, 5);
    REQUIRE(a.data.clusters.size() == b.data.clusters.size());
    REQUIRE(a.data.births.size() == b.data.births.size());
    for (size_t i = 0; i < a.data.births.size(); ++i) {
        CHECK(a.data.births[i].child_id == b.data.births[i].child_id);
        CHECK(a.data.births[i].died == b.data.births[i].died);
    }
    a.data.validate();
    CHECK(a.data.clusters.size() == 4 * 6u);  // 2 provinces x 2 strata x 6 clusters

    // Design weight = stratum households / (clusters x households actually
    // sampled), so weight x sampled households is constant per stratum (the
    // design is self-weighting whenever every cell can fill a cluster).
    std::map<std::string, double> stratum_households;
    for (int cell = 0; cell < truth.mesh.size(); ++cell) {
        std::string stratum =
            truth.province_id(truth.province_of[static_cast<size_t>(cell)]) +
            (truth.urban[static_cast<size_t>(cell)] ? "_urban" : "_rural");
        stratum_households[stratum] += truth.density.values[static_cast<size_t>(cell)];
    }
    std::set<std::string> strata;
    for (const auto& c : a.data.clusters) {
        CHECK(c.weight > 0.0);
        int cell = truth.density.cell_of(c.lon, c.lat);
        int sampled = std::min(design.households_per_cluster,
                               static_cast<int>(truth.density.values[static_cast<size_t>(cell)]));
        double expect = stratum_households.at(c.stratum_id) /
                        (design.clusters_per_stratum * sampled);
        CHECK(c.weight == doctest::Approx(expect).epsilon(1e-12));
        strata.insert(c.stratum_id);
    }
    CHECK(strata.size() == 4);
}

TEST_CASE("cluster coordinates stay inside their stratum") {
    auto truth = simulate::make_truth(small_params());
    auto sim = simulate::simulate_survey(truth, small_design(), 8);
    for (const auto& c : sim.data.clusters) {
        int cell = truth.density.cell_of(c.lon, c.lat);
        REQUIRE(cell >= 0);
        std::string expect = truth.province_id(truth.province_of[static_cast<size_t>(cell)]) +
                             (truth.urban[static_cast<size_t>(cell)] ? "_urban" : "_rural");
        CHECK(c.stratum_id == expect);
        CHECK(c.province == truth.province_id(truth.province_of[static_cast<size_t>(cell)]));
    }
}

TEST_CASE("death fractions converge to the truth hazards") {
    auto params = small_params(19);
    params.mean_households = 500.0;
    auto truth = simulate::make_truth(params);
    auto design = small_design();
    design.clusters_per_stratum = 60;
    design.births_per_household = 2.0;
    auto sim = simulate::simulate_survey(truth, design, 2);

    // Aggregate band-1 exposure against the expected hazard for each record's
    // cell, then compare observed and expected death counts.
    auto cindex = sim.data.cluster_index();
    double expected = 0.0;
    int observed = 0;
    int n_band1 = 0;
    for (const auto& rec : sim.data.births) {
        const auto& cl = sim.data.clusters[cindex.at(rec.cluster_id)];
        int cell = truth.density.cell_of(cl.lon, cl.lat);
        bool rural = !truth.urban[static_cast<size_t>(cell)];
        if (rec.months_observed < 1) continue;
        int year = std::clamp(rec.birth_year, truth.year_begin, truth.year_end);
        expected += hazard::expit(truth.logit_hazard(cell, year, 1, rural));
        ++n_band1;
        if (rec.died && *rec.death_month == 0) ++observed;
    }
    REQUIRE(n_band1 > 5000);
    double se = std::sqrt(expected);  // Poisson-scale spread of the count
    CHECK(std::abs(observed - expected) < 4.0 * se + 1.0);
}

TEST_CASE("a null epidemic changes nothing and reports unit ratios") {
    auto truth = simulate::make_truth(small_params());
    auto design = small_design();
    simulate::HivEpidemicSpec null_spec =
        simulate::HivEpidemicSpec::uniform(truth, {0.0, 0.0, 1.0});
    CHECK(null_spec.is_null());
    auto plain = simulate::simulate_survey(truth, design, 5);
    auto with = simulate::simulate_survey(truth, design, null_spec, 5);
    REQUIRE(plain.data.births.size() == with.data.births.size());
    for (size_t i = 0; i < plain.data.births.size(); ++i) {
        CHECK(plain.data.births[i].died == with.data.births[i].died);
        CHECK(plain.data.births[i].months_observed == with.data.births[i].months_observed);
    }
    CHECK(with.affected_children.empty());

    auto sel = simulate::apply_hiv_selection(with, truth, null_spec, 6);
    CHECK(sel.removed == 0);
    CHECK(sel.data.births.size() == with.data.births.size());
    for (const auto& [key, ratio] : sel.bias.entries()) {
        CHECK(ratio == doctest::Approx(1.0));
    }
}

TEST_CASE("an active epidemic raises mortality and biases the frame downward") {
    auto truth = simulate::make_truth(small_params(23));
    auto design = small_design();
    design.clusters_per_stratum = 30;
    simulate::HivEpidemicSpec epi =
        simulate::HivEpidemicSpec::uniform(truth, {0.3, 0.7, 3.0});
    CHECK_FALSE(epi.is_null());

    auto plain = simulate::simulate_survey(truth, design, 5);
    auto with = simulate::simulate_survey(truth, design, epi, 5);
    CHECK_FALSE(with.affected_children.empty());
    auto death_count = [](const survey::SurveyDataset& d) {
        int n = 0;
        for (const auto& b : d.births) n += b.died ? 1 : 0;
        return n;
    };
    CHECK(death_count(with.data) > death_count(plain.data));

    auto sel = simulate::apply_hiv_selection(with, truth, epi, 6);
    CHECK(sel.removed > 0);
    CHECK(sel.data.births.size() + static_cast<size_t>(sel.removed) == with.data.births.size());
    // Removal never invents records: every kept child exists in the input.
    std::set<std::string> original;
    for (const auto& b : with.data.births) original.insert(b.child_id);
    for (const auto& b : sel.data.births) CHECK(original.count(b.child_id) == 1);

    // Ratios exceed one where the epidemic is active.
    bool any_above = false;
    for (const auto& [key, ratio] : sel.bias.entries()) {
        CHECK(ratio >= 1.0);
        if (ratio > 1.001) any_above = true;
    }
    CHECK(any_above);
}

TEST_CASE("the analytic bias ratio matches a cohort tally for a uniform epidemic") {
    auto truth = simulate::make_truth(small_params(29));
    simulate::HivEpidemicSpec::Cell cell{0.25, 0.6, 2.5};
    auto epi = simulate::HivEpidemicSpec::uniform(truth, cell);
    auto table = simulate::expected_bias_table(truth, epi, "sv");
    REQUIRE_FALSE(table.empty());

    // Brute-force check for one province-year: pool per-band deaths and
    // exposure over the mixture of reporting groups, exactly as the direct
    // estimator would, then take the U5MR ratio.
    std::string province = truth.province_id(0);
    int year = 2004;
    double ratio = std::exp(table.log_offset(province, "sv", year));

    // (weight on the true side, weight on the reported side, multiplier)
    std::vector<std::array<double, 3>> mix = {
        {cell.prevalence, cell.prevalence * (1.0 - cell.selection_prob), cell.multiplier},
        {1.0 - cell.prevalence, 1.0 - cell.prevalence, 1.0},
    };
    std::array<double, 6> td{}, te{}, rd{}, re{};
    for (size_t c = 0; c < truth.province_of.size(); ++c) {
        if (truth.province_of[c] != 0) continue;
        double hh = truth.density.values[c];
        bool rural = !truth.urban[c];
        for (const auto& [w_true, w_rep, mult] : mix) {
            double alive = 1.0;
            for (int m = 0; m < hazard::kMaxMonths; ++m) {
                int a = hazard::age_band_of_month(m) - 1;
                double q = std::min(
                    0.99, hazard::expit(truth.logit_hazard(static_cast<int>(c), year, a + 1,
                                                           rural)) *
                              mult);
                td[static_cast<size_t>(a)] += hh * w_true * alive * q;
                te[static_cast<size_t>(a)] += hh * w_true * alive;
                rd[static_cast<size_t>(a)] += hh * w_rep * alive * q;
                re[static_cast<size_t>(a)] += hh * w_rep * alive;
                alive *= 1.0 - q;
            }
        }
    }
    hazard::HazardVector q_true, q_rep;
    for (size_t a = 0; a < 6; ++a) {
        q_true.q[a] = td[a] / te[a];
        q_rep.q[a] = rd[a] / re[a];
    }
    double expected =
        std::max(1.0, hazard::u5mr_from_hazards(q_true) / hazard::u5mr_from_hazards(q_rep));
    CHECK(ratio == doctest::Approx(expected).epsilon(1e-9));
}

TEST_CASE("epidemic lookups outside the table throw") {
    auto truth = simulate::make_truth(small_params());
    auto epi = simulate::HivEpidemicSpec::uniform(truth, {0.1, 0.5, 2.0});
    CHECK_NOTHROW(epi.at(truth.province_id(0), 2004));
    CHECK_THROWS_AS(epi.at("nowhere", 2004), std::out_of_range);
    CHECK_THROWS_AS(epi.at(truth.province_id(0), 1900), std::out_of_range);
}

TEST_CASE("poisson and uniform draws have the right first moments") {
    std::mt19937_64 rng(41);
    const int N = 200000;
    double mean_p = 0.0;
    double mean_u = 0.0;
    for (int i = 0; i < N; ++i) {
        mean_p += simulate::poisson_draw(1.7, rng);
        mean_u += simulate::uniform01(rng);
    }
    mean_p /= N;
    mean_u /= N;
    CHECK(std::abs(mean_p - 1.7) < 0.02);
    CHECK(std::abs(mean_u - 0.5) < 0.005);
}

TEST_CASE("large samples reproduce the population direct estimate") {
    auto params = small_params(31);
    params.mean_households = 400.0;
    auto truth = simulate::make_truth(params);
    auto design = small_design();
    design.clusters_per_stratum = 80;
    design.births_per_household = 2.0;
    auto sim = simulate::simulate_survey(truth, design, 7);

    survey::AreaAssignment areas;
    for (const auto& c : sim.data.clusters) areas[c.cluster_id] = "all";
    survey::Period period{2005, 2009};
    auto est = survey::direct_u5mr_with_variance(sim.data, areas, "all", period);
    REQUIRE_FALSE(est.degenerate);

    // Population target: household-weighted mean U5MR over cells in the
    // period, with each cell's own stratum.
    double num = 0.0, den = 0.0;
    for (int y = period.start_year; y <= period.end_year; ++y) {
        auto surf = truth.u5mr_surface(y);
        for (int c = 0; c < truth.mesh.size(); ++c) {
            num += truth.density.values[static_cast<size_t>(c)] * surf(c);
            den += truth.density.values[static_cast<size_t>(c)];
        }
    }
    double target = num / den;
    REQUIRE(est.logit_variance.has_value());
    double se_logit = std::sqrt(*est.logit_variance);
    double se = se_logit * est.u5mr * (1.0 - est.u5mr);
    CHECK(std::abs(est.u5mr - target) < 4.0 * se + 0.01);
}
