#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <stdexcept>

#include "u5mr/evaluate.hpp"
#include "u5mr/hazard.hpp"
#include "u5mr/simulate.hpp"

using namespace u5mr;

namespace {

std::vector<survey::DirectEstimate> two_cell_holdout() {
    std::vector<survey::DirectEstimate> holdout(2);
    holdout[0].area_id = "c1";
    holdout[0].period = "2000-2004";
    holdout[0].u5mr = 0.10;
    holdout[0].logit_u5mr = hazard::logit(0.10);
    holdout[0].logit_variance = 0.0;  // exact holdout target
    holdout[1].area_id = "c2";
    holdout[1].period = "2000-2004";
    holdout[1].u5mr = 0.20;
    holdout[1].logit_u5mr = hazard::logit(0.20);
    holdout[1].logit_variance = 0.0;
    return holdout;
}

evaluate::EstimateTable exact_table(const std::vector<survey::DirectEstimate>& holdout) {
    evaluate::EstimateTable t;
    for (const auto& e : holdout) t[{e.area_id, e.period}] = {e.u5mr, 0.0};
    return t;
}

// Tiny fitted model shared by the information-criterion tests.
struct FittedToy {
    model::AssembledModel m;
    model::FitResult fit;
};

FittedToy fitted_toy(std::uint64_t seed = 4, int n_samples = 150) {
    simulate::TruthParams p;
    p.ncols = 4;
    p.nrows = 4;
    p.cellsize = 0.5;
    p.year_begin = 2004;
    p.year_end = 2008;
    p.knots = gmrf::KnotGrid{2004, 2};
    p.provinces_x = 1;
    p.provinces_y = 1;
    p.counties_x = 2;
    p.counties_y = 2;
    p.mean_households = 80.0;
    p.seed = seed;
    auto truth = simulate::make_truth(p);
    simulate::SurveyDesign d;
    d.survey_id = "sv";
    d.interview_year = 2009;
    d.interview_month = 0;
    d.clusters_per_stratum = 8;
    d.households_per_cluster = 12;
    d.births_per_household = 1.0;
    d.recall_years = 5;
    auto sim = simulate::simulate_survey(truth, d, seed + 1);
    auto spec = simulate::model_spec(truth);
    model::AssembledModel m(spec, sim.data);
    model::FitOptions opts;
    opts.optimize = false;
    opts.n_samples = n_samples;
    opts.seed = seed + 2;
    auto fit = model::fit(m, opts);
    return {std::move(m), std::move(fit)};
}

}  // namespace

TEST_CASE("perfect estimates score zero error") {
    auto holdout = two_cell_holdout();
    std::map<std::string, evaluate::EstimateTable> est{{"exact", exact_table(holdout)}};
    auto report = evaluate::holdout_mse(est, holdout, {{2000, 2004}});
    const auto& s = report.score("exact", "2000-2004");
    CHECK(s.mse == doctest::Approx(0.0));
    CHECK(s.bias2 == doctest::Approx(0.0));
    CHECK(s.variance == doctest::Approx(0.0));
    CHECK(s.n_areas == 2);
    CHECK(report.excluded == 0);
}

TEST_CASE("a constant offset with no variance scores its square") {
    auto holdout = two_cell_holdout();
    auto table = exact_table(holdout);
    for (auto& [key, est] : table) est.mean += 0.03;
    std::map<std::string, evaluate::EstimateTable> est{{"shifted", table}};
    auto report = evaluate::holdout_mse(est, holdout, {{2000, 2004}});
    const auto& s = report.score("shifted", "2000-2004");
    CHECK(s.mse == doctest::Approx(0.0009).epsilon(1e-9));
    CHECK(s.bias2 == doctest::Approx(0.0009).epsilon(1e-9));
    CHECK(s.variance == doctest::Approx(0.0));
}

TEST_CASE("error decomposes exactly into squared bias plus variance") {
    auto holdout = two_cell_holdout();
    auto table = exact_table(holdout);
    table[{"c1", "2000-2004"}] = {0.13, 0.004};
    table[{"c2", "2000-2004"}] = {0.18, 0.001};
    std::map<std::string, evaluate::EstimateTable> est{{"m", table}};
    auto report = evaluate::holdout_mse(est, holdout, {{2000, 2004}});
    const auto& s = report.score("m", "2000-2004");
    double bias2 = 0.5 * (0.03 * 0.03 + 0.02 * 0.02);
    double var = 0.5 * (0.004 + 0.001);
    CHECK(s.bias2 == doctest::Approx(bias2).epsilon(1e-12));
    CHECK(s.variance == doctest::Approx(var).epsilon(1e-12));
    CHECK(s.mse == doctest::Approx(bias2 + var).epsilon(1e-12));
}

TEST_CASE("scores ignore the order of the holdout estimates") {
    auto holdout = two_cell_holdout();
    auto table = exact_table(holdout);
    table[{"c1", "2000-2004"}] = {0.12, 0.002};
    std::map<std::string, evaluate::EstimateTable> est{{"m", table}};
    auto a = evaluate::holdout_mse(est, holdout, {{2000, 2004}});
    std::swap(holdout[0], holdout[1]);
    auto b = evaluate::holdout_mse(est, holdout, {{2000, 2004}});
    CHECK(a.score("m", "2000-2004").mse == doctest::Approx(b.score("m", "2000-2004").mse));
}

TEST_CASE("degenerate and missing holdout cells are excluded with warnings") {
    auto holdout = two_cell_holdout();
    holdout[1].degenerate = true;
    holdout[1].logit_u5mr.reset();
    survey::DirectEstimate extra;
    extra.area_id = "c9";
    extra.period = "2000-2004";
    extra.u5mr = 0.15;
    extra.logit_u5mr = hazard::logit(0.15);
    holdout.push_back(extra);  // no model value for c9

    auto table = exact_table(two_cell_holdout());
    std::map<std::string, evaluate::EstimateTable> est{{"m", table}};
    auto report = evaluate::holdout_mse(est, holdout, {{2000, 2004}});
    CHECK(report.score("m", "2000-2004").n_areas == 1);
    CHECK(report.excluded >= 2);
    CHECK_FALSE(report.warnings.empty());
}

TEST_CASE("direct estimates convert to the mean-variance table by the delta method") {
    std::vector<survey::DirectEstimate> ests(2);
    ests[0].area_id = "a";
    ests[0].period = "p";
    ests[0].u5mr = 0.1;
    ests[0].logit_u5mr = hazard::logit(0.1);
    ests[0].logit_variance = 0.25;
    ests[1].area_id = "b";
    ests[1].period = "p";
    ests[1].degenerate = true;
    auto table = evaluate::direct_estimate_table(ests);
    REQUIRE(table.size() == 1);
    const auto& e = table.at({"a", "p"});
    CHECK(e.mean == doctest::Approx(0.1));
    double deriv = 0.1 * 0.9;
    CHECK(e.variance == doctest::Approx(0.25 * deriv * deriv).epsilon(1e-12));
}

TEST_CASE("posterior tables average each sample over the period before taking moments") {
    aggregate::CountySeries series;
    series.region_id = "r";
    series.years = {2000, 2001};
    series.samples = aggregate::Matrix(2, 2);
    series.samples << 0.1, 0.3, 0.2, 0.4;
    auto table = evaluate::posterior_estimate_table({series}, {{2000, 2001}});
    const auto& e = table.at({"r", "2000-2001"});
    // Per-sample period means are 0.2 and 0.3.
    CHECK(e.mean == doctest::Approx(0.25));
    CHECK(e.variance == doctest::Approx(0.005).epsilon(1e-9));  // unbiased, n-1
}

TEST_CASE("evaluation bins span 1990 through 2014") {
    auto periods = evaluate::default_periods();
    REQUIRE(periods.size() == 5);
    CHECK(periods.front().label() == "1990-1994");
    CHECK(periods.back().label() == "2010-2014");
}

TEST_CASE("report files are written in all three shapes") {
    auto holdout = two_cell_holdout();
    std::map<std::string, evaluate::EstimateTable> est{{"m", exact_table(holdout)}};
    auto report = evaluate::holdout_mse(est, holdout, {{2000, 2004}});
    auto dir = std::filesystem::temp_directory_path() / "u5mr_eval";
    std::filesystem::create_directories(dir);
    report.save_csv(dir / "report.csv");
    report.save_long_csv(dir / "report_long.csv");
    report.save_text(dir / "report.txt");
    for (const char* name : {"report.csv", "report_long.csv", "report.txt"}) {
        CHECK(std::filesystem::file_size(dir / name) > 0);
    }
}

TEST_CASE("information criteria are deterministic and internally consistent") {
    auto toy = fitted_toy();
    auto ic = evaluate::information_criteria(toy.m, toy.fit);
    auto ic2 = evaluate::information_criteria(toy.m, toy.fit);
    CHECK(ic.dic == doctest::Approx(ic2.dic));
    CHECK(ic.waic == doctest::Approx(ic2.waic));
    CHECK(ic.log_cpo_sum == doctest::Approx(ic2.log_cpo_sum));
    CHECK(ic.p_waic >= 0.0);
    CHECK(ic.n_samples == 150);
    CHECK(ic.n_observations == static_cast<long>(toy.m.cells().size()));
    CHECK(std::isfinite(ic.dic));
    CHECK(std::isfinite(ic.waic));
    CHECK(std::isfinite(ic.log_cpo_sum));
}

TEST_CASE("information criteria match a naive reference computation") {
    auto toy = fitted_toy(8, 120);
    auto ic = evaluate::information_criteria(toy.m, toy.fit);

    const int S = static_cast<int>(toy.fit.samples.cols());
    const long n = static_cast<long>(toy.m.cells().size());
    Eigen::MatrixXd ll(n, S);
    for (int s = 0; s < S; ++s) ll.col(s) = toy.m.cell_log_likelihood(toy.fit.samples.col(s));

    double lppd = 0.0, p_waic = 0.0, cpo = 0.0;
    for (long i = 0; i < n; ++i) {
        double mx = ll.row(i).maxCoeff();
        double mn = ll.row(i).minCoeff();
        double me = 0.0, inv = 0.0;
        for (int s = 0; s < S; ++s) {
            me += std::exp(ll(i, s) - mx);
            inv += std::exp(mn - ll(i, s));
        }
        lppd += mx + std::log(me / S);
        cpo += -(std::log(inv / S) - mn);  // -log mean exp(-ll)
        double mean_ll = ll.row(i).mean();
        double ss = 0.0;
        for (int s = 0; s < S; ++s) ss += (ll(i, s) - mean_ll) * (ll(i, s) - mean_ll);
        p_waic += ss / (S - 1);
    }
    CHECK(ic.waic == doctest::Approx(-2.0 * (lppd - p_waic)).epsilon(1e-8));
    CHECK(ic.p_waic == doctest::Approx(p_waic).epsilon(1e-8));
    CHECK(ic.log_cpo_sum == doctest::Approx(cpo).epsilon(1e-8));

    // DIC from the posterior-mean latent state.
    Eigen::VectorXd xbar = toy.fit.samples.rowwise().mean();
    double d_bar = 0.0;
    for (int s = 0; s < S; ++s) d_bar += -2.0 * toy.m.cell_log_likelihood(toy.fit.samples.col(s)).sum();
    d_bar /= S;
    double d_hat = -2.0 * toy.m.cell_log_likelihood(xbar).sum();
    CHECK(ic.dic == doctest::Approx(d_hat + 2.0 * (d_bar - d_hat)).epsilon(1e-8));
    CHECK(ic.p_dic == doctest::Approx(d_bar - d_hat).epsilon(1e-8));
}

TEST_CASE("too few posterior samples are rejected") {
    auto toy = fitted_toy(5, 50);
    CHECK_THROWS_AS(evaluate::information_criteria(toy.m, toy.fit), std::invalid_argument);
}

TEST_CASE("candidate counts and limits are enforced") {
    simulate::TruthParams p;
    p.ncols = 4;
    p.nrows = 4;
    p.cellsize = 0.5;
    p.year_begin = 2000;
    p.year_end = 2009;
    p.knots = gmrf::KnotGrid{2000, 3};
    p.provinces_x = 1;
    p.provinces_y = 1;
    p.counties_x = 2;
    p.counties_y = 2;
    p.mean_households = 80.0;
    p.seed = 13;
    auto truth = simulate::make_truth(p);
    simulate::SurveyDesign d;
    d.survey_id = "sv";
    d.interview_year = 2010;
    d.interview_month = 0;
    d.clusters_per_stratum = 8;
    d.households_per_cluster = 12;
    d.recall_years = 10;
    auto sim = simulate::simulate_survey(truth, d, 14);
    auto base = simulate::model_spec(truth);

    auto make_cov = [&](const std::string& name, double scale) {
        model::Covariate cov;
        cov.name = name;
        raster::Grid g = truth.density;
        std::mt19937_64 rng(std::hash<std::string>{}(name));
        for (auto& v : g.values) v = scale * simulate::uniform01(rng);
        cov.grids = {g};
        return cov;
    };
    std::vector<model::Covariate> two = {make_cov("x1", 1.0), make_cov("x2", 2.0)};

    model::FitOptions fopts;
    fopts.optimize = false;
    fopts.n_samples = 120;
    fopts.seed = 3;
    auto result = evaluate::covariate_search(base, sim.data, two, model::Variant::PeriodM3,
                                             fopts, 1);
    CHECK(result.ranked.size() == 3);  // {x1}, {x2}, {x1, x2}
    for (std::uint32_t mask : {1u, 2u, 3u}) {
        CHECK_NOTHROW(result.rank_of(mask));
    }
    CHECK_THROWS(result.rank_of(4u));
    // Ranking is ascending in WAIC.
    for (size_t i = 0; i + 1 < result.ranked.size(); ++i) {
        CHECK(result.ranked[i].waic <= result.ranked[i + 1].waic);
    }

    auto dir = std::filesystem::temp_directory_path() / "u5mr_eval";
    std::filesystem::create_directories(dir);
    evaluate::save_search_result(dir / "search.csv", result);
    CHECK(std::filesystem::file_size(dir / "search.csv") > 0);

    std::vector<model::Covariate> too_many(13, make_cov("x", 1.0));
    CHECK_THROWS_AS(evaluate::covariate_search(base, sim.data, too_many,
                                               model::Variant::PeriodM3, fopts, 1),
                    std::invalid_argument);
    CHECK_THROWS_AS(evaluate::covariate_search(base, sim.data, two, model::Variant::Yearly,
                                               fopts, 1),
                    std::invalid_argument);
}

TEST_CASE("the search is deterministic and worker-count independent") {
    simulate::TruthParams p;
    p.ncols = 4;
    p.nrows = 4;
    p.cellsize = 0.5;
    p.year_begin = 2000;
    p.year_end = 2009;
    p.knots = gmrf::KnotGrid{2000, 3};
    p.provinces_x = 1;
    p.provinces_y = 1;
    p.counties_x = 2;
    p.counties_y = 2;
    p.mean_households = 80.0;
    p.seed = 21;
    auto truth = simulate::make_truth(p);
    simulate::SurveyDesign d;
    d.survey_id = "sv";
    d.interview_year = 2010;
    d.interview_month = 0;
    d.clusters_per_stratum = 6;
    d.households_per_cluster = 10;
    d.recall_years = 10;
    auto sim = simulate::simulate_survey(truth, d, 22);
    auto base = simulate::model_spec(truth);
    model::Covariate cov;
    cov.name = "x1";
    cov.grids = {truth.density};
    model::Covariate cov2 = cov;
    cov2.name = "x2";
    for (auto& v : cov2.grids[0].values) v = -v;

    model::FitOptions fopts;
    fopts.optimize = false;
    fopts.n_samples = 110;
    fopts.seed = 5;
    auto one = evaluate::covariate_search(base, sim.data, {cov, cov2},
                                          model::Variant::PeriodM4, fopts, 1);
    auto two = evaluate::covariate_search(base, sim.data, {cov, cov2},
                                          model::Variant::PeriodM4, fopts, 2);
    REQUIRE(one.ranked.size() == two.ranked.size());
    for (size_t i = 0; i < one.ranked.size(); ++i) {
        CHECK(one.ranked[i].mask == two.ranked[i].mask);
        CHECK(one.ranked[i].waic == doctest::Approx(two.ranked[i].waic).epsilon(1e-12));
        CHECK(one.ranked[i].dic == doctest::Approx(two.ranked[i].dic).epsilon(1e-12));
    }
    CHECK(one.criteria_agree == two.criteria_agree);
}
