#include <benchmark/benchmark.h>

#include <random>

#include "u5mr/gmrf.hpp"
#include "u5mr/hazard.hpp"
#include "u5mr/model.hpp"
#include "u5mr/simulate.hpp"

using namespace u5mr;

namespace {

gmrf::SpatialMesh square_mesh(int side) {
    gmrf::SpatialMesh mesh;
    mesh.ncols = side;
    mesh.nrows = side;
    mesh.xllcorner = 0.0;
    mesh.yllcorner = 0.0;
    mesh.cellsize = 0.5;
    return mesh;
}

void BM_ExpandBirthHistory(benchmark::State& state) {
    hazard::BirthRecord rec;
    rec.child_id = "c";
    rec.cluster_id = "cl";
    rec.survey_id = "sv";
    rec.birth_year = 2000;
    rec.birth_month = 3;
    rec.months_observed = 60;
    for (auto _ : state) {
        benchmark::DoNotOptimize(hazard::expand_birth_history(rec));
    }
}
BENCHMARK(BM_ExpandBirthHistory);

void BM_SpdeMaternPrecision(benchmark::State& state) {
    auto mesh = square_mesh(static_cast<int>(state.range(0)));
    for (auto _ : state) {
        benchmark::DoNotOptimize(gmrf::spde_matern_precision(mesh, 1.5, 0.5));
    }
    state.SetComplexityN(state.range(0) * state.range(0));
}
BENCHMARK(BM_SpdeMaternPrecision)->Arg(10)->Arg(20)->Arg(40)->Complexity();

void BM_ConstrainedSample(benchmark::State& state) {
    int side = static_cast<int>(state.range(0));
    auto mesh = square_mesh(side);
    int n_cells = side * side;
    const int n_knots = 8;
    auto st = gmrf::separable_st_precision(gmrf::ar1_precision(n_knots, 0.9),
                                           gmrf::spde_matern_precision(mesh, 1.5, 0.5));
    gmrf::Vector density = gmrf::Vector::Ones(n_cells);
    auto cs = gmrf::population_constraints(mesh, density, n_knots);
    gmrf::ConstrainedSampler sampler(st, cs);
    std::mt19937_64 rng(1);
    for (auto _ : state) {
        benchmark::DoNotOptimize(sampler.sample(rng));
    }
}
BENCHMARK(BM_ConstrainedSample)->Arg(10)->Arg(20);

void BM_AssembleAndGradient(benchmark::State& state) {
    simulate::TruthParams p;
    p.ncols = 10;
    p.nrows = 10;
    p.cellsize = 0.5;
    p.year_begin = 2000;
    p.year_end = 2009;
    p.knots = gmrf::KnotGrid{2000, 3};
    p.provinces_x = 1;
    p.provinces_y = 1;
    p.counties_x = 2;
    p.counties_y = 2;
    p.mean_households = 100.0;
    p.seed = 5;
    auto truth = simulate::make_truth(p);
    simulate::SurveyDesign d;
    d.survey_id = "sv";
    d.interview_year = 2010;
    d.interview_month = 0;
    d.clusters_per_stratum = 20;
    d.households_per_cluster = 15;
    d.recall_years = 10;
    auto sim = simulate::simulate_survey(truth, d, 6);
    model::AssembledModel m(simulate::model_spec(truth), sim.data);
    gmrf::Hyperparameters theta;
    gmrf::Vector x = gmrf::Vector::Zero(m.layout().n);
    for (auto _ : state) {
        benchmark::DoNotOptimize(m.log_posterior_gradient(x, theta));
    }
}
BENCHMARK(BM_AssembleAndGradient);

}  // namespace

BENCHMARK_MAIN();
