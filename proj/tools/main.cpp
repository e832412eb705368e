// Command-line pipeline: simulate -> direct -> fit -> predict -> aggregate ->
// evaluate, driven by a key-value config file. Every subcommand writes its
// artifacts atomically plus a JSON manifest, and is deterministic given the
// seed.
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "u5mr/aggregate.hpp"
#include "u5mr/config.hpp"
#include "u5mr/csv.hpp"
#include "u5mr/evaluate.hpp"
#include "u5mr/model.hpp"
#include "u5mr/raster.hpp"
#include "u5mr/samples_io.hpp"
#include "u5mr/simulate.hpp"
#include "u5mr/survey.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace u5mr;

namespace {

constexpr const char* kVersion = "0.1.0";

// Invalid configuration or missing inputs: exit code 2.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Options {
    fs::path config_path;
    fs::path out_dir = ".";
    std::uint64_t seed = 1;
    int threads = 1;
    bool verbose = false;
    config::Config cfg;

    void log(const std::string& msg) const {
        if (verbose) std::cerr << msg << "\n";
    }
};

std::uint64_t mix_seed(std::uint64_t seed, const std::string& tag) {
    std::uint64_t h = 1469598103934665603ull ^ seed;
    for (char c : tag) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    return h;
}

void require_inputs(const std::vector<fs::path>& paths) {
    std::vector<std::string> missing;
    for (const auto& p : paths) {
        if (!fs::exists(p)) missing.push_back(p.string());
    }
    if (!missing.empty()) {
        std::string msg = "missing input files:";
        for (const auto& m : missing) msg += "\n  " + m;
        throw UsageError(msg);
    }
}

void write_manifest(const Options& opts, const std::string& subcommand,
                    const std::vector<fs::path>& inputs,
                    const std::vector<fs::path>& outputs) {
    json m;
    m["subcommand"] = subcommand;
    m["config"] = opts.config_path.string();
    m["config_digest"] = opts.cfg.digest();
    m["seed"] = opts.seed;
    m["version"] = kVersion;
    m["inputs"] = json::array();
    for (const auto& p : inputs) m["inputs"].push_back(p.string());
    m["outputs"] = json::array();
    for (const auto& p : outputs) m["outputs"].push_back(p.string());
    csv::write_text_atomic(opts.out_dir / (subcommand + "_manifest.json"), m.dump(2) + "\n");
}

std::vector<survey::Period> periods_from_config(const config::Config& cfg) {
    if (!cfg.has("evaluate.periods")) return evaluate::default_periods();
    std::vector<survey::Period> out;
    for (const auto& item : cfg.get_list("evaluate.periods")) {
        auto dash = item.find('-');
        if (dash == std::string::npos) {
            throw UsageError("evaluate.periods entries must look like 1990-1994, got '" +
                             item + "'");
        }
        survey::Period p{std::stoi(item.substr(0, dash)), std::stoi(item.substr(dash + 1))};
        if (p.end_year < p.start_year) {
            throw UsageError("evaluate.periods entry '" + item + "' is reversed");
        }
        out.push_back(p);
    }
    if (out.empty()) throw UsageError("evaluate.periods is empty");
    return out;
}

survey::SurveyDataset load_dataset(const fs::path& clusters_path, const fs::path& births_path) {
    survey::SurveyDataset data;
    data.clusters = survey::load_clusters(clusters_path);
    data.births = survey::load_births(births_path);
    data.validate();
    return data;
}

std::map<std::string, std::pair<int, int>> load_interview_dates(const fs::path& path) {
    std::map<std::string, std::pair<int, int>> out;
    csv::Table t = csv::read_file(path);
    size_t cs = t.col("survey_id"), cy = t.col("interview_year"), cm = t.col("interview_month");
    for (const auto& row : t.rows) {
        out[row[cs]] = {std::stoi(row[cy]), std::stoi(row[cm])};
    }
    return out;
}

void save_interview_dates(const fs::path& path,
                          const std::map<std::string, std::pair<int, int>>& dates) {
    csv::Table t;
    t.header = {"survey_id", "interview_year", "interview_month"};
    for (const auto& [sid, ym] : dates) {
        t.rows.push_back({sid, std::to_string(ym.first), std::to_string(ym.second)});
    }
    csv::write_file(path, t);
}

// Cluster -> county region id via point-in-polygon on the cluster location.
survey::AreaAssignment assign_areas(const std::vector<survey::Cluster>& clusters,
                                    const aggregate::RegionSet& regions) {
    survey::AreaAssignment areas;
    for (const auto& cl : clusters) {
        for (const auto& region : regions.regions) {
            if (aggregate::point_in_region(region, cl.lon, cl.lat)) {
                areas[cl.cluster_id] = region.id;
                break;
            }
        }
    }
    return areas;
}

gmrf::Hyperparameters hyper_from_config(const config::Config& cfg) {
    gmrf::Hyperparameters h;
    h.sigma_cluster = cfg.get_double("hyper.sigma_cluster", h.sigma_cluster);
    h.sigma_survey = cfg.get_double("hyper.sigma_survey", h.sigma_survey);
    h.sigma_time = cfg.get_double("hyper.sigma_time", h.sigma_time);
    h.sigma_rw2 = cfg.get_double("hyper.sigma_rw2", h.sigma_rw2);
    h.range = cfg.get_double("hyper.range", h.range);
    h.sigma_spatial = cfg.get_double("hyper.sigma_spatial", h.sigma_spatial);
    h.rho = cfg.get_double("hyper.rho", h.rho);
    h.validate();
    return h;
}

model::ModelSpec spec_from_config(const Options& opts) {
    const auto& cfg = opts.cfg;
    fs::path density_path = opts.out_dir / "density.asc";
    require_inputs({density_path});

    model::ModelSpec spec;
    spec.variant = model::variant_from_string(cfg.get_string("model.variant", "yearly"));
    raster::Grid density = raster::read_ascii_grid(density_path);
    spec.mesh = gmrf::SpatialMesh::from_grid(density);
    spec.density.resize(density.size());
    for (int c = 0; c < density.size(); ++c) {
        spec.density[c] = density.values[static_cast<size_t>(c)];
    }
    spec.year_begin = cfg.get_int("model.year_begin", 1980);
    spec.year_end = cfg.get_int("model.year_end", 2014);
    spec.knots.year0 = cfg.get_int("model.knot_year0", spec.year_begin);
    int span = spec.year_end - spec.knots.year0;
    int default_knots = (span + 4) / 5 + 1;
    spec.knots.num_knots = cfg.get_int("model.num_knots", default_knots);

    fs::path bias_path = opts.out_dir / "bias.csv";
    if (cfg.get_bool("model.use_bias_offsets", true) && fs::exists(bias_path)) {
        spec.bias = model::BiasOffsetTable::load(bias_path);
    }

    if (spec.variant != model::Variant::Yearly) {
        spec.periods = periods_from_config(cfg);
        for (const auto& name : cfg.has("model.covariates")
                                    ? cfg.get_list("model.covariates")
                                    : std::vector<std::string>{}) {
            model::Covariate cov;
            cov.name = name;
            std::string key = "covariate." + name + ".grid";
            if (cfg.has(key)) {
                cov.grids.push_back(raster::read_ascii_grid(cfg.get_string(key)));
            } else {
                for (size_t p = 1; p <= spec.periods.size(); ++p) {
                    cov.grids.push_back(raster::read_ascii_grid(
                        cfg.get_string(key + std::to_string(p))));
                }
            }
            spec.covariates.push_back(std::move(cov));
        }
    }
    spec.validate();
    return spec;
}

model::FitOptions fit_options_from_config(const Options& opts) {
    const auto& cfg = opts.cfg;
    model::FitOptions fo;
    fo.optimize = cfg.get_bool("fit.optimize", true);
    fo.initial = hyper_from_config(cfg);
    fo.max_evaluations = cfg.get_int("fit.max_evaluations", 150);
    fo.n_samples = cfg.get_int("fit.n_samples", 1000);
    fo.seed = mix_seed(opts.seed, "fit");
    fo.grid_integration = cfg.get_bool("fit.grid_integration", false);
    fo.grid_step = cfg.get_double("fit.grid_step", 0.5);
    if (opts.verbose) {
        fo.progress = [](const std::string& msg) { std::cerr << msg << "\n"; };
    }
    return fo;
}

// Per-survey design: survey.* defaults overridden by survey.<id>.* keys.
simulate::SurveyDesign design_for(const config::Config& cfg, const std::string& id) {
    simulate::SurveyDesign d = simulate::SurveyDesign::from_config(cfg, "survey.");
    d.survey_id = id;
    std::string p = "survey." + id + ".";
    d.interview_year = cfg.get_int(p + "interview_year", d.interview_year);
    d.interview_month = cfg.get_int(p + "interview_month", d.interview_month);
    d.clusters_per_stratum = cfg.get_int(p + "clusters_per_stratum", d.clusters_per_stratum);
    d.households_per_cluster =
        cfg.get_int(p + "households_per_cluster", d.households_per_cluster);
    d.births_per_household = cfg.get_double(p + "births_per_household", d.births_per_household);
    d.recall_years = cfg.get_int(p + "recall_years", d.recall_years);
    d.validate();
    return d;
}

int run_simulate(const Options& opts) {
    const auto& cfg = opts.cfg;
    simulate::TruthParams params = simulate::TruthParams::from_config(cfg);
    params.seed = mix_seed(opts.seed, "truth");
    simulate::TruthSurface truth = simulate::make_truth(params);
    opts.log("simulate: truth surface on " + std::to_string(truth.mesh.ncols) + "x" +
             std::to_string(truth.mesh.nrows) + " grid");

    std::vector<std::string> survey_ids =
        cfg.has("surveys") ? cfg.get_list("surveys") : std::vector<std::string>{"sim"};
    if (survey_ids.empty()) throw UsageError("surveys list is empty");

    simulate::SimulatedSurvey merged;
    bool use_hiv = cfg.get_double("hiv.prevalence", 0.0) > 0.0;
    std::optional<simulate::HivEpidemicSpec> epidemic;
    if (use_hiv) epidemic = simulate::HivEpidemicSpec::from_config(cfg, truth);

    for (const auto& id : survey_ids) {
        simulate::SurveyDesign design = design_for(cfg, id);
        std::uint64_t sseed = mix_seed(opts.seed, "survey:" + id);
        simulate::SimulatedSurvey one =
            epidemic ? simulate::simulate_survey(truth, design, *epidemic, sseed)
                     : simulate::simulate_survey(truth, design, sseed);
        merged.data.clusters.insert(merged.data.clusters.end(), one.data.clusters.begin(),
                                    one.data.clusters.end());
        merged.data.births.insert(merged.data.births.end(), one.data.births.begin(),
                                  one.data.births.end());
        merged.interview_dates.insert(one.interview_dates.begin(), one.interview_dates.end());
        merged.affected_children.insert(one.affected_children.begin(),
                                        one.affected_children.end());
        opts.log("simulate: survey " + id + ": " + std::to_string(one.data.clusters.size()) +
                 " clusters, " + std::to_string(one.data.births.size()) + " births");
    }

    survey::SurveyDataset final_data = merged.data;
    model::BiasOffsetTable bias;
    if (epidemic) {
        simulate::SelectionResult sel = simulate::apply_hiv_selection(
            merged, truth, *epidemic, mix_seed(opts.seed, "selection"));
        final_data = std::move(sel.data);
        bias = std::move(sel.bias);
        opts.log("simulate: selection removed " + std::to_string(sel.removed) + " records");
    }

    std::vector<fs::path> outputs;
    auto out = [&](const std::string& name) {
        outputs.push_back(opts.out_dir / name);
        return outputs.back();
    };
    survey::save_clusters(out("clusters.csv"), final_data.clusters);
    survey::save_births(out("births.csv"), final_data.births, merged.interview_dates);
    save_interview_dates(out("surveys.csv"), merged.interview_dates);
    raster::write_ascii_grid(out("density.asc"), truth.density);
    {
        raster::Grid urban = truth.mesh.to_grid();
        for (int c = 0; c < truth.mesh.size(); ++c) {
            urban.values[static_cast<size_t>(c)] = truth.urban[static_cast<size_t>(c)];
        }
        raster::write_ascii_grid(out("urban.asc"), urban);
    }
    truth.province_regions().to_geojson(out("provinces.geojson"));
    truth.county_regions().to_geojson(out("counties.geojson"));
    bias.save(out("bias.csv"));

    {
        // Reference truth: county U5MR per year for the rural stratum.
        std::map<int, gmrf::Matrix> surfaces;
        for (int y = truth.year_begin; y <= truth.year_end; ++y) {
            surfaces[y] = truth.u5mr_surface(y).transpose();
        }
        auto series = aggregate::aggregate_region(surfaces, truth.density_vector(), truth.mesh,
                                                  truth.county_regions());
        csv::Table t;
        t.header = {"region", "year", "u5mr"};
        std::ostringstream val;
        for (const auto& cs : series) {
            for (size_t i = 0; i < cs.years.size(); ++i) {
                val.str("");
                val.precision(10);
                val << cs.samples(0, static_cast<int>(i));
                t.rows.push_back({cs.region_id, std::to_string(cs.years[i]), val.str()});
            }
        }
        csv::write_file(out("truth_county.csv"), t);
    }

    write_manifest(opts, "simulate", {opts.config_path}, outputs);
    return 0;
}

int run_direct(const Options& opts) {
    const auto& cfg = opts.cfg;
    fs::path clusters_path = opts.out_dir / "clusters.csv";
    fs::path births_path = opts.out_dir / "births.csv";
    fs::path surveys_path = opts.out_dir / "surveys.csv";
    fs::path counties_path = opts.out_dir / "counties.geojson";
    require_inputs({clusters_path, births_path, surveys_path, counties_path});

    survey::SurveyDataset data = load_dataset(clusters_path, births_path);
    auto interview_dates = load_interview_dates(surveys_path);
    auto regions = aggregate::RegionSet::from_geojson(counties_path);
    auto periods = periods_from_config(cfg);

    double test_fraction = cfg.get_double("holdout.test_fraction", 0.25);
    std::uint64_t split_seed = mix_seed(opts.seed, "holdout");
    auto [train, test] = survey::holdout_split(data, test_fraction, split_seed);
    opts.log("direct: split " + std::to_string(train.clusters.size()) + " train / " +
             std::to_string(test.clusters.size()) + " test clusters");

    auto estimate_all = [&](const survey::SurveyDataset& half) {
        survey::AreaAssignment areas = assign_areas(half.clusters, regions);
        std::vector<survey::DirectEstimate> out;
        for (const auto& region : regions.regions) {
            for (const auto& period : periods) {
                try {
                    out.push_back(
                        survey::direct_u5mr_with_variance(half, areas, region.id, period));
                } catch (const std::invalid_argument&) {
                    // No person-months in this area-period.
                }
            }
        }
        return out;
    };

    std::vector<fs::path> outputs;
    auto out = [&](const std::string& name) {
        outputs.push_back(opts.out_dir / name);
        return outputs.back();
    };
    survey::save_clusters(out("train_clusters.csv"), train.clusters);
    survey::save_births(out("train_births.csv"), train.births, interview_dates);
    survey::save_clusters(out("test_clusters.csv"), test.clusters);
    survey::save_births(out("test_births.csv"), test.births, interview_dates);
    survey::save_direct_estimates(out("direct_train.csv"), estimate_all(train));
    survey::save_direct_estimates(out("direct_test.csv"), estimate_all(test));
    survey::save_direct_estimates(out("direct_full.csv"), estimate_all(data));

    write_manifest(opts, "direct",
                   {opts.config_path, clusters_path, births_path, counties_path}, outputs);
    return 0;
}

std::string resolve_fit_input(const Options& opts) {
    std::string input = opts.cfg.get_string("fit.input", "auto");
    if (input == "auto") {
        input = fs::exists(opts.out_dir / "train_clusters.csv") ? "train" : "full";
    }
    if (input != "train" && input != "full") {
        throw UsageError("fit.input must be train, full or auto");
    }
    return input;
}

survey::SurveyDataset load_fit_dataset(const Options& opts, const std::string& input) {
    fs::path clusters = opts.out_dir / (input == "train" ? "train_clusters.csv" : "clusters.csv");
    fs::path births = opts.out_dir / (input == "train" ? "train_births.csv" : "births.csv");
    require_inputs({clusters, births});
    return load_dataset(clusters, births);
}

int run_fit(const Options& opts) {
    std::string input = resolve_fit_input(opts);
    survey::SurveyDataset data = load_fit_dataset(opts, input);
    model::ModelSpec spec = spec_from_config(opts);
    model::AssembledModel m(spec, data);
    opts.log("fit: " + std::to_string(m.layout().n) + " latent variables, " +
             std::to_string(m.cells().size()) + " likelihood cells");

    model::FitOptions fo = fit_options_from_config(opts);
    model::FitResult result = model::fit(m, fo);

    std::vector<fs::path> outputs;
    samples_io::SampleArray arr;
    arr.dim_names = {"latent", "sample"};
    arr.shape = {static_cast<int>(result.samples.rows()),
                 static_cast<int>(result.samples.cols())};
    arr.data.assign(result.samples.data(),
                    result.samples.data() + result.samples.size());
    // Eigen stores column-major; transpose the storage to match the declared
    // row-major (latent, sample) order.
    std::vector<double> rowmajor(arr.data.size());
    for (Eigen::Index i = 0; i < result.samples.rows(); ++i) {
        for (Eigen::Index s = 0; s < result.samples.cols(); ++s) {
            rowmajor[static_cast<size_t>(i) * static_cast<size_t>(result.samples.cols()) +
                     static_cast<size_t>(s)] = result.samples(i, s);
        }
    }
    arr.data = std::move(rowmajor);
    fs::path samples_path = opts.out_dir / "samples.bin";
    samples_io::save(samples_path, arr);
    outputs.push_back(samples_path);

    json t;
    t["variant"] = model::to_string(spec.variant);
    t["input"] = input;
    t["log_marginal"] = result.log_marginal;
    t["evaluations"] = result.evaluations;
    t["n_samples"] = static_cast<int>(result.samples.cols());
    t["theta"]["sigma_cluster"] = result.theta_mode.sigma_cluster;
    t["theta"]["sigma_survey"] = result.theta_mode.sigma_survey;
    t["theta"]["sigma_time"] = result.theta_mode.sigma_time;
    t["theta"]["sigma_rw2"] = result.theta_mode.sigma_rw2;
    t["theta"]["range"] = result.theta_mode.range;
    t["theta"]["sigma_spatial"] = result.theta_mode.sigma_spatial;
    t["theta"]["rho"] = result.theta_mode.rho;
    fs::path theta_path = opts.out_dir / "theta.json";
    csv::write_text_atomic(theta_path, t.dump(2) + "\n");
    outputs.push_back(theta_path);

    write_manifest(opts, "fit", {opts.config_path, opts.out_dir / "density.asc"}, outputs);
    return 0;
}

model::FitResult load_fit_result(const Options& opts) {
    fs::path samples_path = opts.out_dir / "samples.bin";
    fs::path theta_path = opts.out_dir / "theta.json";
    require_inputs({samples_path, fs::path(samples_path.string() + ".json"), theta_path});

    model::FitResult result;
    std::ifstream in(theta_path);
    json t = json::parse(in);
    result.log_marginal = t["log_marginal"].get<double>();
    result.theta_mode.sigma_cluster = t["theta"]["sigma_cluster"].get<double>();
    result.theta_mode.sigma_survey = t["theta"]["sigma_survey"].get<double>();
    result.theta_mode.sigma_time = t["theta"]["sigma_time"].get<double>();
    result.theta_mode.sigma_rw2 = t["theta"]["sigma_rw2"].get<double>();
    result.theta_mode.range = t["theta"]["range"].get<double>();
    result.theta_mode.sigma_spatial = t["theta"]["sigma_spatial"].get<double>();
    result.theta_mode.rho = t["theta"]["rho"].get<double>();

    samples_io::SampleArray arr = samples_io::load(samples_path);
    if (arr.shape.size() != 2) throw UsageError("samples.bin: expected 2 dimensions");
    result.samples.resize(arr.shape[0], arr.shape[1]);
    for (int i = 0; i < arr.shape[0]; ++i) {
        for (int s = 0; s < arr.shape[1]; ++s) {
            result.samples(i, s) =
                arr.data[static_cast<size_t>(i) * static_cast<size_t>(arr.shape[1]) +
                         static_cast<size_t>(s)];
        }
    }
    return result;
}

int run_predict(const Options& opts) {
    const auto& cfg = opts.cfg;
    fs::path theta_path = opts.out_dir / "theta.json";
    require_inputs({theta_path});
    std::ifstream in(theta_path);
    json t = json::parse(in);
    std::string input = t["input"].get<std::string>();

    survey::SurveyDataset data = load_fit_dataset(opts, input);
    model::ModelSpec spec = spec_from_config(opts);
    model::AssembledModel m(spec, data);
    model::FitResult fit = load_fit_result(opts);
    if (fit.samples.rows() != m.layout().n) {
        throw UsageError("samples.bin does not match the assembled model (" +
                         std::to_string(fit.samples.rows()) + " vs " +
                         std::to_string(m.layout().n) + " latent variables)");
    }

    int year_begin = cfg.get_int("predict.year_begin", spec.year_begin);
    int year_end = cfg.get_int("predict.year_end", spec.year_end);
    model::PredictOptions po;
    std::string stratum = cfg.get_string("predict.stratum", "mask");
    if (stratum == "mask" && !fs::exists(opts.out_dir / "urban.asc")) stratum = "rural";
    if (stratum == "rural") {
        po.stratum = model::StratumPolicy::Rural;
    } else if (stratum == "urban") {
        po.stratum = model::StratumPolicy::Urban;
    } else if (stratum == "mask") {
        raster::Grid urban = raster::read_ascii_grid(opts.out_dir / "urban.asc");
        if (urban.size() != spec.mesh.size()) {
            throw UsageError("urban.asc disagrees with density.asc");
        }
        po.rural_mask.resize(static_cast<size_t>(urban.size()));
        for (int c = 0; c < urban.size(); ++c) {
            po.rural_mask[static_cast<size_t>(c)] =
                urban.values[static_cast<size_t>(c)] == 0.0 ? 1 : 0;
        }
    } else {
        throw UsageError("predict.stratum must be rural, urban or mask");
    }
    po.forecast_seed = mix_seed(opts.seed, "forecast");

    auto surfaces = model::predict_u5mr_surfaces(m, fit, year_begin, year_end, po);
    opts.log("predict: " + std::to_string(surfaces.size()) + " yearly surfaces");

    const int S = static_cast<int>(fit.samples.cols());
    const int n_cells = spec.mesh.size();
    samples_io::SampleArray arr;
    arr.dim_names = {"year", "sample", "cell"};
    arr.shape = {year_end - year_begin + 1, S, n_cells};
    arr.data.resize(static_cast<size_t>(arr.shape[0]) * S * n_cells);
    size_t pos = 0;
    for (int y = year_begin; y <= year_end; ++y) {
        const gmrf::Matrix& surf = surfaces.at(y);
        for (int s = 0; s < S; ++s) {
            for (int c = 0; c < n_cells; ++c) arr.data[pos++] = surf(s, c);
        }
    }
    std::vector<fs::path> outputs;
    fs::path surfaces_path = opts.out_dir / "surfaces.bin";
    samples_io::save(surfaces_path, arr);
    outputs.push_back(surfaces_path);

    json meta;
    meta["year_begin"] = year_begin;
    meta["year_end"] = year_end;
    meta["stratum"] = stratum;
    fs::path meta_path = opts.out_dir / "surfaces_meta.json";
    csv::write_text_atomic(meta_path, meta.dump(2) + "\n");
    outputs.push_back(meta_path);

    if (cfg.get_bool("predict.write_rasters", false)) {
        for (int y = year_begin; y <= year_end; ++y) {
            raster::Grid g = spec.mesh.to_grid();
            const gmrf::Matrix& surf = surfaces.at(y);
            for (int c = 0; c < n_cells; ++c) {
                std::vector<double> col(static_cast<size_t>(S));
                for (int s = 0; s < S; ++s) col[static_cast<size_t>(s)] = surf(s, c);
                g.values[static_cast<size_t>(c)] = aggregate::quantile(col, 0.5);
            }
            fs::path p = opts.out_dir / ("u5mr_median_" + std::to_string(y) + ".asc");
            raster::write_ascii_grid(p, g);
            outputs.push_back(p);
        }
    }

    write_manifest(opts, "predict", {opts.config_path, theta_path}, outputs);
    return 0;
}

int run_aggregate(const Options& opts) {
    const auto& cfg = opts.cfg;
    fs::path surfaces_path = opts.out_dir / "surfaces.bin";
    fs::path meta_path = opts.out_dir / "surfaces_meta.json";
    fs::path density_path = opts.out_dir / "density.asc";
    fs::path counties_path = opts.out_dir / "counties.geojson";
    require_inputs({surfaces_path, meta_path, density_path, counties_path});

    std::ifstream in(meta_path);
    json meta = json::parse(in);
    int year_begin = meta["year_begin"].get<int>();
    int year_end = meta["year_end"].get<int>();

    samples_io::SampleArray arr = samples_io::load(surfaces_path);
    if (arr.shape.size() != 3 || arr.shape[0] != year_end - year_begin + 1) {
        throw UsageError("surfaces.bin disagrees with surfaces_meta.json");
    }
    const int S = arr.shape[1];
    const int n_cells = arr.shape[2];

    raster::Grid density = raster::read_ascii_grid(density_path);
    gmrf::SpatialMesh mesh = gmrf::SpatialMesh::from_grid(density);
    gmrf::Vector dvec(density.size());
    for (int c = 0; c < density.size(); ++c) dvec[c] = density.values[static_cast<size_t>(c)];
    auto regions = aggregate::RegionSet::from_geojson(counties_path);

    std::map<int, gmrf::Matrix> surfaces;
    size_t pos = 0;
    for (int y = year_begin; y <= year_end; ++y) {
        gmrf::Matrix surf(S, n_cells);
        for (int s = 0; s < S; ++s) {
            for (int c = 0; c < n_cells; ++c) surf(s, c) = arr.data[pos++];
        }
        surfaces[y] = std::move(surf);
    }

    auto series = aggregate::aggregate_region(surfaces, dvec, mesh, regions);
    std::vector<fs::path> outputs;
    fs::path series_path = opts.out_dir / "county_series.csv";
    aggregate::save_county_series(series_path, series);
    outputs.push_back(series_path);

    {
        auto periods = periods_from_config(cfg);
        auto table = evaluate::posterior_estimate_table(series, periods);
        csv::Table t;
        t.header = {"region", "period", "mean", "variance"};
        std::ostringstream v1, v2;
        for (const auto& [key, est] : table) {
            v1.str("");
            v1.precision(10);
            v1 << est.mean;
            v2.str("");
            v2.precision(10);
            v2 << est.variance;
            t.rows.push_back({key.first, key.second, v1.str(), v2.str()});
        }
        fs::path p = opts.out_dir / "county_period.csv";
        csv::write_file(p, t);
        outputs.push_back(p);
    }

    {
        csv::Table t;
        t.header = {"year", "q05", "q95", "ratio"};
        std::ostringstream os;
        for (int y = year_begin; y <= year_end; ++y) {
            auto pr = aggregate::pixel_ratio_summary(surfaces.at(y));
            os.str("");
            os.precision(10);
            os << pr.q05 << "," << pr.q95 << "," << pr.ratio;
            std::string rest = os.str();
            auto c1 = rest.find(',');
            auto c2 = rest.find(',', c1 + 1);
            t.rows.push_back({std::to_string(y), rest.substr(0, c1),
                              rest.substr(c1 + 1, c2 - c1 - 1), rest.substr(c2 + 1)});
        }
        fs::path p = opts.out_dir / "pixel_ratio.csv";
        csv::write_file(p, t);
        outputs.push_back(p);
    }

    int mdg_from = cfg.get_int("aggregate.mdg_from", 1990);
    int mdg_to = cfg.get_int("aggregate.mdg_to", 2015);
    if (mdg_from >= year_begin && mdg_to <= year_end) {
        csv::Table t;
        t.header = {"region", "median_drop_pct", "prob_target"};
        std::ostringstream os;
        for (const auto& cs : series) {
            auto drop = aggregate::mdg_drop(cs, mdg_from, mdg_to);
            os.str("");
            os.precision(10);
            os << drop.median_drop_pct;
            std::string a = os.str();
            os.str("");
            os << drop.prob_target;
            t.rows.push_back({cs.region_id, a, os.str()});
        }
        fs::path p = opts.out_dir / "mdg.csv";
        csv::write_file(p, t);
        outputs.push_back(p);
    }

    write_manifest(opts, "aggregate",
                   {opts.config_path, surfaces_path, density_path, counties_path}, outputs);
    return 0;
}

int run_evaluate(const Options& opts) {
    const auto& cfg = opts.cfg;
    fs::path period_path = opts.out_dir / "county_period.csv";
    fs::path train_path = opts.out_dir / "direct_train.csv";
    fs::path test_path = opts.out_dir / "direct_test.csv";
    require_inputs({period_path, train_path, test_path});

    evaluate::EstimateTable smoothed;
    {
        csv::Table t = csv::read_file(period_path);
        size_t cr = t.col("region"), cp = t.col("period"), cm = t.col("mean"),
               cv = t.col("variance");
        for (const auto& row : t.rows) {
            smoothed[{row[cr], row[cp]}] = {std::stod(row[cm]), std::stod(row[cv])};
        }
    }
    auto weighted = evaluate::direct_estimate_table(survey::load_direct_estimates(train_path));
    auto holdout = survey::load_direct_estimates(test_path);
    auto periods = periods_from_config(cfg);

    evaluate::ComparisonReport report = evaluate::holdout_mse(
        {{"smoothed", smoothed}, {"weighted", weighted}}, holdout, periods);
    report.split_seed = mix_seed(opts.seed, "holdout");
    report.config_digest = opts.cfg.digest();

    std::vector<fs::path> outputs;
    auto out = [&](const std::string& name) {
        outputs.push_back(opts.out_dir / name);
        return outputs.back();
    };
    report.save_csv(out("report.csv"));
    report.save_long_csv(out("report_long.csv"));
    report.save_text(out("report.txt"));

    write_manifest(opts, "evaluate", {opts.config_path, period_path, train_path, test_path},
                   outputs);
    return 0;
}

int run_pipeline(const Options& opts) {
    int rc = run_simulate(opts);
    if (rc == 0) rc = run_direct(opts);
    if (rc == 0) rc = run_fit(opts);
    if (rc == 0) rc = run_predict(opts);
    if (rc == 0) rc = run_aggregate(opts);
    if (rc == 0) rc = run_evaluate(opts);
    return rc;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Space-time under-5 mortality estimation pipeline"};
    app.require_subcommand(1);

    Options opts;
    std::string config_flag, out_dir_flag;
    std::int64_t seed_flag = -1;
    int threads_flag = 0;
    bool verbose_flag = false;

    app.add_option("--config", config_flag, "Key-value config file");
    app.add_option("--seed", seed_flag, "Master random seed");
    app.add_option("--out-dir", out_dir_flag, "Artifact directory");
    app.add_option("--threads", threads_flag, "Worker thread cap");
    app.add_flag("--verbose", verbose_flag, "Progress logging to stderr");

    std::vector<std::string> names = {"simulate", "direct", "fit",      "predict",
                                      "aggregate", "evaluate", "pipeline"};
    for (const auto& n : names) app.add_subcommand(n)->fallthrough();

    CLI11_PARSE(app, argc, argv);
    std::string subcommand = app.get_subcommands().front()->get_name();

    try {
        // Precedence: flags, then environment, then config-file values.
        auto env = [](const char* name) -> std::optional<std::string> {
            const char* v = std::getenv(name);
            if (v && *v) return std::string(v);
            return std::nullopt;
        };
        if (config_flag.empty()) {
            if (auto e = env("U5MR_CONFIG")) config_flag = *e;
        }
        if (config_flag.empty()) throw UsageError("no config file (--config or U5MR_CONFIG)");
        opts.config_path = config_flag;
        if (!fs::exists(opts.config_path)) {
            throw UsageError("config file not found: " + opts.config_path.string());
        }
        opts.cfg = config::Config::from_file(opts.config_path);

        if (!out_dir_flag.empty()) {
            opts.out_dir = out_dir_flag;
        } else if (auto e = env("U5MR_OUT_DIR")) {
            opts.out_dir = *e;
        } else {
            opts.out_dir = opts.cfg.get_string("out_dir", ".");
        }
        fs::create_directories(opts.out_dir);

        if (seed_flag >= 0) {
            opts.seed = static_cast<std::uint64_t>(seed_flag);
        } else if (auto e = env("U5MR_SEED")) {
            opts.seed = std::stoull(*e);
        } else {
            opts.seed = static_cast<std::uint64_t>(opts.cfg.get_int("seed", 1));
        }

        if (threads_flag > 0) {
            opts.threads = threads_flag;
        } else if (auto e = env("U5MR_THREADS")) {
            opts.threads = std::stoi(*e);
        } else {
            opts.threads = opts.cfg.get_int("threads", 1);
        }
        opts.verbose = verbose_flag || env("U5MR_VERBOSE").has_value() ||
                       opts.cfg.get_bool("verbose", false);

        if (subcommand == "simulate") return run_simulate(opts);
        if (subcommand == "direct") return run_direct(opts);
        if (subcommand == "fit") return run_fit(opts);
        if (subcommand == "predict") return run_predict(opts);
        if (subcommand == "aggregate") return run_aggregate(opts);
        if (subcommand == "evaluate") return run_evaluate(opts);
        if (subcommand == "pipeline") return run_pipeline(opts);
        throw UsageError("unknown subcommand " + subcommand);
    } catch (const UsageError& e) {
        std::cerr << "error (" << subcommand << "): " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error (" << subcommand << "): " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error (" << subcommand << "): " << e.what() << "\n";
        return 1;
    }
}
