#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

const char* cli_path() { return U5MR_CLI_PATH; }

int run(const std::string& args) {
    std::string cmd = std::string(cli_path()) + " " + args + " > /dev/null 2>&1";
    int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

fs::path scratch_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / "u5mr_cli" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

fs::path write_config(const fs::path& dir, const fs::path& out_dir) {
    auto path = dir / "run.cfg";
    std::ofstream f(path);
    f << "seed = 31\n"
      << "out_dir = " << out_dir.string() << "\n"
      << "truth.ncols = 6\ntruth.nrows = 6\ntruth.cellsize = 0.5\n"
      << "truth.year_begin = 2000\ntruth.year_end = 2009\n"
      << "truth.knot_year0 = 2000\ntruth.num_knots = 3\n"
      << "truth.provinces_x = 2\ntruth.provinces_y = 1\n"
      << "truth.counties_x = 2\ntruth.counties_y = 2\n"
      << "truth.mean_households = 60\n"
      << "surveys = dhs2008\n"
      << "survey.dhs2008.interview_year = 2008\n"
      << "survey.dhs2008.interview_month = 5\n"
      << "survey.dhs2008.clusters_per_stratum = 6\n"
      << "survey.dhs2008.households_per_cluster = 12\n"
      << "survey.dhs2008.recall_years = 8\n"
      << "model.variant = yearly\n"
      << "model.year_begin = 2000\nmodel.year_end = 2009\n"
      << "holdout.test_fraction = 0.3\n"
      << "fit.optimize = false\nfit.n_samples = 150\n"
      << "predict.year_begin = 2000\npredict.year_end = 2009\n"
      << "evaluate.periods = 2000-2004,2005-2009\n";
    return path;
}

std::vector<char> slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::vector<char>(std::istreambuf_iterator<char>(f),
                             std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("the full pipeline runs and writes every expected artifact") {
    auto dir = scratch_dir("pipeline");
    auto out = dir / "out";
    auto cfg = write_config(dir, out);
    REQUIRE(run("pipeline --config " + cfg.string()) == 0);
    for (const char* name :
         {"clusters.csv", "births.csv", "surveys.csv", "density.asc", "urban.asc",
          "provinces.geojson", "counties.geojson", "truth_county.csv", "direct_train.csv",
          "direct_test.csv", "direct_full.csv", "samples.bin", "samples.bin.json", "theta.json",
          "surfaces.bin", "surfaces_meta.json", "county_series.csv", "county_period.csv",
          "pixel_ratio.csv", "report.csv", "report_long.csv", "report.txt",
          "simulate_manifest.json", "direct_manifest.json", "fit_manifest.json",
          "predict_manifest.json", "aggregate_manifest.json", "evaluate_manifest.json"}) {
        INFO("missing artifact: " << name);
        CHECK(fs::exists(out / name));
    }
}

TEST_CASE("two runs of the pipeline are byte-identical") {
    auto dir = scratch_dir("repro");
    auto out1 = dir / "out1";
    auto out2 = dir / "out2";
    auto cfg1 = write_config(dir, out1);
    REQUIRE(run("pipeline --config " + cfg1.string()) == 0);
    // Same config except for the output directory.
    auto cfg2dir = dir / "second";
    fs::create_directories(cfg2dir);
    auto cfg2 = write_config(cfg2dir, out2);
    REQUIRE(run("pipeline --config " + cfg2.string()) == 0);
    for (const char* name :
         {"clusters.csv", "births.csv", "direct_train.csv", "direct_test.csv", "samples.bin",
          "surfaces.bin", "county_series.csv", "report_long.csv"}) {
        INFO("artifact differs: " << name);
        CHECK(slurp(out1 / name) == slurp(out2 / name));
    }
}

TEST_CASE("fitting without inputs reports a usage error") {
    auto dir = scratch_dir("missing");
    auto out = dir / "out";
    auto cfg = write_config(dir, out);
    CHECK(run("fit --config " + cfg.string()) == 2);
}

TEST_CASE("a missing config file reports a usage error") {
    CHECK(run("simulate --config /nonexistent/u5mr.cfg") == 2);
    CHECK(run("simulate") == 2);  // no config anywhere
}

TEST_CASE("an unknown subcommand fails") {
    auto dir = scratch_dir("badsub");
    auto cfg = write_config(dir, dir / "out");
    CHECK(run("frobnicate --config " + cfg.string()) != 0);
}

TEST_CASE("stage by stage execution matches the one-shot pipeline") {
    auto dir = scratch_dir("staged");
    auto out = dir / "out";
    auto cfg = write_config(dir, out);
    for (const char* sub : {"simulate", "direct", "fit", "predict", "aggregate", "evaluate"}) {
        INFO("stage failed: " << sub);
        REQUIRE(run(std::string(sub) + " --config " + cfg.string()) == 0);
    }
    auto ref_dir = scratch_dir("staged_ref");
    auto ref_out = ref_dir / "out";
    auto ref_cfg = write_config(ref_dir, ref_out);
    REQUIRE(run("pipeline --config " + ref_cfg.string()) == 0);
    for (const char* name : {"clusters.csv", "samples.bin", "county_series.csv", "report_long.csv"}) {
        INFO("artifact differs: " << name);
        CHECK(slurp(out / name) == slurp(ref_out / name));
    }
}

TEST_CASE("environment variables supply defaults that flags override") {
    auto dir = scratch_dir("env");
    auto out = dir / "out";
    auto cfg = write_config(dir, out);
    std::string cmd = "U5MR_CONFIG=" + cfg.string() + " " + cli_path() +
                      " simulate > /dev/null 2>&1";
    int rc = std::system(cmd.c_str());
    CHECK((WIFEXITED(rc) && WEXITSTATUS(rc) == 0));
    CHECK(fs::exists(out / "clusters.csv"));

    // A bogus env config loses to an explicit flag.
    auto out2 = dir / "out2";
    auto cfg2dir = dir / "flagged";
    fs::create_directories(cfg2dir);
    auto cfg2 = write_config(cfg2dir, out2);
    std::string cmd2 = "U5MR_CONFIG=/nonexistent.cfg " + std::string(cli_path()) +
                       " simulate --config " + cfg2.string() + " > /dev/null 2>&1";
    int rc2 = std::system(cmd2.c_str());
    CHECK((WIFEXITED(rc2) && WEXITSTATUS(rc2) == 0));
    CHECK(fs::exists(out2 / "clusters.csv"));
}
