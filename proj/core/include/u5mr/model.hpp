#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "u5mr/gmrf.hpp"
#include "u5mr/priors.hpp"
#include "u5mr/raster.hpp"
#include "u5mr/survey.hpp"

namespace u5mr::model {

using gmrf::Matrix;
using gmrf::SparseMat;
using gmrf::Vector;

// Province/survey/year -> BIAS ratio (true over HIV-unadjusted U5MR, >= 1).
// Enters the data-side linear predictor as -log(ratio): the reported data run
// low, so the latent field absorbs the corrected level.
class BiasOffsetTable {
  public:
    void set(const std::string& province, const std::string& survey, int year, double ratio);
    // log(ratio); missing cells default to ratio 1 and are counted.
    double log_offset(const std::string& province, const std::string& survey, int year) const;
    bool empty() const { return ratios_.empty(); }
    long missing_lookups() const { return missing_; }

    static BiasOffsetTable load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

    const std::map<std::tuple<std::string, std::string, int>, double>& entries() const {
        return ratios_;
    }

  private:
    std::map<std::tuple<std::string, std::string, int>, double> ratios_;
    mutable long missing_ = 0;
};

enum class Variant { Yearly, PeriodM2, PeriodM3, PeriodM4 };

Variant variant_from_string(const std::string& name);
std::string to_string(Variant v);

// A covariate raster, either time-invariant (one grid) or one grid per period.
struct Covariate {
    std::string name;
    std::vector<raster::Grid> grids;
};

struct ModelSpec {
    Variant variant = Variant::Yearly;
    gmrf::SpatialMesh mesh;
    Vector density;  // population density per cell, for the constraints
    int year_begin = 1980;
    int year_end = 2014;
    gmrf::KnotGrid knots{1980, 8};
    BiasOffsetTable bias;
    priors::HyperPriors hyper_priors;

    // Period variants only.
    std::vector<survey::Period> periods;
    std::vector<Covariate> covariates;

    // Stratum labels ending in this suffix get the rural fixed effect.
    std::string rural_suffix = "rural";

    int num_years() const { return year_end - year_begin + 1; }
    void validate() const;
};

// Base covariate-model spec over three 5-year periods from 2000; M2 adds a
// time-invariant spatial field, M3 covariates, M4 both.
ModelSpec covariate_models(const ModelSpec& base, Variant variant,
                           const std::vector<Covariate>& covariates);

struct LatentLayout {
    int n = 0;
    int beta0 = 0;                 // 6 age intercepts
    int delta = 0;                 // rural vs urban fixed effect
    int phi0 = -1, n_phi_rows = 0; // 3 RW2 trends x years (Yearly)
    int gamma0 = -1, n_periods = 0;  // RW1 over periods (Period variants)
    int st0 = -1, n_cells = 0, n_knots = 0;  // knot-major space-time block / spatial field
    int eta0 = -1, n_clusters = 0;
    int ups0 = -1, n_surveys = 0;
    int eps0 = -1, n_years = 0;    // IID yearly effect (Yearly)
    int cov0 = -1, n_cov = 0;

    int phi_index(int trend, int year_offset) const { return phi0 + trend * n_phi_rows + year_offset; }
    int st_index(int knot, int cell) const { return st0 + knot * n_cells + cell; }
};

// RW2 trend (0..2) backing age band a (1..6): one each for [0,1) and [1,12),
// a shared one for [12,60).
int trend_of_band(int band);

struct LikelihoodCell {
    std::vector<std::pair<int, double>> design;  // (latent index, value)
    double offset = 0.0;   // log BIAS
    double trials = 0.0;
    double deaths = 0.0;
    int band = 0;
    int year = 0;              // representative year (period midpoint for Period variants)
    size_t cluster_idx = 0;
};

struct CovariateScaling {
    double mean = 0.0;
    double sd = 1.0;
};

// Model spec bound to a dataset: design matrix, constraints and prior-block
// bookkeeping, ready for fitting.
class AssembledModel {
  public:
    AssembledModel(ModelSpec spec, const survey::SurveyDataset& data);

    const ModelSpec& spec() const { return spec_; }
    const LatentLayout& layout() const { return layout_; }
    const std::vector<LikelihoodCell>& cells() const { return cells_; }
    const SparseMat& design() const { return X_; }
    const Vector& offsets() const { return offsets_; }
    const Vector& trials() const { return trials_; }
    const Vector& deaths() const { return deaths_; }
    const gmrf::ConstraintSet& constraints() const { return constraints_; }
    const std::vector<survey::Cluster>& clusters() const { return clusters_; }
    const std::vector<std::string>& survey_ids() const { return survey_ids_; }
    const std::vector<CovariateScaling>& covariate_scaling() const { return cov_scaling_; }
    long bias_defaults() const { return bias_defaults_; }

    SparseMat prior_precision(const gmrf::Hyperparameters& theta) const;

    // Linear predictor for one person-month context given a latent vector.
    double linear_predictor(const Vector& x, const std::string& cluster_id, int year,
                            int band) const;

    // Bernoulli/binomial log-likelihood given the latent vector (binomial
    // coefficients excluded; they are constant in the latent field).
    double log_likelihood(const Vector& x) const;
    Vector cell_log_likelihood(const Vector& x) const;  // per likelihood cell, with log C(n,y)

    double log_posterior(const Vector& x, const gmrf::Hyperparameters& theta) const;
    Vector log_posterior_gradient(const Vector& x, const gmrf::Hyperparameters& theta) const;

    // Hyperprior over the components active in this variant.
    double hyper_log_prior(const gmrf::Hyperparameters& theta) const;

  private:
    ModelSpec spec_;
    LatentLayout layout_;
    std::vector<survey::Cluster> clusters_;
    std::vector<std::string> survey_ids_;
    std::vector<LikelihoodCell> cells_;
    SparseMat X_;
    Vector offsets_, trials_, deaths_, log_binom_;
    gmrf::ConstraintSet constraints_;
    std::vector<CovariateScaling> cov_scaling_;
    long bias_defaults_ = 0;

    std::vector<std::pair<int, double>> design_row(size_t cluster_idx, int year, int band,
                                                   int period_idx) const;
    friend struct ModelInternals;
};

struct GaussianApprox {
    Vector mode;
    SparseMat precision;  // prior precision + X' W X at the mode
    int newton_iterations = 0;
    double final_gradient_norm = 0.0;
};

struct NewtonOptions {
    int max_iterations = 50;
    double gradient_tolerance = 1e-6;
};

// Binomial observations on a linear predictor offsets + X x with Gaussian
// prior precision Q over x, restricted to A x = 0. The generic core behind
// the model-level entry points, also usable standalone for small problems.
struct LatentProblem {
    SparseMat prior_precision;
    SparseMat design;  // n_obs x n_latent
    Vector offsets;
    Vector trials;
    Vector deaths;
    Matrix constraints;  // c x n, may have zero rows

    double log_likelihood(const Vector& x) const;
    void validate() const;
};

// Constrained Newton ascent of the latent log-posterior. Throws
// std::runtime_error (with the iteration trace in the message) when it fails
// to converge.
GaussianApprox inner_gaussian_approximation(const LatentProblem& problem,
                                            const NewtonOptions& opts = {},
                                            const Vector* warm_start = nullptr);
GaussianApprox inner_gaussian_approximation(const AssembledModel& m,
                                            const gmrf::Hyperparameters& theta,
                                            const NewtonOptions& opts = {},
                                            const Vector* warm_start = nullptr);

// Laplace approximation to log p(y | theta), constraint-corrected on both the
// prior and posterior sides. The problem-level version excludes the
// hyperprior; the model-level version matches it.
double laplace_log_marginal(const LatentProblem& problem, const GaussianApprox& approx);
double laplace_log_marginal(const AssembledModel& m, const gmrf::Hyperparameters& theta,
                            const GaussianApprox& approx);

struct FitOptions {
    bool optimize = true;              // false: keep theta fixed at `initial`
    gmrf::Hyperparameters initial;
    int max_evaluations = 150;         // budget for the derivative-free ascent
    int n_samples = 1000;
    std::uint64_t seed = 1;
    bool grid_integration = false;     // coarse cross design around the mode
    double grid_step = 0.5;            // step in the transformed scale
    std::function<void(const std::string&)> progress;  // optional stderr logging
};

struct FitResult {
    gmrf::Hyperparameters theta_mode;
    double log_marginal = 0.0;  // at the mode, including the hyperprior
    GaussianApprox gauss;
    Matrix samples;  // n_latent x n_samples
    std::vector<std::pair<gmrf::Hyperparameters, double>> grid;  // (theta, weight), sums to 1
    int evaluations = 0;
};

FitResult fit(const AssembledModel& m, const FitOptions& opts);

enum class StratumPolicy { Urban, Rural };

struct PredictOptions {
    StratumPolicy stratum = StratumPolicy::Rural;
    // When non-empty (one flag per cell, nonzero = rural), overrides `stratum`
    // cell by cell.
    std::vector<char> rural_mask;
    std::uint64_t forecast_seed = 99;  // innovations for years beyond the data
};

// Posterior samples of U5MR(s, t) per cell; only the prediction part of the
// linear predictor enters (age intercepts, stratum effect, temporal trends and
// the space-time field; no offsets, cluster, survey or IID-year effects).
// Returns n_samples x n_cells.
Matrix predict_u5mr_surface(const AssembledModel& m, const FitResult& fit, int year,
                            const PredictOptions& opts = {});

// Yearly surfaces for a range of years, sharing forecast innovations.
std::map<int, Matrix> predict_u5mr_surfaces(const AssembledModel& m, const FitResult& fit,
                                            int year_begin, int year_end,
                                            const PredictOptions& opts = {});

// Posterior samples of the space-time field u(s, t) itself (for odds maps).
Matrix predict_st_field(const AssembledModel& m, const FitResult& fit, int year,
                        const PredictOptions& opts = {});

// Bias-offset CSV: province, survey_id, year, ratio
// (declared on BiasOffsetTable::load/save)

}  // namespace u5mr::model
