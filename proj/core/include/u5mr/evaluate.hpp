#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "u5mr/aggregate.hpp"
#include "u5mr/model.hpp"
#include "u5mr/survey.hpp"

namespace u5mr::evaluate {

// Point estimate with its variance for one (area, period) cell, on the U5MR
// scale. For posterior estimators these are the posterior mean and variance;
// for the weighted estimator the direct estimate and its delta-method variance.
struct AreaPeriodEstimate {
    double mean = 0.0;
    double variance = 0.0;
};

// (area_id, period label) -> estimate
using EstimateTable = std::map<std::pair<std::string, std::string>, AreaPeriodEstimate>;

EstimateTable direct_estimate_table(const std::vector<survey::DirectEstimate>& estimates);

// Period-averaged posterior per region: mean over the period's years within
// each sample, then moments across samples.
EstimateTable posterior_estimate_table(const std::vector<aggregate::CountySeries>& series,
                                       const std::vector<survey::Period>& periods);

struct PeriodScore {
    std::string period;
    double mse = 0.0;
    double bias2 = 0.0;
    double variance = 0.0;
    int n_areas = 0;
};

struct ModelScores {
    std::string model;
    std::vector<PeriodScore> periods;
};

struct ComparisonReport {
    std::vector<ModelScores> models;
    long excluded = 0;  // holdout cells without a usable comparison value
    std::vector<std::string> warnings;
    std::uint64_t split_seed = 0;
    std::string config_digest;

    const PeriodScore& score(const std::string& model, const std::string& period) const;

    void save_csv(const std::filesystem::path& path) const;
    void save_long_csv(const std::filesystem::path& path) const;  // model,period,component,value
    void save_text(const std::filesystem::path& path) const;
};

// The standard five evaluation bins, 1990-94 through 2010-14.
std::vector<survey::Period> default_periods();

// Mean squared error against holdout direct estimates, decomposed exactly as
// MSE = bias^2 + variance per cell before averaging over areas.
ComparisonReport holdout_mse(const std::map<std::string, EstimateTable>& estimates,
                             const std::vector<survey::DirectEstimate>& holdout,
                             const std::vector<survey::Period>& periods);

struct InformationCriteria {
    double dic = 0.0;
    double p_dic = 0.0;
    double waic = 0.0;
    double p_waic = 0.0;       // always >= 0
    double log_cpo_sum = 0.0;  // sum of log CPO over observations
    long cpo_unstable = 0;     // observations whose harmonic estimate is dominated
    long n_observations = 0;
    int n_samples = 0;
};

// Requires at least 100 posterior samples in the fit.
InformationCriteria information_criteria(const model::AssembledModel& m,
                                         const model::FitResult& fit);

struct CandidateScore {
    std::uint32_t mask = 0;  // bit i set when candidate i is included
    std::vector<std::string> names;
    double dic = 0.0;
    double waic = 0.0;
    double neg_log_cpo = 0.0;  // -sum log CPO, lower is better
    double log_marginal = 0.0;
};

struct SearchResult {
    std::vector<CandidateScore> ranked;  // ascending WAIC
    bool criteria_agree = false;         // all three criteria pick the same top subset

    // Rank position (0 = best) of a subset under WAIC; throws when absent.
    int rank_of(std::uint32_t mask) const;
};

// Exhaustive fit of every nonempty candidate subset (at most 12 candidates).
// `workers` caps concurrent fits.
SearchResult covariate_search(const model::ModelSpec& base,
                              const survey::SurveyDataset& data,
                              const std::vector<model::Covariate>& candidates,
                              model::Variant variant, const model::FitOptions& fit_options,
                              int workers = 1);

void save_search_result(const std::filesystem::path& path, const SearchResult& result);

}  // namespace u5mr::evaluate
