#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "u5mr/hazard.hpp"

namespace u5mr::survey {

struct Cluster {
    std::string cluster_id;
    std::string survey_id;
    std::string stratum_id;  // region x urban/rural label
    std::string province;    // used for the HIV bias offset lookup
    double lon = 0.0;
    double lat = 0.0;
    double weight = 1.0;     // sampling weight, > 0
};

struct SurveyDataset {
    std::vector<Cluster> clusters;
    std::vector<hazard::BirthRecord> births;

    void validate() const;
    const Cluster& cluster(const std::string& cluster_id) const;
    std::map<std::string, size_t> cluster_index() const;
};

struct Period {
    int start_year;
    int end_year;  // inclusive

    bool contains(int year) const { return year >= start_year && year <= end_year; }
    std::string label() const;
};

// Cluster id -> area id. Clusters absent from the map do not contribute.
using AreaAssignment = std::map<std::string, std::string>;

struct DirectEstimate {
    std::string area_id;
    std::string period;
    double u5mr = 0.0;
    std::optional<double> logit_u5mr;      // absent when degenerate
    std::optional<double> logit_variance;  // absent when not estimable
    bool degenerate = false;               // zero deaths in every band
};

// Weighted per-band hazards combined through the U5MR product formula.
// Throws std::invalid_argument when no person-month falls in the area-period.
DirectEstimate direct_u5mr(const SurveyDataset& data, const AreaAssignment& areas,
                           const std::string& area_id, const Period& period);

// Delete-one-cluster jackknife within strata on the logit scale. Requires at
// least two contributing clusters.
double jackknife_variance(const SurveyDataset& data, const AreaAssignment& areas,
                          const std::string& area_id, const Period& period);

DirectEstimate direct_u5mr_with_variance(const SurveyDataset& data,
                                         const AreaAssignment& areas,
                                         const std::string& area_id, const Period& period);

// Cluster-level split; `test_fraction` of each stratum's clusters goes to the
// test half (at least one per half when a stratum has two or more clusters).
// Deterministic for a fixed seed.
std::pair<SurveyDataset, SurveyDataset> holdout_split(const SurveyDataset& data,
                                                      double test_fraction,
                                                      std::uint64_t seed);

// -- File formats -----------------------------------------------------------

// Cluster CSV: cluster_id, survey_id, stratum_id, lon, lat, weight[, province]
std::vector<Cluster> load_clusters(const std::filesystem::path& path);
void save_clusters(const std::filesystem::path& path, const std::vector<Cluster>& clusters);

// Birth-history CSV: child_id, cluster_id, survey_id, birth_year, birth_month,
// died, death_month, interview_year, interview_month
std::vector<hazard::BirthRecord> load_births(const std::filesystem::path& path);
void save_births(const std::filesystem::path& path,
                 const std::vector<hazard::BirthRecord>& births,
                 const std::map<std::string, std::pair<int, int>>& interview_dates);

// Direct-estimate CSV: area_id, period, u5mr, logit_u5mr, logit_variance, flag
void save_direct_estimates(const std::filesystem::path& path,
                           const std::vector<DirectEstimate>& estimates);
std::vector<DirectEstimate> load_direct_estimates(const std::filesystem::path& path);

}  // namespace u5mr::survey
