#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace u5mr::hazard {

// Six monthly-hazard age bands covering months 0..59:
// [0,1), [1,12), [12,24), [24,36), [36,48), [48,60).
inline constexpr int kNumAgeBands = 6;
inline constexpr std::array<int, kNumAgeBands> kBandMonthSpan = {1, 11, 12, 12, 12, 12};
inline constexpr int kMaxMonths = 60;

struct AgeBand {
    int index;       // 1..6
    int month_span;  // months covered by the band
};

// Band index (1..6) for month of life m in 0..59. Throws std::domain_error
// for out-of-range months.
int age_band_of_month(int m);

AgeBand age_band(int index);

struct BirthRecord {
    std::string child_id;
    std::string cluster_id;
    std::string survey_id;
    int birth_year = 0;
    int birth_month = 0;  // 0..11 within birth_year
    int months_observed = 0;  // months before censoring, capped at 60
    bool died = false;
    std::optional<int> death_month;  // month of life 0..59

    void validate() const;  // throws std::invalid_argument on violations
};

struct PersonMonth {
    std::string child_id;
    int month = 0;  // month of life, 0..59
    int age_band = 0;
    int year = 0;   // calendar year the month falls in
    std::string cluster_id;
    std::string survey_id;
    std::string stratum_id;
    int outcome = 0;  // 1 = died this month
};

// One person-month per month alive and observed; the death month (if any) is
// the final record and carries outcome 1. The calendar year of month m is
// birth_year + floor(m / 12).
std::vector<PersonMonth> expand_birth_history(const BirthRecord& rec);

struct HazardVector {
    std::array<double, kNumAgeBands> q{};  // monthly death probability per band

    void validate() const;
};

// U5MR = 1 - prod_a (1 - q_a)^{z_a} with z = (1, 11, 12, 12, 12, 12).
double u5mr_from_hazards(const HazardVector& h);

double logit(double p);   // requires 0 < p < 1
double expit(double x);

}  // namespace u5mr::hazard
