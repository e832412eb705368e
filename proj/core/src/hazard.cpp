#include "u5mr/hazard.hpp"

#include <cmath>
#include <stdexcept>

namespace u5mr::hazard {

int age_band_of_month(int m) {
    if (m < 0 || m >= kMaxMonths) {
        throw std::domain_error("age_band_of_month: month " + std::to_string(m) +
                                " outside 0..59");
    }
    if (m == 0) return 1;
    if (m < 12) return 2;
    return 3 + (m - 12) / 12;
}

AgeBand age_band(int index) {
    if (index < 1 || index > kNumAgeBands) {
        throw std::domain_error("age_band: index outside 1..6");
    }
    return AgeBand{index, kBandMonthSpan[static_cast<size_t>(index - 1)]};
}

void BirthRecord::validate() const {
    if (birth_month < 0 || birth_month > 11) {
        throw std::invalid_argument("BirthRecord " + child_id + ": birth_month outside 0..11");
    }
    if (months_observed < 0 || months_observed > kMaxMonths) {
        throw std::invalid_argument("BirthRecord " + child_id +
                                    ": months_observed outside 0..60");
    }
    if (died) {
        if (!death_month.has_value()) {
            throw std::invalid_argument("BirthRecord " + child_id +
                                        ": died without death_month");
        }
        if (*death_month < 0 || *death_month >= kMaxMonths) {
            throw std::invalid_argument("BirthRecord " + child_id +
                                        ": death_month outside 0..59");
        }
        if (*death_month >= months_observed) {
            throw std::invalid_argument("BirthRecord " + child_id +
                                        ": death_month at or beyond censoring horizon");
        }
    } else if (death_month.has_value()) {
        throw std::invalid_argument("BirthRecord " + child_id +
                                    ": death_month present but died=false");
    }
}

std::vector<PersonMonth> expand_birth_history(const BirthRecord& rec) {
    rec.validate();
    int horizon = rec.months_observed;
    if (rec.died) horizon = *rec.death_month + 1;

    std::vector<PersonMonth> out;
    out.reserve(static_cast<size_t>(horizon));
    for (int m = 0; m < horizon; ++m) {
        PersonMonth pm;
        pm.child_id = rec.child_id;
        pm.month = m;
        pm.age_band = age_band_of_month(m);
        pm.year = rec.birth_year + m / 12;
        pm.cluster_id = rec.cluster_id;
        pm.survey_id = rec.survey_id;
        pm.outcome = (rec.died && m == *rec.death_month) ? 1 : 0;
        out.push_back(std::move(pm));
    }
    return out;
}

void HazardVector::validate() const {
    for (double qa : q) {
        if (!(qa >= 0.0 && qa <= 1.0)) {
            throw std::invalid_argument("HazardVector: hazard outside [0,1]");
        }
    }
}

double u5mr_from_hazards(const HazardVector& h) {
    h.validate();
    double surv = 1.0;
    for (int a = 0; a < kNumAgeBands; ++a) {
        surv *= std::pow(1.0 - h.q[static_cast<size_t>(a)],
                         kBandMonthSpan[static_cast<size_t>(a)]);
    }
    return 1.0 - surv;
}

double logit(double p) {
    if (!(p > 0.0 && p < 1.0)) {
        throw std::domain_error("logit: argument outside (0,1)");
    }
    return std::log(p / (1.0 - p));
}

double expit(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace u5mr::hazard
