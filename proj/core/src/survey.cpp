#include "u5mr/survey.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "u5mr/csv.hpp"

namespace u5mr::survey {

void SurveyDataset::validate() const {
    std::set<std::string> ids;
    for (const auto& c : clusters) {
        if (!(c.weight > 0.0)) {
            throw std::invalid_argument("SurveyDataset: cluster " + c.cluster_id +
                                        " has non-positive weight");
        }
        if (!ids.insert(c.cluster_id).second) {
            throw std::invalid_argument("SurveyDataset: duplicate cluster id " + c.cluster_id);
        }
    }
    for (const auto& b : births) {
        if (ids.find(b.cluster_id) == ids.end()) {
            throw std::invalid_argument("SurveyDataset: birth record " + b.child_id +
                                        " references unknown cluster " + b.cluster_id);
        }
    }
}

const Cluster& SurveyDataset::cluster(const std::string& cluster_id) const {
    for (const auto& c : clusters) {
        if (c.cluster_id == cluster_id) return c;
    }
    throw std::invalid_argument("SurveyDataset: unknown cluster " + cluster_id);
}

std::map<std::string, size_t> SurveyDataset::cluster_index() const {
    std::map<std::string, size_t> idx;
    for (size_t i = 0; i < clusters.size(); ++i) idx[clusters[i].cluster_id] = i;
    return idx;
}

std::string Period::label() const {
    return std::to_string(start_year) + "-" + std::to_string(end_year);
}

namespace {

struct BandTally {
    std::array<double, hazard::kNumAgeBands> w_deaths{};
    std::array<double, hazard::kNumAgeBands> w_months{};
    long months = 0;

    void add(const BandTally& o) {
        for (int a = 0; a < hazard::kNumAgeBands; ++a) {
            w_deaths[static_cast<size_t>(a)] += o.w_deaths[static_cast<size_t>(a)];
            w_months[static_cast<size_t>(a)] += o.w_months[static_cast<size_t>(a)];
        }
        months += o.months;
    }
};

// Per-cluster weighted person-month tallies restricted to the area-period.
std::map<std::string, BandTally> cluster_tallies(const SurveyDataset& data,
                                                 const AreaAssignment& areas,
                                                 const std::string& area_id,
                                                 const Period& period) {
    auto idx = data.cluster_index();
    std::map<std::string, BandTally> tallies;
    for (const auto& rec : data.births) {
        auto area_it = areas.find(rec.cluster_id);
        if (area_it == areas.end() || area_it->second != area_id) continue;
        const Cluster& cl = data.clusters[idx.at(rec.cluster_id)];
        for (const auto& pm : hazard::expand_birth_history(rec)) {
            if (!period.contains(pm.year)) continue;
            auto& t = tallies[rec.cluster_id];
            size_t a = static_cast<size_t>(pm.age_band - 1);
            t.w_months[a] += cl.weight;
            t.w_deaths[a] += cl.weight * pm.outcome;
            t.months += 1;
        }
    }
    return tallies;
}

struct EstimateValue {
    double u5mr = 0.0;
    bool degenerate = false;
    long months = 0;
};

EstimateValue estimate_from_tally(const BandTally& total) {
    hazard::HazardVector h;
    bool any_death = false;
    for (int a = 0; a < hazard::kNumAgeBands; ++a) {
        size_t i = static_cast<size_t>(a);
        h.q[i] = total.w_months[i] > 0.0 ? total.w_deaths[i] / total.w_months[i] : 0.0;
        if (total.w_deaths[i] > 0.0) any_death = true;
    }
    EstimateValue ev;
    ev.u5mr = hazard::u5mr_from_hazards(h);
    ev.degenerate = !any_death;
    ev.months = total.months;
    return ev;
}

// Logit with a half-observation continuity clamp so jackknife replicates with
// degenerate estimates remain finite.
double clamped_logit(const EstimateValue& ev) {
    double lo = 0.5 / static_cast<double>(ev.months + 1);
    double p = std::clamp(ev.u5mr, lo, 1.0 - lo);
    return hazard::logit(p);
}

}  // namespace

DirectEstimate direct_u5mr(const SurveyDataset& data, const AreaAssignment& areas,
                           const std::string& area_id, const Period& period) {
    auto tallies = cluster_tallies(data, areas, area_id, period);
    BandTally total;
    for (const auto& [id, t] : tallies) total.add(t);
    if (total.months == 0) {
        throw std::invalid_argument("direct_u5mr: no person-months for area '" + area_id +
                                    "' in period " + period.label());
    }
    auto ev = estimate_from_tally(total);
    DirectEstimate est;
    est.area_id = area_id;
    est.period = period.label();
    est.u5mr = ev.u5mr;
    est.degenerate = ev.degenerate;
    if (ev.u5mr > 0.0 && ev.u5mr < 1.0) {
        est.logit_u5mr = hazard::logit(ev.u5mr);
    }
    return est;
}

double jackknife_variance(const SurveyDataset& data, const AreaAssignment& areas,
                          const std::string& area_id, const Period& period) {
    auto tallies = cluster_tallies(data, areas, area_id, period);
    if (tallies.size() < 2) {
        throw std::invalid_argument("jackknife_variance: variance not estimable with " +
                                    std::to_string(tallies.size()) + " contributing cluster(s)");
    }
    auto idx = data.cluster_index();
    std::map<std::string, std::vector<std::string>> strata;
    for (const auto& [cid, t] : tallies) {
        strata[data.clusters[idx.at(cid)].stratum_id].push_back(cid);
    }
    BandTally total;
    for (const auto& [cid, t] : tallies) total.add(t);

    double var = 0.0;
    for (const auto& [stratum, members] : strata) {
        size_t nh = members.size();
        if (nh < 2) continue;
        std::vector<double> replicates;
        replicates.reserve(nh);
        for (const auto& deleted : members) {
            // Remaining clusters in the stratum are reweighted by nh/(nh-1).
            BandTally rep;
            for (const auto& [cid, t] : tallies) {
                if (cid == deleted) continue;
                BandTally scaled = t;
                if (data.clusters[idx.at(cid)].stratum_id == stratum) {
                    double f = static_cast<double>(nh) / static_cast<double>(nh - 1);
                    for (auto& v : scaled.w_deaths) v *= f;
                    for (auto& v : scaled.w_months) v *= f;
                }
                rep.add(scaled);
            }
            replicates.push_back(clamped_logit(estimate_from_tally(rep)));
        }
        double mean = 0.0;
        for (double r : replicates) mean += r;
        mean /= static_cast<double>(nh);
        double ss = 0.0;
        for (double r : replicates) ss += (r - mean) * (r - mean);
        var += (static_cast<double>(nh - 1) / static_cast<double>(nh)) * ss;
    }
    return var;
}

DirectEstimate direct_u5mr_with_variance(const SurveyDataset& data,
                                         const AreaAssignment& areas,
                                         const std::string& area_id, const Period& period) {
    DirectEstimate est = direct_u5mr(data, areas, area_id, period);
    if (!est.degenerate) {
        try {
            est.logit_variance = jackknife_variance(data, areas, area_id, period);
        } catch (const std::invalid_argument&) {
            // single contributing cluster; leave the variance absent
        }
    }
    return est;
}

std::pair<SurveyDataset, SurveyDataset> holdout_split(const SurveyDataset& data,
                                                      double test_fraction,
                                                      std::uint64_t seed) {
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
        throw std::invalid_argument("holdout_split: fraction must be in (0,1)");
    }
    if (data.clusters.empty()) {
        throw std::invalid_argument("holdout_split: empty dataset");
    }
    std::map<std::string, std::vector<size_t>> strata;
    for (size_t i = 0; i < data.clusters.size(); ++i) {
        strata[data.clusters[i].stratum_id].push_back(i);
    }
    std::set<std::string> test_ids;
    for (auto& [stratum, members] : strata) {
        std::sort(members.begin(), members.end(), [&](size_t a, size_t b) {
            return data.clusters[a].cluster_id < data.clusters[b].cluster_id;
        });
        std::uint64_t h = seed;
        for (unsigned char c : stratum) h = (h ^ c) * 1099511628211ULL;
        std::mt19937_64 rng(h);
        std::shuffle(members.begin(), members.end(), rng);
        size_t n = members.size();
        size_t n_test = static_cast<size_t>(
            std::llround(test_fraction * static_cast<double>(n)));
        if (n >= 2) n_test = std::clamp<size_t>(n_test, 1, n - 1);
        else n_test = 0;  // a singleton stratum stays in the training half
        for (size_t i = 0; i < n_test; ++i) {
            test_ids.insert(data.clusters[members[i]].cluster_id);
        }
    }
    SurveyDataset train, test;
    for (const auto& c : data.clusters) {
        (test_ids.count(c.cluster_id) ? test : train).clusters.push_back(c);
    }
    for (const auto& b : data.births) {
        (test_ids.count(b.cluster_id) ? test : train).births.push_back(b);
    }
    return {std::move(train), std::move(test)};
}

// -- File formats -----------------------------------------------------------

std::vector<Cluster> load_clusters(const std::filesystem::path& path) {
    auto t = csv::read_file(path);
    size_t c_id = t.col("cluster_id"), c_sv = t.col("survey_id"), c_st = t.col("stratum_id");
    size_t c_lon = t.col("lon"), c_lat = t.col("lat"), c_w = t.col("weight");
    bool has_prov = false;
    size_t c_prov = 0;
    for (size_t i = 0; i < t.header.size(); ++i) {
        if (t.header[i] == "province") {
            has_prov = true;
            c_prov = i;
        }
    }
    std::vector<Cluster> out;
    out.reserve(t.rows.size());
    for (const auto& row : t.rows) {
        Cluster c;
        c.cluster_id = row[c_id];
        c.survey_id = row[c_sv];
        c.stratum_id = row[c_st];
        c.lon = std::stod(row[c_lon]);
        c.lat = std::stod(row[c_lat]);
        c.weight = std::stod(row[c_w]);
        if (has_prov) c.province = row[c_prov];
        out.push_back(std::move(c));
    }
    return out;
}

void save_clusters(const std::filesystem::path& path, const std::vector<Cluster>& clusters) {
    csv::Table t;
    t.header = {"cluster_id", "survey_id", "stratum_id", "lon", "lat", "weight", "province"};
    for (const auto& c : clusters) {
        std::ostringstream lon, lat, w;
        lon.precision(17);
        lat.precision(17);
        w.precision(17);
        lon << c.lon;
        lat << c.lat;
        w << c.weight;
        t.rows.push_back({c.cluster_id, c.survey_id, c.stratum_id, lon.str(), lat.str(),
                          w.str(), c.province});
    }
    csv::write_file(path, t);
}

std::vector<hazard::BirthRecord> load_births(const std::filesystem::path& path) {
    auto t = csv::read_file(path);
    size_t c_id = t.col("child_id"), c_cl = t.col("cluster_id"), c_sv = t.col("survey_id");
    size_t c_by = t.col("birth_year"), c_bm = t.col("birth_month");
    size_t c_d = t.col("died"), c_dm = t.col("death_month");
    size_t c_iy = t.col("interview_year"), c_im = t.col("interview_month");
    std::vector<hazard::BirthRecord> out;
    out.reserve(t.rows.size());
    for (const auto& row : t.rows) {
        hazard::BirthRecord b;
        b.child_id = row[c_id];
        b.cluster_id = row[c_cl];
        b.survey_id = row[c_sv];
        b.birth_year = std::stoi(row[c_by]);
        b.birth_month = std::stoi(row[c_bm]);
        b.died = (row[c_d] == "1" || row[c_d] == "true");
        if (!row[c_dm].empty()) b.death_month = std::stoi(row[c_dm]);
        int iy = std::stoi(row[c_iy]);
        int im = std::stoi(row[c_im]);
        int observed = 12 * (iy - b.birth_year) + (im - b.birth_month);
        if (observed < 0) {
            throw std::invalid_argument("load_births: child " + b.child_id +
                                        " born after the interview date");
        }
        b.months_observed = std::min(observed, hazard::kMaxMonths);
        b.validate();
        out.push_back(std::move(b));
    }
    return out;
}

void save_births(const std::filesystem::path& path,
                 const std::vector<hazard::BirthRecord>& births,
                 const std::map<std::string, std::pair<int, int>>& interview_dates) {
    csv::Table t;
    t.header = {"child_id", "cluster_id", "survey_id",      "birth_year",     "birth_month",
                "died",     "death_month", "interview_year", "interview_month"};
    for (const auto& b : births) {
        auto it = interview_dates.find(b.survey_id);
        if (it == interview_dates.end()) {
            throw std::invalid_argument("save_births: no interview date for survey " +
                                        b.survey_id);
        }
        t.rows.push_back({b.child_id, b.cluster_id, b.survey_id, std::to_string(b.birth_year),
                          std::to_string(b.birth_month), b.died ? "1" : "0",
                          b.death_month ? std::to_string(*b.death_month) : "",
                          std::to_string(it->second.first),
                          std::to_string(it->second.second)});
    }
    csv::write_file(path, t);
}

void save_direct_estimates(const std::filesystem::path& path,
                           const std::vector<DirectEstimate>& estimates) {
    csv::Table t;
    t.header = {"area_id", "period", "u5mr", "logit_u5mr", "logit_variance", "flag"};
    for (const auto& e : estimates) {
        std::ostringstream u, l, v;
        u.precision(17);
        l.precision(17);
        v.precision(17);
        u << e.u5mr;
        if (e.logit_u5mr) l << *e.logit_u5mr;
        if (e.logit_variance) v << *e.logit_variance;
        t.rows.push_back({e.area_id, e.period, u.str(), l.str(), v.str(),
                          e.degenerate ? "degenerate: logit undefined" : "ok"});
    }
    csv::write_file(path, t);
}

std::vector<DirectEstimate> load_direct_estimates(const std::filesystem::path& path) {
    auto t = csv::read_file(path);
    size_t c_a = t.col("area_id"), c_p = t.col("period"), c_u = t.col("u5mr");
    size_t c_l = t.col("logit_u5mr"), c_v = t.col("logit_variance"), c_f = t.col("flag");
    std::vector<DirectEstimate> out;
    for (const auto& row : t.rows) {
        DirectEstimate e;
        e.area_id = row[c_a];
        e.period = row[c_p];
        e.u5mr = std::stod(row[c_u]);
        if (!row[c_l].empty()) e.logit_u5mr = std::stod(row[c_l]);
        if (!row[c_v].empty()) e.logit_variance = std::stod(row[c_v]);
        e.degenerate = row[c_f] != "ok";
        out.push_back(std::move(e));
    }
    return out;
}

}  // namespace u5mr::survey
