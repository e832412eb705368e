#include "u5mr/evaluate.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "u5mr/csv.hpp"
#include "u5mr/hazard.hpp"

namespace u5mr::evaluate {

namespace {

std::string format_double(double v) {
    std::ostringstream os;
    os.precision(10);
    os << v;
    return os.str();
}

}  // namespace

EstimateTable direct_estimate_table(const std::vector<survey::DirectEstimate>& estimates) {
    EstimateTable table;
    for (const auto& e : estimates) {
        if (e.degenerate || !e.logit_u5mr.has_value()) continue;
        AreaPeriodEstimate ape;
        ape.mean = e.u5mr;
        if (e.logit_variance.has_value()) {
            // Delta method from the logit scale: var(p) = var(logit) (p(1-p))^2.
            double p = e.u5mr;
            ape.variance = *e.logit_variance * p * p * (1.0 - p) * (1.0 - p);
        }
        table[{e.area_id, e.period}] = ape;
    }
    return table;
}

EstimateTable posterior_estimate_table(const std::vector<aggregate::CountySeries>& series,
                                       const std::vector<survey::Period>& periods) {
    EstimateTable table;
    for (const auto& cs : series) {
        for (const auto& period : periods) {
            std::vector<int> cols;
            for (int y = period.start_year; y <= period.end_year; ++y) {
                for (size_t i = 0; i < cs.years.size(); ++i) {
                    if (cs.years[i] == y) cols.push_back(static_cast<int>(i));
                }
            }
            if (cols.empty()) continue;
            const int S = static_cast<int>(cs.samples.rows());
            double mean = 0.0, m2 = 0.0;
            for (int s = 0; s < S; ++s) {
                double v = 0.0;
                for (int c : cols) v += cs.samples(s, c);
                v /= static_cast<double>(cols.size());
                double d = v - mean;
                mean += d / (s + 1);
                m2 += d * (v - mean);
            }
            AreaPeriodEstimate ape;
            ape.mean = mean;
            ape.variance = S > 1 ? m2 / (S - 1) : 0.0;
            table[{cs.region_id, period.label()}] = ape;
        }
    }
    return table;
}

std::vector<survey::Period> default_periods() {
    return {{1990, 1994}, {1995, 1999}, {2000, 2004}, {2005, 2009}, {2010, 2014}};
}

const PeriodScore& ComparisonReport::score(const std::string& model,
                                           const std::string& period) const {
    for (const auto& ms : models) {
        if (ms.model != model) continue;
        for (const auto& ps : ms.periods) {
            if (ps.period == period) return ps;
        }
    }
    throw std::out_of_range("ComparisonReport: no score for " + model + " / " + period);
}

ComparisonReport holdout_mse(const std::map<std::string, EstimateTable>& estimates,
                             const std::vector<survey::DirectEstimate>& holdout,
                             const std::vector<survey::Period>& periods) {
    ComparisonReport report;
    for (const auto& [model_name, table] : estimates) {
        ModelScores ms;
        ms.model = model_name;
        for (const auto& period : periods) {
            PeriodScore ps;
            ps.period = period.label();
            for (const auto& y : holdout) {
                if (y.period != ps.period) continue;
                if (y.degenerate || !y.logit_u5mr.has_value()) {
                    ++report.excluded;
                    report.warnings.push_back("excluded degenerate holdout cell " + y.area_id +
                                              " " + y.period + " for " + model_name);
                    continue;
                }
                auto it = table.find({y.area_id, y.period});
                if (it == table.end()) {
                    ++report.excluded;
                    report.warnings.push_back("no " + model_name + " estimate for holdout cell " +
                                              y.area_id + " " + y.period);
                    continue;
                }
                double bias = it->second.mean - y.u5mr;
                ps.bias2 += bias * bias;
                ps.variance += it->second.variance;
                ++ps.n_areas;
            }
            if (ps.n_areas > 0) {
                ps.bias2 /= ps.n_areas;
                ps.variance /= ps.n_areas;
                ps.mse = ps.bias2 + ps.variance;
            }
            ms.periods.push_back(ps);
        }
        report.models.push_back(std::move(ms));
    }
    return report;
}

void ComparisonReport::save_csv(const std::filesystem::path& path) const {
    csv::Table t;
    t.header = {"model", "period", "mse", "bias2", "variance", "n_areas", "config_digest"};
    for (const auto& ms : models) {
        for (const auto& ps : ms.periods) {
            t.rows.push_back({ms.model, ps.period, format_double(ps.mse),
                              format_double(ps.bias2), format_double(ps.variance),
                              std::to_string(ps.n_areas), config_digest});
        }
    }
    csv::write_file(path, t);
}

void ComparisonReport::save_long_csv(const std::filesystem::path& path) const {
    csv::Table t;
    t.header = {"model", "period", "component", "value"};
    for (const auto& ms : models) {
        for (const auto& ps : ms.periods) {
            t.rows.push_back({ms.model, ps.period, "bias2", format_double(ps.bias2)});
            t.rows.push_back({ms.model, ps.period, "variance", format_double(ps.variance)});
            t.rows.push_back({ms.model, ps.period, "mse", format_double(ps.mse)});
        }
    }
    csv::write_file(path, t);
}

void ComparisonReport::save_text(const std::filesystem::path& path) const {
    std::ostringstream os;
    os << "Holdout comparison (split seed " << split_seed << ", config digest "
       << config_digest << ")\n\n";
    for (const auto& ms : models) {
        os << ms.model << "\n";
        for (const auto& ps : ms.periods) {
            os << "  " << ps.period << ": mse=" << format_double(ps.mse)
               << " bias2=" << format_double(ps.bias2)
               << " variance=" << format_double(ps.variance) << " n=" << ps.n_areas << "\n";
        }
    }
    os << "\nexcluded cells: " << excluded << "\n";
    for (const auto& w : warnings) os << "warning: " << w << "\n";
    csv::write_text_atomic(path, os.str());
}

InformationCriteria information_criteria(const model::AssembledModel& m,
                                         const model::FitResult& fit) {
    const int S = static_cast<int>(fit.samples.cols());
    if (S < 100) {
        throw std::invalid_argument("information_criteria: needs at least 100 samples, got " +
                                    std::to_string(S));
    }
    const long n_obs = static_cast<long>(m.cells().size());
    InformationCriteria out;
    out.n_observations = n_obs;
    out.n_samples = S;

    // Streaming per-observation accumulators over samples: log-sum-exp of the
    // log-likelihood (WAIC), of its negative (CPO), and Welford moments.
    gmrf::Vector max_ll = gmrf::Vector::Constant(n_obs, -std::numeric_limits<double>::infinity());
    gmrf::Vector max_nll = max_ll;
    gmrf::Vector sum_exp_ll = gmrf::Vector::Zero(n_obs);
    gmrf::Vector sum_exp_nll = gmrf::Vector::Zero(n_obs);
    gmrf::Vector max_exp_nll = gmrf::Vector::Zero(n_obs);  // largest single term, rescaled
    gmrf::Vector mean_ll = gmrf::Vector::Zero(n_obs);
    gmrf::Vector m2_ll = gmrf::Vector::Zero(n_obs);
    double mean_deviance = 0.0;
    gmrf::Vector sample_mean = gmrf::Vector::Zero(fit.samples.rows());

    for (int s = 0; s < S; ++s) {
        gmrf::Vector ll = m.cell_log_likelihood(fit.samples.col(s));
        sample_mean += fit.samples.col(s);
        mean_deviance += -2.0 * ll.sum();
        for (long i = 0; i < n_obs; ++i) {
            double v = ll[i];
            if (v > max_ll[i]) {
                sum_exp_ll[i] = sum_exp_ll[i] * std::exp(max_ll[i] - v) + 1.0;
                max_ll[i] = v;
            } else {
                sum_exp_ll[i] += std::exp(v - max_ll[i]);
            }
            double nv = -v;
            if (nv > max_nll[i]) {
                double scale = std::exp(max_nll[i] - nv);
                sum_exp_nll[i] = sum_exp_nll[i] * scale + 1.0;
                max_exp_nll[i] = std::max(max_exp_nll[i] * scale, 1.0);
                max_nll[i] = nv;
            } else {
                double term = std::exp(nv - max_nll[i]);
                sum_exp_nll[i] += term;
                max_exp_nll[i] = std::max(max_exp_nll[i], term);
            }
            double d = v - mean_ll[i];
            mean_ll[i] += d / (s + 1);
            m2_ll[i] += d * (v - mean_ll[i]);
        }
    }
    mean_deviance /= S;
    sample_mean /= static_cast<double>(S);

    double deviance_at_mean = -2.0 * m.cell_log_likelihood(sample_mean).sum();
    out.p_dic = mean_deviance - deviance_at_mean;
    out.dic = deviance_at_mean + 2.0 * out.p_dic;

    double lppd = 0.0;
    double p_waic = 0.0;
    for (long i = 0; i < n_obs; ++i) {
        lppd += max_ll[i] + std::log(sum_exp_ll[i]) - std::log(static_cast<double>(S));
        p_waic += m2_ll[i] / (S - 1);
        // log CPO = -log mean exp(-ll)
        out.log_cpo_sum -= max_nll[i] + std::log(sum_exp_nll[i]) -
                           std::log(static_cast<double>(S));
        if (max_exp_nll[i] / sum_exp_nll[i] > 0.5) ++out.cpo_unstable;
    }
    out.p_waic = p_waic;
    out.waic = -2.0 * (lppd - p_waic);
    return out;
}

int SearchResult::rank_of(std::uint32_t mask) const {
    for (size_t i = 0; i < ranked.size(); ++i) {
        if (ranked[i].mask == mask) return static_cast<int>(i);
    }
    throw std::out_of_range("SearchResult: subset not present");
}

SearchResult covariate_search(const model::ModelSpec& base,
                              const survey::SurveyDataset& data,
                              const std::vector<model::Covariate>& candidates,
                              model::Variant variant, const model::FitOptions& fit_options,
                              int workers) {
    if (candidates.size() > 12) {
        throw std::invalid_argument(
            "covariate_search: " + std::to_string(candidates.size()) +
            " candidates exceed the exhaustive budget of 12; reduce the candidate set");
    }
    if (candidates.empty()) {
        throw std::invalid_argument("covariate_search: no candidates");
    }
    if (variant != model::Variant::PeriodM3 && variant != model::Variant::PeriodM4) {
        throw std::invalid_argument("covariate_search: variant must include covariates");
    }
    const std::uint32_t n_subsets = (1u << candidates.size()) - 1u;
    std::vector<CandidateScore> scores(n_subsets);
    std::atomic<std::uint32_t> next{1};
    std::mutex error_mutex;
    std::string first_error;

    auto worker = [&]() {
        for (;;) {
            std::uint32_t mask = next.fetch_add(1);
            if (mask > n_subsets) return;
            try {
                std::vector<model::Covariate> subset;
                CandidateScore cs;
                cs.mask = mask;
                for (size_t i = 0; i < candidates.size(); ++i) {
                    if (mask & (1u << i)) {
                        subset.push_back(candidates[i]);
                        cs.names.push_back(candidates[i].name);
                    }
                }
                model::ModelSpec spec = model::covariate_models(base, variant, subset);
                model::AssembledModel m(spec, data);
                model::FitResult fit = model::fit(m, fit_options);
                InformationCriteria ic = information_criteria(m, fit);
                cs.dic = ic.dic;
                cs.waic = ic.waic;
                cs.neg_log_cpo = -ic.log_cpo_sum;
                cs.log_marginal = fit.log_marginal;
                scores[mask - 1] = std::move(cs);
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (first_error.empty()) {
                    first_error = "covariate_search: subset " + std::to_string(mask) +
                                  " failed: " + e.what();
                }
            }
        }
    };

    int n_workers = std::max(1, std::min<int>(workers, static_cast<int>(n_subsets)));
    if (n_workers == 1) {
        worker();
    } else {
        std::vector<std::thread> threads;
        for (int i = 0; i < n_workers; ++i) threads.emplace_back(worker);
        for (auto& t : threads) t.join();
    }
    if (!first_error.empty()) throw std::runtime_error(first_error);

    SearchResult result;
    result.ranked = std::move(scores);
    auto by = [&](auto key) {
        std::uint32_t best = result.ranked.front().mask;
        double best_val = key(result.ranked.front());
        for (const auto& cs : result.ranked) {
            if (key(cs) < best_val) {
                best_val = key(cs);
                best = cs.mask;
            }
        }
        return best;
    };
    std::uint32_t top_dic = by([](const CandidateScore& c) { return c.dic; });
    std::uint32_t top_waic = by([](const CandidateScore& c) { return c.waic; });
    std::uint32_t top_cpo = by([](const CandidateScore& c) { return c.neg_log_cpo; });
    result.criteria_agree = top_dic == top_waic && top_waic == top_cpo;
    std::stable_sort(result.ranked.begin(), result.ranked.end(),
                     [](const CandidateScore& a, const CandidateScore& b) {
                         return a.waic < b.waic;
                     });
    return result;
}

void save_search_result(const std::filesystem::path& path, const SearchResult& result) {
    csv::Table t;
    t.header = {"rank", "covariates", "dic", "waic", "neg_log_cpo", "log_marginal"};
    for (size_t i = 0; i < result.ranked.size(); ++i) {
        const auto& cs = result.ranked[i];
        std::string names;
        for (const auto& n : cs.names) {
            if (!names.empty()) names += "+";
            names += n;
        }
        t.rows.push_back({std::to_string(i), names, format_double(cs.dic),
                          format_double(cs.waic), format_double(cs.neg_log_cpo),
                          format_double(cs.log_marginal)});
    }
    csv::write_file(path, t);
}

}  // namespace u5mr::evaluate
