#include "u5mr/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

#include "u5mr/csv.hpp"
#include "u5mr/hazard.hpp"

namespace u5mr::model {

namespace {

constexpr double kFixedEffectPrecision = 1e-3;  // weak N(0, ~31.6^2) on beta, delta
constexpr double kCovariatePrecision = 1.0;     // N(0,1) on standardized covariate effects
constexpr double kTrendRidge = 1e-6;  // makes the RW1/RW2 blocks proper; the
                                      // unpenalized polynomial directions keep
                                      // variance ~1e6 and stay effectively flat

double stable_log1pexp(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace

void BiasOffsetTable::set(const std::string& province, const std::string& survey, int year,
                          double ratio) {
    if (!(ratio >= 1.0)) {
        throw std::invalid_argument("BiasOffsetTable: ratio " + std::to_string(ratio) +
                                    " for (" + province + "," + survey + "," +
                                    std::to_string(year) + ") must be >= 1");
    }
    ratios_[{province, survey, year}] = ratio;
}

double BiasOffsetTable::log_offset(const std::string& province, const std::string& survey,
                                   int year) const {
    if (ratios_.empty()) return 0.0;
    auto it = ratios_.find({province, survey, year});
    if (it == ratios_.end()) {
        ++missing_;
        return 0.0;
    }
    return std::log(it->second);
}

BiasOffsetTable BiasOffsetTable::load(const std::filesystem::path& path) {
    auto t = csv::read_file(path);
    size_t c_p = t.col("province"), c_s = t.col("survey_id"), c_y = t.col("year");
    size_t c_r = t.col("ratio");
    BiasOffsetTable out;
    for (const auto& row : t.rows) {
        out.set(row[c_p], row[c_s], std::stoi(row[c_y]), std::stod(row[c_r]));
    }
    return out;
}

void BiasOffsetTable::save(const std::filesystem::path& path) const {
    csv::Table t;
    t.header = {"province", "survey_id", "year", "ratio"};
    for (const auto& [key, ratio] : ratios_) {
        std::ostringstream r;
        r.precision(17);
        r << ratio;
        t.rows.push_back({std::get<0>(key), std::get<1>(key), std::to_string(std::get<2>(key)),
                          r.str()});
    }
    csv::write_file(path, t);
}

Variant variant_from_string(const std::string& name) {
    if (name == "yearly" || name == "M0") return Variant::Yearly;
    if (name == "M2") return Variant::PeriodM2;
    if (name == "M3") return Variant::PeriodM3;
    if (name == "M4") return Variant::PeriodM4;
    throw std::invalid_argument("unknown model variant '" + name + "'");
}

std::string to_string(Variant v) {
    switch (v) {
        case Variant::Yearly: return "yearly";
        case Variant::PeriodM2: return "M2";
        case Variant::PeriodM3: return "M3";
        case Variant::PeriodM4: return "M4";
    }
    return "?";
}

void ModelSpec::validate() const {
    if (mesh.ncols < 3 || mesh.nrows < 3) {
        throw std::invalid_argument("ModelSpec: mesh must be at least 3x3");
    }
    if (density.size() != mesh.size()) {
        throw std::invalid_argument("ModelSpec: density/mesh size mismatch");
    }
    if (variant == Variant::Yearly) {
        if (year_end < year_begin) throw std::invalid_argument("ModelSpec: empty year range");
        if (year_begin < knots.year0 || year_end > knots.last_year()) {
            throw std::invalid_argument("ModelSpec: years extend beyond the knot hull");
        }
        if (!covariates.empty()) {
            throw std::invalid_argument("ModelSpec: covariates need a period variant");
        }
    } else {
        if (periods.empty()) throw std::invalid_argument("ModelSpec: period variant without periods");
        bool wants_cov = variant == Variant::PeriodM3 || variant == Variant::PeriodM4;
        if (wants_cov && covariates.empty()) {
            throw std::invalid_argument("ModelSpec: " + to_string(variant) +
                                        " requires covariates");
        }
        if (!wants_cov && !covariates.empty()) {
            throw std::invalid_argument("ModelSpec: " + to_string(variant) +
                                        " does not take covariates");
        }
        for (const auto& cov : covariates) {
            if (cov.grids.size() != 1 && cov.grids.size() != periods.size()) {
                throw std::invalid_argument("ModelSpec: covariate " + cov.name +
                                            " needs 1 grid or one per period");
            }
        }
    }
}

ModelSpec covariate_models(const ModelSpec& base, Variant variant,
                           const std::vector<Covariate>& covariates) {
    if (variant == Variant::Yearly) {
        throw std::invalid_argument("covariate_models: variant must be M2, M3 or M4");
    }
    ModelSpec spec = base;
    spec.variant = variant;
    if (spec.periods.empty()) {
        spec.periods = {{2000, 2004}, {2005, 2009}, {2010, 2014}};
    }
    spec.covariates =
        (variant == Variant::PeriodM2) ? std::vector<Covariate>{} : covariates;
    spec.validate();
    return spec;
}

int trend_of_band(int band) {
    if (band < 1 || band > hazard::kNumAgeBands) {
        throw std::domain_error("trend_of_band: band outside 1..6");
    }
    if (band == 1) return 0;
    if (band == 2) return 1;
    return 2;
}

// -- AssembledModel ---------------------------------------------------------

AssembledModel::AssembledModel(ModelSpec spec, const survey::SurveyDataset& data)
    : spec_(std::move(spec)) {
    spec_.validate();
    data.validate();

    clusters_ = data.clusters;
    std::sort(clusters_.begin(), clusters_.end(),
              [](const survey::Cluster& a, const survey::Cluster& b) {
                  return a.cluster_id < b.cluster_id;
              });
    std::set<std::string> surveys;
    for (const auto& c : clusters_) surveys.insert(c.survey_id);
    survey_ids_.assign(surveys.begin(), surveys.end());

    const bool yearly = spec_.variant == Variant::Yearly;
    const bool has_field = yearly || spec_.variant == Variant::PeriodM2 ||
                           spec_.variant == Variant::PeriodM4;
    const bool has_cov = spec_.variant == Variant::PeriodM3 ||
                         spec_.variant == Variant::PeriodM4;
    const int T = spec_.num_years();

    LatentLayout& L = layout_;
    int pos = 0;
    L.beta0 = pos;
    pos += hazard::kNumAgeBands;
    L.delta = pos;
    pos += 1;
    if (yearly) {
        L.phi0 = pos;
        L.n_phi_rows = T;
        pos += 3 * T;
    } else {
        L.gamma0 = pos;
        L.n_periods = static_cast<int>(spec_.periods.size());
        pos += L.n_periods;
    }
    if (has_field) {
        L.st0 = pos;
        L.n_cells = spec_.mesh.size();
        L.n_knots = yearly ? spec_.knots.num_knots : 1;
        pos += L.n_knots * L.n_cells;
    }
    L.eta0 = pos;
    L.n_clusters = static_cast<int>(clusters_.size());
    pos += L.n_clusters;
    L.ups0 = pos;
    L.n_surveys = static_cast<int>(survey_ids_.size());
    pos += L.n_surveys;
    if (yearly) {
        L.eps0 = pos;
        L.n_years = T;
        pos += T;
    }
    if (has_cov) {
        L.cov0 = pos;
        L.n_cov = static_cast<int>(spec_.covariates.size());
        pos += L.n_cov;
    }
    L.n = pos;

    // Covariate values at cluster locations, with gap detection and z-scoring.
    std::vector<std::vector<double>> cov_values;  // [cov][cluster * n_periods + p]
    if (has_cov) {
        std::vector<std::string> offenders;
        cov_values.resize(spec_.covariates.size());
        for (size_t c = 0; c < spec_.covariates.size(); ++c) {
            const auto& cov = spec_.covariates[c];
            cov_values[c].resize(clusters_.size() * spec_.periods.size());
            for (size_t j = 0; j < clusters_.size(); ++j) {
                for (size_t p = 0; p < spec_.periods.size(); ++p) {
                    const auto& grid = cov.grids[cov.grids.size() == 1 ? 0 : p];
                    int cell = grid.cell_of(clusters_[j].lon, clusters_[j].lat);
                    double v = cell >= 0 ? grid.values[static_cast<size_t>(cell)] : grid.nodata;
                    if (cell < 0 || v == grid.nodata) {
                        offenders.push_back(cov.name + "@" + clusters_[j].cluster_id);
                        v = 0.0;
                    }
                    cov_values[c][j * spec_.periods.size() + p] = v;
                }
            }
        }
        if (!offenders.empty()) {
            std::string msg = "AssembledModel: covariate raster gaps at cluster locations:";
            for (const auto& o : offenders) msg += " " + o;
            throw std::invalid_argument(msg);
        }
        cov_scaling_.resize(spec_.covariates.size());
        for (size_t c = 0; c < spec_.covariates.size(); ++c) {
            double mean = 0.0;
            for (double v : cov_values[c]) mean += v;
            mean /= static_cast<double>(cov_values[c].size());
            double ss = 0.0;
            for (double v : cov_values[c]) ss += (v - mean) * (v - mean);
            double sd = std::sqrt(ss / static_cast<double>(cov_values[c].size()));
            cov_scaling_[c] = {mean, sd > 0.0 ? sd : 1.0};
            for (double& v : cov_values[c]) v = (v - cov_scaling_[c].mean) / cov_scaling_[c].sd;
        }
    }

    // Group person-months into binomial likelihood cells.
    std::map<std::string, size_t> cidx;
    for (size_t i = 0; i < clusters_.size(); ++i) cidx[clusters_[i].cluster_id] = i;
    auto period_of_year = [this](int year) -> int {
        for (size_t p = 0; p < spec_.periods.size(); ++p) {
            if (spec_.periods[p].contains(year)) return static_cast<int>(p);
        }
        return -1;
    };
    std::map<std::tuple<size_t, int, int>, std::pair<double, double>> groups;
    for (const auto& rec : data.births) {
        for (const auto& pm : hazard::expand_birth_history(rec)) {
            if (yearly) {
                if (pm.year < spec_.year_begin || pm.year > spec_.year_end) continue;
            } else if (period_of_year(pm.year) < 0) {
                continue;
            }
            auto& g = groups[{cidx.at(pm.cluster_id), pm.year, pm.age_band}];
            g.first += 1.0;
            g.second += pm.outcome;
        }
    }

    cells_.reserve(groups.size());
    std::vector<Eigen::Triplet<double>> trip;
    offsets_.resize(static_cast<Eigen::Index>(groups.size()));
    trials_.resize(static_cast<Eigen::Index>(groups.size()));
    deaths_.resize(static_cast<Eigen::Index>(groups.size()));
    log_binom_.resize(static_cast<Eigen::Index>(groups.size()));
    int row = 0;
    for (const auto& [key, counts] : groups) {
        auto [jc, year, band] = key;
        const survey::Cluster& cl = clusters_[jc];
        LikelihoodCell cell;
        cell.band = band;
        cell.year = year;
        cell.cluster_idx = jc;
        cell.trials = counts.first;
        cell.deaths = counts.second;
        int p_idx = yearly ? -1 : period_of_year(year);
        cell.design = design_row(jc, year, band, p_idx);
        if (has_cov) {
            for (size_t c = 0; c < spec_.covariates.size(); ++c) {
                cell.design.emplace_back(
                    L.cov0 + static_cast<int>(c),
                    cov_values[c][jc * spec_.periods.size() + static_cast<size_t>(p_idx)]);
            }
        }
        // Reported hazards run below the true ones by the bias ratio, so the
        // data-side predictor subtracts log(ratio); the latent field then
        // tracks the corrected level and predictions need no offset.
        cell.offset = -spec_.bias.log_offset(cl.province, cl.survey_id, year);
        for (const auto& [idx, val] : cell.design) trip.emplace_back(row, idx, val);
        offsets_[row] = cell.offset;
        trials_[row] = cell.trials;
        deaths_[row] = cell.deaths;
        log_binom_[row] = std::lgamma(cell.trials + 1.0) - std::lgamma(cell.deaths + 1.0) -
                          std::lgamma(cell.trials - cell.deaths + 1.0);
        cells_.push_back(std::move(cell));
        ++row;
    }
    bias_defaults_ = spec_.bias.missing_lookups();
    X_.resize(row, L.n);
    X_.setFromTriplets(trip.begin(), trip.end());
    X_.makeCompressed();

    // Constraints: sum-to-zero per temporal trend, population-weighted
    // integrate-to-zero per knot of the space-time block.
    std::vector<Vector> rows;
    if (yearly) {
        for (int trend = 0; trend < 3; ++trend) {
            Vector r = Vector::Zero(L.n);
            for (int t = 0; t < T; ++t) r[L.phi_index(trend, t)] = 1.0;
            rows.push_back(std::move(r));
        }
    } else {
        Vector r = Vector::Zero(L.n);
        for (int p = 0; p < L.n_periods; ++p) r[L.gamma0 + p] = 1.0;
        rows.push_back(std::move(r));
    }
    if (has_field) {
        auto pop = gmrf::population_constraints(spec_.mesh, spec_.density, L.n_knots);
        for (int h = 0; h < pop.count(); ++h) {
            Vector r = Vector::Zero(L.n);
            r.segment(L.st0, L.n_knots * L.n_cells) = pop.A.row(h).transpose();
            rows.push_back(std::move(r));
        }
    }
    constraints_.A.resize(static_cast<Eigen::Index>(rows.size()), L.n);
    for (size_t i = 0; i < rows.size(); ++i) constraints_.A.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
    constraints_.validate();
}

std::vector<std::pair<int, double>> AssembledModel::design_row(size_t cluster_idx, int year,
                                                               int band,
                                                               int period_idx) const {
    const LatentLayout& L = layout_;
    const survey::Cluster& cl = clusters_[cluster_idx];
    std::vector<std::pair<int, double>> row;
    row.emplace_back(L.beta0 + band - 1, 1.0);
    const std::string& s = cl.stratum_id;
    bool rural = s.size() >= spec_.rural_suffix.size() &&
                 s.compare(s.size() - spec_.rural_suffix.size(), spec_.rural_suffix.size(),
                           spec_.rural_suffix) == 0;
    if (rural) row.emplace_back(L.delta, 1.0);
    if (spec_.variant == Variant::Yearly) {
        row.emplace_back(L.phi_index(trend_of_band(band), year - spec_.year_begin), 1.0);
        row.emplace_back(L.eps0 + year - spec_.year_begin, 1.0);
        auto [h, alpha] = spec_.knots.locate(year);
        for (const auto& [cell, w] : spec_.mesh.bilinear_weights(cl.lon, cl.lat)) {
            if (alpha < 1.0) row.emplace_back(L.st_index(h, cell), (1.0 - alpha) * w);
            if (alpha > 0.0) row.emplace_back(L.st_index(h + 1, cell), alpha * w);
        }
    } else {
        row.emplace_back(L.gamma0 + period_idx, 1.0);
        if (L.st0 >= 0) {
            for (const auto& [cell, w] : spec_.mesh.bilinear_weights(cl.lon, cl.lat)) {
                row.emplace_back(L.st_index(0, cell), w);
            }
        }
    }
    row.emplace_back(L.eta0 + static_cast<int>(cluster_idx), 1.0);
    auto sit = std::lower_bound(survey_ids_.begin(), survey_ids_.end(), cl.survey_id);
    row.emplace_back(L.ups0 + static_cast<int>(sit - survey_ids_.begin()), 1.0);
    return row;
}

SparseMat AssembledModel::prior_precision(const gmrf::Hyperparameters& theta) const {
    theta.validate();
    const LatentLayout& L = layout_;
    std::vector<Eigen::Triplet<double>> trip;
    auto add_block = [&trip](int offset, const SparseMat& Q) {
        for (int k = 0; k < Q.outerSize(); ++k) {
            for (SparseMat::InnerIterator it(Q, k); it; ++it) {
                trip.emplace_back(offset + static_cast<int>(it.row()),
                                  offset + static_cast<int>(it.col()), it.value());
            }
        }
    };
    for (int i = 0; i < hazard::kNumAgeBands; ++i) {
        trip.emplace_back(L.beta0 + i, L.beta0 + i, kFixedEffectPrecision);
    }
    trip.emplace_back(L.delta, L.delta, kFixedEffectPrecision);
    if (spec_.variant == Variant::Yearly) {
        auto rw2 = gmrf::rw2_precision(L.n_phi_rows, theta.sigma_rw2);
        for (int t = 0; t < L.n_phi_rows; ++t) {
            rw2.Q.coeffRef(t, t) += kTrendRidge;
        }
        for (int trend = 0; trend < 3; ++trend) add_block(L.phi0 + trend * L.n_phi_rows, rw2.Q);
        auto Qt = gmrf::ar1_precision(L.n_knots, theta.rho);
        auto Qs = gmrf::spde_matern_precision(spec_.mesh, theta.range, theta.sigma_spatial);
        add_block(L.st0, gmrf::separable_st_precision(Qt, Qs).Q);
        add_block(L.eps0, gmrf::iid_precision(L.n_years, theta.sigma_time).Q);
    } else {
        auto rw1 = gmrf::rw1_precision(L.n_periods, theta.sigma_rw2);
        for (int p = 0; p < L.n_periods; ++p) rw1.Q.coeffRef(p, p) += kTrendRidge;
        add_block(L.gamma0, rw1.Q);
        if (L.st0 >= 0) {
            add_block(L.st0,
                      gmrf::spde_matern_precision(spec_.mesh, theta.range, theta.sigma_spatial).Q);
        }
    }
    add_block(L.eta0, gmrf::iid_precision(L.n_clusters, theta.sigma_cluster).Q);
    add_block(L.ups0, gmrf::iid_precision(L.n_surveys, theta.sigma_survey).Q);
    for (int c = 0; c < L.n_cov; ++c) {
        trip.emplace_back(L.cov0 + c, L.cov0 + c, kCovariatePrecision);
    }
    SparseMat Q(L.n, L.n);
    Q.setFromTriplets(trip.begin(), trip.end());
    Q.makeCompressed();
    return Q;
}

double AssembledModel::linear_predictor(const Vector& x, const std::string& cluster_id,
                                        int year, int band) const {
    if (x.size() != layout_.n) {
        throw std::invalid_argument("linear_predictor: latent dimension mismatch");
    }
    size_t jc = clusters_.size();
    for (size_t i = 0; i < clusters_.size(); ++i) {
        if (clusters_[i].cluster_id == cluster_id) {
            jc = i;
            break;
        }
    }
    if (jc == clusters_.size()) {
        throw std::invalid_argument("linear_predictor: unknown cluster " + cluster_id);
    }
    int p_idx = -1;
    if (spec_.variant != Variant::Yearly) {
        for (size_t p = 0; p < spec_.periods.size(); ++p) {
            if (spec_.periods[p].contains(year)) p_idx = static_cast<int>(p);
        }
        if (p_idx < 0) {
            throw std::invalid_argument("linear_predictor: year outside all periods");
        }
    } else if (year < spec_.year_begin || year > spec_.year_end) {
        throw std::invalid_argument("linear_predictor: year outside the model range");
    }
    double eta = -spec_.bias.log_offset(clusters_[jc].province, clusters_[jc].survey_id, year);
    for (const auto& [idx, val] : design_row(jc, year, band, p_idx)) {
        eta += val * x[idx];
    }
    return eta;
}

double AssembledModel::log_likelihood(const Vector& x) const {
    Vector eta = offsets_ + X_ * x;
    double ll = 0.0;
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
        ll += deaths_[i] * eta[i] - trials_[i] * stable_log1pexp(eta[i]);
    }
    if (!std::isfinite(ll)) {
        throw std::runtime_error("log_likelihood: non-finite value");
    }
    return ll;
}

Vector AssembledModel::cell_log_likelihood(const Vector& x) const {
    Vector eta = offsets_ + X_ * x;
    Vector out(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
        out[i] = log_binom_[i] + deaths_[i] * eta[i] - trials_[i] * stable_log1pexp(eta[i]);
    }
    return out;
}

double AssembledModel::log_posterior(const Vector& x, const gmrf::Hyperparameters& theta) const {
    SparseMat Q = prior_precision(theta);
    Eigen::SimplicialLLT<SparseMat> llt(Q);
    if (llt.info() != Eigen::Success) {
        throw std::runtime_error("log_posterior: prior precision not SPD");
    }
    double logdet = gmrf::cholesky_logdet(llt);
    double lp = log_likelihood(x);
    lp += -0.5 * x.dot(Q * x) + 0.5 * logdet -
          0.5 * static_cast<double>(layout_.n) * std::log(2.0 * 3.14159265358979323846);
    lp += hyper_log_prior(theta);
    if (!std::isfinite(lp)) {
        throw std::runtime_error("log_posterior: non-finite value");
    }
    return lp;
}

Vector AssembledModel::log_posterior_gradient(const Vector& x,
                                              const gmrf::Hyperparameters& theta) const {
    Vector eta = offsets_ + X_ * x;
    Vector resid(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
        resid[i] = deaths_[i] - trials_[i] * hazard::expit(eta[i]);
    }
    return X_.transpose() * resid - prior_precision(theta) * x;
}

double AssembledModel::hyper_log_prior(const gmrf::Hyperparameters& theta) const {
    const auto& hp = spec_.hyper_priors;
    double lp = hp.iid_precision.log_density_sigma(theta.sigma_cluster) +
                hp.iid_precision.log_density_sigma(theta.sigma_survey) +
                hp.iid_precision.log_density_sigma(theta.sigma_rw2);
    if (spec_.variant == Variant::Yearly) {
        lp += hp.iid_precision.log_density_sigma(theta.sigma_time);
        lp += hp.matern.log_density(theta.range, theta.sigma_spatial);
        lp += hp.ar1.log_density(theta.rho);
    } else if (layout_.st0 >= 0) {
        lp += hp.matern.log_density(theta.range, theta.sigma_spatial);
    }
    return lp;
}

}  // namespace u5mr::model
