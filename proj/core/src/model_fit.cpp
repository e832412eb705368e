// Fitting machinery: constrained Newton inner step, Laplace marginal,
// derivative-free hyperparameter ascent, posterior sampling and prediction.
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "u5mr/hazard.hpp"
#include "u5mr/model.hpp"

namespace u5mr::model {

namespace {

double dense_logdet(const Matrix& M) {
    Eigen::LLT<Matrix> llt(M);
    if (llt.info() != Eigen::Success) {
        throw std::runtime_error("dense_logdet: matrix not SPD");
    }
    double logdet = 0.0;
    for (Eigen::Index i = 0; i < M.rows(); ++i) {
        logdet += 2.0 * std::log(llt.matrixL()(i, i));
    }
    return logdet;
}

struct ConstraintOps {
    bool active = false;
    Matrix A;
    Eigen::LDLT<Matrix> AAt;

    explicit ConstraintOps(const Matrix& a) : A(a) {
        if (A.rows() > 0) {
            active = true;
            AAt.compute(A * A.transpose());
        }
    }

    Vector project_out(const Vector& v) const {
        if (!active) return v;
        return v - A.transpose() * AAt.solve(A * v);
    }
};

double stable_softplus(double x) {
    if (x > 35.0) return x;
    if (x < -35.0) return 0.0;
    return std::log1p(std::exp(x));
}

}  // namespace

void LatentProblem::validate() const {
    const Eigen::Index n = prior_precision.rows();
    const Eigen::Index n_obs = design.rows();
    if (prior_precision.cols() != n || design.cols() != n) {
        throw std::invalid_argument("LatentProblem: dimension mismatch");
    }
    if (offsets.size() != n_obs || trials.size() != n_obs || deaths.size() != n_obs) {
        throw std::invalid_argument("LatentProblem: observation vectors disagree");
    }
    if (constraints.rows() > 0 && constraints.cols() != n) {
        throw std::invalid_argument("LatentProblem: constraint width mismatch");
    }
}

double LatentProblem::log_likelihood(const Vector& x) const {
    Vector eta = offsets + design * x;
    double ll = 0.0;
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
        ll += deaths[i] * eta[i] - trials[i] * stable_softplus(eta[i]);
    }
    return ll;
}

GaussianApprox inner_gaussian_approximation(const LatentProblem& problem,
                                            const NewtonOptions& opts,
                                            const Vector* warm_start) {
    problem.validate();
    const SparseMat& Qp = problem.prior_precision;
    const SparseMat& X = problem.design;
    ConstraintOps con(problem.constraints);

    Vector x = warm_start ? con.project_out(*warm_start)
                          : Vector::Zero(Qp.rows());
    auto objective = [&](const Vector& v) {
        return problem.log_likelihood(v) - 0.5 * v.dot(Qp * v);
    };
    double f = objective(x);

    Eigen::SimplicialLLT<SparseMat> llt;
    bool analyzed = false;
    std::ostringstream trace;
    const Eigen::Index n_obs = problem.trials.size();

    auto weights_and_residual = [&](const Vector& v, Vector& w, Vector& resid) {
        Vector eta = problem.offsets + X * v;
        w.resize(n_obs);
        resid.resize(n_obs);
        for (Eigen::Index i = 0; i < n_obs; ++i) {
            double p = hazard::expit(eta[i]);
            w[i] = problem.trials[i] * p * (1.0 - p);
            resid[i] = problem.deaths[i] - problem.trials[i] * p;
        }
    };

    auto hessian_at = [&](const Vector& w) {
        SparseMat WX = w.asDiagonal() * X;
        SparseMat H = Qp + SparseMat(X.transpose() * WX);
        return H;
    };

    for (int iter = 0; iter < opts.max_iterations; ++iter) {
        Vector w, resid;
        weights_and_residual(x, w, resid);
        Vector grad = X.transpose() * resid - Qp * x;
        double gnorm = con.project_out(grad).lpNorm<Eigen::Infinity>();
        trace << "iter " << iter << " f=" << f << " |grad|=" << gnorm << "\n";
        if (gnorm < opts.gradient_tolerance) {
            GaussianApprox out;
            out.mode = x;
            out.precision = hessian_at(w);
            out.newton_iterations = iter;
            out.final_gradient_norm = gnorm;
            return out;
        }
        SparseMat H = hessian_at(w);
        if (!analyzed) {
            llt.analyzePattern(H);
            analyzed = true;
        }
        llt.factorize(H);
        if (llt.info() != Eigen::Success) {
            throw std::runtime_error("inner_gaussian_approximation: Hessian factorization "
                                     "failed\n" + trace.str());
        }
        Vector step = llt.solve(grad);
        if (con.active) {
            // Kriging correction keeps the Newton target on the constraint manifold.
            Matrix HinvAt = llt.solve(con.A.transpose());
            Eigen::LDLT<Matrix> AHA(con.A * HinvAt);
            Vector target = x + step;
            step = target - HinvAt * AHA.solve(con.A * target) - x;
        }
        double t = 1.0;
        bool accepted = false;
        for (int half = 0; half < 40; ++half) {
            Vector cand = x + t * step;
            double fc = objective(cand);
            if (std::isfinite(fc) && fc >= f - 1e-12) {
                // Treat a flat step near the optimum as converged progress.
                x = cand;
                f = fc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if (!accepted) {
            throw std::runtime_error(
                "inner_gaussian_approximation: line search failed\n" + trace.str());
        }
    }
    // One last gradient check before giving up.
    Vector w, resid;
    weights_and_residual(x, w, resid);
    Vector grad = X.transpose() * resid - Qp * x;
    double gnorm = con.project_out(grad).lpNorm<Eigen::Infinity>();
    if (gnorm < opts.gradient_tolerance * 10.0) {
        GaussianApprox out;
        out.mode = x;
        out.precision = hessian_at(w);
        out.newton_iterations = opts.max_iterations;
        out.final_gradient_norm = gnorm;
        return out;
    }
    throw std::runtime_error("inner_gaussian_approximation: no convergence in " +
                             std::to_string(opts.max_iterations) + " iterations\n" +
                             trace.str());
}

namespace {

LatentProblem problem_for(const AssembledModel& m, const gmrf::Hyperparameters& theta) {
    LatentProblem p;
    p.prior_precision = m.prior_precision(theta);
    p.design = m.design();
    p.offsets = m.offsets();
    p.trials = m.trials();
    p.deaths = m.deaths();
    p.constraints = m.constraints().A;
    return p;
}

}  // namespace

GaussianApprox inner_gaussian_approximation(const AssembledModel& m,
                                            const gmrf::Hyperparameters& theta,
                                            const NewtonOptions& opts,
                                            const Vector* warm_start) {
    return inner_gaussian_approximation(problem_for(m, theta), opts, warm_start);
}

double laplace_log_marginal(const LatentProblem& problem, const GaussianApprox& approx) {
    Eigen::SimplicialLLT<SparseMat> llt_p(problem.prior_precision);
    if (llt_p.info() != Eigen::Success) {
        throw std::runtime_error("laplace_log_marginal: prior precision not SPD");
    }
    Eigen::SimplicialLLT<SparseMat> llt_h(approx.precision);
    if (llt_h.info() != Eigen::Success) {
        throw std::runtime_error("laplace_log_marginal: posterior precision not SPD");
    }
    const Vector& mode = approx.mode;
    double lml = problem.log_likelihood(mode) -
                 0.5 * mode.dot(problem.prior_precision * mode) +
                 0.5 * (gmrf::cholesky_logdet(llt_p) - gmrf::cholesky_logdet(llt_h));
    const Matrix& A = problem.constraints;
    if (A.rows() > 0) {
        Matrix Mp = A * llt_p.solve(A.transpose());
        Matrix Mh = A * llt_h.solve(A.transpose());
        lml += 0.5 * (dense_logdet(Mp) - dense_logdet(Mh));
    }
    return lml;
}

double laplace_log_marginal(const AssembledModel& m, const gmrf::Hyperparameters& theta,
                            const GaussianApprox& approx) {
    return laplace_log_marginal(problem_for(m, theta), approx);
}

// -- Hyperparameter optimization ---------------------------------------------

namespace {

struct ParamMap {
    // Transformed coordinates: log for scales, atanh for rho.
    std::vector<double (*)(const gmrf::Hyperparameters&)> get;
    std::vector<void (*)(gmrf::Hyperparameters&, double)> set;

    static ParamMap for_model(const AssembledModel& m) {
        ParamMap pm;
        auto add = [&pm](double (*g)(const gmrf::Hyperparameters&),
                         void (*s)(gmrf::Hyperparameters&, double)) {
            pm.get.push_back(g);
            pm.set.push_back(s);
        };
        add([](const gmrf::Hyperparameters& t) { return std::log(t.sigma_cluster); },
            [](gmrf::Hyperparameters& t, double z) { t.sigma_cluster = std::exp(z); });
        add([](const gmrf::Hyperparameters& t) { return std::log(t.sigma_survey); },
            [](gmrf::Hyperparameters& t, double z) { t.sigma_survey = std::exp(z); });
        add([](const gmrf::Hyperparameters& t) { return std::log(t.sigma_rw2); },
            [](gmrf::Hyperparameters& t, double z) { t.sigma_rw2 = std::exp(z); });
        if (m.spec().variant == Variant::Yearly) {
            add([](const gmrf::Hyperparameters& t) { return std::log(t.sigma_time); },
                [](gmrf::Hyperparameters& t, double z) { t.sigma_time = std::exp(z); });
            add([](const gmrf::Hyperparameters& t) { return std::atanh(t.rho); },
                [](gmrf::Hyperparameters& t, double z) { t.rho = std::tanh(z); });
        }
        if (m.layout().st0 >= 0) {
            add([](const gmrf::Hyperparameters& t) { return std::log(t.range); },
                [](gmrf::Hyperparameters& t, double z) { t.range = std::exp(z); });
            add([](const gmrf::Hyperparameters& t) { return std::log(t.sigma_spatial); },
                [](gmrf::Hyperparameters& t, double z) { t.sigma_spatial = std::exp(z); });
        }
        return pm;
    }

    size_t size() const { return get.size(); }

    Vector to_vector(const gmrf::Hyperparameters& t) const {
        Vector z(static_cast<Eigen::Index>(size()));
        for (size_t i = 0; i < size(); ++i) z[static_cast<Eigen::Index>(i)] = get[i](t);
        return z;
    }

    gmrf::Hyperparameters to_theta(const gmrf::Hyperparameters& base, const Vector& z) const {
        gmrf::Hyperparameters t = base;
        for (size_t i = 0; i < size(); ++i) set[i](t, z[static_cast<Eigen::Index>(i)]);
        return t;
    }
};

// Nelder-Mead maximization; f returns -inf for infeasible points.
struct NelderMead {
    int max_evaluations = 150;
    double initial_step = 0.4;

    template <typename F>
    std::pair<Vector, double> maximize(F&& f, const Vector& z0, int* evals_out) {
        const int k = static_cast<int>(z0.size());
        int evals = 0;
        auto eval = [&](const Vector& z) {
            ++evals;
            return f(z);
        };
        std::vector<Vector> pts;
        std::vector<double> vals;
        pts.push_back(z0);
        vals.push_back(eval(z0));
        for (int i = 0; i < k; ++i) {
            Vector z = z0;
            z[i] += initial_step;
            pts.push_back(z);
            vals.push_back(eval(z));
        }
        auto order = [&]() {
            std::vector<size_t> idx(pts.size());
            for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
            std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return vals[a] > vals[b]; });
            std::vector<Vector> p2;
            std::vector<double> v2;
            for (size_t i : idx) {
                p2.push_back(pts[i]);
                v2.push_back(vals[i]);
            }
            pts = std::move(p2);
            vals = std::move(v2);
        };
        order();
        while (evals < max_evaluations) {
            if (std::isfinite(vals.front()) && std::isfinite(vals.back()) &&
                vals.front() - vals.back() < 1e-5) {
                break;
            }
            Vector centroid = Vector::Zero(k);
            for (int i = 0; i < k; ++i) centroid += pts[static_cast<size_t>(i)];
            centroid /= static_cast<double>(k);
            const Vector& worst = pts.back();
            Vector refl = centroid + (centroid - worst);
            double f_refl = eval(refl);
            if (f_refl > vals.front()) {
                Vector expa = centroid + 2.0 * (centroid - worst);
                double f_expa = eval(expa);
                if (f_expa > f_refl) {
                    pts.back() = expa;
                    vals.back() = f_expa;
                } else {
                    pts.back() = refl;
                    vals.back() = f_refl;
                }
            } else if (f_refl > vals[vals.size() - 2]) {
                pts.back() = refl;
                vals.back() = f_refl;
            } else {
                Vector contr = centroid + 0.5 * (worst - centroid);
                double f_contr = eval(contr);
                if (f_contr > vals.back()) {
                    pts.back() = contr;
                    vals.back() = f_contr;
                } else {
                    for (size_t i = 1; i < pts.size(); ++i) {
                        pts[i] = pts.front() + 0.5 * (pts[i] - pts.front());
                        vals[i] = eval(pts[i]);
                    }
                }
            }
            order();
        }
        if (evals_out) *evals_out = evals;
        return {pts.front(), vals.front()};
    }
};

}  // namespace

FitResult fit(const AssembledModel& m, const FitOptions& opts) {
    if (m.cells().empty()) {
        throw std::invalid_argument("fit: dataset contributes no person-months");
    }
    auto log_progress = [&opts](const std::string& msg) {
        if (opts.progress) opts.progress(msg);
    };

    ParamMap pm = ParamMap::for_model(m);
    gmrf::Hyperparameters theta = opts.initial;
    Vector warm = Vector::Zero(m.layout().n);
    bool have_warm = false;
    int evals = 0;

    auto objective = [&](const Vector& z) -> double {
        gmrf::Hyperparameters t;
        try {
            t = pm.to_theta(opts.initial, z);
            GaussianApprox ga = inner_gaussian_approximation(m, t, {},
                                                             have_warm ? &warm : nullptr);
            warm = ga.mode;
            have_warm = true;
            double val = laplace_log_marginal(m, t, ga) + m.hyper_log_prior(t);
            log_progress("theta eval: logml=" + std::to_string(val) + " (" +
                         std::to_string(ga.newton_iterations) + " newton iters)");
            return val;
        } catch (const std::exception& e) {
            log_progress(std::string("theta eval failed: ") + e.what());
            return -std::numeric_limits<double>::infinity();
        }
    };

    if (opts.optimize) {
        NelderMead nm;
        nm.max_evaluations = opts.max_evaluations;
        auto [z_best, f_best] = nm.maximize(objective, pm.to_vector(opts.initial), &evals);
        if (!std::isfinite(f_best)) {
            throw std::runtime_error("fit: optimizer failed; best objective not finite");
        }
        theta = pm.to_theta(opts.initial, z_best);
    }

    FitResult result;
    result.theta_mode = theta;
    result.evaluations = evals;
    result.gauss = inner_gaussian_approximation(m, theta, {}, have_warm ? &warm : nullptr);
    result.log_marginal = laplace_log_marginal(m, theta, result.gauss) + m.hyper_log_prior(theta);

    // Optional coarse integration: mode plus +/- one step per transformed axis.
    struct GridPoint {
        gmrf::Hyperparameters theta;
        GaussianApprox gauss;
        double lml;
    };
    std::vector<GridPoint> grid_points;
    grid_points.push_back({theta, result.gauss, result.log_marginal});
    if (opts.grid_integration) {
        Vector z0 = pm.to_vector(theta);
        for (size_t i = 0; i < pm.size(); ++i) {
            for (double dir : {-1.0, 1.0}) {
                Vector z = z0;
                z[static_cast<Eigen::Index>(i)] += dir * opts.grid_step;
                gmrf::Hyperparameters t = pm.to_theta(theta, z);
                try {
                    GaussianApprox ga = inner_gaussian_approximation(m, t, {}, &result.gauss.mode);
                    double lml = laplace_log_marginal(m, t, ga) + m.hyper_log_prior(t);
                    grid_points.push_back({t, std::move(ga), lml});
                } catch (const std::exception& e) {
                    log_progress(std::string("grid point dropped: ") + e.what());
                }
            }
        }
    }
    double max_lml = grid_points.front().lml;
    for (const auto& gp : grid_points) max_lml = std::max(max_lml, gp.lml);
    double wsum = 0.0;
    std::vector<double> w(grid_points.size());
    for (size_t i = 0; i < grid_points.size(); ++i) {
        w[i] = std::exp(grid_points[i].lml - max_lml);
        wsum += w[i];
    }
    for (auto& wi : w) wi /= wsum;
    for (size_t i = 0; i < grid_points.size(); ++i) {
        result.grid.emplace_back(grid_points[i].theta, w[i]);
    }

    // Posterior samples, allocated across grid points by weight.
    int S = opts.n_samples;
    result.samples.resize(m.layout().n, S);
    std::vector<int> alloc(grid_points.size(), 0);
    int assigned = 0;
    for (size_t i = 1; i < grid_points.size(); ++i) {
        alloc[i] = static_cast<int>(std::floor(w[i] * S));
        assigned += alloc[i];
    }
    alloc[0] = S - assigned;
    gmrf::ConstraintSet cs;
    cs.A = m.constraints().A;
    int col = 0;
    std::mt19937_64 rng(opts.seed);
    for (size_t i = 0; i < grid_points.size(); ++i) {
        if (alloc[i] == 0) continue;
        gmrf::SparsePrecisionBlock block;
        block.n = m.layout().n;
        block.Q = grid_points[i].gauss.precision;
        gmrf::ConstrainedSampler sampler(block, cs);
        for (int s = 0; s < alloc[i]; ++s) {
            result.samples.col(col++) = grid_points[i].gauss.mode + sampler.sample(rng);
        }
    }
    log_progress("fit complete: logml=" + std::to_string(result.log_marginal));
    return result;
}

// -- Prediction ---------------------------------------------------------------

namespace {

// Holds forecast draws beyond the data years so that all queried years share
// one deterministic stream.
struct PredictionEngine {
    const AssembledModel& m;
    const FitResult& fit;
    PredictOptions opts;
    int S;
    int n_cells;
    int max_year;
    // phi_fore[extra_year][trend] is a length-S vector; extra_year 0 = year_end+1.
    std::vector<std::array<Vector, 3>> phi_fore;
    Matrix extended_knot;  // S x n_cells, the AR(1)-extended knot beyond the hull

    PredictionEngine(const AssembledModel& model, const FitResult& f, const PredictOptions& o)
        : m(model), fit(f), opts(o), S(static_cast<int>(f.samples.cols())),
          n_cells(model.spec().mesh.size()) {
        const auto& spec = m.spec();
        std::mt19937_64 rng(opts.forecast_seed);
        if (spec.variant == Variant::Yearly) {
            max_year = spec.knots.last_year() + 5;
            const auto& L = m.layout();
            int T = spec.num_years();
            // RW2 forecast: phi_{t+1} = 2 phi_t - phi_{t-1} + N(0, sigma_rw2^2)
            int extra = max_year - spec.year_end;
            phi_fore.resize(static_cast<size_t>(extra));
            for (int trend = 0; trend < 3; ++trend) {
                Vector prev2 = fit.samples.row(L.phi_index(trend, T - 2)).transpose();
                Vector prev1 = fit.samples.row(L.phi_index(trend, T - 1)).transpose();
                for (int e = 0; e < extra; ++e) {
                    Vector next(S);
                    for (int s = 0; s < S; ++s) {
                        next[s] = 2.0 * prev1[s] - prev2[s] +
                                  fit.theta_mode.sigma_rw2 * gmrf::standard_normal(rng);
                    }
                    phi_fore[static_cast<size_t>(e)][static_cast<size_t>(trend)] = next;
                    prev2 = prev1;
                    prev1 = next;
                }
            }
            // AR(1) extension of the space-time field: one knot past the hull,
            // innovation constrained like the fitted knots.
            auto Qs = gmrf::spde_matern_precision(spec.mesh, fit.theta_mode.range,
                                                  fit.theta_mode.sigma_spatial);
            auto pop = gmrf::population_constraints(spec.mesh, spec.density, 1);
            gmrf::ConstrainedSampler innov(Qs, pop);
            double rho = fit.theta_mode.rho;
            extended_knot.resize(S, n_cells);
            int last = spec.knots.num_knots - 1;
            for (int s = 0; s < S; ++s) {
                Vector eps = innov.sample(rng);
                for (int c = 0; c < n_cells; ++c) {
                    extended_knot(s, c) =
                        rho * fit.samples(m.layout().st_index(last, c), s) +
                        std::sqrt(1.0 - rho * rho) * eps[c];
                }
            }
        } else {
            max_year = 0;
            for (const auto& p : spec.periods) max_year = std::max(max_year, p.end_year);
        }
    }

    double phi_value(int trend, int year, int sample) const {
        const auto& spec = m.spec();
        if (year <= spec.year_end) {
            return fit.samples(m.layout().phi_index(trend, year - spec.year_begin), sample);
        }
        return phi_fore[static_cast<size_t>(year - spec.year_end - 1)]
                       [static_cast<size_t>(trend)][sample];
    }

    // S x n_cells samples of the space-time field at `year`.
    Matrix field(int year) const {
        const auto& spec = m.spec();
        const auto& L = m.layout();
        Matrix u = Matrix::Zero(S, n_cells);
        if (L.st0 < 0) return u;
        if (spec.variant != Variant::Yearly) {
            for (int c = 0; c < n_cells; ++c) {
                u.col(c) = fit.samples.row(L.st_index(0, c)).transpose();
            }
            return u;
        }
        int h;
        double alpha;
        bool use_extension = year > spec.knots.last_year();
        if (use_extension) {
            h = spec.knots.num_knots - 1;
            alpha = static_cast<double>(year - spec.knots.last_year()) / 5.0;
        } else {
            std::tie(h, alpha) = spec.knots.locate(year);
        }
        for (int c = 0; c < n_cells; ++c) {
            Vector lower = fit.samples.row(L.st_index(h, c)).transpose();
            if (alpha == 0.0) {
                u.col(c) = lower;
            } else {
                Vector upper = use_extension
                                   ? extended_knot.col(c)
                                   : Vector(fit.samples.row(L.st_index(h + 1, c)).transpose());
                u.col(c) = (1.0 - alpha) * lower + alpha * upper;
            }
        }
        return u;
    }

    void check_year(int year) const {
        const auto& spec = m.spec();
        int lo = spec.variant == Variant::Yearly ? spec.year_begin
                                                 : spec.periods.front().start_year;
        if (year < lo || year > max_year) {
            throw std::domain_error("predict: year " + std::to_string(year) + " outside " +
                                    std::to_string(lo) + ".." + std::to_string(max_year));
        }
    }

    Matrix u5mr_surface(int year) const {
        check_year(year);
        const auto& spec = m.spec();
        const auto& L = m.layout();
        Matrix u = field(year);

        int p_idx = -1;
        std::vector<Vector> cell_cov;  // standardized covariate value per cell
        if (spec.variant != Variant::Yearly) {
            for (size_t p = 0; p < spec.periods.size(); ++p) {
                if (spec.periods[p].contains(year)) p_idx = static_cast<int>(p);
            }
            if (p_idx < 0) {
                throw std::domain_error("predict: year " + std::to_string(year) +
                                        " outside all model periods");
            }
            for (size_t c = 0; c < spec.covariates.size(); ++c) {
                const auto& cov = spec.covariates[c];
                const auto& grid =
                    cov.grids[cov.grids.size() == 1 ? 0 : static_cast<size_t>(p_idx)];
                Vector v(n_cells);
                const auto& sc = m.covariate_scaling()[c];
                for (int cell = 0; cell < n_cells; ++cell) {
                    double lon = spec.mesh.center_lon(cell);
                    double lat = spec.mesh.center_lat(cell);
                    int gc = grid.cell_of(lon, lat);
                    double raw = gc >= 0 ? grid.values[static_cast<size_t>(gc)] : grid.nodata;
                    v[cell] = (raw == grid.nodata) ? 0.0 : (raw - sc.mean) / sc.sd;
                }
                cell_cov.push_back(std::move(v));
            }
        }

        if (!opts.rural_mask.empty() &&
            static_cast<int>(opts.rural_mask.size()) != n_cells) {
            throw std::invalid_argument("predict: rural_mask size disagrees with the mesh");
        }
        Matrix out(S, n_cells);
        bool default_rural = opts.stratum == StratumPolicy::Rural;
        for (int s = 0; s < S; ++s) {
            double common = spec.variant != Variant::Yearly
                                ? fit.samples(L.gamma0 + p_idx, s)
                                : 0.0;
            double delta = fit.samples(L.delta, s);
            std::array<double, hazard::kNumAgeBands> band_base;
            for (int a = 0; a < hazard::kNumAgeBands; ++a) {
                band_base[static_cast<size_t>(a)] =
                    fit.samples(L.beta0 + a, s) + common +
                    (spec.variant == Variant::Yearly ? phi_value(trend_of_band(a + 1), year, s)
                                                     : 0.0);
            }
            for (int c = 0; c < n_cells; ++c) {
                bool rural = opts.rural_mask.empty()
                                 ? default_rural
                                 : opts.rural_mask[static_cast<size_t>(c)] != 0;
                double extra = u(s, c) + (rural ? delta : 0.0);
                for (size_t k = 0; k < cell_cov.size(); ++k) {
                    extra += fit.samples(L.cov0 + static_cast<int>(k), s) * cell_cov[k][c];
                }
                double surv = 1.0;
                for (int a = 0; a < hazard::kNumAgeBands; ++a) {
                    double q = hazard::expit(band_base[static_cast<size_t>(a)] + extra);
                    surv *= std::pow(1.0 - q, hazard::kBandMonthSpan[static_cast<size_t>(a)]);
                }
                out(s, c) = 1.0 - surv;
            }
        }
        return out;
    }
};

}  // namespace

Matrix predict_u5mr_surface(const AssembledModel& m, const FitResult& fit, int year,
                            const PredictOptions& opts) {
    PredictionEngine engine(m, fit, opts);
    return engine.u5mr_surface(year);
}

std::map<int, Matrix> predict_u5mr_surfaces(const AssembledModel& m, const FitResult& fit,
                                            int year_begin, int year_end,
                                            const PredictOptions& opts) {
    PredictionEngine engine(m, fit, opts);
    std::map<int, Matrix> out;
    for (int y = year_begin; y <= year_end; ++y) {
        out[y] = engine.u5mr_surface(y);
    }
    return out;
}

Matrix predict_st_field(const AssembledModel& m, const FitResult& fit, int year,
                        const PredictOptions& opts) {
    if (m.spec().variant != Variant::Yearly) {
        throw std::invalid_argument("predict_st_field: yearly model required");
    }
    PredictionEngine engine(m, fit, opts);
    engine.check_year(year);
    return engine.field(year);
}

}  // namespace u5mr::model
