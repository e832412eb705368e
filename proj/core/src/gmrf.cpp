#include "u5mr/gmrf.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace u5mr::gmrf {

void SparsePrecisionBlock::validate() const {
    if (Q.rows() != n || Q.cols() != n) {
        throw std::invalid_argument("SparsePrecisionBlock: shape mismatch");
    }
    SparseMat diff = SparseMat(Q.transpose()) - Q;
    if (diff.coeffs().size() > 0 && diff.coeffs().cwiseAbs().maxCoeff() > 1e-10) {
        throw std::invalid_argument("SparsePrecisionBlock: matrix is not symmetric");
    }
}

void ConstraintSet::validate() const {
    if (A.rows() == 0) return;
    Eigen::FullPivLU<Matrix> lu(A);
    if (lu.rank() < A.rows()) {
        throw std::invalid_argument("ConstraintSet: rows are linearly dependent");
    }
}

SparseMat SpatialMesh::mass_matrix() const {
    SparseMat C(size(), size());
    C.reserve(Eigen::VectorXi::Constant(size(), 1));
    for (int i = 0; i < size(); ++i) C.insert(i, i) = cell_area();
    C.makeCompressed();
    return C;
}

SparseMat SpatialMesh::stiffness_matrix() const {
    std::vector<Eigen::Triplet<double>> trip;
    auto idx = [this](int r, int c) { return r * ncols + c; };
    // Unit coupling per neighbor pair on a square grid (h_y/h_x = 1).
    for (int r = 0; r < nrows; ++r) {
        for (int c = 0; c < ncols; ++c) {
            if (c + 1 < ncols) {
                trip.emplace_back(idx(r, c), idx(r, c), 1.0);
                trip.emplace_back(idx(r, c + 1), idx(r, c + 1), 1.0);
                trip.emplace_back(idx(r, c), idx(r, c + 1), -1.0);
                trip.emplace_back(idx(r, c + 1), idx(r, c), -1.0);
            }
            if (r + 1 < nrows) {
                trip.emplace_back(idx(r, c), idx(r, c), 1.0);
                trip.emplace_back(idx(r + 1, c), idx(r + 1, c), 1.0);
                trip.emplace_back(idx(r, c), idx(r + 1, c), -1.0);
                trip.emplace_back(idx(r + 1, c), idx(r, c), -1.0);
            }
        }
    }
    SparseMat G(size(), size());
    G.setFromTriplets(trip.begin(), trip.end());
    G.makeCompressed();
    return G;
}

SpatialMesh SpatialMesh::from_grid(const raster::Grid& g) {
    SpatialMesh m;
    m.ncols = g.ncols;
    m.nrows = g.nrows;
    m.xllcorner = g.xllcorner;
    m.yllcorner = g.yllcorner;
    m.cellsize = g.cellsize;
    return m;
}

raster::Grid SpatialMesh::to_grid() const {
    raster::Grid g;
    g.ncols = ncols;
    g.nrows = nrows;
    g.xllcorner = xllcorner;
    g.yllcorner = yllcorner;
    g.cellsize = cellsize;
    g.values.assign(static_cast<size_t>(size()), 0.0);
    return g;
}

std::vector<std::pair<int, double>> SpatialMesh::bilinear_weights(double lon,
                                                                  double lat) const {
    auto axis = [](double coord, double ll, double cs, int n) {
        double u = (coord - ll) / cs - 0.5;  // coordinate in cell-center units
        int i0;
        double f;
        if (n == 1 || u <= 0.0) {
            i0 = 0;
            f = 0.0;
        } else if (u >= static_cast<double>(n - 1)) {
            i0 = n - 2;
            f = 1.0;
        } else {
            i0 = static_cast<int>(std::floor(u));
            f = u - i0;
        }
        return std::pair<int, double>{i0, f};
    };
    auto [c0, fx] = axis(lon, xllcorner, cellsize, ncols);
    auto [rb0, fy] = axis(lat, yllcorner, cellsize, nrows);
    auto cell = [this](int rb, int c) { return (nrows - 1 - rb) * ncols + c; };
    int c1 = std::min(c0 + 1, ncols - 1);
    int rb1 = std::min(rb0 + 1, nrows - 1);
    std::vector<std::pair<int, double>> out;
    auto push = [&out](int idx, double w) {
        if (w <= 0.0) return;
        for (auto& [i, wi] : out) {
            if (i == idx) {
                wi += w;
                return;
            }
        }
        out.emplace_back(idx, w);
    };
    push(cell(rb0, c0), (1.0 - fx) * (1.0 - fy));
    push(cell(rb0, c1), fx * (1.0 - fy));
    push(cell(rb1, c0), (1.0 - fx) * fy);
    push(cell(rb1, c1), fx * fy);
    return out;
}

void Hyperparameters::validate() const {
    if (!(sigma_cluster > 0.0 && sigma_survey > 0.0 && sigma_time > 0.0 && sigma_rw2 > 0.0)) {
        throw std::invalid_argument("Hyperparameters: standard deviations must be positive");
    }
    if (!(range > 0.0 && sigma_spatial > 0.0)) {
        throw std::invalid_argument("Hyperparameters: range and spatial sigma must be positive");
    }
    if (!(std::abs(rho) < 1.0)) {
        throw std::invalid_argument("Hyperparameters: |rho| must be < 1");
    }
}

SparsePrecisionBlock rw2_precision(int T, double sigma) {
    if (T < 3) throw std::invalid_argument("rw2_precision: need T >= 3");
    if (!(sigma > 0.0)) throw std::invalid_argument("rw2_precision: sigma must be positive");
    SparseMat D(T - 2, T);
    D.reserve(Eigen::VectorXi::Constant(T, 3));
    for (int i = 0; i < T - 2; ++i) {
        D.insert(i, i) = 1.0;
        D.insert(i, i + 1) = -2.0;
        D.insert(i, i + 2) = 1.0;
    }
    SparsePrecisionBlock b;
    b.n = T;
    b.Q = SparseMat(D.transpose() * D) / (sigma * sigma);
    b.rank_deficiency = 2;
    return b;
}

SparsePrecisionBlock rw1_precision(int T, double sigma) {
    if (T < 2) throw std::invalid_argument("rw1_precision: need T >= 2");
    if (!(sigma > 0.0)) throw std::invalid_argument("rw1_precision: sigma must be positive");
    SparseMat D(T - 1, T);
    for (int i = 0; i < T - 1; ++i) {
        D.insert(i, i) = 1.0;
        D.insert(i, i + 1) = -1.0;
    }
    SparsePrecisionBlock b;
    b.n = T;
    b.Q = SparseMat(D.transpose() * D) / (sigma * sigma);
    b.rank_deficiency = 1;
    return b;
}

SparsePrecisionBlock ar1_precision(int T, double rho) {
    if (T < 1) throw std::invalid_argument("ar1_precision: need T >= 1");
    if (!(std::abs(rho) < 1.0)) throw std::invalid_argument("ar1_precision: |rho| must be < 1");
    double s = 1.0 / (1.0 - rho * rho);
    SparseMat Q(T, T);
    Q.reserve(Eigen::VectorXi::Constant(T, 3));
    for (int i = 0; i < T; ++i) {
        double diag = (T == 1) ? 1.0 : ((i == 0 || i == T - 1) ? s : s * (1.0 + rho * rho));
        Q.insert(i, i) = diag;
        if (i + 1 < T) {
            Q.insert(i, i + 1) = -s * rho;
            Q.insert(i + 1, i) = -s * rho;
        }
    }
    Q.makeCompressed();
    SparsePrecisionBlock b;
    b.n = T;
    b.Q = std::move(Q);
    b.rank_deficiency = 0;
    return b;
}

SparsePrecisionBlock iid_precision(int n, double sigma) {
    if (n < 1) throw std::invalid_argument("iid_precision: need n >= 1");
    if (!(sigma > 0.0)) throw std::invalid_argument("iid_precision: sigma must be positive");
    SparseMat Q(n, n);
    Q.reserve(Eigen::VectorXi::Constant(n, 1));
    for (int i = 0; i < n; ++i) Q.insert(i, i) = 1.0 / (sigma * sigma);
    Q.makeCompressed();
    SparsePrecisionBlock b;
    b.n = n;
    b.Q = std::move(Q);
    b.rank_deficiency = 0;
    return b;
}

SparsePrecisionBlock spde_matern_precision(const SpatialMesh& mesh, double range,
                                           double sigma) {
    if (mesh.ncols < 3 || mesh.nrows < 3) {
        throw std::invalid_argument("spde_matern_precision: mesh must be at least 3x3");
    }
    if (!(range > 0.0 && sigma > 0.0)) {
        throw std::invalid_argument("spde_matern_precision: range and sigma must be positive");
    }
    double kappa = std::sqrt(8.0) / range;
    double tau2 = 1.0 / (4.0 * std::numbers::pi * kappa * kappa * sigma * sigma);
    SparseMat C = mesh.mass_matrix();
    SparseMat G = mesh.stiffness_matrix();
    // Stiffness in physical units: the unit-coupling Laplacian corresponds to
    // cellsize-free differences, scale so (kappa^2 C + G) discretizes
    // (kappa^2 - Laplace) with lumped mass.
    SparseMat K = kappa * kappa * C + G;
    SparseMat Cinv(C.rows(), C.cols());
    Cinv.reserve(Eigen::VectorXi::Constant(C.rows(), 1));
    for (int i = 0; i < C.rows(); ++i) Cinv.insert(i, i) = 1.0 / C.coeff(i, i);
    SparsePrecisionBlock b;
    b.n = mesh.size();
    b.Q = SparseMat(tau2 * (K * Cinv * K));
    b.Q.makeCompressed();
    b.rank_deficiency = 0;
    return b;
}

SparseMat kronecker(const SparseMat& A, const SparseMat& B) {
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(static_cast<size_t>(A.nonZeros()) * static_cast<size_t>(B.nonZeros()));
    for (int ka = 0; ka < A.outerSize(); ++ka) {
        for (SparseMat::InnerIterator ia(A, ka); ia; ++ia) {
            for (int kb = 0; kb < B.outerSize(); ++kb) {
                for (SparseMat::InnerIterator ib(B, kb); ib; ++ib) {
                    trip.emplace_back(static_cast<int>(ia.row() * B.rows() + ib.row()),
                                      static_cast<int>(ia.col() * B.cols() + ib.col()),
                                      ia.value() * ib.value());
                }
            }
        }
    }
    SparseMat K(A.rows() * B.rows(), A.cols() * B.cols());
    K.setFromTriplets(trip.begin(), trip.end());
    K.makeCompressed();
    return K;
}

SparsePrecisionBlock separable_st_precision(const SparsePrecisionBlock& Qt,
                                            const SparsePrecisionBlock& Qs) {
    if (Qt.rank_deficiency != 0 || Qs.rank_deficiency != 0) {
        throw std::invalid_argument("separable_st_precision: factors must be full rank");
    }
    SparsePrecisionBlock b;
    b.n = Qt.n * Qs.n;
    b.Q = kronecker(Qt.Q, Qs.Q);
    b.rank_deficiency = 0;
    return b;
}

std::pair<int, double> KnotGrid::locate(int year) const {
    if (year < year0 || year > last_year()) {
        throw std::domain_error("KnotGrid: year " + std::to_string(year) +
                                " outside " + std::to_string(year0) + ".." +
                                std::to_string(last_year()));
    }
    int h = (year - year0) / 5;
    double alpha = static_cast<double>(year - year0 - 5 * h) / 5.0;
    if (h == num_knots - 1) {
        h -= 1;
        alpha = 1.0;
    }
    return {h, alpha};
}

SparseMat knot_interpolation_matrix(const KnotGrid& knots, int year_begin, int year_end,
                                    int n_cells) {
    if (year_end < year_begin) {
        throw std::invalid_argument("knot_interpolation_matrix: empty year range");
    }
    int n_years = year_end - year_begin + 1;
    std::vector<Eigen::Triplet<double>> trip;
    for (int y = year_begin; y <= year_end; ++y) {
        auto [h, alpha] = knots.locate(y);
        int row0 = (y - year_begin) * n_cells;
        for (int cell = 0; cell < n_cells; ++cell) {
            if (alpha < 1.0) trip.emplace_back(row0 + cell, h * n_cells + cell, 1.0 - alpha);
            if (alpha > 0.0) trip.emplace_back(row0 + cell, (h + 1) * n_cells + cell, alpha);
        }
    }
    SparseMat P(n_years * n_cells, knots.num_knots * n_cells);
    P.setFromTriplets(trip.begin(), trip.end());
    P.makeCompressed();
    return P;
}

ConstraintSet population_constraints(const SpatialMesh& mesh, const Vector& density,
                                     int num_knots) {
    if (density.size() != mesh.size()) {
        throw std::invalid_argument("population_constraints: density size mismatch");
    }
    if (density.minCoeff() < 0.0) {
        throw std::invalid_argument("population_constraints: density must be nonnegative");
    }
    if (!(density.sum() > 0.0)) {
        throw std::invalid_argument("population_constraints: density is identically zero");
    }
    int n_cells = mesh.size();
    ConstraintSet cs;
    cs.A = Matrix::Zero(num_knots, num_knots * n_cells);
    for (int h = 0; h < num_knots; ++h) {
        for (int cell = 0; cell < n_cells; ++cell) {
            cs.A(h, h * n_cells + cell) = density[cell] * mesh.cell_area();
        }
    }
    return cs;
}

double cholesky_logdet(const Eigen::SimplicialLLT<SparseMat>& llt) {
    SparseMat L = llt.matrixL();
    double logdet = 0.0;
    for (int i = 0; i < L.rows(); ++i) {
        logdet += 2.0 * std::log(L.coeff(i, i));
    }
    return logdet;
}

double standard_normal(std::mt19937_64& rng) {
    // Box-Muller; one draw per call keeps replay independent of call pattern.
    constexpr double two_pi = 2.0 * std::numbers::pi;
    double u1 = (static_cast<double>(rng() >> 11) + 0.5) * (1.0 / 9007199254740992.0);
    double u2 = (static_cast<double>(rng() >> 11) + 0.5) * (1.0 / 9007199254740992.0);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
}

Vector standard_normal_vector(int n, std::mt19937_64& rng) {
    Vector z(n);
    for (int i = 0; i < n; ++i) z[i] = standard_normal(rng);
    return z;
}

ConstrainedSampler::ConstrainedSampler(const SparsePrecisionBlock& Q,
                                       const ConstraintSet& constraints)
    : n_(Q.n) {
    constraints.validate();
    SparseMat M = Q.Q;
    if (Q.rank_deficiency > 0) {
        // Ridge keeps the factorization SPD; the constraints are expected to
        // pin the null space so draws do not wander along it.
        double scale = M.diagonal().sum() / static_cast<double>(Q.n);
        double ridge = 1e-8 * (scale > 0.0 ? scale : 1.0);
        SparseMat I(Q.n, Q.n);
        I.setIdentity();
        M = M + ridge * I;
    }
    llt_.compute(M);
    if (llt_.info() != Eigen::Success) {
        throw std::runtime_error("ConstrainedSampler: Cholesky factorization failed");
    }
    if (constraints.count() > 0) {
        if (constraints.A.cols() != Q.n) {
            throw std::invalid_argument("ConstrainedSampler: constraint dimension mismatch");
        }
        A_ = constraints.A;
        QinvAt_ = llt_.solve(A_.transpose());
        Matrix S = A_ * QinvAt_;
        AQinvAt_.compute(S);
        if (AQinvAt_.info() != Eigen::Success || !AQinvAt_.isPositive()) {
            throw std::runtime_error("ConstrainedSampler: A Q^-1 A' is singular");
        }
        has_constraints_ = true;
    }
}

Vector ConstrainedSampler::constrain(const Vector& x) const {
    if (!has_constraints_) return x;
    return x - QinvAt_ * AQinvAt_.solve(A_ * x);
}

Vector ConstrainedSampler::sample(std::mt19937_64& rng) const {
    Vector z = standard_normal_vector(n_, rng);
    // Q = P' L L' P, so x = P' L^-T z has covariance Q^-1.
    Vector u = llt_.matrixU().solve(z);
    Vector x = llt_.permutationPinv() * u;
    return constrain(x);
}

std::vector<Vector> ConstrainedSampler::sample_many(int n_samples,
                                                    std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    std::vector<Vector> out;
    out.reserve(static_cast<size_t>(n_samples));
    for (int s = 0; s < n_samples; ++s) out.push_back(sample(rng));
    return out;
}

}  // namespace u5mr::gmrf
