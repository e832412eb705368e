#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <cstdint>
#include <random>
#include <vector>

#include "u5mr/raster.hpp"

namespace u5mr::gmrf {

using SparseMat = Eigen::SparseMatrix<double>;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

// Symmetric positive-semidefinite precision with a declared null-space
// dimension. The scale parameter multiplies the structure matrix, so entries
// already include it.
struct SparsePrecisionBlock {
    int n = 0;
    SparseMat Q;
    int rank_deficiency = 0;

    void validate() const;  // symmetry and shape checks
};

// Rows of A with right-hand side zero; rows must be linearly independent.
struct ConstraintSet {
    Eigen::MatrixXd A;  // c x n, dense (c is always small here)

    int count() const { return static_cast<int>(A.rows()); }
    void validate() const;
};

// Regular lon/lat grid used as the SPDE discretization. Mass matrix C is the
// lumped (diagonal) cell area; stiffness G is the 5-point Neumann Laplacian,
// symmetric with zero row sums.
struct SpatialMesh {
    int ncols = 0;
    int nrows = 0;
    double xllcorner = 0.0;
    double yllcorner = 0.0;
    double cellsize = 0.0;

    int size() const { return ncols * nrows; }
    double cell_area() const { return cellsize * cellsize; }
    double center_lon(int cell) const {
        return xllcorner + (cell % ncols + 0.5) * cellsize;
    }
    double center_lat(int cell) const {
        return yllcorner + (nrows - cell / ncols - 0.5) * cellsize;
    }

    SparseMat mass_matrix() const;
    SparseMat stiffness_matrix() const;

    static SpatialMesh from_grid(const raster::Grid& g);
    raster::Grid to_grid() const;  // zero-filled grid with the same geometry

    // Bilinear interpolation weights over the four surrounding cell centers
    // (clamped at the boundary). Returns (cell, weight) pairs.
    std::vector<std::pair<int, double>> bilinear_weights(double lon, double lat) const;
};

struct Hyperparameters {
    double sigma_cluster = 0.1;   // eta
    double sigma_survey = 0.05;   // upsilon
    double sigma_time = 0.05;     // epsilon
    double sigma_rw2 = 0.02;      // phi
    double range = 1.5;           // spatial range, degrees
    double sigma_spatial = 0.5;   // marginal sd of the space-time field
    double rho = 0.9;             // AR(1) coefficient across knots

    void validate() const;
};

// Q = sigma^-2 D'D with D the (T-2) x T second-difference operator.
SparsePrecisionBlock rw2_precision(int T, double sigma);

// First-difference analogue, rank deficiency 1.
SparsePrecisionBlock rw1_precision(int T, double sigma);

// Unit-marginal-variance stationary AR(1); tridiagonal, inverse rho^|i-j|.
SparsePrecisionBlock ar1_precision(int T, double rho);

SparsePrecisionBlock iid_precision(int n, double sigma);

// GMRF approximation of a Matern field (smoothness nu = 1):
// Q = tau^2 (kappa^2 C + G) C^-1 (kappa^2 C + G), kappa = sqrt(8)/range,
// tau^2 = 1 / (4 pi kappa^2 sigma^2).
SparsePrecisionBlock spde_matern_precision(const SpatialMesh& mesh, double range,
                                           double sigma);

// Q_T kron Q_S, knot-major / space-minor ordering: element (h, cell) lives at
// index h * n_cells + cell. Factors must be full rank.
SparsePrecisionBlock separable_st_precision(const SparsePrecisionBlock& Qt,
                                            const SparsePrecisionBlock& Qs);

SparseMat kronecker(const SparseMat& A, const SparseMat& B);

// Temporal layout of the piecewise-linear knot interpolation: knots at
// year0, year0+5, ..., spanning `num_knots` knots.
struct KnotGrid {
    int year0 = 1980;
    int num_knots = 8;

    int last_year() const { return year0 + 5 * (num_knots - 1); }
    // (knot h, alpha) with year interpolated as (1-alpha) * knot h + alpha * knot h+1.
    std::pair<int, double> locate(int year) const;
};

// Sparse projector from (year, cell) to (knot, cell) stacking, year-major.
// Rows sum to one; at most two nonzero knots per year.
SparseMat knot_interpolation_matrix(const KnotGrid& knots, int year_begin, int year_end,
                                    int n_cells);

// One population-weighted integrate-to-zero row per knot over the space-time
// block. `density` holds one nonnegative value per mesh cell.
ConstraintSet population_constraints(const SpatialMesh& mesh, const Vector& density,
                                     int num_knots);

// Draws from N(0, Q^-1) restricted to Ax = 0 by conditioning by kriging:
// x* = x - Q^-1 A' (A Q^-1 A')^-1 A x. Rank-deficient blocks receive a small
// diagonal ridge before factorization; the constraints must then cover the
// null space for the draw to be meaningful.
class ConstrainedSampler {
  public:
    ConstrainedSampler(const SparsePrecisionBlock& Q, const ConstraintSet& constraints);

    Vector sample(std::mt19937_64& rng) const;
    std::vector<Vector> sample_many(int n_samples, std::uint64_t seed) const;

    // Applies the kriging correction to an arbitrary vector.
    Vector constrain(const Vector& x) const;

    int dimension() const { return n_; }

  private:
    int n_;
    Eigen::SimplicialLLT<SparseMat> llt_;
    Eigen::MatrixXd A_;
    Eigen::MatrixXd QinvAt_;       // Q^-1 A'
    Eigen::LDLT<Matrix> AQinvAt_;  // factorized A Q^-1 A'
    bool has_constraints_ = false;
};

// log det(Q) from a computed sparse Cholesky factorization.
double cholesky_logdet(const Eigen::SimplicialLLT<SparseMat>& llt);

// Standard normal draw helper; Box-Muller on the raw 64-bit stream so results
// are reproducible across standard libraries.
double standard_normal(std::mt19937_64& rng);
Vector standard_normal_vector(int n, std::mt19937_64& rng);

}  // namespace u5mr::gmrf
