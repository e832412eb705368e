#pragma once

#include "u5mr/gmrf.hpp"

namespace u5mr::priors {

// Gamma(shape, rate) prior on a precision parameter tau = 1/sigma^2.
struct GammaPrecisionPrior {
    double shape = 0.5;
    double rate = 0.0005;

    double log_density_sigma(double sigma) const;  // density in sigma, with Jacobian
    double sigma_quantile(double p) const;         // quantile of the implied sigma
};

// Penalized-complexity prior for a Matern field in d=2, parameterized by
// tail conditions P(range < range0) = alpha_range, P(sigma > sigma0) = alpha_sigma.
struct PcMaternPrior {
    double range0 = 0.5;
    double alpha_range = 0.05;
    double sigma0 = 3.0;
    double alpha_sigma = 0.05;

    double lambda_range() const;  // rate for the range tail
    double lambda_sigma() const;

    double log_density(double range, double sigma) const;
    double cdf_range(double r) const;                // P(range < r)
    double prob_sigma_exceeds(double s) const;       // P(sigma > s)
};

// PC prior for an AR(1) coefficient with base model rho = 1, defined on the
// distance d(rho) = sqrt(1 - rho) truncated at rho = -1, calibrated by
// P(rho > rho0) = alpha.
struct PcAr1Prior {
    double rho0 = 0.9;
    double alpha = 0.5;

    double lambda() const;
    double log_density(double rho) const;
    double prob_exceeds(double r) const;  // P(rho > r)
};

struct HyperPriors {
    GammaPrecisionPrior iid_precision;  // shared by cluster, survey, time, RW2
    PcMaternPrior matern;
    PcAr1Prior ar1;

    double log_density(const gmrf::Hyperparameters& theta) const;
};

}  // namespace u5mr::priors
