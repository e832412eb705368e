#include "u5mr/priors.hpp"

#include <boost/math/distributions/gamma.hpp>
#include <cmath>
#include <stdexcept>

namespace u5mr::priors {

double GammaPrecisionPrior::log_density_sigma(double sigma) const {
    if (!(sigma > 0.0)) throw std::domain_error("GammaPrecisionPrior: sigma must be positive");
    double tau = 1.0 / (sigma * sigma);
    double logp_tau = shape * std::log(rate) - std::lgamma(shape) +
                      (shape - 1.0) * std::log(tau) - rate * tau;
    // Jacobian |dtau/dsigma| = 2 sigma^-3
    return logp_tau + std::log(2.0) - 3.0 * std::log(sigma);
}

double GammaPrecisionPrior::sigma_quantile(double p) const {
    if (!(p > 0.0 && p < 1.0)) throw std::domain_error("sigma_quantile: p outside (0,1)");
    boost::math::gamma_distribution<double> g(shape, 1.0 / rate);
    // sigma = tau^-1/2 is decreasing in tau
    double tau = boost::math::quantile(g, 1.0 - p);
    return 1.0 / std::sqrt(tau);
}

double PcMaternPrior::lambda_range() const { return -std::log(alpha_range) * range0; }

double PcMaternPrior::lambda_sigma() const { return -std::log(alpha_sigma) / sigma0; }

double PcMaternPrior::log_density(double range, double sigma) const {
    if (!(range > 0.0 && sigma > 0.0)) {
        throw std::domain_error("PcMaternPrior: range and sigma must be positive");
    }
    double lr = lambda_range();
    double ls = lambda_sigma();
    // d = 2: pi(r) = lambda_r r^-2 exp(-lambda_r / r), pi(sigma) = lambda_s exp(-lambda_s sigma)
    double logp_r = std::log(lr) - 2.0 * std::log(range) - lr / range;
    double logp_s = std::log(ls) - ls * sigma;
    return logp_r + logp_s;
}

double PcMaternPrior::cdf_range(double r) const {
    if (!(r > 0.0)) return 0.0;
    return std::exp(-lambda_range() / r);
}

double PcMaternPrior::prob_sigma_exceeds(double s) const {
    if (!(s > 0.0)) return 1.0;
    return std::exp(-lambda_sigma() * s);
}

namespace {
constexpr double kSqrt2 = 1.4142135623730951;

// P(rho > rho0) under the truncated-exponential distance prior with rate lam.
double ar1_tail(double lam, double d0) {
    if (std::abs(lam) < 1e-12) return d0 / kSqrt2;
    return -std::expm1(-lam * d0) / -std::expm1(-lam * kSqrt2);
}
}  // namespace

double PcAr1Prior::lambda() const {
    if (!(rho0 > -1.0 && rho0 < 1.0)) throw std::domain_error("PcAr1Prior: rho0 outside (-1,1)");
    if (!(alpha > 0.0 && alpha < 1.0)) throw std::domain_error("PcAr1Prior: alpha outside (0,1)");
    double d0 = std::sqrt(1.0 - rho0);
    // ar1_tail is increasing in lambda; bisect
    double lo = -200.0, hi = 200.0;
    for (int it = 0; it < 200; ++it) {
        double mid = 0.5 * (lo + hi);
        if (ar1_tail(mid, d0) < alpha) lo = mid;
        else hi = mid;
    }
    return 0.5 * (lo + hi);
}

double PcAr1Prior::log_density(double rho) const {
    if (!(rho > -1.0 && rho < 1.0)) throw std::domain_error("PcAr1Prior: rho outside (-1,1)");
    double lam = lambda();
    double d = std::sqrt(1.0 - rho);
    double log_norm;
    if (std::abs(lam) < 1e-12) {
        log_norm = -std::log(kSqrt2);
    } else {
        log_norm = std::log(std::abs(lam)) - std::log(std::abs(-std::expm1(-lam * kSqrt2)));
    }
    // Jacobian |dd/drho| = 1 / (2 sqrt(1 - rho))
    return log_norm - lam * d - std::log(2.0 * d);
}

double PcAr1Prior::prob_exceeds(double r) const {
    if (r <= -1.0) return 1.0;
    if (r >= 1.0) return 0.0;
    return ar1_tail(lambda(), std::sqrt(1.0 - r));
}

double HyperPriors::log_density(const gmrf::Hyperparameters& theta) const {
    theta.validate();
    double lp = 0.0;
    lp += iid_precision.log_density_sigma(theta.sigma_cluster);
    lp += iid_precision.log_density_sigma(theta.sigma_survey);
    lp += iid_precision.log_density_sigma(theta.sigma_time);
    lp += iid_precision.log_density_sigma(theta.sigma_rw2);
    lp += matern.log_density(theta.range, theta.sigma_spatial);
    lp += ar1.log_density(theta.rho);
    return lp;
}

}  // namespace u5mr::priors
