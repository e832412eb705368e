#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "u5mr/priors.hpp"

using namespace u5mr;

namespace {

// Simpson's rule on [a, b].
template <typename F>
double integrate(F f, double a, double b, int n = 20000) {
    double h = (b - a) / n;
    double sum = f(a) + f(b);
    for (int i = 1; i < n; ++i) sum += f(a + i * h) * (i % 2 == 0 ? 2.0 : 4.0);
    return sum * h / 3.0;
}

}  // namespace

TEST_CASE("gamma precision prior has the documented sigma quantiles") {
    priors::GammaPrecisionPrior prior;
    CHECK(std::abs(prior.sigma_quantile(0.05) - 0.016) / 0.016 < 0.05);
    CHECK(std::abs(prior.sigma_quantile(0.50) - 0.047) / 0.047 < 0.05);
    CHECK(std::abs(prior.sigma_quantile(0.95) - 0.52) / 0.52 < 0.05);
}

TEST_CASE("gamma precision quantiles are monotone and density integrates to one") {
    priors::GammaPrecisionPrior prior;
    CHECK(prior.sigma_quantile(0.1) < prior.sigma_quantile(0.5));
    CHECK(prior.sigma_quantile(0.5) < prior.sigma_quantile(0.9));
    double mass = integrate(
        [&](double s) { return s > 0 ? std::exp(prior.log_density_sigma(s)) : 0.0; }, 1e-6, 50.0,
        200000);
    CHECK(mass == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("gamma quantile inverts the sigma distribution") {
    priors::GammaPrecisionPrior prior;
    // P(sigma < q(p)) computed by quadrature should return p.
    for (double p : {0.1, 0.5, 0.9}) {
        double q = prior.sigma_quantile(p);
        double mass = integrate(
            [&](double s) { return std::exp(prior.log_density_sigma(s)); }, 1e-8, q, 100000);
        CHECK(mass == doctest::Approx(p).epsilon(2e-3));
    }
}

TEST_CASE("matern prior hits its calibration tails exactly") {
    priors::PcMaternPrior prior;
    CHECK(prior.cdf_range(0.5) == doctest::Approx(0.05).epsilon(1e-10));
    CHECK(prior.prob_sigma_exceeds(3.0) == doctest::Approx(0.05).epsilon(1e-10));
    CHECK(prior.cdf_range(1e9) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(prior.prob_sigma_exceeds(0.0) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("matern joint density factorizes and matches its own tail probabilities") {
    priors::PcMaternPrior prior;
    // Marginal mass checks by quadrature of the joint density.
    double p_range = integrate(
        [&](double r) {
            return integrate([&](double s) { return std::exp(prior.log_density(r, s)); }, 1e-6,
                             60.0, 4000);
        },
        1e-6, 0.5, 400);
    CHECK(std::abs(p_range - 0.05) < 1e-3);

    double p_sigma = integrate(
        [&](double s) {
            return integrate([&](double r) { return std::exp(prior.log_density(r, s)); }, 1e-6,
                             200.0, 4000);
        },
        3.0, 60.0, 400);
    CHECK(std::abs(p_sigma - 0.05) < 1e-3);
}

TEST_CASE("matern calibration responds to its tail settings") {
    priors::PcMaternPrior tight;
    tight.range0 = 2.0;
    tight.alpha_range = 0.2;
    CHECK(tight.cdf_range(2.0) == doctest::Approx(0.2).epsilon(1e-10));
    CHECK(tight.lambda_range() > 0.0);
}

TEST_CASE("autoregressive prior matches its exceedance calibration") {
    priors::PcAr1Prior prior;  // P(rho > 0.9) = 0.5
    CHECK(prior.prob_exceeds(0.9) == doctest::Approx(0.5).epsilon(1e-10));
    CHECK(prior.prob_exceeds(-1.0) == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(prior.prob_exceeds(0.99) < prior.prob_exceeds(0.5));

    // Substitute t = sqrt(1 - rho) to remove the integrable singularity at rho = 1.
    auto mass_above = [&](double rho_lo) {
        double t_hi = std::sqrt(1.0 - rho_lo) - 1e-9;
        return integrate(
            [&](double t) { return std::exp(prior.log_density(1.0 - t * t)) * 2.0 * t; }, 1e-6,
            t_hi, 100000);
    };
    CHECK(mass_above(-1.0 + 1e-7) == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(mass_above(0.9) == doctest::Approx(0.5).epsilon(1e-5));
}

TEST_CASE("joint hyperparameter density sums its component log densities") {
    priors::HyperPriors hp;
    gmrf::Hyperparameters theta;
    double total = hp.log_density(theta);
    double parts = hp.iid_precision.log_density_sigma(theta.sigma_cluster) +
                   hp.iid_precision.log_density_sigma(theta.sigma_survey) +
                   hp.iid_precision.log_density_sigma(theta.sigma_time) +
                   hp.iid_precision.log_density_sigma(theta.sigma_rw2) +
                   hp.matern.log_density(theta.range, theta.sigma_spatial) +
                   hp.ar1.log_density(theta.rho);
    CHECK(total == doctest::Approx(parts).epsilon(1e-10));
}
