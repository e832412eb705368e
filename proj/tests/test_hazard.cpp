#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <random>

#include "u5mr/hazard.hpp"

using namespace u5mr;

TEST_CASE("age band lookup follows the month table") {
    CHECK(hazard::age_band_of_month(0) == 1);
    CHECK(hazard::age_band_of_month(1) == 2);
    CHECK(hazard::age_band_of_month(11) == 2);
    CHECK(hazard::age_band_of_month(12) == 3);
    CHECK(hazard::age_band_of_month(23) == 3);
    CHECK(hazard::age_band_of_month(24) == 4);
    CHECK(hazard::age_band_of_month(36) == 5);
    CHECK(hazard::age_band_of_month(48) == 6);
    CHECK(hazard::age_band_of_month(59) == 6);
    CHECK_THROWS_AS(hazard::age_band_of_month(-1), std::domain_error);
    CHECK_THROWS_AS(hazard::age_band_of_month(60), std::domain_error);
}

TEST_CASE("age band map is total and surjective with the right preimage sizes") {
    std::array<int, hazard::kNumAgeBands> counts{};
    for (int m = 0; m < hazard::kMaxMonths; ++m) {
        int band = hazard::age_band_of_month(m);
        REQUIRE(band >= 1);
        REQUIRE(band <= hazard::kNumAgeBands);
        ++counts[static_cast<size_t>(band - 1)];
    }
    for (int a = 0; a < hazard::kNumAgeBands; ++a) {
        CHECK(counts[static_cast<size_t>(a)] == hazard::kBandMonthSpan[static_cast<size_t>(a)]);
    }
}

TEST_CASE("expansion of a full survivor yields 60 survival records") {
    hazard::BirthRecord rec;
    rec.child_id = "a";
    rec.birth_year = 2000;
    rec.months_observed = 60;
    auto pm = hazard::expand_birth_history(rec);
    REQUIRE(pm.size() == 60);
    for (const auto& p : pm) CHECK(p.outcome == 0);
    CHECK(pm.front().year == 2000);
    CHECK(pm[11].year == 2000);
    CHECK(pm[12].year == 2001);
    CHECK(pm.back().year == 2004);
}

TEST_CASE("immediate death expands to a single terminal record") {
    hazard::BirthRecord rec;
    rec.child_id = "a";
    rec.birth_year = 2000;
    rec.months_observed = 12;
    rec.died = true;
    rec.death_month = 0;
    auto pm = hazard::expand_birth_history(rec);
    REQUIRE(pm.size() == 1);
    CHECK(pm.front().outcome == 1);
    CHECK(pm.front().month == 0);
}

TEST_CASE("death at month 12 under censoring at 30 gives 13 records") {
    hazard::BirthRecord rec;
    rec.child_id = "a";
    rec.birth_year = 1995;
    rec.months_observed = 30;
    rec.died = true;
    rec.death_month = 12;
    auto pm = hazard::expand_birth_history(rec);
    REQUIRE(pm.size() == 13);
    for (size_t i = 0; i + 1 < pm.size(); ++i) CHECK(pm[i].outcome == 0);
    CHECK(pm.back().outcome == 1);
    CHECK(pm.back().age_band == 3);
}

TEST_CASE("expansion conserves deaths over random records") {
    std::mt19937_64 rng(5);
    int total_deaths = 0;
    int expanded_deaths = 0;
    for (int i = 0; i < 500; ++i) {
        hazard::BirthRecord rec;
        rec.child_id = "r" + std::to_string(i);
        rec.birth_year = 1990 + static_cast<int>(rng() % 20);
        rec.birth_month = static_cast<int>(rng() % 12);
        rec.months_observed = 1 + static_cast<int>(rng() % 60);
        if (rng() % 2 == 0) {
            rec.died = true;
            rec.death_month = static_cast<int>(rng() % rec.months_observed);
            ++total_deaths;
        }
        for (const auto& p : hazard::expand_birth_history(rec)) {
            expanded_deaths += p.outcome;
        }
    }
    CHECK(expanded_deaths == total_deaths);
}

TEST_CASE("death month beyond the censoring horizon is rejected") {
    hazard::BirthRecord rec;
    rec.child_id = "a";
    rec.birth_year = 2000;
    rec.months_observed = 10;
    rec.died = true;
    rec.death_month = 10;
    CHECK_THROWS_AS(hazard::expand_birth_history(rec), std::invalid_argument);
}

TEST_CASE("U5MR from hazards handles the boundary cases") {
    hazard::HazardVector h;
    CHECK(hazard::u5mr_from_hazards(h) == doctest::Approx(0.0));
    h.q[0] = 1.0;
    CHECK(hazard::u5mr_from_hazards(h) == doctest::Approx(1.0));
}

TEST_CASE("constant hazard 0.001 gives 1 - 0.999^60") {
    hazard::HazardVector h;
    h.q.fill(0.001);
    double expected = 1.0 - std::pow(0.999, 60);
    CHECK(hazard::u5mr_from_hazards(h) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(hazard::u5mr_from_hazards(h) == doctest::Approx(0.0582).epsilon(1e-3));
}

TEST_CASE("U5MR is monotone in each band hazard") {
    hazard::HazardVector h;
    h.q = {0.01, 0.002, 0.001, 0.001, 0.0005, 0.0005};
    double base = hazard::u5mr_from_hazards(h);
    for (int a = 0; a < hazard::kNumAgeBands; ++a) {
        hazard::HazardVector hh = h;
        hh.q[static_cast<size_t>(a)] += 0.001;
        CHECK(hazard::u5mr_from_hazards(hh) > base);
    }
}

TEST_CASE("month-by-month simulation converges to the product formula") {
    hazard::HazardVector h;
    h.q = {0.02, 0.003, 0.0008, 0.0006, 0.0004, 0.0003};
    double expected = hazard::u5mr_from_hazards(h);
    std::mt19937_64 rng(11);
    const int N = 1000000;
    int deaths = 0;
    auto u01 = [&rng]() { return static_cast<double>(rng() >> 11) * 0x1.0p-53; };
    for (int i = 0; i < N; ++i) {
        for (int m = 0; m < hazard::kMaxMonths; ++m) {
            if (u01() < h.q[static_cast<size_t>(hazard::age_band_of_month(m) - 1)]) {
                ++deaths;
                break;
            }
        }
    }
    double frac = static_cast<double>(deaths) / N;
    double se = std::sqrt(expected * (1.0 - expected) / N);
    CHECK(std::abs(frac - expected) < 4.0 * se);
}

TEST_CASE("logit and expit are mutual inverses") {
    CHECK(hazard::expit(0.0) == doctest::Approx(0.5));
    CHECK(hazard::logit(0.5) == doctest::Approx(0.0));
    CHECK(hazard::expit(hazard::logit(0.0582)) == doctest::Approx(0.0582).epsilon(1e-12));
    CHECK(hazard::logit(hazard::expit(-7.3)) == doctest::Approx(-7.3).epsilon(1e-10));
    CHECK_THROWS_AS(hazard::logit(0.0), std::domain_error);
    CHECK_THROWS_AS(hazard::logit(1.0), std::domain_error);
}
