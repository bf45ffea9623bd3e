#include "mindiff_doctest.hpp"

#include <cmath>

#include "mindiff/schedule.hpp"

using namespace mindiff;

TEST_CASE("schedule invariants and spot values") {
    for (auto kind : {ScheduleKind::Linear, ScheduleKind::Cosine}) {
        NoiseSchedule s(1000, kind);
        CHECK(s.gamma(1) == doctest::Approx(1.0 - s.beta(1)).epsilon(1e-15));
        CHECK(s.sigma(1) == 0.0);  // gamma(0) == 1 convention
        double prev = 1.0;
        for (int64_t t = 1; t <= 1000; ++t) {
            CHECK(s.beta(t) > 0.0);
            CHECK(s.beta(t) < 1.0);
            CHECK(s.gamma(t) < prev);
            CHECK(s.gamma(t) > 0.0);
            CHECK(s.sigma(t) >= 0.0);
            CHECK(s.sigma(t) <= std::sqrt(s.beta(t)) + 1e-15);
            prev = s.gamma(t);
        }
    }
    // linear 1e-4..2e-2: the cumulative product collapses
    NoiseSchedule lin(1000, ScheduleKind::Linear);
    CHECK(lin.gamma(1000) < 1e-4);
    CHECK_THROWS_AS(NoiseSchedule(0, ScheduleKind::Linear), std::invalid_argument);
    CHECK_THROWS_AS(schedule_kind_from_string("quadratic"), std::invalid_argument);
    CHECK_THROWS_AS(lin.beta(0), std::domain_error);
    CHECK_THROWS_AS(lin.beta(1001), std::domain_error);
}

TEST_CASE("q_sample trivial cases") {
    NoiseSchedule s(10, ScheduleKind::Linear);
    auto z0 = torch::zeros({4});
    auto eps = torch::zeros({4});
    CHECK(q_sample(z0, 3, eps, s).abs().max().item<double>() == 0.0);
    auto z = torch::randn({4});
    // t=1 with tiny beta: z_t ~ z0
    auto zt = q_sample(z, 1, torch::zeros({4}), s);
    CHECK((zt - std::sqrt(s.gamma(1)) * z).abs().max().item<double>() < 1e-7);
}

TEST_CASE("q_sample marginal moments over 1e5 draws") {
    NoiseSchedule s(1000, ScheduleKind::Linear);
    const int64_t draws = 100000;
    const double z0 = 1.7;
    auto gen = torch::make_generator<torch::CPUGeneratorImpl>(42);
    for (int64_t t : {1L, 10L, 100L, 1000L}) {
        auto eps = torch::randn({draws}, gen, torch::kFloat64);
        auto zt = q_sample(torch::full({draws}, z0, torch::kFloat64), t, eps, s);
        double want_mean = std::sqrt(s.gamma(t)) * z0;
        double want_var = 1.0 - s.gamma(t);
        double mean = zt.mean().item<double>();
        double var = zt.var(false).item<double>();
        double se_mean = std::sqrt(want_var / draws) + 1e-12;
        double se_var = want_var * std::sqrt(2.0 / draws) + 1e-12;
        CHECK(std::abs(mean - want_mean) < 3 * se_mean);
        CHECK(std::abs(var - want_var) < 3 * se_var);
    }
}

TEST_CASE("composed q_step matches closed form at t=5") {
    NoiseSchedule s(10, ScheduleKind::Linear);
    const int64_t draws = 100000;
    auto gen = torch::make_generator<torch::CPUGeneratorImpl>(7);
    auto z = torch::full({draws}, 2.0, torch::kFloat64);
    for (int64_t t = 1; t <= 5; ++t) z = q_step(z, t, gen, s);
    double want_mean = std::sqrt(s.gamma(5)) * 2.0;
    double want_var = 1.0 - s.gamma(5);
    CHECK(std::abs(z.mean().item<double>() - want_mean) < 3 * std::sqrt(want_var / draws));
    CHECK(std::abs(z.var(false).item<double>() - want_var) <
          3 * want_var * std::sqrt(2.0 / draws));
}

TEST_CASE("q_step single-step variance matches beta_t") {
    NoiseSchedule s(100, ScheduleKind::Linear);
    const int64_t draws = 100000;
    auto gen = torch::make_generator<torch::CPUGeneratorImpl>(9);
    const int64_t t = 50;
    auto z_prev = torch::full({draws}, 0.5, torch::kFloat64);
    auto zt = q_step(z_prev, t, gen, s);
    auto resid = zt - std::sqrt(1.0 - s.beta(t)) * z_prev;
    double var = resid.var(false).item<double>();
    CHECK(std::abs(var - s.beta(t)) < 3 * s.beta(t) * std::sqrt(2.0 / draws));
}

TEST_CASE("p_step determinism at t=1 and analytic limits") {
    NoiseSchedule s(10, ScheduleKind::Linear);
    auto gen = torch::make_generator<torch::CPUGeneratorImpl>(1);
    auto zt = torch::randn({8}, gen);
    auto eps_pred = torch::randn({8}, gen);
    auto a = p_step_from_eps(zt, eps_pred, 1, gen, s);
    auto b = p_step_from_eps(zt, eps_pred, 1, gen, s);
    CHECK(torch::equal(a, b));  // sigma_1 = 0: no randomness consumed
    CHECK_THROWS_AS(p_step_from_eps(zt, eps_pred, 0, gen, s), std::domain_error);
    // eps_pred = 0, beta small: mu ~ z_t / sqrt(1-beta)
    auto mu = posterior_mean(zt, torch::zeros({8}), 1, s);
    CHECK((mu - zt / std::sqrt(1.0 - s.beta(1))).abs().max().item<double>() < 1e-6);
}

// 1-D analytically solvable chain: z0 scalar constant c, forward marginal at T
// then reverse with the exact posterior eps* = (z_t - sqrt(g) c)/sqrt(1-g).
// The chain must land on c with variance -> 0 accumulated per-step sigma^2.
TEST_CASE("reverse chain with exact eps recovers the source within 2%") {
    NoiseSchedule s(50, ScheduleKind::Linear);
    const int64_t chains = 10000;
    const double c = 1.25;
    auto gen = torch::make_generator<torch::CPUGeneratorImpl>(33);
    auto z = torch::randn({chains}, gen, torch::kFloat64);  // z_T ~ N(0,1)
    for (int64_t t = s.timesteps(); t >= 1; --t) {
        auto eps_star = (z - std::sqrt(s.gamma(t)) * c) / std::sqrt(1.0 - s.gamma(t));
        z = p_step_from_eps(z, eps_star, t, gen, s);
    }
    CHECK(std::abs(z.mean().item<double>() - c) < 0.02 * std::abs(c));
}
