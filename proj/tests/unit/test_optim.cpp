#include <catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <vector>

#include "dualsynth/optim.hpp"

using namespace dualsynth;
using Catch::Matchers::WithinRel;

using T64 = Tensor<double>;

namespace {

ParamSet<double> single_param(std::vector<int> shape, double fill) {
    ParamSet<double> p;
    p.add("theta", T64::full(std::move(shape), fill));
    return p;
}

}  // namespace

TEST_CASE("first step from a fresh state matches the closed form") {
    auto params = single_param({1}, 0.0);
    auto state = make_adam_state(params);
    adam_step(params, {T64::full({1}, 1.0)}, state, 1e-3);
    // m-hat and v-hat are exactly 1 after one unit-gradient step, so the
    // update is lr / sqrt(1 + eps)
    CHECK_THAT(params.values[0][0], WithinRel(-9.99999995e-4, 1e-12));
    CHECK(state.t == 1);
}

TEST_CASE("zero gradients leave parameters unchanged") {
    auto params = single_param({2, 3}, 1.25);
    auto state = make_adam_state(params);
    adam_step(params, {T64::zeros({2, 3})}, state, 1e-2);
    for (int64_t i = 0; i < 6; i++) CHECK(params.values[0][i] == 1.25);
    CHECK(state.t == 1);
}

TEST_CASE("identical calls from identical states give identical results") {
    Rng rng(3);
    auto g = T64::normal({4}, rng);
    auto run = [&]() {
        auto params = single_param({4}, 0.5);
        auto state = make_adam_state(params);
        for (int step = 0; step < 3; step++) adam_step(params, {g}, state, 2e-3);
        return *params.values[0].data;
    };
    auto a = run();
    auto b = run();
    CHECK(a == b);
}

TEST_CASE("trajectory matches an independent scalar implementation") {
    // hand-rolled reference over five steps with varying gradients
    Rng rng(9);
    std::vector<double> gs(5);
    for (auto& g : gs) g = rng.normal();

    double theta_ref = 0.7, m = 0.0, v = 0.0;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8, lr = 5e-3;
    for (int t = 1; t <= 5; t++) {
        double g = gs[size_t(t - 1)];
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        double mhat = m / (1 - std::pow(b1, t));
        double vhat = v / (1 - std::pow(b2, t));
        theta_ref -= lr * mhat / std::sqrt(vhat + eps);
    }

    auto params = single_param({1}, 0.7);
    auto state = make_adam_state(params);
    for (double g : gs) adam_step(params, {T64::full({1}, g)}, state, lr);
    CHECK_THAT(params.values[0][0], WithinRel(theta_ref, 1e-12));
}

TEST_CASE("moment buffers mirror the parameter shapes") {
    ParamSet<double> p;
    p.add("a", T64::zeros({3, 4}));
    p.add("b", T64::zeros({7}));
    auto s = make_adam_state(p);
    REQUIRE(s.m.size() == 2);
    CHECK(s.m[0].shape == std::vector<int>{3, 4});
    CHECK(s.v[1].shape == std::vector<int>{7});
    CHECK(s.t == 0);
}

TEST_CASE("non-finite gradients abort naming the parameter") {
    ParamSet<double> p;
    p.add("gen.head.w", T64::zeros({2}));
    auto s = make_adam_state(p);
    auto bad = T64::from({2}, {0.0, std::numeric_limits<double>::quiet_NaN()});
    try {
        adam_step(p, {bad}, s, 1e-3);
        FAIL("expected NonFiniteError");
    } catch (const NonFiniteError& e) {
        CHECK(std::string(e.what()).find("gen.head.w") != std::string::npos);
    }
    // the failed step must not have touched parameters or the step counter
    CHECK(p.values[0][0] == 0.0);
    CHECK(s.t == 0);
}

TEST_CASE("mismatched gradients are rejected") {
    auto p = single_param({2}, 0.0);
    auto s = make_adam_state(p);
    CHECK_THROWS_AS(adam_step(p, {T64::zeros({3})}, s, 1e-3), ShapeError);
    CHECK_THROWS_AS(adam_step(p, {}, s, 1e-3), ShapeError);
    CHECK_THROWS_AS(adam_step(p, {T64::zeros({2})}, s, 0.0), ConfigError);
}

TEST_CASE("learning-rate schedule closed forms") {
    CHECK(scheduled_lr(5e-3, 4, 0.5) == 1.25e-3);
    CHECK(scheduled_lr(5e-3, 0, 0.5) == 5e-3);
    CHECK(scheduled_lr(5e-3, 1, 0.5) == 5e-3);
    CHECK_THAT(scheduled_lr(1e-4, 2, 0.2), WithinRel(2e-5, 1e-12));
    CHECK_THAT(scheduled_lr(1e-3, 7, 0.5), WithinRel(1.25e-4, 1e-12));
    CHECK_THROWS_AS(scheduled_lr(1e-3, -1, 0.5), ConfigError);
    CHECK_THROWS_AS(scheduled_lr(1e-3, 3, 0.5, 0), ConfigError);
    CHECK_THROWS_AS(scheduled_lr(-1e-3, 3, 0.5), ConfigError);
}

TEST_CASE("schedule is piecewise constant over each period") {
    for (int e = 0; e < 12; e++) {
        double lr = scheduled_lr(2e-3, e, 0.5, 3);
        double expect = 2e-3;
        for (int k = 0; k < e / 3; k++) expect *= 0.5;
        CHECK(lr == expect);
    }
}
