#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "dualsynth/losses.hpp"

using namespace dualsynth;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

using T64 = Tensor<double>;
using T32 = Tensor<float>;

namespace {

double val(const Tensor<double>& t) { return (*t.data)[0]; }

// small critic used to pin the gradient-penalty closed forms: score = x . w
// per sample, weights held as plain constants
struct LinearCritic {
    T64 w_col;  // [D,1]
    T64 operator()(const T64& x) const {
        return reshape(matmul(x, w_col), {x.shape[0]});
    }
};

void zero_params(std::vector<T64>& values) {
    for (auto& v : values)
        for (int64_t i = 0; i < v.numel(); i++) v[i] = 0.0;
}

D1Config micro_d1_config(bool sn) {
    D1Config cfg;
    cfg.in_h = cfg.in_w = 8;
    cfg.stage_channels = {2, 2, 2};
    cfg.conv4_channels = 2;
    cfg.fc_units = {4, 2};
    cfg.spectral_norm = sn;
    return cfg;
}

D2Config micro_d2_config(bool sn) {
    D2Config cfg;
    cfg.down_channels = {2, 2, 2};
    cfg.up_channels = {2, 2, 2};
    cfg.spectral_norm = sn;
    return cfg;
}

}  // namespace

// ---------------------------------------------------------------------------
// reconstruction
// ---------------------------------------------------------------------------

TEST_CASE("reconstruction loss closed forms") {
    Rng rng(5);
    auto y = T64::normal({2, 1, 3, 3}, rng);

    SECTION("identical inputs give exactly zero for both exponents") {
        CHECK(val(recon_loss(y, y, 1)) == 0.0);
        CHECK(val(recon_loss(y, y, 2)) == 0.0);
    }
    SECTION("constant absolute difference of 5 with p=1") {
        auto out = add_scalar(y, -5.0);
        CHECK_THAT(val(recon_loss(y, out, 1)), WithinRel(5.0, 1e-12));
    }
    SECTION("squared error averages the squares") {
        auto a = T64::from({2}, {3.0, -3.0});
        auto b = T64::zeros({2});
        CHECK_THAT(val(recon_loss(a, b, 2)), WithinRel(9.0, 1e-12));
        CHECK_THAT(val(recon_loss(b, a, 2)), WithinRel(9.0, 1e-12));
    }
    SECTION("invalid exponent and shape mismatch are rejected") {
        CHECK_THROWS_AS(recon_loss(y, y, 3), ConfigError);
        CHECK_THROWS_AS(recon_loss(y, T64::zeros({2, 1, 3, 4}), 1), ShapeError);
    }
}

TEST_CASE("reconstruction loss gradient matches finite differences") {
    Rng rng(11);
    auto y = T64::normal({2, 1, 4, 4}, rng);
    // keep |y - out| away from the p=1 kink so central differences are clean
    std::vector<double> offs(size_t(y.numel()));
    for (auto& o : offs) o = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.5, 1.5);

    for (int p : {1, 2}) {
        auto value = [&](const T64& out_raw) {
            Tape<double> tape;
            auto out = tape.leaf(out_raw);
            return std::pair<double, T64>(val(recon_loss(y, out, p)), out);
        };
        T64 out0 = y.detached();
        for (int64_t i = 0; i < out0.numel(); i++) out0[i] += offs[size_t(i)];

        Tape<double> tape;
        auto out = tape.leaf(out0);
        auto gm = backward(recon_loss(y, out, p));
        auto g = gm.grad_of(out);

        const double h = 1e-6;
        double worst = 0.0;
        for (int64_t i = 0; i < out0.numel(); i++) {
            auto up = out0.detached();
            up[i] += h;
            auto down = out0.detached();
            down[i] -= h;
            double fd = (value(up).first - value(down).first) / (2 * h);
            double denom = std::max({std::abs(fd), std::abs(g[i]), 1.0});
            worst = std::max(worst, std::abs(g[i] - fd) / denom);
        }
        CHECK(worst <= 1e-5);
    }
}

// ---------------------------------------------------------------------------
// interpolation
// ---------------------------------------------------------------------------

TEST_CASE("interpolation endpoints and midpoint values") {
    Rng rng(7);
    auto real = T64::normal({3, 1, 2, 2}, rng);
    auto fake = T64::normal({3, 1, 2, 2}, rng);

    SECTION("epsilon one returns the real sample, zero the generated one") {
        Tape<double> tape;
        auto s1 = interpolate_with_eps(tape, real, fake, {1.0, 1.0, 1.0});
        auto s0 = interpolate_with_eps(tape, real, fake, {0.0, 0.0, 0.0});
        for (int64_t i = 0; i < real.numel(); i++) {
            CHECK(s1.x_hat[i] == real[i]);
            CHECK(s0.x_hat[i] == fake[i]);
        }
        CHECK(s1.x_hat.requires_grad());
    }
    SECTION("quarter mix of 4 and 0 is 1") {
        Tape<double> tape;
        auto s = interpolate_with_eps(tape, T64::full({1, 2}, 4.0), T64::zeros({1, 2}), {0.25});
        CHECK(s.x_hat[0] == 1.0);
        CHECK(s.x_hat[1] == 1.0);
    }
    SECTION("random draw stays in range and is recorded per sample") {
        Tape<double> tape;
        Rng r(99);
        auto s = interpolate(tape, real, fake, r);
        REQUIRE(s.epsilon.size() == 3);
        for (int b = 0; b < 3; b++) {
            CHECK(s.epsilon[size_t(b)] >= 0.0);
            CHECK(s.epsilon[size_t(b)] < 1.0);
            for (int64_t i = 0; i < 4; i++) {
                int64_t k = b * 4 + i;
                double expect = s.epsilon[size_t(b)] * real[k] +
                                (1.0 - s.epsilon[size_t(b)]) * fake[k];
                CHECK_THAT(s.x_hat[k], WithinAbs(expect, 1e-15));
            }
        }
    }
    SECTION("wrong epsilon count and out-of-range epsilon are rejected") {
        Tape<double> tape;
        CHECK_THROWS_AS(interpolate_with_eps(tape, real, fake, {0.5}), ShapeError);
        CHECK_THROWS_AS(interpolate_with_eps(tape, real, fake, {0.5, 1.5, 0.5}), ContractError);
    }
}

// ---------------------------------------------------------------------------
// critic loss and gradient penalty
// ---------------------------------------------------------------------------

TEST_CASE("constant critic pays exactly the penalty coefficient") {
    Rng rng(13);
    auto real = T64::normal({4, 3}, rng);
    auto fake = T64::normal({4, 3}, rng);
    Tape<double> tape;
    auto interp = interpolate_with_eps(tape, real, fake, {0.1, 0.4, 0.6, 0.9});

    SECTION("critic connected to the graph but insensitive to its input") {
        auto critic = [](const T64& x) {
            return add_scalar(scale(sum_per_sample(x), 0.0), 3.0);
        };
        auto loss = critic_loss_with(critic, real, fake, interp, 10.0);
        CHECK_THAT(val(loss), WithinRel(10.0, 1e-12));
    }
    SECTION("critic returning a plain constant tensor") {
        auto critic = [](const T64& x) { return T64::full({x.shape[0]}, -2.0); };
        auto loss = critic_loss_with(critic, real, fake, interp, 7.5);
        CHECK_THAT(val(loss), WithinRel(7.5, 1e-12));
    }
}

TEST_CASE("unit-norm linear critic pays no penalty") {
    LinearCritic critic{T64::from({2, 1}, {0.6, 0.8})};
    auto real = T64::from({2, 2}, {1.0, 2.0, -1.0, 0.5});
    auto fake = T64::from({2, 2}, {0.0, 1.0, 2.0, -0.5});
    Tape<double> tape;
    auto interp = interpolate_with_eps(tape, real, fake, {0.3, 0.7});
    auto loss = critic_loss_with(critic, real, fake, interp, 10.0);
    // scores: fake -> {0.8, 0.8}, real -> {2.2, -0.2}; penalty vanishes
    double expect = (0.8 + 0.8) / 2 - (2.2 - 0.2) / 2;
    CHECK_THAT(val(loss), WithinAbs(expect, 1e-12));
}

TEST_CASE("gradient penalty for a slope-five critic") {
    LinearCritic critic{T64::from({2, 1}, {3.0, 4.0})};
    auto y = T64::from({2, 2}, {0.5, 1.5, -1.0, 2.0});
    Tape<double> tape;
    auto interp = interpolate_with_eps(tape, y, y.detached(), {0.2, 0.8});
    auto loss = critic_loss_with(critic, y, y.detached(), interp, 10.0);
    // identical real and fake batches cancel the score terms; the gradient
    // norm is 5 everywhere, so the loss is 10 * (5-1)^2
    CHECK_THAT(val(loss), WithinRel(160.0, 1e-12));
}

TEST_CASE("critic loss requires a detached generator batch") {
    auto d1 = build_d1<double>(micro_d1_config(true), 21);
    Tape<double> tape;
    d1.bind(tape);
    Rng rng(3);
    auto real = T64::normal({2, 1, 8, 8}, rng);
    auto attached = relu(tape.leaf(T64::normal({2, 1, 8, 8}, rng)));
    CHECK_THROWS_AS(critic_loss_d1(tape, d1, real, attached, 10.0, rng), ContractError);

    auto d2 = build_d2<double>(micro_d2_config(true), 22);
    d2.bind(tape);
    CHECK_THROWS_AS(d2_loss(d2, real, attached), ContractError);
}

TEST_CASE("critic loss on the global discriminator is finite and repeatable") {
    auto run = [&]() {
        auto d1 = build_d1<double>(micro_d1_config(true), 77);
        Tape<double> tape;
        d1.bind(tape);
        Rng data_rng(4);
        auto real = T64::normal({2, 1, 8, 8}, data_rng);
        auto fake = T64::normal({2, 1, 8, 8}, data_rng);
        Rng eps_rng(9);
        auto loss = critic_loss_d1(tape, d1, real, fake, 10.0, eps_rng);
        return val(loss);
    };
    double a = run();
    double b = run();
    CHECK(std::isfinite(a));
    CHECK(a == b);
}

TEST_CASE("critic loss gradient matches finite differences through the penalty") {
    auto d1 = build_d1<double>(micro_d1_config(false), 55);
    Rng data_rng(6);
    auto real = T64::normal({2, 1, 8, 8}, data_rng);
    auto fake = T64::normal({2, 1, 8, 8}, data_rng);
    const std::vector<double> eps{0.35, 0.75};

    auto value = [&]() {
        Tape<double> tape;
        d1.bind(tape);
        auto interp = interpolate_with_eps(tape, real, fake, eps);
        auto critic = [&](const T64& x) { return d1_forward(d1, x, true); };
        return val(critic_loss_with(critic, real, fake, interp, 10.0));
    };

    Tape<double> tape;
    d1.bind(tape);
    auto leaves = d1.params.bound;  // value() rebinds to fresh tapes
    auto interp = interpolate_with_eps(tape, real, fake, eps);
    auto critic = [&](const T64& x) { return d1_forward(d1, x, true); };
    auto gm = backward(critic_loss_with(critic, real, fake, interp, 10.0));

    const double h = 1e-5;
    double worst = 0.0;
    for (size_t p = 0; p < d1.params.values.size(); p++) {
        auto g = gm.grad_of(leaves[p]);
        auto& master = d1.params.values[p];
        for (int64_t i = 0; i < master.numel(); i++) {
            double keep = master[i];
            master[i] = keep + h;
            double up = value();
            master[i] = keep - h;
            double down = value();
            master[i] = keep;
            double fd = (up - down) / (2 * h);
            double denom = std::max({std::abs(fd), std::abs(g[i]), 1.0});
            worst = std::max(worst, std::abs(g[i] - fd) / denom);
        }
    }
    CHECK(worst <= 1e-5);
}

TEST_CASE("generator critic term closed forms") {
    SECTION("mixed scores cancel") {
        auto critic = [](const T64& x) {
            (void)x;
            return T64::from({2}, {1.0, -1.0});
        };
        CHECK(val(gen_adv1_with(critic, T64::zeros({2, 3}))) == 0.0);
    }
    SECTION("uniform score of three gives minus three") {
        auto critic = [](const T64& x) { return T64::full({x.shape[0]}, 3.0); };
        CHECK_THAT(val(gen_adv1_with(critic, T64::zeros({4, 3}))), WithinRel(-3.0, 1e-12));
    }
    SECTION("zeroed discriminator scores zero") {
        auto d1 = build_d1<double>(micro_d1_config(true), 8);
        zero_params(d1.params.values);
        Tape<double> tape;
        d1.bind_frozen();
        Rng rng(2);
        CHECK(val(gen_adv1(d1, T64::normal({2, 1, 8, 8}, rng))) == 0.0);
    }
}

// ---------------------------------------------------------------------------
// confidence BCE
// ---------------------------------------------------------------------------

TEST_CASE("confidence cross-entropy closed forms") {
    SECTION("half confidence against a positive map") {
        auto half = T64::full({2, 2}, 0.5);
        auto ones = T64::ones({2, 2});
        CHECK_THAT(val(bce_map(half, ones, Reduction::kSum)),
                   WithinRel(4.0 * std::log(2.0), 1e-12));
        CHECK_THAT(val(bce_map(half, ones, Reduction::kMean)),
                   WithinRel(std::log(2.0), 1e-12));
        CHECK_THAT(val(bce_map_const(half, 1.0, Reduction::kSum)),
                   WithinRel(4.0 * std::log(2.0), 1e-12));
        CHECK_THAT(val(bce_map_const(half, 1.0, Reduction::kMean)),
                   WithinRel(std::log(2.0), 1e-12));
    }
    SECTION("confident and correct is near zero, saturated stays finite") {
        auto ones = T64::ones({3, 3});
        auto zeros = T64::zeros({3, 3});
        CHECK_THAT(val(bce_map(ones, ones)), WithinAbs(0.0, 1e-6));
        CHECK_THAT(val(bce_map_const(zeros, 0.0)), WithinAbs(0.0, 1e-6));
        // totally wrong saturated predictions stay finite thanks to the clamp
        double worst_wrong = val(bce_map(zeros, ones));
        CHECK(std::isfinite(worst_wrong));
        CHECK_THAT(worst_wrong, WithinRel(-std::log(kBceClamp), 1e-6));
    }
    SECTION("mixed labels") {
        auto pred = T64::from({2}, {0.8, 0.3});
        auto labels = T64::from({2}, {1.0, 0.0});
        double expect = (-std::log(0.8) - std::log(0.7)) / 2;
        CHECK_THAT(val(bce_map(pred, labels)), WithinRel(expect, 1e-12));
    }
    SECTION("labels must be exactly zero or one") {
        auto pred = T64::full({2}, 0.5);
        CHECK_THROWS_AS(bce_map(pred, T64::full({2}, 0.5)), ContractError);
        CHECK_THROWS_AS(bce_map_const(pred, 0.25), ContractError);
    }
}

TEST_CASE("confidence cross-entropy gradient matches finite differences") {
    Rng rng(23);
    std::vector<double> p0(12);
    for (auto& v : p0) v = rng.uniform(0.05, 0.95);
    auto labels = T64::from({12}, {1, 0, 1, 1, 0, 0, 1, 0, 1, 0, 0, 1});

    for (Reduction red : {Reduction::kMean, Reduction::kSum}) {
        auto value = [&](const std::vector<double>& p) {
            Tape<double> tape;
            auto t = tape.leaf(T64::from({12}, p));
            return val(bce_map(t, labels, red));
        };
        Tape<double> tape;
        auto t = tape.leaf(T64::from({12}, p0));
        auto g = backward(bce_map(t, labels, red)).grad_of(t);

        const double h = 1e-6;
        double worst = 0.0;
        for (size_t i = 0; i < p0.size(); i++) {
            auto up = p0;
            up[i] += h;
            auto down = p0;
            down[i] -= h;
            double fd = (value(up) - value(down)) / (2 * h);
            double denom = std::max({std::abs(fd), std::abs(g[int64_t(i)]), 1.0});
            worst = std::max(worst, std::abs(g[int64_t(i)] - fd) / denom);
        }
        CHECK(worst <= 1e-5);
    }
}

TEST_CASE("confidence discriminator loss closed forms") {
    SECTION("uniform half confidence costs twice log two") {
        D2Config cfg = micro_d2_config(true);
        auto d2 = build_d2<double>(cfg, 30);
        auto& w = d2.params.values[size_t(d2.head.w)];
        for (int64_t i = 0; i < w.numel(); i++) w[i] = 0.0;
        d2.params.values[size_t(d2.head.b)][0] = 0.0;
        d2.bind_frozen();
        Rng rng(31);
        auto real = T64::normal({1, 1, 8, 8}, rng);
        auto fake = T64::normal({1, 1, 8, 8}, rng);
        CHECK_THAT(val(d2_loss(d2, real, fake, Reduction::kMean, false)),
                   WithinRel(2.0 * std::log(2.0), 1e-12));
    }
    SECTION("a perfect per-pixel judge scores near zero") {
        auto identity = [](const T64& x) { return x; };
        auto loss = d2_loss_with(identity, T64::ones({1, 1, 4, 4}), T64::zeros({1, 1, 4, 4}));
        CHECK_THAT(val(loss), WithinAbs(0.0, 1e-5));
    }
    SECTION("value is symmetric under pixel permutation") {
        Rng rng(37);
        std::vector<double> conf(16);
        for (auto& c : conf) c = rng.uniform(0.1, 0.9);
        auto shuffled = conf;
        rng.shuffle(shuffled);
        auto identity = [](const T64& x) { return x; };
        auto a = val(d2_loss_with(identity, T64::from({1, 1, 4, 4}, conf),
                                  T64::full({1, 1, 4, 4}, 0.5)));
        std::vector<double> half(16, 0.5);
        auto b = val(d2_loss_with(identity, T64::from({1, 1, 4, 4}, shuffled),
                                  T64::from({1, 1, 4, 4}, half)));
        CHECK_THAT(a, WithinRel(b, 1e-12));
    }
    SECTION("sum reduction scales mean by the map size") {
        auto identity = [](const T64& x) { return x; };
        auto real = T64::full({1, 1, 4, 4}, 0.7);
        auto fake = T64::full({1, 1, 4, 4}, 0.2);
        double m = val(d2_loss_with(identity, real, fake, Reduction::kMean));
        double s = val(d2_loss_with(identity, real, fake, Reduction::kSum));
        CHECK_THAT(s, WithinRel(16.0 * m, 1e-12));
    }
}

TEST_CASE("confidence discriminator loss gradient matches finite differences") {
    auto d2 = build_d2<double>(micro_d2_config(false), 41);
    Rng rng(42);
    auto real = T64::normal({1, 1, 8, 8}, rng);
    auto fake = T64::normal({1, 1, 8, 8}, rng);

    auto value = [&]() {
        Tape<double> tape;
        d2.bind(tape);
        return val(d2_loss(d2, real, fake, Reduction::kMean, false));
    };
    Tape<double> tape;
    d2.bind(tape);
    auto leaves = d2.params.bound;
    auto gm = backward(d2_loss(d2, real, fake, Reduction::kMean, false));

    const double h = 1e-5;
    double worst = 0.0;
    for (size_t p = 0; p < d2.params.values.size(); p++) {
        auto g = gm.grad_of(leaves[p]);
        auto& master = d2.params.values[p];
        for (int64_t i = 0; i < master.numel(); i++) {
            double keep = master[i];
            master[i] = keep + h;
            double up = value();
            master[i] = keep - h;
            double down = value();
            master[i] = keep;
            double fd = (up - down) / (2 * h);
            double denom = std::max({std::abs(fd), std::abs(g[i]), 1.0});
            worst = std::max(worst, std::abs(g[i] - fd) / denom);
        }
    }
    CHECK(worst <= 1e-5);
}

TEST_CASE("generator confidence term pushes toward full confidence") {
    SECTION("half confidence costs log two") {
        auto d2 = build_d2<double>(micro_d2_config(true), 30);
        auto& w = d2.params.values[size_t(d2.head.w)];
        for (int64_t i = 0; i < w.numel(); i++) w[i] = 0.0;
        d2.params.values[size_t(d2.head.b)][0] = 0.0;
        d2.bind_frozen();
        Rng rng(31);
        auto fake = T64::normal({1, 1, 8, 8}, rng);
        CHECK_THAT(val(gen_adv2(d2, fake)), WithinRel(std::log(2.0), 1e-12));
    }
    SECTION("loss strictly decreases as confidence rises") {
        auto identity = [](const T64& x) { return x; };
        double prev = val(gen_adv2_with(identity, T64::full({1, 1, 2, 2}, 0.3)));
        for (double c : {0.5, 0.7, 0.9, 0.99}) {
            double cur = val(gen_adv2_with(identity, T64::full({1, 1, 2, 2}, c)));
            CHECK(cur < prev);
            prev = cur;
        }
    }
}

// ---------------------------------------------------------------------------
// difficulty weights
// ---------------------------------------------------------------------------

TEST_CASE("difficulty weight closed forms") {
    SECTION("zero confidence gives full weight") {
        auto f = attention_weights(T64::zeros({2, 2}), 1.0);
        for (int64_t i = 0; i < 4; i++) CHECK(f[i] == 1.0);
    }
    SECTION("exponent zero disables weighting exactly") {
        Rng rng(3);
        auto m = T64::uniform({3, 3}, rng);
        auto f = attention_weights(m, 0.0);
        for (int64_t i = 0; i < f.numel(); i++) CHECK(f[i] == 1.0);
    }
    SECTION("three quarters confidence squared") {
        auto f = attention_weights(T64::full({1}, 0.75), 2.0);
        CHECK(f[0] == 0.0625);
    }
    SECTION("weights are constants even when the confidence map is on a tape") {
        Tape<double> tape;
        auto m = sigmoid(tape.leaf(T64::zeros({2, 2})));
        auto f = attention_weights(m, 1.0);
        CHECK_FALSE(f.requires_grad());
        CHECK(f.tape == nullptr);
    }
    SECTION("out-of-range confidence and negative exponent are rejected") {
        CHECK_THROWS_AS(attention_weights(T64::full({1}, 1.2), 1.0), ContractError);
        CHECK_THROWS_AS(attention_weights(T64::full({1}, -0.1), 1.0), ContractError);
        CHECK_THROWS_AS(attention_weights(T64::full({1}, 0.5), -1.0), ConfigError);
    }
}

TEST_CASE("difficulty weights are monotone") {
    Rng rng(51);
    SECTION("non-increasing in confidence at fixed exponent") {
        for (int trial = 0; trial < 20; trial++) {
            double m1 = rng.uniform();
            double m2 = rng.uniform();
            if (m1 > m2) std::swap(m1, m2);
            double beta = rng.uniform(0.0, 4.0);
            auto f1 = attention_weights(T64::full({1}, m1), beta);
            auto f2 = attention_weights(T64::full({1}, m2), beta);
            CHECK(f1[0] >= f2[0]);
        }
    }
    SECTION("non-increasing in the exponent where confidence is positive") {
        for (int trial = 0; trial < 20; trial++) {
            double m = rng.uniform(0.05, 1.0);
            double b1 = rng.uniform(0.0, 4.0);
            double b2 = rng.uniform(0.0, 4.0);
            if (b1 > b2) std::swap(b1, b2);
            auto f1 = attention_weights(T64::full({1}, m), b1);
            auto f2 = attention_weights(T64::full({1}, m), b2);
            CHECK(f1[0] >= f2[0]);
        }
    }
}

TEST_CASE("weighted reconstruction with unit weights is bitwise the plain one") {
    Rng rng(61);
    SECTION("double precision") {
        auto y = T64::normal({2, 1, 5, 5}, rng);
        auto out = T64::normal({2, 1, 5, 5}, rng);
        auto ones = T64::ones({2, 1, 5, 5});
        for (int p : {1, 2}) {
            double a = val(attention_recon_loss(y, out, ones, p));
            double b = val(recon_loss(y, out, p));
            CHECK(a == b);
        }
    }
    SECTION("single precision") {
        auto y = T32::normal({2, 1, 5, 5}, rng);
        auto out = T32::normal({2, 1, 5, 5}, rng);
        auto ones = T32::ones({2, 1, 5, 5});
        for (int p : {1, 2}) {
            float a = (*attention_recon_loss(y, out, ones, p).data)[0];
            float b = (*recon_loss(y, out, p).data)[0];
            CHECK(a == b);
        }
    }
    SECTION("zero confidence map routes through the same identity") {
        auto y = T64::normal({1, 1, 4, 4}, rng);
        auto out = T64::normal({1, 1, 4, 4}, rng);
        auto f = attention_weights(T64::zeros({1, 1, 4, 4}), 2.5);
        CHECK(val(attention_recon_loss(y, out, f, 1)) == val(recon_loss(y, out, 1)));
    }
}

TEST_CASE("weighted reconstruction closed form and gradient detachment") {
    SECTION("single voxel") {
        auto y = T64::full({1}, 3.0);
        auto out = T64::full({1}, 1.0);
        auto f = T64::full({1}, 0.25);
        CHECK(val(attention_recon_loss(y, out, f, 1)) == 0.5);
    }
    SECTION("no gradient flows into the weight map") {
        Tape<double> tape;
        Rng rng(71);
        auto out = tape.leaf(T64::normal({2, 2}, rng));
        auto f_src = tape.leaf(T64::full({2, 2}, 0.5));
        auto y = T64::normal({2, 2}, rng);
        auto loss = attention_recon_loss(y, out, mul(f_src, T64::ones({2, 2})), 2);
        auto gm = backward(loss);
        auto gf = gm.grad_of(f_src);
        for (int64_t i = 0; i < 4; i++) CHECK(gf[i] == 0.0);
        bool any = false;
        auto go = gm.grad_of(out);
        for (int64_t i = 0; i < 4; i++) any = any || go[i] != 0.0;
        CHECK(any);
    }
}

// ---------------------------------------------------------------------------
// combined generator objective
// ---------------------------------------------------------------------------

TEST_CASE("combined objective weighting") {
    LossWeights w;
    w.lambda1 = 0.05;
    w.lambda2 = 0.1;
    SECTION("frozen example") {
        auto total = total_gen_loss(T64::scalar(1.0), T64::scalar(2.0), T64::scalar(3.0), w);
        CHECK_THAT(val(total), WithinRel(1.4, 1e-12));
    }
    SECTION("zero adversarial weights leave the reconstruction term alone") {
        LossWeights off = w;
        off.lambda1 = 0.0;
        off.lambda2 = 0.0;
        double att = 0.123456789;
        auto total = total_gen_loss(T64::scalar(att), T64::scalar(7.0), T64::scalar(-3.0), off);
        CHECK(val(total) == att);
    }
    SECTION("non-scalar terms are rejected") {
        CHECK_THROWS_AS(total_gen_loss(T64::zeros({2}), T64::scalar(0.0), T64::scalar(0.0), w),
                        ShapeError);
    }
}

TEST_CASE("loss weight validation") {
    LossWeights w;
    w.validate();
    SECTION("negative weights") {
        LossWeights bad = w;
        bad.lambda1 = -0.1;
        CHECK_THROWS_AS(bad.validate(), ConfigError);
        bad = w;
        bad.lambda_gp = -1.0;
        CHECK_THROWS_AS(bad.validate(), ConfigError);
        bad = w;
        bad.beta = -2.0;
        CHECK_THROWS_AS(bad.validate(), ConfigError);
    }
    SECTION("unsupported exponent") {
        LossWeights bad = w;
        bad.p = 3;
        CHECK_THROWS_AS(bad.validate(), ConfigError);
    }
    SECTION("non-finite weights") {
        LossWeights bad = w;
        bad.lambda2 = std::numeric_limits<double>::infinity();
        CHECK_THROWS_AS(bad.validate(), ConfigError);
    }
    SECTION("reduction names round-trip") {
        CHECK(reduction_from_name("mean") == Reduction::kMean);
        CHECK(reduction_from_name("sum") == Reduction::kSum);
        CHECK_THROWS_AS(reduction_from_name("median"), ConfigError);
    }
}

TEST_CASE("combined objective gradient matches finite differences end to end") {
    auto g = build_generator<double>(1, 2, NormKind::kNone, 101);
    auto d1 = build_d1<double>(micro_d1_config(true), 102);
    auto d2 = build_d2<double>(micro_d2_config(true), 103);
    Rng rng(104);
    auto x = T64::normal({2, 5, 8, 8}, rng);
    auto y = T64::normal({2, 1, 8, 8}, rng);
    LossWeights w;
    w.p = 2;  // smooth objective keeps central differences clean

    // fixed difficulty map, as produced by a frozen confidence pass
    Rng conf_rng(105);
    auto conf = T64::uniform({2, 1, 8, 8}, conf_rng, 0.1, 0.9);
    auto f = attention_weights(conf, 1.0);

    auto value = [&]() {
        Tape<double> tape;
        g.bind(tape);
        d1.bind_frozen();
        d2.bind_frozen();
        auto gx = generator_forward(g, x, true);
        auto att = attention_recon_loss(y, gx, f, w.p);
        auto a1 = gen_adv1(d1, gx, false);
        auto a2 = gen_adv2(d2, gx, Reduction::kMean, false);
        return val(total_gen_loss(att, a1, a2, w));
    };

    Tape<double> tape;
    g.bind(tape);
    d1.bind_frozen();
    d2.bind_frozen();
    auto leaves = g.params.bound;
    auto gx = generator_forward(g, x, true);
    auto att = attention_recon_loss(y, gx, f, w.p);
    auto a1 = gen_adv1(d1, gx, false);
    auto a2 = gen_adv2(d2, gx, Reduction::kMean, false);
    auto gm = backward(total_gen_loss(att, a1, a2, w));

    const double h = 1e-5;
    double worst = 0.0;
    bool any_nonzero = false;
    for (size_t p = 0; p < g.params.values.size(); p++) {
        auto grad = gm.grad_of(leaves[p]);
        auto& master = g.params.values[p];
        for (int64_t i = 0; i < master.numel(); i++) {
            any_nonzero = any_nonzero || grad[i] != 0.0;
            double keep = master[i];
            master[i] = keep + h;
            double up = value();
            master[i] = keep - h;
            double down = value();
            master[i] = keep;
            double fd = (up - down) / (2 * h);
            double denom = std::max({std::abs(fd), std::abs(grad[i]), 1.0});
            worst = std::max(worst, std::abs(grad[i] - fd) / denom);
        }
    }
    CHECK(worst <= 1e-5);
    CHECK(any_nonzero);
}

TEST_CASE("all losses stay finite on random nets and data") {
    for (uint64_t seed : {1ull, 2ull, 3ull}) {
        auto g = build_generator<double>(1, 2, NormKind::kBatch, seed);
        auto d1 = build_d1<double>(micro_d1_config(true), seed + 10);
        auto d2 = build_d2<double>(micro_d2_config(true), seed + 20);
        Rng rng(seed + 30);
        auto x = T64::normal({2, 5, 8, 8}, rng);
        auto y = T64::normal({2, 1, 8, 8}, rng);

        Tape<double> tape;
        g.bind(tape);
        auto gx_raw = generator_forward(g, x, true).detached();

        Tape<double> dtape;
        d1.bind(dtape);
        d2.bind(dtape);
        Rng eps_rng(seed + 40);
        CHECK(std::isfinite(val(critic_loss_d1(dtape, d1, y, gx_raw, 10.0, eps_rng))));
        CHECK(std::isfinite(val(d2_loss(d2, y, gx_raw))));

        Tape<double> gtape;
        g.bind(gtape);
        d1.bind_frozen();
        d2.bind_frozen();
        auto gx = generator_forward(g, x, true);
        auto m = d2_forward(d2, gx_raw, false);
        auto f = attention_weights(m, 1.0);
        auto att = attention_recon_loss(y, gx, f, 1);
        auto a1 = gen_adv1(d1, gx, false);
        auto a2 = gen_adv2(d2, gx, Reduction::kMean, false);
        LossWeights w;
        auto total = total_gen_loss(att, a1, a2, w);
        CHECK(std::isfinite(val(total)));
        // the combined objective must be differentiable in one sweep
        auto gm = backward(total);
        bool any = false;
        for (auto& leaf : g.params.bound) {
            auto grad = gm.grad_of(leaf);
            for (int64_t i = 0; i < grad.numel(); i++) {
                CHECK(std::isfinite(grad[i]));
                any = any || grad[i] != 0.0;
            }
        }
        CHECK(any);
    }
}
