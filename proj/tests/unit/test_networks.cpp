#include <catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <cmath>

#include "dualsynth/nn.hpp"

using namespace dualsynth;

using T64 = Tensor<double>;

namespace {

// top singular value via dense SVD, independent of the power iteration
double svd_sigma1(const T64& w) {
    int out = w.shape[0];
    int rest = int(w.numel() / out);
    Eigen::MatrixXd m(out, rest);
    for (int i = 0; i < out; i++)
        for (int j = 0; j < rest; j++) m(i, j) = w[int64_t(i) * rest + j];
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
    return svd.singularValues()(0);
}

}  // namespace

TEST_CASE("generator construction is deterministic and validated") {
    auto a = build_generator<double>(3, 16, NormKind::kBatch, 42);
    auto b = build_generator<double>(3, 16, NormKind::kBatch, 42);
    CHECK(parameter_hash(a.params) == parameter_hash(b.params));
    auto c = build_generator<double>(3, 16, NormKind::kBatch, 43);
    CHECK(parameter_hash(a.params) != parameter_hash(c.params));
    CHECK_THROWS_AS(build_generator<double>(0, 16, NormKind::kBatch, 1), ConfigError);
    CHECK_THROWS_AS(build_generator<double>(3, 0, NormKind::kBatch, 1), ConfigError);
}

TEST_CASE("generator parameter count matches layer-shape arithmetic") {
    const int depth = 3, base = 16, in_ch = 5;
    auto net = build_generator<double>(depth, base, NormKind::kBatch, 7, in_ch);

    auto conv_params = [](int co, int ci, int k) { return int64_t(co) * ci * k * k + co; };
    auto double_conv = [&](int in, int out) {
        // two 3x3 convs with biases plus two (gamma, beta) pairs
        return conv_params(out, in, 3) + conv_params(out, out, 3) + 4 * int64_t(out);
    };
    int64_t expect = 0;
    int prev = in_ch;
    for (int i = 0; i < depth; i++) {
        int ch = base << i;
        expect += double_conv(prev, ch);
        prev = ch;
    }
    int bottom = base << depth;
    expect += double_conv(prev, bottom);
    prev = bottom;
    for (int j = depth - 1; j >= 0; j--) {
        int ch = base << j;
        expect += double_conv(prev + ch, ch);
        prev = ch;
    }
    expect += conv_params(1, base, 1);  // linear head
    CHECK(net.params.total_numel() == expect);
}

TEST_CASE("generator forward shape contract across sizes") {
    for (int depth : {1, 2, 3}) {
        auto net = build_generator<float>(depth, 4, NormKind::kBatch, 11);
        Tape<float> tape;
        net.bind(tape);
        for (int size : {8, 16, 24}) {
            if (size % (1 << depth)) continue;
            Rng rng{uint64_t(size)};
            auto x = Tensor<float>::normal({2, 5, size, size}, rng);
            auto y = generator_forward(net, x, true);
            CHECK(y.shape == std::vector<int>{2, 1, size, size});
        }
    }
}

TEST_CASE("generator rejects indivisible spatial sizes") {
    auto net = build_generator<double>(3, 4, NormKind::kBatch, 1);
    Tape<double> tape;
    net.bind(tape);
    auto x = T64::ones({1, 5, 20, 20});  // 20 not divisible by 8
    CHECK_THROWS_AS(generator_forward(net, x, true), ShapeError);
    CHECK_THROWS_WITH(generator_forward(net, x, true),
                      Catch::Matchers::ContainsSubstring("divisible by 8"));
    CHECK_THROWS_AS(generator_forward(net, T64::ones({1, 3, 16, 16}), true), ShapeError);
}

TEST_CASE("zeroed head conv outputs exactly its bias") {
    auto net = build_generator<double>(2, 4, NormKind::kBatch, 5);
    auto& w = net.params.values[size_t(net.head.w)];
    for (int64_t i = 0; i < w.numel(); i++) w[i] = 0.0;
    net.params.values[size_t(net.head.b)][0] = 0.7;
    net.bind_frozen();
    Rng rng(2);
    auto y = generator_forward(net, T64::normal({1, 5, 8, 8}, rng), false);
    for (int64_t i = 0; i < y.numel(); i++) CHECK(y[i] == 0.7);
}

TEST_CASE("generator gradients match finite differences") {
    auto net = build_generator<double>(1, 2, NormKind::kBatch, 3, 2);
    Rng rng(17);
    auto x = T64::normal({2, 2, 4, 4}, rng);

    auto value = [&]() {
        Tape<double> tape;
        net.bind(tape);
        auto y = generator_forward(net, x, true);
        return (*mean_all(y).data)[0];
    };

    Tape<double> tape;
    net.bind(tape);
    auto leaves = net.params.bound;  // keep handles; value() rebinds to fresh tapes
    auto gm = backward(mean_all(generator_forward(net, x, true)));

    const double h = 1e-5;
    double worst = 0.0;
    for (size_t p = 0; p < net.params.values.size(); p++) {
        auto g = gm.grad_of(leaves[p]);
        auto& master = net.params.values[p];
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

TEST_CASE("global critic shape and zero-weight behavior") {
    D1Config cfg;  // 64x64, default channel widths
    auto net = build_d1<float>(cfg, 9);
    Tape<float> tape;
    net.bind(tape);
    Rng rng(4);
    auto x = Tensor<float>::normal({10, 1, 64, 64}, rng);
    auto y = d1_forward(net, x, true);
    CHECK(y.shape == std::vector<int>{10});

    for (auto& v : net.params.values)
        for (int64_t i = 0; i < v.numel(); i++) v[i] = 0.0f;
    net.bind_frozen();
    auto z = d1_forward(net, x, false);
    for (int i = 0; i < 10; i++) CHECK(z[i] == 0.0f);
}

TEST_CASE("global critic validates input size") {
    D1Config cfg;
    cfg.in_h = cfg.in_w = 16;
    cfg.stage_channels = {4, 8, 16};
    cfg.conv4_channels = 8;
    cfg.fc_units = {16, 8};
    auto net = build_d1<double>(cfg, 1);
    Tape<double> tape;
    net.bind(tape);
    CHECK_THROWS_AS(d1_forward(net, T64::ones({1, 1, 32, 32}), true), ShapeError);
    CHECK_THROWS_AS(d1_forward(net, T64::ones({1, 2, 16, 16}), true), ShapeError);
    D1Config bad;
    bad.in_h = bad.in_w = 4;
    CHECK_THROWS_AS(build_d1<double>(bad, 1), ConfigError);
}

TEST_CASE("normalized critic layers have unit operator norm") {
    D1Config cfg;
    cfg.in_h = cfg.in_w = 16;
    cfg.stage_channels = {4, 8, 16};
    cfg.conv4_channels = 8;
    cfg.fc_units = {32, 16};
    cfg.sn_power_iterations = 200;
    auto net = build_d1<double>(cfg, 77);
    Tape<double> tape;
    net.bind(tape);
    Rng rng(6);
    d1_forward(net, T64::normal({2, 1, 16, 16}, rng), true);  // updates every u estimate

    auto check_layer = [&](int w_idx, int sn_idx) {
        auto w = net.params.values[size_t(w_idx)];
        auto wn = spectral_normalize(w, net.sn[size_t(sn_idx)], false);
        double s1 = svd_sigma1(wn);
        CHECK(s1 >= 0.99);
        CHECK(s1 <= 1.01);
    };
    for (int i = 0; i < 3; i++) check_layer(net.stages[size_t(i)].w, net.stages[size_t(i)].sn);
    check_layer(net.conv4.w, net.conv4.sn);
    check_layer(net.fc[0].w, net.fc[0].sn);
    check_layer(net.fc[1].w, net.fc[1].sn);
    CHECK(net.fc[2].sn == -1);  // scalar head stays unnormalized
}

TEST_CASE("local discriminator preserves shape and probability range") {
    D2Config cfg;
    cfg.down_channels = {4, 8, 16};
    cfg.up_channels = {8, 4, 4};
    auto net = build_d2<float>(cfg, 21);
    Tape<float> tape;
    net.bind(tape);
    Rng rng(8);
    for (int size : {8, 16, 24}) {
        auto x = Tensor<float>::normal({2, 1, size, size}, rng);
        auto y = d2_forward(net, x, true);
        CHECK(y.shape == x.shape);
        for (int64_t i = 0; i < y.numel(); i++) {
            CHECK(y[i] > 0.0f);
            CHECK(y[i] < 1.0f);
        }
    }
    CHECK_THROWS_AS(d2_forward(net, Tensor<float>::ones({1, 1, 12, 12}), true), ShapeError);
}

TEST_CASE("zeroed local head gives 0.5 everywhere") {
    D2Config cfg;
    cfg.down_channels = {4, 8, 16};
    cfg.up_channels = {8, 4, 4};
    auto net = build_d2<double>(cfg, 30);
    auto& w = net.params.values[size_t(net.head.w)];
    for (int64_t i = 0; i < w.numel(); i++) w[i] = 0.0;
    net.params.values[size_t(net.head.b)][0] = 0.0;
    net.bind_frozen();
    Rng rng(31);
    auto y = d2_forward(net, T64::normal({1, 1, 16, 16}, rng), false);
    for (int64_t i = 0; i < y.numel(); i++) CHECK(y[i] == 0.5);
}

TEST_CASE("spectral normalization closed-form cases") {
    SECTION("diagonal matrix halves to unit top value") {
        auto w = T64::from({2, 2}, {2, 0, 0, 1});
        SpectralNormState<double> st;
        Rng rng(12);
        st.u = detail::unit_vector<double>(2, rng);
        st.power_iterations = 100;
        auto wn = spectral_normalize(w, st, true);
        CHECK_THAT(wn[0], Catch::Matchers::WithinAbs(1.0, 1e-9));
        CHECK_THAT(wn[3], Catch::Matchers::WithinAbs(0.5, 1e-9));
        CHECK_THAT(std::abs(wn[1]) + std::abs(wn[2]), Catch::Matchers::WithinAbs(0.0, 1e-12));
    }
    SECTION("orthogonal matrix is a fixed point") {
        const double th = 0.37;
        auto w = T64::from({2, 2}, {std::cos(th), -std::sin(th), std::sin(th), std::cos(th)});
        SpectralNormState<double> st;
        Rng rng(13);
        st.u = detail::unit_vector<double>(2, rng);
        st.power_iterations = 10;
        auto wn = spectral_normalize(w, st, true);
        for (int i = 0; i < 4; i++) CHECK_THAT(wn[i], Catch::Matchers::WithinAbs(w[i], 1e-6));
    }
    SECTION("zero matrix is flagged and untouched") {
        auto w = T64::zeros({3, 3});
        SpectralNormState<double> st;
        Rng rng(14);
        st.u = detail::unit_vector<double>(3, rng);
        auto wn = spectral_normalize(w, st, true);
        CHECK(st.degenerate);
        for (int i = 0; i < 9; i++) CHECK(wn[i] == 0.0);
    }
    SECTION("random matrices normalize within one percent of dense SVD") {
        Rng rng(15);
        for (int trial = 0; trial < 10; trial++) {
            auto w = T64::normal({8, 8}, rng);
            SpectralNormState<double> st;
            st.u = detail::unit_vector<double>(8, rng);
            st.power_iterations = 50;
            auto wn = spectral_normalize(w, st, true);
            double s1 = svd_sigma1(wn);
            CHECK(s1 >= 0.99);
            CHECK(s1 <= 1.01);
        }
    }
    SECTION("unit-norm invariant on the stored estimate") {
        Rng rng(16);
        auto w = T64::normal({6, 4}, rng);
        SpectralNormState<double> st;
        st.u = detail::unit_vector<double>(6, rng);
        st.power_iterations = 3;
        spectral_normalize(w, st, true);
        double n = 0.0;
        for (int i = 0; i < 6; i++) n += st.u[i] * st.u[i];
        CHECK_THAT(std::sqrt(n), Catch::Matchers::WithinAbs(1.0, 1e-12));
    }
}

TEST_CASE("spectral norm scale is differentiable through to the weight") {
    // loss = sum(W_sn^2) = sum(W^2)/sigma^2; compare against finite differences
    Rng rng(19);
    auto w0 = T64::normal({3, 3}, rng);
    auto loss_at = [&](const T64& wv, std::vector<double>* grad_out) {
        Tape<double> tape;
        auto w = tape.leaf(wv.detached());
        SpectralNormState<double> st;
        Rng r2(20);
        st.u = detail::unit_vector<double>(3, r2);
        st.power_iterations = 100;
        auto wn = spectral_normalize(w, st, true);
        auto loss = sum_all(power(wn, 2.0));
        if (grad_out) {
            auto g = backward(loss).grad_of(w);
            grad_out->assign(g.ptr(), g.ptr() + g.numel());
        }
        return (*loss.data)[0];
    };
    std::vector<double> analytic;
    loss_at(w0, &analytic);
    const double h = 1e-6;
    double worst = 0.0;
    for (int64_t i = 0; i < w0.numel(); i++) {
        auto wp = w0.detached();
        wp[i] += h;
        auto wm = w0.detached();
        wm[i] -= h;
        double fd = (loss_at(wp, nullptr) - loss_at(wm, nullptr)) / (2 * h);
        double denom = std::max({std::abs(fd), std::abs(analytic[size_t(i)]), 1.0});
        worst = std::max(worst, std::abs(analytic[size_t(i)] - fd) / denom);
    }
    CHECK(worst <= 1e-4);
}

TEST_CASE("forward before binding is rejected") {
    auto net = build_generator<double>(1, 2, NormKind::kNone, 1);
    CHECK_THROWS_AS(generator_forward(net, T64::ones({1, 5, 4, 4}), true), ContractError);
}

TEST_CASE("spectral norm state updates are visible in the serialized buffers") {
    D2Config cfg;
    cfg.down_channels = {2, 2, 2};
    cfg.up_channels = {2, 2, 2};
    auto net = build_d2<double>(cfg, 55);
    int idx = net.state.index_of("down0.conv.sn_u");
    REQUIRE(idx >= 0);
    auto before = net.state.values[size_t(idx)].detached();
    Tape<double> tape;
    net.bind(tape);
    Rng rng(56);
    d2_forward(net, T64::normal({1, 1, 8, 8}, rng), true);
    auto& after = net.state.values[size_t(idx)];
    bool changed = false;
    for (int64_t i = 0; i < after.numel(); i++) changed = changed || after[i] != before[i];
    CHECK(changed);
}
