#pragma once

// The three networks: a UNet generator, a CNN global critic scoring whole
// patches, and a fully convolutional local discriminator scoring every pixel.
// Parameters live as raw named tensors; each training step binds them onto a
// fresh tape as leaves (or as constants for frozen passes) and runs the
// forward functions below.

#include <array>
#include <cstring>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dualsynth/common.hpp"
#include "dualsynth/tensor.hpp"

namespace dualsynth {

enum class NormKind {
    kNone,
    kBatch,        // train-mode statistics + running buffers for evaluation
    kFrozenBatch,  // current-batch statistics treated as constants (stays
                   // twice-differentiable, so safe inside the critic's
                   // gradient-penalty graph)
};

inline const char* norm_kind_name(NormKind k) {
    switch (k) {
        case NormKind::kNone: return "none";
        case NormKind::kBatch: return "batch";
        case NormKind::kFrozenBatch: return "frozen_batch";
    }
    return "?";
}

inline NormKind norm_kind_from_name(const std::string& s) {
    if (s == "none") return NormKind::kNone;
    if (s == "batch") return NormKind::kBatch;
    if (s == "frozen_batch") return NormKind::kFrozenBatch;
    throw ConfigError("unknown normalization kind '" + s + "'");
}

// Ordered, named raw tensors plus the tape-bound view used by forwards.
template <typename Real>
struct ParamSet {
    std::vector<std::string> names;
    std::vector<Tensor<Real>> values;
    std::vector<Tensor<Real>> bound;

    int add(std::string name, Tensor<Real> v) {
        names.push_back(std::move(name));
        values.push_back(std::move(v));
        return int(values.size()) - 1;
    }

    int index_of(const std::string& name) const {
        for (size_t i = 0; i < names.size(); i++)
            if (names[i] == name) return int(i);
        return -1;
    }

    int64_t total_numel() const {
        int64_t n = 0;
        for (const auto& v : values) n += v.numel();
        return n;
    }

    // trainable binding: every value becomes a leaf of the tape
    void bind(Tape<Real>& tape) {
        bound.clear();
        bound.reserve(values.size());
        for (auto& v : values) bound.push_back(tape.leaf(v));
    }
    // frozen binding: raw values participate as constants
    void bind_frozen() { bound = values; }
};

// Fingerprint of names, shapes, and exact value bits; two sets compare equal
// iff training left every parameter untouched.
template <typename Real>
uint64_t parameter_hash(const ParamSet<Real>& set) {
    uint64_t h = kFnvBasis;
    for (size_t i = 0; i < set.values.size(); i++) {
        h = fnv1a64(set.names[i], h);
        for (int e : set.values[i].shape) {
            uint32_t u = uint32_t(e);
            h = fnv1a64(&u, sizeof(u), h);
        }
        const auto& buf = *set.values[i].data;
        if (!buf.empty()) h = fnv1a64(buf.data(), buf.size() * sizeof(Real), h);
    }
    return h;
}

// ---------------------------------------------------------------------------
// layer specs (indices into a net's ParamSets)
// ---------------------------------------------------------------------------

struct ConvSpec {
    int w = -1, b = -1;
    int stride = 1, pad = 1;
    int sn = -1;  // index into the net's spectral-norm states, -1 = none
};

struct NormSpec {
    int gamma = -1, beta = -1;        // params
    int run_mean = -1, run_var = -1;  // state buffers (batch mode only)
};

struct LinearSpec {
    int w = -1, b = -1;
    int sn = -1;
};

template <typename Real>
struct SpectralNormState {
    Tensor<Real> u;  // left singular-vector estimate, unit norm; updated in place
    int power_iterations = 1;
    bool degenerate = false;
};

namespace detail {

template <typename Real>
Tensor<Real> init_conv_weight(int co, int ci, int kh, int kw, Rng& rng) {
    double bound = std::sqrt(1.0 / (double(ci) * kh * kw));
    return Tensor<Real>::uniform({co, ci, kh, kw}, rng, -bound, bound);
}

template <typename Real>
Tensor<Real> init_bias(int n, int fan_in, Rng& rng) {
    double bound = std::sqrt(1.0 / double(fan_in));
    return Tensor<Real>::uniform({n}, rng, -bound, bound);
}

template <typename Real>
Tensor<Real> init_linear_weight(int out, int in, Rng& rng) {
    double bound = std::sqrt(1.0 / double(in));
    return Tensor<Real>::uniform({out, in}, rng, -bound, bound);
}

template <typename Real>
Tensor<Real> unit_vector(int n, Rng& rng) {
    auto u = Tensor<Real>::normal({n}, rng);
    double s = 0.0;
    for (int i = 0; i < n; i++) s += double(u[i]) * double(u[i]);
    s = std::sqrt(std::max(s, 1e-30));
    for (int i = 0; i < n; i++) u[i] = Real(double(u[i]) / s);
    return u;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// spectral normalization
// ---------------------------------------------------------------------------

// Divides a weight by its top-singular-value estimate. The power iteration
// runs on raw values; the scale factor u^T W v is built from tape ops with u
// and v held constant, so the normalized weight stays differentiable (twice)
// with respect to the original. A zero weight is returned unchanged with the
// degenerate flag set.
template <typename Real>
Tensor<Real> spectral_normalize(const Tensor<Real>& weight, SpectralNormState<Real>& state,
                                bool update_u = true) {
    int64_t total = weight.numel();
    if (weight.shape.empty() || total == 0)
        throw ShapeError("spectral_normalize: empty weight");
    int out = weight.shape[0];
    int64_t rest64 = total / out;
    int rest = int(rest64);
    if (state.u.shape != std::vector<int>{out})
        throw ShapeError("spectral_normalize: u estimate shape " + shape_str(state.u.shape) +
                         " does not match weight rows " + std::to_string(out));

    const Real* pw = weight.ptr();
    bool all_zero = true;
    for (int64_t i = 0; i < total && all_zero; i++) all_zero = pw[i] == Real(0);
    if (all_zero) {
        state.degenerate = true;
        return weight;
    }
    state.degenerate = false;

    // raw power iteration: v = normalize(W^T u), u = normalize(W v)
    std::vector<double> u(static_cast<size_t>(out));
    std::vector<double> v(static_cast<size_t>(rest));
    for (int i = 0; i < out; i++) u[size_t(i)] = double(state.u[i]);
    int iters = update_u ? std::max(1, state.power_iterations) : 1;
    for (int it = 0; it < iters; it++) {
        double nv = 0.0;
        for (int j = 0; j < rest; j++) {
            double acc = 0.0;
            for (int i = 0; i < out; i++) acc += double(pw[int64_t(i) * rest + j]) * u[size_t(i)];
            v[size_t(j)] = acc;
            nv += acc * acc;
        }
        nv = std::sqrt(std::max(nv, 1e-300));
        for (auto& x : v) x /= nv;
        double nu = 0.0;
        for (int i = 0; i < out; i++) {
            double acc = 0.0;
            for (int j = 0; j < rest; j++) acc += double(pw[int64_t(i) * rest + j]) * v[size_t(j)];
            u[size_t(i)] = acc;
            nu += acc * acc;
        }
        nu = std::sqrt(std::max(nu, 1e-300));
        for (auto& x : u) x /= nu;
    }
    if (update_u)
        for (int i = 0; i < out; i++) state.u[i] = Real(u[size_t(i)]);

    // sigma = u^T W v as graph ops; u, v enter as constants
    auto u_row = Tensor<Real>::zeros({1, out});
    for (int i = 0; i < out; i++) u_row[i] = Real(u[size_t(i)]);
    auto v_col = Tensor<Real>::zeros({rest, 1});
    for (int j = 0; j < rest; j++) v_col[j] = Real(v[size_t(j)]);

    auto w2 = weight.shape.size() == 2 ? weight : reshape(weight, {out, rest});
    auto sigma = reshape(matmul(matmul(u_row, w2), v_col), {1});
    auto scaled = mul(w2, broadcast_scalar(power(sigma, -1.0), {out, rest}));
    return weight.shape.size() == 2 ? scaled : reshape(scaled, weight.shape);
}

// ---------------------------------------------------------------------------
// network definitions
// ---------------------------------------------------------------------------

template <typename Real>
struct NetBase {
    ParamSet<Real> params;  // trainable
    ParamSet<Real> state;   // running statistics, spectral-norm estimates
    std::vector<SpectralNormState<Real>> sn;

    void bind(Tape<Real>& tape) {
        params.bind(tape);
        state.bind_frozen();
    }
    void bind_frozen() {
        params.bind_frozen();
        state.bind_frozen();
    }
    void check_bound() const {
        if (params.bound.size() != params.values.size())
            throw ContractError("forward before bind: parameters are not attached");
    }
};

struct DoubleConvSpec {
    ConvSpec c1, c2;
    std::optional<NormSpec> n1, n2;
};

template <typename Real>
struct GeneratorNet : NetBase<Real> {
    int depth = 3;
    int base_channels = 16;
    int in_channels = 5;
    NormKind norm = NormKind::kBatch;
    double bn_eps = 1e-5;
    double bn_momentum = 0.1;

    std::vector<DoubleConvSpec> encoder;  // one per depth level
    DoubleConvSpec bottleneck;
    std::vector<DoubleConvSpec> decoder;  // innermost first
    ConvSpec head;                        // 1x1 conv to one channel
};

struct D1Config {
    int in_h = 64, in_w = 64;
    std::array<int, 3> stage_channels{32, 64, 128};
    int conv4_channels = 256;
    std::array<int, 2> fc_units{512, 128};
    NormKind norm = NormKind::kNone;
    int sn_power_iterations = 1;
    bool spectral_norm = true;
};

template <typename Real>
struct GlobalDiscriminator : NetBase<Real> {
    D1Config cfg;
    std::array<ConvSpec, 3> stages;
    std::array<std::optional<NormSpec>, 3> stage_norms;
    ConvSpec conv4;
    std::array<LinearSpec, 3> fc;  // fc[2] is the unnormalized scalar head
    int flat_dim = 0;
};

struct D2Config {
    std::array<int, 3> down_channels{32, 64, 128};
    std::array<int, 3> up_channels{64, 32, 16};
    int sn_power_iterations = 1;
    bool spectral_norm = true;
};

template <typename Real>
struct LocalDiscriminator : NetBase<Real> {
    D2Config cfg;
    std::array<ConvSpec, 3> down;
    std::array<ConvSpec, 3> up;
    ConvSpec head;  // final conv, sigmoid applied in forward
};

// ---------------------------------------------------------------------------
// builders
// ---------------------------------------------------------------------------

namespace detail {

template <typename Real>
ConvSpec make_conv(NetBase<Real>& net, const std::string& name, int co, int ci, int k, int stride,
                   int pad, Rng& rng, bool with_sn, int sn_iters) {
    ConvSpec s;
    s.w = net.params.add(name + ".w", init_conv_weight<Real>(co, ci, k, k, rng));
    s.b = net.params.add(name + ".b", init_bias<Real>(co, ci * k * k, rng));
    s.stride = stride;
    s.pad = pad;
    if (with_sn) {
        SpectralNormState<Real> st;
        st.u = unit_vector<Real>(co, rng);
        st.power_iterations = sn_iters;
        net.state.add(name + ".sn_u", st.u);  // shares the buffer for serialization
        s.sn = int(net.sn.size());
        net.sn.push_back(std::move(st));
    }
    return s;
}

template <typename Real>
LinearSpec make_linear(NetBase<Real>& net, const std::string& name, int out, int in, Rng& rng,
                       bool with_sn, int sn_iters) {
    LinearSpec s;
    s.w = net.params.add(name + ".w", init_linear_weight<Real>(out, in, rng));
    s.b = net.params.add(name + ".b", init_bias<Real>(out, in, rng));
    if (with_sn) {
        SpectralNormState<Real> st;
        st.u = unit_vector<Real>(out, rng);
        st.power_iterations = sn_iters;
        net.state.add(name + ".sn_u", st.u);
        s.sn = int(net.sn.size());
        net.sn.push_back(std::move(st));
    }
    return s;
}

template <typename Real>
NormSpec make_norm(NetBase<Real>& net, const std::string& name, int channels, NormKind kind) {
    NormSpec s;
    s.gamma = net.params.add(name + ".gamma", Tensor<Real>::ones({channels}));
    s.beta = net.params.add(name + ".beta", Tensor<Real>::zeros({channels}));
    if (kind == NormKind::kBatch) {
        s.run_mean = net.state.add(name + ".run_mean", Tensor<Real>::zeros({channels}));
        s.run_var = net.state.add(name + ".run_var", Tensor<Real>::ones({channels}));
    }
    return s;
}

template <typename Real>
DoubleConvSpec make_double_conv(NetBase<Real>& net, const std::string& name, int in, int out,
                                NormKind kind, Rng& rng) {
    DoubleConvSpec s;
    s.c1 = make_conv(net, name + ".conv1", out, in, 3, 1, 1, rng, false, 0);
    if (kind != NormKind::kNone) s.n1 = make_norm(net, name + ".norm1", out, kind);
    s.c2 = make_conv(net, name + ".conv2", out, out, 3, 1, 1, rng, false, 0);
    if (kind != NormKind::kNone) s.n2 = make_norm(net, name + ".norm2", out, kind);
    return s;
}

}  // namespace detail

template <typename Real>
GeneratorNet<Real> build_generator(int depth, int base_channels, NormKind norm, uint64_t seed,
                                   int in_channels = 5) {
    if (depth < 1) throw ConfigError("build_generator: depth must be at least 1");
    if (base_channels < 1) throw ConfigError("build_generator: base_channels must be at least 1");
    GeneratorNet<Real> net;
    net.depth = depth;
    net.base_channels = base_channels;
    net.in_channels = in_channels;
    net.norm = norm;
    Rng rng(seed);
    int prev = in_channels;
    for (int i = 0; i < depth; i++) {
        int ch = base_channels << i;
        net.encoder.push_back(detail::make_double_conv(net, "enc" + std::to_string(i), prev, ch,
                                                       norm, rng));
        prev = ch;
    }
    int bottom = base_channels << depth;
    net.bottleneck = detail::make_double_conv(net, "bottleneck", prev, bottom, norm, rng);
    prev = bottom;
    for (int j = depth - 1; j >= 0; j--) {
        int ch = base_channels << j;
        net.decoder.push_back(detail::make_double_conv(net, "dec" + std::to_string(j), prev + ch,
                                                       ch, norm, rng));
        prev = ch;
    }
    net.head = detail::make_conv(net, "head", 1, base_channels, 1, 1, 0, rng, false, 0);
    return net;
}

template <typename Real>
GlobalDiscriminator<Real> build_d1(const D1Config& cfg, uint64_t seed) {
    if (cfg.in_h < 8 || cfg.in_w < 8)
        throw ConfigError("build_d1: input extent must be at least 8 to survive three poolings");
    if (cfg.in_h % 8 || cfg.in_w % 8)
        throw ConfigError("build_d1: input extents must be divisible by 8");
    GlobalDiscriminator<Real> net;
    net.cfg = cfg;
    Rng rng(seed);
    int prev = 1;
    for (int i = 0; i < 3; i++) {
        int ch = cfg.stage_channels[size_t(i)];
        net.stages[size_t(i)] = detail::make_conv(net, "stage" + std::to_string(i) + ".conv", ch,
                                                  prev, 3, 1, 1, rng, cfg.spectral_norm,
                                                  cfg.sn_power_iterations);
        if (cfg.norm != NormKind::kNone)
            net.stage_norms[size_t(i)] =
                detail::make_norm(net, "stage" + std::to_string(i) + ".norm", ch, cfg.norm);
        prev = ch;
    }
    net.conv4 = detail::make_conv(net, "conv4", cfg.conv4_channels, prev, 3, 1, 1, rng,
                                  cfg.spectral_norm, cfg.sn_power_iterations);
    net.flat_dim = cfg.conv4_channels * (cfg.in_h / 8) * (cfg.in_w / 8);
    net.fc[0] = detail::make_linear(net, "fc0", cfg.fc_units[0], net.flat_dim, rng,
                                    cfg.spectral_norm, cfg.sn_power_iterations);
    net.fc[1] = detail::make_linear(net, "fc1", cfg.fc_units[1], cfg.fc_units[0], rng,
                                    cfg.spectral_norm, cfg.sn_power_iterations);
    // scalar head stays unnormalized so the critic's scale is unconstrained
    net.fc[2] = detail::make_linear(net, "fc2", 1, cfg.fc_units[1], rng, false, 0);
    return net;
}

template <typename Real>
LocalDiscriminator<Real> build_d2(const D2Config& cfg, uint64_t seed) {
    LocalDiscriminator<Real> net;
    net.cfg = cfg;
    Rng rng(seed);
    int prev = 1;
    for (int i = 0; i < 3; i++) {
        int ch = cfg.down_channels[size_t(i)];
        net.down[size_t(i)] = detail::make_conv(net, "down" + std::to_string(i) + ".conv", ch,
                                                prev, 3, 1, 1, rng, cfg.spectral_norm,
                                                cfg.sn_power_iterations);
        prev = ch;
    }
    for (int i = 0; i < 3; i++) {
        int ch = cfg.up_channels[size_t(i)];
        net.up[size_t(i)] = detail::make_conv(net, "up" + std::to_string(i) + ".conv", ch, prev, 3,
                                              1, 1, rng, cfg.spectral_norm,
                                              cfg.sn_power_iterations);
        prev = ch;
    }
    net.head = detail::make_conv(net, "head", 1, prev, 3, 1, 1, rng, false, 0);
    return net;
}

// ---------------------------------------------------------------------------
// forwards
// ---------------------------------------------------------------------------

namespace detail {

template <typename Real>
Tensor<Real> apply_conv(NetBase<Real>& net, const ConvSpec& spec, const Tensor<Real>& x,
                        bool update_sn) {
    Tensor<Real> w = net.params.bound[size_t(spec.w)];
    if (spec.sn >= 0) w = spectral_normalize(w, net.sn[size_t(spec.sn)], update_sn);
    auto y = conv2d(x, w, spec.stride, spec.pad);
    return add(y, broadcast_channels(net.params.bound[size_t(spec.b)], y.shape));
}

template <typename Real>
Tensor<Real> apply_linear(NetBase<Real>& net, const LinearSpec& spec, const Tensor<Real>& x,
                          bool update_sn) {
    Tensor<Real> w = net.params.bound[size_t(spec.w)];
    if (spec.sn >= 0) w = spectral_normalize(w, net.sn[size_t(spec.sn)], update_sn);
    auto y = matmul(x, transpose2d(w));
    return add(y, broadcast_batch(net.params.bound[size_t(spec.b)], x.shape[0]));
}

// Normalization dispatch. kBatch in train mode records the first-order-only
// primitive and refreshes running statistics; in eval mode and in
// kFrozenBatch mode the affine transform is composed from elementwise ops
// with the statistics as constants, which keeps the graph twice-
// differentiable.
template <typename Real>
Tensor<Real> apply_norm(NetBase<Real>& net, const NormSpec& spec, NormKind kind,
                        const Tensor<Real>& x, bool train, double eps, double momentum) {
    const Tensor<Real>& gamma = net.params.bound[size_t(spec.gamma)];
    const Tensor<Real>& beta = net.params.bound[size_t(spec.beta)];
    int c = x.shape[1];

    if (kind == NormKind::kBatch && train) {
        std::vector<Real> mean(static_cast<size_t>(c));
        std::vector<Real> var(static_cast<size_t>(c));
        auto y = batchnorm_train(x, gamma, beta, eps, &mean, &var);
        auto& rm = net.state.values[size_t(spec.run_mean)];
        auto& rv = net.state.values[size_t(spec.run_var)];
        for (int ch = 0; ch < c; ch++) {
            rm[ch] = Real((1.0 - momentum) * double(rm[ch]) + momentum * double(mean[size_t(ch)]));
            rv[ch] = Real((1.0 - momentum) * double(rv[ch]) + momentum * double(var[size_t(ch)]));
        }
        return y;
    }

    std::vector<Real> mean(static_cast<size_t>(c));
    std::vector<Real> inv_std(static_cast<size_t>(c));
    if (kind == NormKind::kBatch) {
        const auto& rm = net.state.values[size_t(spec.run_mean)];
        const auto& rv = net.state.values[size_t(spec.run_var)];
        for (int ch = 0; ch < c; ch++) {
            mean[size_t(ch)] = rm[ch];
            inv_std[size_t(ch)] = Real(1.0 / std::sqrt(double(rv[ch]) + eps));
        }
    } else {  // kFrozenBatch: current-batch statistics, held constant
        int b = x.shape[0];
        int64_t plane = int64_t(x.shape[2]) * x.shape[3];
        int64_t m = int64_t(b) * plane;
        const Real* px = x.ptr();
        for (int ch = 0; ch < c; ch++) {
            double mu = 0.0;
            for (int s = 0; s < b; s++) {
                const Real* p = px + (int64_t(s) * c + ch) * plane;
                for (int64_t i = 0; i < plane; i++) mu += double(p[i]);
            }
            mu /= double(m);
            double vv = 0.0;
            for (int s = 0; s < b; s++) {
                const Real* p = px + (int64_t(s) * c + ch) * plane;
                for (int64_t i = 0; i < plane; i++) {
                    double d = double(p[i]) - mu;
                    vv += d * d;
                }
            }
            vv /= double(m);
            mean[size_t(ch)] = Real(mu);
            inv_std[size_t(ch)] = Real(1.0 / std::sqrt(vv + eps));
        }
    }
    auto mean_c = Tensor<Real>::from({c}, std::move(mean));
    auto istd_c = Tensor<Real>::from({c}, std::move(inv_std));
    auto xhat = mul(sub(x, broadcast_channels(mean_c, x.shape)),
                    broadcast_channels(istd_c, x.shape));
    return add(mul(xhat, broadcast_channels(gamma, x.shape)),
               broadcast_channels(beta, x.shape));
}

template <typename Real>
Tensor<Real> apply_double_conv(NetBase<Real>& net, const DoubleConvSpec& spec, NormKind kind,
                               const Tensor<Real>& x, bool train, double eps, double momentum) {
    auto h = apply_conv(net, spec.c1, x, train);
    if (spec.n1) h = apply_norm(net, *spec.n1, kind, h, train, eps, momentum);
    h = relu(h);
    h = apply_conv(net, spec.c2, h, train);
    if (spec.n2) h = apply_norm(net, *spec.n2, kind, h, train, eps, momentum);
    return relu(h);
}

}  // namespace detail

template <typename Real>
Tensor<Real> generator_forward(GeneratorNet<Real>& net, const Tensor<Real>& x, bool train) {
    net.check_bound();
    if (x.shape.size() != 4 || x.shape[1] != net.in_channels)
        throw ShapeError("generator_forward: expected [B," + std::to_string(net.in_channels) +
                         ",H,W], got " + shape_str(x.shape));
    int div = 1 << net.depth;
    if (x.shape[2] % div || x.shape[3] % div)
        throw ShapeError("generator_forward: spatial extents of " + shape_str(x.shape) +
                         " must be divisible by " + std::to_string(div));
    std::vector<Tensor<Real>> skips;
    Tensor<Real> h = x;
    for (int i = 0; i < net.depth; i++) {
        h = detail::apply_double_conv(net, net.encoder[size_t(i)], net.norm, h, train, net.bn_eps,
                                      net.bn_momentum);
        skips.push_back(h);
        h = maxpool2d(h, 2, 2);
    }
    h = detail::apply_double_conv(net, net.bottleneck, net.norm, h, train, net.bn_eps,
                                  net.bn_momentum);
    for (int k = 0; k < net.depth; k++) {
        h = nearest_upsample2x(h);
        h = concat_channels(h, skips[size_t(net.depth - 1 - k)]);
        h = detail::apply_double_conv(net, net.decoder[size_t(k)], net.norm, h, train, net.bn_eps,
                                      net.bn_momentum);
    }
    return detail::apply_conv(net, net.head, h, train);
}

template <typename Real>
Tensor<Real> d1_forward(GlobalDiscriminator<Real>& net, const Tensor<Real>& x, bool train) {
    net.check_bound();
    if (x.shape.size() != 4 || x.shape[1] != 1)
        throw ShapeError("d1_forward: expected [B,1,H,W], got " + shape_str(x.shape));
    if (x.shape[2] != net.cfg.in_h || x.shape[3] != net.cfg.in_w)
        throw ShapeError("d1_forward: network was built for " + std::to_string(net.cfg.in_h) +
                         "x" + std::to_string(net.cfg.in_w) + " patches, got " +
                         shape_str(x.shape));
    Tensor<Real> h = x;
    for (int i = 0; i < 3; i++) {
        h = detail::apply_conv(net, net.stages[size_t(i)], h, train);
        if (net.stage_norms[size_t(i)])
            h = detail::apply_norm(net, *net.stage_norms[size_t(i)], net.cfg.norm, h, train, 1e-5,
                                   0.1);
        h = relu(h);
        h = maxpool2d(h, 2, 2);
    }
    h = relu(detail::apply_conv(net, net.conv4, h, train));
    h = reshape(h, {x.shape[0], net.flat_dim});
    h = relu(detail::apply_linear(net, net.fc[0], h, train));
    h = relu(detail::apply_linear(net, net.fc[1], h, train));
    h = detail::apply_linear(net, net.fc[2], h, train);
    return reshape(h, {x.shape[0]});
}

template <typename Real>
Tensor<Real> d2_forward(LocalDiscriminator<Real>& net, const Tensor<Real>& x, bool train) {
    net.check_bound();
    if (x.shape.size() != 4 || x.shape[1] != 1)
        throw ShapeError("d2_forward: expected [B,1,H,W], got " + shape_str(x.shape));
    if (x.shape[2] % 8 || x.shape[3] % 8)
        throw ShapeError("d2_forward: spatial extents of " + shape_str(x.shape) +
                         " must be divisible by 8");
    Tensor<Real> h = x;
    for (int i = 0; i < 3; i++) {
        h = relu(detail::apply_conv(net, net.down[size_t(i)], h, train));
        h = maxpool2d(h, 2, 2);
    }
    for (int i = 0; i < 3; i++) {
        h = nearest_upsample2x(h);
        h = relu(detail::apply_conv(net, net.up[size_t(i)], h, train));
    }
    return sigmoid(detail::apply_conv(net, net.head, h, train));
}

}  // namespace dualsynth
