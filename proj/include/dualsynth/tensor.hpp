#pragma once

// Reverse-mode differentiation engine. Tensors are dense n-d arrays of Real
// (float for training, double for verification). Ops record nodes on a Tape;
// backward() replays the tape in reverse. Every VJP is itself expressed in
// terms of tape ops, so running backward with create_graph=true yields
// gradients that are again differentiable (one nesting level is all the
// gradient penalty needs). Ops whose VJP falls back to raw buffer math
// (batchnorm in train mode) refuse create_graph instead of silently
// producing wrong second derivatives.

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "dualsynth/common.hpp"

namespace dualsynth {

template <typename Real>
class Tape;

template <typename Real>
struct Tensor {
    std::vector<int> shape;
    std::shared_ptr<std::vector<Real>> data;
    Tape<Real>* tape = nullptr;
    int node = -1;

    Tensor() = default;
    Tensor(std::vector<int> s, std::shared_ptr<std::vector<Real>> d)
        : shape(std::move(s)), data(std::move(d)) {}

    bool defined() const { return data != nullptr; }
    bool requires_grad() const { return node >= 0; }
    bool is_scalar() const { return numel() == 1; }

    int64_t numel() const {
        int64_t n = 1;
        for (int e : shape) n *= e;
        return n;
    }

    Real* ptr() { return data->data(); }
    const Real* ptr() const { return data->data(); }
    Real& operator[](int64_t i) { return (*data)[size_t(i)]; }
    Real operator[](int64_t i) const { return (*data)[size_t(i)]; }

    // value copy with no graph attachment
    Tensor detached() const {
        return Tensor(shape, std::make_shared<std::vector<Real>>(*data));
    }

    static Tensor zeros(std::vector<int> s) {
        int64_t n = 1;
        for (int e : s) n *= e;
        return Tensor(std::move(s), std::make_shared<std::vector<Real>>(size_t(n), Real(0)));
    }
    static Tensor full(std::vector<int> s, Real v) {
        int64_t n = 1;
        for (int e : s) n *= e;
        return Tensor(std::move(s), std::make_shared<std::vector<Real>>(size_t(n), v));
    }
    static Tensor ones(std::vector<int> s) { return full(std::move(s), Real(1)); }
    static Tensor scalar(Real v) { return full({1}, v); }
    static Tensor from(std::vector<int> s, std::vector<Real> v) {
        int64_t n = 1;
        for (int e : s) n *= e;
        if (n != int64_t(v.size()))
            throw ShapeError("tensor: shape " + shape_str(s) + " does not match data length " +
                             std::to_string(v.size()));
        return Tensor(std::move(s), std::make_shared<std::vector<Real>>(std::move(v)));
    }
    static Tensor uniform(std::vector<int> s, Rng& rng, double lo = 0.0, double hi = 1.0) {
        Tensor t = zeros(std::move(s));
        for (auto& v : *t.data) v = Real(rng.uniform(lo, hi));
        return t;
    }
    static Tensor normal(std::vector<int> s, Rng& rng, double sigma = 1.0) {
        Tensor t = zeros(std::move(s));
        for (auto& v : *t.data) v = Real(sigma * rng.normal());
        return t;
    }
};

enum class Op {
    kLeaf,
    kAdd,
    kSub,
    kMul,
    kScale,       // x * c
    kAddScalar,   // x + c
    kPower,       // x ^ p, p real attr
    kAbs,
    kRelu,
    kSigmoid,
    kLog,
    kClamp,
    kMatmul,      // [m,k] x [k,n]
    kTranspose2d,
    kReshape,
    kConv2d,            // x[B,Ci,H,W], w[Co,Ci,kh,kw]
    kConv2dInputVjp,    // (g, w) -> dx
    kConv2dWeightVjp,   // (x, g) -> dw
    kMaxPool2d,         // square window, saved argmax indices
    kPoolScatter,       // (g) -> dx, scatter at saved indices
    kPoolGather,        // (x) -> out, gather at saved indices
    kUpsampleNearest2x,
    kBlockSum2x,        // adjoint of the upsample
    kConcatChannels,
    kSliceChannels,
    kSumAll,            // -> [1]
    kBroadcastScalar,   // [1] -> shape
    kSumPerSample,      // [B,...] -> [B]
    kBroadcastPerSample,
    kSumOverBHW,        // [B,C,H,W] -> [C]
    kBroadcastChannels, // [C] -> [B,C,H,W]
    kSumBatch,          // [B,N] -> [N]
    kBroadcastBatch,    // [N] -> [B,N]
    kBatchNormTrain,    // (x, gamma, beta); first-order only
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::kLeaf: return "leaf";
        case Op::kAdd: return "add";
        case Op::kSub: return "subtract";
        case Op::kMul: return "multiply";
        case Op::kScale: return "scale";
        case Op::kAddScalar: return "add_scalar";
        case Op::kPower: return "power";
        case Op::kAbs: return "abs";
        case Op::kRelu: return "relu";
        case Op::kSigmoid: return "sigmoid";
        case Op::kLog: return "log";
        case Op::kClamp: return "clamp";
        case Op::kMatmul: return "matmul";
        case Op::kTranspose2d: return "transpose2d";
        case Op::kReshape: return "reshape";
        case Op::kConv2d: return "conv2d";
        case Op::kConv2dInputVjp: return "conv2d_input_vjp";
        case Op::kConv2dWeightVjp: return "conv2d_weight_vjp";
        case Op::kMaxPool2d: return "maxpool2d";
        case Op::kPoolScatter: return "pool_scatter";
        case Op::kPoolGather: return "pool_gather";
        case Op::kUpsampleNearest2x: return "nearest_upsample2x";
        case Op::kBlockSum2x: return "block_sum2x";
        case Op::kConcatChannels: return "concat_channels";
        case Op::kSliceChannels: return "slice_channels";
        case Op::kSumAll: return "sum";
        case Op::kBroadcastScalar: return "broadcast_scalar";
        case Op::kSumPerSample: return "sum_per_sample";
        case Op::kBroadcastPerSample: return "broadcast_per_sample";
        case Op::kSumOverBHW: return "sum_over_bhw";
        case Op::kBroadcastChannels: return "broadcast_channels";
        case Op::kSumBatch: return "sum_batch";
        case Op::kBroadcastBatch: return "broadcast_batch";
        case Op::kBatchNormTrain: return "batchnorm(train)";
    }
    return "?";
}

// batchnorm's train-mode VJP is raw buffer math; everything else builds its
// VJP out of tape ops and is safe to differentiate again.
inline bool second_order_supported(Op op) { return op != Op::kBatchNormTrain; }

struct OpAttrs {
    double s0 = 0.0, s1 = 0.0;      // scalar params (power exponent, scale, clamp bounds)
    int i0 = 0, i1 = 0, i2 = 0;     // stride/pad/window etc.
    std::vector<int> shape;         // target shape for broadcast/reshape/vjp ops
    std::shared_ptr<std::vector<int64_t>> indices;  // maxpool argmax
};

template <typename Real>
struct Node {
    Op op = Op::kLeaf;
    std::vector<Tensor<Real>> inputs;  // graph or constant handles
    Tensor<Real> output;               // value; tape/node fields point back
    OpAttrs attrs;
    // saved activations that raw-math VJPs need (batchnorm)
    std::vector<Tensor<Real>> saved;
};

template <typename Real>
class Tape {
   public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // registers a value as a differentiable leaf, sharing its buffer
    Tensor<Real> leaf(const Tensor<Real>& value) {
        Tensor<Real> t = value;
        t.tape = this;
        t.node = int(nodes_.size());
        Node<Real> n;
        n.op = Op::kLeaf;
        n.output = t;
        nodes_.push_back(std::move(n));
        return t;
    }

    Tensor<Real> record(Op op, OpAttrs attrs, std::vector<Tensor<Real>> inputs,
                        Tensor<Real> value) {
        value.tape = this;
        value.node = int(nodes_.size());
        Node<Real> n;
        n.op = op;
        n.attrs = std::move(attrs);
        n.inputs = std::move(inputs);
        n.output = value;
        nodes_.push_back(std::move(n));
        return value;
    }

    Node<Real>& at(int id) { return nodes_[size_t(id)]; }
    const Node<Real>& at(int id) const { return nodes_[size_t(id)]; }
    int size() const { return int(nodes_.size()); }

    bool recording() const { return recording_; }
    void set_recording(bool r) { recording_ = r; }

   private:
    std::vector<Node<Real>> nodes_;
    bool recording_ = true;
};

template <typename Real>
class RecordingGuard {
   public:
    RecordingGuard(Tape<Real>* tape, bool on) : tape_(tape) {
        if (tape_) {
            prev_ = tape_->recording();
            tape_->set_recording(on);
        }
    }
    ~RecordingGuard() {
        if (tape_) tape_->set_recording(prev_);
    }

   private:
    Tape<Real>* tape_;
    bool prev_ = true;
};

// ---------------------------------------------------------------------------
// raw kernels
// ---------------------------------------------------------------------------

namespace detail {

template <typename Real>
using MatMap = Eigen::Map<Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename Real>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename Real>
inline void gemm(const Real* a, const Real* b, Real* c, int m, int k, int n, bool accumulate) {
    ConstMatMap<Real> A(a, m, k);
    ConstMatMap<Real> B(b, k, n);
    MatMap<Real> C(c, m, n);
    if (accumulate)
        C.noalias() += A * B;
    else
        C.noalias() = A * B;
}

inline int conv_out_extent(int in, int kernel, int stride, int pad) {
    return (in + 2 * pad - kernel) / stride + 1;
}

// [Ci*kh*kw] x [Ho*Wo] column matrix for one sample
template <typename Real>
inline void im2col(const Real* x, int ci, int h, int w, int kh, int kw, int stride, int pad,
                   int ho, int wo, Real* cols) {
    for (int c = 0; c < ci; c++) {
        for (int ki = 0; ki < kh; ki++) {
            for (int kj = 0; kj < kw; kj++) {
                Real* row = cols + ((int64_t(c) * kh + ki) * kw + kj) * (int64_t(ho) * wo);
                const Real* plane = x + int64_t(c) * h * w;
                for (int oy = 0; oy < ho; oy++) {
                    int iy = oy * stride + ki - pad;
                    if (iy < 0 || iy >= h) {
                        std::fill(row + int64_t(oy) * wo, row + int64_t(oy + 1) * wo, Real(0));
                        continue;
                    }
                    for (int ox = 0; ox < wo; ox++) {
                        int ix = ox * stride + kj - pad;
                        row[int64_t(oy) * wo + ox] =
                            (ix >= 0 && ix < w) ? plane[int64_t(iy) * w + ix] : Real(0);
                    }
                }
            }
        }
    }
}

template <typename Real>
inline void col2im_add(const Real* cols, int ci, int h, int w, int kh, int kw, int stride,
                       int pad, int ho, int wo, Real* x) {
    for (int c = 0; c < ci; c++) {
        for (int ki = 0; ki < kh; ki++) {
            for (int kj = 0; kj < kw; kj++) {
                const Real* row = cols + ((int64_t(c) * kh + ki) * kw + kj) * (int64_t(ho) * wo);
                Real* plane = x + int64_t(c) * h * w;
                for (int oy = 0; oy < ho; oy++) {
                    int iy = oy * stride + ki - pad;
                    if (iy < 0 || iy >= h) continue;
                    for (int ox = 0; ox < wo; ox++) {
                        int ix = ox * stride + kj - pad;
                        if (ix >= 0 && ix < w) plane[int64_t(iy) * w + ix] += row[int64_t(oy) * wo + ox];
                    }
                }
            }
        }
    }
}

template <typename Real>
inline bool all_finite(const std::vector<Real>& v) {
    for (Real x : v)
        if (!std::isfinite(double(x))) return false;
    return true;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// op construction
// ---------------------------------------------------------------------------

namespace detail {

// All graph inputs must live on one tape; returns it (or null if none).
template <typename Real>
inline Tape<Real>* common_tape(std::span<const Tensor<Real>> ins, const char* who) {
    Tape<Real>* t = nullptr;
    for (const auto& in : ins) {
        if (in.node < 0) continue;
        if (t == nullptr)
            t = in.tape;
        else if (t != in.tape)
            throw ContractError(std::string(who) + ": operands belong to different tapes");
    }
    return t;
}

template <typename Real>
inline Tensor<Real> emit(Op op, OpAttrs attrs, std::vector<Tensor<Real>> inputs,
                         Tensor<Real> value) {
    Tape<Real>* tape = common_tape<Real>(inputs, op_name(op));
    if (tape == nullptr || !tape->recording()) return value;
    return tape->record(op, std::move(attrs), std::move(inputs), std::move(value));
}

template <typename Real>
inline void check_same_shape(const Tensor<Real>& a, const Tensor<Real>& b, const char* who) {
    if (a.shape != b.shape)
        throw ShapeError(std::string(who) + ": operand shapes " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape) + " differ");
}

}  // namespace detail

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::check_same_shape(a, b, "add");
    auto out = Tensor<Real>::zeros(a.shape);
    const Real* pa = a.ptr();
    const Real* pb = b.ptr();
    Real* po = out.ptr();
    for (int64_t i = 0, n = a.numel(); i < n; i++) po[i] = pa[i] + pb[i];
    return detail::emit<Real>(Op::kAdd, {}, {a, b}, std::move(out));
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::check_same_shape(a, b, "subtract");
    auto out = Tensor<Real>::zeros(a.shape);
    const Real* pa = a.ptr();
    const Real* pb = b.ptr();
    Real* po = out.ptr();
    for (int64_t i = 0, n = a.numel(); i < n; i++) po[i] = pa[i] - pb[i];
    return detail::emit<Real>(Op::kSub, {}, {a, b}, std::move(out));
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::check_same_shape(a, b, "multiply");
    auto out = Tensor<Real>::zeros(a.shape);
    const Real* pa = a.ptr();
    const Real* pb = b.ptr();
    Real* po = out.ptr();
    for (int64_t i = 0, n = a.numel(); i < n; i++) po[i] = pa[i] * pb[i];
    return detail::emit<Real>(Op::kMul, {}, {a, b}, std::move(out));
}

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& x, double c) {
    auto out = Tensor<Real>::zeros(x.shape);
    const Real* px = x.ptr();
    Real* po = out.ptr();
    for (int64_t i = 0, n = x.numel(); i < n; i++) po[i] = Real(px[i] * Real(c));
    OpAttrs at;
    at.s0 = c;
    return detail::emit<Real>(Op::kScale, std::move(at), {x}, std::move(out));
}

template <typename Real>
Tensor<Real> add_scalar(const Tensor<Real>& x, double c) {
    auto out = Tensor<Real>::zeros(x.shape);
    const Real* px = x.ptr();
    Real* po = out.ptr();
    for (int64_t i = 0, n = x.numel(); i < n; i++) po[i] = Real(px[i] + Real(c));
    OpAttrs at;
    at.s0 = c;
    return detail::emit<Real>(Op::kAddScalar, std::move(at), {x}, std::move(out));
}

template <typename Real>
Tensor<Real> power(const Tensor<Real>& x, double p) {
    auto out = Tensor<Real>::zeros(x.shape);
    const Real* px = x.ptr();
    Real* po = out.ptr();
    int64_t n = x.numel();
    if (p == 1.0) {
        for (int64_t i = 0; i < n; i++) po[i] = px[i];
    } else if (p == 2.0) {
        for (int64_t i = 0; i < n; i++) po[i] = px[i] * px[i];
    } else if (p == 0.5) {
        for (int64_t i = 0; i < n; i++) po[i] = Real(std::sqrt(double(px[i])));
    } else {
        for (int64_t i = 0; i < n; i++) po[i] = Real(std::pow(double(px[i]), p));
    }
    OpAttrs at;
    at.s0 = p;
    return detail::emit<Real>(Op::kPower, std::move(at), {x}, std::move(out));
}

template <typename Real>
Tensor<Real> sqrt(const Tensor<Real>& x) {
    return power(x, 0.5);
}

template <typename Real>
Tensor<Real> abs(const Tensor<Real>& x) {
    auto out = Tensor<Real>::zeros(x.shape);
    const Real* px = x.ptr();
    Real* po = out.ptr();
    for (int64_t i = 0, n = x.numel(); i < n; i++) po[i] = px[i] < Real(0) ? -px[i] : px[i];
    return detail::emit<Real>(Op::kAbs, {}, {x}, std::move(out));
}

template <typename Real>
Tensor<Real> relu(const Tensor<Real>& x) {
    auto out = Tensor<Real>::zeros(x.shape);
    const Real* px = x.ptr();
    Real* po = out.ptr();
    // subgradient at 0 is 0 (see vjp)
    for (int64_t i = 0, n = x.numel(); i < n; i++) po[i] = px[i] > Real(0) ? px[i] : Real(0);
    return detail::emit<Real>(Op::kRelu, {}, {x}, std::move(out));
}

template <typename Real>
Tensor<Real> sigmoid(const Tensor<Real>& x) {
    auto out = Tensor<Real>::zeros(x.shape);
    const Real* px = x.ptr();
    Real* po = out.ptr();
    for (int64_t i = 0, n = x.numel(); i < n; i++) {
        double v = double(px[i]);
        double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        po[i] = Real(s);
    }
    return detail::emit<Real>(Op::kSigmoid, {}, {x}, std::move(out));
}

template <typename Real>
Tensor<Real> log(const Tensor<Real>& x) {
    auto out = Tensor<Real>::zeros(x.shape);
    const Real* px = x.ptr();
    Real* po = out.ptr();
    for (int64_t i = 0, n = x.numel(); i < n; i++) po[i] = Real(std::log(double(px[i])));
    return detail::emit<Real>(Op::kLog, {}, {x}, std::move(out));
}

template <typename Real>
Tensor<Real> clamp(const Tensor<Real>& x, double lo, double hi) {
    auto out = Tensor<Real>::zeros(x.shape);
    const Real* px = x.ptr();
    Real* po = out.ptr();
    for (int64_t i = 0, n = x.numel(); i < n; i++)
        po[i] = px[i] < Real(lo) ? Real(lo) : (px[i] > Real(hi) ? Real(hi) : px[i]);
    OpAttrs at;
    at.s0 = lo;
    at.s1 = hi;
    return detail::emit<Real>(Op::kClamp, std::move(at), {x}, std::move(out));
}

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape.size() != 2 || b.shape.size() != 2)
        throw ShapeError("matmul: operands must be 2-d, got " + shape_str(a.shape) + " and " +
                         shape_str(b.shape));
    if (a.shape[1] != b.shape[0])
        throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape) + " x " +
                         shape_str(b.shape));
    int m = a.shape[0], k = a.shape[1], n = b.shape[1];
    auto out = Tensor<Real>::zeros({m, n});
    detail::gemm(a.ptr(), b.ptr(), out.ptr(), m, k, n, false);
    return detail::emit<Real>(Op::kMatmul, {}, {a, b}, std::move(out));
}

template <typename Real>
Tensor<Real> transpose2d(const Tensor<Real>& x) {
    if (x.shape.size() != 2)
        throw ShapeError("transpose2d: operand must be 2-d, got " + shape_str(x.shape));
    int m = x.shape[0], n = x.shape[1];
    auto out = Tensor<Real>::zeros({n, m});
    const Real* px = x.ptr();
    Real* po = out.ptr();
    for (int i = 0; i < m; i++)
        for (int j = 0; j < n; j++) po[int64_t(j) * m + i] = px[int64_t(i) * n + j];
    return detail::emit<Real>(Op::kTranspose2d, {}, {x}, std::move(out));
}

template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& x, std::vector<int> new_shape) {
    int64_t n = 1;
    for (int e : new_shape) n *= e;
    if (n != x.numel())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape) + " as " +
                         shape_str(new_shape));
    Tensor<Real> out(new_shape, std::make_shared<std::vector<Real>>(*x.data));
    OpAttrs at;
    at.shape = x.shape;
    return detail::emit<Real>(Op::kReshape, std::move(at), {x}, std::move(out));
}

template <typename Real>
Tensor<Real> conv2d(const Tensor<Real>& x, const Tensor<Real>& w, int stride = 1, int pad = 0) {
    if (x.shape.size() != 4 || w.shape.size() != 4)
        throw ShapeError("conv2d: expected 4-d input and weight, got " + shape_str(x.shape) +
                         " and " + shape_str(w.shape));
    if (x.shape[1] != w.shape[1])
        throw ShapeError("conv2d: input channels " + shape_str(x.shape) +
                         " do not match weight " + shape_str(w.shape));
    int b = x.shape[0], ci = x.shape[1], h = x.shape[2], wd = x.shape[3];
    int co = w.shape[0], kh = w.shape[2], kw = w.shape[3];
    int ho = detail::conv_out_extent(h, kh, stride, pad);
    int wo = detail::conv_out_extent(wd, kw, stride, pad);
    if (ho <= 0 || wo <= 0)
        throw ShapeError("conv2d: kernel " + shape_str(w.shape) + " does not fit input " +
                         shape_str(x.shape));
    auto out = Tensor<Real>::zeros({b, co, ho, wo});
    int64_t kdim = int64_t(ci) * kh * kw;
    int64_t ncol = int64_t(ho) * wo;
    std::vector<Real> cols(size_t(kdim * ncol));
    for (int s = 0; s < b; s++) {
        detail::im2col(x.ptr() + int64_t(s) * ci * h * wd, ci, h, wd, kh, kw, stride, pad, ho, wo,
                       cols.data());
        detail::gemm(w.ptr(), cols.data(), out.ptr() + int64_t(s) * co * ncol, co, int(kdim),
                     int(ncol), false);
    }
    OpAttrs at;
    at.i0 = stride;
    at.i1 = pad;
    return detail::emit<Real>(Op::kConv2d, std::move(at), {x, w}, std::move(out));
}

// dL/dx of conv2d given upstream grad g and weight w
template <typename Real>
Tensor<Real> conv2d_input_vjp(const Tensor<Real>& g, const Tensor<Real>& w,
                              std::vector<int> x_shape, int stride, int pad) {
    int b = x_shape[0], ci = x_shape[1], h = x_shape[2], wd = x_shape[3];
    int co = w.shape[0], kh = w.shape[2], kw = w.shape[3];
    int ho = g.shape[2], wo = g.shape[3];
    auto out = Tensor<Real>::zeros(x_shape);
    int64_t kdim = int64_t(ci) * kh * kw;
    int64_t ncol = int64_t(ho) * wo;
    std::vector<Real> wt(size_t(kdim) * co);
    {
        const Real* pw = w.ptr();
        for (int o = 0; o < co; o++)
            for (int64_t r = 0; r < kdim; r++) wt[size_t(r) * co + o] = pw[int64_t(o) * kdim + r];
    }
    std::vector<Real> cols(size_t(kdim * ncol));
    for (int s = 0; s < b; s++) {
        detail::gemm(wt.data(), g.ptr() + int64_t(s) * co * ncol, cols.data(), int(kdim), co,
                     int(ncol), false);
        detail::col2im_add(cols.data(), ci, h, wd, kh, kw, stride, pad, ho, wo,
                           out.ptr() + int64_t(s) * ci * h * wd);
    }
    OpAttrs at;
    at.i0 = stride;
    at.i1 = pad;
    at.shape = std::move(x_shape);
    return detail::emit<Real>(Op::kConv2dInputVjp, std::move(at), {g, w}, std::move(out));
}

// dL/dw of conv2d given input x and upstream grad g
template <typename Real>
Tensor<Real> conv2d_weight_vjp(const Tensor<Real>& x, const Tensor<Real>& g,
                               std::vector<int> w_shape, int stride, int pad) {
    int b = x.shape[0], ci = x.shape[1], h = x.shape[2], wd = x.shape[3];
    int co = w_shape[0], kh = w_shape[2], kw = w_shape[3];
    int ho = g.shape[2], wo = g.shape[3];
    auto out = Tensor<Real>::zeros(w_shape);
    int64_t kdim = int64_t(ci) * kh * kw;
    int64_t ncol = int64_t(ho) * wo;
    std::vector<Real> cols(size_t(kdim * ncol));
    std::vector<Real> colst(size_t(kdim * ncol));
    for (int s = 0; s < b; s++) {
        detail::im2col(x.ptr() + int64_t(s) * ci * h * wd, ci, h, wd, kh, kw, stride, pad, ho, wo,
                       cols.data());
        for (int64_t r = 0; r < kdim; r++)
            for (int64_t cidx = 0; cidx < ncol; cidx++)
                colst[size_t(cidx * kdim + r)] = cols[size_t(r * ncol + cidx)];
        detail::gemm(g.ptr() + int64_t(s) * co * ncol, colst.data(), out.ptr(), co, int(ncol),
                     int(kdim), true);
    }
    OpAttrs at;
    at.i0 = stride;
    at.i1 = pad;
    at.shape = std::move(w_shape);
    return detail::emit<Real>(Op::kConv2dWeightVjp, std::move(at), {x, g}, std::move(out));
}

template <typename Real>
Tensor<Real> maxpool2d(const Tensor<Real>& x, int window = 2, int stride = 2) {
    if (x.shape.size() != 4)
        throw ShapeError("maxpool2d: expected 4-d input, got " + shape_str(x.shape));
    int b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
    if (h < window || w < window)
        throw ShapeError("maxpool2d: input " + shape_str(x.shape) + " smaller than window " +
                         std::to_string(window));
    int ho = (h - window) / stride + 1;
    int wo = (w - window) / stride + 1;
    auto out = Tensor<Real>::zeros({b, c, ho, wo});
    auto idx = std::make_shared<std::vector<int64_t>>(size_t(out.numel()));
    const Real* px = x.ptr();
    Real* po = out.ptr();
    int64_t o = 0;
    for (int s = 0; s < b; s++) {
        for (int ch = 0; ch < c; ch++) {
            const Real* plane = px + (int64_t(s) * c + ch) * h * w;
            int64_t base = (int64_t(s) * c + ch) * h * w;
            for (int oy = 0; oy < ho; oy++) {
                for (int ox = 0; ox < wo; ox++, o++) {
                    int iy0 = oy * stride, ix0 = ox * stride;
                    Real best = plane[int64_t(iy0) * w + ix0];
                    int64_t besti = base + int64_t(iy0) * w + ix0;
                    for (int dy = 0; dy < window; dy++)
                        for (int dx = 0; dx < window; dx++) {
                            Real v = plane[int64_t(iy0 + dy) * w + ix0 + dx];
                            if (v > best) {
                                best = v;
                                besti = base + int64_t(iy0 + dy) * w + ix0 + dx;
                            }
                        }
                    po[o] = best;
                    (*idx)[size_t(o)] = besti;
                }
            }
        }
    }
    OpAttrs at;
    at.i0 = window;
    at.i1 = stride;
    at.shape = x.shape;
    at.indices = std::move(idx);
    return detail::emit<Real>(Op::kMaxPool2d, std::move(at), {x}, std::move(out));
}

// scatter g into a zero tensor of shape at saved flat indices (adjoint of gather)
template <typename Real>
Tensor<Real> pool_scatter(const Tensor<Real>& g, std::shared_ptr<std::vector<int64_t>> indices,
                          std::vector<int> x_shape) {
    auto out = Tensor<Real>::zeros(x_shape);
    const Real* pg = g.ptr();
    Real* po = out.ptr();
    for (int64_t i = 0, n = g.numel(); i < n; i++) po[(*indices)[size_t(i)]] += pg[i];
    OpAttrs at;
    at.shape = std::move(x_shape);
    at.indices = std::move(indices);
    return detail::emit<Real>(Op::kPoolScatter, std::move(at), {g}, std::move(out));
}

template <typename Real>
Tensor<Real> pool_gather(const Tensor<Real>& x, std::shared_ptr<std::vector<int64_t>> indices,
                         std::vector<int> out_shape) {
    auto out = Tensor<Real>::zeros(out_shape);
    const Real* px = x.ptr();
    Real* po = out.ptr();
    for (int64_t i = 0, n = out.numel(); i < n; i++) po[i] = px[(*indices)[size_t(i)]];
    OpAttrs at;
    at.shape = std::move(out_shape);
    at.indices = std::move(indices);
    return detail::emit<Real>(Op::kPoolGather, std::move(at), {x}, std::move(out));
}

template <typename Real>
Tensor<Real> nearest_upsample2x(const Tensor<Real>& x) {
    if (x.shape.size() != 4)
        throw ShapeError("nearest_upsample2x: expected 4-d input, got " + shape_str(x.shape));
    int b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
    auto out = Tensor<Real>::zeros({b, c, 2 * h, 2 * w});
    const Real* px = x.ptr();
    Real* po = out.ptr();
    for (int64_t p = 0; p < int64_t(b) * c; p++) {
        const Real* ip = px + p * h * w;
        Real* op = po + p * 4 * h * w;
        for (int y = 0; y < h; y++)
            for (int x2 = 0; x2 < w; x2++) {
                Real v = ip[int64_t(y) * w + x2];
                op[int64_t(2 * y) * 2 * w + 2 * x2] = v;
                op[int64_t(2 * y) * 2 * w + 2 * x2 + 1] = v;
                op[int64_t(2 * y + 1) * 2 * w + 2 * x2] = v;
                op[int64_t(2 * y + 1) * 2 * w + 2 * x2 + 1] = v;
            }
    }
    return detail::emit<Real>(Op::kUpsampleNearest2x, {}, {x}, std::move(out));
}

template <typename Real>
Tensor<Real> block_sum2x(const Tensor<Real>& x) {
    if (x.shape.size() != 4 || x.shape[2] % 2 || x.shape[3] % 2)
        throw ShapeError("block_sum2x: expected 4-d input with even spatial extents, got " +
                         shape_str(x.shape));
    int b = x.shape[0], c = x.shape[1], h = x.shape[2] / 2, w = x.shape[3] / 2;
    auto out = Tensor<Real>::zeros({b, c, h, w});
    const Real* px = x.ptr();
    Real* po = out.ptr();
    for (int64_t p = 0; p < int64_t(b) * c; p++) {
        const Real* ip = px + p * 4 * h * w;
        Real* op = po + p * h * w;
        for (int y = 0; y < h; y++)
            for (int x2 = 0; x2 < w; x2++)
                op[int64_t(y) * w + x2] = ip[int64_t(2 * y) * 2 * w + 2 * x2] +
                                          ip[int64_t(2 * y) * 2 * w + 2 * x2 + 1] +
                                          ip[int64_t(2 * y + 1) * 2 * w + 2 * x2] +
                                          ip[int64_t(2 * y + 1) * 2 * w + 2 * x2 + 1];
    }
    return detail::emit<Real>(Op::kBlockSum2x, {}, {x}, std::move(out));
}

template <typename Real>
Tensor<Real> concat_channels(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape.size() != 4 || b.shape.size() != 4 || a.shape[0] != b.shape[0] ||
        a.shape[2] != b.shape[2] || a.shape[3] != b.shape[3])
        throw ShapeError("concat_channels: operand shapes " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape) + " incompatible");
    int bs = a.shape[0], ca = a.shape[1], cb = b.shape[1], h = a.shape[2], w = a.shape[3];
    auto out = Tensor<Real>::zeros({bs, ca + cb, h, w});
    int64_t plane = int64_t(h) * w;
    for (int s = 0; s < bs; s++) {
        std::memcpy(out.ptr() + int64_t(s) * (ca + cb) * plane, a.ptr() + int64_t(s) * ca * plane,
                    size_t(ca * plane) * sizeof(Real));
        std::memcpy(out.ptr() + (int64_t(s) * (ca + cb) + ca) * plane,
                    b.ptr() + int64_t(s) * cb * plane, size_t(cb * plane) * sizeof(Real));
    }
    return detail::emit<Real>(Op::kConcatChannels, {}, {a, b}, std::move(out));
}

template <typename Real>
Tensor<Real> slice_channels(const Tensor<Real>& x, int start, int count) {
    if (x.shape.size() != 4 || start < 0 || start + count > x.shape[1])
        throw ShapeError("slice_channels: range [" + std::to_string(start) + "," +
                         std::to_string(start + count) + ") invalid for " + shape_str(x.shape));
    int bs = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
    auto out = Tensor<Real>::zeros({bs, count, h, w});
    int64_t plane = int64_t(h) * w;
    for (int s = 0; s < bs; s++)
        std::memcpy(out.ptr() + int64_t(s) * count * plane,
                    x.ptr() + (int64_t(s) * c + start) * plane, size_t(count * plane) * sizeof(Real));
    OpAttrs at;
    at.i0 = start;
    at.i1 = count;
    return detail::emit<Real>(Op::kSliceChannels, std::move(at), {x}, std::move(out));
}

template <typename Real>
Tensor<Real> sum_all(const Tensor<Real>& x) {
    double acc = 0.0;
    const Real* px = x.ptr();
    for (int64_t i = 0, n = x.numel(); i < n; i++) acc += double(px[i]);
    auto out = Tensor<Real>::scalar(Real(acc));
    return detail::emit<Real>(Op::kSumAll, {}, {x}, std::move(out));
}

template <typename Real>
Tensor<Real> broadcast_scalar(const Tensor<Real>& x, std::vector<int> shape) {
    if (!x.is_scalar()) throw ShapeError("broadcast_scalar: source must be scalar");
    auto out = Tensor<Real>::full(shape, (*x.data)[0]);
    OpAttrs at;
    at.shape = std::move(shape);
    return detail::emit<Real>(Op::kBroadcastScalar, std::move(at), {x}, std::move(out));
}

template <typename Real>
Tensor<Real> mean_all(const Tensor<Real>& x) {
    return scale(sum_all(x), 1.0 / double(x.numel()));
}

// [B, ...] -> [B], summing each sample's block
template <typename Real>
Tensor<Real> sum_per_sample(const Tensor<Real>& x) {
    if (x.shape.empty()) throw ShapeError("sum_per_sample: scalar input");
    int b = x.shape[0];
    int64_t block = x.numel() / b;
    auto out = Tensor<Real>::zeros({b});
    const Real* px = x.ptr();
    for (int s = 0; s < b; s++) {
        double acc = 0.0;
        for (int64_t i = 0; i < block; i++) acc += double(px[int64_t(s) * block + i]);
        out.ptr()[s] = Real(acc);
    }
    return detail::emit<Real>(Op::kSumPerSample, {}, {x}, std::move(out));
}

template <typename Real>
Tensor<Real> broadcast_per_sample(const Tensor<Real>& x, std::vector<int> shape) {
    if (x.shape.size() != 1 || shape.empty() || shape[0] != x.shape[0])
        throw ShapeError("broadcast_per_sample: source " + shape_str(x.shape) +
                         " incompatible with target " + shape_str(shape));
    int b = shape[0];
    auto out = Tensor<Real>::zeros(shape);
    int64_t block = out.numel() / b;
    Real* po = out.ptr();
    for (int s = 0; s < b; s++)
        std::fill(po + int64_t(s) * block, po + int64_t(s + 1) * block, x.ptr()[s]);
    OpAttrs at;
    at.shape = std::move(shape);
    return detail::emit<Real>(Op::kBroadcastPerSample, std::move(at), {x}, std::move(out));
}

template <typename Real>
Tensor<Real> sum_over_bhw(const Tensor<Real>& x) {
    if (x.shape.size() != 4) throw ShapeError("sum_over_bhw: expected 4-d, got " + shape_str(x.shape));
    int b = x.shape[0], c = x.shape[1];
    int64_t plane = int64_t(x.shape[2]) * x.shape[3];
    auto out = Tensor<Real>::zeros({c});
    const Real* px = x.ptr();
    for (int ch = 0; ch < c; ch++) {
        double acc = 0.0;
        for (int s = 0; s < b; s++) {
            const Real* p = px + (int64_t(s) * c + ch) * plane;
            for (int64_t i = 0; i < plane; i++) acc += double(p[i]);
        }
        out.ptr()[ch] = Real(acc);
    }
    return detail::emit<Real>(Op::kSumOverBHW, {}, {x}, std::move(out));
}

template <typename Real>
Tensor<Real> broadcast_channels(const Tensor<Real>& x, std::vector<int> shape) {
    if (x.shape.size() != 1 || shape.size() != 4 || shape[1] != x.shape[0])
        throw ShapeError("broadcast_channels: source " + shape_str(x.shape) +
                         " incompatible with target " + shape_str(shape));
    auto out = Tensor<Real>::zeros(shape);
    int b = shape[0], c = shape[1];
    int64_t plane = int64_t(shape[2]) * shape[3];
    Real* po = out.ptr();
    for (int s = 0; s < b; s++)
        for (int ch = 0; ch < c; ch++)
            std::fill(po + (int64_t(s) * c + ch) * plane, po + (int64_t(s) * c + ch + 1) * plane,
                      x.ptr()[ch]);
    OpAttrs at;
    at.shape = std::move(shape);
    return detail::emit<Real>(Op::kBroadcastChannels, std::move(at), {x}, std::move(out));
}

template <typename Real>
Tensor<Real> sum_batch(const Tensor<Real>& x) {
    if (x.shape.size() != 2) throw ShapeError("sum_batch: expected 2-d, got " + shape_str(x.shape));
    int b = x.shape[0], n = x.shape[1];
    auto out = Tensor<Real>::zeros({n});
    const Real* px = x.ptr();
    for (int j = 0; j < n; j++) {
        double acc = 0.0;
        for (int s = 0; s < b; s++) acc += double(px[int64_t(s) * n + j]);
        out.ptr()[j] = Real(acc);
    }
    return detail::emit<Real>(Op::kSumBatch, {}, {x}, std::move(out));
}

template <typename Real>
Tensor<Real> broadcast_batch(const Tensor<Real>& x, int b) {
    if (x.shape.size() != 1) throw ShapeError("broadcast_batch: expected 1-d, got " + shape_str(x.shape));
    int n = x.shape[0];
    auto out = Tensor<Real>::zeros({b, n});
    Real* po = out.ptr();
    for (int s = 0; s < b; s++) std::memcpy(po + int64_t(s) * n, x.ptr(), size_t(n) * sizeof(Real));
    OpAttrs at;
    at.shape = {b, n};
    return detail::emit<Real>(Op::kBroadcastBatch, std::move(at), {x}, std::move(out));
}

// Train-mode batch normalization over (B,H,W) per channel. Saves xhat and the
// inverse std for the backward formula; the VJP is raw math, so this op is
// first-order only. Eval-mode normalization is composed from elementwise ops
// instead (see nn.hpp) and stays twice-differentiable.
template <typename Real>
Tensor<Real> batchnorm_train(const Tensor<Real>& x, const Tensor<Real>& gamma,
                             const Tensor<Real>& beta, double eps,
                             std::vector<Real>* out_mean = nullptr,
                             std::vector<Real>* out_var = nullptr) {
    if (x.shape.size() != 4) throw ShapeError("batchnorm: expected 4-d, got " + shape_str(x.shape));
    int b = x.shape[0], c = x.shape[1];
    int64_t plane = int64_t(x.shape[2]) * x.shape[3];
    if (gamma.shape != std::vector<int>{c} || beta.shape != std::vector<int>{c})
        throw ShapeError("batchnorm: gamma/beta must be [" + std::to_string(c) + "]");
    int64_t m = int64_t(b) * plane;
    auto xhat = Tensor<Real>::zeros(x.shape);
    auto invstd = Tensor<Real>::zeros({c});
    auto out = Tensor<Real>::zeros(x.shape);
    const Real* px = x.ptr();
    for (int ch = 0; ch < c; ch++) {
        double mean = 0.0;
        for (int s = 0; s < b; s++) {
            const Real* p = px + (int64_t(s) * c + ch) * plane;
            for (int64_t i = 0; i < plane; i++) mean += double(p[i]);
        }
        mean /= double(m);
        double var = 0.0;
        for (int s = 0; s < b; s++) {
            const Real* p = px + (int64_t(s) * c + ch) * plane;
            for (int64_t i = 0; i < plane; i++) {
                double d = double(p[i]) - mean;
                var += d * d;
            }
        }
        var /= double(m);
        double istd = 1.0 / std::sqrt(var + eps);
        invstd.ptr()[ch] = Real(istd);
        if (out_mean) (*out_mean)[size_t(ch)] = Real(mean);
        if (out_var) (*out_var)[size_t(ch)] = Real(var);
        double g = double(gamma.ptr()[ch]), bt = double(beta.ptr()[ch]);
        for (int s = 0; s < b; s++) {
            const Real* p = px + (int64_t(s) * c + ch) * plane;
            Real* ph = xhat.ptr() + (int64_t(s) * c + ch) * plane;
            Real* po = out.ptr() + (int64_t(s) * c + ch) * plane;
            for (int64_t i = 0; i < plane; i++) {
                double xh = (double(p[i]) - mean) * istd;
                ph[i] = Real(xh);
                po[i] = Real(g * xh + bt);
            }
        }
    }
    OpAttrs at;
    at.s0 = eps;
    Tape<Real>* tape = detail::common_tape<Real>(
        std::array<Tensor<Real>, 3>{x, gamma, beta}, "batchnorm");
    if (tape == nullptr || !tape->recording()) return out;
    auto r = tape->record(Op::kBatchNormTrain, std::move(at), {x, gamma, beta}, std::move(out));
    tape->at(r.node).saved = {xhat, invstd};
    return r;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

template <typename Real>
class GradMap {
   public:
    GradMap(Tape<Real>* tape, std::vector<Tensor<Real>> grads)
        : tape_(tape), grads_(std::move(grads)) {}

    // gradient of the backward root w.r.t. t; zeros if t was not reached
    Tensor<Real> grad_of(const Tensor<Real>& t) const {
        if (t.node < 0 || t.tape != tape_)
            throw ContractError("grad_of: tensor is not a node of the differentiated tape");
        const Tensor<Real>& g = grads_[size_t(t.node)];
        if (!g.defined()) return Tensor<Real>::zeros(t.shape);
        return g;
    }

    bool reached(const Tensor<Real>& t) const {
        return t.node >= 0 && t.tape == tape_ && grads_[size_t(t.node)].defined();
    }

   private:
    Tape<Real>* tape_;
    std::vector<Tensor<Real>> grads_;
};

namespace detail {

template <typename Real>
Tensor<Real> const_like(const Tensor<Real>& x, std::vector<Real> vals) {
    return Tensor<Real>(x.shape, std::make_shared<std::vector<Real>>(std::move(vals)));
}

// VJP dispatch: given node and upstream grad g (same shape as node output),
// pushes a contribution for each differentiable input via sink(input_index, grad).
template <typename Real, typename Sink>
void vjp(const Node<Real>& node, const Tensor<Real>& g, Sink&& sink) {
    const auto& in = node.inputs;
    switch (node.op) {
        case Op::kLeaf:
            break;
        case Op::kAdd:
            sink(0, g);
            sink(1, g);
            break;
        case Op::kSub:
            sink(0, g);
            sink(1, scale(g, -1.0));
            break;
        case Op::kMul:
            sink(0, mul(g, in[1]));
            sink(1, mul(g, in[0]));
            break;
        case Op::kScale:
            sink(0, scale(g, node.attrs.s0));
            break;
        case Op::kAddScalar:
            sink(0, g);
            break;
        case Op::kPower: {
            double p = node.attrs.s0;
            if (p == 1.0)
                sink(0, g);
            else
                sink(0, mul(g, scale(power(in[0], p - 1.0), p)));
            break;
        }
        case Op::kAbs: {
            std::vector<Real> sgn(size_t(in[0].numel()));
            const Real* px = in[0].ptr();
            for (size_t i = 0; i < sgn.size(); i++)
                sgn[i] = px[i] > Real(0) ? Real(1) : (px[i] < Real(0) ? Real(-1) : Real(0));
            sink(0, mul(g, const_like(in[0], std::move(sgn))));
            break;
        }
        case Op::kRelu: {
            std::vector<Real> mask(size_t(in[0].numel()));
            const Real* px = in[0].ptr();
            for (size_t i = 0; i < mask.size(); i++) mask[i] = px[i] > Real(0) ? Real(1) : Real(0);
            sink(0, mul(g, const_like(in[0], std::move(mask))));
            break;
        }
        case Op::kSigmoid: {
            // s(1-s) with s the recorded output node, so the factor stays differentiable
            const Tensor<Real>& s = node.output;
            sink(0, mul(g, mul(s, add_scalar(scale(s, -1.0), 1.0))));
            break;
        }
        case Op::kLog:
            sink(0, mul(g, power(in[0], -1.0)));
            break;
        case Op::kClamp: {
            std::vector<Real> mask(size_t(in[0].numel()));
            const Real* px = in[0].ptr();
            Real lo = Real(node.attrs.s0), hi = Real(node.attrs.s1);
            for (size_t i = 0; i < mask.size(); i++)
                mask[i] = (px[i] > lo && px[i] < hi) ? Real(1) : Real(0);
            sink(0, mul(g, const_like(in[0], std::move(mask))));
            break;
        }
        case Op::kMatmul:
            sink(0, matmul(g, transpose2d(in[1])));
            sink(1, matmul(transpose2d(in[0]), g));
            break;
        case Op::kTranspose2d:
            sink(0, transpose2d(g));
            break;
        case Op::kReshape:
            sink(0, reshape(g, node.attrs.shape));
            break;
        case Op::kConv2d:
            sink(0, conv2d_input_vjp(g, in[1], in[0].shape, node.attrs.i0, node.attrs.i1));
            sink(1, conv2d_weight_vjp(in[0], g, in[1].shape, node.attrs.i0, node.attrs.i1));
            break;
        case Op::kConv2dInputVjp:
            // node = B(g0, w); d/dg0 = conv2d(g, w), d/dw = weight_vjp(g, g0)
            sink(0, conv2d(g, in[1], node.attrs.i0, node.attrs.i1));
            sink(1, conv2d_weight_vjp(g, in[0], in[1].shape, node.attrs.i0, node.attrs.i1));
            break;
        case Op::kConv2dWeightVjp:
            // node = C(x, g0); d/dx = input_vjp(g0, g), d/dg0 = conv2d(x, g)
            sink(0, conv2d_input_vjp(in[1], g, in[0].shape, node.attrs.i0, node.attrs.i1));
            sink(1, conv2d(in[0], g, node.attrs.i0, node.attrs.i1));
            break;
        case Op::kMaxPool2d:
            sink(0, pool_scatter(g, node.attrs.indices, node.attrs.shape));
            break;
        case Op::kPoolScatter:
            sink(0, pool_gather(g, node.attrs.indices, in[0].shape));
            break;
        case Op::kPoolGather:
            sink(0, pool_scatter(g, node.attrs.indices, in[0].shape));
            break;
        case Op::kUpsampleNearest2x:
            sink(0, block_sum2x(g));
            break;
        case Op::kBlockSum2x:
            sink(0, nearest_upsample2x(g));
            break;
        case Op::kConcatChannels:
            sink(0, slice_channels(g, 0, in[0].shape[1]));
            sink(1, slice_channels(g, in[0].shape[1], in[1].shape[1]));
            break;
        case Op::kSliceChannels: {
            int c = in[0].shape[1], start = node.attrs.i0, count = node.attrs.i1;
            Tensor<Real> padded = g;
            if (start > 0) {
                auto zeros_pre = Tensor<Real>::zeros(
                    {in[0].shape[0], start, in[0].shape[2], in[0].shape[3]});
                padded = concat_channels(zeros_pre, padded);
            }
            if (start + count < c) {
                auto zeros_post = Tensor<Real>::zeros(
                    {in[0].shape[0], c - start - count, in[0].shape[2], in[0].shape[3]});
                padded = concat_channels(padded, zeros_post);
            }
            sink(0, padded);
            break;
        }
        case Op::kSumAll:
            sink(0, broadcast_scalar(g, in[0].shape));
            break;
        case Op::kBroadcastScalar:
            sink(0, sum_all(g));
            break;
        case Op::kSumPerSample:
            sink(0, broadcast_per_sample(g, in[0].shape));
            break;
        case Op::kBroadcastPerSample:
            sink(0, sum_per_sample(g));
            break;
        case Op::kSumOverBHW:
            sink(0, broadcast_channels(g, in[0].shape));
            break;
        case Op::kBroadcastChannels:
            sink(0, sum_over_bhw(g));
            break;
        case Op::kSumBatch:
            sink(0, broadcast_batch(g, in[0].shape[0]));
            break;
        case Op::kBroadcastBatch:
            sink(0, sum_batch(g));
            break;
        case Op::kBatchNormTrain: {
            // dxhat = g*gamma; dx = invstd*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
            const Tensor<Real>& xhat = node.saved[0];
            const Tensor<Real>& invstd = node.saved[1];
            const Tensor<Real>& gamma = in[1];
            int b = xhat.shape[0], c = xhat.shape[1];
            int64_t plane = int64_t(xhat.shape[2]) * xhat.shape[3];
            int64_t m = int64_t(b) * plane;
            auto dx = Tensor<Real>::zeros(xhat.shape);
            std::vector<Real> dgamma(static_cast<size_t>(c));
            std::vector<Real> dbeta(static_cast<size_t>(c));
            const Real* pg = g.ptr();
            const Real* ph = xhat.ptr();
            for (int ch = 0; ch < c; ch++) {
                double sum_g = 0.0, sum_gx = 0.0;
                for (int s = 0; s < b; s++) {
                    int64_t off = (int64_t(s) * c + ch) * plane;
                    for (int64_t i = 0; i < plane; i++) {
                        sum_g += double(pg[off + i]);
                        sum_gx += double(pg[off + i]) * double(ph[off + i]);
                    }
                }
                dgamma[size_t(ch)] = Real(sum_gx);
                dbeta[size_t(ch)] = Real(sum_g);
                double gam = double(gamma.ptr()[ch]);
                double istd = double(invstd.ptr()[ch]);
                double mean_g = sum_g / double(m), mean_gx = sum_gx / double(m);
                Real* pdx = dx.ptr();
                for (int s = 0; s < b; s++) {
                    int64_t off = (int64_t(s) * c + ch) * plane;
                    for (int64_t i = 0; i < plane; i++) {
                        double v = gam * istd *
                                   (double(pg[off + i]) - mean_g - double(ph[off + i]) * mean_gx);
                        pdx[off + i] = Real(v);
                    }
                }
            }
            sink(0, dx);
            sink(1, Tensor<Real>::from({c}, std::move(dgamma)));
            sink(2, Tensor<Real>::from({c}, std::move(dbeta)));
            break;
        }
    }
}

template <typename Real>
std::vector<Tensor<Real>> backward_engine(const Tensor<Real>& root, bool create_graph) {
    if (!root.requires_grad())
        throw ContractError("backward: root is not attached to a live tape");
    if (!root.is_scalar())
        throw ContractError("backward: root must be scalar, got shape " + shape_str(root.shape));
    Tape<Real>& tape = *root.tape;

    // reachable set (graph may grow during the walk; only the prefix matters)
    const int frontier = root.node + 1;
    std::vector<char> reach(size_t(frontier), 0);
    std::vector<int> stack{root.node};
    reach[size_t(root.node)] = 1;
    while (!stack.empty()) {
        int id = stack.back();
        stack.pop_back();
        for (const auto& in : tape.at(id).inputs)
            if (in.node >= 0 && !reach[size_t(in.node)]) {
                reach[size_t(in.node)] = 1;
                stack.push_back(in.node);
            }
    }

    std::vector<Tensor<Real>> grads(static_cast<size_t>(frontier));
    grads[size_t(root.node)] = Tensor<Real>::ones({1});

    RecordingGuard<Real> guard(&tape, create_graph);
    for (int id = root.node; id >= 0; id--) {
        if (!reach[size_t(id)] || !grads[size_t(id)].defined()) continue;
        // copy: VJP ops may append nodes and reallocate the tape's storage
        Node<Real> node = tape.at(id);
        if (node.op == Op::kLeaf) continue;
        if (create_graph && !second_order_supported(node.op))
            throw SecondOrderError(std::string("second-order differentiation is not supported "
                                               "through operator ") +
                                   op_name(node.op));
        Tensor<Real> g = grads[size_t(id)];
        vjp<Real>(node, g, [&](int k, Tensor<Real> contrib) {
            const Tensor<Real>& input = node.inputs[size_t(k)];
            if (input.node < 0) return;
            auto& slot = grads[size_t(input.node)];
            slot = slot.defined() ? add(slot, contrib) : std::move(contrib);
        });
    }
    return grads;
}

}  // namespace detail

// Gradients of a scalar root w.r.t. every reachable node; query by tensor.
template <typename Real>
GradMap<Real> backward(const Tensor<Real>& root) {
    auto grads = detail::backward_engine(root, /*create_graph=*/false);
    return GradMap<Real>(root.tape, std::move(grads));
}

// Gradient of a scalar root w.r.t. selected tensors. With create_graph the
// results are tape nodes and can be differentiated again.
template <typename Real>
std::vector<Tensor<Real>> grad(const Tensor<Real>& root, std::span<const Tensor<Real>> wrt,
                               bool create_graph = false) {
    auto grads = detail::backward_engine(root, create_graph);
    std::vector<Tensor<Real>> out;
    out.reserve(wrt.size());
    for (const auto& t : wrt) {
        if (t.node < 0 || t.tape != root.tape)
            throw ContractError("grad: requested tensor is not on the root's tape");
        if (t.node < int(grads.size()) && grads[size_t(t.node)].defined())
            out.push_back(grads[size_t(t.node)]);
        else
            out.push_back(Tensor<Real>::zeros(t.shape));
    }
    return out;
}

template <typename Real>
Tensor<Real> grad_single(const Tensor<Real>& root, const Tensor<Real>& wrt,
                         bool create_graph = false) {
    std::array<Tensor<Real>, 1> w{wrt};
    return grad<Real>(root, w, create_graph)[0];
}

// Per-sample 2-norm of d(sum critic_output)/d(wrt), built as tape ops so the
// result is differentiable w.r.t. anything upstream (critic parameters in
// particular). critic_output must hold one scalar per batch element.
template <typename Real>
Tensor<Real> grad_norm_differentiable(const Tensor<Real>& critic_output,
                                      const Tensor<Real>& wrt) {
    if (critic_output.shape.size() != 1 && !(critic_output.shape.size() == 2 &&
                                             critic_output.shape[1] == 1))
        throw ContractError("grad_norm_differentiable: critic output must be [B] or [B,1], got " +
                            shape_str(critic_output.shape));
    // a critic output with no graph attachment cannot depend on wrt at all
    if (!critic_output.requires_grad()) return Tensor<Real>::zeros({critic_output.shape[0]});
    Tensor<Real> g = grad_single(sum_all(critic_output), wrt, /*create_graph=*/true);
    return power(sum_per_sample(power(g, 2.0)), 0.5);
}

// ---------------------------------------------------------------------------
// string-keyed dispatch & numeric gradient check
// ---------------------------------------------------------------------------

// Applies an operator selected by name. Covers every primitive the networks
// are built from; unknown names are rejected rather than guessed at.
template <typename Real>
Tensor<Real> forward_op(const std::string& kind, const std::vector<Tensor<Real>>& inputs,
                        const OpAttrs& attrs = {}) {
    auto need = [&](size_t n) {
        if (inputs.size() != n)
            throw ShapeError("forward_op(" + kind + "): expected " + std::to_string(n) +
                             " inputs, got " + std::to_string(inputs.size()));
    };
    if (kind == "add") { need(2); return add(inputs[0], inputs[1]); }
    if (kind == "subtract") { need(2); return sub(inputs[0], inputs[1]); }
    if (kind == "multiply") { need(2); return mul(inputs[0], inputs[1]); }
    if (kind == "scale") { need(1); return scale(inputs[0], attrs.s0); }
    if (kind == "add_scalar") { need(1); return add_scalar(inputs[0], attrs.s0); }
    if (kind == "power") { need(1); return power(inputs[0], attrs.s0); }
    if (kind == "sqrt") { need(1); return sqrt(inputs[0]); }
    if (kind == "abs") { need(1); return abs(inputs[0]); }
    if (kind == "relu") { need(1); return relu(inputs[0]); }
    if (kind == "sigmoid") { need(1); return sigmoid(inputs[0]); }
    if (kind == "log") { need(1); return log(inputs[0]); }
    if (kind == "clamp") { need(1); return clamp(inputs[0], attrs.s0, attrs.s1); }
    if (kind == "matmul") { need(2); return matmul(inputs[0], inputs[1]); }
    if (kind == "transpose2d") { need(1); return transpose2d(inputs[0]); }
    if (kind == "reshape") { need(1); return reshape(inputs[0], attrs.shape); }
    if (kind == "conv2d") {
        need(2);
        return conv2d(inputs[0], inputs[1], attrs.i0 ? attrs.i0 : 1, attrs.i1);
    }
    if (kind == "maxpool2d") {
        need(1);
        return maxpool2d(inputs[0], attrs.i0 ? attrs.i0 : 2, attrs.i1 ? attrs.i1 : 2);
    }
    if (kind == "nearest_upsample2x") { need(1); return nearest_upsample2x(inputs[0]); }
    if (kind == "block_sum2x") { need(1); return block_sum2x(inputs[0]); }
    if (kind == "concat_channels") { need(2); return concat_channels(inputs[0], inputs[1]); }
    if (kind == "slice_channels") { need(1); return slice_channels(inputs[0], attrs.i0, attrs.i1); }
    if (kind == "sum") { need(1); return sum_all(inputs[0]); }
    if (kind == "mean") { need(1); return mean_all(inputs[0]); }
    if (kind == "sum_per_sample") { need(1); return sum_per_sample(inputs[0]); }
    if (kind == "sum_over_bhw") { need(1); return sum_over_bhw(inputs[0]); }
    if (kind == "sum_batch") { need(1); return sum_batch(inputs[0]); }
    if (kind == "broadcast_scalar") { need(1); return broadcast_scalar(inputs[0], attrs.shape); }
    if (kind == "broadcast_per_sample") {
        need(1);
        return broadcast_per_sample(inputs[0], attrs.shape);
    }
    if (kind == "broadcast_channels") {
        need(1);
        return broadcast_channels(inputs[0], attrs.shape);
    }
    if (kind == "batchnorm_train") {
        need(3);
        return batchnorm_train(inputs[0], inputs[1], inputs[2],
                               attrs.s0 > 0.0 ? attrs.s0 : 1e-5);
    }
    throw UnsupportedOpError("forward_op: unknown operator kind '" + kind + "'");
}

struct FdCheckReport {
    std::string kind;
    double max_rel_err = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

// Compares backward gradients of sum(op(inputs)) against central differences,
// element by element. Meant for 64-bit mode on inputs bounded away from
// non-differentiable points.
template <typename Real>
FdCheckReport finite_difference_check(const std::string& kind,
                                      const std::vector<Tensor<Real>>& inputs, double step,
                                      const OpAttrs& attrs = {}, double tolerance = 1e-5) {
    if (step <= 0.0) throw ContractError("finite_difference_check: step must be positive");

    auto objective = [&](const std::vector<Tensor<Real>>& ins) {
        Tensor<Real> out = forward_op(kind, ins, attrs);
        double acc = 0.0;
        for (int64_t i = 0, n = out.numel(); i < n; i++) acc += double(out[i]);
        return acc;
    };

    // analytic side
    Tape<Real> tape;
    std::vector<Tensor<Real>> leaves;
    leaves.reserve(inputs.size());
    for (const auto& in : inputs) leaves.push_back(tape.leaf(in.detached()));
    GradMap<Real> gm = backward(sum_all(forward_op(kind, leaves, attrs)));

    FdCheckReport report;
    report.kind = kind;
    report.tolerance = tolerance;
    for (size_t k = 0; k < inputs.size(); k++) {
        Tensor<Real> g = gm.grad_of(leaves[k]);
        for (int64_t i = 0, n = inputs[k].numel(); i < n; i++) {
            std::vector<Tensor<Real>> probe;
            probe.reserve(inputs.size());
            for (const auto& in : inputs) probe.push_back(in.detached());
            Real original = probe[k][i];
            probe[k][i] = Real(double(original) + step);
            double up = objective(probe);
            probe[k][i] = Real(double(original) - step);
            double down = objective(probe);
            double fd = (up - down) / (2.0 * step);
            double ad = double(g[i]);
            double denom = std::max({std::abs(fd), std::abs(ad), 1.0});
            report.max_rel_err = std::max(report.max_rel_err, std::abs(ad - fd) / denom);
        }
    }
    report.pass = report.max_rel_err <= tolerance;
    return report;
}

}  // namespace dualsynth
