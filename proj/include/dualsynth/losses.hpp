// Training objectives: reconstruction, Wasserstein critic with gradient
// penalty, per-pixel confidence BCE, difficulty-weighted reconstruction, and
// the combined generator objective.
#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "dualsynth/common.hpp"
#include "dualsynth/nn.hpp"
#include "dualsynth/tensor.hpp"

namespace dualsynth {

// --------------------------------------------------------------------------
// Reductions and weight bundle
// --------------------------------------------------------------------------

enum class Reduction { kMean, kSum };

inline const char* reduction_name(Reduction r) {
    return r == Reduction::kMean ? "mean" : "sum";
}

inline Reduction reduction_from_name(const std::string& name) {
    if (name == "mean") return Reduction::kMean;
    if (name == "sum") return Reduction::kSum;
    throw ConfigError("unknown reduction '" + name + "' (expected mean|sum)");
}

// Scalar weights of the combined generator objective and its sub-terms.
struct LossWeights {
    double lambda_gp = 10.0;  // gradient-penalty coefficient
    double lambda1 = 0.05;    // critic adversarial weight
    double lambda2 = 0.1;     // confidence adversarial weight
    int p = 1;                // reconstruction exponent (1 or 2)
    double beta = 1.0;        // difficulty-weight exponent

    void validate() const {
        if (lambda_gp < 0.0) throw ConfigError("lambda_gp must be >= 0");
        if (lambda1 < 0.0) throw ConfigError("lambda1 must be >= 0");
        if (lambda2 < 0.0) throw ConfigError("lambda2 must be >= 0");
        if (p != 1 && p != 2) throw ConfigError("reconstruction exponent p must be 1 or 2");
        if (beta < 0.0) throw ConfigError("beta must be >= 0");
        if (!std::isfinite(lambda_gp) || !std::isfinite(lambda1) || !std::isfinite(lambda2) ||
            !std::isfinite(beta))
            throw ConfigError("loss weights must be finite");
    }
};

namespace detail {

// |Y - G_X|^p as a graph op; shared by the plain and weighted reconstructions
// so that the two reduce bit-identically when the weight map is all ones.
template <typename Real>
Tensor<Real> abs_error_pow(const Tensor<Real>& target, const Tensor<Real>& output, int p) {
    if (p != 1 && p != 2) throw ConfigError("reconstruction exponent p must be 1 or 2");
    check_same_shape(target, output, "recon");
    Tensor<Real> a = abs(sub(target, output));
    return p == 1 ? a : power(a, 2.0);
}

template <typename Real>
Tensor<Real> reduce_all(const Tensor<Real>& t, Reduction red) {
    return red == Reduction::kMean ? mean_all(t) : sum_all(t);
}

}  // namespace detail

// --------------------------------------------------------------------------
// Reconstruction
// --------------------------------------------------------------------------

// mean |target - output|^p over all elements.
template <typename Real>
Tensor<Real> recon_loss(const Tensor<Real>& target, const Tensor<Real>& output, int p = 1) {
    return mean_all(detail::abs_error_pow(target, output, p));
}

// --------------------------------------------------------------------------
// Critic (Wasserstein with gradient penalty)
// --------------------------------------------------------------------------

// A random point on the segment between a real sample and a generated one,
// drawn per batch element. x_hat is a fresh leaf so the norm of the critic's
// gradient at that point can itself be differentiated.
template <typename Real>
struct InterpolationSample {
    Tensor<Real> x_hat;           // leaf on the tape, requires grad
    std::vector<double> epsilon;  // per-sample mixing factor in [0,1]
};

// Deterministic variant: caller supplies the per-sample mixing factors.
template <typename Real>
InterpolationSample<Real> interpolate_with_eps(Tape<Real>& tape, const Tensor<Real>& real,
                                               const Tensor<Real>& fake,
                                               const std::vector<double>& epsilon) {
    detail::check_same_shape(real, fake, "interpolate");
    if (real.shape.empty()) throw ShapeError("interpolate: inputs must have a batch dimension");
    const size_t batch = static_cast<size_t>(real.shape[0]);
    if (epsilon.size() != batch)
        throw ShapeError("interpolate: need one epsilon per sample, got " +
                         std::to_string(epsilon.size()) + " for batch " + std::to_string(batch));
    const size_t per = real.numel() / batch;
    std::vector<Real> mixed(real.numel());
    for (size_t b = 0; b < batch; ++b) {
        const double e = epsilon[b];
        if (!(e >= 0.0 && e <= 1.0))
            throw ContractError("interpolate: epsilon must lie in [0,1], got " +
                                std::to_string(e));
        for (size_t i = 0; i < per; ++i) {
            const size_t k = b * per + i;
            mixed[k] = static_cast<Real>(e * static_cast<double>(real.ptr()[k]) +
                                         (1.0 - e) * static_cast<double>(fake.ptr()[k]));
        }
    }
    InterpolationSample<Real> s;
    s.x_hat = tape.leaf(Tensor<Real>::from(real.shape, mixed));
    s.epsilon = epsilon;
    return s;
}

// Random variant: epsilon ~ U[0,1) per sample.
template <typename Real>
InterpolationSample<Real> interpolate(Tape<Real>& tape, const Tensor<Real>& real,
                                      const Tensor<Real>& fake, Rng& rng) {
    if (real.shape.empty()) throw ShapeError("interpolate: inputs must have a batch dimension");
    std::vector<double> eps(static_cast<size_t>(real.shape[0]));
    for (double& e : eps) e = rng.uniform();
    return interpolate_with_eps(tape, real, fake, eps);
}

// Critic loss against an arbitrary scoring function (scores shaped [B] or
// [B,1]), with the interpolation point supplied by the caller:
//   E[critic(fake)] - E[critic(real)]
//     + lambda_gp * E[(||d critic / d x_hat||_2 - 1)^2]
template <typename Real, typename CriticFn>
Tensor<Real> critic_loss_with(CriticFn&& critic, const Tensor<Real>& real,
                              const Tensor<Real>& fake, const InterpolationSample<Real>& interp,
                              double lambda_gp) {
    if (fake.requires_grad())
        throw ContractError(
            "critic loss: generator output must be detached from the generator graph");
    detail::check_same_shape(real, fake, "critic loss");
    Tensor<Real> score_fake = critic(fake);
    Tensor<Real> score_real = critic(real);
    Tensor<Real> score_hat = critic(interp.x_hat);
    Tensor<Real> norms = grad_norm_differentiable(score_hat, interp.x_hat);
    Tensor<Real> penalty = mean_all(power(add_scalar(norms, -1.0), 2.0));
    return add(sub(mean_all(score_fake), mean_all(score_real)), scale(penalty, lambda_gp));
}

// Critic loss for the global discriminator; draws the interpolation point
// from rng.
template <typename Real>
Tensor<Real> critic_loss_d1(Tape<Real>& tape, GlobalDiscriminator<Real>& d1,
                            const Tensor<Real>& real, const Tensor<Real>& fake, double lambda_gp,
                            Rng& rng, bool train = true) {
    d1.check_bound();
    InterpolationSample<Real> interp = interpolate(tape, real, fake, rng);
    return critic_loss_with([&](const Tensor<Real>& x) { return d1_forward(d1, x, train); }, real,
                            fake, interp, lambda_gp);
}

// Generator-side critic term: -E[critic(fake)]. fake stays attached so the
// gradient reaches the generator.
template <typename Real, typename CriticFn>
Tensor<Real> gen_adv1_with(CriticFn&& critic, const Tensor<Real>& fake) {
    return scale(mean_all(critic(fake)), -1.0);
}

template <typename Real>
Tensor<Real> gen_adv1(GlobalDiscriminator<Real>& d1, const Tensor<Real>& fake,
                      bool train = false) {
    d1.check_bound();
    return gen_adv1_with([&](const Tensor<Real>& x) { return d1_forward(d1, x, train); }, fake);
}

// --------------------------------------------------------------------------
// Per-pixel confidence BCE
// --------------------------------------------------------------------------

// Probabilities are clamped to [kBceClamp, 1-kBceClamp] before the log so a
// saturated confidence map cannot produce an infinite loss.
inline constexpr double kBceClamp = 1e-7;

// Binary cross-entropy between a predicted confidence map and a {0,1} label
// map of the same shape, natural log, reduced over all elements.
template <typename Real>
Tensor<Real> bce_map(const Tensor<Real>& predicted, const Tensor<Real>& labels,
                     Reduction red = Reduction::kMean) {
    detail::check_same_shape(predicted, labels, "bce_map");
    std::vector<Real> complement(labels.numel());
    for (size_t i = 0; i < labels.numel(); ++i) {
        const Real q = labels.ptr()[i];
        if (q != Real(0) && q != Real(1))
            throw ContractError("bce_map: label entries must be exactly 0 or 1, got " +
                                std::to_string(static_cast<double>(q)));
        complement[i] = Real(1) - q;
    }
    Tensor<Real> q1 = labels.detached();
    Tensor<Real> q0 = Tensor<Real>::from(labels.shape, complement);
    Tensor<Real> prob = clamp(predicted, kBceClamp, 1.0 - kBceClamp);
    Tensor<Real> one_minus = add_scalar(scale(prob, -1.0), 1.0);
    Tensor<Real> per = add(mul(q1, log(prob)), mul(q0, log(one_minus)));
    return scale(detail::reduce_all(per, red), -1.0);
}

// Same objective against a uniform label (0 or 1 everywhere), without
// materializing the label map.
template <typename Real>
Tensor<Real> bce_map_const(const Tensor<Real>& predicted, double label,
                           Reduction red = Reduction::kMean) {
    if (label != 0.0 && label != 1.0)
        throw ContractError("bce_map_const: label must be 0 or 1, got " + std::to_string(label));
    Tensor<Real> prob = clamp(predicted, kBceClamp, 1.0 - kBceClamp);
    Tensor<Real> logp = label == 1.0 ? log(prob) : log(add_scalar(scale(prob, -1.0), 1.0));
    return scale(detail::reduce_all(logp, red), -1.0);
}

// Confidence discriminator loss: real maps pulled toward 1, generated maps
// toward 0. The discriminator is an arbitrary map from images to per-pixel
// probabilities here; the LocalDiscriminator overload is below.
template <typename Real, typename DiscFn>
Tensor<Real> d2_loss_with(DiscFn&& disc, const Tensor<Real>& real, const Tensor<Real>& fake,
                          Reduction red = Reduction::kMean) {
    if (fake.requires_grad())
        throw ContractError(
            "confidence loss: generator output must be detached from the generator graph");
    detail::check_same_shape(real, fake, "confidence loss");
    Tensor<Real> conf_real = disc(real);
    Tensor<Real> conf_fake = disc(fake);
    return add(bce_map_const(conf_real, 1.0, red), bce_map_const(conf_fake, 0.0, red));
}

template <typename Real>
Tensor<Real> d2_loss(LocalDiscriminator<Real>& d2, const Tensor<Real>& real,
                     const Tensor<Real>& fake, Reduction red = Reduction::kMean,
                     bool train = true) {
    d2.check_bound();
    return d2_loss_with([&](const Tensor<Real>& x) { return d2_forward(d2, x, train); }, real,
                        fake, red);
}

// Generator-side confidence term: push D2(fake) toward 1.
template <typename Real, typename DiscFn>
Tensor<Real> gen_adv2_with(DiscFn&& disc, const Tensor<Real>& fake,
                           Reduction red = Reduction::kMean) {
    return bce_map_const(disc(fake), 1.0, red);
}

template <typename Real>
Tensor<Real> gen_adv2(LocalDiscriminator<Real>& d2, const Tensor<Real>& fake,
                      Reduction red = Reduction::kMean, bool train = false) {
    d2.check_bound();
    return gen_adv2_with([&](const Tensor<Real>& x) { return d2_forward(d2, x, train); }, fake,
                         red);
}

// --------------------------------------------------------------------------
// Difficulty weighting
// --------------------------------------------------------------------------

// F = (1 - M)^beta elementwise. M is a per-pixel confidence map in [0,1];
// low confidence (hard region) yields weight near 1. The result is a plain
// constant: no gradient flows back into the confidence map.
template <typename Real>
Tensor<Real> attention_weights(const Tensor<Real>& confidence, double beta) {
    if (!(beta >= 0.0) || !std::isfinite(beta))
        throw ConfigError("attention_weights: beta must be finite and >= 0");
    std::vector<Real> f(confidence.numel());
    for (size_t i = 0; i < confidence.numel(); ++i) {
        const double m = static_cast<double>(confidence.ptr()[i]);
        if (!(m >= 0.0 && m <= 1.0))
            throw ContractError("attention_weights: confidence entries must lie in [0,1], got " +
                                std::to_string(m));
        f[i] = static_cast<Real>(std::pow(1.0 - m, beta));
    }
    return Tensor<Real>::from(confidence.shape, f);
}

// mean(F * |target - output|^p). With F identically 1 this reduces
// bit-for-bit to recon_loss (multiplying by 1 is exact and the summation
// order is shared).
template <typename Real>
Tensor<Real> attention_recon_loss(const Tensor<Real>& target, const Tensor<Real>& output,
                                  const Tensor<Real>& weights, int p = 1) {
    detail::check_same_shape(target, weights, "attention_recon_loss");
    Tensor<Real> term = detail::abs_error_pow(target, output, p);
    return mean_all(mul(weights.detached(), term));
}

// --------------------------------------------------------------------------
// Combined generator objective
// --------------------------------------------------------------------------

// weighted_recon + lambda1 * adv_critic + lambda2 * adv_confidence.
template <typename Real>
Tensor<Real> total_gen_loss(const Tensor<Real>& weighted_recon, const Tensor<Real>& adv_critic,
                            const Tensor<Real>& adv_confidence, const LossWeights& w) {
    w.validate();
    if (!weighted_recon.is_scalar() || !adv_critic.is_scalar() || !adv_confidence.is_scalar())
        throw ShapeError("total_gen_loss: all terms must be scalars");
    return add(weighted_recon,
               add(scale(adv_critic, w.lambda1), scale(adv_confidence, w.lambda2)));
}

}  // namespace dualsynth
