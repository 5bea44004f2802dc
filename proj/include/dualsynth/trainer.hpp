#pragma once

// Training orchestration: run configuration with a stable digest, model
// bundle construction, the per-iteration discriminator and generator updates,
// and the epoch loop with held-out validation, learning-rate decay, and
// per-epoch checkpoints.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dualsynth/checkpoint.hpp"
#include "dualsynth/common.hpp"
#include "dualsynth/data.hpp"
#include "dualsynth/losses.hpp"
#include "dualsynth/nn.hpp"
#include "dualsynth/optim.hpp"
#include "dualsynth/tensor.hpp"

namespace dualsynth {

// ---------------------------------------------------------------------------
// training modes
// ---------------------------------------------------------------------------

enum class TrainMode {
    kUnetOnly,       // reconstruction objective only
    kGlobalOnly,     // + whole-patch critic
    kLocalOnly,      // + per-pixel confidence discriminator
    kDual,           // both adversaries, unweighted reconstruction
    kDualAttention,  // both adversaries, difficulty-weighted reconstruction
};

inline const char* train_mode_name(TrainMode m) {
    switch (m) {
        case TrainMode::kUnetOnly: return "unet_only";
        case TrainMode::kGlobalOnly: return "global_only";
        case TrainMode::kLocalOnly: return "local_only";
        case TrainMode::kDual: return "dual";
        case TrainMode::kDualAttention: return "dual_attention";
    }
    return "?";
}

inline TrainMode train_mode_from_name(const std::string& s) {
    for (TrainMode m : {TrainMode::kUnetOnly, TrainMode::kGlobalOnly, TrainMode::kLocalOnly,
                        TrainMode::kDual, TrainMode::kDualAttention})
        if (s == train_mode_name(m)) return m;
    throw ConfigError("unknown training mode '" + s + "'");
}

inline bool mode_uses_global(TrainMode m) {
    return m == TrainMode::kGlobalOnly || m == TrainMode::kDual || m == TrainMode::kDualAttention;
}
inline bool mode_uses_local(TrainMode m) {
    return m == TrainMode::kLocalOnly || m == TrainMode::kDual || m == TrainMode::kDualAttention;
}
inline bool mode_uses_attention(TrainMode m) { return m == TrainMode::kDualAttention; }

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
    TrainMode mode = TrainMode::kDual;
    LossWeights weights{};

    double lr_g = 5e-3;
    double lr_d1 = 1e-4;
    double lr_d2 = 1e-3;
    double lr_decay_g = 0.5;
    double lr_decay_d = 0.2;
    int lr_decay_period = 2;

    int batch_size = 10;
    int epochs = 1;
    std::uint64_t seed = 1;

    // architecture
    int patch_hw = 64;
    int gen_depth = 3;
    int gen_base_channels = 8;
    NormKind gen_norm = NormKind::kBatch;
    std::array<int, 3> d1_channels{16, 32, 64};
    int d1_conv4_channels = 128;
    std::array<int, 2> d1_fc_units{256, 64};
    std::array<int, 3> d2_down_channels{16, 32, 64};
    std::array<int, 3> d2_up_channels{32, 16, 8};
    bool spectral_norm = true;
    int sn_power_iterations = 1;

    void validate() const {
        weights.validate();
        auto positive = [](double v, const char* name) {
            if (!(v > 0.0) || !std::isfinite(v))
                throw ConfigError(std::string("TrainConfig: ") + name +
                                  " must be positive and finite");
        };
        positive(lr_g, "lr_g");
        positive(lr_d1, "lr_d1");
        positive(lr_d2, "lr_d2");
        if (!(lr_decay_g > 0.0 && lr_decay_g <= 1.0) || !(lr_decay_d > 0.0 && lr_decay_d <= 1.0))
            throw ConfigError("TrainConfig: decay factors must lie in (0, 1]");
        if (lr_decay_period < 1) throw ConfigError("TrainConfig: lr_decay_period must be >= 1");
        if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
        if (epochs < 0) throw ConfigError("TrainConfig: epochs must be >= 0");
        if (gen_depth < 1) throw ConfigError("TrainConfig: gen_depth must be >= 1");
        if (gen_base_channels < 1)
            throw ConfigError("TrainConfig: gen_base_channels must be >= 1");
        if (patch_hw < 8 || patch_hw % 8 != 0)
            throw ConfigError("TrainConfig: patch_hw must be a positive multiple of 8");
        if (patch_hw % (1 << gen_depth) != 0)
            throw ConfigError("TrainConfig: patch_hw must be divisible by 2^gen_depth");
        auto channels_ok = [](const auto& arr) {
            return std::all_of(arr.begin(), arr.end(), [](int c) { return c >= 1; });
        };
        if (!channels_ok(d1_channels) || d1_conv4_channels < 1 || !channels_ok(d1_fc_units) ||
            !channels_ok(d2_down_channels) || !channels_ok(d2_up_channels))
            throw ConfigError("TrainConfig: channel and unit counts must be >= 1");
        if (sn_power_iterations < 1)
            throw ConfigError("TrainConfig: sn_power_iterations must be >= 1");
    }
};

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
    nlohmann::json j;
    j["mode"] = train_mode_name(c.mode);
    j["lambda_gp"] = c.weights.lambda_gp;
    j["lambda1"] = c.weights.lambda1;
    j["lambda2"] = c.weights.lambda2;
    j["recon_power"] = c.weights.p;
    j["attention_beta"] = c.weights.beta;
    j["lr_g"] = c.lr_g;
    j["lr_d1"] = c.lr_d1;
    j["lr_d2"] = c.lr_d2;
    j["lr_decay_g"] = c.lr_decay_g;
    j["lr_decay_d"] = c.lr_decay_d;
    j["lr_decay_period"] = c.lr_decay_period;
    j["batch_size"] = c.batch_size;
    j["epochs"] = c.epochs;
    j["seed"] = c.seed;
    j["patch_hw"] = c.patch_hw;
    j["gen_depth"] = c.gen_depth;
    j["gen_base_channels"] = c.gen_base_channels;
    j["gen_norm"] = norm_kind_name(c.gen_norm);
    j["d1_channels"] = c.d1_channels;
    j["d1_conv4_channels"] = c.d1_conv4_channels;
    j["d1_fc_units"] = c.d1_fc_units;
    j["d2_down_channels"] = c.d2_down_channels;
    j["d2_up_channels"] = c.d2_up_channels;
    j["spectral_norm"] = c.spectral_norm;
    j["sn_power_iterations"] = c.sn_power_iterations;
    return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("training configuration must be a JSON object");
    static const std::vector<std::string> known = {
        "mode",          "lambda_gp",       "lambda1",
        "lambda2",       "recon_power",     "attention_beta",
        "lr_g",          "lr_d1",           "lr_d2",
        "lr_decay_g",    "lr_decay_d",      "lr_decay_period",
        "batch_size",    "epochs",          "seed",
        "patch_hw",      "gen_depth",       "gen_base_channels",
        "gen_norm",      "d1_channels",     "d1_conv4_channels",
        "d1_fc_units",   "d2_down_channels", "d2_up_channels",
        "spectral_norm", "sn_power_iterations"};
    for (const auto& item : j.items())
        if (std::find(known.begin(), known.end(), item.key()) == known.end())
            throw ConfigError("unknown configuration key '" + item.key() + "'");

    TrainConfig c;
    try {
        if (j.contains("mode")) c.mode = train_mode_from_name(j.at("mode").get<std::string>());
        if (j.contains("lambda_gp")) c.weights.lambda_gp = j.at("lambda_gp").get<double>();
        if (j.contains("lambda1")) c.weights.lambda1 = j.at("lambda1").get<double>();
        if (j.contains("lambda2")) c.weights.lambda2 = j.at("lambda2").get<double>();
        if (j.contains("recon_power")) c.weights.p = j.at("recon_power").get<int>();
        if (j.contains("attention_beta")) c.weights.beta = j.at("attention_beta").get<double>();
        if (j.contains("lr_g")) c.lr_g = j.at("lr_g").get<double>();
        if (j.contains("lr_d1")) c.lr_d1 = j.at("lr_d1").get<double>();
        if (j.contains("lr_d2")) c.lr_d2 = j.at("lr_d2").get<double>();
        if (j.contains("lr_decay_g")) c.lr_decay_g = j.at("lr_decay_g").get<double>();
        if (j.contains("lr_decay_d")) c.lr_decay_d = j.at("lr_decay_d").get<double>();
        if (j.contains("lr_decay_period"))
            c.lr_decay_period = j.at("lr_decay_period").get<int>();
        if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
        if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
        if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("patch_hw")) c.patch_hw = j.at("patch_hw").get<int>();
        if (j.contains("gen_depth")) c.gen_depth = j.at("gen_depth").get<int>();
        if (j.contains("gen_base_channels"))
            c.gen_base_channels = j.at("gen_base_channels").get<int>();
        if (j.contains("gen_norm"))
            c.gen_norm = norm_kind_from_name(j.at("gen_norm").get<std::string>());
        if (j.contains("d1_channels"))
            c.d1_channels = j.at("d1_channels").get<std::array<int, 3>>();
        if (j.contains("d1_conv4_channels"))
            c.d1_conv4_channels = j.at("d1_conv4_channels").get<int>();
        if (j.contains("d1_fc_units"))
            c.d1_fc_units = j.at("d1_fc_units").get<std::array<int, 2>>();
        if (j.contains("d2_down_channels"))
            c.d2_down_channels = j.at("d2_down_channels").get<std::array<int, 3>>();
        if (j.contains("d2_up_channels"))
            c.d2_up_channels = j.at("d2_up_channels").get<std::array<int, 3>>();
        if (j.contains("spectral_norm")) c.spectral_norm = j.at("spectral_norm").get<bool>();
        if (j.contains("sn_power_iterations"))
            c.sn_power_iterations = j.at("sn_power_iterations").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed training configuration: ") + e.what());
    }
    c.validate();
    return c;
}

// Stable fingerprint of the full configuration. nlohmann::json keeps object
// keys sorted and serializes doubles shortest-round-trip, so the dump (and
// therefore the digest) is deterministic across runs and platforms.
inline std::uint64_t config_digest(const TrainConfig& c) {
    return fnv1a64(train_config_to_json(c).dump());
}

// ---------------------------------------------------------------------------
// model bundle
// ---------------------------------------------------------------------------

template <typename Real>
struct Models {
    GeneratorNet<Real> gen;
    GlobalDiscriminator<Real> d1;
    LocalDiscriminator<Real> d2;
};

template <typename Real>
Models<Real> build_models(const TrainConfig& cfg) {
    cfg.validate();
    Models<Real> m;
    m.gen = build_generator<Real>(cfg.gen_depth, cfg.gen_base_channels, cfg.gen_norm,
                                  mix_seed(cfg.seed, "generator"));
    D1Config c1;
    c1.in_h = c1.in_w = cfg.patch_hw;
    c1.stage_channels = cfg.d1_channels;
    c1.conv4_channels = cfg.d1_conv4_channels;
    c1.fc_units = cfg.d1_fc_units;
    c1.spectral_norm = cfg.spectral_norm;
    c1.sn_power_iterations = cfg.sn_power_iterations;
    m.d1 = build_d1<Real>(c1, mix_seed(cfg.seed, "global_discriminator"));
    D2Config c2;
    c2.down_channels = cfg.d2_down_channels;
    c2.up_channels = cfg.d2_up_channels;
    c2.spectral_norm = cfg.spectral_norm;
    c2.sn_power_iterations = cfg.sn_power_iterations;
    m.d2 = build_d2<Real>(c2, mix_seed(cfg.seed, "local_discriminator"));
    return m;
}

template <typename Real>
struct Optimizers {
    AdamState<Real> gen, d1, d2;
};

template <typename Real>
Optimizers<Real> make_optimizers(const Models<Real>& m) {
    return Optimizers<Real>{make_adam_state(m.gen.params), make_adam_state(m.d1.params),
                            make_adam_state(m.d2.params)};
}

// Full model snapshot (trainable parameters plus running statistics), tagged
// with the configuration digest so a snapshot cannot silently be loaded into
// a differently-shaped run.
template <typename Real>
Checkpoint make_training_checkpoint(const Models<Real>& m, const TrainConfig& cfg, int epoch) {
    Checkpoint c;
    c.config_digest = config_digest(cfg);
    c.seed = cfg.seed;
    c.epoch = epoch;
    checkpoint_add_params(c, "gen.params", m.gen.params);
    checkpoint_add_params(c, "gen.state", m.gen.state);
    checkpoint_add_params(c, "d1.params", m.d1.params);
    checkpoint_add_params(c, "d1.state", m.d1.state);
    checkpoint_add_params(c, "d2.params", m.d2.params);
    checkpoint_add_params(c, "d2.state", m.d2.state);
    return c;
}

template <typename Real>
void restore_training_checkpoint(const Checkpoint& c, Models<Real>& m) {
    checkpoint_restore_params(c, "gen.params", m.gen.params);
    checkpoint_restore_params(c, "gen.state", m.gen.state);
    checkpoint_restore_params(c, "d1.params", m.d1.params);
    checkpoint_restore_params(c, "d1.state", m.d1.state);
    checkpoint_restore_params(c, "d2.params", m.d2.params);
    checkpoint_restore_params(c, "d2.state", m.d2.state);
}

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

namespace detail {

template <typename Real>
struct Batch {
    Tensor<Real> source;  // [B, 5, hw, hw]
    Tensor<Real> target;  // [B, 1, hw, hw]
};

template <typename Real>
Batch<Real> gather_batch(const std::vector<PatchPair<Real>>& pairs, const std::vector<int>& order,
                         size_t begin, int count) {
    const auto& first = pairs[size_t(order[begin])];
    const int hw = first.source.shape[1];
    Batch<Real> b{Tensor<Real>::zeros({count, first.source.shape[0], hw, hw}),
                  Tensor<Real>::zeros({count, 1, hw, hw})};
    const int64_t src_n = first.source.numel();
    const int64_t tgt_n = first.target.numel();
    for (int i = 0; i < count; i++) {
        const auto& p = pairs[size_t(order[begin + size_t(i)])];
        std::copy_n(p.source.ptr(), src_n, b.source.ptr() + int64_t(i) * src_n);
        std::copy_n(p.target.ptr(), tgt_n, b.target.ptr() + int64_t(i) * tgt_n);
    }
    return b;
}

// Scalar loss -> backward -> one Adam update. The loss value is checked
// before differentiating so a diverged run aborts without touching state.
template <typename Real>
double apply_update(ParamSet<Real>& params, AdamState<Real>& state, const Tensor<Real>& loss,
                    double lr, const char* who) {
    const double value = double((*loss.data)[0]);
    if (!std::isfinite(value))
        throw NonFiniteError(std::string(who) + ": training loss is not finite");
    auto gm = backward(loss);
    std::vector<Tensor<Real>> grads;
    grads.reserve(params.bound.size());
    for (const auto& leaf : params.bound) grads.push_back(gm.grad_of(leaf));
    adam_step(params, grads, state, lr);
    return value;
}

}  // namespace detail

// Synthesis used as the adversaries' "fake" input. The frozen binding makes
// the output a plain constant (nothing can propagate back into the
// generator), while train=true keeps the batch-statistic semantics identical
// to what the generator's own update sees.
template <typename Real>
Tensor<Real> synthesize_detached(Models<Real>& m, const Tensor<Real>& source) {
    m.gen.bind_frozen();
    return generator_forward(m.gen, source, true);
}

// ---------------------------------------------------------------------------
// per-iteration updates
// ---------------------------------------------------------------------------

struct DiscStepStats {
    std::optional<double> global_loss;  // critic objective incl. gradient penalty
    std::optional<double> local_loss;   // confidence-map cross entropy
};

// One update of the active adversaries. Both see the same synthesized batch
// but are differentiated and stepped independently.
template <typename Real>
DiscStepStats train_step_discriminators(Models<Real>& m, Optimizers<Real>& opt,
                                        const TrainConfig& cfg, const Tensor<Real>& source,
                                        const Tensor<Real>& target, double lr_d1, double lr_d2,
                                        Rng& rng) {
    DiscStepStats out;
    if (!mode_uses_global(cfg.mode) && !mode_uses_local(cfg.mode)) return out;

    const Tensor<Real> fake = synthesize_detached(m, source);

    if (mode_uses_global(cfg.mode)) {
        Tape<Real> tape;
        m.d1.bind(tape);
        auto loss = critic_loss_d1(tape, m.d1, target, fake, cfg.weights.lambda_gp, rng, true);
        out.global_loss =
            detail::apply_update(m.d1.params, opt.d1, loss, lr_d1, "global discriminator");
    }
    if (mode_uses_local(cfg.mode)) {
        Tape<Real> tape;
        m.d2.bind(tape);
        auto loss = d2_loss(m.d2, target, fake, Reduction::kMean, true);
        out.local_loss =
            detail::apply_update(m.d2.params, opt.d2, loss, lr_d2, "local discriminator");
    }
    return out;
}

struct GenStepStats {
    double total = 0.0;
    double recon = 0.0;  // difficulty-weighted when attention is active
    std::optional<double> adv_global;
    std::optional<double> adv_local;
};

// One generator update on a fresh batch. Adversaries participate frozen; in
// attention mode the confidence map is computed on the detached synthesis, so
// the difficulty weights are constants and no gradient reaches the local
// discriminator through them.
template <typename Real>
GenStepStats train_step_generator(Models<Real>& m, Optimizers<Real>& opt, const TrainConfig& cfg,
                                  const Tensor<Real>& source, const Tensor<Real>& target,
                                  double lr_g) {
    Tape<Real> tape;
    m.gen.bind(tape);
    m.d1.bind_frozen();
    m.d2.bind_frozen();

    Tensor<Real> gx = generator_forward(m.gen, source, true);

    GenStepStats out;
    Tensor<Real> recon;
    if (mode_uses_attention(cfg.mode)) {
        Tensor<Real> confidence = d2_forward(m.d2, gx.detached(), false);
        Tensor<Real> weights = attention_weights(confidence, cfg.weights.beta);
        recon = attention_recon_loss(target, gx, weights, cfg.weights.p);
    } else {
        recon = recon_loss(target, gx, cfg.weights.p);
    }

    Tensor<Real> adv1 = Tensor<Real>::scalar(Real(0));
    if (mode_uses_global(cfg.mode)) {
        adv1 = gen_adv1(m.d1, gx, false);
        out.adv_global = double((*adv1.data)[0]);
    }
    Tensor<Real> adv2 = Tensor<Real>::scalar(Real(0));
    if (mode_uses_local(cfg.mode)) {
        adv2 = gen_adv2(m.d2, gx, Reduction::kMean, false);
        out.adv_local = double((*adv2.data)[0]);
    }

    Tensor<Real> total = total_gen_loss(recon, adv1, adv2, cfg.weights);
    out.recon = double((*recon.data)[0]);
    out.total = detail::apply_update(m.gen.params, opt.gen, total, lr_g, "generator");
    return out;
}

// ---------------------------------------------------------------------------
// epoch loop
// ---------------------------------------------------------------------------

struct EpochRecord {
    int epoch = 0;  // 0 = initial state, before any update
    int iterations = 0;
    double lr_g = 0.0, lr_d1 = 0.0, lr_d2 = 0.0;
    std::optional<double> d1_loss, d2_loss;                   // iteration means
    std::optional<double> g_total, g_recon, g_adv1, g_adv2;   // iteration means
    std::optional<double> val_mae, val_psnr;
};

inline nlohmann::json epoch_record_to_json(const EpochRecord& r) {
    nlohmann::json j;
    j["epoch"] = r.epoch;
    j["iterations"] = r.iterations;
    j["lr_g"] = r.lr_g;
    j["lr_d1"] = r.lr_d1;
    j["lr_d2"] = r.lr_d2;
    auto put = [&](const char* key, const std::optional<double>& v) {
        if (!v.has_value())
            j[key] = nullptr;
        else if (std::isfinite(*v))
            j[key] = *v;
        else
            j[key] = *v > 0 ? "inf" : "-inf";
    };
    put("d1_loss", r.d1_loss);
    put("d2_loss", r.d2_loss);
    put("g_total", r.g_total);
    put("g_recon", r.g_recon);
    put("g_adv1", r.g_adv1);
    put("g_adv2", r.g_adv2);
    put("val_mae", r.val_mae);
    put("val_psnr", r.val_psnr);
    return j;
}

// One line per epoch; keys are sorted and doubles round-trip, so two
// identical runs produce byte-identical logs.
inline std::string epoch_record_to_jsonl(const EpochRecord& r) {
    return epoch_record_to_json(r).dump();
}

template <typename Real>
struct TrainResult {
    std::vector<EpochRecord> log;
    Checkpoint checkpoint;  // state after the last completed epoch
    int checkpoint_epoch = 0;
    bool aborted = false;
    std::string abort_reason;
};

namespace detail {

// Held-out MAE and PSNR of the eval-mode generator. `peak` is fixed by the
// caller (data range of the held-out targets at split time) so the PSNR
// scale is comparable across epochs.
template <typename Real>
std::pair<double, double> validate_generator(Models<Real>& m,
                                             const std::vector<PatchPair<Real>>& pairs,
                                             const std::vector<int>& val_idx, int batch_size,
                                             double peak) {
    m.gen.bind_frozen();
    double abs_sum = 0.0, sq_sum = 0.0;
    int64_t n = 0;
    for (size_t at = 0; at < val_idx.size(); at += size_t(batch_size)) {
        const int count = int(std::min(size_t(batch_size), val_idx.size() - at));
        auto b = gather_batch(pairs, val_idx, at, count);
        Tensor<Real> pred = generator_forward(m.gen, b.source, false);
        const Real* p = pred.ptr();
        const Real* t = b.target.ptr();
        const int64_t total = pred.numel();
        for (int64_t i = 0; i < total; i++) {
            const double d = double(p[i]) - double(t[i]);
            abs_sum += std::abs(d);
            sq_sum += d * d;
        }
        n += total;
    }
    const double mae = abs_sum / double(n);
    const double mse = sq_sum / double(n);
    const double psnr = mse == 0.0 ? std::numeric_limits<double>::infinity()
                                   : 10.0 * std::log10(peak * peak / mse);
    return {mae, psnr};
}

struct MeanAcc {
    double sum = 0.0;
    int64_t n = 0;
    void add(double v) {
        sum += v;
        n++;
    }
    std::optional<double> mean() const {
        if (n == 0) return std::nullopt;
        return sum / double(n);
    }
};

}  // namespace detail

// Runs the full schedule on `m` (freshly built or restored). Every epoch —
// including the initial state as epoch 0 — produces a record and a model
// snapshot; `on_epoch`, when given, observes both. A non-finite loss or
// gradient aborts the run, and the snapshot of the last completed epoch is
// retained in the result.
template <typename Real>
TrainResult<Real> run_training(
    const TrainConfig& cfg, Models<Real>& m, const std::vector<PatchPair<Real>>& pairs,
    const std::function<void(const EpochRecord&, const Checkpoint&)>& on_epoch = {}) {
    cfg.validate();
    if (pairs.empty()) throw ConfigError("run_training: no training patches supplied");
    const std::vector<int> want{5, cfg.patch_hw, cfg.patch_hw};
    if (pairs[0].source.shape != want)
        throw ShapeError("run_training: patches are " + shape_str(pairs[0].source.shape) +
                         " but the configuration expects " + shape_str(want));

    // Deterministic held-out split: shuffle once, hold out the first tenth.
    std::vector<int> order(pairs.size());
    std::iota(order.begin(), order.end(), 0);
    Rng split_rng(mix_seed(cfg.seed, "validation-split"));
    split_rng.shuffle(order);
    const size_t val_count =
        pairs.size() >= 10 ? pairs.size() / 10 : (pairs.size() >= 2 ? 1 : 0);
    const std::vector<int> val_idx(order.begin(), order.begin() + ptrdiff_t(val_count));
    const std::vector<int> train_idx(order.begin() + ptrdiff_t(val_count), order.end());

    // Two batches per iteration: one consumed by the adversaries' update, one
    // by the generator's. Keeping the consumption pattern identical across
    // modes means runs that differ only in mode see identical data streams.
    const size_t per_iter = 2 * size_t(cfg.batch_size);
    const int iters = int(train_idx.size() / per_iter);
    if (cfg.epochs > 0 && iters == 0)
        throw ConfigError("run_training: need at least " + std::to_string(per_iter) +
                          " training patches per epoch, have " +
                          std::to_string(train_idx.size()));

    // PSNR peak fixed at split time from the held-out targets.
    double peak = 1.0;
    if (!val_idx.empty()) {
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (int idx : val_idx) {
            const auto& t = pairs[size_t(idx)].target;
            const Real* p = t.ptr();
            for (int64_t i = 0; i < t.numel(); i++) {
                lo = std::min(lo, double(p[i]));
                hi = std::max(hi, double(p[i]));
            }
        }
        if (hi > lo) peak = hi - lo;
    }

    auto opt = make_optimizers(m);
    TrainResult<Real> res;

    auto emit = [&](EpochRecord rec) {
        if (!val_idx.empty()) {
            auto [mae, psnr] =
                detail::validate_generator(m, pairs, val_idx, cfg.batch_size, peak);
            rec.val_mae = mae;
            rec.val_psnr = psnr;
        }
        Checkpoint snap = make_training_checkpoint(m, cfg, rec.epoch);
        res.checkpoint = snap;
        res.checkpoint_epoch = rec.epoch;
        res.log.push_back(rec);
        if (on_epoch) on_epoch(res.log.back(), snap);
    };

    EpochRecord init;
    init.epoch = 0;
    init.lr_g = scheduled_lr(cfg.lr_g, 0, cfg.lr_decay_g, cfg.lr_decay_period);
    init.lr_d1 = scheduled_lr(cfg.lr_d1, 0, cfg.lr_decay_d, cfg.lr_decay_period);
    init.lr_d2 = scheduled_lr(cfg.lr_d2, 0, cfg.lr_decay_d, cfg.lr_decay_period);
    emit(init);

    for (int e = 0; e < cfg.epochs; e++) {
        const double lr_g = scheduled_lr(cfg.lr_g, e, cfg.lr_decay_g, cfg.lr_decay_period);
        const double lr_d1 = scheduled_lr(cfg.lr_d1, e, cfg.lr_decay_d, cfg.lr_decay_period);
        const double lr_d2 = scheduled_lr(cfg.lr_d2, e, cfg.lr_decay_d, cfg.lr_decay_period);

        Rng erng(mix_seed(cfg.seed, "epoch-" + std::to_string(e)));
        std::vector<int> sched = train_idx;
        erng.shuffle(sched);

        detail::MeanAcc acc_d1, acc_d2, acc_total, acc_recon, acc_adv1, acc_adv2;
        try {
            for (int it = 0; it < iters; it++) {
                const size_t at = size_t(it) * per_iter;
                auto disc_batch = detail::gather_batch(pairs, sched, at, cfg.batch_size);
                auto ds = train_step_discriminators(m, opt, cfg, disc_batch.source,
                                                    disc_batch.target, lr_d1, lr_d2, erng);
                auto gen_batch =
                    detail::gather_batch(pairs, sched, at + size_t(cfg.batch_size),
                                         cfg.batch_size);
                auto gs = train_step_generator(m, opt, cfg, gen_batch.source, gen_batch.target,
                                               lr_g);
                if (ds.global_loss) acc_d1.add(*ds.global_loss);
                if (ds.local_loss) acc_d2.add(*ds.local_loss);
                acc_total.add(gs.total);
                acc_recon.add(gs.recon);
                if (gs.adv_global) acc_adv1.add(*gs.adv_global);
                if (gs.adv_local) acc_adv2.add(*gs.adv_local);
            }
        } catch (const NonFiniteError& err) {
            res.aborted = true;
            res.abort_reason = err.what();
            break;  // res.checkpoint still holds the last completed epoch
        }

        EpochRecord rec;
        rec.epoch = e + 1;
        rec.iterations = iters;
        rec.lr_g = lr_g;
        rec.lr_d1 = lr_d1;
        rec.lr_d2 = lr_d2;
        rec.d1_loss = acc_d1.mean();
        rec.d2_loss = acc_d2.mean();
        rec.g_total = acc_total.mean();
        rec.g_recon = acc_recon.mean();
        rec.g_adv1 = acc_adv1.mean();
        rec.g_adv2 = acc_adv2.mean();
        emit(rec);
    }
    return res;
}

}  // namespace dualsynth
