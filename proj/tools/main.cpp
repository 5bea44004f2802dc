// dualsynth — command-line front end for the synthesis library.
//
// Subcommands:
//   gen-data            write synthetic paired volumes (source/target/mask)
//   train               fit a generator on paired volumes
//   synth               run a trained generator over a whole volume
//   eval                MAE/PSNR report between two volumes
//   inspect-confidence  export the local discriminator's confidence map
//   gradcheck           finite-difference audit of every differentiable op
//
// Exit codes: 0 success, 1 check failed, 2 usage, 3 configuration,
// 4 file format / I/O, 5 shape or contract violation, 6 training aborted,
// 7 data generation failed, 10 internal error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dualsynth/checkpoint.hpp"
#include "dualsynth/data.hpp"
#include "dualsynth/metrics.hpp"
#include "dualsynth/trainer.hpp"

namespace fs = std::filesystem;
using namespace dualsynth;

namespace {

// ---------------------------------------------------------------------------
// shared helpers
// ---------------------------------------------------------------------------

struct PrecisionOpt {
    std::string value = "float";
};

void add_precision_flag(CLI::App* cmd, PrecisionOpt& p) {
    cmd->add_option("--precision", p.value, "numeric precision (float|double)")
        ->check(CLI::IsMember({"float", "double"}))
        ->capture_default_str();
}

std::string zero_padded(int v, int width) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%0*d", width, v);
    return buf;
}

// Volume pairs are addressed by base path: <base>.raw plus <base>.json.
// A dataset directory holds volume_NNN_source / _target / _mask triples.
std::vector<std::string> dataset_stems(const std::string& dir) {
    if (!fs::is_directory(dir))
        throw FormatError("dataset directory '" + dir + "' does not exist");
    std::vector<std::string> stems;
    const std::string suffix = "_source.json";
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        std::string name = entry.path().filename().string();
        if (name.size() <= suffix.size() ||
            name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0)
            continue;
        stems.push_back((fs::path(dir) / name.substr(0, name.size() - suffix.size())).string());
    }
    std::sort(stems.begin(), stems.end());
    if (stems.empty())
        throw FormatError("dataset directory '" + dir + "' holds no *_source volumes");
    return stems;
}

// The train command drops config.json next to the checkpoint; synth and
// inspect-confidence find it there unless pointed elsewhere.
TrainConfig load_run_config(const std::string& checkpoint_path, const std::string& config_path) {
    fs::path cfg = config_path.empty()
                       ? fs::path(checkpoint_path).parent_path() / "config.json"
                       : fs::path(config_path);
    std::ifstream in(cfg);
    if (!in) throw FormatError("cannot open run configuration '" + cfg.string() + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("malformed run configuration '" + cfg.string() + "': " + e.what());
    }
    return train_config_from_json(j);
}

template <typename Real>
Models<Real> load_models_from_checkpoint(const TrainConfig& cfg, const std::string& path) {
    Checkpoint ckpt = load_checkpoint(path, config_digest(cfg));
    auto models = build_models<Real>(cfg);
    restore_training_checkpoint(ckpt, models);
    return models;
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct GenDataArgs {
    std::string out;
    int volumes = 4;
    std::uint64_t seed = 1;
    int depth = 16, height = 64, width = 64;
    int blobs = 12;
    int lesions = 3;
    double noise = 0.05;
};

int cmd_gen_data(const GenDataArgs& a) {
    fs::create_directories(a.out);
    for (int v = 0; v < a.volumes; v++) {
        PhantomSpec spec;
        spec.depth = a.depth;
        spec.height = a.height;
        spec.width = a.width;
        spec.blob_count = a.blobs;
        spec.lesion_count = a.lesions;
        spec.noise_level = a.noise;
        spec.seed = mix_seed(a.seed, "volume-" + std::to_string(v));
        PhantomVolumes ph = generate_phantom(spec);
        std::string stem = (fs::path(a.out) / ("volume_" + zero_padded(v, 3))).string();
        save_volume(ph.source, stem + "_source");
        save_volume(ph.target, stem + "_target");
        save_volume(ph.lesion_mask, stem + "_mask");
        std::int64_t lesion_voxels = 0;
        for (float f : ph.lesion_mask.voxels)
            if (f == 1.0f) lesion_voxels++;
        std::cout << "wrote " << stem << "_{source,target,mask} (" << a.depth << "x" << a.height
                  << "x" << a.width << ", " << lesion_voxels << " lesion voxels)\n";
    }
    return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string data;
    std::string out;
    std::string config_file;
    std::string mode;
    int epochs = -1;
    int batch_size = -1;
    int patch_size = -1;
    std::int64_t seed = -1;
    int pairs_per_volume = 100;
    PrecisionOpt precision;
};

template <typename Real>
int run_train(const TrainConfig& cfg, const TrainArgs& a) {
    std::vector<PatchPair<Real>> pairs;
    for (const std::string& stem : dataset_stems(a.data)) {
        Volume source = load_volume(stem + "_source");
        Volume target = load_volume(stem + "_target");
        Rng rng(mix_seed(cfg.seed, "patches-" + fs::path(stem).filename().string()));
        auto got = extract_patches<Real>(source, target, a.pairs_per_volume, cfg.patch_hw, rng);
        pairs.insert(pairs.end(), got.begin(), got.end());
    }
    std::cout << "training on " << pairs.size() << " patch pairs (" << cfg.patch_hw << "x"
              << cfg.patch_hw << ", mode " << train_mode_name(cfg.mode) << ", "
              << cfg.epochs << " epochs)\n";

    fs::create_directories(a.out);
    {
        std::ofstream cf(fs::path(a.out) / "config.json");
        cf << train_config_to_json(cfg).dump(2) << "\n";
        if (!cf) throw FormatError("cannot write '" + a.out + "/config.json'");
    }
    std::ofstream log(fs::path(a.out) / "log.jsonl");
    if (!log) throw FormatError("cannot write '" + a.out + "/log.jsonl'");
    const std::string ckpt_path = (fs::path(a.out) / "checkpoint_final.bin").string();

    auto models = build_models<Real>(cfg);
    auto res = run_training<Real>(
        cfg, models, pairs, [&](const EpochRecord& rec, const Checkpoint& snap) {
            log << epoch_record_to_jsonl(rec) << "\n";
            log.flush();
            save_checkpoint(snap, ckpt_path);
            std::cout << "epoch " << rec.epoch;
            if (rec.g_total) std::cout << "  g_total " << *rec.g_total;
            if (rec.d1_loss) std::cout << "  d1 " << *rec.d1_loss;
            if (rec.d2_loss) std::cout << "  d2 " << *rec.d2_loss;
            if (rec.val_mae) std::cout << "  val_mae " << *rec.val_mae;
            if (rec.val_psnr) std::cout << "  val_psnr " << *rec.val_psnr << " dB";
            std::cout << "\n";
        });

    if (res.aborted) {
        std::cerr << "training aborted: " << res.abort_reason << "\n"
                  << "last good snapshot (epoch " << res.checkpoint_epoch << ") kept at "
                  << ckpt_path << "\n";
        return 6;
    }
    std::cout << "done; snapshot of epoch " << res.checkpoint_epoch << " at " << ckpt_path
              << "\n";
    return 0;
}

int cmd_train(const TrainArgs& a) {
    TrainConfig cfg;
    if (!a.config_file.empty()) {
        std::ifstream in(a.config_file);
        if (!in) throw FormatError("cannot open configuration '" + a.config_file + "'");
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("malformed configuration '" + a.config_file + "': " + e.what());
        }
        cfg = train_config_from_json(j);
    }
    if (!a.mode.empty()) cfg.mode = train_mode_from_name(a.mode);
    if (a.epochs >= 0) cfg.epochs = a.epochs;
    if (a.batch_size > 0) cfg.batch_size = a.batch_size;
    if (a.patch_size > 0) cfg.patch_hw = a.patch_size;
    if (a.seed >= 0) cfg.seed = std::uint64_t(a.seed);
    cfg.validate();
    if (a.pairs_per_volume < 1) throw ConfigError("--pairs-per-volume must be >= 1");

    return a.precision.value == "double" ? run_train<double>(cfg, a) : run_train<float>(cfg, a);
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

struct SynthArgs {
    std::string checkpoint;
    std::string input;
    std::string out;
    std::string config_file;
    int stride = 0;  // 0 = half the patch size
    PrecisionOpt precision;
};

template <typename Real>
int run_synth(const TrainConfig& cfg, const SynthArgs& a) {
    auto models = load_models_from_checkpoint<Real>(cfg, a.checkpoint);
    Volume source = load_volume(a.input);
    const int stride = a.stride > 0 ? a.stride : std::max(1, cfg.patch_hw / 2);
    Volume pred = synthesize_volume(models.gen, source, cfg.patch_hw, stride);
    save_volume(pred, a.out);
    std::cout << "synthesized " << pred.depth << "x" << pred.height << "x" << pred.width
              << " volume -> " << a.out << " (patch " << cfg.patch_hw << ", stride " << stride
              << ")\n";
    return 0;
}

int cmd_synth(const SynthArgs& a) {
    TrainConfig cfg = load_run_config(a.checkpoint, a.config_file);
    return a.precision.value == "double" ? run_synth<double>(cfg, a) : run_synth<float>(cfg, a);
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string prediction;
    std::string reference;
    std::string mask;
    std::string peak_convention = "data-range";
    double fixed_peak = 1.0;
    bool as_json = false;
};

int cmd_eval(const EvalArgs& a) {
    Volume reference = load_volume(a.reference);
    Volume prediction = load_volume(a.prediction);
    std::optional<Volume> mask;
    if (!a.mask.empty()) mask = load_volume(a.mask);
    const PeakConvention conv = a.peak_convention == "fixed" ? PeakConvention::kFixed
                                                             : PeakConvention::kDataRange;
    MetricsReport r = compute_metrics(reference, prediction, mask ? &*mask : nullptr, conv,
                                      a.fixed_peak);
    if (a.as_json)
        std::cout << metrics_to_json(r).dump(2) << "\n";
    else
        std::cout << metrics_to_text(r);
    return 0;
}

// ---------------------------------------------------------------------------
// inspect-confidence
// ---------------------------------------------------------------------------

struct InspectArgs {
    std::string checkpoint;
    std::string input;
    std::string out;
    std::string config_file;
    int z = -1, y = -1, x = -1;  // -1 = centered
    PrecisionOpt precision;
};

template <typename Real>
int run_inspect(const TrainConfig& cfg, const InspectArgs& a) {
    auto models = load_models_from_checkpoint<Real>(cfg, a.checkpoint);
    Volume vol = load_volume(a.input);
    const int hw = cfg.patch_hw;
    if (vol.depth < 5)
        throw ContractError("inspect-confidence: need at least 5 slices, got " +
                            std::to_string(vol.depth));
    if (vol.height < hw || vol.width < hw)
        throw ConfigError("inspect-confidence: patch size " + std::to_string(hw) +
                          " does not fit a " + std::to_string(vol.height) + "x" +
                          std::to_string(vol.width) + " slice");
    const int z = a.z >= 0 ? a.z : vol.depth / 2;
    const int y = a.y >= 0 ? a.y : (vol.height - hw) / 2;
    const int x = a.x >= 0 ? a.x : (vol.width - hw) / 2;
    if (z < 2 || z > vol.depth - 3)
        throw ConfigError("inspect-confidence: --z must lie in [2, " +
                          std::to_string(vol.depth - 3) + "]");
    if (y < 0 || y + hw > vol.height || x < 0 || x + hw > vol.width)
        throw ConfigError("inspect-confidence: window origin out of range");

    auto stack = Tensor<Real>::zeros({1, 5, hw, hw});
    Real* dst = stack.ptr();
    for (int s = 0; s < 5; s++)
        for (int r = 0; r < hw; r++)
            for (int c = 0; c < hw; c++)
                *dst++ = Real(vol.at(z - 2 + s, y + r, x + c));

    models.gen.bind_frozen();
    models.d2.bind_frozen();
    Tensor<Real> synth = generator_forward(models.gen, stack, false);
    Tensor<Real> confidence = d2_forward(models.d2, synth, false);
    export_confidence(confidence, a.out);

    double mean = 0.0;
    for (int64_t i = 0; i < confidence.numel(); i++) mean += double((*confidence.data)[size_t(i)]);
    mean /= double(confidence.numel());
    std::cout << "confidence map for window z=" << z << " y=" << y << " x=" << x << " -> "
              << a.out << " (mean " << mean << ")\n";
    return 0;
}

int cmd_inspect(const InspectArgs& a) {
    TrainConfig cfg = load_run_config(a.checkpoint, a.config_file);
    return a.precision.value == "double" ? run_inspect<double>(cfg, a)
                                         : run_inspect<float>(cfg, a);
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

struct GradcheckArgs {
    double tolerance = 1e-5;
    std::uint64_t seed = 7;
};

int cmd_gradcheck(const GradcheckArgs& a) {
    using T = Tensor<double>;
    Rng rng(a.seed);
    // Values are kept away from the kinks of abs/relu/maxpool/clamp so the
    // central difference measures the same branch the analytic side used.
    auto smooth = [&](std::vector<int> shape, double lo, double hi) {
        return T::uniform(std::move(shape), rng, lo, hi);
    };

    struct Case {
        std::string kind;
        std::vector<T> inputs;
        OpAttrs attrs{};
    };
    std::vector<Case> cases;
    auto add_case = [&](std::string kind, std::vector<T> inputs, OpAttrs attrs = {}) {
        cases.push_back({std::move(kind), std::move(inputs), std::move(attrs)});
    };

    add_case("add", {smooth({2, 3}, -1, 1), smooth({2, 3}, -1, 1)});
    add_case("subtract", {smooth({2, 3}, -1, 1), smooth({2, 3}, -1, 1)});
    add_case("multiply", {smooth({2, 3}, -1, 1), smooth({2, 3}, -1, 1)});
    {
        OpAttrs at;
        at.s0 = 1.7;
        add_case("scale", {smooth({2, 3}, -1, 1)}, at);
        at.s0 = 0.3;
        add_case("add_scalar", {smooth({2, 3}, -1, 1)}, at);
        at.s0 = 3.0;
        add_case("power", {smooth({2, 3}, 0.5, 1.5)}, at);
    }
    add_case("sqrt", {smooth({2, 3}, 0.5, 2.0)});
    add_case("abs", {smooth({2, 3}, 0.25, 1.0)});
    add_case("relu", {smooth({2, 3}, 0.25, 1.0)});
    add_case("sigmoid", {smooth({2, 3}, -2, 2)});
    add_case("log", {smooth({2, 3}, 0.5, 2.0)});
    {
        OpAttrs at;
        at.s0 = 0.2;
        at.s1 = 0.8;
        add_case("clamp", {smooth({2, 3}, 0.3, 0.7)}, at);
    }
    add_case("matmul", {smooth({3, 4}, -1, 1), smooth({4, 2}, -1, 1)});
    add_case("transpose2d", {smooth({3, 4}, -1, 1)});
    {
        OpAttrs at;
        at.shape = {6, 2};
        add_case("reshape", {smooth({3, 4}, -1, 1)}, at);
    }
    {
        OpAttrs at;
        at.i0 = 1;
        at.i1 = 1;
        add_case("conv2d", {smooth({2, 3, 6, 6}, -1, 1), smooth({4, 3, 3, 3}, -1, 1)}, at);
    }
    add_case("maxpool2d", {smooth({2, 3, 6, 6}, -1, 1)});
    add_case("nearest_upsample2x", {smooth({2, 2, 3, 3}, -1, 1)});
    add_case("block_sum2x", {smooth({2, 2, 4, 4}, -1, 1)});
    add_case("concat_channels", {smooth({2, 2, 3, 3}, -1, 1), smooth({2, 3, 3, 3}, -1, 1)});
    {
        OpAttrs at;
        at.i0 = 1;
        at.i1 = 2;
        add_case("slice_channels", {smooth({2, 4, 3, 3}, -1, 1)}, at);
    }
    add_case("sum", {smooth({2, 3, 4, 4}, -1, 1)});
    add_case("mean", {smooth({2, 3, 4, 4}, -1, 1)});
    add_case("sum_per_sample", {smooth({2, 3, 4, 4}, -1, 1)});
    add_case("sum_over_bhw", {smooth({2, 3, 4, 4}, -1, 1)});
    add_case("sum_batch", {smooth({3, 4}, -1, 1)});
    {
        OpAttrs at;
        at.shape = {2, 3};
        add_case("broadcast_scalar", {smooth({1}, -1, 1)}, at);
        add_case("broadcast_per_sample", {smooth({2}, -1, 1)}, at);
        at.shape = {2, 3, 2, 2};
        add_case("broadcast_channels", {smooth({3}, -1, 1)}, at);
    }
    {
        OpAttrs at;
        at.s0 = 1e-5;
        add_case("batchnorm_train",
                 {smooth({4, 3, 2, 2}, -1, 1), smooth({3}, 0.5, 1.5), smooth({3}, -0.5, 0.5)},
                 at);
    }

    bool all_pass = true;
    for (const auto& c : cases) {
        FdCheckReport rep =
            finite_difference_check<double>(c.kind, c.inputs, 1e-6, c.attrs, a.tolerance);
        std::printf("%-22s max_rel_err %.3e  tol %.0e  %s\n", rep.kind.c_str(), rep.max_rel_err,
                    rep.tolerance, rep.pass ? "PASS" : "FAIL");
        all_pass = all_pass && rep.pass;
    }
    std::cout << (all_pass ? "gradcheck: all operators PASS\n"
                           : "gradcheck: FAILURES detected\n");
    return all_pass ? 0 : 1;
}

}  // namespace

// ---------------------------------------------------------------------------
// entry point
// ---------------------------------------------------------------------------

int main(int argc, char** argv) {
    CLI::App app{"dual-adversarial volume synthesis"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "dualsynth 0.1.0");

    GenDataArgs gd;
    auto* gen_data = app.add_subcommand("gen-data", "write synthetic paired volumes");
    gen_data->add_option("--out", gd.out, "output directory")->required();
    gen_data->add_option("--volumes", gd.volumes, "number of volumes")->capture_default_str();
    gen_data->add_option("--seed", gd.seed, "base seed")->capture_default_str();
    gen_data->add_option("--depth", gd.depth, "slices per volume")->capture_default_str();
    gen_data->add_option("--height", gd.height, "slice height")->capture_default_str();
    gen_data->add_option("--width", gd.width, "slice width")->capture_default_str();
    gen_data->add_option("--blobs", gd.blobs, "background blob count")->capture_default_str();
    gen_data->add_option("--lesions", gd.lesions, "lesions per volume")->capture_default_str();
    gen_data->add_option("--noise", gd.noise, "target noise level")->capture_default_str();

    TrainArgs tr;
    auto* train = app.add_subcommand("train", "fit a generator on paired volumes");
    train->add_option("--data", tr.data, "dataset directory (volume_* triples)")->required();
    train->add_option("--out", tr.out, "run directory (config, log, checkpoint)")->required();
    train->add_option("--config", tr.config_file, "JSON training configuration");
    train->add_option("--mode", tr.mode,
                      "unet_only|global_only|local_only|dual|dual_attention");
    train->add_option("--epochs", tr.epochs, "training epochs");
    train->add_option("--batch-size", tr.batch_size, "patches per update");
    train->add_option("--patch-size", tr.patch_size, "square patch extent");
    train->add_option("--seed", tr.seed, "run seed");
    train->add_option("--pairs-per-volume", tr.pairs_per_volume, "patches drawn per volume")
        ->capture_default_str();
    add_precision_flag(train, tr.precision);

    SynthArgs sy;
    auto* synth = app.add_subcommand("synth", "run a trained generator over a volume");
    synth->add_option("--checkpoint", sy.checkpoint, "model snapshot")->required();
    synth->add_option("--input", sy.input, "source volume base path")->required();
    synth->add_option("--out", sy.out, "output volume base path")->required();
    synth->add_option("--config", sy.config_file,
                      "run configuration (default: config.json beside the checkpoint)");
    synth->add_option("--stride", sy.stride, "window stride (default: half patch)");
    add_precision_flag(synth, sy.precision);

    EvalArgs ev;
    auto* eval = app.add_subcommand("eval", "MAE/PSNR report between two volumes");
    eval->add_option("--prediction", ev.prediction, "predicted volume base path")->required();
    eval->add_option("--reference", ev.reference, "reference volume base path")->required();
    eval->add_option("--mask", ev.mask, "binary mask volume base path");
    eval->add_option("--peak", ev.peak_convention, "PSNR peak convention (data-range|fixed)")
        ->check(CLI::IsMember({"data-range", "fixed"}))
        ->capture_default_str();
    eval->add_option("--fixed-peak", ev.fixed_peak, "peak value when --peak fixed")
        ->capture_default_str();
    eval->add_flag("--json", ev.as_json, "emit the report as JSON");

    InspectArgs in;
    auto* inspect =
        app.add_subcommand("inspect-confidence", "export the confidence map of one window");
    inspect->add_option("--checkpoint", in.checkpoint, "model snapshot")->required();
    inspect->add_option("--input", in.input, "source volume base path")->required();
    inspect->add_option("--out", in.out, "output PGM path")->required();
    inspect->add_option("--config", in.config_file,
                        "run configuration (default: config.json beside the checkpoint)");
    inspect->add_option("--z", in.z, "center slice (default: middle)");
    inspect->add_option("--y", in.y, "window row origin (default: centered)");
    inspect->add_option("--x", in.x, "window column origin (default: centered)");
    add_precision_flag(inspect, in.precision);

    GradcheckArgs gc;
    auto* gradcheck =
        app.add_subcommand("gradcheck", "finite-difference audit of the differentiable ops");
    gradcheck->add_option("--tolerance", gc.tolerance, "max relative error allowed")
        ->capture_default_str();
    gradcheck->add_option("--seed", gc.seed, "probe seed")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen_data->parsed()) return cmd_gen_data(gd);
        if (train->parsed()) return cmd_train(tr);
        if (synth->parsed()) return cmd_synth(sy);
        if (eval->parsed()) return cmd_eval(ev);
        if (inspect->parsed()) return cmd_inspect(in);
        if (gradcheck->parsed()) return cmd_gradcheck(gc);
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return 3;
    } catch (const FormatError& e) {
        std::cerr << "file error: " << e.what() << "\n";
        return 4;
    } catch (const ShapeError& e) {
        std::cerr << "shape error: " << e.what() << "\n";
        return 5;
    } catch (const ContractError& e) {
        std::cerr << "contract violation: " << e.what() << "\n";
        return 5;
    } catch (const NonFiniteError& e) {
        std::cerr << "non-finite value: " << e.what() << "\n";
        return 6;
    } catch (const GenerationError& e) {
        std::cerr << "data generation failed: " << e.what() << "\n";
        return 7;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 10;
    }
    return 0;
}
