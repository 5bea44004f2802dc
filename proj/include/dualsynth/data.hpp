// Volume container and file format, the deterministic lesion phantom
// generator, 2.5-D patch extraction, and overlap-averaged whole-volume
// synthesis.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dualsynth/common.hpp"
#include "dualsynth/nn.hpp"
#include "dualsynth/tensor.hpp"

namespace dualsynth {

// --------------------------------------------------------------------------
// Volume
// --------------------------------------------------------------------------

// A dense 3-D scalar field in z-major order (z slowest, x fastest) with its
// intensity range and a free-text modality tag.
struct Volume {
    int depth = 0, height = 0, width = 0;
    std::vector<float> voxels;
    double range_min = 0.0, range_max = 0.0;
    std::string modality;

    int64_t numel() const {
        return int64_t(depth) * int64_t(height) * int64_t(width);
    }
    float& at(int z, int y, int x) {
        return voxels[size_t((int64_t(z) * height + y) * width + x)];
    }
    float at(int z, int y, int x) const {
        return voxels[size_t((int64_t(z) * height + y) * width + x)];
    }
    void update_range() {
        if (voxels.empty()) {
            range_min = range_max = 0.0;
            return;
        }
        auto [lo, hi] = std::minmax_element(voxels.begin(), voxels.end());
        range_min = *lo;
        range_max = *hi;
    }

    static Volume make(int d, int h, int w, std::string tag = "") {
        Volume v;
        v.depth = d;
        v.height = h;
        v.width = w;
        v.voxels.assign(size_t(int64_t(d) * h * w), 0.0f);
        v.modality = std::move(tag);
        return v;
    }
};

// --------------------------------------------------------------------------
// Volume file format: raw little-endian f32 payload + a sidecar
// --------------------------------------------------------------------------
// save_volume(v, base) writes base.raw (z-major 32-bit IEEE-754
// little-endian) and base.json (extents, range, modality, byte order).

namespace detail {

inline void put_f32_le(std::vector<unsigned char>& out, float f) {
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    out.push_back(static_cast<unsigned char>(bits & 0xff));
    out.push_back(static_cast<unsigned char>((bits >> 8) & 0xff));
    out.push_back(static_cast<unsigned char>((bits >> 16) & 0xff));
    out.push_back(static_cast<unsigned char>((bits >> 24) & 0xff));
}

inline float get_f32_le(const unsigned char* p) {
    uint32_t bits = uint32_t(p[0]) | (uint32_t(p[1]) << 8) | (uint32_t(p[2]) << 16) |
                    (uint32_t(p[3]) << 24);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
}

}  // namespace detail

inline void save_volume(const Volume& v, const std::string& base_path) {
    if (v.numel() != int64_t(v.voxels.size()))
        throw ContractError("save_volume: voxel buffer size does not match extents");
    std::vector<unsigned char> payload;
    payload.reserve(v.voxels.size() * 4);
    for (float f : v.voxels) detail::put_f32_le(payload, f);
    std::ofstream raw(base_path + ".raw", std::ios::binary | std::ios::trunc);
    if (!raw) throw FormatError("save_volume: cannot open '" + base_path + ".raw' for writing");
    raw.write(reinterpret_cast<const char*>(payload.data()),
              std::streamsize(payload.size()));
    if (!raw) throw FormatError("save_volume: write failed for '" + base_path + ".raw'");

    nlohmann::json side;
    side["depth"] = v.depth;
    side["height"] = v.height;
    side["width"] = v.width;
    side["voxel_count"] = v.numel();
    side["range_min"] = v.range_min;
    side["range_max"] = v.range_max;
    side["modality"] = v.modality;
    side["byte_order"] = "little";
    side["dtype"] = "f32";
    std::ofstream js(base_path + ".json", std::ios::trunc);
    if (!js) throw FormatError("save_volume: cannot open '" + base_path + ".json' for writing");
    js << side.dump(2) << "\n";
}

inline Volume load_volume(const std::string& base_path) {
    std::ifstream js(base_path + ".json");
    if (!js) throw FormatError("load_volume: missing sidecar '" + base_path + ".json'");
    nlohmann::json side;
    try {
        js >> side;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("load_volume: malformed sidecar '" + base_path +
                          ".json': " + e.what());
    }
    Volume v;
    try {
        v.depth = side.at("depth").get<int>();
        v.height = side.at("height").get<int>();
        v.width = side.at("width").get<int>();
        v.range_min = side.at("range_min").get<double>();
        v.range_max = side.at("range_max").get<double>();
        v.modality = side.value("modality", std::string());
        if (side.value("byte_order", std::string("little")) != "little")
            throw FormatError("load_volume: unsupported byte order in '" + base_path + ".json'");
        if (side.value("dtype", std::string("f32")) != "f32")
            throw FormatError("load_volume: unsupported dtype in '" + base_path + ".json'");
        const int64_t claimed = side.at("voxel_count").get<int64_t>();
        if (v.depth < 1 || v.height < 1 || v.width < 1)
            throw FormatError("load_volume: non-positive extents in sidecar");
        if (claimed != v.numel())
            throw FormatError("load_volume: sidecar claims " + std::to_string(claimed) +
                              " voxels but extents imply " + std::to_string(v.numel()));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("load_volume: sidecar '" + base_path +
                          ".json' is missing fields: " + e.what());
    }

    std::ifstream raw(base_path + ".raw", std::ios::binary | std::ios::ate);
    if (!raw) throw FormatError("load_volume: missing payload '" + base_path + ".raw'");
    const std::streamsize bytes = raw.tellg();
    if (bytes != std::streamsize(v.numel() * 4))
        throw FormatError("load_volume: payload holds " + std::to_string(bytes) +
                          " bytes but extents require " + std::to_string(v.numel() * 4));
    raw.seekg(0);
    std::vector<unsigned char> buf(static_cast<size_t>(bytes), 0);
    raw.read(reinterpret_cast<char*>(buf.data()), bytes);
    if (!raw) throw FormatError("load_volume: short read on '" + base_path + ".raw'");
    v.voxels.resize(size_t(v.numel()));
    for (size_t i = 0; i < v.voxels.size(); i++)
        v.voxels[i] = detail::get_f32_le(buf.data() + i * 4);
    return v;
}

// --------------------------------------------------------------------------
// Intensity normalization
// --------------------------------------------------------------------------

// A volume mapped linearly to [-1, 1] together with the original range, so
// the mapping can be inverted exactly.
struct NormalizedVolume {
    Volume volume;
    double source_min = 0.0, source_max = 0.0;
};

inline NormalizedVolume normalize_intensity(const Volume& v) {
    if (!(v.range_max > v.range_min))
        throw ContractError("normalize_intensity: degenerate intensity range [" +
                            std::to_string(v.range_min) + ", " + std::to_string(v.range_max) +
                            "]");
    NormalizedVolume out;
    out.source_min = v.range_min;
    out.source_max = v.range_max;
    out.volume = v;
    const double span = v.range_max - v.range_min;
    for (float& f : out.volume.voxels)
        f = static_cast<float>(2.0 * (double(f) - v.range_min) / span - 1.0);
    out.volume.range_min = -1.0;
    out.volume.range_max = 1.0;
    return out;
}

inline Volume denormalize_intensity(const NormalizedVolume& n) {
    Volume out = n.volume;
    const double span = n.source_max - n.source_min;
    for (float& f : out.voxels)
        f = static_cast<float>((double(f) + 1.0) / 2.0 * span + n.source_min);
    out.update_range();
    return out;
}

// --------------------------------------------------------------------------
// Lesion phantom
// --------------------------------------------------------------------------

// Desk-scale stand-in for paired medical volumes: a smooth random blob field
// as the source modality, a fixed nonlinear intensity mapping as the target
// modality, and ellipsoidal lesion regions where the mapping is inverted and
// textured — the deliberately hard-to-synthesize part.
struct PhantomSpec {
    int depth = 16, height = 64, width = 64;
    int blob_count = 12;
    double blob_sigma_min = 4.0, blob_sigma_max = 12.0;
    int lesion_count = 3;
    double lesion_radius_min = 3.0, lesion_radius_max = 6.0;
    double noise_level = 0.05;
    uint64_t seed = 0;

    void validate() const {
        if (depth < 16 || height < 16 || width < 16)
            throw ConfigError("phantom: extents must be at least 16 per axis");
        if (blob_count < 1) throw ConfigError("phantom: blob_count must be >= 1");
        if (lesion_count < 0) throw ConfigError("phantom: lesion_count must be >= 0");
        if (!(blob_sigma_min > 0.0) || blob_sigma_max < blob_sigma_min)
            throw ConfigError("phantom: blob sigma range is invalid");
        if (!(lesion_radius_min >= 2.0) || lesion_radius_max < lesion_radius_min)
            throw ConfigError("phantom: lesion radius range is invalid (min >= 2)");
        if (noise_level < 0.0) throw ConfigError("phantom: noise_level must be >= 0");
    }
};

struct PhantomVolumes {
    Volume source;
    Volume target;
    Volume lesion_mask;  // 1 inside the altered (dilated) lesion regions
};

// The fixed source-to-target intensity mapping applied outside lesions.
// Smooth, nonlinear, strictly increasing on [0,1].
inline double phantom_global_map(double s) { return 0.15 + 0.15 * s + 0.7 * s * s; }

inline PhantomVolumes generate_phantom(const PhantomSpec& spec) {
    spec.validate();
    Rng rng(mix_seed(spec.seed, "phantom"));
    const int d = spec.depth, h = spec.height, w = spec.width;

    // smooth anatomy: normalized sum of random anisotropic Gaussian blobs
    struct Blob {
        double cz, cy, cx, sz, sy, sx, amp;
    };
    std::vector<Blob> blobs;
    blobs.reserve(size_t(spec.blob_count));
    for (int k = 0; k < spec.blob_count; k++) {
        Blob b;
        b.cz = rng.uniform(0.0, double(d - 1));
        b.cy = rng.uniform(0.0, double(h - 1));
        b.cx = rng.uniform(0.0, double(w - 1));
        b.sz = rng.uniform(spec.blob_sigma_min, spec.blob_sigma_max) * double(d) / double(h);
        b.sy = rng.uniform(spec.blob_sigma_min, spec.blob_sigma_max);
        b.sx = rng.uniform(spec.blob_sigma_min, spec.blob_sigma_max);
        b.amp = rng.uniform(0.5, 1.0);
        blobs.push_back(b);
    }
    std::vector<double> field(size_t(int64_t(d) * h * w), 0.0);
    for (int z = 0; z < d; z++)
        for (int y = 0; y < h; y++)
            for (int x = 0; x < w; x++) {
                double acc = 0.0;
                for (const Blob& b : blobs) {
                    const double dz = (z - b.cz) / b.sz;
                    const double dy = (y - b.cy) / b.sy;
                    const double dx = (x - b.cx) / b.sx;
                    acc += b.amp * std::exp(-0.5 * (dz * dz + dy * dy + dx * dx));
                }
                field[size_t((int64_t(z) * h + y) * w + x)] = acc;
            }
    const auto [flo, fhi] = std::minmax_element(field.begin(), field.end());
    const double lo = *flo, span = std::max(*fhi - *flo, 1e-12);
    for (double& f : field) f = (f - lo) / span;

    // lesion placement: non-overlapping ellipsoids, grown by one voxel; the
    // recorded mask is exactly the altered region
    Volume mask = Volume::make(d, h, w, "lesion-mask");
    auto mark_ellipsoid = [&](double cz, double cy, double cx, double rz, double ry, double rx,
                              std::vector<int64_t>& out_voxels) {
        const int z0 = std::max(0, int(std::floor(cz - rz))), z1 = std::min(d - 1, int(std::ceil(cz + rz)));
        const int y0 = std::max(0, int(std::floor(cy - ry))), y1 = std::min(h - 1, int(std::ceil(cy + ry)));
        const int x0 = std::max(0, int(std::floor(cx - rx))), x1 = std::min(w - 1, int(std::ceil(cx + rx)));
        for (int z = z0; z <= z1; z++)
            for (int y = y0; y <= y1; y++)
                for (int x = x0; x <= x1; x++) {
                    const double fz = (z - cz) / rz, fy = (y - cy) / ry, fx = (x - cx) / rx;
                    if (fz * fz + fy * fy + fx * fx <= 1.0)
                        out_voxels.push_back((int64_t(z) * h + y) * w + x);
                }
    };
    for (int k = 0; k < spec.lesion_count; k++) {
        bool placed = false;
        for (int attempt = 0; attempt < 100 && !placed; attempt++) {
            const double rz = std::min(rng.uniform(spec.lesion_radius_min, spec.lesion_radius_max),
                                       double(d) / 2.0 - 2.0);
            const double ry = rng.uniform(spec.lesion_radius_min, spec.lesion_radius_max);
            const double rx = rng.uniform(spec.lesion_radius_min, spec.lesion_radius_max);
            // dilated footprint (radius + 1) must fit with one voxel to spare
            if (2.0 * (rz + 2.0) > d || 2.0 * (ry + 2.0) > h || 2.0 * (rx + 2.0) > w) continue;
            const double cz = rng.uniform(rz + 2.0, d - 1.0 - rz - 2.0);
            const double cy = rng.uniform(ry + 2.0, h - 1.0 - ry - 2.0);
            const double cx = rng.uniform(rx + 2.0, w - 1.0 - rx - 2.0);
            std::vector<int64_t> region;
            mark_ellipsoid(cz, cy, cx, rz + 1.0, ry + 1.0, rx + 1.0, region);
            bool overlap = false;
            for (int64_t idx : region)
                if (mask.voxels[size_t(idx)] != 0.0f) {
                    overlap = true;
                    break;
                }
            if (overlap) continue;
            for (int64_t idx : region) mask.voxels[size_t(idx)] = 1.0f;
            placed = true;
        }
        if (!placed)
            throw GenerationError("phantom: could not place lesion " + std::to_string(k + 1) +
                                  " of " + std::to_string(spec.lesion_count) +
                                  " after 100 attempts");
    }

    // compose the two modalities
    Volume source = Volume::make(d, h, w, "phantom-source");
    Volume target = Volume::make(d, h, w, "phantom-target");
    for (size_t i = 0; i < field.size(); i++) {
        double s = field[i];
        if (mask.voxels[i] != 0.0f)
            s = std::clamp(1.0 - 0.7 * s, 0.0, 1.0);  // lesions look distinct in the source too
        source.voxels[i] = static_cast<float>(s);
        // derive the target from the stored (rounded) source so the two
        // modalities are related by the exact documented mapping
        double t = phantom_global_map(double(source.voxels[i]));
        if (mask.voxels[i] != 0.0f) {
            t = 1.0 - t + spec.noise_level * rng.normal();  // inverted contrast + texture
            t = std::clamp(t, 0.0, 1.25);
        }
        target.voxels[i] = static_cast<float>(t);
    }
    source.update_range();
    target.update_range();
    mask.update_range();
    return {std::move(source), std::move(target), std::move(mask)};
}

// --------------------------------------------------------------------------
// 2.5-D patches
// --------------------------------------------------------------------------

// A source stack of five adjacent slices paired with the center target
// slice. z is the center slice index; y and x are the window origin.
template <typename Real>
struct PatchPair {
    Tensor<Real> source;  // [5, hw, hw]
    Tensor<Real> target;  // [1, hw, hw]
    int z = 0, y = 0, x = 0;
};

template <typename Real>
std::vector<PatchPair<Real>> extract_patches(const Volume& source, const Volume& target,
                                             int count, int patch_hw, Rng& rng) {
    if (source.depth != target.depth || source.height != target.height ||
        source.width != target.width)
        throw ShapeError("extract_patches: source and target extents differ");
    if (source.depth < 5)
        throw ContractError("extract_patches: need at least 5 slices for a 2.5-D stack, got " +
                            std::to_string(source.depth));
    if (patch_hw < 1 || patch_hw > source.height || patch_hw > source.width)
        throw ConfigError("extract_patches: patch size " + std::to_string(patch_hw) +
                          " does not fit in " + std::to_string(source.height) + "x" +
                          std::to_string(source.width));
    if (count < 0) throw ConfigError("extract_patches: count must be >= 0");

    std::vector<PatchPair<Real>> out;
    out.reserve(size_t(count));
    for (int n = 0; n < count; n++) {
        PatchPair<Real> p;
        p.z = int(rng.uniform_int(2, source.depth - 3));
        p.y = int(rng.uniform_int(0, source.height - patch_hw));
        p.x = int(rng.uniform_int(0, source.width - patch_hw));
        std::vector<Real> src(size_t(5) * patch_hw * patch_hw);
        std::vector<Real> tgt(size_t(patch_hw) * patch_hw);
        for (int c = 0; c < 5; c++)
            for (int yy = 0; yy < patch_hw; yy++)
                for (int xx = 0; xx < patch_hw; xx++)
                    src[size_t((int64_t(c) * patch_hw + yy) * patch_hw + xx)] =
                        static_cast<Real>(source.at(p.z - 2 + c, p.y + yy, p.x + xx));
        for (int yy = 0; yy < patch_hw; yy++)
            for (int xx = 0; xx < patch_hw; xx++)
                tgt[size_t(int64_t(yy) * patch_hw + xx)] =
                    static_cast<Real>(target.at(p.z, p.y + yy, p.x + xx));
        p.source = Tensor<Real>::from({5, patch_hw, patch_hw}, std::move(src));
        p.target = Tensor<Real>::from({1, patch_hw, patch_hw}, std::move(tgt));
        out.push_back(std::move(p));
    }
    return out;
}

// --------------------------------------------------------------------------
// Whole-volume synthesis
// --------------------------------------------------------------------------

namespace detail {

inline std::vector<int> window_origins(int extent, int window, int stride) {
    std::vector<int> out;
    for (int p = 0;; p += stride) {
        if (p + window >= extent) {
            if (out.empty() || out.back() != extent - window) out.push_back(extent - window);
            break;
        }
        out.push_back(p);
    }
    return out;
}

}  // namespace detail

// Slides a window over every slice, feeds edge-replicated 5-slice stacks to
// the generator function ([1,5,hw,hw] -> [1,1,hw,hw]), and averages
// overlapping outputs with uniform weights.
template <typename Real, typename GenFn>
Volume synthesize_volume_with(GenFn&& gen_fn, const Volume& source, int patch_hw, int stride) {
    if (source.depth < 5)
        throw ContractError("synthesize_volume: need at least 5 slices, got " +
                            std::to_string(source.depth));
    if (patch_hw < 1 || patch_hw > source.height || patch_hw > source.width)
        throw ConfigError("synthesize_volume: patch size " + std::to_string(patch_hw) +
                          " does not fit in " + std::to_string(source.height) + "x" +
                          std::to_string(source.width));
    if (stride < 1 || stride > patch_hw)
        throw ConfigError("synthesize_volume: stride " + std::to_string(stride) +
                          " must lie in [1, patch size] or coverage gaps appear");

    const int d = source.depth, h = source.height, w = source.width;
    const auto ys = detail::window_origins(h, patch_hw, stride);
    const auto xs = detail::window_origins(w, patch_hw, stride);
    std::vector<double> acc(size_t(int64_t(d) * h * w), 0.0);
    std::vector<int> hits(size_t(int64_t(d) * h * w), 0);

    for (int z = 0; z < d; z++) {
        for (int y0 : ys) {
            for (int x0 : xs) {
                std::vector<Real> stack(size_t(5) * patch_hw * patch_hw);
                for (int c = 0; c < 5; c++) {
                    const int zz = std::clamp(z - 2 + c, 0, d - 1);  // edge replication
                    for (int yy = 0; yy < patch_hw; yy++)
                        for (int xx = 0; xx < patch_hw; xx++)
                            stack[size_t((int64_t(c) * patch_hw + yy) * patch_hw + xx)] =
                                static_cast<Real>(source.at(zz, y0 + yy, x0 + xx));
                }
                auto input = Tensor<Real>::from({1, 5, patch_hw, patch_hw}, std::move(stack));
                Tensor<Real> out = gen_fn(input);
                if (out.shape != std::vector<int>{1, 1, patch_hw, patch_hw})
                    throw ShapeError("synthesize_volume: generator returned " +
                                     shape_str(out.shape) + ", expected [1,1," +
                                     std::to_string(patch_hw) + "," + std::to_string(patch_hw) +
                                     "]");
                for (int yy = 0; yy < patch_hw; yy++)
                    for (int xx = 0; xx < patch_hw; xx++) {
                        const size_t idx =
                            size_t((int64_t(z) * h + y0 + yy) * w + x0 + xx);
                        acc[idx] += static_cast<double>(
                            out[int64_t(yy) * patch_hw + xx]);
                        hits[idx] += 1;
                    }
            }
        }
    }

    Volume result = Volume::make(d, h, w, "synthesized");
    for (size_t i = 0; i < acc.size(); i++) {
        if (hits[i] == 0)
            throw ConfigError("synthesize_volume: coverage gap despite stride checks");
        result.voxels[i] = static_cast<float>(acc[i] / hits[i]);
    }
    result.update_range();
    return result;
}

template <typename Real>
Volume synthesize_volume(GeneratorNet<Real>& gen, const Volume& source, int patch_hw,
                         int stride) {
    gen.bind_frozen();
    return synthesize_volume_with<Real>(
        [&](const Tensor<Real>& x) { return generator_forward(gen, x, false); }, source,
        patch_hw, stride);
}

}  // namespace dualsynth
