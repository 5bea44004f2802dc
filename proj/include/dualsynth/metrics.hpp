// Volume-level error metrics (plain and mask-restricted), confidence-map
// image export, and the ablation report table.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dualsynth/common.hpp"
#include "dualsynth/data.hpp"
#include "dualsynth/tensor.hpp"

namespace dualsynth {

// --------------------------------------------------------------------------
// MAE / PSNR
// --------------------------------------------------------------------------

enum class PeakConvention { kDataRange, kFixed };

inline const char* peak_convention_name(PeakConvention c) {
    return c == PeakConvention::kDataRange ? "data-range" : "fixed";
}

namespace detail {

inline void check_metric_inputs(const Volume& y, const Volume& yhat, const Volume* mask) {
    if (y.depth != yhat.depth || y.height != yhat.height || y.width != yhat.width)
        throw ShapeError("metrics: volume extents differ");
    if (mask) {
        if (mask->depth != y.depth || mask->height != y.height || mask->width != y.width)
            throw ShapeError("metrics: mask extents differ from the volumes");
        bool any = false;
        for (float f : mask->voxels) {
            if (f != 0.0f && f != 1.0f)
                throw ContractError("metrics: mask must be binary, found " + std::to_string(f));
            any = any || f == 1.0f;
        }
        if (!any) throw ContractError("metrics: mask selects no voxels");
    }
}

// sum of |d| and d^2 over the (masked) region, plus the voxel count
inline void error_sums(const Volume& y, const Volume& yhat, const Volume* mask, double& abs_sum,
                       double& sq_sum, int64_t& count) {
    abs_sum = 0.0;
    sq_sum = 0.0;
    count = 0;
    for (size_t i = 0; i < y.voxels.size(); i++) {
        if (mask && mask->voxels[i] == 0.0f) continue;
        const double d = double(y.voxels[i]) - double(yhat.voxels[i]);
        abs_sum += std::abs(d);
        sq_sum += d * d;
        count++;
    }
}

}  // namespace detail

// mean |Y - Yhat| over all voxels, or over mask==1 voxels when a mask is
// given.
inline double mae(const Volume& y, const Volume& yhat, const Volume* mask = nullptr) {
    detail::check_metric_inputs(y, yhat, mask);
    double abs_sum, sq_sum;
    int64_t count;
    detail::error_sums(y, yhat, mask, abs_sum, sq_sum, count);
    return abs_sum / double(count);
}

// 10 log10(peak^2 / MSE) in dB. Identical volumes yield +infinity, printed
// as "inf" and compared as greater than any finite value.
inline double psnr(const Volume& y, const Volume& yhat, const Volume* mask = nullptr,
                   PeakConvention convention = PeakConvention::kDataRange,
                   double fixed_peak = 1.0) {
    detail::check_metric_inputs(y, yhat, mask);
    const double peak =
        convention == PeakConvention::kDataRange ? y.range_max - y.range_min : fixed_peak;
    if (!(peak > 0.0))
        throw ContractError("psnr: peak must be positive, got " + std::to_string(peak));
    double abs_sum, sq_sum;
    int64_t count;
    detail::error_sums(y, yhat, mask, abs_sum, sq_sum, count);
    const double mse = sq_sum / double(count);
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

// Whole-volume and mask-restricted metrics in one bundle, with the peak
// convention recorded so reports are self-describing.
struct MetricsReport {
    double mae = 0.0;
    double psnr = 0.0;
    std::optional<double> masked_mae;
    std::optional<double> masked_psnr;
    int64_t total_voxels = 0;
    int64_t masked_voxels = 0;
    double peak = 0.0;
    PeakConvention convention = PeakConvention::kDataRange;
};

inline MetricsReport compute_metrics(const Volume& y, const Volume& yhat,
                                     const Volume* mask = nullptr,
                                     PeakConvention convention = PeakConvention::kDataRange,
                                     double fixed_peak = 1.0) {
    MetricsReport r;
    r.convention = convention;
    r.peak = convention == PeakConvention::kDataRange ? y.range_max - y.range_min : fixed_peak;
    r.total_voxels = y.numel();
    r.mae = mae(y, yhat);
    r.psnr = psnr(y, yhat, nullptr, convention, fixed_peak);
    if (mask) {
        r.masked_mae = mae(y, yhat, mask);
        r.masked_psnr = psnr(y, yhat, mask, convention, fixed_peak);
        int64_t c = 0;
        for (float f : mask->voxels)
            if (f == 1.0f) c++;
        r.masked_voxels = c;
    }
    return r;
}

namespace detail {

inline std::string fmt_db(double v) {
    if (std::isinf(v)) return "inf";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

}  // namespace detail

inline nlohmann::json metrics_to_json(const MetricsReport& r) {
    nlohmann::json j;
    j["mae"] = r.mae;
    j["psnr_db"] = std::isinf(r.psnr) ? nlohmann::json("inf") : nlohmann::json(r.psnr);
    j["masked_mae"] = r.masked_mae ? nlohmann::json(*r.masked_mae) : nlohmann::json(nullptr);
    j["masked_psnr_db"] =
        r.masked_psnr
            ? (std::isinf(*r.masked_psnr) ? nlohmann::json("inf") : nlohmann::json(*r.masked_psnr))
            : nlohmann::json(nullptr);
    j["total_voxels"] = r.total_voxels;
    j["masked_voxels"] = r.masked_voxels;
    j["peak"] = r.peak;
    j["peak_convention"] = peak_convention_name(r.convention);
    return j;
}

inline std::string metrics_to_text(const MetricsReport& r) {
    std::string out;
    out += "MAE:         " + std::to_string(r.mae) + "\n";
    out += "PSNR (dB):   " + detail::fmt_db(r.psnr) + "\n";
    if (r.masked_mae) {
        out += "masked MAE:  " + std::to_string(*r.masked_mae) + " (" +
               std::to_string(r.masked_voxels) + " of " + std::to_string(r.total_voxels) +
               " voxels)\n";
        out += "masked PSNR: " + detail::fmt_db(*r.masked_psnr) + "\n";
    }
    out += "peak:        " + std::to_string(r.peak) + " (" + peak_convention_name(r.convention) +
           ")\n";
    return out;
}

// --------------------------------------------------------------------------
// Confidence-map export (binary portable graymap)
// --------------------------------------------------------------------------

// Writes a [H,W] (or [1,1,H,W] / [1,H,W]) map with values in [0,1] as an
// 8-bit binary PGM; quantization is round-half-up: byte = floor(v*255 + 0.5).
template <typename Real>
void export_confidence(const Tensor<Real>& map, const std::string& path) {
    std::vector<int> s = map.shape;
    while (s.size() > 2 && s.front() == 1) s.erase(s.begin());
    if (s.size() != 2)
        throw ShapeError("export_confidence: expected a single-channel 2-d map, got " +
                         shape_str(map.shape));
    const int h = s[0], w = s[1];
    std::vector<unsigned char> bytes(size_t(int64_t(h) * w));
    for (int64_t i = 0; i < int64_t(h) * w; i++) {
        const double v = static_cast<double>(map[i]);
        if (!(v >= 0.0 && v <= 1.0))
            throw ContractError("export_confidence: values must lie in [0,1], got " +
                                std::to_string(v));
        bytes[size_t(i)] = static_cast<unsigned char>(std::floor(v * 255.0 + 0.5));
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("export_confidence: cannot open '" + path + "' for writing");
    f << "P5\n" << w << " " << h << "\n255\n";
    f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!f) throw FormatError("export_confidence: write failed for '" + path + "'");
}

struct GrayImage {
    int height = 0, width = 0;
    std::vector<unsigned char> pixels;  // row-major
};

inline GrayImage read_pgm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("read_pgm: cannot open '" + path + "'");
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    f >> magic >> w >> h >> maxval;
    if (magic != "P5" || w < 1 || h < 1 || maxval != 255)
        throw FormatError("read_pgm: '" + path + "' is not an 8-bit binary graymap");
    f.get();  // single whitespace after the header
    GrayImage img;
    img.height = h;
    img.width = w;
    img.pixels.resize(size_t(int64_t(w) * h));
    f.read(reinterpret_cast<char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
    if (!f) throw FormatError("read_pgm: '" + path + "' is truncated");
    return img;
}

// --------------------------------------------------------------------------
// Ablation report
// --------------------------------------------------------------------------

// Canonical presentation order for training modes in reports.
inline const std::vector<std::string>& ablation_mode_order() {
    static const std::vector<std::string> order{"unet_only", "global_only", "local_only", "dual",
                                                "dual_attention"};
    return order;
}

struct AblationReport {
    std::string text;
    nlohmann::json json;
};

namespace detail {

struct Stat {
    double mean = 0.0, stddev = 0.0;
    size_t n = 0;
};

// mean and population standard deviation; infinities propagate to the mean
inline Stat stat_of(const std::vector<double>& xs) {
    Stat s;
    s.n = xs.size();
    for (double x : xs) s.mean += x;
    s.mean /= double(xs.size());
    if (xs.size() > 1 && std::isfinite(s.mean)) {
        double acc = 0.0;
        for (double x : xs) acc += (x - s.mean) * (x - s.mean);
        s.stddev = std::sqrt(acc / double(xs.size()));
    }
    return s;
}

inline std::string fmt_stat(const Stat& s) {
    char buf[96];
    if (std::isinf(s.mean)) return s.n > 1 ? "inf(0.0)" : "inf";
    if (s.n > 1)
        std::snprintf(buf, sizeof(buf), "%.4g(%.3g)", s.mean, s.stddev);
    else
        std::snprintf(buf, sizeof(buf), "%.4g", s.mean);
    return buf;
}

}  // namespace detail

// Aggregates per-mode metric reports into an aligned text table (mean with
// population std in parens, matching the usual mean(std) presentation) and a
// machine-readable twin. Rows follow ablation_mode_order(); unknown mode
// names are appended in first-seen order.
inline AblationReport ablation_report(
    const std::vector<std::pair<std::string, MetricsReport>>& runs) {
    if (runs.empty()) throw ConfigError("ablation_report: need at least one run");

    std::vector<std::string> modes;
    for (const auto& name : ablation_mode_order())
        for (const auto& [mode, rep] : runs)
            if (mode == name) {
                modes.push_back(name);
                break;
            }
    for (const auto& [mode, rep] : runs)
        if (std::find(modes.begin(), modes.end(), mode) == modes.end()) modes.push_back(mode);

    AblationReport out;
    out.json = nlohmann::json::array();
    std::vector<std::vector<std::string>> rows;
    rows.push_back({"mode", "runs", "MAE", "PSNR(dB)", "masked MAE", "masked PSNR(dB)"});
    for (const auto& mode : modes) {
        std::vector<double> maes, psnrs, mmaes, mpsnrs;
        for (const auto& [m, rep] : runs) {
            if (m != mode) continue;
            maes.push_back(rep.mae);
            psnrs.push_back(rep.psnr);
            if (rep.masked_mae) mmaes.push_back(*rep.masked_mae);
            if (rep.masked_psnr) mpsnrs.push_back(*rep.masked_psnr);
        }
        auto sm = detail::stat_of(maes);
        auto sp = detail::stat_of(psnrs);
        std::vector<std::string> row{mode, std::to_string(maes.size()), detail::fmt_stat(sm),
                                     detail::fmt_stat(sp)};
        nlohmann::json j;
        j["mode"] = mode;
        j["runs"] = maes.size();
        j["mae_mean"] = sm.mean;
        j["mae_std"] = sm.n > 1 ? nlohmann::json(sm.stddev) : nlohmann::json(nullptr);
        j["psnr_mean"] = std::isinf(sp.mean) ? nlohmann::json("inf") : nlohmann::json(sp.mean);
        j["psnr_std"] = sp.n > 1 ? nlohmann::json(sp.stddev) : nlohmann::json(nullptr);
        if (!mmaes.empty()) {
            auto smm = detail::stat_of(mmaes);
            auto smp = detail::stat_of(mpsnrs);
            row.push_back(detail::fmt_stat(smm));
            row.push_back(detail::fmt_stat(smp));
            j["masked_mae_mean"] = smm.mean;
            j["masked_psnr_mean"] =
                std::isinf(smp.mean) ? nlohmann::json("inf") : nlohmann::json(smp.mean);
        } else {
            row.push_back("-");
            row.push_back("-");
            j["masked_mae_mean"] = nullptr;
            j["masked_psnr_mean"] = nullptr;
        }
        rows.push_back(std::move(row));
        out.json.push_back(std::move(j));
    }

    std::vector<size_t> widths(rows[0].size(), 0);
    for (const auto& row : rows)
        for (size_t c = 0; c < row.size(); c++) widths[c] = std::max(widths[c], row[c].size());
    for (const auto& row : rows) {
        for (size_t c = 0; c < row.size(); c++) {
            out.text += row[c];
            if (c + 1 < row.size()) out.text += std::string(widths[c] - row[c].size() + 2, ' ');
        }
        out.text += "\n";
    }
    return out;
}

}  // namespace dualsynth
