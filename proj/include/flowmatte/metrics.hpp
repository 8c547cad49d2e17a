#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "flowmatte/matting.hpp"

namespace flowmatte {

struct DatasetManifest;  // synth.hpp

/// Scale factors applied to the raw metric values. The conventions behind
/// published matting tables are unstated, so every report prints these.
struct MetricScales {
    double mad_scale = 1e3;
    double mse_scale = 1e3;
    double sad_scale = 1e-3;
    double grad_scale = 1e-3;
    double conn_scale = 1e-3;
    double dtssd_scale = 1e2;
};

// Pixel-accuracy metrics over alpha sequences. All are >= 0 and 0 on
// identical inputs; see each function for the exact normalization.
double mad(const AlphaSequence& pred, const AlphaSequence& gt, double scale = 1e3);
double mse_metric(const AlphaSequence& pred, const AlphaSequence& gt, double scale = 1e3);
double sad(const AlphaSequence& pred, const AlphaSequence& gt, double scale = 1e-3);

/// Sum over frames of the squared difference between Gaussian-derivative
/// gradients (sigma=1.4, truncated at 3 sigma, ramp-normalized, symmetric
/// boundary).
double grad_error(const AlphaSequence& pred, const AlphaSequence& gt, double scale = 1e-3);

/// Connectivity error: threshold sweep 0.1..0.9 (step 0.1), omega is the
/// largest 4-connected component of the thresholded intersection, l(p) the
/// last threshold at which p stayed in omega, deficit cutoff 0.15.
double conn_error(const AlphaSequence& pred, const AlphaSequence& gt, double scale = 1e-3);

/// Temporal coherence: RMS difference of direct temporal gradients.
/// Requires T >= 2.
double dtssd(const AlphaSequence& pred, const AlphaSequence& gt, double scale = 1e2);

/// 10*log10(peak^2/mse), capped at 99 dB (the zero-mse sentinel).
double psnr(const Tensor4d& pred, const Tensor4d& gt, double peak = 1.0);

/// Gaussian-window SSIM (11x11, sigma=1.5, standard stabilizers),
/// symmetric padding, mean over all window positions.
double ssim(const Tensor4d& pred, const Tensor4d& gt, double peak = 1.0);

struct ClipMetrics {
    std::string clip;
    double mad = 0, mse = 0, sad = 0, grad = 0, conn = 0, dtssd = 0;
};

struct MetricReport {
    MetricScales scales;
    std::vector<ClipMetrics> per_clip;
    ClipMetrics aggregate;
    std::vector<std::string> missing;  // clips without predictions
    bool partial = false;
};

ClipMetrics compute_clip_metrics(const std::string& name, const AlphaSequence& pred,
                                 const AlphaSequence& gt, const MetricScales& scales);

/// Evaluates predictions (<pred_dir>/<clip_id>/alpha/%05d.png) against the
/// manifest's ground truth. Missing clips are listed and the aggregate is
/// marked partial.
MetricReport evaluate(const DatasetManifest& manifest, const std::filesystem::path& pred_dir,
                      const MetricScales& scales = {});

std::string report_table(const MetricReport& report);
std::string report_csv(const MetricReport& report);
std::string report_json(const MetricReport& report);

}  // namespace flowmatte
