#include "flowmatte/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "flowmatte/autodiff.hpp"  // reflect_index
#include "flowmatte/image_io.hpp"
#include "flowmatte/synth.hpp"

namespace flowmatte {

namespace {

void check_alpha_pair(const AlphaSequence& pred, const AlphaSequence& gt, const char* what) {
    require_same_shape(pred.alphas, gt.alphas, what);
}

}  // namespace

double mad(const AlphaSequence& pred, const AlphaSequence& gt, double scale) {
    check_alpha_pair(pred, gt, "mad");
    return (pred.alphas.data - gt.alphas.data).abs().mean() * scale;
}

double mse_metric(const AlphaSequence& pred, const AlphaSequence& gt, double scale) {
    check_alpha_pair(pred, gt, "mse");
    return (pred.alphas.data - gt.alphas.data).square().mean() * scale;
}

double sad(const AlphaSequence& pred, const AlphaSequence& gt, double scale) {
    check_alpha_pair(pred, gt, "sad");
    return (pred.alphas.data - gt.alphas.data).abs().sum() * scale;
}

namespace {

struct GaussDerivKernels {
    std::vector<double> smooth;  // sums to 1
    std::vector<double> deriv;   // unit ramp response
    int radius;
};

GaussDerivKernels gauss_deriv_kernels(double sigma) {
    GaussDerivKernels k;
    k.radius = int(std::ceil(3.0 * sigma));
    const int n = 2 * k.radius + 1;
    k.smooth.resize(n);
    k.deriv.resize(n);
    double ssum = 0, ramp = 0;
    for (int i = -k.radius; i <= k.radius; ++i) {
        double g = std::exp(-0.5 * i * i / (sigma * sigma));
        k.smooth[i + k.radius] = g;
        k.deriv[i + k.radius] = -double(i) * g;
        ssum += g;
        ramp += double(i) * double(i) * g;  // response of -i*g to the ramp f(x)=x
    }
    for (auto& v : k.smooth) v /= ssum;
    for (auto& v : k.deriv) v /= ramp;
    return k;
}

// Separable convolution of one frame (symmetric boundary), horizontal
// kernel kx then vertical kernel ky.
Eigen::ArrayXXd filter_frame(const Tensor4d& a, int t, int c, const std::vector<double>& kx,
                             const std::vector<double>& ky) {
    const int H = a.h, W = a.w;
    const int rx = (int(kx.size()) - 1) / 2;
    const int ry = (int(ky.size()) - 1) / 2;
    Eigen::ArrayXXd tmp(H, W), out(H, W);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double s = 0;
            for (int i = -rx; i <= rx; ++i)
                s += kx[i + rx] * a(t, c, y, ad::reflect_index(x + i, W));
            tmp(y, x) = s;
        }
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double s = 0;
            for (int i = -ry; i <= ry; ++i) s += ky[i + ry] * tmp(ad::reflect_index(y + i, H), x);
            out(y, x) = s;
        }
    return out;
}

}  // namespace

double grad_error(const AlphaSequence& pred, const AlphaSequence& gt, double scale) {
    check_alpha_pair(pred, gt, "grad_error");
    static const GaussDerivKernels k = gauss_deriv_kernels(1.4);
    // frames must cover the kernel's half-support so the mirrored taps are
    // a single fold; anything smaller has no meaningful gradient content
    if (pred.alphas.h < k.radius + 1 || pred.alphas.w < k.radius + 1)
        throw ShapeError(strf("grad_error: frame %dx%d smaller than the %d-tap kernel's support",
                              pred.alphas.h, pred.alphas.w, 2 * k.radius + 1));
    double total = 0;
    for (int t = 0; t < pred.alphas.t; ++t) {
        auto gx_p = filter_frame(pred.alphas, t, 0, k.deriv, k.smooth);
        auto gy_p = filter_frame(pred.alphas, t, 0, k.smooth, k.deriv);
        auto gx_g = filter_frame(gt.alphas, t, 0, k.deriv, k.smooth);
        auto gy_g = filter_frame(gt.alphas, t, 0, k.smooth, k.deriv);
        total += (gx_p - gx_g).square().sum() + (gy_p - gy_g).square().sum();
    }
    return total * scale;
}

namespace {

// Largest 4-connected component of `mask` (row-major bytes); returns a mask
// of that component, all zeros when the input is empty. Ties resolve to the
// first component in scan order.
std::vector<std::uint8_t> largest_component(const std::vector<std::uint8_t>& mask, int H, int W) {
    std::vector<int> label(std::size_t(H) * W, -1);
    std::vector<std::uint8_t> out(std::size_t(H) * W, 0);
    int best_label = -1, best_size = 0, next = 0;
    std::vector<int> stack;
    for (int start = 0; start < H * W; ++start) {
        if (!mask[start] || label[start] != -1) continue;
        int size = 0;
        stack.push_back(start);
        label[start] = next;
        while (!stack.empty()) {
            int p = stack.back();
            stack.pop_back();
            ++size;
            int y = p / W, x = p % W;
            const int ns[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
            for (auto& n : ns) {
                if (n[0] < 0 || n[0] >= H || n[1] < 0 || n[1] >= W) continue;
                int q = n[0] * W + n[1];
                if (mask[q] && label[q] == -1) {
                    label[q] = next;
                    stack.push_back(q);
                }
            }
        }
        if (size > best_size) {
            best_size = size;
            best_label = next;
        }
        ++next;
    }
    if (best_label >= 0)
        for (int p = 0; p < H * W; ++p) out[p] = label[p] == best_label ? 1 : 0;
    return out;
}

}  // namespace

double conn_error(const AlphaSequence& pred, const AlphaSequence& gt, double scale) {
    check_alpha_pair(pred, gt, "conn_error");
    const int H = pred.alphas.h, W = pred.alphas.w;
    double total = 0;
    std::vector<std::uint8_t> inter(std::size_t(H) * W);
    for (int t = 0; t < pred.alphas.t; ++t) {
        std::vector<double> l_map(std::size_t(H) * W, -1.0);
        double prev_theta = 0.0;
        for (int step = 1; step <= 9; ++step) {
            double theta = 0.1 * step;
            for (int p = 0; p < H * W; ++p)
                inter[p] = (pred.alphas.data[t * std::int64_t(H) * W + p] >= theta &&
                            gt.alphas.data[t * std::int64_t(H) * W + p] >= theta)
                               ? 1
                               : 0;
            auto omega = largest_component(inter, H, W);
            for (int p = 0; p < H * W; ++p)
                if (l_map[p] < 0 && !omega[p]) l_map[p] = prev_theta;
            prev_theta = theta;
        }
        for (int p = 0; p < H * W; ++p)
            if (l_map[p] < 0) l_map[p] = prev_theta;

        for (int p = 0; p < H * W; ++p) {
            double pa = pred.alphas.data[t * std::int64_t(H) * W + p];
            double ga = gt.alphas.data[t * std::int64_t(H) * W + p];
            double dp = pa - l_map[p];
            double dg = ga - l_map[p];
            double phi_p = 1.0 - (dp >= 0.15 ? dp : 0.0);
            double phi_g = 1.0 - (dg >= 0.15 ? dg : 0.0);
            total += std::abs(phi_p - phi_g);
        }
    }
    return total * scale;
}

double dtssd(const AlphaSequence& pred, const AlphaSequence& gt, double scale) {
    check_alpha_pair(pred, gt, "dtssd");
    const int T = pred.alphas.t;
    if (T < 2) throw ShapeError("dtssd: needs T >= 2 (temporal gradient undefined)");
    const std::int64_t fs = pred.alphas.frame_size();
    double acc = 0;
    for (int t = 0; t + 1 < T; ++t) {
        auto dp = (pred.alphas.data.segment((t + 1) * fs, fs) -
                   pred.alphas.data.segment(t * fs, fs))
                      .eval();
        auto dg =
            (gt.alphas.data.segment((t + 1) * fs, fs) - gt.alphas.data.segment(t * fs, fs)).eval();
        acc += (dp - dg).square().sum();
    }
    double mean = acc / (double(T - 1) * fs);
    return std::sqrt(mean) * scale;
}

double psnr(const Tensor4d& pred, const Tensor4d& gt, double peak) {
    require_same_shape(pred, gt, "psnr");
    double m = (pred.data - gt.data).square().mean();
    if (m <= 0.0) return 99.0;
    double v = 10.0 * std::log10(peak * peak / m);
    return std::min(v, 99.0);
}

double ssim(const Tensor4d& pred, const Tensor4d& gt, double peak) {
    require_same_shape(pred, gt, "ssim");
    const double c1 = (0.01 * peak) * (0.01 * peak);
    const double c2 = (0.03 * peak) * (0.03 * peak);
    // 11-tap Gaussian window, sigma 1.5
    std::vector<double> win(11);
    double wsum = 0;
    for (int i = -5; i <= 5; ++i) {
        win[i + 5] = std::exp(-0.5 * i * i / (1.5 * 1.5));
        wsum += win[i + 5];
    }
    for (auto& v : win) v /= wsum;

    Tensor4d p2 = pred, g2 = gt, pg = pred;
    p2.data = pred.data.square();
    g2.data = gt.data.square();
    pg.data = pred.data * gt.data;

    double total = 0;
    std::int64_t count = 0;
    for (int t = 0; t < pred.t; ++t)
        for (int c = 0; c < pred.c; ++c) {
            auto mu_p = filter_frame(pred, t, c, win, win);
            auto mu_g = filter_frame(gt, t, c, win, win);
            auto m_pp = filter_frame(p2, t, c, win, win);
            auto m_gg = filter_frame(g2, t, c, win, win);
            auto m_pg = filter_frame(pg, t, c, win, win);
            for (int y = 0; y < pred.h; ++y)
                for (int x = 0; x < pred.w; ++x) {
                    double up = mu_p(y, x), ug = mu_g(y, x);
                    double vp = m_pp(y, x) - up * up;
                    double vg = m_gg(y, x) - ug * ug;
                    double cov = m_pg(y, x) - up * ug;
                    total += ((2 * up * ug + c1) * (2 * cov + c2)) /
                             ((up * up + ug * ug + c1) * (vp + vg + c2));
                    ++count;
                }
        }
    return total / double(count);
}

ClipMetrics compute_clip_metrics(const std::string& name, const AlphaSequence& pred,
                                 const AlphaSequence& gt, const MetricScales& s) {
    ClipMetrics m;
    m.clip = name;
    m.mad = mad(pred, gt, s.mad_scale);
    m.mse = mse_metric(pred, gt, s.mse_scale);
    m.sad = sad(pred, gt, s.sad_scale);
    m.grad = grad_error(pred, gt, s.grad_scale);
    m.conn = conn_error(pred, gt, s.conn_scale);
    m.dtssd = pred.t() >= 2 ? dtssd(pred, gt, s.dtssd_scale) : 0.0;
    return m;
}

MetricReport evaluate(const DatasetManifest& manifest, const std::filesystem::path& pred_dir,
                      const MetricScales& scales) {
    MetricReport report;
    report.scales = scales;
    for (const auto& clip : manifest.clips) {
        auto pred_clip = pred_dir / clip.path;
        if (!std::filesystem::exists(pred_clip / "alpha" / "00000.png")) {
            report.missing.push_back(clip.path);
            continue;
        }
        AlphaSequence pred = read_clip_alpha(pred_clip);
        AlphaSequence gt = read_clip_alpha(manifest.root / clip.path);
        report.per_clip.push_back(compute_clip_metrics(clip.path, pred, gt, scales));
    }
    report.partial = !report.missing.empty();
    ClipMetrics agg;
    agg.clip = report.partial ? "aggregate(partial)" : "aggregate";
    for (const auto& m : report.per_clip) {
        agg.mad += m.mad;
        agg.mse += m.mse;
        agg.sad += m.sad;
        agg.grad += m.grad;
        agg.conn += m.conn;
        agg.dtssd += m.dtssd;
    }
    if (!report.per_clip.empty()) {
        double n = double(report.per_clip.size());
        agg.mad /= n;
        agg.mse /= n;
        agg.sad /= n;
        agg.grad /= n;
        agg.conn /= n;
        agg.dtssd /= n;
    }
    report.aggregate = agg;
    return report;
}

namespace {

std::string scales_header(const MetricScales& s) {
    return strf("scales: MAD x%g  MSE x%g  SAD x%g  Grad x%g  Conn x%g  dtSSD x%g", s.mad_scale,
                s.mse_scale, s.sad_scale, s.grad_scale, s.conn_scale, s.dtssd_scale);
}

}  // namespace

std::string report_table(const MetricReport& report) {
    std::ostringstream os;
    os << scales_header(report.scales) << "\n";
    os << strf("%-28s %10s %10s %10s %10s %10s %10s\n", "clip", "MAD", "MSE", "SAD", "Grad",
               "Conn", "dtSSD");
    auto row = [&](const ClipMetrics& m) {
        os << strf("%-28s %10.4f %10.4f %10.4f %10.4f %10.4f %10.4f\n", m.clip.c_str(), m.mad,
                   m.mse, m.sad, m.grad, m.conn, m.dtssd);
    };
    for (const auto& m : report.per_clip) row(m);
    row(report.aggregate);
    for (const auto& miss : report.missing) os << "missing prediction: " << miss << "\n";
    return os.str();
}

std::string report_csv(const MetricReport& report) {
    std::ostringstream os;
    os << "# " << scales_header(report.scales) << "\n";
    os << "clip,mad,mse,sad,grad,conn,dtssd\n";
    auto row = [&](const ClipMetrics& m) {
        os << strf("%s,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", m.clip.c_str(), m.mad, m.mse, m.sad,
                   m.grad, m.conn, m.dtssd);
    };
    for (const auto& m : report.per_clip) row(m);
    row(report.aggregate);
    return os.str();
}

std::string report_json(const MetricReport& report) {
    nlohmann::ordered_json j;
    j["scales"] = {{"mad", report.scales.mad_scale},     {"mse", report.scales.mse_scale},
                   {"sad", report.scales.sad_scale},     {"grad", report.scales.grad_scale},
                   {"conn", report.scales.conn_scale},   {"dtssd", report.scales.dtssd_scale}};
    auto clip_json = [](const ClipMetrics& m) {
        return nlohmann::ordered_json{{"clip", m.clip}, {"mad", m.mad},   {"mse", m.mse},
                                      {"sad", m.sad},   {"grad", m.grad}, {"conn", m.conn},
                                      {"dtssd", m.dtssd}};
    };
    j["per_clip"] = nlohmann::ordered_json::array();
    for (const auto& m : report.per_clip) j["per_clip"].push_back(clip_json(m));
    j["aggregate"] = clip_json(report.aggregate);
    j["missing"] = report.missing;
    j["partial"] = report.partial;
    return j.dump(2) + "\n";
}

}  // namespace flowmatte
