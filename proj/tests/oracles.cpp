#include "oracles.hpp"

#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

namespace flowmatte::oracle {

namespace {

int mirror(int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - i - 1;
    }
    return i;
}

}  // namespace

double mad(const AlphaSequence& pred, const AlphaSequence& gt, double scale) {
    double acc = 0;
    for (std::int64_t i = 0; i < pred.alphas.size(); ++i)
        acc += std::abs(pred.alphas.data[i] - gt.alphas.data[i]);
    return acc / double(pred.alphas.size()) * scale;
}

double mse(const AlphaSequence& pred, const AlphaSequence& gt, double scale) {
    double acc = 0;
    for (std::int64_t i = 0; i < pred.alphas.size(); ++i) {
        double d = pred.alphas.data[i] - gt.alphas.data[i];
        acc += d * d;
    }
    return acc / double(pred.alphas.size()) * scale;
}

double sad(const AlphaSequence& pred, const AlphaSequence& gt, double scale) {
    double acc = 0;
    for (std::int64_t i = 0; i < pred.alphas.size(); ++i)
        acc += std::abs(pred.alphas.data[i] - gt.alphas.data[i]);
    return acc * scale;
}

double grad_error(const AlphaSequence& pred, const AlphaSequence& gt, double scale) {
    // Full 2D kernels (outer products of the separable pair), direct
    // O(H*W*k^2) convolution with mirrored boundary.
    const double sigma = 1.4;
    const int r = int(std::ceil(3.0 * sigma));
    const int n = 2 * r + 1;
    std::vector<double> smooth(n), deriv(n);
    double ssum = 0, ramp = 0;
    for (int i = -r; i <= r; ++i) {
        double g = std::exp(-0.5 * i * i / (sigma * sigma));
        smooth[i + r] = g;
        deriv[i + r] = -double(i) * g;
        ssum += g;
        ramp += double(i) * double(i) * g;
    }
    for (auto& v : smooth) v /= ssum;
    for (auto& v : deriv) v /= ramp;

    std::vector<double> kx(std::size_t(n) * n), ky(std::size_t(n) * n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            kx[std::size_t(i) * n + j] = smooth[i] * deriv[j];  // d/dx: deriv horizontally
            ky[std::size_t(i) * n + j] = deriv[i] * smooth[j];
        }

    const int H = pred.alphas.h, W = pred.alphas.w;
    auto conv_at = [&](const Tensor4d& a, int t, const std::vector<double>& kern, int y, int x) {
        double s = 0;
        for (int i = -r; i <= r; ++i)
            for (int j = -r; j <= r; ++j)
                s += kern[std::size_t(i + r) * n + (j + r)] *
                     a(t, 0, mirror(y + i, H), mirror(x + j, W));
        return s;
    };

    double total = 0;
    for (int t = 0; t < pred.alphas.t; ++t)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double dxp = conv_at(pred.alphas, t, kx, y, x);
                double dxg = conv_at(gt.alphas, t, kx, y, x);
                double dyp = conv_at(pred.alphas, t, ky, y, x);
                double dyg = conv_at(gt.alphas, t, ky, y, x);
                total += (dxp - dxg) * (dxp - dxg) + (dyp - dyg) * (dyp - dyg);
            }
    return total * scale;
}

namespace {

// Union-find largest component of a binary mask (4-connectivity); the
// root with the smallest scan-order index wins size ties.
std::vector<std::uint8_t> largest_component_uf(const std::vector<std::uint8_t>& mask, int H,
                                               int W) {
    std::vector<int> parent(std::size_t(H) * W);
    std::iota(parent.begin(), parent.end(), 0);
    std::function<int(int)> find = [&](int x) {
        while (parent[x] != x) {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        return x;
    };
    auto unite = [&](int a, int b) {
        a = find(a);
        b = find(b);
        if (a == b) return;
        if (a < b)
            parent[b] = a;
        else
            parent[a] = b;
    };
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            int p = y * W + x;
            if (!mask[p]) continue;
            if (x + 1 < W && mask[p + 1]) unite(p, p + 1);
            if (y + 1 < H && mask[p + W]) unite(p, p + W);
        }
    std::vector<int> size(std::size_t(H) * W, 0);
    for (int p = 0; p < H * W; ++p)
        if (mask[p]) ++size[find(p)];
    int best = -1, best_size = 0;
    for (int p = 0; p < H * W; ++p)
        if (mask[p]) {
            int root = find(p);
            if (size[root] > best_size) {
                best_size = size[root];
                best = root;
            }
        }
    std::vector<std::uint8_t> out(std::size_t(H) * W, 0);
    if (best >= 0)
        for (int p = 0; p < H * W; ++p) out[p] = (mask[p] && find(p) == best) ? 1 : 0;
    return out;
}

}  // namespace

double conn_error(const AlphaSequence& pred, const AlphaSequence& gt, double scale) {
    const int H = pred.alphas.h, W = pred.alphas.w;
    double total = 0;
    for (int t = 0; t < pred.alphas.t; ++t) {
        std::vector<double> l_map(std::size_t(H) * W, -1.0);
        double prev = 0.0;
        for (int s = 1; s <= 9; ++s) {
            double theta = 0.1 * s;
            std::vector<std::uint8_t> inter(std::size_t(H) * W);
            for (int p = 0; p < H * W; ++p)
                inter[p] = (pred.alphas.data[t * std::int64_t(H) * W + p] >= theta &&
                            gt.alphas.data[t * std::int64_t(H) * W + p] >= theta)
                               ? 1
                               : 0;
            auto omega = largest_component_uf(inter, H, W);
            for (int p = 0; p < H * W; ++p)
                if (l_map[p] < 0 && !omega[p]) l_map[p] = prev;
            prev = theta;
        }
        for (int p = 0; p < H * W; ++p)
            if (l_map[p] < 0) l_map[p] = prev;
        for (int p = 0; p < H * W; ++p) {
            double dp = pred.alphas.data[t * std::int64_t(H) * W + p] - l_map[p];
            double dg = gt.alphas.data[t * std::int64_t(H) * W + p] - l_map[p];
            double phip = 1.0 - (dp >= 0.15 ? dp : 0.0);
            double phig = 1.0 - (dg >= 0.15 ? dg : 0.0);
            total += std::abs(phip - phig);
        }
    }
    return total * scale;
}

double dtssd(const AlphaSequence& pred, const AlphaSequence& gt, double scale) {
    const int T = pred.alphas.t, H = pred.alphas.h, W = pred.alphas.w;
    double acc = 0;
    std::int64_t count = 0;
    for (int t = 0; t + 1 < T; ++t)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double dp = pred.alphas(t + 1, 0, y, x) - pred.alphas(t, 0, y, x);
                double dg = gt.alphas(t + 1, 0, y, x) - gt.alphas(t, 0, y, x);
                acc += (dp - dg) * (dp - dg);
                ++count;
            }
    return std::sqrt(acc / double(count)) * scale;
}

}  // namespace flowmatte::oracle
