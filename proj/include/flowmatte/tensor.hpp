#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <initializer_list>

#include "flowmatte/common.hpp"
#include "flowmatte/rng.hpp"

namespace flowmatte {

/// Dense rank-4 tensor (frames, channels, rows, cols) backed by a flat
/// Eigen array. Layout is t-major: index = ((t*C + c)*H + y)*W + x.
/// Whole-tensor arithmetic goes through `.data`, which is a plain Eigen
/// array and composes with Eigen expressions.
template <typename S>
struct Tensor4 {
    using Array = Eigen::Array<S, Eigen::Dynamic, 1>;

    int t = 0, c = 0, h = 0, w = 0;
    Array data;

    Tensor4() = default;
    Tensor4(int t_, int c_, int h_, int w_)
        : t(t_), c(c_), h(h_), w(w_), data(Array::Zero(std::int64_t(t_) * c_ * h_ * w_)) {}

    static Tensor4 zeros(int t, int c, int h, int w) { return Tensor4(t, c, h, w); }

    static Tensor4 constant(int t, int c, int h, int w, S v) {
        Tensor4 out(t, c, h, w);
        out.data.setConstant(v);
        return out;
    }

    static Tensor4 scalar(S v) { return constant(1, 1, 1, 1, v); }

    static Tensor4 random_normal(int t, int c, int h, int w, Rng& rng, S stddev = S(1)) {
        Tensor4 out(t, c, h, w);
        for (std::int64_t i = 0; i < out.size(); ++i) out.data[i] = S(rng.normal()) * stddev;
        return out;
    }

    static Tensor4 random_uniform(int t, int c, int h, int w, Rng& rng, S lo = S(0), S hi = S(1)) {
        Tensor4 out(t, c, h, w);
        for (std::int64_t i = 0; i < out.size(); ++i) out.data[i] = S(rng.uniform(lo, hi));
        return out;
    }

    std::int64_t size() const { return std::int64_t(t) * c * h * w; }
    std::int64_t frame_size() const { return std::int64_t(c) * h * w; }

    std::int64_t idx(int ti, int ci, int y, int x) const {
        return ((std::int64_t(ti) * c + ci) * h + y) * w + x;
    }
    S& operator()(int ti, int ci, int y, int x) { return data[idx(ti, ci, y, x)]; }
    S operator()(int ti, int ci, int y, int x) const { return data[idx(ti, ci, y, x)]; }

    bool same_shape(const Tensor4& o) const { return t == o.t && c == o.c && h == o.h && w == o.w; }

    bool all_finite() const { return data.isFinite().all(); }

    Tensor4 frame(int ti) const {
        Tensor4 out(1, c, h, w);
        out.data = data.segment(std::int64_t(ti) * frame_size(), frame_size());
        return out;
    }

    void set_frame(int ti, const Tensor4& f) {
        data.segment(std::int64_t(ti) * frame_size(), frame_size()) = f.data;
    }

    /// Shape-preserving copy with new dims; element count must match.
    Tensor4 reshaped(int t2, int c2, int h2, int w2) const {
        if (std::int64_t(t2) * c2 * h2 * w2 != size())
            throw ShapeError(strf("reshape: %lld elements cannot form %dx%dx%dx%d",
                                  static_cast<long long>(size()), t2, c2, h2, w2));
        Tensor4 out;
        out.t = t2;
        out.c = c2;
        out.h = h2;
        out.w = w2;
        out.data = data;
        return out;
    }
};

using Tensor4d = Tensor4<double>;
using Tensor4f = Tensor4<float>;

template <typename S>
inline void require_same_shape(const Tensor4<S>& a, const Tensor4<S>& b, const char* what) {
    if (a.same_shape(b)) return;
    const char* axis = a.t != b.t ? "frames(T)" : a.c != b.c ? "channels(C)" : a.h != b.h ? "rows(H)" : "cols(W)";
    throw ShapeError(strf("%s: shape mismatch on axis %s: (%d,%d,%d,%d) vs (%d,%d,%d,%d)", what,
                          axis, a.t, a.c, a.h, a.w, b.t, b.c, b.h, b.w));
}

template <typename S>
inline S max_abs(const Tensor4<S>& a) {
    return a.size() == 0 ? S(0) : a.data.abs().maxCoeff();
}

template <typename S>
inline S max_abs_diff(const Tensor4<S>& a, const Tensor4<S>& b) {
    require_same_shape(a, b, "max_abs_diff");
    return a.size() == 0 ? S(0) : (a.data - b.data).abs().maxCoeff();
}

template <typename S>
inline S mean_abs_diff(const Tensor4<S>& a, const Tensor4<S>& b) {
    require_same_shape(a, b, "mean_abs_diff");
    return a.size() == 0 ? S(0) : (a.data - b.data).abs().mean();
}

template <typename S>
inline std::uint64_t checksum(const Tensor4<S>& a) {
    std::uint64_t head[4] = {std::uint64_t(a.t), std::uint64_t(a.c), std::uint64_t(a.h),
                             std::uint64_t(a.w)};
    std::uint64_t hsh = fnv1a(head, sizeof(head));
    return fnv1a(a.data.data(), std::size_t(a.size()) * sizeof(S), hsh);
}

}  // namespace flowmatte
