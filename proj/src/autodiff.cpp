#include "flowmatte/autodiff.hpp"

#include <malloc.h>

#include <cmath>

namespace flowmatte::ad {

namespace {

// Training rebuilds multi-megabyte im2col buffers every step; keep those
// allocations on the heap instead of mmap/munmap round trips.
struct MallocTuning {
    MallocTuning() {
        mallopt(M_MMAP_THRESHOLD, 1 << 30);
        mallopt(M_TRIM_THRESHOLD, 1 << 30);
    }
} malloc_tuning;

}  // namespace

using Eigen::MatrixXd;
using RowMajorMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using RowMajorMutMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

int reflect_index(int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - i - 1;
    }
    return i;
}

int Tape::push(Tensor4d value, bool needs_grad, std::function<void(Tape&, int)> back) {
    Node n;
    n.owned = std::move(value);
    n.needs_grad = grad_enabled && needs_grad;
    if (n.needs_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return int(nodes_.size()) - 1;
}

Tensor4d& Tape::grad_of(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) {
        const Tensor4d& v = val_of(id);
        n.grad = Tensor4d::zeros(v.t, v.c, v.h, v.w);
    }
    return n.grad;
}

Var Tape::constant(Tensor4d v) {
    return Var{push(std::move(v), false, nullptr)};
}

Var Tape::input(Tensor4d v, bool needs_grad) {
    return Var{push(std::move(v), needs_grad, nullptr)};
}

Var Tape::param(Parameter& p) {
    Node n;
    n.param = &p;
    // Frozen parameters take no weight gradients; gradients still flow
    // through ops that read them (e.g. a frozen decoder passes dL/dz).
    n.needs_grad = grad_enabled && p.trainable;
    Parameter* pp = &p;
    n.back = [pp](Tape& t, int id) { pp->grad.data += t.grad_of(id).data; };
    nodes_.push_back(std::move(n));
    return Var{int(nodes_.size()) - 1};
}

void Tape::backward(Var loss) {
    const Tensor4d& lv = val_of(loss.id);
    if (lv.size() != 1) throw ShapeError("backward: loss must be scalar-shaped");
    grad_of(loss.id).data.setConstant(1.0);
    for (int id = loss.id; id >= 0; --id) {
        Node& n = nodes_[id];
        if (!n.needs_grad || !n.back) continue;
        if (n.grad.size() == 0) continue;  // no downstream contribution
        n.back(*this, id);
    }
}

namespace {

bool wants(const Tape& t, Var v) {
    return const_cast<Tape&>(t).node(v.id).needs_grad;
}

}  // namespace

Var add_scaled(Tape& t, Var a, Var b, double sa, double sb) {
    const Tensor4d& av = t.value(a);
    const Tensor4d& bv = t.value(b);
    require_same_shape(av, bv, "add_scaled");
    Tensor4d out = av;
    out.data = sa * av.data + sb * bv.data;
    bool ng = wants(t, a) || wants(t, b);
    int aid = a.id, bid = b.id;
    return Var{t.push(std::move(out), ng, [aid, bid, sa, sb](Tape& tp, int id) {
        const Tensor4d& g = tp.grad_of(id);
        if (tp.node(aid).needs_grad) tp.grad_of(aid).data += sa * g.data;
        if (tp.node(bid).needs_grad) tp.grad_of(bid).data += sb * g.data;
    })};
}

Var add(Tape& t, Var a, Var b) { return add_scaled(t, a, b, 1.0, 1.0); }
Var sub(Tape& t, Var a, Var b) { return add_scaled(t, a, b, 1.0, -1.0); }

Var scale(Tape& t, Var a, double s) {
    const Tensor4d& av = t.value(a);
    Tensor4d out = av;
    out.data *= s;
    int aid = a.id;
    return Var{t.push(std::move(out), wants(t, a), [aid, s](Tape& tp, int id) {
        if (tp.node(aid).needs_grad) tp.grad_of(aid).data += s * tp.grad_of(id).data;
    })};
}

Var silu(Tape& t, Var a) {
    const Tensor4d& av = t.value(a);
    Tensor4d out = av;
    out.data = av.data / (1.0 + (-av.data).exp());
    int aid = a.id;
    return Var{t.push(std::move(out), wants(t, a), [aid](Tape& tp, int id) {
        if (!tp.node(aid).needs_grad) return;
        const auto& x = tp.val_of(aid).data;
        auto sig = 1.0 / (1.0 + (-x).exp());
        tp.grad_of(aid).data += tp.grad_of(id).data * (sig * (1.0 + x * (1.0 - sig)));
    })};
}

Var concat_c(Tape& t, Var a, Var b) {
    const Tensor4d& av = t.value(a);
    const Tensor4d& bv = t.value(b);
    if (av.t != bv.t || av.h != bv.h || av.w != bv.w)
        throw ShapeError(strf("concat_c: frame geometry mismatch (%d,%d,%d) vs (%d,%d,%d)", av.t,
                              av.h, av.w, bv.t, bv.h, bv.w));
    Tensor4d out(av.t, av.c + bv.c, av.h, av.w);
    const std::int64_t fa = av.frame_size(), fb = bv.frame_size();
    for (int ti = 0; ti < av.t; ++ti) {
        out.data.segment(std::int64_t(ti) * (fa + fb), fa) = av.data.segment(ti * fa, fa);
        out.data.segment(std::int64_t(ti) * (fa + fb) + fa, fb) = bv.data.segment(ti * fb, fb);
    }
    int aid = a.id, bid = b.id;
    bool ng = wants(t, a) || wants(t, b);
    return Var{t.push(std::move(out), ng, [aid, bid, fa, fb](Tape& tp, int id) {
        const Tensor4d& g = tp.grad_of(id);
        for (int ti = 0; ti < g.t; ++ti) {
            if (tp.node(aid).needs_grad)
                tp.grad_of(aid).data.segment(ti * fa, fa) +=
                    g.data.segment(std::int64_t(ti) * (fa + fb), fa);
            if (tp.node(bid).needs_grad)
                tp.grad_of(bid).data.segment(ti * fb, fb) +=
                    g.data.segment(std::int64_t(ti) * (fa + fb) + fa, fb);
        }
    })};
}

Var repeat_c(Tape& t, Var a, int reps) {
    const Tensor4d& av = t.value(a);
    Tensor4d out(av.t, av.c * reps, av.h, av.w);
    const std::int64_t fs = av.frame_size();
    for (int ti = 0; ti < av.t; ++ti)
        for (int r = 0; r < reps; ++r)
            out.data.segment((std::int64_t(ti) * reps + r) * fs, fs) = av.data.segment(ti * fs, fs);
    int aid = a.id;
    return Var{t.push(std::move(out), wants(t, a), [aid, reps, fs](Tape& tp, int id) {
        if (!tp.node(aid).needs_grad) return;
        const Tensor4d& g = tp.grad_of(id);
        Tensor4d& da = tp.grad_of(aid);
        for (int ti = 0; ti < da.t; ++ti)
            for (int r = 0; r < reps; ++r)
                da.data.segment(ti * fs, fs) += g.data.segment((std::int64_t(ti) * reps + r) * fs, fs);
    })};
}

Var mean_c(Tape& t, Var a) {
    const Tensor4d& av = t.value(a);
    Tensor4d out(av.t, 1, av.h, av.w);
    const int C = av.c;
    for (int ti = 0; ti < av.t; ++ti)
        for (int y = 0; y < av.h; ++y)
            for (int x = 0; x < av.w; ++x) {
                double s = 0;
                for (int c = 0; c < C; ++c) s += av(ti, c, y, x);
                out(ti, 0, y, x) = s / C;
            }
    int aid = a.id;
    return Var{t.push(std::move(out), wants(t, a), [aid, C](Tape& tp, int id) {
        if (!tp.node(aid).needs_grad) return;
        const Tensor4d& g = tp.grad_of(id);
        Tensor4d& da = tp.grad_of(aid);
        for (int ti = 0; ti < da.t; ++ti)
            for (int y = 0; y < da.h; ++y)
                for (int x = 0; x < da.w; ++x) {
                    double gv = g(ti, 0, y, x) / C;
                    for (int c = 0; c < C; ++c) da(ti, c, y, x) += gv;
                }
    })};
}

Var reshape(Tape& t, Var a, int t2, int c2, int h2, int w2) {
    Tensor4d out = t.value(a).reshaped(t2, c2, h2, w2);
    int aid = a.id;
    return Var{t.push(std::move(out), wants(t, a), [aid](Tape& tp, int id) {
        if (tp.node(aid).needs_grad) tp.grad_of(aid).data += tp.grad_of(id).data;
    })};
}

Var nearest_up2(Tape& t, Var a) {
    const Tensor4d& av = t.value(a);
    Tensor4d out(av.t, av.c, av.h * 2, av.w * 2);
    for (int ti = 0; ti < av.t; ++ti)
        for (int c = 0; c < av.c; ++c)
            for (int y = 0; y < av.h; ++y)
                for (int x = 0; x < av.w; ++x) {
                    double v = av(ti, c, y, x);
                    out(ti, c, 2 * y, 2 * x) = v;
                    out(ti, c, 2 * y, 2 * x + 1) = v;
                    out(ti, c, 2 * y + 1, 2 * x) = v;
                    out(ti, c, 2 * y + 1, 2 * x + 1) = v;
                }
    int aid = a.id;
    return Var{t.push(std::move(out), wants(t, a), [aid](Tape& tp, int id) {
        if (!tp.node(aid).needs_grad) return;
        const Tensor4d& g = tp.grad_of(id);
        Tensor4d& da = tp.grad_of(aid);
        for (int ti = 0; ti < da.t; ++ti)
            for (int c = 0; c < da.c; ++c)
                for (int y = 0; y < da.h; ++y)
                    for (int x = 0; x < da.w; ++x)
                        da(ti, c, y, x) += g(ti, c, 2 * y, 2 * x) + g(ti, c, 2 * y, 2 * x + 1) +
                                           g(ti, c, 2 * y + 1, 2 * x) + g(ti, c, 2 * y + 1, 2 * x + 1);
    })};
}

Var zero_stuff2(Tape& t, Var a) {
    const Tensor4d& av = t.value(a);
    Tensor4d out(av.t, av.c, av.h * 2, av.w * 2);
    for (int ti = 0; ti < av.t; ++ti)
        for (int c = 0; c < av.c; ++c)
            for (int y = 0; y < av.h; ++y)
                for (int x = 0; x < av.w; ++x) out(ti, c, 2 * y, 2 * x) = av(ti, c, y, x);
    int aid = a.id;
    return Var{t.push(std::move(out), wants(t, a), [aid](Tape& tp, int id) {
        if (!tp.node(aid).needs_grad) return;
        const Tensor4d& g = tp.grad_of(id);
        Tensor4d& da = tp.grad_of(aid);
        for (int ti = 0; ti < da.t; ++ti)
            for (int c = 0; c < da.c; ++c)
                for (int y = 0; y < da.h; ++y)
                    for (int x = 0; x < da.w; ++x) da(ti, c, y, x) += g(ti, c, 2 * y, 2 * x);
    })};
}

Var decode_range01(Tape& t, Var a) {
    const Tensor4d& av = t.value(a);
    Tensor4d out = av;
    out.data = ((av.data + 1.0) * 0.5).cwiseMax(0.0).cwiseMin(1.0);
    int aid = a.id;
    return Var{t.push(std::move(out), wants(t, a), [aid](Tape& tp, int id) {
        if (!tp.node(aid).needs_grad) return;
        const auto& x = tp.val_of(aid).data;
        auto inside = (x > -1.0 && x < 1.0).cast<double>();
        tp.grad_of(aid).data += tp.grad_of(id).data * inside * 0.5;
    })};
}

Var fwd_diff_x(Tape& t, Var a) {
    const Tensor4d& av = t.value(a);
    Tensor4d out(av.t, av.c, av.h, av.w);
    for (int ti = 0; ti < av.t; ++ti)
        for (int c = 0; c < av.c; ++c)
            for (int y = 0; y < av.h; ++y)
                for (int x = 0; x + 1 < av.w; ++x)
                    out(ti, c, y, x) = av(ti, c, y, x + 1) - av(ti, c, y, x);
    int aid = a.id;
    return Var{t.push(std::move(out), wants(t, a), [aid](Tape& tp, int id) {
        if (!tp.node(aid).needs_grad) return;
        const Tensor4d& g = tp.grad_of(id);
        Tensor4d& da = tp.grad_of(aid);
        for (int ti = 0; ti < da.t; ++ti)
            for (int c = 0; c < da.c; ++c)
                for (int y = 0; y < da.h; ++y)
                    for (int x = 0; x + 1 < da.w; ++x) {
                        da(ti, c, y, x + 1) += g(ti, c, y, x);
                        da(ti, c, y, x) -= g(ti, c, y, x);
                    }
    })};
}

Var fwd_diff_y(Tape& t, Var a) {
    const Tensor4d& av = t.value(a);
    Tensor4d out(av.t, av.c, av.h, av.w);
    for (int ti = 0; ti < av.t; ++ti)
        for (int c = 0; c < av.c; ++c)
            for (int y = 0; y + 1 < av.h; ++y)
                for (int x = 0; x < av.w; ++x)
                    out(ti, c, y, x) = av(ti, c, y + 1, x) - av(ti, c, y, x);
    int aid = a.id;
    return Var{t.push(std::move(out), wants(t, a), [aid](Tape& tp, int id) {
        if (!tp.node(aid).needs_grad) return;
        const Tensor4d& g = tp.grad_of(id);
        Tensor4d& da = tp.grad_of(aid);
        for (int ti = 0; ti < da.t; ++ti)
            for (int c = 0; c < da.c; ++c)
                for (int y = 0; y + 1 < da.h; ++y)
                    for (int x = 0; x < da.w; ++x) {
                        da(ti, c, y + 1, x) += g(ti, c, y, x);
                        da(ti, c, y, x) -= g(ti, c, y, x);
                    }
    })};
}

Var crop_hw(Tape& t, Var a, int h, int w) {
    const Tensor4d& av = t.value(a);
    if (h > av.h || w > av.w)
        throw ShapeError(strf("crop_hw: %dx%d exceeds %dx%d", h, w, av.h, av.w));
    Tensor4d out(av.t, av.c, h, w);
    for (int ti = 0; ti < av.t; ++ti)
        for (int c = 0; c < av.c; ++c)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) out(ti, c, y, x) = av(ti, c, y, x);
    int aid = a.id;
    return Var{t.push(std::move(out), wants(t, a), [aid, h, w](Tape& tp, int id) {
        if (!tp.node(aid).needs_grad) return;
        const Tensor4d& g = tp.grad_of(id);
        Tensor4d& da = tp.grad_of(aid);
        for (int ti = 0; ti < g.t; ++ti)
            for (int c = 0; c < g.c; ++c)
                for (int y = 0; y < h; ++y)
                    for (int x = 0; x < w; ++x) da(ti, c, y, x) += g(ti, c, y, x);
    })};
}

namespace {

// Gathers all frames into a (cin*k*k) x (T*ho*wo) column matrix.
MatrixXd im2col(const Tensor4d& x, int k, int stride, int pad, PadMode mode, int ho, int wo) {
    const int T = x.t, C = x.c, H = x.h, W = x.w;
    MatrixXd col(C * k * k, std::int64_t(T) * ho * wo);
    col.setZero();
    for (int ti = 0; ti < T; ++ti)
        for (int yo = 0; yo < ho; ++yo)
            for (int xo = 0; xo < wo; ++xo) {
                std::int64_t j = (std::int64_t(ti) * ho + yo) * wo + xo;
                for (int ci = 0; ci < C; ++ci)
                    for (int ky = 0; ky < k; ++ky) {
                        int yi = yo * stride - pad + ky;
                        if (mode == PadMode::Reflect) yi = reflect_index(yi, H);
                        for (int kx = 0; kx < k; ++kx) {
                            int xi = xo * stride - pad + kx;
                            if (mode == PadMode::Reflect) xi = reflect_index(xi, W);
                            int r = (ci * k + ky) * k + kx;
                            if (yi >= 0 && yi < H && xi >= 0 && xi < W)
                                col(r, j) = x(ti, ci, yi, xi);
                        }
                    }
            }
    return col;
}

void col2im_add(Tensor4d& dx, const MatrixXd& dcol, int k, int stride, int pad, PadMode mode,
                int ho, int wo) {
    const int T = dx.t, C = dx.c, H = dx.h, W = dx.w;
    for (int ti = 0; ti < T; ++ti)
        for (int yo = 0; yo < ho; ++yo)
            for (int xo = 0; xo < wo; ++xo) {
                std::int64_t j = (std::int64_t(ti) * ho + yo) * wo + xo;
                for (int ci = 0; ci < C; ++ci)
                    for (int ky = 0; ky < k; ++ky) {
                        int yi = yo * stride - pad + ky;
                        if (mode == PadMode::Reflect) yi = reflect_index(yi, H);
                        for (int kx = 0; kx < k; ++kx) {
                            int xi = xo * stride - pad + kx;
                            if (mode == PadMode::Reflect) xi = reflect_index(xi, W);
                            if (yi >= 0 && yi < H && xi >= 0 && xi < W)
                                dx(ti, ci, yi, xi) += dcol((ci * k + ky) * k + kx, j);
                        }
                    }
            }
}

}  // namespace

Var conv2d(Tape& t, Var x, Var w, Var b, int stride, int pad, PadMode mode) {
    const Tensor4d& xv = t.value(x);
    const Tensor4d& wv = t.value(w);
    const Tensor4d& bv = t.value(b);
    const int k = wv.h;
    if (wv.w != k) throw ShapeError("conv2d: kernel must be square");
    if (wv.c != xv.c)
        throw ShapeError(strf("conv2d: weight expects %d input channels, got %d", wv.c, xv.c));
    const int cout = wv.t;
    if (bv.size() != cout) throw ShapeError("conv2d: bias size mismatch");
    if (stride < 1) throw ParamError("conv2d: stride must be >= 1");
    const int ho = (xv.h + 2 * pad - k) / stride + 1;
    const int wo = (xv.w + 2 * pad - k) / stride + 1;
    if (ho < 1 || wo < 1)
        throw ShapeError(strf("conv2d: %dx%d input too small for k=%d pad=%d", xv.h, xv.w, k, pad));

    MatrixXd col = im2col(xv, k, stride, pad, mode, ho, wo);
    RowMajorMap wmat(wv.data.data(), cout, wv.c * k * k);
    MatrixXd outm = wmat * col;  // (cout, T*ho*wo)

    Tensor4d out(xv.t, cout, ho, wo);
    for (int ti = 0; ti < xv.t; ++ti)
        for (int co = 0; co < cout; ++co)
            for (int yo = 0; yo < ho; ++yo)
                for (int xo = 0; xo < wo; ++xo)
                    out(ti, co, yo, xo) =
                        outm(co, (std::int64_t(ti) * ho + yo) * wo + xo) + bv.data[co];

    int xid = x.id, wid = w.id, bid = b.id;
    bool ng = wants(t, x) || wants(t, w) || wants(t, b);
    return Var{t.push(std::move(out), ng, [=](Tape& tp, int id) {
        const Tensor4d& g = tp.grad_of(id);
        const Tensor4d& xval = tp.val_of(xid);
        const Tensor4d& wval = tp.val_of(wid);
        const int T = xval.t;
        MatrixXd gm(cout, std::int64_t(T) * ho * wo);
        for (int ti = 0; ti < T; ++ti)
            for (int co = 0; co < cout; ++co)
                for (int yo = 0; yo < ho; ++yo)
                    for (int xo = 0; xo < wo; ++xo)
                        gm(co, (std::int64_t(ti) * ho + yo) * wo + xo) = g(ti, co, yo, xo);

        if (tp.node(bid).needs_grad) {
            Tensor4d& db = tp.grad_of(bid);
            Eigen::VectorXd rows = gm.rowwise().sum();
            for (int co = 0; co < cout; ++co) db.data[co] += rows[co];
        }
        if (tp.node(wid).needs_grad) {
            MatrixXd col2 = im2col(xval, k, stride, pad, mode, ho, wo);
            MatrixXd dw = gm * col2.transpose();  // (cout, cin*k*k)
            Tensor4d& dwt = tp.grad_of(wid);
            RowMajorMutMap dwmap(dwt.data.data(), cout, wval.c * k * k);
            dwmap += dw;
        }
        if (tp.node(xid).needs_grad) {
            RowMajorMap wmat2(wval.data.data(), cout, wval.c * k * k);
            MatrixXd dcol = wmat2.transpose() * gm;  // (cin*k*k, T*ho*wo)
            col2im_add(tp.grad_of(xid), dcol, k, stride, pad, mode, ho, wo);
        }
    })};
}

Var conv1d_time(Tape& t, Var x, Var w, Var b) {
    const Tensor4d& xv = t.value(x);
    const Tensor4d& wv = t.value(w);   // (cout, cin, K, 1)
    const Tensor4d& bv = t.value(b);
    const int K = wv.h;
    if (K % 2 == 0) throw ParamError("conv1d_time: kernel must be odd");
    if (wv.c != xv.c) throw ShapeError("conv1d_time: channel mismatch");
    const int cout = wv.t, cin = xv.c, T = xv.t, H = xv.h, W = xv.w;
    if (bv.size() != cout) throw ShapeError("conv1d_time: bias size mismatch");
    const int r = K / 2;
    const std::int64_t npix = std::int64_t(T) * H * W;

    // X(ci, (t,y,x)) layout for per-tap GEMMs.
    MatrixXd X(cin, npix);
    for (int ti = 0; ti < T; ++ti)
        for (int ci = 0; ci < cin; ++ci)
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx)
                    X(ci, (std::int64_t(ti) * H + y) * W + xx) = xv(ti, ci, y, xx);

    MatrixXd outm = MatrixXd::Zero(cout, npix);
    MatrixXd Xk(cin, npix);
    for (int kk = 0; kk < K; ++kk) {
        for (int ti = 0; ti < T; ++ti) {
            int src = reflect_index(ti + kk - r, T);
            Xk.middleCols(std::int64_t(ti) * H * W, std::int64_t(H) * W) =
                X.middleCols(std::int64_t(src) * H * W, std::int64_t(H) * W);
        }
        MatrixXd Wk(cout, cin);
        for (int co = 0; co < cout; ++co)
            for (int ci = 0; ci < cin; ++ci) Wk(co, ci) = wv(co, ci, kk, 0);
        outm.noalias() += Wk * Xk;
    }

    Tensor4d out(T, cout, H, W);
    for (int ti = 0; ti < T; ++ti)
        for (int co = 0; co < cout; ++co)
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx)
                    out(ti, co, y, xx) = outm(co, (std::int64_t(ti) * H + y) * W + xx) + bv.data[co];

    int xid = x.id, wid = w.id, bid = b.id;
    bool ng = wants(t, x) || wants(t, w) || wants(t, b);
    return Var{t.push(std::move(out), ng, [=](Tape& tp, int id) {
        const Tensor4d& g = tp.grad_of(id);
        const Tensor4d& xval = tp.val_of(xid);
        const Tensor4d& wval = tp.val_of(wid);
        MatrixXd gm(cout, npix);
        for (int ti = 0; ti < T; ++ti)
            for (int co = 0; co < cout; ++co)
                for (int y = 0; y < H; ++y)
                    for (int xx = 0; xx < W; ++xx)
                        gm(co, (std::int64_t(ti) * H + y) * W + xx) = g(ti, co, y, xx);

        if (tp.node(bid).needs_grad) {
            Tensor4d& db = tp.grad_of(bid);
            Eigen::VectorXd rows = gm.rowwise().sum();
            for (int co = 0; co < cout; ++co) db.data[co] += rows[co];
        }

        MatrixXd X2(cin, npix);
        for (int ti = 0; ti < T; ++ti)
            for (int ci = 0; ci < cin; ++ci)
                for (int y = 0; y < H; ++y)
                    for (int xx = 0; xx < W; ++xx)
                        X2(ci, (std::int64_t(ti) * H + y) * W + xx) = xval(ti, ci, y, xx);

        MatrixXd dX = MatrixXd::Zero(cin, npix);
        MatrixXd Xk2(cin, npix);
        for (int kk = 0; kk < K; ++kk) {
            if (tp.node(wid).needs_grad) {
                for (int ti = 0; ti < T; ++ti) {
                    int src = reflect_index(ti + kk - r, T);
                    Xk2.middleCols(std::int64_t(ti) * H * W, std::int64_t(H) * W) =
                        X2.middleCols(std::int64_t(src) * H * W, std::int64_t(H) * W);
                }
                MatrixXd dWk = gm * Xk2.transpose();  // (cout, cin)
                Tensor4d& dwt = tp.grad_of(wid);
                for (int co = 0; co < cout; ++co)
                    for (int ci = 0; ci < cin; ++ci) dwt(co, ci, kk, 0) += dWk(co, ci);
            }
            if (tp.node(xid).needs_grad) {
                MatrixXd Wk(cout, cin);
                for (int co = 0; co < cout; ++co)
                    for (int ci = 0; ci < cin; ++ci) Wk(co, ci) = wval(co, ci, kk, 0);
                MatrixXd dXk = Wk.transpose() * gm;  // (cin, npix)
                for (int ti = 0; ti < T; ++ti) {
                    int src = reflect_index(ti + kk - r, T);
                    dX.middleCols(std::int64_t(src) * H * W, std::int64_t(H) * W) +=
                        dXk.middleCols(std::int64_t(ti) * H * W, std::int64_t(H) * W);
                }
            }
        }
        if (tp.node(xid).needs_grad) {
            Tensor4d& dx = tp.grad_of(xid);
            for (int ti = 0; ti < T; ++ti)
                for (int ci = 0; ci < cin; ++ci)
                    for (int y = 0; y < H; ++y)
                        for (int xx = 0; xx < W; ++xx)
                            dx(ti, ci, y, xx) += dX(ci, (std::int64_t(ti) * H + y) * W + xx);
        }
    })};
}

Var group_norm(Tape& t, Var x, int groups, double eps) {
    const Tensor4d& xv = t.value(x);
    if (xv.c % groups != 0)
        throw ShapeError(strf("group_norm: %d channels not divisible by %d groups", xv.c, groups));
    const int cg = xv.c / groups;
    const std::int64_t n = std::int64_t(cg) * xv.h * xv.w;
    Tensor4d out(xv.t, xv.c, xv.h, xv.w);
    std::vector<double> inv_std(std::size_t(xv.t) * groups);
    for (int ti = 0; ti < xv.t; ++ti)
        for (int g = 0; g < groups; ++g) {
            std::int64_t base = xv.idx(ti, g * cg, 0, 0);
            auto seg = xv.data.segment(base, n);
            double mu = seg.mean();
            double var = (seg - mu).square().mean();
            double is = 1.0 / std::sqrt(var + eps);
            inv_std[std::size_t(ti) * groups + g] = is;
            out.data.segment(base, n) = (seg - mu) * is;
        }
    int xid = x.id;
    return Var{t.push(std::move(out), wants(t, x), [xid, groups, cg, n, inv_std](Tape& tp, int id) {
        if (!tp.node(xid).needs_grad) return;
        const Tensor4d& g = tp.grad_of(id);
        const Tensor4d& y = tp.val_of(id);  // normalized output
        Tensor4d& dx = tp.grad_of(xid);
        for (int ti = 0; ti < g.t; ++ti)
            for (int gi = 0; gi < groups; ++gi) {
                std::int64_t base = g.idx(ti, gi * cg, 0, 0);
                auto gy = g.data.segment(base, n);
                auto yy = y.data.segment(base, n);
                double mean_g = gy.mean();
                double mean_gy = (gy * yy).mean();
                double is = inv_std[std::size_t(ti) * groups + gi];
                dx.data.segment(base, n) += is * (gy - mean_g - yy * mean_gy);
            }
    })};
}

Var linear(Tape& t, Var x, Var w, Var b) {
    const Tensor4d& xv = t.value(x);
    const Tensor4d& wv = t.value(w);  // (dout, din, 1, 1)
    const Tensor4d& bv = t.value(b);  // (1, dout, 1, 1)
    const int din = wv.c, dout = wv.t;
    if (xv.size() != din)
        throw ShapeError(strf("linear: input size %lld != %d", (long long)xv.size(), din));
    if (bv.size() != dout) throw ShapeError("linear: bias size mismatch");
    Tensor4d out(1, dout, 1, 1);
    RowMajorMap wmat(wv.data.data(), dout, din);
    Eigen::Map<const Eigen::VectorXd> xvec(xv.data.data(), din);
    Eigen::Map<Eigen::VectorXd> ovec(out.data.data(), dout);
    ovec = wmat * xvec;
    for (int i = 0; i < dout; ++i) out.data[i] += bv.data[i];
    int xid = x.id, wid = w.id, bid = b.id;
    bool ng = wants(t, x) || wants(t, w) || wants(t, b);
    return Var{t.push(std::move(out), ng, [xid, wid, bid, din, dout](Tape& tp, int id) {
        const Tensor4d& g = tp.grad_of(id);
        Eigen::Map<const Eigen::VectorXd> gvec(g.data.data(), dout);
        if (tp.node(bid).needs_grad) tp.grad_of(bid).data += g.data;
        if (tp.node(wid).needs_grad) {
            Eigen::Map<const Eigen::VectorXd> xvec(tp.val_of(xid).data.data(), din);
            RowMajorMutMap dwm(tp.grad_of(wid).data.data(), dout, din);
            dwm += gvec * xvec.transpose();
        }
        if (tp.node(xid).needs_grad) {
            RowMajorMap wmat(tp.val_of(wid).data.data(), dout, din);
            Eigen::Map<Eigen::VectorXd> dxv(tp.grad_of(xid).data.data(), din);
            dxv += wmat.transpose() * gvec;
        }
    })};
}

Var film(Tape& t, Var x, Var scale_shift) {
    const Tensor4d& xv = t.value(x);
    const Tensor4d& sv = t.value(scale_shift);
    const int C = xv.c;
    if (sv.size() != 2 * C)
        throw ShapeError(strf("film: scale_shift has %lld values, expected %d",
                              (long long)sv.size(), 2 * C));
    Tensor4d out = xv;
    for (int ti = 0; ti < xv.t; ++ti)
        for (int c = 0; c < C; ++c) {
            double s = 1.0 + sv.data[c];
            double o = sv.data[C + c];
            std::int64_t base = xv.idx(ti, c, 0, 0);
            std::int64_t m = std::int64_t(xv.h) * xv.w;
            out.data.segment(base, m) = xv.data.segment(base, m) * s + o;
        }
    int xid = x.id, sid = scale_shift.id;
    bool ng = wants(t, x) || wants(t, scale_shift);
    return Var{t.push(std::move(out), ng, [xid, sid, C](Tape& tp, int id) {
        const Tensor4d& g = tp.grad_of(id);
        const Tensor4d& xval = tp.val_of(xid);
        const Tensor4d& sval = tp.val_of(sid);
        std::int64_t m = std::int64_t(g.h) * g.w;
        if (tp.node(xid).needs_grad) {
            Tensor4d& dx = tp.grad_of(xid);
            for (int ti = 0; ti < g.t; ++ti)
                for (int c = 0; c < C; ++c) {
                    std::int64_t base = g.idx(ti, c, 0, 0);
                    dx.data.segment(base, m) += g.data.segment(base, m) * (1.0 + sval.data[c]);
                }
        }
        if (tp.node(sid).needs_grad) {
            Tensor4d& ds = tp.grad_of(sid);
            for (int ti = 0; ti < g.t; ++ti)
                for (int c = 0; c < C; ++c) {
                    std::int64_t base = g.idx(ti, c, 0, 0);
                    ds.data[c] += (g.data.segment(base, m) * xval.data.segment(base, m)).sum();
                    ds.data[C + c] += g.data.segment(base, m).sum();
                }
        }
    })};
}

Var matmul2d(Tape& t, Var a, Var b) {
    const Tensor4d& av = t.value(a);  // (M, K, 1, 1)
    const Tensor4d& bv = t.value(b);  // (K, N, 1, 1)
    if (av.h != 1 || av.w != 1 || bv.h != 1 || bv.w != 1 || av.c != bv.t)
        throw ShapeError("matmul2d: expects (M,K,1,1) x (K,N,1,1)");
    const int M = av.t, K = av.c, N = bv.c;
    Tensor4d out(M, N, 1, 1);
    RowMajorMap am(av.data.data(), M, K);
    RowMajorMap bm(bv.data.data(), K, N);
    RowMajorMutMap om(out.data.data(), M, N);
    om = am * bm;
    int aid = a.id, bid = b.id;
    bool ng = wants(t, a) || wants(t, b);
    return Var{t.push(std::move(out), ng, [aid, bid, M, K, N](Tape& tp, int id) {
        RowMajorMap gm(tp.grad_of(id).data.data(), M, N);
        if (tp.node(aid).needs_grad) {
            RowMajorMap bm(tp.val_of(bid).data.data(), K, N);
            RowMajorMutMap da(tp.grad_of(aid).data.data(), M, K);
            da += gm * bm.transpose();
        }
        if (tp.node(bid).needs_grad) {
            RowMajorMap am(tp.val_of(aid).data.data(), M, K);
            RowMajorMutMap db(tp.grad_of(bid).data.data(), K, N);
            db += am.transpose() * gm;
        }
    })};
}

Var mean_all(Tape& t, Var a) {
    const Tensor4d& av = t.value(a);
    const double n = double(av.size());
    Tensor4d out = Tensor4d::scalar(av.data.mean());
    int aid = a.id;
    return Var{t.push(std::move(out), wants(t, a), [aid, n](Tape& tp, int id) {
        if (tp.node(aid).needs_grad)
            tp.grad_of(aid).data += tp.grad_of(id).data[0] / n;
    })};
}

Var sum_squares(Tape& t, Var a) {
    const Tensor4d& av = t.value(a);
    Tensor4d out = Tensor4d::scalar(av.data.square().sum());
    int aid = a.id;
    return Var{t.push(std::move(out), wants(t, a), [aid](Tape& tp, int id) {
        if (tp.node(aid).needs_grad)
            tp.grad_of(aid).data += 2.0 * tp.grad_of(id).data[0] * tp.val_of(aid).data;
    })};
}

Var mse(Tape& t, Var a, Var b) {
    const Tensor4d& av = t.value(a);
    const Tensor4d& bv = t.value(b);
    require_same_shape(av, bv, "mse");
    const double n = double(av.size());
    Tensor4d out = Tensor4d::scalar((av.data - bv.data).square().mean());
    int aid = a.id, bid = b.id;
    bool ng = wants(t, a) || wants(t, b);
    return Var{t.push(std::move(out), ng, [aid, bid, n](Tape& tp, int id) {
        double g = tp.grad_of(id).data[0];
        auto diff = (tp.val_of(aid).data - tp.val_of(bid).data).eval();
        if (tp.node(aid).needs_grad) tp.grad_of(aid).data += (2.0 * g / n) * diff;
        if (tp.node(bid).needs_grad) tp.grad_of(bid).data -= (2.0 * g / n) * diff;
    })};
}

Var l1(Tape& t, Var a, Var b) {
    const Tensor4d& av = t.value(a);
    const Tensor4d& bv = t.value(b);
    require_same_shape(av, bv, "l1");
    const double n = double(av.size());
    Tensor4d out = Tensor4d::scalar((av.data - bv.data).abs().mean());
    int aid = a.id, bid = b.id;
    bool ng = wants(t, a) || wants(t, b);
    return Var{t.push(std::move(out), ng, [aid, bid, n](Tape& tp, int id) {
        double g = tp.grad_of(id).data[0];
        auto diff = (tp.val_of(aid).data - tp.val_of(bid).data).eval();
        auto sgn = ((diff > 0.0).cast<double>() - (diff < 0.0).cast<double>()).eval();
        if (tp.node(aid).needs_grad) tp.grad_of(aid).data += (g / n) * sgn;
        if (tp.node(bid).needs_grad) tp.grad_of(bid).data -= (g / n) * sgn;
    })};
}

}  // namespace flowmatte::ad
