#include "flowmatte/matting.hpp"

namespace flowmatte {

void require_in_range(const Tensor4d& x, double lo, double hi, const char* what, double slack) {
    if (x.size() == 0) return;
    double mn = x.data.minCoeff();
    double mx = x.data.maxCoeff();
    if (mn < lo - slack || mx > hi + slack)
        throw RangeError(strf("%s: values [%g, %g] outside [%g, %g]", what, mn, mx, lo, hi));
}

VideoClip composite(const VideoClip& fg, const VideoClip& bg, const AlphaSequence& alpha) {
    require_same_shape(fg.frames, bg.frames, "composite(fg,bg)");
    if (alpha.alphas.t != fg.frames.t || alpha.alphas.h != fg.frames.h ||
        alpha.alphas.w != fg.frames.w) {
        Tensor4d ref(fg.frames.t, 1, fg.frames.h, fg.frames.w);
        require_same_shape(alpha.alphas, ref, "composite(alpha)");
    }
    require_in_range(fg.frames, 0.0, 1.0, "composite: fg");
    require_in_range(bg.frames, 0.0, 1.0, "composite: bg");
    require_in_range(alpha.alphas, 0.0, 1.0, "composite: alpha");

    Tensor4d out = fg.frames;
    const int T = out.t, C = out.c, H = out.h, W = out.w;
    for (int t = 0; t < T; ++t)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    double a = alpha.alphas(t, 0, y, x);
                    out(t, c, y, x) = a * fg.frames(t, c, y, x) + (1.0 - a) * bg.frames(t, c, y, x);
                }
    return VideoClip(std::move(out), fg.fps);
}

CompositeSample make_composite_sample(VideoClip fg, VideoClip bg, AlphaSequence alpha) {
    VideoClip comp = composite(fg, bg, alpha);
    return CompositeSample{std::move(fg), std::move(bg), std::move(alpha), std::move(comp)};
}

Tensor4d to_codec_range(const Tensor4d& x) {
    require_in_range(x, 0.0, 1.0, "to_codec_range");
    Tensor4d out = x;
    out.data = 2.0 * out.data - 1.0;
    return out;
}

Tensor4d from_codec_range(const Tensor4d& y) {
    Tensor4d out = y;
    out.data = ((out.data + 1.0) * 0.5).cwiseMax(0.0).cwiseMin(1.0);
    return out;
}

AlphaSequence binarize_alpha(const AlphaSequence& alpha, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0))
        throw ParamError(strf("binarize_alpha: threshold %g outside (0,1)", threshold));
    Tensor4d out = alpha.alphas;
    out.data = (out.data >= threshold).cast<double>();
    return AlphaSequence(std::move(out));
}

}  // namespace flowmatte
