#pragma once

#include <optional>

#include "flowmatte/tensor.hpp"

namespace flowmatte {

/// Color sequence, values in [0, 1]. Tensor layout (T, 3, H, W).
struct VideoClip {
    Tensor4d frames;
    std::optional<double> fps;

    VideoClip() = default;
    explicit VideoClip(Tensor4d f, std::optional<double> fps_ = std::nullopt)
        : frames(std::move(f)), fps(fps_) {}

    int t() const { return frames.t; }
    int height() const { return frames.h; }
    int width() const { return frames.w; }
};

/// Per-pixel opacity sequence in [0, 1]. Tensor layout (T, 1, H, W).
struct AlphaSequence {
    Tensor4d alphas;

    AlphaSequence() = default;
    explicit AlphaSequence(Tensor4d a) : alphas(std::move(a)) {}

    int t() const { return alphas.t; }
    int height() const { return alphas.h; }
    int width() const { return alphas.w; }
};

struct CompositeSample {
    VideoClip fg;
    VideoClip bg;
    AlphaSequence alpha;
    VideoClip composite;
};

/// Throws RangeError when any value leaves [lo, hi] by more than slack.
void require_in_range(const Tensor4d& x, double lo, double hi, const char* what,
                      double slack = 1e-9);

/// Per-pixel over operator: out = alpha*fg + (1-alpha)*bg.
VideoClip composite(const VideoClip& fg, const VideoClip& bg, const AlphaSequence& alpha);

CompositeSample make_composite_sample(VideoClip fg, VideoClip bg, AlphaSequence alpha);

/// [0,1] -> [-1,1] (the codec's working range). Errors on out-of-range input.
Tensor4d to_codec_range(const Tensor4d& x);

/// [-1,1] -> [0,1], clamping anything the decoder overshoots.
Tensor4d from_codec_range(const Tensor4d& y);

/// Hard mask: 1 where alpha >= threshold (ties map to 1). Threshold in (0,1).
AlphaSequence binarize_alpha(const AlphaSequence& alpha, double threshold = 0.5);

}  // namespace flowmatte
