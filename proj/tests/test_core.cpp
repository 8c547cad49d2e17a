#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "flowmatte/image_io.hpp"
#include "flowmatte/matting.hpp"
#include "flowmatte/rng.hpp"

using namespace flowmatte;
namespace fs = std::filesystem;

namespace {

VideoClip random_clip(Rng& rng, int T, int H, int W) {
    return VideoClip(Tensor4d::random_uniform(T, 3, H, W, rng));
}

AlphaSequence random_alpha(Rng& rng, int T, int H, int W) {
    return AlphaSequence(Tensor4d::random_uniform(T, 1, H, W, rng));
}

}  // namespace

TEST_CASE("composite identity cases") {
    Rng rng(11);
    auto fg = random_clip(rng, 2, 8, 8);
    auto bg = random_clip(rng, 2, 8, 8);

    auto ones = AlphaSequence(Tensor4d::constant(2, 1, 8, 8, 1.0));
    CHECK(max_abs_diff(composite(fg, bg, ones).frames, fg.frames) == 0.0);

    auto zeros = AlphaSequence(Tensor4d::zeros(2, 1, 8, 8));
    CHECK(max_abs_diff(composite(fg, bg, zeros).frames, bg.frames) == 0.0);
}

TEST_CASE("composite scalar hand evaluation") {
    auto fg = VideoClip(Tensor4d::constant(1, 3, 8, 8, 0.8));
    auto bg = VideoClip(Tensor4d::constant(1, 3, 8, 8, 0.2));
    auto a = AlphaSequence(Tensor4d::constant(1, 1, 8, 8, 0.5));
    auto out = composite(fg, bg, a);
    CHECK(out.frames(0, 0, 3, 3) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("composite shape mismatch names the axis") {
    Rng rng(3);
    auto fg = random_clip(rng, 2, 8, 8);
    auto bg = random_clip(rng, 2, 8, 10);
    auto a = random_alpha(rng, 2, 8, 8);
    CHECK_THROWS_WITH_AS(composite(fg, bg, a), doctest::Contains("cols(W)"), ShapeError);

    auto a2 = random_alpha(rng, 3, 8, 8);
    CHECK_THROWS_WITH_AS(composite(fg, fg, a2), doctest::Contains("frames(T)"), ShapeError);
}

TEST_CASE("composite is affine in alpha") {
    Rng rng(17);
    auto fg = random_clip(rng, 3, 8, 8);
    auto bg = random_clip(rng, 3, 8, 8);
    auto a = random_alpha(rng, 3, 8, 8);
    auto b = random_alpha(rng, 3, 8, 8);
    AlphaSequence mid(a.alphas);
    mid.alphas.data = 0.5 * (a.alphas.data + b.alphas.data);

    auto lhs = composite(fg, bg, mid).frames;
    Tensor4d rhs = composite(fg, bg, a).frames;
    rhs.data = 0.5 * (rhs.data + composite(fg, bg, b).frames.data);
    CHECK(max_abs_diff(lhs, rhs) < 1e-6);
}

TEST_CASE("composite swap symmetry") {
    Rng rng(19);
    auto fg = random_clip(rng, 2, 8, 8);
    auto bg = random_clip(rng, 2, 8, 8);
    auto a = random_alpha(rng, 2, 8, 8);
    Tensor4d lhs = composite(fg, bg, a).frames;
    lhs.data += composite(bg, fg, a).frames.data;
    Tensor4d rhs = fg.frames;
    rhs.data += bg.frames.data;
    CHECK(max_abs_diff(lhs, rhs) < 1e-6);
}

TEST_CASE("composite range preservation") {
    Rng rng(23);
    for (int trial = 0; trial < 20; ++trial) {
        auto out = composite(random_clip(rng, 2, 8, 8), random_clip(rng, 2, 8, 8),
                             random_alpha(rng, 2, 8, 8));
        CHECK(out.frames.data.minCoeff() >= -1e-7);
        CHECK(out.frames.data.maxCoeff() <= 1.0 + 1e-7);
    }
}

TEST_CASE("codec range endpoints and inverses") {
    Tensor4d x(1, 1, 1, 3);
    x.data << 0.0, 1.0, 0.5;
    Tensor4d y = to_codec_range(x);
    CHECK(y.data[0] == -1.0);
    CHECK(y.data[1] == 1.0);
    CHECK(y.data[2] == 0.0);
    CHECK(max_abs_diff(from_codec_range(y), x) == 0.0);

    Rng rng(5);
    Tensor4d r = Tensor4d::random_uniform(2, 3, 4, 4, rng);
    CHECK(max_abs_diff(from_codec_range(to_codec_range(r)), r) == 0.0);

    Tensor4d over = Tensor4d::constant(1, 1, 1, 1, 1.2);
    CHECK(from_codec_range(over).data[0] == 1.0);
    Tensor4d neg = Tensor4d::constant(1, 1, 1, 1, -1.0);
    CHECK(from_codec_range(neg).data[0] == 0.0);

    Tensor4d bad = Tensor4d::constant(1, 1, 1, 1, 1.5);
    CHECK_THROWS_AS(to_codec_range(bad), RangeError);
}

TEST_CASE("binarize_alpha") {
    auto hi = AlphaSequence(Tensor4d::constant(1, 1, 4, 4, 0.9));
    CHECK(binarize_alpha(hi, 0.5).alphas.data.minCoeff() == 1.0);
    auto lo = AlphaSequence(Tensor4d::constant(1, 1, 4, 4, 0.1));
    CHECK(binarize_alpha(lo, 0.5).alphas.data.maxCoeff() == 0.0);

    Tensor4d v(1, 1, 1, 3);
    v.data << 0.2, 0.5, 0.7;
    auto out = binarize_alpha(AlphaSequence(v), 0.5);
    CHECK(out.alphas.data[0] == 0.0);
    CHECK(out.alphas.data[1] == 1.0);  // ties map to 1
    CHECK(out.alphas.data[2] == 1.0);

    CHECK_THROWS_AS(binarize_alpha(hi, 0.0), ParamError);
    CHECK_THROWS_AS(binarize_alpha(hi, 1.0), ParamError);
}

TEST_CASE("make_composite_sample consistency") {
    Rng rng(31);
    auto s = make_composite_sample(random_clip(rng, 2, 8, 8), random_clip(rng, 2, 8, 8),
                                   random_alpha(rng, 2, 8, 8));
    CHECK(max_abs_diff(s.composite.frames, composite(s.fg, s.bg, s.alpha).frames) < 1e-6);
}

TEST_CASE("png clip round trip within quantization") {
    Rng rng(41);
    auto rgb = random_clip(rng, 3, 16, 12);
    auto alpha = random_alpha(rng, 3, 16, 12);
    fs::path dir = fs::temp_directory_path() / "flowmatte_io_test";
    fs::remove_all(dir);
    write_clip(dir, rgb, alpha);

    auto rgb2 = read_clip_rgb(dir);
    auto alpha2 = read_clip_alpha(dir);
    CHECK(rgb2.t() == 3);
    CHECK(rgb2.height() == 16);
    CHECK(rgb2.width() == 12);
    // 8-bit quantization: error at most 1/510 per value
    CHECK(max_abs_diff(rgb2.frames, rgb.frames) <= 0.5 / 255.0 + 1e-12);
    CHECK(max_abs_diff(alpha2.alphas, alpha.alphas) <= 0.5 / 255.0 + 1e-12);
    fs::remove_all(dir);
}

TEST_CASE("png writes are byte-deterministic") {
    Rng rng(43);
    auto rgb = random_clip(rng, 1, 16, 16);
    fs::path dir = fs::temp_directory_path() / "flowmatte_io_det";
    fs::remove_all(dir);
    write_png(dir / "a.png", frame_to_image(rgb.frames, 0));
    write_png(dir / "b.png", frame_to_image(rgb.frames, 0));
    std::ifstream fa(dir / "a.png", std::ios::binary);
    std::ifstream fb(dir / "b.png", std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(fa)), {});
    std::string sb((std::istreambuf_iterator<char>(fb)), {});
    CHECK(sa == sb);
    CHECK(!sa.empty());
    fs::remove_all(dir);
}

TEST_CASE("rng determinism and moments") {
    Rng a(77), b(77);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    Rng r(123);
    double sum = 0;
    for (int i = 0; i < 100000; ++i) {
        double u = r.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        sum += u;
    }
    CHECK(sum / 100000 == doctest::Approx(0.5).epsilon(0.01));

    Rng n(9);
    double m = 0, m2 = 0;
    for (int i = 0; i < 100000; ++i) {
        double v = n.normal();
        m += v;
        m2 += v * v;
    }
    CHECK(std::abs(m / 100000) < 0.02);
    CHECK(m2 / 100000 == doctest::Approx(1.0).epsilon(0.02));
}
