#include "flowmatte/image_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>

namespace flowmatte {

namespace fs = std::filesystem;

namespace {

struct FileCloser {
    std::FILE* f;
    ~FileCloser() {
        if (f) std::fclose(f);
    }
};

std::string frame_name(int t) {
    return strf("%05d.png", t);
}

}  // namespace

Image8 read_png(const fs::path& path) {
    std::FILE* fp = std::fopen(path.string().c_str(), "rb");
    if (!fp) throw IoError(strf("cannot open %s for reading", path.string().c_str()));
    FileCloser closer{fp};

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError(strf("libpng error while reading %s", path.string().c_str()));
    }
    png_init_io(png, fp);
    png_read_info(png, info);

    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    int color_type = png_get_color_type(png, info);
    int bit_depth = png_get_bit_depth(png, info);

    if (bit_depth == 16) png_set_strip_16(png);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);

    int channels = png_get_channels(png, info);
    if (channels != 1 && channels != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError(strf("%s: unsupported channel count %d", path.string().c_str(), channels));
    }

    Image8 img;
    img.width = int(w);
    img.height = int(h);
    img.channels = channels;
    img.pixels.resize(std::size_t(w) * h * channels);

    std::vector<png_bytep> rows(h);
    for (png_uint_32 y = 0; y < h; ++y)
        rows[y] = img.pixels.data() + std::size_t(y) * w * channels;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

void write_png(const fs::path& path, const Image8& img) {
    if (img.channels != 1 && img.channels != 3)
        throw IoError(strf("write_png: unsupported channel count %d", img.channels));
    fs::create_directories(path.parent_path());
    std::FILE* fp = std::fopen(path.string().c_str(), "wb");
    if (!fp) throw IoError(strf("cannot open %s for writing", path.string().c_str()));
    FileCloser closer{fp};

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError(strf("libpng error while writing %s", path.string().c_str()));
    }
    png_init_io(png, fp);
    // Fixed settings keep output bytes reproducible for a given input.
    png_set_compression_level(png, 6);
    png_set_filter(png, 0, PNG_FILTER_SUB);
    png_set_IHDR(png, info, png_uint_32(img.width), png_uint_32(img.height), 8,
                 img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::vector<png_bytep> rows(img.height);
    for (int y = 0; y < img.height; ++y)
        rows[y] = const_cast<png_bytep>(img.pixels.data() + std::size_t(y) * img.width * img.channels);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

std::uint8_t quantize8(double x) {
    double v = std::nearbyint(255.0 * x);
    if (v < 0.0) v = 0.0;
    if (v > 255.0) v = 255.0;
    return std::uint8_t(v);
}

Image8 frame_to_image(const Tensor4d& frames, int t) {
    Image8 img;
    img.width = frames.w;
    img.height = frames.h;
    img.channels = frames.c;
    img.pixels.resize(std::size_t(frames.h) * frames.w * frames.c);
    for (int y = 0; y < frames.h; ++y)
        for (int x = 0; x < frames.w; ++x)
            for (int c = 0; c < frames.c; ++c)
                img.pixels[(std::size_t(y) * frames.w + x) * frames.c + c] =
                    quantize8(frames(t, c, y, x));
    return img;
}

void image_to_frame(const Image8& img, Tensor4d& frames, int t) {
    if (img.width != frames.w || img.height != frames.h || img.channels != frames.c)
        throw ShapeError(strf("image_to_frame: %dx%dx%d image vs %dx%dx%d frame", img.height,
                              img.width, img.channels, frames.h, frames.w, frames.c));
    for (int y = 0; y < frames.h; ++y)
        for (int x = 0; x < frames.w; ++x)
            for (int c = 0; c < frames.c; ++c)
                frames(t, c, y, x) =
                    dequantize8(img.pixels[(std::size_t(y) * frames.w + x) * frames.c + c]);
}

void write_clip(const fs::path& clip_dir, const VideoClip& rgb, const AlphaSequence& alpha) {
    if (rgb.t() != alpha.t() || rgb.height() != alpha.height() || rgb.width() != alpha.width())
        throw ShapeError("write_clip: rgb/alpha shape mismatch");
    for (int t = 0; t < rgb.t(); ++t) {
        write_png(clip_dir / "rgb" / frame_name(t), frame_to_image(rgb.frames, t));
        write_png(clip_dir / "alpha" / frame_name(t), frame_to_image(alpha.alphas, t));
    }
}

int clip_frame_count(const fs::path& clip_dir) {
    int t = 0;
    while (fs::exists(clip_dir / "rgb" / frame_name(t))) ++t;
    return t;
}

VideoClip read_clip_rgb(const fs::path& clip_dir) {
    int T = clip_frame_count(clip_dir);
    if (T == 0) throw IoError(strf("no rgb frames under %s", clip_dir.string().c_str()));
    Image8 first = read_png(clip_dir / "rgb" / frame_name(0));
    Tensor4d frames(T, 3, first.height, first.width);
    image_to_frame(first, frames, 0);
    for (int t = 1; t < T; ++t)
        image_to_frame(read_png(clip_dir / "rgb" / frame_name(t)), frames, t);
    return VideoClip(std::move(frames));
}

AlphaSequence read_clip_alpha(const fs::path& clip_dir) {
    int T = 0;
    while (fs::exists(clip_dir / "alpha" / frame_name(T))) ++T;
    if (T == 0) throw IoError(strf("no alpha frames under %s", clip_dir.string().c_str()));
    Image8 first = read_png(clip_dir / "alpha" / frame_name(0));
    Tensor4d alphas(T, 1, first.height, first.width);
    image_to_frame(first, alphas, 0);
    for (int t = 1; t < T; ++t)
        image_to_frame(read_png(clip_dir / "alpha" / frame_name(t)), alphas, t);
    return AlphaSequence(std::move(alphas));
}

}  // namespace flowmatte
