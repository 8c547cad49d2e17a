#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "flowmatte/matting.hpp"

namespace flowmatte {

/// 8-bit image buffer, row-major, `channels` interleaved (1 = gray, 3 = RGB).
struct Image8 {
    int width = 0, height = 0, channels = 0;
    std::vector<std::uint8_t> pixels;
};

Image8 read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image8& img);

/// Round-to-nearest quantization of 255*x and its inverse.
std::uint8_t quantize8(double x);
inline double dequantize8(std::uint8_t q) { return q / 255.0; }

// Clip serialization: rgb/%05d.png (3-channel) and alpha/%05d.png (1-channel)
// under a clip directory.
void write_clip(const std::filesystem::path& clip_dir, const VideoClip& rgb,
                const AlphaSequence& alpha);
VideoClip read_clip_rgb(const std::filesystem::path& clip_dir);
AlphaSequence read_clip_alpha(const std::filesystem::path& clip_dir);

/// Frame count by scanning rgb/%05d.png files.
int clip_frame_count(const std::filesystem::path& clip_dir);

Image8 frame_to_image(const Tensor4d& frames, int t);
void image_to_frame(const Image8& img, Tensor4d& frames, int t);

}  // namespace flowmatte
