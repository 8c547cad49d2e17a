#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "flowmatte/matting.hpp"
#include "flowmatte/rng.hpp"

namespace flowmatte {

struct MotionSpec {
    enum class Kind { Linear, Sinusoidal };
    Kind kind = Kind::Linear;
    double vx = 0, vy = 0;                      // px/frame (linear)
    double amp_x = 0, amp_y = 0;                // px (sinusoidal)
    double freq_x = 0.2, freq_y = 0.2;          // cycles/frame
    double phase_x = 0, phase_y = 0;

    std::pair<double, double> offset(double t) const;
};

struct ElementSpec {
    enum class Shape { Disk, Capsule, StrandBundle };
    Shape shape = Shape::Disk;
    double cx = 0, cy = 0;        // center at t=0, pixels
    double size = 8;              // disk radius / capsule half-length / strand reach
    double radius = 3;            // capsule half-thickness
    double angle = 0;             // capsule / strand base direction, radians
    double edge_softness = 1.0;   // px, must be > 0
    int strand_count = 12;
    double strand_width = 1.0;    // px, down to 1
    double sway_amp = 1.5;        // px of per-strand sinusoidal drift
    double sway_freq = 0.3;       // cycles/frame
    std::uint64_t seed = 0;       // per-element jitter stream
    double color[3] = {0.5, 0.5, 0.5};
    MotionSpec motion;
};

struct BackgroundSpec {
    enum class Mode { Gradient, BandNoise, ImageSequence };
    Mode mode = Mode::Gradient;
    double drift_vx = 0, drift_vy = 0;  // px/frame
    std::uint64_t seed = 0;
    std::string image_dir;  // ImageSequence: a clip directory with rgb/%05d.png
};

struct SceneSpec {
    std::uint64_t seed = 0;
    std::vector<ElementSpec> elements;
    BackgroundSpec background;
    int frames = 8;
    int height = 64, width = 64;
};

/// Renders foreground color + analytic anti-aliased coverage (supersample x
/// supersample grid per pixel). Deterministic in the spec alone.
std::pair<VideoClip, AlphaSequence> render_scene(const SceneSpec& spec, int supersample = 4);

VideoClip render_background(const BackgroundSpec& bg, int T, int H, int W);

/// Procedural scene drawn from a named family:
///   bodies      - hard-ish capsule/disk figures (segmentation pretraining)
///   mixed       - varied primitive shapes
///   mixed_soft  - soft-edged primitives, some thin strands
///   strands     - body plus dense fine strand bundles (hair-like mattes)
SceneSpec random_scene(Rng& rng, const std::string& family, int frames, int height, int width);

enum class DatasetKind { Matte, Segmentation };
const char* to_string(DatasetKind kind);
DatasetKind dataset_kind_from_string(const std::string& s);

struct ManifestClip {
    std::string path;  // clip dir relative to the manifest's directory
    int frames = 0, height = 0, width = 0;
};

struct DatasetManifest {
    std::string name;
    DatasetKind kind = DatasetKind::Matte;
    std::vector<ManifestClip> clips;
    std::uint64_t seed = 0;
    int format_version = 1;
    std::filesystem::path root;  // set when saved/loaded
};

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& dir);
DatasetManifest load_manifest(const std::filesystem::path& path);  // dir or manifest.json
/// Checks clip directories exist with the right frame counts; for
/// segmentation manifests also checks labels are binary.
void validate_manifest(const DatasetManifest& manifest);

/// Renders every scene, composites it over backgrounds[i % n] (falling back
/// to the scene's own background spec when `backgrounds` is empty), writes
/// PNG clips + manifest.json. Segmentation datasets binarize alpha at 0.5
/// before writing.
DatasetManifest compose_dataset(const std::vector<SceneSpec>& specs,
                                const std::vector<BackgroundSpec>& backgrounds, DatasetKind kind,
                                const std::string& name, const std::filesystem::path& out_dir,
                                std::uint64_t seed);

struct MixtureEntry {
    const DatasetManifest* manifest = nullptr;
    double ratio = 0;
    bool pixel_loss_enabled = false;
};

struct MixtureConfig {
    std::vector<MixtureEntry> entries;
};

struct MixtureDraw {
    const DatasetManifest* manifest = nullptr;
    int entry_index = -1;
    int clip_index = -1;
    bool pixel_loss_enabled = false;
};

/// Categorical sampler over dataset entries; ratios must be positive and
/// sum to 1 within 1e-9; entries must be non-empty manifests.
class MixtureSampler {
public:
    explicit MixtureSampler(MixtureConfig cfg);
    MixtureDraw next(Rng& rng) const;
    const MixtureConfig& config() const { return cfg_; }

private:
    MixtureConfig cfg_;
    std::vector<double> cdf_;
};

/// Uniform integer sequence length in [min_len, max_len].
int sample_sequence_length(Rng& rng, int min_len = 1, int max_len = 12);

struct CropParams {
    int t_start = 0;
    int y0 = 0, x0 = 0;
    int crop_h = 0, crop_w = 0;
    bool wrapped = false;  // temporal wrap-pad was needed
};

struct TrainingSample {
    VideoClip rgb;
    AlphaSequence alpha;
    bool pixel_loss_enabled = false;
};

CropParams sample_crop_params(Rng& rng, int T, int H, int W, int target_h, int target_w,
                              int length);

/// Applies a temporal window + spatial crop + bilinear resize identically to
/// rgb and alpha. crop == target is an exact copy.
TrainingSample apply_crop(const VideoClip& rgb, const AlphaSequence& alpha, const CropParams& p,
                          int target_h, int target_w, int length);

TrainingSample crop_resize_batch(const VideoClip& rgb, const AlphaSequence& alpha, Rng& rng,
                                 int target_h, int target_w, int length);

}  // namespace flowmatte
