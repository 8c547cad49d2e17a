#pragma once

#include <filesystem>
#include <vector>

#include "flowmatte/autodiff.hpp"
#include "flowmatte/matting.hpp"
#include "flowmatte/params.hpp"

namespace flowmatte {

/// Per-frame spatially compressed code. No temporal compression: codes.t
/// always equals the source clip's frame count.
struct LatentSequence {
    Tensor4d codes;  // (T, latent_channels, H/s, W/s)
    int spatial_factor = 4;
};

struct CodecConfig {
    int spatial_factor = 4;   // power of two
    int latent_channels = 4;
    int base_channels = 24;
    std::uint64_t seed = 20240601;
};

struct CodecTrainConfig {
    int iterations = 2000;
    double lr = 1e-3;
    int batch_frames = 8;
    int crop = 64;             // random training crop (0 = full frames)
    double psnr_floor = 26.0;  // held-out floor, dB
    std::uint64_t seed = 7;
};

struct CodecTrainReport {
    int iterations = 0;
    double final_loss = 0.0;
    double holdout_psnr = 0.0;        // mean over rgb+alpha holdout frames
    double holdout_psnr_rgb = 0.0;
    double holdout_psnr_alpha = 0.0;
    double floor = 0.0;
    bool floor_met = false;
};

/// Frames for codec training, each (1,3,H,W) rgb or (1,1,H,W) alpha in [0,1].
struct CodecDataset {
    std::vector<Tensor4d> train_rgb;
    std::vector<Tensor4d> train_alpha;
    std::vector<Tensor4d> holdout_rgb;
    std::vector<Tensor4d> holdout_alpha;
};

/// Desk-scale stand-in for the frozen pre-trained VAE: a per-frame
/// convolutional autoencoder. Mattes go through the same codec with the
/// single channel replicated to the input width; the decoded matte is the
/// mean over output channels.
///
/// Latents are normalized to roughly unit standard deviation per route
/// (clip and matte) by scale factors calibrated at the end of training;
/// encode multiplies, decode divides, so round trips are unaffected.
class LatentCodec {
public:
    explicit LatentCodec(CodecConfig cfg = {});

    const CodecConfig& config() const { return cfg_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }
    std::uint64_t checksum() const;
    bool frozen() const;
    void freeze();
    double clip_latent_scale() const { return clip_scale_; }
    double matte_latent_scale() const { return matte_scale_; }

    // x in codec range [-1,1], (T,3,H,W), H and W divisible by spatial_factor.
    LatentSequence encode(const Tensor4d& x) const;
    Tensor4d decode(const LatentSequence& z) const;

    LatentSequence encode_clip(const VideoClip& clip) const;
    LatentSequence encode_matte(const AlphaSequence& alpha) const;
    AlphaSequence decode_matte(const LatentSequence& z) const;

    ad::Var encode_on_tape(ad::Tape& tape, ad::Var x) const;
    ad::Var decode_on_tape(ad::Tape& tape, ad::Var z) const;
    /// decode -> channel mean -> [0,1] matte, differentiable through z.
    ad::Var decode_matte_on_tape(ad::Tape& tape, ad::Var z) const;

    CodecTrainReport train(const CodecDataset& data, const CodecTrainConfig& tcfg);

    void save(const std::filesystem::path& path) const;
    static LatentCodec load(const std::filesystem::path& path);

private:
    void build();
    ad::Var encode_raw(ad::Tape& tape, ad::Var x) const;
    ad::Var decode_raw(ad::Tape& tape, ad::Var z) const;
    CodecConfig cfg_;
    int levels_ = 2;
    double clip_scale_ = 1.0;
    double matte_scale_ = 1.0;
    mutable ParamStore store_;  // tape binding requires mutable access
};

/// Throws with the achieved PSNR when a budgeted run missed the floor.
void require_codec_floor(const CodecTrainReport& report);

struct CodecReportRow {
    std::string split;
    double psnr = 0.0;
    double ssim = 0.0;
    int frames = 0;
};

struct DatasetManifest;

/// Reconstruction quality per dataset split (rgb and alpha routes reported
/// separately), over the first `max_clips` clips of each split. Empty
/// splits are skipped with a warning on stderr.
std::vector<CodecReportRow> codec_report(const LatentCodec& codec,
                                         const std::vector<const DatasetManifest*>& manifests,
                                         int max_clips = 6);
std::string codec_report_table(const std::vector<CodecReportRow>& rows);
std::string codec_report_csv(const std::vector<CodecReportRow>& rows);

}  // namespace flowmatte
