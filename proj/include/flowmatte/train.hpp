#pragma once

#include <map>
#include <optional>

#include "flowmatte/codec.hpp"
#include "flowmatte/denoiser.hpp"
#include "flowmatte/flow.hpp"
#include "flowmatte/losses.hpp"
#include "flowmatte/metrics.hpp"
#include "flowmatte/synth.hpp"

namespace flowmatte {

struct MixtureEntrySpec {
    std::string dataset;
    double ratio = 0;
    bool pixel_loss = false;
};

struct StageLosses {
    bool latent = true;
    bool pixel = false;
};

struct StageConfig {
    std::string name;  // stage1 | stage2 | stage3
    std::vector<MixtureEntrySpec> mixture;
    std::vector<std::pair<int, int>> resolutions;  // (h, w) buckets
    double learning_rate = 1e-3;
    std::vector<std::string> frozen_sets;  // subset names for Denoiser::freeze
    std::optional<LoraConfig> lora;
    StageLosses losses;
    /// Probability of applying the pixel stack on an eligible step (1 =
    /// every step; lower values trade fidelity for speed).
    double pixel_loss_probability = 1.0;
    int iterations = 1000;
    int length_min = 1, length_max = 12;
    int batch = 4;
};

/// Enforces the per-stage contracts: stage1 trains everything with latent
/// loss only; stage2 freezes temporal layers; stage3 freezes the whole base,
/// requires LoRA and enables pixel losses.
void validate_stage(const StageConfig& cfg);

/// In-memory clip cache holding the 8-bit data exactly as stored on disk.
class ClipCache {
public:
    struct Entry {
        VideoClip rgb;
        AlphaSequence alpha;
    };
    const Entry& get(const DatasetManifest& manifest, int clip_index);
    void clear() { cache_.clear(); }

private:
    std::map<std::string, Entry> cache_;
};

struct TrainState {
    Denoiser model;
    LatentCodec codec;  // frozen for all matting stages
    Rng rng;
    AdamW opt;
    std::int64_t iteration = 0;
    std::string stage_name = "init";
    std::uint64_t codec_hash = 0;

    TrainState(Denoiser m, LatentCodec c, std::uint64_t seed)
        : model(std::move(m)), codec(std::move(c)), rng(seed) {
        codec.freeze();
        codec_hash = codec.checksum();
    }
};

/// One optimizer update on the unfrozen parameter sets; pixel terms only
/// when the stage and the sample's dataset enable them.
LossReport train_step(TrainState& st, const std::vector<TrainingSample>& batch,
                      const LossWeights& weights, const StageConfig& stage);

struct StageRunContext {
    std::map<std::string, DatasetManifest> datasets;
    ClipCache cache;
    LossWeights weights;
};

/// Runs a full stage: applies freeze/LoRA contracts, iterates train_step
/// over mixture draws, writes a JSON-lines loss log and a checkpoint.
void run_stage(const StageConfig& cfg, TrainState& st, StageRunContext& ctx,
               const std::filesystem::path& run_dir);

void save_train_checkpoint(const std::filesystem::path& path, const TrainState& st);
/// Loads model + optimizer + rng into a state (codec supplied separately and
/// verified against the stored hash).
TrainState load_train_checkpoint(const std::filesystem::path& path, LatentCodec codec);

// ---- inference ----

struct ChunkingConfig {
    int chunk_len = 12;
    int overlap = 2;
};

/// Single-shot inference (no chunking): encode conditioning, integrate the
/// flow from seeded noise, decode the matte. Auto-pads H,W to the model's
/// divisor and removes the padding before returning.
AlphaSequence infer_single(const VideoClip& clip, const Denoiser& model, const LatentCodec& codec,
                           const SamplerConfig& sampler);

/// Chunked inference for long clips: fixed-length windows with linear
/// cross-fade blending over `overlap` frames. Chunk k uses noise seed
/// derive(sampler.seed, k), so overlap 0 equals concatenating independent
/// infer_single calls made with those seeds.
AlphaSequence infer(const VideoClip& clip, const Denoiser& model, const LatentCodec& codec,
                    const SamplerConfig& sampler, const ChunkingConfig& chunking = {});

struct TimingRow {
    int steps = 0;
    double seconds_per_clip = 0;
    int clips = 0;
};
std::vector<TimingRow> timing_harness(const DatasetManifest& manifest, const Denoiser& model,
                                      const LatentCodec& codec, const std::vector<int>& step_counts,
                                      std::uint64_t seed, const ChunkingConfig& chunking = {});
std::string timing_table(const std::vector<TimingRow>& rows);

// ---- synthetic defocus (depth-weighted background blur) ----

/// depth: (1,1,H,W) or (T,1,H,W), normalized internally to [0,1].
/// Background blur sigma = strength * normalized depth per pixel; output is
/// composite(clip, blurred, alpha). strength 0 returns the input exactly.
VideoClip defocus(const VideoClip& clip, const AlphaSequence& alpha, const Tensor4d& depth,
                  double strength);
VideoClip defocus(const VideoClip& clip, const AlphaSequence& alpha, double constant_depth,
                  double strength);

// ---- ablation harness ----

struct AblationVariant {
    std::string name;
    std::vector<MixtureEntrySpec> pretrain_mixture;  // phase 1 (flow loss only)
    std::vector<MixtureEntrySpec> finetune_mixture;  // phase 2
    bool pixel_losses = true;                        // phase 2 pixel supervision
    bool lora = false;                               // phase 2 trains LoRA over frozen base
};

struct AblationPlan {
    int pretrain_iterations = 400;
    int finetune_iterations = 300;
    double learning_rate = 1e-3;
    int batch = 2;
    int length_min = 2, length_max = 6;
    std::pair<int, int> resolution = {64, 64};
    std::string eval_dataset;
    SamplerConfig sampler;
    std::uint64_t seed = 1234;
    std::vector<AblationVariant> variants;
};

struct AblationRow {
    std::string name;
    bool failed = false;
    std::string error;
    ClipMetrics metrics;  // aggregate over the eval dataset
};

/// Trains every variant under the identical plan budget, evaluates on the
/// held-out dataset, and returns one row per variant (failures recorded,
/// not thrown).
std::vector<AblationRow> run_ablation(const AblationPlan& plan, const DenoiserConfig& model_cfg,
                                      const LatentCodec& codec, StageRunContext& ctx,
                                      const std::filesystem::path& out_dir);
std::string ablation_table(const std::vector<AblationRow>& rows);

}  // namespace flowmatte
