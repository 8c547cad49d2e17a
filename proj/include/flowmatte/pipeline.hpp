#pragma once

#include "flowmatte/train.hpp"

namespace flowmatte {

struct PipelineDatasetSpec {
    std::string name;
    DatasetKind kind = DatasetKind::Matte;
    int clips = 8;
    std::string family = "mixed";
};

/// Everything one end-to-end run needs: procedural datasets, codec, model,
/// the three training stages and the sampler. Loaded from a JSON config;
/// every run writes back the resolved snapshot beside its outputs.
struct PipelineConfig {
    std::uint64_t seed = 20240807;
    std::filesystem::path data_root = "data";
    std::filesystem::path run_dir = "runs/default";

    std::vector<PipelineDatasetSpec> datasets;
    int gen_frames = 14;
    int gen_height = 80, gen_width = 80;

    CodecConfig codec;
    CodecTrainConfig codec_train;
    DenoiserConfig denoiser;
    LossWeights weights;
    std::vector<StageConfig> stages;
    SamplerConfig sampler{3, 0};
    ChunkingConfig chunking;
};

PipelineConfig default_pipeline_config();
PipelineConfig load_pipeline_config(const std::filesystem::path& path);
std::string pipeline_config_json(const PipelineConfig& cfg);
void write_resolved_config(const PipelineConfig& cfg, const std::filesystem::path& file);

/// Renders every dataset in the config; fully deterministic from the seed
/// (per-clip seeds derive from (dataset seed, clip index)).
void generate_data(const PipelineConfig& cfg);

std::map<std::string, DatasetManifest> load_datasets(const PipelineConfig& cfg);

/// Trains the codec on the non-test datasets (last ~10% of each dataset's
/// clips held out), saves run_dir/codec.bin plus the reconstruction report,
/// and returns the training report.
CodecTrainReport run_train_codec(const PipelineConfig& cfg);

LatentCodec load_run_codec(const PipelineConfig& cfg);

/// Runs the selected stages ("1" | "2" | "3" | "all"), chaining checkpoints
/// under run_dir. Stage 1 starts from random init (no pre-trained weights
/// exist at this scale).
void run_training_stages(const PipelineConfig& cfg, const std::string& stage_sel);

/// Latest stage checkpoint in run_dir (stage3 > stage2 > stage1).
std::filesystem::path latest_checkpoint(const PipelineConfig& cfg);

/// Default 3-variant ablation plan over the config's datasets: the
/// seg+matte baseline, matting-only data, and no-pixel-loss variants, plus
/// a LoRA fine-tune row.
AblationPlan default_ablation_plan(const PipelineConfig& cfg);
AblationPlan load_ablation_plan(const std::filesystem::path& path);

}  // namespace flowmatte
