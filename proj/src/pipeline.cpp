#include "flowmatte/pipeline.hpp"

#include <json.hpp>

#include <fstream>
#include <iostream>

#include "flowmatte/image_io.hpp"

namespace flowmatte {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

PipelineConfig default_pipeline_config() {
    PipelineConfig cfg;
    cfg.datasets = {
        {"seg_a", DatasetKind::Segmentation, 24, "bodies"},
        {"seg_b", DatasetKind::Segmentation, 18, "mixed"},
        {"seg_c", DatasetKind::Segmentation, 18, "bodies"},
        {"matte_a", DatasetKind::Matte, 20, "mixed_soft"},
        {"matte_hair", DatasetKind::Matte, 24, "strands"},
        {"test", DatasetKind::Matte, 8, "mixed_soft"},
    };

    cfg.codec_train.iterations = 1600;
    cfg.codec_train.lr = 1.5e-3;
    cfg.codec_train.batch_frames = 8;
    cfg.codec_train.psnr_floor = 26.5;

    StageConfig s1;
    s1.name = "stage1";
    s1.mixture = {{"seg_a", 0.4, false}, {"seg_b", 0.3, false}, {"seg_c", 0.3, false}};
    s1.resolutions = {{64, 64}, {48, 80}, {80, 48}};
    s1.learning_rate = 1e-3;
    s1.losses = {true, false};
    s1.iterations = 2000;
    s1.batch = 4;

    StageConfig s2;
    s2.name = "stage2";
    s2.mixture = {{"seg_a", 0.4, false},
                  {"seg_b", 0.3, false},
                  {"seg_c", 0.1, false},
                  {"matte_a", 0.2, false}};
    s2.resolutions = {{80, 48}, {48, 80}};
    s2.learning_rate = 5e-4;
    s2.frozen_sets = {"temporal"};
    s2.losses = {true, false};
    s2.iterations = 1000;
    s2.batch = 4;

    StageConfig s3;
    s3.name = "stage3";
    s3.mixture = {{"matte_a", 0.4, false}, {"matte_hair", 0.6, true}};
    s3.resolutions = {{64, 64}, {48, 80}, {80, 48}};
    s3.learning_rate = 1e-3;
    s3.frozen_sets = {"all_base"};
    LoraConfig lora;
    lora.rank = 32;
    s3.lora = lora;
    s3.losses = {true, true};
    s3.iterations = 1000;
    s3.batch = 1;

    cfg.stages = {s1, s2, s3};
    return cfg;
}

namespace {

StageConfig stage_from_json(const ordered_json& j) {
    StageConfig s;
    s.name = j.at("name").get<std::string>();
    for (const auto& m : j.at("mixture"))
        s.mixture.push_back({m.at("dataset").get<std::string>(), m.at("ratio").get<double>(),
                             m.value("pixel_loss", false)});
    for (const auto& r : j.at("resolutions"))
        s.resolutions.push_back({r.at(0).get<int>(), r.at(1).get<int>()});
    s.learning_rate = j.at("learning_rate").get<double>();
    for (const auto& f : j.value("frozen", ordered_json::array()))
        s.frozen_sets.push_back(f.get<std::string>());
    if (j.contains("lora")) {
        LoraConfig l;
        l.rank = j["lora"].value("rank", 32);
        l.target_layers = j["lora"].value("target_layers", std::string("auto"));
        l.scale = j["lora"].value("scale", 1.0);
        l.seed = j["lora"].value("seed", std::uint64_t(4242));
        s.lora = l;
    }
    s.losses.latent = j.at("losses").value("latent", true);
    s.losses.pixel = j.at("losses").value("pixel", false);
    s.pixel_loss_probability = j.value("pixel_loss_probability", 1.0);
    s.iterations = j.at("iterations").get<int>();
    if (j.contains("length")) {
        s.length_min = j["length"].at(0).get<int>();
        s.length_max = j["length"].at(1).get<int>();
    }
    s.batch = j.value("batch", 4);
    return s;
}

ordered_json stage_to_json(const StageConfig& s) {
    ordered_json j;
    j["name"] = s.name;
    j["mixture"] = ordered_json::array();
    for (const auto& m : s.mixture)
        j["mixture"].push_back(
            {{"dataset", m.dataset}, {"ratio", m.ratio}, {"pixel_loss", m.pixel_loss}});
    j["resolutions"] = ordered_json::array();
    for (auto [h, w] : s.resolutions) j["resolutions"].push_back({h, w});
    j["learning_rate"] = s.learning_rate;
    j["frozen"] = s.frozen_sets;
    if (s.lora)
        j["lora"] = {{"rank", s.lora->rank},
                     {"target_layers", s.lora->target_layers},
                     {"scale", s.lora->scale},
                     {"seed", s.lora->seed}};
    j["losses"] = {{"latent", s.losses.latent}, {"pixel", s.losses.pixel}};
    j["pixel_loss_probability"] = s.pixel_loss_probability;
    j["iterations"] = s.iterations;
    j["length"] = {s.length_min, s.length_max};
    j["batch"] = s.batch;
    return j;
}

}  // namespace

std::string pipeline_config_json(const PipelineConfig& cfg) {
    ordered_json j;
    j["seed"] = cfg.seed;
    j["data_root"] = cfg.data_root.string();
    j["run_dir"] = cfg.run_dir.string();
    j["generation"] = {{"frames", cfg.gen_frames},
                       {"height", cfg.gen_height},
                       {"width", cfg.gen_width}};
    j["datasets"] = ordered_json::array();
    for (const auto& d : cfg.datasets)
        j["datasets"].push_back({{"name", d.name},
                                 {"kind", to_string(d.kind)},
                                 {"clips", d.clips},
                                 {"family", d.family}});
    j["codec"] = {{"spatial_factor", cfg.codec.spatial_factor},
                  {"latent_channels", cfg.codec.latent_channels},
                  {"base_channels", cfg.codec.base_channels},
                  {"seed", cfg.codec.seed}};
    j["codec_train"] = {{"iterations", cfg.codec_train.iterations},
                        {"lr", cfg.codec_train.lr},
                        {"batch_frames", cfg.codec_train.batch_frames},
                        {"crop", cfg.codec_train.crop},
                        {"psnr_floor", cfg.codec_train.psnr_floor},
                        {"seed", cfg.codec_train.seed}};
    j["denoiser"] = {{"base_channels", cfg.denoiser.base_channels},
                     {"depth", cfg.denoiser.depth},
                     {"temporal_kernel", cfg.denoiser.temporal_kernel},
                     {"context_dim", cfg.denoiser.context_dim},
                     {"time_embed_dim", cfg.denoiser.time_embed_dim},
                     {"latent_channels", cfg.denoiser.latent_channels},
                     {"norm_groups", cfg.denoiser.norm_groups},
                     {"seed", cfg.denoiser.seed}};
    j["loss"] = {{"lambda_pixel", cfg.weights.lambda_pixel},
                 {"lambda_gp", cfg.weights.lambda_gp},
                 {"pyramid_levels", cfg.weights.pyramid_levels}};
    j["stages"] = ordered_json::array();
    for (const auto& s : cfg.stages) j["stages"].push_back(stage_to_json(s));
    j["sampler"] = {{"steps", cfg.sampler.steps}, {"seed", cfg.sampler.seed}};
    j["chunking"] = {{"chunk_len", cfg.chunking.chunk_len}, {"overlap", cfg.chunking.overlap}};
    return j.dump(2) + "\n";
}

PipelineConfig load_pipeline_config(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError(strf("cannot read config %s", path.string().c_str()));
    ordered_json j;
    try {
        is >> j;
    } catch (const std::exception& e) {
        throw ConfigError(strf("bad config %s: %s", path.string().c_str(), e.what()));
    }
    PipelineConfig cfg = default_pipeline_config();
    try {
        cfg.seed = j.value("seed", cfg.seed);
        if (j.contains("data_root")) cfg.data_root = j["data_root"].get<std::string>();
        if (j.contains("run_dir")) cfg.run_dir = j["run_dir"].get<std::string>();
        if (j.contains("generation")) {
            cfg.gen_frames = j["generation"].value("frames", cfg.gen_frames);
            cfg.gen_height = j["generation"].value("height", cfg.gen_height);
            cfg.gen_width = j["generation"].value("width", cfg.gen_width);
        }
        if (j.contains("datasets")) {
            cfg.datasets.clear();
            for (const auto& d : j["datasets"])
                cfg.datasets.push_back({d.at("name").get<std::string>(),
                                        dataset_kind_from_string(d.at("kind").get<std::string>()),
                                        d.at("clips").get<int>(),
                                        d.at("family").get<std::string>()});
        }
        if (j.contains("codec")) {
            cfg.codec.spatial_factor = j["codec"].value("spatial_factor", 4);
            cfg.codec.latent_channels = j["codec"].value("latent_channels", 4);
            cfg.codec.base_channels = j["codec"].value("base_channels", 24);
            cfg.codec.seed = j["codec"].value("seed", cfg.codec.seed);
        }
        if (j.contains("codec_train")) {
            cfg.codec_train.iterations = j["codec_train"].value("iterations", 1600);
            cfg.codec_train.lr = j["codec_train"].value("lr", 1.5e-3);
            cfg.codec_train.batch_frames = j["codec_train"].value("batch_frames", 8);
            cfg.codec_train.crop = j["codec_train"].value("crop", 64);
            cfg.codec_train.psnr_floor = j["codec_train"].value("psnr_floor", 26.5);
            cfg.codec_train.seed = j["codec_train"].value("seed", std::uint64_t(7));
        }
        if (j.contains("denoiser")) {
            cfg.denoiser.base_channels = j["denoiser"].value("base_channels", 32);
            cfg.denoiser.depth = j["denoiser"].value("depth", 3);
            cfg.denoiser.temporal_kernel = j["denoiser"].value("temporal_kernel", 3);
            cfg.denoiser.context_dim = j["denoiser"].value("context_dim", 128);
            cfg.denoiser.time_embed_dim = j["denoiser"].value("time_embed_dim", 128);
            cfg.denoiser.latent_channels = j["denoiser"].value("latent_channels", 4);
            cfg.denoiser.norm_groups = j["denoiser"].value("norm_groups", 8);
            cfg.denoiser.seed = j["denoiser"].value("seed", cfg.denoiser.seed);
        }
        if (j.contains("loss")) {
            cfg.weights.lambda_pixel = j["loss"].value("lambda_pixel", 0.1);
            cfg.weights.lambda_gp = j["loss"].value("lambda_gp", 0.1);
            cfg.weights.pyramid_levels = j["loss"].value("pyramid_levels", 3);
        }
        if (j.contains("stages")) {
            cfg.stages.clear();
            for (const auto& s : j["stages"]) cfg.stages.push_back(stage_from_json(s));
        }
        if (j.contains("sampler")) {
            cfg.sampler.steps = j["sampler"].value("steps", 3);
            cfg.sampler.seed = j["sampler"].value("seed", std::uint64_t(0));
        }
        if (j.contains("chunking")) {
            cfg.chunking.chunk_len = j["chunking"].value("chunk_len", 12);
            cfg.chunking.overlap = j["chunking"].value("overlap", 2);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(strf("bad config %s: %s", path.string().c_str(), e.what()));
    }
    if (cfg.codec.latent_channels != cfg.denoiser.latent_channels)
        throw ConfigError("codec and denoiser latent_channels must match");
    return cfg;
}

void write_resolved_config(const PipelineConfig& cfg, const fs::path& file) {
    fs::create_directories(file.parent_path());
    std::ofstream os(file);
    if (!os) throw IoError(strf("cannot write %s", file.string().c_str()));
    os << pipeline_config_json(cfg);
}

void generate_data(const PipelineConfig& cfg) {
    fs::create_directories(cfg.data_root);
    write_resolved_config(cfg, cfg.data_root / "resolved_config.json");
    for (const auto& ds : cfg.datasets) {
        std::uint64_t ds_seed = Rng::derive(cfg.seed, fnv1a(ds.name.data(), ds.name.size()));
        std::vector<SceneSpec> specs;
        for (int i = 0; i < ds.clips; ++i) {
            // independent per-clip seed streams (parallelizable generation)
            Rng clip_rng(Rng::derive(ds_seed, std::uint64_t(i)));
            specs.push_back(
                random_scene(clip_rng, ds.family, cfg.gen_frames, cfg.gen_height, cfg.gen_width));
        }
        compose_dataset(specs, {}, ds.kind, ds.name, cfg.data_root / ds.name, ds_seed);
        std::cout << "generated " << ds.name << ": " << ds.clips << " clips\n";
    }
}

std::map<std::string, DatasetManifest> load_datasets(const PipelineConfig& cfg) {
    std::map<std::string, DatasetManifest> out;
    for (const auto& ds : cfg.datasets) out[ds.name] = load_manifest(cfg.data_root / ds.name);
    return out;
}

CodecTrainReport run_train_codec(const PipelineConfig& cfg) {
    auto datasets = load_datasets(cfg);
    CodecDataset data;
    for (const auto& ds : cfg.datasets) {
        if (ds.name == "test") continue;  // held out entirely
        const DatasetManifest& m = datasets.at(ds.name);
        std::size_t holdout_from =
            m.clips.size() - std::max<std::size_t>(1, m.clips.size() / 10);
        for (std::size_t ci = 0; ci < m.clips.size(); ++ci) {
            VideoClip rgb = read_clip_rgb(m.root / m.clips[ci].path);
            AlphaSequence alpha = read_clip_alpha(m.root / m.clips[ci].path);
            bool holdout = ci >= holdout_from;
            // every other frame is plenty for codec training
            for (int t = 0; t < rgb.t(); t += 2) {
                Tensor4d f(1, 3, rgb.height(), rgb.width());
                f.set_frame(0, rgb.frames.frame(t));
                Tensor4d a(1, 1, rgb.height(), rgb.width());
                a.set_frame(0, alpha.alphas.frame(t));
                (holdout ? data.holdout_rgb : data.train_rgb).push_back(std::move(f));
                (holdout ? data.holdout_alpha : data.train_alpha).push_back(std::move(a));
            }
        }
    }

    LatentCodec codec(cfg.codec);
    CodecTrainReport report = codec.train(data, cfg.codec_train);
    fs::create_directories(cfg.run_dir);
    write_resolved_config(cfg, cfg.run_dir / "resolved_config.json");
    codec.save(cfg.run_dir / "codec.bin");

    std::vector<const DatasetManifest*> report_sets;
    for (const auto& ds : cfg.datasets) report_sets.push_back(&datasets.at(ds.name));
    auto rows = codec_report(codec, report_sets);
    std::ofstream table(cfg.run_dir / "codec_report.txt");
    table << codec_report_table(rows);
    std::ofstream csv(cfg.run_dir / "codec_report.csv");
    csv << codec_report_csv(rows);

    std::ofstream rj(cfg.run_dir / "codec_train_report.json");
    ordered_json j{{"iterations", report.iterations},
                   {"final_loss", report.final_loss},
                   {"holdout_psnr", report.holdout_psnr},
                   {"holdout_psnr_rgb", report.holdout_psnr_rgb},
                   {"holdout_psnr_alpha", report.holdout_psnr_alpha},
                   {"floor", report.floor},
                   {"floor_met", report.floor_met}};
    rj << j.dump(2) << "\n";
    return report;
}

LatentCodec load_run_codec(const PipelineConfig& cfg) {
    return LatentCodec::load(cfg.run_dir / "codec.bin");
}

void run_training_stages(const PipelineConfig& cfg, const std::string& stage_sel) {
    auto want = [&](const std::string& s) { return stage_sel == "all" || stage_sel == s; };
    if (!want("1") && !want("2") && !want("3"))
        throw ConfigError(strf("unknown stage selection '%s'", stage_sel.c_str()));

    StageRunContext ctx;
    ctx.datasets = load_datasets(cfg);
    ctx.weights = cfg.weights;

    LatentCodec codec = load_run_codec(cfg);
    write_resolved_config(cfg, cfg.run_dir / "resolved_config.json");

    auto stage_cfg = [&](const std::string& name) -> const StageConfig& {
        for (const auto& s : cfg.stages)
            if (s.name == name) return s;
        throw ConfigError(strf("config has no %s", name.c_str()));
    };

    std::optional<TrainState> st;
    if (want("1")) {
        st.emplace(Denoiser(cfg.denoiser), std::move(codec), Rng::derive(cfg.seed, 0x7121));
        run_stage(stage_cfg("stage1"), *st, ctx, cfg.run_dir);
    }
    if (want("2")) {
        if (!st) st.emplace(load_train_checkpoint(cfg.run_dir / "stage1.ckpt", std::move(codec)));
        run_stage(stage_cfg("stage2"), *st, ctx, cfg.run_dir);
    }
    if (want("3")) {
        if (!st) st.emplace(load_train_checkpoint(cfg.run_dir / "stage2.ckpt", std::move(codec)));
        run_stage(stage_cfg("stage3"), *st, ctx, cfg.run_dir);
    }
}

fs::path latest_checkpoint(const PipelineConfig& cfg) {
    for (const char* name : {"stage3.ckpt", "stage2.ckpt", "stage1.ckpt"}) {
        fs::path p = cfg.run_dir / name;
        if (fs::exists(p)) return p;
    }
    throw IoError(strf("no stage checkpoint under %s", cfg.run_dir.string().c_str()));
}

AblationPlan default_ablation_plan(const PipelineConfig& cfg) {
    AblationPlan plan;
    plan.pretrain_iterations = 500;
    plan.finetune_iterations = 350;
    plan.learning_rate = 1e-3;
    plan.batch = 2;
    plan.length_min = 2;
    plan.length_max = 6;
    plan.resolution = {64, 64};
    plan.eval_dataset = "test";
    plan.sampler = cfg.sampler;
    plan.seed = Rng::derive(cfg.seed, 0xab1a);

    AblationVariant seg_matte;
    seg_matte.name = "seg+matte";
    seg_matte.pretrain_mixture = {{"seg_a", 1.0, false}};
    seg_matte.finetune_mixture = {{"matte_hair", 1.0, true}};
    seg_matte.pixel_losses = true;

    AblationVariant matte_only;
    matte_only.name = "matte-only";
    matte_only.pretrain_mixture = {{"matte_hair", 1.0, false}};
    matte_only.finetune_mixture = {{"matte_hair", 1.0, true}};
    matte_only.pixel_losses = true;

    AblationVariant no_pixel;
    no_pixel.name = "no-pixel-losses";
    no_pixel.pretrain_mixture = {{"seg_a", 1.0, false}};
    no_pixel.finetune_mixture = {{"matte_hair", 1.0, false}};
    no_pixel.pixel_losses = false;

    AblationVariant lora_ft;
    lora_ft.name = "lora-finetune";
    lora_ft.pretrain_mixture = {{"seg_a", 1.0, false}};
    lora_ft.finetune_mixture = {{"matte_hair", 1.0, true}};
    lora_ft.pixel_losses = true;
    lora_ft.lora = true;

    // no pre-trained weights exist at this scale, so the paper's
    // "without diffusion prior" row becomes "skip pretraining entirely"
    AblationVariant skip_pre;
    skip_pre.name = "skip-pretrain";
    skip_pre.finetune_mixture = {{"matte_hair", 1.0, true}};
    skip_pre.pixel_losses = true;

    plan.variants = {seg_matte, matte_only, no_pixel, lora_ft, skip_pre};
    return plan;
}

AblationPlan load_ablation_plan(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError(strf("cannot read ablation plan %s", path.string().c_str()));
    ordered_json j;
    try {
        is >> j;
    } catch (const std::exception& e) {
        throw ConfigError(strf("bad ablation plan: %s", e.what()));
    }
    AblationPlan plan;
    plan.pretrain_iterations = j.value("pretrain_iterations", 400);
    plan.finetune_iterations = j.value("finetune_iterations", 300);
    plan.learning_rate = j.value("learning_rate", 1e-3);
    plan.batch = j.value("batch", 2);
    if (j.contains("length")) {
        plan.length_min = j["length"].at(0).get<int>();
        plan.length_max = j["length"].at(1).get<int>();
    }
    if (j.contains("resolution"))
        plan.resolution = {j["resolution"].at(0).get<int>(), j["resolution"].at(1).get<int>()};
    plan.eval_dataset = j.value("eval_dataset", std::string("test"));
    plan.sampler.steps = j.value("steps", 3);
    plan.sampler.seed = j.value("sampler_seed", std::uint64_t(0));
    plan.seed = j.value("seed", std::uint64_t(1234));
    auto mixture = [](const ordered_json& arr) {
        std::vector<MixtureEntrySpec> out;
        for (const auto& m : arr)
            out.push_back({m.at("dataset").get<std::string>(), m.at("ratio").get<double>(),
                           m.value("pixel_loss", false)});
        return out;
    };
    for (const auto& v : j.at("variants")) {
        AblationVariant var;
        var.name = v.at("name").get<std::string>();
        if (v.contains("pretrain")) var.pretrain_mixture = mixture(v["pretrain"]);
        var.finetune_mixture = mixture(v.at("finetune"));
        var.pixel_losses = v.value("pixel_losses", true);
        var.lora = v.value("lora", false);
        plan.variants.push_back(std::move(var));
    }
    return plan;
}

}  // namespace flowmatte
