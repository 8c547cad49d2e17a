// flowmatte command line: data generation, codec + 3-stage training,
// inference, evaluation, ablations and the defocus demo.
//
// Exit codes: 0 success, 2 configuration error, 3 runtime failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>

#include "flowmatte/image_io.hpp"
#include "flowmatte/pipeline.hpp"

using namespace flowmatte;
namespace fs = std::filesystem;

namespace {

PipelineConfig config_from(const std::string& path) {
    if (path.empty()) return default_pipeline_config();
    return load_pipeline_config(path);
}

MetricScales parse_scales(const std::string& spec) {
    MetricScales s;
    if (spec.empty()) return s;
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
        auto eq = item.find('=');
        if (eq == std::string::npos)
            throw ConfigError(strf("bad --scales entry '%s' (expected key=value)", item.c_str()));
        std::string key = item.substr(0, eq);
        double value = std::stod(item.substr(eq + 1));
        if (key == "mad") s.mad_scale = value;
        else if (key == "mse") s.mse_scale = value;
        else if (key == "sad") s.sad_scale = value;
        else if (key == "grad") s.grad_scale = value;
        else if (key == "conn") s.conn_scale = value;
        else if (key == "dtssd") s.dtssd_scale = value;
        else throw ConfigError(strf("unknown scale '%s'", key.c_str()));
    }
    return s;
}

std::vector<int> parse_step_list(const std::string& spec) {
    std::vector<int> steps;
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) steps.push_back(std::stoi(item));
    if (steps.empty()) throw ConfigError("empty step list");
    return steps;
}

void write_alpha_dir(const fs::path& out_dir, const AlphaSequence& alpha) {
    for (int t = 0; t < alpha.t(); ++t)
        write_png(out_dir / "alpha" / strf("%05d.png", t), frame_to_image(alpha.alphas, t));
}

/// Gray frames either directly in `dir` (%05d.png) or under dir/alpha.
AlphaSequence read_gray_dir(const fs::path& dir) {
    if (!fs::exists(dir / "00000.png")) return read_clip_alpha(dir);
    int T = 0;
    while (fs::exists(dir / strf("%05d.png", T))) ++T;
    Image8 first = read_png(dir / "00000.png");
    Tensor4d frames(T, 1, first.height, first.width);
    image_to_frame(first, frames, 0);
    for (int t = 1; t < T; ++t) image_to_frame(read_png(dir / strf("%05d.png", t)), frames, t);
    return AlphaSequence(std::move(frames));
}

int run(int argc, char** argv) {
    CLI::App app{"flowmatte: latent flow-matching video matting, desk scale"};
    app.require_subcommand(1);

    std::string config_path;

    // generate-data
    auto* gen = app.add_subcommand("generate-data", "render the procedural datasets");
    gen->add_option("config", config_path, "pipeline config JSON (defaults when omitted)");

    // train-codec
    auto* tc = app.add_subcommand("train-codec", "train and freeze the latent codec");
    tc->add_option("config", config_path);

    // train
    auto* tr = app.add_subcommand("train", "run the three-stage training protocol");
    std::string stage_sel = "all";
    tr->add_option("--stage", stage_sel, "1|2|3|all")->capture_default_str();
    tr->add_option("config", config_path);

    // infer
    auto* inf = app.add_subcommand("infer", "predict alpha mattes for a clip directory");
    std::string in_dir, out_dir, model_path, codec_path, timing_steps;
    int steps = 3;
    std::uint64_t seed = 0;
    inf->add_option("--input", in_dir, "clip directory (rgb/%05d.png)")->required();
    inf->add_option("--output", out_dir, "output clip directory")->required();
    inf->add_option("--steps", steps, "Euler steps")->capture_default_str();
    inf->add_option("--seed", seed, "noise seed")->capture_default_str();
    inf->add_option("--model", model_path, "checkpoint (default: latest in run_dir)");
    inf->add_option("--codec", codec_path, "codec checkpoint (default: run_dir/codec.bin)");
    inf->add_option("--timing-steps", timing_steps,
                    "comma-separated step counts: report wall time per clip instead");
    inf->add_option("--config", config_path);

    // eval
    auto* ev = app.add_subcommand("eval", "score predictions against a ground-truth manifest");
    std::string pred_dir, gt_manifest, scales_spec, eval_out;
    ev->add_option("--pred", pred_dir, "predictions directory")->required();
    ev->add_option("--gt", gt_manifest, "ground-truth dataset manifest (dir or json)")
        ->required();
    ev->add_option("--scales", scales_spec, "override metric scales, e.g. mad=1e3,sad=1e-3");
    ev->add_option("--out", eval_out, "also write csv/json reports here");

    // ablate
    auto* ab = app.add_subcommand("ablate", "train and score ablation variants");
    std::string plan_path, ablate_out;
    ab->add_option("plan", plan_path, "ablation plan JSON ('default' for the built-in plan)")
        ->required();
    ab->add_option("--config", config_path);
    ab->add_option("--out", ablate_out, "output directory (default: run_dir/ablation)");

    // defocus
    auto* df = app.add_subcommand("defocus", "depth-weighted background blur demo");
    std::string df_in, df_alpha, df_depth, df_out;
    double df_depth_const = 1.0, df_strength = 2.0;
    df->add_option("--input", df_in, "clip directory")->required();
    df->add_option("--alpha", df_alpha, "alpha clip directory")->required();
    df->add_option("--depth", df_depth, "optional depth clip directory (gray pngs)");
    df->add_option("--depth-const", df_depth_const, "constant depth when no map is given")
        ->capture_default_str();
    df->add_option("--strength", df_strength, "blur strength (sigma at depth 1)")
        ->capture_default_str();
    df->add_option("--output", df_out, "output clip directory")->required();

    CLI11_PARSE(app, argc, argv);

    if (gen->parsed()) {
        generate_data(config_from(config_path));
        return 0;
    }

    if (tc->parsed()) {
        PipelineConfig cfg = config_from(config_path);
        CodecTrainReport report = run_train_codec(cfg);
        std::cout << strf("codec: holdout PSNR %.2f dB (rgb %.2f, alpha %.2f), floor %.2f\n",
                          report.holdout_psnr, report.holdout_psnr_rgb,
                          report.holdout_psnr_alpha, report.floor);
        require_codec_floor(report);
        return 0;
    }

    if (tr->parsed()) {
        run_training_stages(config_from(config_path), stage_sel);
        return 0;
    }

    if (inf->parsed()) {
        PipelineConfig cfg = config_from(config_path);
        LatentCodec codec = codec_path.empty() ? load_run_codec(cfg)
                                               : LatentCodec::load(codec_path);
        fs::path ckpt = model_path.empty() ? latest_checkpoint(cfg) : fs::path(model_path);
        TrainState st = load_train_checkpoint(ckpt, std::move(codec));

        if (!timing_steps.empty()) {
            DatasetManifest m = load_manifest(in_dir);
            auto rows = timing_harness(m, st.model, st.codec, parse_step_list(timing_steps),
                                       seed, cfg.chunking);
            std::cout << timing_table(rows);
            return 0;
        }

        VideoClip clip = read_clip_rgb(in_dir);
        SamplerConfig sampler{steps, seed};
        AlphaSequence alpha = infer(clip, st.model, st.codec, sampler, cfg.chunking);
        write_alpha_dir(out_dir, alpha);
        nlohmann::ordered_json snap{{"input", in_dir},
                                    {"model", ckpt.string()},
                                    {"steps", steps},
                                    {"seed", seed},
                                    {"chunk_len", cfg.chunking.chunk_len},
                                    {"overlap", cfg.chunking.overlap}};
        fs::create_directories(out_dir);
        std::ofstream(fs::path(out_dir) / "infer_config.json") << snap.dump(2) << "\n";
        std::cout << "wrote " << alpha.t() << " matte frames to " << out_dir << "\n";
        return 0;
    }

    if (ev->parsed()) {
        DatasetManifest gt = load_manifest(gt_manifest);
        MetricReport report = evaluate(gt, pred_dir, parse_scales(scales_spec));
        std::cout << report_table(report);
        if (!eval_out.empty()) {
            fs::create_directories(eval_out);
            std::ofstream(fs::path(eval_out) / "metrics.csv") << report_csv(report);
            std::ofstream(fs::path(eval_out) / "metrics.json") << report_json(report);
        }
        return 0;
    }

    if (ab->parsed()) {
        PipelineConfig cfg = config_from(config_path);
        AblationPlan plan =
            plan_path == "default" ? default_ablation_plan(cfg) : load_ablation_plan(plan_path);
        StageRunContext ctx;
        ctx.datasets = load_datasets(cfg);
        ctx.weights = cfg.weights;
        LatentCodec codec = load_run_codec(cfg);
        fs::path out = ablate_out.empty() ? cfg.run_dir / "ablation" : fs::path(ablate_out);
        auto rows = run_ablation(plan, cfg.denoiser, codec, ctx, out);
        std::cout << ablation_table(rows);
        for (const auto& r : rows)
            if (r.failed) return 3;
        return 0;
    }

    if (df->parsed()) {
        VideoClip clip = read_clip_rgb(df_in);
        AlphaSequence alpha = read_gray_dir(df_alpha);
        VideoClip out;
        if (!df_depth.empty()) {
            out = defocus(clip, alpha, read_gray_dir(df_depth).alphas, df_strength);
        } else {
            out = defocus(clip, alpha, df_depth_const, df_strength);
        }
        for (int t = 0; t < out.t(); ++t)
            write_png(fs::path(df_out) / "rgb" / strf("%05d.png", t),
                      frame_to_image(out.frames, t));
        std::cout << "wrote " << out.t() << " defocused frames to " << df_out << "\n";
        return 0;
    }

    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const ParamError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
