#include "flowmatte/train.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "flowmatte/image_io.hpp"

namespace flowmatte {

namespace fs = std::filesystem;
using ad::Tape;
using ad::Var;

void validate_stage(const StageConfig& cfg) {
    auto has = [&](const char* s) {
        return std::find(cfg.frozen_sets.begin(), cfg.frozen_sets.end(), s) !=
               cfg.frozen_sets.end();
    };
    if (cfg.name == "stage1") {
        if (!cfg.frozen_sets.empty())
            throw ConfigError("stage1 optimizes all parameters; frozen_sets must be empty");
        if (cfg.losses.pixel)
            throw ConfigError("stage1 uses the flow-matching loss only (losses.pixel=false)");
    } else if (cfg.name == "stage2") {
        if (!has("temporal"))
            throw ConfigError("stage2 must freeze the temporal layers");
    } else if (cfg.name == "stage3") {
        if (!has("all_base"))
            throw ConfigError("stage3 must freeze the whole base network (all_base)");
        if (!cfg.lora.has_value()) throw ConfigError("stage3 requires a lora config");
        if (!cfg.losses.pixel) throw ConfigError("stage3 requires pixel losses");
    } else {
        throw ConfigError(strf("unknown stage name '%s'", cfg.name.c_str()));
    }
    if (cfg.iterations < 0) throw ConfigError("iterations must be >= 0");
    if (cfg.learning_rate <= 0) throw ConfigError("learning_rate must be > 0");
    if (cfg.pixel_loss_probability < 0 || cfg.pixel_loss_probability > 1)
        throw ConfigError("pixel_loss_probability must be in [0,1]");
    if (cfg.batch < 1) throw ConfigError("batch must be >= 1");
    if (cfg.mixture.empty()) throw ConfigError("stage mixture is empty");
    if (cfg.resolutions.empty()) throw ConfigError("stage resolutions are empty");
    if (cfg.length_min < 1 || cfg.length_min > cfg.length_max)
        throw ConfigError("invalid length range");
}

const ClipCache::Entry& ClipCache::get(const DatasetManifest& manifest, int clip_index) {
    const auto& clip = manifest.clips.at(std::size_t(clip_index));
    std::string key = (manifest.root / clip.path).string();
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    Entry e;
    e.rgb = read_clip_rgb(manifest.root / clip.path);
    e.alpha = read_clip_alpha(manifest.root / clip.path);
    return cache_.emplace(std::move(key), std::move(e)).first->second;
}

LossReport train_step(TrainState& st, const std::vector<TrainingSample>& batch,
                      const LossWeights& weights, const StageConfig& stage) {
    if (batch.empty()) throw ParamError("train_step: empty batch");
    if (st.codec.checksum() != st.codec_hash)
        throw NumericError("train_step: codec parameters changed (frozen-codec contract)");
    st.model.params().zero_grads();

    const double inv_b = 1.0 / double(batch.size());
    LossReport avg;
    for (const auto& sample : batch) {
        LatentSequence z_c = st.codec.encode_clip(sample.rgb);
        LatentSequence z_a = st.codec.encode_matte(sample.alpha);
        double t = sample_time(st.rng);
        Tensor4d eps = Tensor4d::random_normal(z_a.codes.t, z_a.codes.c, z_a.codes.h,
                                               z_a.codes.w, st.rng);
        Tensor4d phi = corrupt(z_a.codes, eps, t);

        Tape tape;
        Var phi_v = tape.input(phi);
        Var zc_v = tape.input(z_c.codes);
        Var v = st.model.forward_on_tape(tape, phi_v, zc_v, t);
        Var latent_v = latent_fm_loss(tape, v, z_a.codes, eps);
        double latent_val = tape.value(latent_v).data[0];
        if (!std::isfinite(latent_val))
            throw NumericError(strf("train_step: non-finite flow-matching loss at iteration %lld",
                                    static_cast<long long>(st.iteration)));

        Var total_v = latent_v;
        PixelLossParts parts;
        bool do_pixel = stage.losses.pixel && sample.pixel_loss_enabled &&
                        weights.lambda_pixel > 0;
        if (do_pixel && stage.pixel_loss_probability < 1.0)
            do_pixel = st.rng.uniform() < stage.pixel_loss_probability;
        if (do_pixel) {
            FlowState state{t, phi};
            Var alpha_hat = decode_for_pixel_loss(tape, state, v, st.codec);
            PixelLossVars pv =
                pixel_loss(tape, alpha_hat, tape.constant(sample.alpha.alphas), weights);
            parts.l1 = tape.value(pv.l1).data[0];
            parts.lap = tape.value(pv.lap).data[0];
            parts.gp = tape.value(pv.gp).data[0];
            parts.pixel = tape.value(pv.pixel).data[0];
            if (!std::isfinite(parts.pixel)) {
                const char* which = !std::isfinite(parts.l1)    ? "l1"
                                    : !std::isfinite(parts.lap) ? "laplacian"
                                                                : "gradient-penalty";
                throw NumericError(strf("train_step: non-finite %s pixel loss at iteration %lld",
                                        which, static_cast<long long>(st.iteration)));
            }
            total_v = ad::add(tape, latent_v, ad::scale(tape, pv.pixel, weights.lambda_pixel));
        }

        tape.backward(ad::scale(tape, total_v, inv_b));

        avg.latent += latent_val * inv_b;
        avg.l1 += parts.l1 * inv_b;
        avg.lap += parts.lap * inv_b;
        avg.gp += parts.gp * inv_b;
        avg.total += total_loss(latent_val, parts.pixel, weights, do_pixel) * inv_b;
    }

    st.opt.step(st.model.params());
    ++st.iteration;
    return avg;
}

namespace {

MixtureConfig build_mixture(const std::vector<MixtureEntrySpec>& specs,
                            const std::map<std::string, DatasetManifest>& datasets) {
    MixtureConfig cfg;
    for (const auto& s : specs) {
        auto it = datasets.find(s.dataset);
        if (it == datasets.end())
            throw ConfigError(strf("mixture references unknown dataset '%s'", s.dataset.c_str()));
        cfg.entries.push_back({&it->second, s.ratio, s.pixel_loss});
    }
    return cfg;
}

// Longer sequences at lower resolution: cap the max length by the bucket
// area relative to the 64x64 reference.
int coupled_length_max(int length_min, int length_max, int h, int w) {
    double cap = double(length_max) * (64.0 * 64.0) / (double(h) * w);
    int eff = std::min(length_max, std::max(length_min, int(std::floor(cap))));
    return eff;
}

std::vector<TrainingSample> assemble_batch(TrainState& st, const StageConfig& cfg,
                                           const MixtureSampler& sampler, StageRunContext& ctx) {
    std::vector<TrainingSample> batch;
    for (int b = 0; b < cfg.batch; ++b) {
        MixtureDraw draw = sampler.next(st.rng);
        const auto& entry = ctx.cache.get(*draw.manifest, draw.clip_index);
        auto [h, w] = cfg.resolutions[st.rng.uniform_int(0, int(cfg.resolutions.size()) - 1)];
        int len_max = coupled_length_max(cfg.length_min, cfg.length_max, h, w);
        int length = sample_sequence_length(st.rng, cfg.length_min, len_max);
        TrainingSample s = crop_resize_batch(entry.rgb, entry.alpha, st.rng, h, w, length);
        s.pixel_loss_enabled = draw.pixel_loss_enabled;
        batch.push_back(std::move(s));
    }
    return batch;
}

}  // namespace

void run_stage(const StageConfig& cfg, TrainState& st, StageRunContext& ctx,
               const fs::path& run_dir) {
    validate_stage(cfg);
    MixtureSampler sampler(build_mixture(cfg.mixture, ctx.datasets));

    const int div = st.codec.config().spatial_factor * st.model.latent_divisor();
    for (auto [h, w] : cfg.resolutions)
        if (h % div != 0 || w % div != 0)
            throw ConfigError(strf("resolution %dx%d not divisible by %d (codec x unet)", h, w,
                                   div));

    // stage contracts
    st.model.unfreeze("all");
    if (cfg.lora && !st.model.lora_injected()) st.model.inject_lora(*cfg.lora);
    for (const auto& s : cfg.frozen_sets) st.model.freeze(s);
    st.opt.set_lr(cfg.learning_rate);
    st.stage_name = cfg.name;

    fs::create_directories(run_dir);
    std::ofstream log(run_dir / (cfg.name + "_log.jsonl"), std::ios::app);
    for (int iter = 0; iter < cfg.iterations; ++iter) {
        auto batch = assemble_batch(st, cfg, sampler, ctx);
        LossReport r = train_step(st, batch, ctx.weights, cfg);
        nlohmann::ordered_json j{{"stage", cfg.name},     {"iteration", st.iteration},
                                 {"latent", r.latent},    {"l1", r.l1},
                                 {"lap", r.lap},          {"gp", r.gp},
                                 {"total", r.total}};
        log << j.dump() << "\n";
    }
    log.flush();
    save_train_checkpoint(run_dir / (cfg.name + ".ckpt"), st);
}

void save_train_checkpoint(const fs::path& path, const TrainState& st) {
    fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError(strf("cannot write checkpoint %s", path.string().c_str()));
    os.write("FMTR", 4);
    write_pod(os, std::int32_t(1));
    write_string(os, st.stage_name);
    write_pod(os, st.iteration);
    write_pod(os, st.opt.iteration());
    write_pod(os, st.opt.lr());
    st.rng.save(os);
    write_pod(os, st.codec_hash);
    st.model.save(os);
}

TrainState load_train_checkpoint(const fs::path& path, LatentCodec codec) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError(strf("cannot read checkpoint %s", path.string().c_str()));
    char magic[4];
    is.read(magic, 4);
    if (std::string(magic, 4) != "FMTR")
        throw IoError(strf("%s is not a training checkpoint", path.string().c_str()));
    int version = read_pod<std::int32_t>(is);
    if (version != 1) throw IoError(strf("unsupported checkpoint version %d", version));
    std::string stage_name = read_string(is);
    auto iteration = read_pod<std::int64_t>(is);
    auto opt_iter = read_pod<std::int64_t>(is);
    auto lr = read_pod<double>(is);
    Rng rng(0);
    rng.load(is);
    auto codec_hash = read_pod<std::uint64_t>(is);
    Denoiser model = Denoiser::load(is);

    TrainState st(std::move(model), std::move(codec), 0);
    if (st.codec_hash != codec_hash)
        throw ConfigError(strf("checkpoint %s was trained against a different codec",
                               path.string().c_str()));
    st.rng = rng;
    st.iteration = iteration;
    st.opt.set_iteration(opt_iter);
    st.opt.set_lr(lr);
    st.stage_name = stage_name;
    return st;
}

// ---- inference ----

namespace {

VideoClip replicate_pad(const VideoClip& clip, int target_h, int target_w) {
    if (clip.height() == target_h && clip.width() == target_w) return clip;
    Tensor4d out(clip.t(), 3, target_h, target_w);
    for (int t = 0; t < clip.t(); ++t)
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < target_h; ++y)
                for (int x = 0; x < target_w; ++x)
                    out(t, c, y, x) = clip.frames(t, c, std::min(y, clip.height() - 1),
                                                  std::min(x, clip.width() - 1));
    return VideoClip(std::move(out));
}

}  // namespace

AlphaSequence infer_single(const VideoClip& clip, const Denoiser& model, const LatentCodec& codec,
                           const SamplerConfig& sampler) {
    if (clip.t() < 1) throw ParamError("infer: empty clip");
    const int H = clip.height(), W = clip.width();
    const int div = codec.config().spatial_factor * model.latent_divisor();
    const int ph = (H + div - 1) / div * div;
    const int pw = (W + div - 1) / div * div;
    VideoClip padded = replicate_pad(clip, ph, pw);

    LatentSequence z_c = codec.encode_clip(padded);
    VelocityFn field = [&](const Tensor4d& phi, const Tensor4d& zc, double t) {
        return model.forward(phi, zc, t);
    };
    Tensor4d z_hat = euler_sample(field, z_c.codes, codec.config().latent_channels, sampler);
    AlphaSequence alpha = codec.decode_matte({z_hat, codec.config().spatial_factor});

    if (ph == H && pw == W) return alpha;
    Tensor4d cropped(alpha.t(), 1, H, W);
    for (int t = 0; t < alpha.t(); ++t)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) cropped(t, 0, y, x) = alpha.alphas(t, 0, y, x);
    return AlphaSequence(std::move(cropped));
}

AlphaSequence infer(const VideoClip& clip, const Denoiser& model, const LatentCodec& codec,
                    const SamplerConfig& sampler, const ChunkingConfig& chunking) {
    if (clip.t() < 1) throw ParamError("infer: empty clip");
    const int T = clip.t();
    const int L = chunking.chunk_len;
    if (L < 1) throw ParamError("infer: chunk_len must be >= 1");
    const int overlap = std::clamp(chunking.overlap, 0, L - 1);

    Tensor4d out(T, 1, clip.height(), clip.width());
    std::vector<double> weight(std::size_t(T), 0.0);

    int chunk_index = 0;
    int start = 0;
    while (true) {
        int len = std::min(L, T - start);
        Tensor4d sub(len, 3, clip.height(), clip.width());
        for (int i = 0; i < len; ++i) sub.set_frame(i, clip.frames.frame(start + i));
        SamplerConfig chunk_cfg = sampler;
        chunk_cfg.seed = Rng::derive(sampler.seed, std::uint64_t(chunk_index));
        AlphaSequence piece = infer_single(VideoClip(std::move(sub)), model, codec, chunk_cfg);

        for (int i = 0; i < len; ++i) {
            int t = start + i;
            double w = 1.0;
            if (overlap > 0 && chunk_index > 0 && i < overlap)
                w = double(i + 1) / double(overlap + 1);  // fade this chunk in
            const std::int64_t fs = out.frame_size();
            if (weight[t] == 0.0) {
                out.data.segment(t * fs, fs) = piece.alphas.data.segment(i * fs, fs);
                weight[t] = 1.0;
            } else {
                out.data.segment(t * fs, fs) =
                    (1.0 - w) * out.data.segment(t * fs, fs) +
                    w * piece.alphas.data.segment(std::int64_t(i) * fs, fs);
            }
        }
        if (start + len >= T) break;
        start += L - overlap;
        if (start >= T) break;
        ++chunk_index;
    }
    return AlphaSequence(std::move(out));
}

std::vector<TimingRow> timing_harness(const DatasetManifest& manifest, const Denoiser& model,
                                      const LatentCodec& codec,
                                      const std::vector<int>& step_counts, std::uint64_t seed,
                                      const ChunkingConfig& chunking) {
    std::vector<TimingRow> rows;
    for (int steps : step_counts) {
        TimingRow row;
        row.steps = steps;
        auto t0 = std::chrono::steady_clock::now();
        for (const auto& clip : manifest.clips) {
            VideoClip rgb = read_clip_rgb(manifest.root / clip.path);
            SamplerConfig cfg{steps, seed};
            infer(rgb, model, codec, cfg, chunking);
            ++row.clips;
        }
        auto t1 = std::chrono::steady_clock::now();
        row.seconds_per_clip =
            std::chrono::duration<double>(t1 - t0).count() / std::max(1, row.clips);
        rows.push_back(row);
    }
    return rows;
}

std::string timing_table(const std::vector<TimingRow>& rows) {
    std::string out = strf("%8s %16s %8s\n", "steps", "sec/clip", "clips");
    for (const auto& r : rows)
        out += strf("%8d %16.3f %8d\n", r.steps, r.seconds_per_clip, r.clips);
    return out;
}

// ---- defocus ----

namespace {

// Separable Gaussian with truncated-kernel renormalization at the borders;
// exact identity when sigma <= 0.
void blur_frame(const Tensor4d& src, int t, Tensor4d& dst, const Tensor4d& sigma_map) {
    const int H = src.h, W = src.w, C = src.c;
    Eigen::ArrayXXd tmp(H, W);
    for (int c = 0; c < C; ++c) {
        // horizontal
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double sigma = sigma_map(std::min(t, sigma_map.t - 1), 0, y, x);
                if (sigma <= 1e-9) {
                    tmp(y, x) = src(t, c, y, x);
                    continue;
                }
                int r = int(std::ceil(3.0 * sigma));
                double acc = 0, wsum = 0;
                for (int d = -r; d <= r; ++d) {
                    int xx = x + d;
                    if (xx < 0 || xx >= W) continue;
                    double wgt = std::exp(-0.5 * d * d / (sigma * sigma));
                    acc += wgt * src(t, c, y, xx);
                    wsum += wgt;
                }
                tmp(y, x) = acc / wsum;
            }
        // vertical
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double sigma = sigma_map(std::min(t, sigma_map.t - 1), 0, y, x);
                if (sigma <= 1e-9) {
                    dst(t, c, y, x) = tmp(y, x);
                    continue;
                }
                int r = int(std::ceil(3.0 * sigma));
                double acc = 0, wsum = 0;
                for (int d = -r; d <= r; ++d) {
                    int yy = y + d;
                    if (yy < 0 || yy >= H) continue;
                    double wgt = std::exp(-0.5 * d * d / (sigma * sigma));
                    acc += wgt * tmp(yy, x);
                    wsum += wgt;
                }
                dst(t, c, y, x) = acc / wsum;
            }
    }
}

}  // namespace

VideoClip defocus(const VideoClip& clip, const AlphaSequence& alpha, const Tensor4d& depth,
                  double strength) {
    if (strength < 0) throw ParamError("defocus: strength must be >= 0");
    if (alpha.t() != clip.t() || alpha.height() != clip.height() ||
        alpha.width() != clip.width())
        throw ShapeError("defocus: alpha not aligned with clip");
    if (depth.c != 1 || depth.h != clip.height() || depth.w != clip.width() ||
        (depth.t != 1 && depth.t != clip.t()))
        throw ShapeError("defocus: depth not aligned with clip");
    if (strength == 0.0) return clip;

    // normalize depth to [0,1]
    Tensor4d sigma_map = depth;
    double mn = depth.data.minCoeff(), mx = depth.data.maxCoeff();
    if (mx > mn) {
        sigma_map.data = (depth.data - mn) / (mx - mn) * strength;
    } else {
        sigma_map.data.setConstant(std::clamp(mn, 0.0, 1.0) * strength);
    }

    Tensor4d blurred(clip.t(), 3, clip.height(), clip.width());
    for (int t = 0; t < clip.t(); ++t) blur_frame(clip.frames, t, blurred, sigma_map);
    return composite(clip, VideoClip(std::move(blurred), clip.fps), alpha);
}

VideoClip defocus(const VideoClip& clip, const AlphaSequence& alpha, double constant_depth,
                  double strength) {
    Tensor4d depth = Tensor4d::constant(1, 1, clip.height(), clip.width(), constant_depth);
    return defocus(clip, alpha, depth, strength);
}

// ---- ablation harness ----

namespace {

StageConfig phase_config(const AblationPlan& plan, const std::string& name,
                         const std::vector<MixtureEntrySpec>& mixture, bool pixel, bool lora,
                         int iterations) {
    StageConfig cfg;
    cfg.name = name;
    cfg.mixture = mixture;
    cfg.resolutions = {plan.resolution};
    cfg.learning_rate = plan.learning_rate;
    cfg.losses.pixel = pixel;
    cfg.iterations = iterations;
    cfg.length_min = plan.length_min;
    cfg.length_max = plan.length_max;
    cfg.batch = plan.batch;
    if (lora) {
        cfg.frozen_sets = {"all_base"};
        LoraConfig lc;
        lc.rank = 8;
        cfg.lora = lc;
    }
    return cfg;
}

}  // namespace

std::vector<AblationRow> run_ablation(const AblationPlan& plan, const DenoiserConfig& model_cfg,
                                      const LatentCodec& codec, StageRunContext& ctx,
                                      const fs::path& out_dir) {
    fs::create_directories(out_dir);
    auto eval_it = ctx.datasets.find(plan.eval_dataset);
    if (eval_it == ctx.datasets.end())
        throw ConfigError(strf("ablation eval dataset '%s' unknown", plan.eval_dataset.c_str()));
    const DatasetManifest& eval_set = eval_it->second;

    std::vector<AblationRow> rows;
    for (const auto& variant : plan.variants) {
        AblationRow row;
        row.name = variant.name;
        try {
            TrainState st(Denoiser(model_cfg), codec, Rng::derive(plan.seed, rows.size()));

            if (!variant.pretrain_mixture.empty() && plan.pretrain_iterations > 0) {
                // phase 1: flow-matching only, everything trainable
                StageConfig p1 = phase_config(plan, "stage1", variant.pretrain_mixture, false,
                                              false, plan.pretrain_iterations);
                MixtureSampler sampler(build_mixture(p1.mixture, ctx.datasets));
                st.opt.set_lr(p1.learning_rate);
                for (int i = 0; i < p1.iterations; ++i)
                    train_step(st, assemble_batch(st, p1, sampler, ctx), ctx.weights, p1);
            }

            if (plan.finetune_iterations > 0) {
                StageConfig p2 = phase_config(plan, variant.lora ? "stage3" : "stage1",
                                              variant.finetune_mixture, variant.pixel_losses,
                                              variant.lora, plan.finetune_iterations);
                // mini-protocol: apply the freeze/LoRA contracts directly
                // instead of going through run_stage's name validation
                if (variant.lora && !st.model.lora_injected()) st.model.inject_lora(*p2.lora);
                st.model.unfreeze("all");
                for (const auto& s : p2.frozen_sets) st.model.freeze(s);
                MixtureSampler sampler(build_mixture(p2.mixture, ctx.datasets));
                st.opt.set_lr(p2.learning_rate);
                for (int i = 0; i < p2.iterations; ++i)
                    train_step(st, assemble_batch(st, p2, sampler, ctx), ctx.weights, p2);
            }

            // evaluate on the held-out dataset
            fs::path pred_dir = out_dir / ("pred_" + variant.name);
            for (const auto& clip : eval_set.clips) {
                VideoClip rgb = read_clip_rgb(eval_set.root / clip.path);
                AlphaSequence pred = infer(rgb, st.model, st.codec, plan.sampler);
                for (int t = 0; t < pred.t(); ++t)
                    write_png(pred_dir / clip.path / "alpha" / strf("%05d.png", t),
                              frame_to_image(pred.alphas, t));
            }
            MetricReport report = evaluate(eval_set, pred_dir, MetricScales{});
            row.metrics = report.aggregate;
            row.metrics.clip = variant.name;
        } catch (const std::exception& e) {
            row.failed = true;
            row.error = e.what();
        }
        rows.push_back(std::move(row));
    }

    std::ofstream table(out_dir / "ablation_table.txt");
    table << ablation_table(rows);
    std::ofstream csv(out_dir / "ablation.csv");
    csv << "variant,mad,mse,grad,conn,dtssd,failed\n";
    for (const auto& r : rows)
        csv << strf("%s,%.6f,%.6f,%.6f,%.6f,%.6f,%d\n", r.name.c_str(), r.metrics.mad,
                    r.metrics.mse, r.metrics.grad, r.metrics.conn, r.metrics.dtssd,
                    r.failed ? 1 : 0);
    return rows;
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
    std::string out = strf("%-24s %10s %10s %10s %10s %10s\n", "variant", "MAD", "MSE", "Grad",
                           "Conn", "dtSSD");
    for (const auto& r : rows) {
        if (r.failed) {
            out += strf("%-24s FAILED: %s\n", r.name.c_str(), r.error.c_str());
        } else {
            out += strf("%-24s %10.4f %10.4f %10.4f %10.4f %10.4f\n", r.name.c_str(),
                        r.metrics.mad, r.metrics.mse, r.metrics.grad, r.metrics.conn,
                        r.metrics.dtssd);
        }
    }
    return out;
}

}  // namespace flowmatte
