#include "flowmatte/codec.hpp"

#include <cmath>
#include <fstream>
#include <iostream>

#include "flowmatte/image_io.hpp"
#include "flowmatte/metrics.hpp"
#include "flowmatte/synth.hpp"

namespace flowmatte {

using ad::Tape;
using ad::Var;

namespace {

Tensor4d kaiming_conv(Rng& rng, int cout, int cin, int k) {
    double std_dev = std::sqrt(2.0 / (double(cin) * k * k));
    return Tensor4d::random_normal(cout, cin, k, k, rng, std_dev);
}

int ilog2(int v) {
    int l = 0;
    while ((1 << l) < v) ++l;
    return l;
}

}  // namespace

LatentCodec::LatentCodec(CodecConfig cfg) : cfg_(cfg) {
    if (cfg_.spatial_factor < 2 || (cfg_.spatial_factor & (cfg_.spatial_factor - 1)) != 0)
        throw ConfigError(strf("codec: spatial_factor %d is not a power of two >= 2",
                               cfg_.spatial_factor));
    levels_ = ilog2(cfg_.spatial_factor);
    build();
}

void LatentCodec::build() {
    Rng rng(cfg_.seed);
    const int base = cfg_.base_channels;
    auto ch = [&](int i) { return base << std::min(i, 2); };

    int cin = 3;
    for (int i = 0; i < levels_; ++i) {
        store_.add(strf("enc.down%d.w", i), ParamRole::Spatial, kaiming_conv(rng, ch(i), cin, 3));
        store_.add(strf("enc.down%d.b", i), ParamRole::Spatial, Tensor4d(1, ch(i), 1, 1));
        cin = ch(i);
    }
    store_.add("enc.mid.w", ParamRole::Spatial, kaiming_conv(rng, cin, cin, 3));
    store_.add("enc.mid.b", ParamRole::Spatial, Tensor4d(1, cin, 1, 1));
    store_.add("enc.out.w", ParamRole::Spatial, kaiming_conv(rng, cfg_.latent_channels, cin, 3));
    store_.add("enc.out.b", ParamRole::Spatial, Tensor4d(1, cfg_.latent_channels, 1, 1));

    store_.add("dec.in.w", ParamRole::Spatial, kaiming_conv(rng, cin, cfg_.latent_channels, 3));
    store_.add("dec.in.b", ParamRole::Spatial, Tensor4d(1, cin, 1, 1));
    store_.add("dec.mid.w", ParamRole::Spatial, kaiming_conv(rng, cin, cin, 3));
    store_.add("dec.mid.b", ParamRole::Spatial, Tensor4d(1, cin, 1, 1));
    for (int i = levels_ - 1; i >= 0; --i) {
        int cout = i > 0 ? ch(i - 1) : ch(0);
        store_.add(strf("dec.up%d.w", i), ParamRole::Spatial, kaiming_conv(rng, cout, cin, 3));
        store_.add(strf("dec.up%d.b", i), ParamRole::Spatial, Tensor4d(1, cout, 1, 1));
        cin = cout;
    }
    store_.add("dec.out.w", ParamRole::Spatial, kaiming_conv(rng, 3, cin, 3));
    store_.add("dec.out.b", ParamRole::Spatial, Tensor4d(1, 3, 1, 1));
}

bool LatentCodec::frozen() const {
    for (const auto& p : store_.all())
        if (p.trainable) return false;
    return true;
}

void LatentCodec::freeze() {
    store_.set_all_trainable(false);
}

std::uint64_t LatentCodec::checksum() const {
    std::uint64_t h = store_.full_checksum();
    h = fnv1a(&clip_scale_, sizeof(clip_scale_), h);
    h = fnv1a(&matte_scale_, sizeof(matte_scale_), h);
    return h;
}

Var LatentCodec::encode_raw(Tape& tape, Var x) const {
    Var h = x;
    for (int i = 0; i < levels_; ++i) {
        h = ad::conv2d(tape, h, tape.param(store_.at(strf("enc.down%d.w", i))),
                       tape.param(store_.at(strf("enc.down%d.b", i))), 2, 1);
        h = ad::silu(tape, h);
    }
    h = ad::conv2d(tape, h, tape.param(store_.at("enc.mid.w")), tape.param(store_.at("enc.mid.b")),
                   1, 1);
    h = ad::silu(tape, h);
    return ad::conv2d(tape, h, tape.param(store_.at("enc.out.w")),
                      tape.param(store_.at("enc.out.b")), 1, 1);
}

Var LatentCodec::decode_raw(Tape& tape, Var z) const {
    Var h = ad::conv2d(tape, z, tape.param(store_.at("dec.in.w")),
                       tape.param(store_.at("dec.in.b")), 1, 1);
    h = ad::silu(tape, h);
    h = ad::conv2d(tape, h, tape.param(store_.at("dec.mid.w")), tape.param(store_.at("dec.mid.b")),
                   1, 1);
    h = ad::silu(tape, h);
    for (int i = levels_ - 1; i >= 0; --i) {
        h = ad::nearest_up2(tape, h);
        h = ad::conv2d(tape, h, tape.param(store_.at(strf("dec.up%d.w", i))),
                       tape.param(store_.at(strf("dec.up%d.b", i))), 1, 1);
        h = ad::silu(tape, h);
    }
    return ad::conv2d(tape, h, tape.param(store_.at("dec.out.w")),
                      tape.param(store_.at("dec.out.b")), 1, 1);
}

Var LatentCodec::encode_on_tape(Tape& tape, Var x) const {
    Var z = encode_raw(tape, x);
    return clip_scale_ == 1.0 ? z : ad::scale(tape, z, clip_scale_);
}

Var LatentCodec::decode_on_tape(Tape& tape, Var z) const {
    Var raw = clip_scale_ == 1.0 ? z : ad::scale(tape, z, 1.0 / clip_scale_);
    return decode_raw(tape, raw);
}

Var LatentCodec::decode_matte_on_tape(Tape& tape, Var z) const {
    Var raw = matte_scale_ == 1.0 ? z : ad::scale(tape, z, 1.0 / matte_scale_);
    Var rgb = decode_raw(tape, raw);
    return ad::decode_range01(tape, ad::mean_c(tape, rgb));
}

LatentSequence LatentCodec::encode(const Tensor4d& x) const {
    if (x.c != 3) throw ShapeError(strf("encode: expected 3 channels, got %d", x.c));
    if (x.h % cfg_.spatial_factor != 0 || x.w % cfg_.spatial_factor != 0)
        throw ShapeError(strf("encode: %dx%d not divisible by spatial_factor %d", x.h, x.w,
                              cfg_.spatial_factor));
    Tape tape;
    tape.grad_enabled = false;
    Var z = encode_on_tape(tape, tape.input(x));
    return LatentSequence{tape.value(z), cfg_.spatial_factor};
}

Tensor4d LatentCodec::decode(const LatentSequence& z) const {
    if (!z.codes.all_finite()) throw NumericError("decode: non-finite latent");
    Tape tape;
    tape.grad_enabled = false;
    Var y = decode_on_tape(tape, tape.input(z.codes));
    return tape.value(y);
}

LatentSequence LatentCodec::encode_clip(const VideoClip& clip) const {
    return encode(to_codec_range(clip.frames));
}

LatentSequence LatentCodec::encode_matte(const AlphaSequence& alpha) const {
    Tensor4d a = to_codec_range(alpha.alphas);
    Tensor4d rep(a.t, 3, a.h, a.w);
    for (int t = 0; t < a.t; ++t)
        for (int c = 0; c < 3; ++c)
            rep.data.segment(rep.idx(t, c, 0, 0), std::int64_t(a.h) * a.w) =
                a.data.segment(a.idx(t, 0, 0, 0), std::int64_t(a.h) * a.w);
    if (rep.h % cfg_.spatial_factor != 0 || rep.w % cfg_.spatial_factor != 0)
        throw ShapeError(strf("encode_matte: %dx%d not divisible by spatial_factor %d", rep.h,
                              rep.w, cfg_.spatial_factor));
    Tape tape;
    tape.grad_enabled = false;
    Var z = encode_raw(tape, tape.input(rep));
    Tensor4d codes = tape.value(z);
    codes.data *= matte_scale_;
    return LatentSequence{std::move(codes), cfg_.spatial_factor};
}

AlphaSequence LatentCodec::decode_matte(const LatentSequence& z) const {
    if (!z.codes.all_finite()) throw NumericError("decode_matte: non-finite latent");
    Tape tape;
    tape.grad_enabled = false;
    Var out = decode_matte_on_tape(tape, tape.input(z.codes));
    return AlphaSequence(tape.value(out));
}

namespace {

Tensor4d replicate3(const Tensor4d& gray) {
    Tensor4d rep(gray.t, 3, gray.h, gray.w);
    const std::int64_t fs = std::int64_t(gray.h) * gray.w;
    for (int t = 0; t < gray.t; ++t)
        for (int c = 0; c < 3; ++c)
            rep.data.segment(rep.idx(t, c, 0, 0), fs) = gray.data.segment(t * fs, fs);
    return rep;
}

}  // namespace

namespace {

double latent_std(const Tensor4d& codes) {
    double mean = codes.data.mean();
    return std::sqrt((codes.data - mean).square().mean());
}

}  // namespace

CodecTrainReport LatentCodec::train(const CodecDataset& data, const CodecTrainConfig& tcfg) {
    if (data.train_rgb.empty() && data.train_alpha.empty())
        throw ConfigError("codec train: empty dataset");
    Rng rng(tcfg.seed);
    AdamW opt(AdamWConfig{.lr = tcfg.lr, .weight_decay = 0.0});
    clip_scale_ = 1.0;
    matte_scale_ = 1.0;

    CodecTrainReport report;
    report.floor = tcfg.psnr_floor;
    report.iterations = tcfg.iterations;

    for (int iter = 0; iter < tcfg.iterations; ++iter) {
        // Mixed batch: rgb frames and replicated alpha frames.
        std::vector<const Tensor4d*> picks;
        std::vector<bool> is_alpha;
        for (int b = 0; b < tcfg.batch_frames; ++b) {
            bool alpha = !data.train_alpha.empty() &&
                         (data.train_rgb.empty() || rng.uniform() < 0.5);
            if (alpha) {
                picks.push_back(&data.train_alpha[rng.uniform_int(
                    0, int(data.train_alpha.size()) - 1)]);
            } else {
                picks.push_back(
                    &data.train_rgb[rng.uniform_int(0, int(data.train_rgb.size()) - 1)]);
            }
            is_alpha.push_back(alpha);
        }
        const Tensor4d& first = *picks[0];
        int bh = first.h, bw = first.w;
        if (tcfg.crop > 0) {
            bh = std::min(bh, tcfg.crop);
            bw = std::min(bw, tcfg.crop);
        }
        Tensor4d batch(int(picks.size()), 3, bh, bw);
        for (std::size_t b = 0; b < picks.size(); ++b) {
            Tensor4d rgb = is_alpha[b] ? replicate3(*picks[b]) : *picks[b];
            if (rgb.h < bh || rgb.w < bw)
                throw ShapeError("codec train: mixed frame resolutions in one batch");
            int y0 = rgb.h > bh ? rng.uniform_int(0, rgb.h - bh) : 0;
            int x0 = rgb.w > bw ? rng.uniform_int(0, rgb.w - bw) : 0;
            Tensor4d crop(1, 3, bh, bw);
            for (int c = 0; c < 3; ++c)
                for (int y = 0; y < bh; ++y)
                    for (int x = 0; x < bw; ++x) crop(0, c, y, x) = rgb(0, c, y0 + y, x0 + x);
            batch.set_frame(int(b), to_codec_range(crop));
        }

        Tape tape;
        Var x = tape.input(batch);
        Var z = encode_on_tape(tape, x);
        Var y = decode_on_tape(tape, z);
        Var loss = ad::mse(tape, y, x);
        double lval = tape.value(loss).data[0];
        if (!std::isfinite(lval))
            throw NumericError(strf("codec train: non-finite loss at iteration %d", iter));
        store_.zero_grads();
        tape.backward(loss);
        opt.step(store_);
        report.final_loss = lval;
    }

    // Calibrate per-route latent scales so downstream flow matching sees
    // roughly unit-variance codes. Round trips are unaffected.
    if (tcfg.iterations > 0) {
        auto route_std = [&](const std::vector<Tensor4d>& frames, bool alpha_route) {
            if (frames.empty()) return 1.0;
            double acc = 0;
            int used = 0;
            for (std::size_t i = 0; i < frames.size() && used < 48; ++i, ++used) {
                Tensor4d rgb = alpha_route ? replicate3(frames[i]) : frames[i];
                Tape tape;
                tape.grad_enabled = false;
                Var z = encode_raw(tape, tape.input(to_codec_range(rgb)));
                acc += latent_std(tape.value(z));
            }
            return acc / used;
        };
        double rgb_std = route_std(data.train_rgb, false);
        double alpha_std = route_std(data.train_alpha, true);
        if (rgb_std > 1e-6) clip_scale_ = 1.0 / rgb_std;
        if (alpha_std > 1e-6) matte_scale_ = 1.0 / alpha_std;
    }

    // Held-out round-trip PSNR in [0,1] space, per frame then averaged.
    auto eval_split = [&](const std::vector<Tensor4d>& frames, bool alpha_route) {
        if (frames.empty()) return 0.0;
        double acc = 0;
        for (const auto& f : frames) {
            if (alpha_route) {
                AlphaSequence a(f);
                AlphaSequence rec = decode_matte(encode_matte(a));
                acc += psnr(rec.alphas, f);
            } else {
                Tensor4d rec = from_codec_range(decode(encode(to_codec_range(f))));
                acc += psnr(rec, f);
            }
        }
        return acc / double(frames.size());
    };
    report.holdout_psnr_rgb = eval_split(data.holdout_rgb, false);
    report.holdout_psnr_alpha = eval_split(data.holdout_alpha, true);
    int nsplits = (data.holdout_rgb.empty() ? 0 : 1) + (data.holdout_alpha.empty() ? 0 : 1);
    report.holdout_psnr =
        nsplits == 0 ? 0.0
                     : (report.holdout_psnr_rgb + report.holdout_psnr_alpha) / double(nsplits);
    report.floor_met = tcfg.iterations > 0 && report.holdout_psnr >= tcfg.psnr_floor;
    return report;
}

void require_codec_floor(const CodecTrainReport& report) {
    if (!report.floor_met)
        throw NumericError(strf("codec reconstruction floor unmet: achieved %.2f dB, floor %.2f dB",
                                report.holdout_psnr, report.floor));
}

void LatentCodec::save(const std::filesystem::path& path) const {
    std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError(strf("cannot write codec checkpoint %s", path.string().c_str()));
    os.write("FMCD", 4);
    write_pod(os, std::int32_t(2));  // version
    write_pod(os, std::int32_t(cfg_.spatial_factor));
    write_pod(os, std::int32_t(cfg_.latent_channels));
    write_pod(os, std::int32_t(cfg_.base_channels));
    write_pod(os, cfg_.seed);
    write_pod(os, clip_scale_);
    write_pod(os, matte_scale_);
    store_.save(os);
}

LatentCodec LatentCodec::load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError(strf("cannot read codec checkpoint %s", path.string().c_str()));
    char magic[4];
    is.read(magic, 4);
    if (std::string(magic, 4) != "FMCD")
        throw IoError(strf("%s is not a codec checkpoint", path.string().c_str()));
    int version = read_pod<std::int32_t>(is);
    if (version != 2) throw IoError(strf("unsupported codec checkpoint version %d", version));
    CodecConfig cfg;
    cfg.spatial_factor = read_pod<std::int32_t>(is);
    cfg.latent_channels = read_pod<std::int32_t>(is);
    cfg.base_channels = read_pod<std::int32_t>(is);
    cfg.seed = read_pod<std::uint64_t>(is);
    LatentCodec codec(cfg);
    codec.clip_scale_ = read_pod<double>(is);
    codec.matte_scale_ = read_pod<double>(is);
    codec.store_ = ParamStore();
    codec.store_.load(is);
    return codec;
}

std::vector<CodecReportRow> codec_report(const LatentCodec& codec,
                                         const std::vector<const DatasetManifest*>& manifests,
                                         int max_clips) {
    std::vector<CodecReportRow> rows;
    for (const auto* m : manifests) {
        if (m->clips.empty()) {
            std::cerr << "codec report: split '" << m->name << "' is empty, omitting row\n";
            continue;
        }
        std::size_t count = std::min<std::size_t>(m->clips.size(), std::size_t(max_clips));
        CodecReportRow rgb_row{m->name + "/rgb", 0, 0, 0};
        CodecReportRow alpha_row{m->name + "/alpha", 0, 0, 0};
        for (std::size_t ci = 0; ci < count; ++ci) {
            const auto& clip = m->clips[ci];
            VideoClip rgb = read_clip_rgb(m->root / clip.path);
            AlphaSequence alpha = read_clip_alpha(m->root / clip.path);
            Tensor4d rec = from_codec_range(codec.decode(codec.encode_clip(rgb)));
            rgb_row.psnr += psnr(rec, rgb.frames);
            rgb_row.ssim += ssim(rec, rgb.frames);
            rgb_row.frames += rgb.t();
            AlphaSequence arec = codec.decode_matte(codec.encode_matte(alpha));
            alpha_row.psnr += psnr(arec.alphas, alpha.alphas);
            alpha_row.ssim += ssim(arec.alphas, alpha.alphas);
            alpha_row.frames += alpha.t();
        }
        double n = double(count);
        rgb_row.psnr /= n;
        rgb_row.ssim /= n;
        alpha_row.psnr /= n;
        alpha_row.ssim /= n;
        rows.push_back(rgb_row);
        rows.push_back(alpha_row);
    }
    return rows;
}

std::string codec_report_table(const std::vector<CodecReportRow>& rows) {
    std::string out = strf("%-24s %10s %10s %8s\n", "split", "PSNR(dB)", "SSIM", "frames");
    for (const auto& r : rows)
        out += strf("%-24s %10.2f %10.4f %8d\n", r.split.c_str(), r.psnr, r.ssim, r.frames);
    return out;
}

std::string codec_report_csv(const std::vector<CodecReportRow>& rows) {
    std::string out = "split,psnr_db,ssim,frames\n";
    for (const auto& r : rows)
        out += strf("%s,%.6f,%.6f,%d\n", r.split.c_str(), r.psnr, r.ssim, r.frames);
    return out;
}

}  // namespace flowmatte
