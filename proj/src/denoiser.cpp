#include "flowmatte/denoiser.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace flowmatte {

using ad::Tape;
using ad::Var;

namespace {

Tensor4d kaiming_conv(Rng& rng, int cout, int cin, int kh, int kw, double gain = 1.0) {
    double std_dev = gain * std::sqrt(2.0 / (double(cin) * kh * kw));
    return Tensor4d::random_normal(cout, cin, kh, kw, rng, std_dev);
}

Tensor4d kaiming_linear(Rng& rng, int dout, int din, double gain = 1.0) {
    double std_dev = gain * std::sqrt(1.0 / double(din));
    return Tensor4d::random_normal(dout, din, 1, 1, rng, std_dev);
}

Tensor4d sinusoidal_embedding(double t, int dim) {
    Tensor4d emb(1, dim, 1, 1);
    const int half = dim / 2;
    const double scaled = t * 1000.0;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * double(i) / double(std::max(half - 1, 1)));
        emb.data[i] = std::sin(scaled * freq);
        emb.data[half + i] = std::cos(scaled * freq);
    }
    return emb;
}

}  // namespace

Denoiser::Denoiser(DenoiserConfig cfg) : cfg_(cfg) {
    if (cfg_.temporal_kernel % 2 == 0)
        throw ConfigError(strf("denoiser: temporal_kernel %d must be odd", cfg_.temporal_kernel));
    if (cfg_.depth < 1) throw ConfigError("denoiser: depth must be >= 1");
    if (cfg_.time_embed_dim % 2 != 0)
        throw ConfigError("denoiser: time_embed_dim must be even");
    if (cfg_.base_channels % cfg_.norm_groups != 0)
        throw ConfigError(strf("denoiser: base_channels %d not divisible by norm_groups %d",
                               cfg_.base_channels, cfg_.norm_groups));
    build();
}

void Denoiser::build() {
    Rng rng(cfg_.seed);
    auto ch = [&](int i) { return cfg_.base_channels << i; };
    const int D = cfg_.depth;
    const int ctx = cfg_.context_dim;
    const int K = cfg_.temporal_kernel;

    auto add_conv = [&](const std::string& name, int cout, int cin, int k, double gain = 1.0) {
        store_.add(name + ".w", ParamRole::Spatial, kaiming_conv(rng, cout, cin, k, k, gain));
        store_.add(name + ".b", ParamRole::Spatial, Tensor4d(1, cout, 1, 1));
    };
    auto add_linear = [&](const std::string& name, int dout, int din) {
        store_.add(name + ".w", ParamRole::Spatial, kaiming_linear(rng, dout, din));
        store_.add(name + ".b", ParamRole::Spatial, Tensor4d(1, dout, 1, 1));
    };
    auto add_res = [&](const std::string& name, int cin, int cout) {
        add_conv(name + ".c1", cout, cin, 3);
        add_linear(name + ".film", 2 * cout, ctx);
        add_conv(name + ".c2", cout, cout, 3);
        if (cin != cout) add_conv(name + ".skip", cout, cin, 1);
    };
    auto add_temporal = [&](const std::string& name, int c) {
        // zero-init so temporal mixing starts as identity
        store_.add(name + ".w", ParamRole::Temporal, Tensor4d(c, c, K, 1));
        store_.add(name + ".b", ParamRole::Temporal, Tensor4d(1, c, 1, 1));
    };

    add_linear("time.fc1", ctx, cfg_.time_embed_dim);
    add_linear("ctxproj", ctx, ctx);  // consumes the zero alpha embedding
    add_linear("time.fc2", ctx, ctx);

    add_conv("stem", ch(0), 2 * cfg_.latent_channels, 3);
    for (int i = 0; i < D; ++i) {
        add_res(strf("down%d.res", i), ch(i), ch(i));
        add_temporal(strf("down%d.temporal", i), ch(i));
        if (i < D - 1) add_conv(strf("down%d.ds", i), ch(i + 1), ch(i), 3);
    }
    add_res("mid.res", ch(D - 1), ch(D - 1));
    add_temporal("mid.temporal", ch(D - 1));
    for (int i = D - 2; i >= 0; --i) {
        add_conv(strf("up%d.us", i), ch(i), ch(i + 1), 3);
        add_res(strf("up%d.res", i), 2 * ch(i), ch(i));
        add_temporal(strf("up%d.temporal", i), ch(i));
    }
    add_conv("head", cfg_.latent_channels, ch(0), 3, 0.1);
}

Var Denoiser::weight(Tape& tape, const std::string& name) const {
    Var base = tape.param(store_.at(name));
    if (!lora_injected_) return base;
    for (const auto& tgt : lora_targets_) {
        if (tgt.base != name) continue;
        Var up = tape.param(store_.at("lora." + name + ".up"));      // (fan_out, r)
        Var down = tape.param(store_.at("lora." + name + ".down"));  // (r, fan_in)
        Var delta = ad::matmul2d(tape, up, down);
        const Tensor4d& bw = store_.at(name).value;
        delta = ad::reshape(tape, delta, bw.t, bw.c, bw.h, bw.w);
        return ad::add_scaled(tape, base, delta, 1.0, lora_cfg_.scale);
    }
    return base;
}

Var Denoiser::resblock(Tape& tape, const std::string& name, Var x, Var ctx_act, int cin,
                       int cout) const {
    Var h = ad::group_norm(tape, x, cfg_.norm_groups);
    h = ad::silu(tape, h);
    h = ad::conv2d(tape, h, weight(tape, name + ".c1.w"), tape.param(store_.at(name + ".c1.b")),
                   1, 1);
    Var ss = ad::linear(tape, ctx_act, weight(tape, name + ".film.w"),
                        tape.param(store_.at(name + ".film.b")));
    h = ad::film(tape, h, ss);
    h = ad::group_norm(tape, h, cfg_.norm_groups);
    h = ad::silu(tape, h);
    h = ad::conv2d(tape, h, weight(tape, name + ".c2.w"), tape.param(store_.at(name + ".c2.b")),
                   1, 1);
    Var skip = x;
    if (cin != cout)
        skip = ad::conv2d(tape, x, weight(tape, name + ".skip.w"),
                          tape.param(store_.at(name + ".skip.b")), 1, 0);
    return ad::add(tape, h, skip);
}

Var Denoiser::temporal_block(Tape& tape, const std::string& name, Var x,
                             const ForwardOptions& opts) const {
    if (opts.bypass_temporal) return x;
    Var h = ad::group_norm(tape, x, cfg_.norm_groups);
    h = ad::conv1d_time(tape, h, tape.param(store_.at(name + ".w")),
                        tape.param(store_.at(name + ".b")));
    return ad::add(tape, x, h);
}

Var Denoiser::forward_on_tape(Tape& tape, Var phi_t, Var z_c, double t,
                              const ForwardOptions& opts) const {
    const Tensor4d& pv = tape.value(phi_t);
    const Tensor4d& zv = tape.value(z_c);
    if (pv.t != zv.t)
        throw ShapeError(strf("forward: conditioning is frame-aligned; phi has %d frames, z_c %d",
                              pv.t, zv.t));
    if (pv.h != zv.h || pv.w != zv.w)
        throw ShapeError(strf("forward: spatial mismatch (%dx%d vs %dx%d)", pv.h, pv.w, zv.h,
                              zv.w));
    if (pv.c != cfg_.latent_channels || zv.c != cfg_.latent_channels)
        throw ShapeError(strf("forward: expected %d-channel latents, got %d and %d",
                              cfg_.latent_channels, pv.c, zv.c));
    if (t < 0.0 || t > 1.0) throw ParamError(strf("forward: t=%g outside [0,1]", t));
    const int div = latent_divisor();
    if (pv.h % div != 0 || pv.w % div != 0)
        throw ShapeError(strf("forward: latent %dx%d not divisible by 2^(depth-1)=%d", pv.h, pv.w,
                              div));

    // context pathway: sinusoidal time embedding + zero alpha embedding
    Var emb = tape.input(sinusoidal_embedding(t, cfg_.time_embed_dim));
    Var h1 = ad::linear(tape, emb, weight(tape, "time.fc1.w"),
                        tape.param(store_.at("time.fc1.b")));
    Var zero_ctx = tape.input(Tensor4d(1, cfg_.context_dim, 1, 1));
    Var zc = ad::linear(tape, zero_ctx, weight(tape, "ctxproj.w"),
                        tape.param(store_.at("ctxproj.b")));
    Var ctx = ad::silu(tape, ad::add(tape, h1, zc));
    ctx = ad::linear(tape, ctx, weight(tape, "time.fc2.w"), tape.param(store_.at("time.fc2.b")));
    Var ctx_act = ad::silu(tape, ctx);

    auto chn = [&](int i) { return cfg_.base_channels << i; };
    const int D = cfg_.depth;

    Var x = ad::concat_c(tape, phi_t, z_c);
    x = ad::conv2d(tape, x, weight(tape, "stem.w"), tape.param(store_.at("stem.b")), 1, 1);

    std::vector<Var> skips;
    for (int i = 0; i < D; ++i) {
        x = resblock(tape, strf("down%d.res", i), x, ctx_act, chn(i), chn(i));
        x = temporal_block(tape, strf("down%d.temporal", i), x, opts);
        skips.push_back(x);
        if (i < D - 1)
            x = ad::conv2d(tape, x, weight(tape, strf("down%d.ds.w", i)),
                           tape.param(store_.at(strf("down%d.ds.b", i))), 2, 1);
    }
    x = resblock(tape, "mid.res", x, ctx_act, chn(D - 1), chn(D - 1));
    x = temporal_block(tape, "mid.temporal", x, opts);
    for (int i = D - 2; i >= 0; --i) {
        x = ad::nearest_up2(tape, x);
        x = ad::conv2d(tape, x, weight(tape, strf("up%d.us.w", i)),
                       tape.param(store_.at(strf("up%d.us.b", i))), 1, 1);
        x = ad::concat_c(tape, x, skips[i]);
        x = resblock(tape, strf("up%d.res", i), x, ctx_act, 2 * chn(i), chn(i));
        x = temporal_block(tape, strf("up%d.temporal", i), x, opts);
    }
    x = ad::group_norm(tape, x, cfg_.norm_groups);
    x = ad::silu(tape, x);
    x = ad::conv2d(tape, x, weight(tape, "head.w"), tape.param(store_.at("head.b")), 1, 1);
    return x;
}

Tensor4d Denoiser::forward(const Tensor4d& phi_t, const Tensor4d& z_c, double t,
                           const ForwardOptions& opts) const {
    Tape tape;
    tape.grad_enabled = false;
    Var out = forward_on_tape(tape, tape.input(phi_t), tape.input(z_c), t, opts);
    Tensor4d v = tape.value(out);
    if (!v.all_finite()) throw NumericError("forward: non-finite output");
    return v;
}

ParamPartition Denoiser::partition_params() const {
    ParamPartition part;
    std::int64_t classified = 0;
    for (const auto& p : store_.all()) {
        switch (p.role) {
            case ParamRole::Spatial: part.spatial.push_back(p.name); break;
            case ParamRole::Temporal: part.temporal.push_back(p.name); break;
            case ParamRole::Lora: part.lora.push_back(p.name); break;
            default:
                throw ConfigError(strf("unclassified parameter '%s'", p.name.c_str()));
        }
        ++classified;
    }
    if (classified != std::int64_t(store_.all().size()))
        throw ConfigError("parameter partition is not total");
    return part;
}

std::vector<ParamRole> Denoiser::roles_for(const std::string& subset) const {
    if (subset == "spatial") return {ParamRole::Spatial};
    if (subset == "temporal") return {ParamRole::Temporal};
    if (subset == "lora") return {ParamRole::Lora};
    if (subset == "all_base") return {ParamRole::Spatial, ParamRole::Temporal};
    if (subset == "all") return {ParamRole::Spatial, ParamRole::Temporal, ParamRole::Lora};
    throw ParamError(strf("unknown parameter subset '%s'", subset.c_str()));
}

void Denoiser::freeze(const std::string& subset) {
    for (ParamRole r : roles_for(subset)) store_.set_trainable(r, false);
}

void Denoiser::unfreeze(const std::string& subset) {
    for (ParamRole r : roles_for(subset)) store_.set_trainable(r, true);
}

std::uint64_t Denoiser::checksum(const std::string& subset) const {
    std::uint64_t h = 1469598103934665603ULL;
    for (ParamRole r : roles_for(subset)) {
        std::uint64_t rh = store_.role_checksum(r);
        h = fnv1a(&rh, sizeof(rh), h);
    }
    return h;
}

namespace {

bool is_projection_weight(const Parameter& p) {
    // conv weights (cout, cin, k, k) and linear weights (dout, din, 1, 1);
    // biases are (1, c, 1, 1) and are excluded by the name suffix.
    return p.name.size() > 2 && p.name.substr(p.name.size() - 2) == ".w";
}

}  // namespace

void Denoiser::inject_lora(const LoraConfig& cfg) {
    if (lora_injected_) throw ConfigError("lora already injected");
    if (cfg.rank < 1) throw ParamError("lora rank must be >= 1");
    Rng rng(cfg.seed);

    std::vector<std::string> requested;
    if (cfg.target_layers != "auto") {
        std::stringstream ss(cfg.target_layers);
        std::string item;
        while (std::getline(ss, item, ',')) {
            if (!item.empty()) requested.push_back(item);
        }
        if (requested.empty()) throw ConfigError("lora: empty target layer list");
    }

    auto eligible = [&](const Parameter& p, int& fan_out, int& fan_in) {
        if (p.role != ParamRole::Spatial || !is_projection_weight(p)) return false;
        fan_out = p.value.t;
        fan_in = p.value.c * p.value.h * p.value.w;
        return true;
    };

    std::vector<LoraTarget> targets;
    if (requested.empty()) {
        for (const auto& p : store_.all()) {
            int fo, fi;
            if (!eligible(p, fo, fi)) continue;
            if (std::min(fo, fi) < cfg.rank) continue;  // auto mode skips undersized layers
            targets.push_back({p.name, fo, fi});
        }
    } else {
        for (const auto& name : requested) {
            const Parameter& p = store_.at(name);
            int fo, fi;
            if (!eligible(p, fo, fi))
                throw ParamError(strf("lora: '%s' is not a spatial projection weight",
                                      name.c_str()));
            if (std::min(fo, fi) < cfg.rank)
                throw ParamError(strf("lora: rank %d exceeds min dimension %d of '%s'", cfg.rank,
                                      std::min(fo, fi), name.c_str()));
            targets.push_back({name, fo, fi});
        }
    }
    if (targets.empty()) throw ConfigError("lora: no eligible target layers for this rank");

    for (const auto& t : targets) {
        double std_dev = 1.0 / std::sqrt(double(t.fan_in));
        store_.add("lora." + t.base + ".down", ParamRole::Lora,
                   Tensor4d::random_normal(cfg.rank, t.fan_in, 1, 1, rng, std_dev));
        store_.add("lora." + t.base + ".up", ParamRole::Lora,
                   Tensor4d(t.fan_out, cfg.rank, 1, 1));  // zero-init
    }
    lora_targets_ = std::move(targets);
    lora_cfg_ = cfg;
    lora_injected_ = true;
}

std::int64_t Denoiser::lora_value_count() const {
    return store_.count_values(ParamRole::Lora);
}

void Denoiser::save(const std::filesystem::path& path) const {
    std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError(strf("cannot write denoiser checkpoint %s", path.string().c_str()));
    save(os);
}

void Denoiser::save(std::ostream& os) const {
    os.write("FMDN", 4);
    write_pod(os, std::int32_t(1));
    write_pod(os, std::int32_t(cfg_.base_channels));
    write_pod(os, std::int32_t(cfg_.depth));
    write_pod(os, std::int32_t(cfg_.temporal_kernel));
    write_pod(os, std::int32_t(cfg_.context_dim));
    write_pod(os, std::int32_t(cfg_.time_embed_dim));
    write_pod(os, std::int32_t(cfg_.latent_channels));
    write_pod(os, std::int32_t(cfg_.norm_groups));
    write_pod(os, cfg_.seed);
    write_pod(os, std::uint8_t(lora_injected_ ? 1 : 0));
    write_pod(os, std::int32_t(lora_cfg_.rank));
    write_string(os, lora_cfg_.target_layers);
    write_pod(os, lora_cfg_.scale);
    write_pod(os, lora_cfg_.seed);
    write_pod(os, std::uint64_t(lora_targets_.size()));
    for (const auto& t : lora_targets_) {
        write_string(os, t.base);
        write_pod(os, std::int32_t(t.fan_out));
        write_pod(os, std::int32_t(t.fan_in));
    }
    store_.save(os);
}

Denoiser Denoiser::load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError(strf("cannot read denoiser checkpoint %s", path.string().c_str()));
    return load(is);
}

Denoiser Denoiser::load(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (std::string(magic, 4) != "FMDN")
        throw IoError("stream is not a denoiser checkpoint");
    int version = read_pod<std::int32_t>(is);
    if (version != 1) throw IoError(strf("unsupported denoiser checkpoint version %d", version));
    DenoiserConfig cfg;
    cfg.base_channels = read_pod<std::int32_t>(is);
    cfg.depth = read_pod<std::int32_t>(is);
    cfg.temporal_kernel = read_pod<std::int32_t>(is);
    cfg.context_dim = read_pod<std::int32_t>(is);
    cfg.time_embed_dim = read_pod<std::int32_t>(is);
    cfg.latent_channels = read_pod<std::int32_t>(is);
    cfg.norm_groups = read_pod<std::int32_t>(is);
    cfg.seed = read_pod<std::uint64_t>(is);
    Denoiser model(cfg);
    model.lora_injected_ = read_pod<std::uint8_t>(is) != 0;
    model.lora_cfg_.rank = read_pod<std::int32_t>(is);
    model.lora_cfg_.target_layers = read_string(is);
    model.lora_cfg_.scale = read_pod<double>(is);
    model.lora_cfg_.seed = read_pod<std::uint64_t>(is);
    auto ntargets = read_pod<std::uint64_t>(is);
    model.lora_targets_.clear();
    for (std::uint64_t i = 0; i < ntargets; ++i) {
        LoraTarget t;
        t.base = read_string(is);
        t.fan_out = read_pod<std::int32_t>(is);
        t.fan_in = read_pod<std::int32_t>(is);
        model.lora_targets_.push_back(std::move(t));
    }
    model.store_ = ParamStore();
    model.store_.load(is);
    return model;
}

}  // namespace flowmatte
