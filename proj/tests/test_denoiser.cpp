#include <doctest.h>

#include <filesystem>
#include <set>

#include "flowmatte/denoiser.hpp"

using namespace flowmatte;
namespace fs = std::filesystem;

namespace {

DenoiserConfig tiny_cfg() {
    DenoiserConfig cfg;
    cfg.base_channels = 8;
    cfg.depth = 2;
    cfg.temporal_kernel = 3;
    cfg.context_dim = 16;
    cfg.time_embed_dim = 16;
    cfg.latent_channels = 2;
    cfg.norm_groups = 4;
    cfg.seed = 321;
    return cfg;
}

Tensor4d latent(Rng& rng, int T, int c, int h, int w) {
    return Tensor4d::random_normal(T, c, h, w, rng);
}

}  // namespace

TEST_CASE("forward shape contract across sequence lengths") {
    Denoiser model(tiny_cfg());
    Rng rng(1);
    for (int T : {1, 5, 12}) {
        Tensor4d phi = latent(rng, T, 2, 8, 8);
        Tensor4d zc = latent(rng, T, 2, 8, 8);
        Tensor4d out = model.forward(phi, zc, 0.4);
        CHECK(out.t == T);
        CHECK(out.c == 2);
        CHECK(out.h == 8);
        CHECK(out.w == 8);
        CHECK(out.all_finite());
    }
}

TEST_CASE("time conditioning changes the output") {
    Denoiser model(tiny_cfg());
    Rng rng(2);
    Tensor4d phi = latent(rng, 2, 2, 8, 8);
    Tensor4d zc = latent(rng, 2, 2, 8, 8);
    Tensor4d a = model.forward(phi, zc, 0.1);
    Tensor4d b = model.forward(phi, zc, 0.9);
    CHECK(max_abs_diff(a, b) > 0.0);
}

TEST_CASE("frame-count mismatch is an error") {
    Denoiser model(tiny_cfg());
    Rng rng(3);
    Tensor4d phi = latent(rng, 3, 2, 8, 8);
    Tensor4d zc = latent(rng, 2, 2, 8, 8);
    CHECK_THROWS_WITH_AS(model.forward(phi, zc, 0.5), doctest::Contains("frame-aligned"),
                         ShapeError);
}

TEST_CASE("finiteness at extreme t and extreme noise") {
    Denoiser model(tiny_cfg());
    Rng rng(4);
    Tensor4d zc = latent(rng, 2, 2, 8, 8);
    for (double t : {0.0, 1.0}) {
        Tensor4d phi = latent(rng, 2, 2, 8, 8);
        phi.data *= 6.0;  // +-6 sigma scale
        CHECK(model.forward(phi, zc, t).all_finite());
    }
}

TEST_CASE("partition is total and disjoint") {
    Denoiser model(tiny_cfg());
    auto part = model.partition_params();
    CHECK(part.lora.empty());

    std::set<std::string> all;
    for (const auto& n : part.spatial) all.insert(n);
    for (const auto& n : part.temporal) all.insert(n);
    CHECK(all.size() == part.spatial.size() + part.temporal.size());  // disjoint
    CHECK(all.size() == model.params().all().size());                 // total

    // temporal set is exactly the temporal convolutions, by name
    for (const auto& n : part.temporal) CHECK(n.find("temporal") != std::string::npos);
    for (const auto& n : part.spatial) CHECK(n.find("temporal") == std::string::npos);
}

TEST_CASE("temporal_kernel=1 layers still classify as temporal") {
    auto cfg = tiny_cfg();
    cfg.temporal_kernel = 1;
    Denoiser model(cfg);
    auto part = model.partition_params();
    CHECK(!part.temporal.empty());
    for (const auto& n : part.temporal) CHECK(n.find("temporal") != std::string::npos);
}

TEST_CASE("freeze/unfreeze contracts") {
    Denoiser model(tiny_cfg());
    std::uint64_t temporal_before = model.checksum("temporal");

    model.freeze("temporal");
    for (const auto& p : model.params().all())
        if (p.role == ParamRole::Temporal) CHECK_FALSE(p.trainable);

    // simulated optimizer steps move only unfrozen params
    AdamW opt(AdamWConfig{.lr = 1e-2});
    Rng rng(5);
    for (int step = 0; step < 10; ++step) {
        for (auto& p : model.params().all())
            p.grad = Tensor4d::random_normal(p.grad.t, p.grad.c, p.grad.h, p.grad.w, rng);
        opt.step(model.params());
        model.params().zero_grads();
    }
    CHECK(model.checksum("temporal") == temporal_before);

    model.unfreeze("temporal");
    for (const auto& p : model.params().all()) CHECK(p.trainable);

    // full freeze: nothing moves
    model.freeze("all");
    std::uint64_t full_before = model.checksum("all");
    for (auto& p : model.params().all()) p.grad.data.setConstant(1.0);
    opt.step(model.params());
    CHECK(model.checksum("all") == full_before);
    model.unfreeze("all");

    CHECK_THROWS_AS(model.freeze("bogus"), ParamError);
}

TEST_CASE("lora injection is a bit-exact no-op at init") {
    Denoiser model(tiny_cfg());
    Rng rng(6);
    Tensor4d phi = latent(rng, 3, 2, 8, 8);
    Tensor4d zc = latent(rng, 3, 2, 8, 8);
    Tensor4d before = model.forward(phi, zc, 0.3);

    LoraConfig lcfg;
    lcfg.rank = 4;
    model.inject_lora(lcfg);
    Tensor4d after = model.forward(phi, zc, 0.3);
    CHECK(max_abs_diff(before, after) == 0.0);

    CHECK_THROWS_AS(model.inject_lora(lcfg), ConfigError);
}

TEST_CASE("lora parameter count matches the closed form") {
    Denoiser model(tiny_cfg());
    LoraConfig lcfg;
    lcfg.rank = 4;
    model.inject_lora(lcfg);

    // sum r*(fan_in + fan_out) over targeted layers
    std::int64_t expect = 0;
    for (const auto& p : model.params().all()) {
        if (p.role != ParamRole::Spatial) continue;
        if (p.name.substr(p.name.size() - 2) != ".w") continue;
        int fan_out = p.value.t;
        int fan_in = p.value.c * p.value.h * p.value.w;
        if (std::min(fan_out, fan_in) < lcfg.rank) continue;
        expect += std::int64_t(lcfg.rank) * (fan_in + fan_out);
    }
    CHECK(model.lora_value_count() == expect);
    CHECK(expect > 0);
}

TEST_CASE("lora rank exceeding min dimension errors for explicit targets") {
    Denoiser model(tiny_cfg());
    LoraConfig lcfg;
    lcfg.rank = 64;  // head.w has fan_out=2
    lcfg.target_layers = "head.w";
    CHECK_THROWS_AS(model.inject_lora(lcfg), ParamError);
}

TEST_CASE("training only lora moves outputs while base stays fixed") {
    Denoiser model(tiny_cfg());
    LoraConfig lcfg;
    lcfg.rank = 4;
    model.inject_lora(lcfg);
    model.freeze("all_base");

    Rng rng(7);
    Tensor4d phi = latent(rng, 2, 2, 8, 8);
    Tensor4d zc = latent(rng, 2, 2, 8, 8);
    Tensor4d before = model.forward(phi, zc, 0.5);
    std::uint64_t base_before = model.checksum("all_base");

    AdamW opt(AdamWConfig{.lr = 1e-2});
    for (int step = 0; step < 5; ++step) {
        ad::Tape tape;
        ad::Var out = model.forward_on_tape(tape, tape.input(phi), tape.input(zc), 0.5);
        ad::Var loss = ad::sum_squares(tape, out);
        model.params().zero_grads();
        tape.backward(loss);
        opt.step(model.params());
    }
    CHECK(model.checksum("all_base") == base_before);
    Tensor4d after = model.forward(phi, zc, 0.5);
    CHECK(max_abs_diff(before, after) > 0.0);
}

TEST_CASE("gradient health: directional finite differences per group") {
    auto cfg = tiny_cfg();
    cfg.base_channels = 8;
    Denoiser model(cfg);
    Rng rng(8);
    Tensor4d phi = latent(rng, 2, 2, 8, 8);
    Tensor4d zc = latent(rng, 2, 2, 8, 8);
    const double t = 0.37;

    auto loss_value = [&]() {
        ad::Tape tape;
        tape.grad_enabled = false;
        ad::Var out = model.forward_on_tape(tape, tape.input(phi), tape.input(zc), t);
        return tape.value(ad::sum_squares(tape, out)).data[0];
    };

    // analytic gradients
    model.params().zero_grads();
    {
        ad::Tape tape;
        ad::Var out = model.forward_on_tape(tape, tape.input(phi), tape.input(zc), t);
        tape.backward(ad::sum_squares(tape, out));
    }

    // one random direction per parameter tensor
    const double h = 1e-3;
    Rng dir_rng(909);
    for (auto& p : model.params().all()) {
        Tensor4d dir = Tensor4d::random_normal(p.value.t, p.value.c, p.value.h, p.value.w, dir_rng);
        dir.data /= std::max(1e-12, std::sqrt(dir.data.square().sum()));
        double analytic = (p.grad.data * dir.data).sum();

        Tensor4d saved = p.value;
        p.value.data = saved.data + h * dir.data;
        double fp = loss_value();
        p.value.data = saved.data - h * dir.data;
        double fm = loss_value();
        p.value = saved;
        double fd = (fp - fm) / (2 * h);

        double denom = std::max({std::abs(analytic), std::abs(fd), 1e-8});
        INFO("param ", p.name, " analytic ", analytic, " fd ", fd);
        CHECK(std::abs(analytic - fd) / denom < 1e-3);
    }
}

TEST_CASE("frame-locality with bypassed temporal layers") {
    Denoiser model(tiny_cfg());
    Rng rng(9);
    Tensor4d phi = latent(rng, 4, 2, 8, 8);
    Tensor4d zc = latent(rng, 4, 2, 8, 8);
    ForwardOptions diag;
    diag.bypass_temporal = true;

    Tensor4d base = model.forward(phi, zc, 0.5, diag);

    // perturb conditioning frame 2
    Tensor4d zc2 = zc;
    Tensor4d bump = latent(rng, 1, 2, 8, 8);
    zc2.set_frame(2, bump);
    Tensor4d out = model.forward(phi, zc2, 0.5, diag);

    for (int t = 0; t < 4; ++t) {
        double diff = max_abs_diff(out.frame(t), base.frame(t));
        if (t == 2) {
            CHECK(diff > 0.0);
        } else {
            CHECK(diff == 0.0);
        }
    }

    // with temporal layers active the perturbation propagates after training
    // (zero-init temporal convs start as identity, so check classification
    // of influence instead at init: neighbours unaffected)
    Tensor4d out_full = model.forward(phi, zc2, 0.5);
    CHECK(max_abs_diff(out_full.frame(2), base.frame(2)) > 0.0);
}

TEST_CASE("checkpoint save/load round trip with lora and freeze mask") {
    Denoiser model(tiny_cfg());
    LoraConfig lcfg;
    lcfg.rank = 4;
    model.inject_lora(lcfg);
    model.freeze("all_base");

    fs::path path = fs::temp_directory_path() / "flowmatte_denoiser_test" / "model.bin";
    model.save(path);
    Denoiser loaded = Denoiser::load(path);

    CHECK(loaded.lora_injected());
    CHECK(loaded.checksum("all") == model.checksum("all"));
    for (const auto& p : loaded.params().all()) {
        if (p.role == ParamRole::Lora) {
            CHECK(p.trainable);
        } else {
            CHECK_FALSE(p.trainable);
        }
    }

    Rng rng(10);
    Tensor4d phi = latent(rng, 2, 2, 8, 8);
    Tensor4d zc = latent(rng, 2, 2, 8, 8);
    CHECK(max_abs_diff(loaded.forward(phi, zc, 0.7), model.forward(phi, zc, 0.7)) == 0.0);
    fs::remove_all(path.parent_path());
}
