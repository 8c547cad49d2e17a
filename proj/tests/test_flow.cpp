#include <doctest.h>

#include "flowmatte/flow.hpp"

using namespace flowmatte;

TEST_CASE("corrupt endpoints and scalar case") {
    Rng rng(1);
    Tensor4d z = Tensor4d::random_normal(2, 4, 3, 3, rng);
    Tensor4d eps = Tensor4d::random_normal(2, 4, 3, 3, rng);

    CHECK(max_abs_diff(corrupt(z, eps, 1.0), z) == 0.0);
    CHECK(max_abs_diff(corrupt(z, eps, 0.0), eps) == 0.0);

    Tensor4d zs = Tensor4d::scalar(2.0);
    Tensor4d es = Tensor4d::scalar(-2.0);
    CHECK(corrupt(zs, es, 0.25).data[0] == doctest::Approx(-1.0).epsilon(1e-15));

    CHECK_THROWS_AS(corrupt(z, eps, -0.1), ParamError);
    CHECK_THROWS_AS(corrupt(z, eps, 1.1), ParamError);
}

TEST_CASE("target_velocity basics and interpolation identity") {
    Rng rng(2);
    Tensor4d z = Tensor4d::random_normal(2, 4, 3, 3, rng);
    CHECK(max_abs(target_velocity(z, z)) == 0.0);

    CHECK(target_velocity(Tensor4d::scalar(3.0), Tensor4d::scalar(1.0)).data[0] == 2.0);

    // corrupt(z,eps,t) + (1-t)*v == z for random draws
    for (int trial = 0; trial < 50; ++trial) {
        Tensor4d zz = Tensor4d::random_normal(2, 4, 3, 3, rng);
        Tensor4d ee = Tensor4d::random_normal(2, 4, 3, 3, rng);
        double t = rng.uniform();
        Tensor4d lhs = corrupt(zz, ee, t);
        lhs.data += (1.0 - t) * target_velocity(zz, ee).data;
        CHECK(max_abs_diff(lhs, zz) < 1e-12);
    }

    Tensor4d bad = Tensor4d::random_normal(2, 4, 3, 4, rng);
    CHECK_THROWS_AS(target_velocity(z, bad), ShapeError);
}

TEST_CASE("reconstruct_clean recovers z for exact velocity") {
    Rng rng(3);
    Tensor4d z = Tensor4d::random_normal(1, 4, 4, 4, rng);
    Tensor4d eps = Tensor4d::random_normal(1, 4, 4, 4, rng);

    // t=1: (1-t)=0 so phi passes through
    FlowState s1{1.0, corrupt(z, eps, 1.0)};
    CHECK(max_abs_diff(reconstruct_clean(s1, target_velocity(z, eps)), s1.phi) == 0.0);

    // t=0: phi=eps, v=z-eps
    FlowState s0{0.0, eps};
    CHECK(max_abs_diff(reconstruct_clean(s0, target_velocity(z, eps)), z) < 1e-12);

    // property over 1000 random draws
    for (int trial = 0; trial < 1000; ++trial) {
        Tensor4d zz = Tensor4d::random_normal(1, 2, 3, 3, rng);
        Tensor4d ee = Tensor4d::random_normal(1, 2, 3, 3, rng);
        double t = rng.uniform();
        FlowState st{t, corrupt(zz, ee, t)};
        CHECK(max_abs_diff(reconstruct_clean(st, target_velocity(zz, ee)), zz) < 1e-6);
    }
}

TEST_CASE("straightness: intermediate states are collinear") {
    Rng rng(4);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor4d z = Tensor4d::random_normal(1, 2, 3, 3, rng);
        Tensor4d eps = Tensor4d::random_normal(1, 2, 3, 3, rng);
        double t1 = rng.uniform() * 0.3;
        double t2 = 0.35 + rng.uniform() * 0.3;
        double t3 = 0.7 + rng.uniform() * 0.3;
        Tensor4d p1 = corrupt(z, eps, t1);
        Tensor4d p2 = corrupt(z, eps, t2);
        Tensor4d p3 = corrupt(z, eps, t3);
        double w = (t2 - t1) / (t3 - t1);
        Tensor4d interp = p1;
        interp.data = (1.0 - w) * p1.data + w * p3.data;
        CHECK(max_abs_diff(interp, p2) < 1e-7);
    }
}

TEST_CASE("sample_time distribution") {
    Rng a(42), b(42);
    for (int i = 0; i < 10; ++i) CHECK(sample_time(a) == sample_time(b));

    Rng rng(7);
    double sum = 0;
    for (int i = 0; i < 100000; ++i) {
        double t = sample_time(rng);
        CHECK(t >= 0.0);
        CHECK(t <= 1.0);
        sum += t;
    }
    double mean = sum / 100000;
    CHECK(mean >= 0.497);
    CHECK(mean <= 0.503);
}

TEST_CASE("euler_sample with oracle constant field") {
    Rng rng(5);
    Tensor4d z_c = Tensor4d::random_normal(2, 4, 4, 4, rng);
    Tensor4d z_star = Tensor4d::random_normal(2, 4, 4, 4, rng);

    // The oracle field captures eps at the start and always points at z*.
    // Since the initial noise is reproducible from the seed, capture it the
    // same way euler_sample does.
    SamplerConfig cfg{1, 99};
    Rng noise_rng(cfg.seed);
    Tensor4d eps = Tensor4d::random_normal(z_c.t, 4, z_c.h, z_c.w, noise_rng);
    Tensor4d field = target_velocity(z_star, eps);
    VelocityFn oracle = [&](const Tensor4d&, const Tensor4d&, double) { return field; };

    Tensor4d one_step = euler_sample(oracle, z_c, 4, cfg);
    CHECK(max_abs_diff(one_step, z_star) < 1e-6);

    cfg.steps = 7;
    Tensor4d seven_step = euler_sample(oracle, z_c, 4, cfg);
    CHECK(max_abs_diff(seven_step, one_step) < 1e-9);

    // zero field: the initial noise is a fixed point
    VelocityFn zero = [&](const Tensor4d& phi, const Tensor4d&, double) {
        return Tensor4d::zeros(phi.t, phi.c, phi.h, phi.w);
    };
    cfg.steps = 3;
    CHECK(max_abs_diff(euler_sample(zero, z_c, 4, cfg), eps) == 0.0);

    // determinism
    CHECK(max_abs_diff(euler_sample(oracle, z_c, 4, cfg), euler_sample(oracle, z_c, 4, cfg)) ==
          0.0);

    cfg.steps = 0;
    CHECK_THROWS_AS(euler_sample(oracle, z_c, 4, cfg), ParamError);

    // non-finite velocity aborts with the step index
    VelocityFn nan_field = [&](const Tensor4d& phi, const Tensor4d&, double) {
        Tensor4d v = Tensor4d::zeros(phi.t, phi.c, phi.h, phi.w);
        v.data[0] = std::numeric_limits<double>::quiet_NaN();
        return v;
    };
    cfg.steps = 2;
    CHECK_THROWS_WITH_AS(euler_sample(nan_field, z_c, 4, cfg), doctest::Contains("step 0"),
                         NumericError);
}
