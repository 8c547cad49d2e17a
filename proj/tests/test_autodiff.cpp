#include <doctest.h>

#include <functional>

#include "flowmatte/autodiff.hpp"
#include "flowmatte/rng.hpp"

using namespace flowmatte;
using namespace flowmatte::ad;

namespace {

// Central finite differences of a scalar graph against the analytic
// gradient of one leaf tensor. The builder is re-run for each probe.
double fd_check(const Tensor4d& x0,
                const std::function<Var(Tape&, Var)>& build,
                double step = 1e-5, int probes = 24) {
    Tape tape;
    Var x = tape.input(x0, true);
    Var loss = build(tape, x);
    tape.backward(loss);
    Tensor4d analytic = tape.grad(x);

    Rng rng(991);
    double worst = 0.0;
    for (int p = 0; p < probes; ++p) {
        std::int64_t i = rng.uniform_int(0, int(x0.size()) - 1);
        Tensor4d xp = x0, xm = x0;
        xp.data[i] += step;
        xm.data[i] -= step;
        Tape tp, tm;
        double fp = tp.value(build(tp, tp.input(xp, false))).data[0];
        double fm = tm.value(build(tm, tm.input(xm, false))).data[0];
        double fd = (fp - fm) / (2 * step);
        double denom = std::max({std::abs(fd), std::abs(analytic.data[i]), 1e-8});
        worst = std::max(worst, std::abs(fd - analytic.data[i]) / denom);
    }
    return worst;
}

Tensor4d randn(Rng& rng, int t, int c, int h, int w) {
    return Tensor4d::random_normal(t, c, h, w, rng);
}

}  // namespace

TEST_CASE("fd: elementwise and structural ops") {
    Rng rng(1);
    Tensor4d x = randn(rng, 2, 4, 5, 6);
    Tensor4d other = randn(rng, 2, 4, 5, 6);

    CHECK(fd_check(x, [&](Tape& t, Var v) {
              return mean_all(t, silu(t, v));
          }) < 1e-6);
    CHECK(fd_check(x, [&](Tape& t, Var v) {
              Var o = t.constant(other);
              return sum_squares(t, add_scaled(t, v, o, 0.7, -1.3));
          }) < 1e-6);
    CHECK(fd_check(x, [&](Tape& t, Var v) {
              return sum_squares(t, scale(t, v, -2.5));
          }) < 1e-6);
    CHECK(fd_check(x, [&](Tape& t, Var v) {
              Var o = t.constant(other);
              return sum_squares(t, concat_c(t, v, o));
          }) < 1e-6);
    CHECK(fd_check(x, [&](Tape& t, Var v) {
              return sum_squares(t, repeat_c(t, v, 3));
          }) < 1e-6);
    CHECK(fd_check(x, [&](Tape& t, Var v) {
              return sum_squares(t, mean_c(t, v));
          }) < 1e-6);
    CHECK(fd_check(x, [&](Tape& t, Var v) {
              return sum_squares(t, nearest_up2(t, v));
          }) < 1e-6);
    CHECK(fd_check(x, [&](Tape& t, Var v) {
              return sum_squares(t, zero_stuff2(t, v));
          }) < 1e-6);
    CHECK(fd_check(x, [&](Tape& t, Var v) {
              return sum_squares(t, fwd_diff_x(t, v));
          }) < 1e-6);
    CHECK(fd_check(x, [&](Tape& t, Var v) {
              return sum_squares(t, fwd_diff_y(t, v));
          }) < 1e-6);
    CHECK(fd_check(x, [&](Tape& t, Var v) {
              return sum_squares(t, reshape(t, v, 4, 2, 6, 5));
          }) < 1e-6);
}

TEST_CASE("fd: losses") {
    Rng rng(2);
    Tensor4d x = randn(rng, 2, 3, 4, 4);
    Tensor4d target = randn(rng, 2, 3, 4, 4);

    CHECK(fd_check(x, [&](Tape& t, Var v) {
              return mse(t, v, t.constant(target));
          }) < 1e-6);
    CHECK(fd_check(x, [&](Tape& t, Var v) {
              return l1(t, v, t.constant(target));
          }) < 1e-5);
    // clamp path: values inside the linear region
    Tensor4d inside = Tensor4d::random_uniform(2, 3, 4, 4, rng, -0.9, 0.9);
    CHECK(fd_check(inside, [&](Tape& t, Var v) {
              return sum_squares(t, decode_range01(t, v));
          }) < 1e-6);
}

TEST_CASE("fd: conv2d weight, bias and input") {
    Rng rng(3);
    Tensor4d x = randn(rng, 2, 3, 6, 6);
    Tensor4d w = randn(rng, 4, 3, 3, 3);
    Tensor4d b = randn(rng, 1, 4, 1, 1);

    for (int stride : {1, 2}) {
        for (PadMode mode : {PadMode::Zero, PadMode::Reflect}) {
            CHECK(fd_check(x, [&](Tape& t, Var v) {
                      return sum_squares(
                          t, conv2d(t, v, t.constant(w), t.constant(b), stride, 1, mode));
                  }) < 1e-5);
            CHECK(fd_check(w, [&](Tape& t, Var v) {
                      return sum_squares(
                          t, conv2d(t, t.constant(x), v, t.constant(b), stride, 1, mode));
                  }) < 1e-5);
            CHECK(fd_check(b, [&](Tape& t, Var v) {
                      return sum_squares(
                          t, conv2d(t, t.constant(x), t.constant(w), v, stride, 1, mode));
                  }) < 1e-5);
        }
    }
}

TEST_CASE("fd: conv1d_time") {
    Rng rng(4);
    Tensor4d x = randn(rng, 5, 3, 4, 4);
    Tensor4d w = randn(rng, 2, 3, 3, 1);
    Tensor4d b = randn(rng, 1, 2, 1, 1);

    CHECK(fd_check(x, [&](Tape& t, Var v) {
              return sum_squares(t, conv1d_time(t, v, t.constant(w), t.constant(b)));
          }) < 1e-5);
    CHECK(fd_check(w, [&](Tape& t, Var v) {
              return sum_squares(t, conv1d_time(t, t.constant(x), v, t.constant(b)));
          }) < 1e-5);

    // single-frame edge case: reflect padding degenerates to the same frame
    Tensor4d x1 = randn(rng, 1, 3, 4, 4);
    CHECK(fd_check(x1, [&](Tape& t, Var v) {
              return sum_squares(t, conv1d_time(t, v, t.constant(w), t.constant(b)));
          }) < 1e-5);
}

TEST_CASE("fd: group_norm") {
    // Project onto a random target so the loss actually varies with the
    // normalized output (sum of squares of a normalized field is nearly
    // invariant and would only measure cancellation noise).
    Rng rng(5);
    Tensor4d x = randn(rng, 3, 8, 4, 4);
    Tensor4d target = randn(rng, 3, 8, 4, 4);
    CHECK(fd_check(x, [&](Tape& t, Var v) {
              return mse(t, group_norm(t, v, 4), t.constant(target));
          }, 1e-5, 40) < 1e-5);

    // T=1 and groups == channels
    Tensor4d x1 = randn(rng, 1, 4, 3, 3);
    Tensor4d t1 = randn(rng, 1, 4, 3, 3);
    CHECK(fd_check(x1, [&](Tape& t, Var v) {
              return mse(t, group_norm(t, v, 4), t.constant(t1));
          }, 1e-5, 30) < 1e-5);
}

TEST_CASE("fd: linear, film, matmul2d") {
    Rng rng(6);
    Tensor4d x = randn(rng, 1, 6, 1, 1);
    Tensor4d w = randn(rng, 4, 6, 1, 1);
    Tensor4d b = randn(rng, 1, 4, 1, 1);
    CHECK(fd_check(x, [&](Tape& t, Var v) {
              return sum_squares(t, linear(t, v, t.constant(w), t.constant(b)));
          }) < 1e-6);
    CHECK(fd_check(w, [&](Tape& t, Var v) {
              return sum_squares(t, linear(t, t.constant(x), v, t.constant(b)));
          }) < 1e-6);

    Tensor4d feat = randn(rng, 2, 4, 5, 5);
    Tensor4d ss = randn(rng, 1, 8, 1, 1);
    CHECK(fd_check(feat, [&](Tape& t, Var v) {
              return sum_squares(t, film(t, v, t.constant(ss)));
          }) < 1e-6);
    CHECK(fd_check(ss, [&](Tape& t, Var v) {
              return sum_squares(t, film(t, t.constant(feat), v));
          }) < 1e-6);

    Tensor4d ma = randn(rng, 3, 4, 1, 1);
    Tensor4d mb = randn(rng, 4, 5, 1, 1);
    CHECK(fd_check(ma, [&](Tape& t, Var v) {
              return sum_squares(t, matmul2d(t, v, t.constant(mb)));
          }) < 1e-6);
    CHECK(fd_check(mb, [&](Tape& t, Var v) {
              return sum_squares(t, matmul2d(t, t.constant(ma), v));
          }) < 1e-6);
}

TEST_CASE("param leaves accumulate into the store") {
    Rng rng(7);
    ParamStore store;
    Parameter& p = store.add("w", ParamRole::Spatial, randn(rng, 2, 3, 4, 4));

    Tape tape;
    Var v = tape.param(p);
    Var loss = sum_squares(tape, v);
    tape.backward(loss);
    Tensor4d expected = p.value;
    expected.data *= 2.0;
    CHECK(max_abs_diff(p.grad, expected) < 1e-12);

    // second backward pass accumulates
    Tape tape2;
    Var v2 = tape2.param(p);
    tape2.backward(sum_squares(tape2, v2));
    expected.data *= 2.0;
    CHECK(max_abs_diff(p.grad, expected) < 1e-12);
}

TEST_CASE("grad_enabled=false skips gradient machinery") {
    Rng rng(8);
    ParamStore store;
    Parameter& p = store.add("w", ParamRole::Spatial, randn(rng, 1, 2, 3, 3));
    Tape tape;
    tape.grad_enabled = false;
    Var v = tape.param(p);
    Var out = silu(tape, v);
    CHECK(tape.value(out).all_finite());
    CHECK_THROWS(tape.backward(out));  // non-scalar and disabled graph
    CHECK(max_abs(p.grad) == 0.0);
}

TEST_CASE("reflect_index is symmetric reflection with edge repeat") {
    CHECK(reflect_index(-1, 4) == 0);
    CHECK(reflect_index(-2, 4) == 1);
    CHECK(reflect_index(4, 4) == 3);
    CHECK(reflect_index(5, 4) == 2);
    CHECK(reflect_index(0, 1) == 0);
    CHECK(reflect_index(-1, 1) == 0);
    CHECK(reflect_index(1, 1) == 0);
}

TEST_CASE("adamw updates only trainable parameters") {
    Rng rng(9);
    ParamStore store;
    Parameter& a = store.add("a", ParamRole::Spatial, randn(rng, 1, 1, 2, 2));
    Parameter& b = store.add("b", ParamRole::Temporal, randn(rng, 1, 1, 2, 2));
    b.trainable = false;
    Tensor4d a_before = a.value;
    Tensor4d b_before = b.value;

    a.grad.data.setConstant(1.0);
    b.grad.data.setConstant(1.0);
    AdamW opt(AdamWConfig{.lr = 1e-2});
    opt.step(store);
    CHECK(max_abs_diff(b.value, b_before) == 0.0);
    CHECK(max_abs_diff(a.value, a_before) > 0.0);
}
