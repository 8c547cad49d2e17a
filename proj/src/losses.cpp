#include "flowmatte/losses.hpp"

#include <cmath>

namespace flowmatte {

using ad::Tape;
using ad::Var;

namespace {

Tensor4d binomial5_kernel(double gain) {
    // outer product of [1 4 6 4 1]/16
    const double b[5] = {1, 4, 6, 4, 1};
    Tensor4d k(1, 1, 5, 5);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) k(0, 0, i, j) = gain * b[i] * b[j] / 256.0;
    return k;
}

Var blur_down(Tape& tape, Var x, Var kernel, Var zero_bias) {
    return ad::conv2d(tape, x, kernel, zero_bias, 2, 2, ad::PadMode::Reflect);
}

Var blur_up(Tape& tape, Var x, Var kernel4, Var zero_bias, int out_h, int out_w) {
    Var stuffed = ad::zero_stuff2(tape, x);
    Var up = ad::conv2d(tape, stuffed, kernel4, zero_bias, 1, 2, ad::PadMode::Reflect);
    const Tensor4d& uv = tape.value(up);
    if (uv.h != out_h || uv.w != out_w) up = ad::crop_hw(tape, up, out_h, out_w);
    return up;
}

}  // namespace

void validate_pyramid_levels(int levels, int h, int w) {
    if (levels < 1) throw ParamError(strf("pyramid levels %d must be >= 1", levels));
    int denom = 1 << (levels - 1);
    if (h / denom < 4 || w / denom < 4)
        throw ParamError(strf("pyramid levels %d too deep for %dx%d (coarsest side < 4)", levels,
                              h, w));
}

Var latent_fm_loss(Tape& tape, Var v_pred, const Tensor4d& z_alpha, const Tensor4d& eps) {
    require_same_shape(z_alpha, eps, "latent_fm_loss");
    Tensor4d target = z_alpha;
    target.data = z_alpha.data - eps.data;
    return ad::mse(tape, v_pred, tape.constant(std::move(target)));
}

Var laplacian_pyramid_loss(Tape& tape, Var pred, Var gt, int levels) {
    const Tensor4d& pv = tape.value(pred);
    const Tensor4d& gv = tape.value(gt);
    require_same_shape(pv, gv, "laplacian_pyramid_loss");
    validate_pyramid_levels(levels, pv.h, pv.w);

    Var kernel = tape.constant(binomial5_kernel(1.0));
    Var kernel4 = tape.constant(binomial5_kernel(4.0));
    Var zero_bias = tape.constant(Tensor4d(1, 1, 1, 1));

    Var gp = pred, gg = gt;
    Var loss = tape.constant(Tensor4d::scalar(0.0));
    for (int k = 0; k + 1 < levels; ++k) {
        const Tensor4d& cur = tape.value(gp);
        Var np = blur_down(tape, gp, kernel, zero_bias);
        Var ng = blur_down(tape, gg, kernel, zero_bias);
        Var lap_p = ad::sub(tape, gp, blur_up(tape, np, kernel4, zero_bias, cur.h, cur.w));
        Var lap_g = ad::sub(tape, gg, blur_up(tape, ng, kernel4, zero_bias, cur.h, cur.w));
        loss = ad::add(tape, loss, ad::scale(tape, ad::l1(tape, lap_p, lap_g), double(1 << k)));
        gp = np;
        gg = ng;
    }
    // low-pass residual band keeps the decomposition invertible
    loss = ad::add(tape, loss,
                   ad::scale(tape, ad::l1(tape, gp, gg), double(1 << (levels - 1))));
    return loss;
}

Var gradient_penalty_loss(Tape& tape, Var pred, Var gt) {
    require_same_shape(tape.value(pred), tape.value(gt), "gradient_penalty_loss");
    Var dxl = ad::l1(tape, ad::fwd_diff_x(tape, pred), ad::fwd_diff_x(tape, gt));
    Var dyl = ad::l1(tape, ad::fwd_diff_y(tape, pred), ad::fwd_diff_y(tape, gt));
    return ad::scale(tape, ad::add(tape, dxl, dyl), 0.5);
}

PixelLossVars pixel_loss(Tape& tape, Var pred, Var gt, const LossWeights& weights) {
    if (weights.lambda_gp < 0) throw ParamError("lambda_gp must be >= 0");
    PixelLossVars out;
    out.l1 = ad::l1(tape, pred, gt);
    out.lap = laplacian_pyramid_loss(tape, pred, gt, weights.pyramid_levels);
    out.gp = gradient_penalty_loss(tape, pred, gt);
    out.pixel = ad::add(tape, ad::add(tape, out.l1, out.lap),
                        ad::scale(tape, out.gp, weights.lambda_gp));
    return out;
}

Var decode_for_pixel_loss(Tape& tape, const FlowState& state, ad::Var v_pred,
                          const LatentCodec& codec) {
    if (state.t < 0.0 || state.t > 1.0)
        throw ParamError(strf("decode_for_pixel_loss: t=%g outside [0,1]", state.t));
    require_same_shape(state.phi, tape.value(v_pred), "decode_for_pixel_loss");
    Var phi = tape.constant(state.phi);
    Var z_hat = ad::add_scaled(tape, phi, v_pred, 1.0, 1.0 - state.t);
    return codec.decode_matte_on_tape(tape, z_hat);
}

// ---- plain versions ----

double latent_fm_loss(const Tensor4d& v_pred, const Tensor4d& z_alpha, const Tensor4d& eps) {
    require_same_shape(v_pred, z_alpha, "latent_fm_loss");
    Tape tape;
    tape.grad_enabled = false;
    return tape.value(latent_fm_loss(tape, tape.input(v_pred), z_alpha, eps)).data[0];
}

double laplacian_pyramid_loss(const AlphaSequence& pred, const AlphaSequence& gt, int levels) {
    Tape tape;
    tape.grad_enabled = false;
    return tape
        .value(laplacian_pyramid_loss(tape, tape.input(pred.alphas), tape.input(gt.alphas),
                                      levels))
        .data[0];
}

double gradient_penalty_loss(const AlphaSequence& pred, const AlphaSequence& gt) {
    Tape tape;
    tape.grad_enabled = false;
    return tape.value(gradient_penalty_loss(tape, tape.input(pred.alphas), tape.input(gt.alphas)))
        .data[0];
}

PixelLossParts pixel_loss(const AlphaSequence& pred, const AlphaSequence& gt,
                          const LossWeights& weights) {
    Tape tape;
    tape.grad_enabled = false;
    PixelLossVars vars =
        pixel_loss(tape, tape.input(pred.alphas), tape.input(gt.alphas), weights);
    PixelLossParts parts;
    parts.l1 = tape.value(vars.l1).data[0];
    parts.lap = tape.value(vars.lap).data[0];
    parts.gp = tape.value(vars.gp).data[0];
    parts.pixel = tape.value(vars.pixel).data[0];
    return parts;
}

AlphaSequence decode_for_pixel_loss(const FlowState& state, const Tensor4d& v_pred,
                                    const LatentCodec& codec) {
    Tape tape;
    tape.grad_enabled = false;
    Var out = decode_for_pixel_loss(tape, state, tape.input(v_pred), codec);
    return AlphaSequence(tape.value(out));
}

double total_loss(double latent_part, double pixel_part, const LossWeights& weights,
                  bool pixel_enabled) {
    if (weights.lambda_pixel < 0 || weights.lambda_gp < 0)
        throw ParamError("loss weights must be >= 0");
    if (latent_part < 0 || pixel_part < 0)
        throw ParamError("loss parts must be >= 0");
    double lp = pixel_enabled ? weights.lambda_pixel : 0.0;
    return latent_part + lp * pixel_part;
}

LossReport make_loss_report(double latent, const PixelLossParts& parts,
                            const LossWeights& weights, bool pixel_enabled) {
    LossReport r;
    r.latent = latent;
    r.l1 = parts.l1;
    r.lap = parts.lap;
    r.gp = parts.gp;
    r.total = total_loss(latent, parts.pixel, weights, pixel_enabled);
    return r;
}

}  // namespace flowmatte
