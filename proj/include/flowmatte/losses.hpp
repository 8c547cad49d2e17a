#pragma once

#include "flowmatte/autodiff.hpp"
#include "flowmatte/codec.hpp"
#include "flowmatte/flow.hpp"
#include "flowmatte/matting.hpp"

namespace flowmatte {

struct LossWeights {
    double lambda_pixel = 0.1;  // weight of the pixel stack in the total
    double lambda_gp = 0.1;     // weight of the gradient penalty within it
    int pyramid_levels = 3;
};

struct LossReport {
    double latent = 0;
    double l1 = 0;
    double lap = 0;
    double gp = 0;
    double total = 0;
};

// ---- differentiable (tape) versions, used by the training step ----

/// Mean squared error between the predicted velocity and z_alpha - eps.
ad::Var latent_fm_loss(ad::Tape& tape, ad::Var v_pred, const Tensor4d& z_alpha,
                       const Tensor4d& eps);

/// Band-weighted Laplacian pyramid L1: bands k = 0..levels-2 weighted 2^k
/// plus the low-pass residual at 2^(levels-1). levels=1 is exactly L1.
/// Zero iff pred == gt (the residual band makes the transform invertible).
ad::Var laplacian_pyramid_loss(ad::Tape& tape, ad::Var pred, ad::Var gt, int levels);

/// Mean L1 distance between forward-difference spatial gradients
/// (replicate boundary). Zero on pairs differing by a constant.
ad::Var gradient_penalty_loss(ad::Tape& tape, ad::Var pred, ad::Var gt);

struct PixelLossVars {
    ad::Var l1;
    ad::Var lap;
    ad::Var gp;
    ad::Var pixel;  // l1 + lap + lambda_gp * gp
};
PixelLossVars pixel_loss(ad::Tape& tape, ad::Var pred, ad::Var gt, const LossWeights& weights);

/// Straight-trajectory decode-through path: reconstructs the clean latent
/// from (phi, t, v_pred) and decodes it to a [0,1] matte; gradients flow
/// through the frozen codec into v_pred.
ad::Var decode_for_pixel_loss(ad::Tape& tape, const FlowState& state, ad::Var v_pred,
                              const LatentCodec& codec);

// ---- plain double versions (reports, tests) ----

double latent_fm_loss(const Tensor4d& v_pred, const Tensor4d& z_alpha, const Tensor4d& eps);
double laplacian_pyramid_loss(const AlphaSequence& pred, const AlphaSequence& gt, int levels);
double gradient_penalty_loss(const AlphaSequence& pred, const AlphaSequence& gt);

struct PixelLossParts {
    double l1 = 0, lap = 0, gp = 0, pixel = 0;
};
PixelLossParts pixel_loss(const AlphaSequence& pred, const AlphaSequence& gt,
                          const LossWeights& weights);

AlphaSequence decode_for_pixel_loss(const FlowState& state, const Tensor4d& v_pred,
                                    const LatentCodec& codec);

/// latent + lambda_pixel * pixel; pixel supervision disabled treats
/// lambda_pixel as 0. Negative weights are rejected.
double total_loss(double latent_part, double pixel_part, const LossWeights& weights,
                  bool pixel_enabled = true);

LossReport make_loss_report(double latent, const PixelLossParts& parts, const LossWeights& weights,
                            bool pixel_enabled);

void validate_pyramid_levels(int levels, int h, int w);

}  // namespace flowmatte
