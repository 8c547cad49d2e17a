#pragma once

#include <functional>

#include "flowmatte/rng.hpp"
#include "flowmatte/tensor.hpp"

namespace flowmatte {

/// Interpolation time plus the corrupted latent at that time.
struct FlowState {
    double t = 0.0;
    Tensor4d phi;
};

struct SamplerConfig {
    int steps = 3;
    std::uint64_t seed = 0;
};

/// Linear corruption path: t*z_alpha + (1-t)*eps. Noise lives at t=0,
/// data at t=1.
Tensor4d corrupt(const Tensor4d& z_alpha, const Tensor4d& eps, double t);

/// Constant transport velocity z_alpha - eps (independent of t).
Tensor4d target_velocity(const Tensor4d& z_alpha, const Tensor4d& eps);

/// Closed-form clean-sample recovery along the straight path:
/// phi + (1-t)*v_hat. Exact when v_hat is the true velocity.
Tensor4d reconstruct_clean(const FlowState& state, const Tensor4d& v_hat);

/// Training-time interpolation time, Uniform[0,1].
double sample_time(Rng& rng);

/// velocity_fn(phi, z_c, t) -> velocity of phi's shape.
using VelocityFn =
    std::function<Tensor4d(const Tensor4d& phi, const Tensor4d& z_c, double t)>;

/// Fixed-grid Euler integration of the flow ODE from seeded Gaussian noise
/// at t=0 to the predicted latent at t=1, in cfg.steps equal steps.
Tensor4d euler_sample(const VelocityFn& velocity_fn, const Tensor4d& z_c, int latent_channels,
                      const SamplerConfig& cfg);

}  // namespace flowmatte
