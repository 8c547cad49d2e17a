#include "flowmatte/flow.hpp"

namespace flowmatte {

Tensor4d corrupt(const Tensor4d& z_alpha, const Tensor4d& eps, double t) {
    require_same_shape(z_alpha, eps, "corrupt");
    if (t < 0.0 || t > 1.0) throw ParamError(strf("corrupt: t=%g outside [0,1]", t));
    Tensor4d out = z_alpha;
    out.data = t * z_alpha.data + (1.0 - t) * eps.data;
    return out;
}

Tensor4d target_velocity(const Tensor4d& z_alpha, const Tensor4d& eps) {
    require_same_shape(z_alpha, eps, "target_velocity");
    Tensor4d out = z_alpha;
    out.data = z_alpha.data - eps.data;
    return out;
}

Tensor4d reconstruct_clean(const FlowState& state, const Tensor4d& v_hat) {
    require_same_shape(state.phi, v_hat, "reconstruct_clean");
    if (state.t < 0.0 || state.t > 1.0)
        throw ParamError(strf("reconstruct_clean: t=%g outside [0,1]", state.t));
    Tensor4d out = state.phi;
    out.data = state.phi.data + (1.0 - state.t) * v_hat.data;
    return out;
}

double sample_time(Rng& rng) {
    return rng.uniform();
}

Tensor4d euler_sample(const VelocityFn& velocity_fn, const Tensor4d& z_c, int latent_channels,
                      const SamplerConfig& cfg) {
    if (cfg.steps < 1) throw ParamError(strf("euler_sample: steps=%d must be >= 1", cfg.steps));
    Rng rng(cfg.seed);
    Tensor4d phi = Tensor4d::random_normal(z_c.t, latent_channels, z_c.h, z_c.w, rng);
    const int n = cfg.steps;
    for (int k = 0; k < n; ++k) {
        double t = double(k) / n;
        Tensor4d v = velocity_fn(phi, z_c, t);
        require_same_shape(phi, v, "euler_sample: velocity");
        if (!v.all_finite())
            throw NumericError(strf("euler_sample: non-finite velocity at step %d (t=%g)", k, t));
        phi.data += (1.0 / n) * v.data;
    }
    return phi;
}

}  // namespace flowmatte
