#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "flowmatte/autodiff.hpp"
#include "flowmatte/params.hpp"

namespace flowmatte {

struct DenoiserConfig {
    int base_channels = 32;
    int depth = 3;            // resolution levels; depth-1 downsamples
    int temporal_kernel = 3;  // odd, centered temporal convolutions
    int context_dim = 128;
    int time_embed_dim = 128;
    int latent_channels = 4;  // per stream; the net sees [phi ; z_c] = 2x
    int norm_groups = 8;
    std::uint64_t seed = 99;
};

struct ParamPartition {
    std::vector<std::string> spatial;
    std::vector<std::string> temporal;
    std::vector<std::string> lora;
};

struct LoraConfig {
    int rank = 32;
    /// "auto" targets every spatial conv/projection weight whose
    /// min(fan_out, fan_in) admits the rank; otherwise a comma-separated
    /// list of weight names, each of which must exist and be eligible.
    std::string target_layers = "auto";
    double scale = 1.0;
    std::uint64_t seed = 4242;
};

struct ForwardOptions {
    /// Diagnostic mode: temporal blocks act as identity, making the
    /// network strictly frame-local.
    bool bypass_temporal = false;
};

/// Compact factored 3D U-Net velocity model: 2D spatial convolutions
/// interleaved with centered 1D temporal convolutions, FiLM modulation fed
/// by the time embedding plus a fixed all-zeros context vector, and
/// frame-wise concatenation conditioning on the clip latent.
class Denoiser {
public:
    explicit Denoiser(DenoiserConfig cfg = {});

    const DenoiserConfig& config() const { return cfg_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }

    Tensor4d forward(const Tensor4d& phi_t, const Tensor4d& z_c, double t,
                     const ForwardOptions& opts = {}) const;
    ad::Var forward_on_tape(ad::Tape& tape, ad::Var phi_t, ad::Var z_c, double t,
                            const ForwardOptions& opts = {}) const;

    /// Total, disjoint classification of every trainable parameter.
    ParamPartition partition_params() const;

    // subset: "spatial" | "temporal" | "lora" | "all_base" | "all"
    void freeze(const std::string& subset);
    void unfreeze(const std::string& subset);
    std::uint64_t checksum(const std::string& subset) const;

    void inject_lora(const LoraConfig& cfg);
    bool lora_injected() const { return lora_injected_; }
    const LoraConfig& lora_config() const { return lora_cfg_; }
    std::int64_t lora_value_count() const;

    void save(const std::filesystem::path& path) const;
    void save(std::ostream& os) const;
    static Denoiser load(const std::filesystem::path& path);
    static Denoiser load(std::istream& is);

    /// Spatial downsampling the latent must be divisible by: 2^(depth-1).
    int latent_divisor() const { return 1 << (cfg_.depth - 1); }

private:
    void build();
    std::vector<ParamRole> roles_for(const std::string& subset) const;
    ad::Var weight(ad::Tape& tape, const std::string& name) const;
    ad::Var resblock(ad::Tape& tape, const std::string& name, ad::Var x, ad::Var ctx_act,
                     int cin, int cout) const;
    ad::Var temporal_block(ad::Tape& tape, const std::string& name, ad::Var x,
                           const ForwardOptions& opts) const;

    DenoiserConfig cfg_;
    mutable ParamStore store_;
    bool lora_injected_ = false;
    LoraConfig lora_cfg_;
    struct LoraTarget {
        std::string base;
        int fan_out = 0, fan_in = 0;
    };
    std::vector<LoraTarget> lora_targets_;
};

}  // namespace flowmatte
