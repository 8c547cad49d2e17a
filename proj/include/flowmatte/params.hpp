#pragma once

#include <deque>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "flowmatte/tensor.hpp"

namespace flowmatte {

/// Parameter roles drive the stage freeze contracts: `spatial` and
/// `temporal` partition the base network, `lora` marks injected adapters.
enum class ParamRole { Spatial, Temporal, Lora };

const char* to_string(ParamRole role);
ParamRole param_role_from_string(const std::string& s);

struct Parameter {
    std::string name;
    ParamRole role = ParamRole::Spatial;
    bool trainable = true;
    Tensor4d value;
    Tensor4d grad;
    // AdamW moments, carried here so checkpoints resume bit-exactly.
    Tensor4d adam_m;
    Tensor4d adam_v;

    void zero_grad() { grad.data.setZero(); }
};

class ParamStore {
public:
    /// References stay valid across later add() calls (deque storage).
    Parameter& add(const std::string& name, ParamRole role, Tensor4d init);
    Parameter& at(const std::string& name);
    const Parameter& at(const std::string& name) const;
    bool has(const std::string& name) const { return index_.count(name) != 0; }

    std::deque<Parameter>& all() { return params_; }
    const std::deque<Parameter>& all() const { return params_; }

    void zero_grads();
    std::int64_t count_values(ParamRole role) const;
    std::int64_t count_values() const;

    /// Checksum over the values of every parameter with the given role,
    /// in creation order.
    std::uint64_t role_checksum(ParamRole role) const;
    std::uint64_t full_checksum() const;

    void set_trainable(ParamRole role, bool trainable);
    void set_all_trainable(bool trainable);

    void save(std::ostream& os) const;
    void load(std::istream& is);

private:
    std::deque<Parameter> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Decoupled-weight-decay Adam. Updates trainable parameters only; frozen
/// parameters and their moments are untouched.
struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
};

class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    void step(ParamStore& store);
    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }
    std::int64_t iteration() const { return t_; }
    void set_iteration(std::int64_t t) { t_ = t; }
    const AdamWConfig& config() const { return cfg_; }

private:
    AdamWConfig cfg_;
    std::int64_t t_ = 0;
};

// Binary tensor serialization shared by checkpoint writers.
void write_tensor(std::ostream& os, const Tensor4d& t);
Tensor4d read_tensor(std::istream& is);
void write_string(std::ostream& os, const std::string& s);
std::string read_string(std::istream& is);
template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}

}  // namespace flowmatte
