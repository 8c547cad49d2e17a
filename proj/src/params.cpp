#include "flowmatte/params.hpp"

#include <cmath>
#include <istream>
#include <ostream>

namespace flowmatte {

const char* to_string(ParamRole role) {
    switch (role) {
        case ParamRole::Spatial: return "spatial";
        case ParamRole::Temporal: return "temporal";
        case ParamRole::Lora: return "lora";
    }
    return "?";
}

ParamRole param_role_from_string(const std::string& s) {
    if (s == "spatial") return ParamRole::Spatial;
    if (s == "temporal") return ParamRole::Temporal;
    if (s == "lora") return ParamRole::Lora;
    throw ConfigError(strf("unknown parameter role '%s'", s.c_str()));
}

Parameter& ParamStore::add(const std::string& name, ParamRole role, Tensor4d init) {
    if (index_.count(name)) throw ConfigError(strf("duplicate parameter '%s'", name.c_str()));
    Parameter p;
    p.name = name;
    p.role = role;
    p.grad = Tensor4d::zeros(init.t, init.c, init.h, init.w);
    p.adam_m = Tensor4d::zeros(init.t, init.c, init.h, init.w);
    p.adam_v = Tensor4d::zeros(init.t, init.c, init.h, init.w);
    p.value = std::move(init);
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return params_.back();
}

Parameter& ParamStore::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError(strf("no parameter named '%s'", name.c_str()));
    return params_[it->second];
}

const Parameter& ParamStore::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError(strf("no parameter named '%s'", name.c_str()));
    return params_[it->second];
}

void ParamStore::zero_grads() {
    for (auto& p : params_) p.zero_grad();
}

std::int64_t ParamStore::count_values(ParamRole role) const {
    std::int64_t n = 0;
    for (const auto& p : params_)
        if (p.role == role) n += p.value.size();
    return n;
}

std::int64_t ParamStore::count_values() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
}

std::uint64_t ParamStore::role_checksum(ParamRole role) const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& p : params_) {
        if (p.role != role) continue;
        h = fnv1a(p.name.data(), p.name.size(), h);
        h = fnv1a(p.value.data.data(), std::size_t(p.value.size()) * sizeof(double), h);
    }
    return h;
}

std::uint64_t ParamStore::full_checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& p : params_) {
        h = fnv1a(p.name.data(), p.name.size(), h);
        h = fnv1a(p.value.data.data(), std::size_t(p.value.size()) * sizeof(double), h);
    }
    return h;
}

void ParamStore::set_trainable(ParamRole role, bool trainable) {
    for (auto& p : params_)
        if (p.role == role) p.trainable = trainable;
}

void ParamStore::set_all_trainable(bool trainable) {
    for (auto& p : params_) p.trainable = trainable;
}

void write_string(std::ostream& os, const std::string& s) {
    write_pod(os, std::uint64_t(s.size()));
    os.write(s.data(), std::streamsize(s.size()));
}

std::string read_string(std::istream& is) {
    auto n = read_pod<std::uint64_t>(is);
    std::string s(n, '\0');
    is.read(s.data(), std::streamsize(n));
    return s;
}

void write_tensor(std::ostream& os, const Tensor4d& t) {
    write_pod(os, std::int32_t(t.t));
    write_pod(os, std::int32_t(t.c));
    write_pod(os, std::int32_t(t.h));
    write_pod(os, std::int32_t(t.w));
    os.write(reinterpret_cast<const char*>(t.data.data()),
             std::streamsize(t.size() * std::int64_t(sizeof(double))));
}

Tensor4d read_tensor(std::istream& is) {
    int t = read_pod<std::int32_t>(is);
    int c = read_pod<std::int32_t>(is);
    int h = read_pod<std::int32_t>(is);
    int w = read_pod<std::int32_t>(is);
    Tensor4d out(t, c, h, w);
    is.read(reinterpret_cast<char*>(out.data.data()),
            std::streamsize(out.size() * std::int64_t(sizeof(double))));
    if (!is) throw IoError("truncated tensor in stream");
    return out;
}

void ParamStore::save(std::ostream& os) const {
    write_pod(os, std::uint64_t(params_.size()));
    for (const auto& p : params_) {
        write_string(os, p.name);
        write_string(os, to_string(p.role));
        write_pod(os, std::uint8_t(p.trainable ? 1 : 0));
        write_tensor(os, p.value);
        write_tensor(os, p.adam_m);
        write_tensor(os, p.adam_v);
    }
}

void ParamStore::load(std::istream& is) {
    params_.clear();
    index_.clear();
    auto n = read_pod<std::uint64_t>(is);
    for (std::uint64_t i = 0; i < n; ++i) {
        std::string name = read_string(is);
        ParamRole role = param_role_from_string(read_string(is));
        bool trainable = read_pod<std::uint8_t>(is) != 0;
        Tensor4d value = read_tensor(is);
        Parameter& p = add(name, role, std::move(value));
        p.trainable = trainable;
        p.adam_m = read_tensor(is);
        p.adam_v = read_tensor(is);
    }
}

void AdamW::step(ParamStore& store) {
    ++t_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double bc1 = 1.0 - std::pow(b1, double(t_));
    const double bc2 = 1.0 - std::pow(b2, double(t_));
    for (auto& p : store.all()) {
        if (!p.trainable) continue;
        p.adam_m.data = b1 * p.adam_m.data + (1.0 - b1) * p.grad.data;
        p.adam_v.data = b2 * p.adam_v.data + (1.0 - b2) * p.grad.data.square();
        // decoupled weight decay, then the Adam step
        p.value.data -= cfg_.lr * cfg_.weight_decay * p.value.data;
        p.value.data -=
            cfg_.lr * (p.adam_m.data / bc1) / ((p.adam_v.data / bc2).sqrt() + cfg_.eps);
    }
}

}  // namespace flowmatte
