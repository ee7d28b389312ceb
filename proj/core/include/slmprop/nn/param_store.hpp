#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <string_view>

#include "slmprop/nn/tape.hpp"

namespace slmprop::nn {

struct Parameter {
    Tensor value;
    Tensor first_moment;
    Tensor second_moment;
    int64_t step = 0;
};

using GradMap = std::map<std::string, Tensor, std::less<>>;

// Named learnable tensors plus their AdamW state; iteration order is by name.
class ParamStore {
public:
    void add(const std::string& name, Tensor value);
    bool contains(std::string_view name) const;
    const Tensor& value(std::string_view name) const;
    Tensor& mutable_value(std::string_view name);
    const Parameter& param(std::string_view name) const;
    Parameter& mutable_param(std::string_view name);

    size_t size() const noexcept { return params_.size(); }
    int64_t total_elements() const;
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }
    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }

    // Equal names, shapes and values (moments are ignored).
    bool same_values(const ParamStore& other) const;

private:
    std::map<std::string, Parameter, std::less<>> params_;
};

// Binds parameters of a store as tape leaves for one forward pass, on first use.
class ParamBinding {
public:
    ParamBinding(Tape& tape, const ParamStore& store);

    Var operator[](std::string_view name) const;
    bool contains(std::string_view name) const;
    Tape& tape() const { return *tape_; }

    // Gradients of every parameter of the store after tape.backward() (zeros if unused).
    GradMap grads() const;

private:
    Tape* tape_;
    const ParamStore* store_;
    mutable std::map<std::string, Var, std::less<>> vars_;
};

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// Decoupled weight decay Adam; `lr_for` gives the learning rate of each parameter by name.
void adamw_step(ParamStore& params, const GradMap& grads, const AdamWConfig& cfg,
                const std::function<double(std::string_view)>& lr_for);
void adamw_step(ParamStore& params, const GradMap& grads, double lr, const AdamWConfig& cfg);

double cosine_lr(int64_t step, int64_t total_steps, double lr0);

// Named-tensor archive: "SCKP" | version u32 | count u32 | per tensor (name_len u32, name,
// dtype u8, rank u32, dims u64..., payload LE). f64 payloads round-trip the store exactly.
enum class ArchiveDtype : uint8_t { F32 = 0, F64 = 1 };
void save_params(const ParamStore& store, const std::filesystem::path& path,
                 ArchiveDtype dtype = ArchiveDtype::F64);
ParamStore load_params(const std::filesystem::path& path);

} // namespace slmprop::nn
