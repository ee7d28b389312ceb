#pragma once

#include <cmath>
#include <string>

#include "slmprop/nn/param_store.hpp"
#include "slmprop/nn/rng.hpp"

namespace slmprop::detail {

inline nn::Tensor normal_tensor(nn::Shape shape, double sd, nn::Rng& rng) {
    nn::Tensor t(std::move(shape));
    for (auto& v : t.data()) v = sd * rng.normal();
    return t;
}

// He-style init: sd = gain / sqrt(fan_in).
inline void add_conv(nn::ParamStore& ps, const std::string& name, int64_t cout, int64_t cin_per_group, int64_t k,
                     nn::Rng& rng, double gain = std::sqrt(2.0), bool bias = true) {
    const double fan_in = static_cast<double>(cin_per_group * k * k);
    ps.add(name + ".w", normal_tensor({cout, cin_per_group, k, k}, gain / std::sqrt(fan_in), rng));
    if (bias) ps.add(name + ".b", nn::Tensor({cout}, 0.0));
}

inline void add_conv_t(nn::ParamStore& ps, const std::string& name, int64_t cin, int64_t cout, int64_t k,
                       nn::Rng& rng, double gain = std::sqrt(2.0)) {
    const double fan_in = static_cast<double>(cin * k * k) / 4.0;
    ps.add(name + ".w", normal_tensor({cin, cout, k, k}, gain / std::sqrt(fan_in), rng));
    ps.add(name + ".b", nn::Tensor({cout}, 0.0));
}

inline void add_linear(nn::ParamStore& ps, const std::string& name, int64_t out, int64_t in, nn::Rng& rng,
                       double gain = 1.0) {
    ps.add(name + ".w", normal_tensor({out, in}, gain / std::sqrt(static_cast<double>(in)), rng));
    ps.add(name + ".b", nn::Tensor({out}, 0.0));
}

inline void add_zero_linear(nn::ParamStore& ps, const std::string& name, int64_t out, int64_t in) {
    ps.add(name + ".w", nn::Tensor({out, in}, 0.0));
    ps.add(name + ".b", nn::Tensor({out}, 0.0));
}

inline void add_norm(nn::ParamStore& ps, const std::string& name, int64_t c) {
    ps.add(name + ".g", nn::Tensor({c}, 1.0));
    ps.add(name + ".b", nn::Tensor({c}, 0.0));
}

} // namespace slmprop::detail
