#include "slmprop/nn/param_store.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include "detail/binary_io.hpp"
#include "slmprop/error.hpp"

namespace slmprop::nn {

void ParamStore::add(const std::string& name, Tensor value) {
    Parameter p;
    p.first_moment = Tensor(value.shape(), 0.0);
    p.second_moment = Tensor(value.shape(), 0.0);
    p.value = std::move(value);
    params_[name] = std::move(p);
}

bool ParamStore::contains(std::string_view name) const { return params_.find(name) != params_.end(); }

const Parameter& ParamStore::param(std::string_view name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error(ErrorCode::MissingGrad, "unknown parameter '" + std::string(name) + "'");
    return it->second;
}

Parameter& ParamStore::mutable_param(std::string_view name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error(ErrorCode::MissingGrad, "unknown parameter '" + std::string(name) + "'");
    return it->second;
}

const Tensor& ParamStore::value(std::string_view name) const { return param(name).value; }
Tensor& ParamStore::mutable_value(std::string_view name) { return mutable_param(name).value; }

int64_t ParamStore::total_elements() const {
    int64_t n = 0;
    for (const auto& [_, p] : params_) n += p.value.numel();
    return n;
}

bool ParamStore::same_values(const ParamStore& other) const {
    if (params_.size() != other.params_.size()) return false;
    for (const auto& [name, p] : params_) {
        auto it = other.params_.find(name);
        if (it == other.params_.end() || !(it->second.value == p.value)) return false;
    }
    return true;
}

ParamBinding::ParamBinding(Tape& tape, const ParamStore& store) : tape_(&tape), store_(&store) {}

Var ParamBinding::operator[](std::string_view name) const {
    auto it = vars_.find(name);
    if (it != vars_.end()) return it->second;
    if (!store_->contains(name)) throw Error(ErrorCode::ConfigInvalid, "unknown parameter '" + std::string(name) + "'");
    return vars_.emplace(std::string(name), tape_->leaf(store_->value(name))).first->second;
}

bool ParamBinding::contains(std::string_view name) const { return store_->contains(name); }

GradMap ParamBinding::grads() const {
    GradMap out;
    for (const auto& [name, p] : *store_) {
        auto it = vars_.find(name);
        out.emplace(name, it == vars_.end() ? Tensor(p.value.shape(), 0.0) : tape_->grad(it->second));
    }
    return out;
}

void adamw_step(ParamStore& params, const GradMap& grads, const AdamWConfig& cfg,
                const std::function<double(std::string_view)>& lr_for) {
    for (const auto& [name, _] : params) {
        if (grads.find(name) == grads.end()) {
            throw Error(ErrorCode::MissingGrad, "no gradient for parameter '" + name + "'");
        }
    }
    for (auto& [name, p] : params) {
        const Tensor& g = grads.find(name)->second;
        if (g.shape() != p.value.shape()) throw Error(ErrorCode::ShapeMismatch, "gradient shape for '" + name + "'");
        const double lr = lr_for(name);
        p.step += 1;
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p.step));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p.step));
        for (int64_t i = 0; i < p.value.numel(); ++i) {
            double& w = p.value[i];
            double& m = p.first_moment[i];
            double& v = p.second_moment[i];
            w -= lr * cfg.weight_decay * w;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g[i];
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g[i] * g[i];
            w -= lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
        }
    }
}

void adamw_step(ParamStore& params, const GradMap& grads, double lr, const AdamWConfig& cfg) {
    adamw_step(params, grads, cfg, [lr](std::string_view) { return lr; });
}

double cosine_lr(int64_t step, int64_t total_steps, double lr0) {
    if (total_steps <= 0) return lr0;
    return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

namespace {
constexpr char kMagic[4] = {'S', 'C', 'K', 'P'};
constexpr uint32_t kVersion = 1;
} // namespace

void save_params(const ParamStore& store, const std::filesystem::path& path, ArchiveDtype dtype) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error(ErrorCode::IoFailure, "cannot open '" + path.string() + "' for writing");
    os.write(kMagic, 4);
    detail::write_le<uint32_t>(os, kVersion);
    detail::write_le<uint32_t>(os, static_cast<uint32_t>(store.size()));
    for (const auto& [name, p] : store) {
        detail::write_le<uint32_t>(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_le<uint8_t>(os, static_cast<uint8_t>(dtype));
        detail::write_le<uint32_t>(os, static_cast<uint32_t>(p.value.rank()));
        for (auto d : p.value.shape()) detail::write_le<uint64_t>(os, static_cast<uint64_t>(d));
        for (double x : p.value.data()) {
            if (dtype == ArchiveDtype::F64) detail::write_le<double>(os, x);
            else detail::write_le<float>(os, static_cast<float>(x));
        }
    }
    if (!os) throw Error(ErrorCode::IoFailure, "write failed for '" + path.string() + "'");
}

ParamStore load_params(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error(ErrorCode::IoFailure, "cannot open '" + path.string() + "'");
    char magic[4];
    if (!is.read(magic, 4)) throw Error(ErrorCode::TruncatedFile, "file ends inside field 'magic'");
    if (std::string(magic, 4) != std::string(kMagic, 4)) throw Error(ErrorCode::BadMagic, "magic is not SCKP");
    const auto version = detail::read_le<uint32_t>(is, "version");
    if (version != kVersion) throw Error(ErrorCode::UnsupportedVersion, "version " + std::to_string(version));
    const auto count = detail::read_le<uint32_t>(is, "count");
    ParamStore store;
    for (uint32_t i = 0; i < count; ++i) {
        const auto len = detail::read_le<uint32_t>(is, "name_len");
        std::string name(len, '\0');
        if (!is.read(name.data(), len)) throw Error(ErrorCode::TruncatedFile, "file ends inside field 'name'");
        const auto dtype = detail::read_le<uint8_t>(is, "dtype");
        if (dtype > 1) throw Error(ErrorCode::BadCheckpoint, "dtype tag " + std::to_string(dtype));
        const auto rank = detail::read_le<uint32_t>(is, "rank");
        Shape shape;
        for (uint32_t r = 0; r < rank; ++r) shape.push_back(static_cast<int64_t>(detail::read_le<uint64_t>(is, "dim")));
        Tensor t(shape);
        for (auto& x : t.data()) {
            x = dtype == 1 ? detail::read_le<double>(is, "payload")
                           : static_cast<double>(detail::read_le<float>(is, "payload"));
        }
        store.add(name, std::move(t));
    }
    return store;
}

} // namespace slmprop::nn
