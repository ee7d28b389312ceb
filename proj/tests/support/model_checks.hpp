#pragma once

#include <map>
#include <string>

#include "grad_check.hpp"
#include "slmprop/attention/attention.hpp"
#include "slmprop/memory/memory_bank.hpp"
#include "slmprop/nn/ops.hpp"
#include "slmprop/nn/param_store.hpp"

namespace testsupport {

namespace att = slmprop::attention;
namespace mem = slmprop::memory;

inline att::ConditionConfig tiny_condition_config(att::AblationMode mode) {
    att::ConditionConfig c;
    c.stack = {1, 2, 4};
    c.fuser = {4, 2, 1, true};
    c.ablation = {mode};
    return c;
}

// Random values everywhere, including the zero-initialized layers, so no path is trivially flat.
inline slmprop::nn::ParamStore random_condition_params(const att::ConditionConfig& c, uint64_t seed) {
    slmprop::nn::ParamStore ps;
    slmprop::nn::Rng rng(seed);
    att::init_stack_params(ps, att::kLongStack, c.stack, c.ablation.long_policy().n_recent + 1, rng);
    if (c.ablation.dual()) {
        att::init_stack_params(ps, att::kShortStack, c.stack, c.ablation.short_policy().n_recent + 1, rng);
        att::init_fuser_params(ps, c.fuser, rng);
    }
    for (auto& [name, p] : ps)
        for (auto& v : p.value.data()) v = 0.5 * rng.normal() + (name.ends_with(".g") ? 1.0 : 0.0);
    return ps;
}

// Finite differences on a sample of parameter entries through a tape built by `loss`.
inline GradCheckResult param_grad_check(slmprop::nn::ParamStore& ps,
                                        const std::function<Var(const slmprop::nn::ParamBinding&)>& out_fn,
                                        uint64_t seed, int per_param = 2, double h = 1e-5) {
    Tensor proj;
    auto scalar = [&](bool grad, slmprop::nn::GradMap* g) {
        Tape tape(grad);
        slmprop::nn::ParamBinding p(tape, ps);
        Var out = out_fn(p);
        if (proj.empty()) {
            slmprop::nn::Rng r(seed);
            proj = random_tensor(out.shape(), r);
        }
        double s = 0.0;
        for (int64_t i = 0; i < out.value().numel(); ++i) s += proj[i] * out.value()[i];
        if (g) {
            tape.backward(slmprop::nn::sum(slmprop::nn::mul(out, tape.constant(proj))));
            *g = p.grads();
        }
        return s;
    };
    slmprop::nn::GradMap analytic;
    scalar(true, &analytic);
    slmprop::nn::Rng pick(seed + 1);
    GradCheckResult res;
    for (auto& [name, prm] : ps) {
        auto& t = prm.value;
        for (int k = 0; k < per_param; ++k) {
            const int64_t i = pick.uniform_int(0, t.numel() - 1);
            const double orig = t[i];
            t[i] = orig + h;
            const double fp = scalar(false, nullptr);
            t[i] = orig - h;
            const double fm = scalar(false, nullptr);
            t[i] = orig;
            const double a = analytic.at(name)[i];
            res.max_rel_error = std::max(res.max_rel_error, rel_error(a, (fp - fm) / (2.0 * h)));
            res.max_abs_grad = std::max(res.max_abs_grad, std::abs(a));
            ++res.checked;
        }
    }
    return res;
}

// Inputs: features, then one feature per bank entry (short bank first, then long bank).
inline GradCheckResult condition_frame_grad_check(att::AblationMode mode, uint64_t seed, bool check_params) {
    const auto cfg = tiny_condition_config(mode);
    auto ps = random_condition_params(cfg, seed);
    slmprop::nn::Rng rng(seed + 10);
    const int64_t C = cfg.stack.channels;
    std::vector<Tensor> xs;
    for (int i = 0; i < 4; ++i) xs.push_back(random_tensor({1, C, 2, 3}, rng));
    auto build = [&](const slmprop::nn::ParamBinding& p, const std::vector<Var>& v) {
        mem::MemoryBank<Var> short_bank(cfg.ablation.short_policy()), long_bank(cfg.ablation.long_policy());
        short_bank = mem::bank_update(short_bank, {v[1], 3, false});
        long_bank = mem::bank_update(long_bank, {v[2], 0, true});
        long_bank = mem::bank_update(long_bank, {v[3], 3, false});
        return att::condition_frame(p, cfg, v[0], short_bank, long_bank);
    };
    GradCheckResult r = grad_check(
        [&](Tape& tape, const std::vector<Var>& v) {
            slmprop::nn::ParamBinding p(tape, ps);
            return build(p, v);
        },
        xs, seed);
    if (check_params) {
        auto pr = param_grad_check(
            ps,
            [&](const slmprop::nn::ParamBinding& p) {
                std::vector<Var> v;
                for (const auto& x : xs) v.push_back(p.tape().constant(x));
                return build(p, v);
            },
            seed);
        r.max_rel_error = std::max(r.max_rel_error, pr.max_rel_error);
        r.max_abs_grad = std::max(r.max_abs_grad, pr.max_abs_grad);
        r.checked += pr.checked;
    }
    return r;
}

inline GradCheckResult fuse_grad_check(uint64_t seed, bool projection) {
    att::FuserConfig cfg{4, 2, 2, projection};
    slmprop::nn::ParamStore ps;
    slmprop::nn::Rng rng(seed);
    att::init_fuser_params(ps, cfg, rng);
    for (auto& [name, p] : ps)
        for (auto& v : p.value.data()) v = 0.5 * rng.normal();
    std::vector<Tensor> xs{random_tensor({1, 4, 3, 3}, rng), random_tensor({1, 4, 3, 3}, rng)};
    GradCheckResult r = grad_check(
        [&](Tape& tape, const std::vector<Var>& v) {
            slmprop::nn::ParamBinding p(tape, ps);
            return att::fuse(p, cfg, v[0], v[1]);
        },
        xs, seed);
    auto pr = param_grad_check(
        ps,
        [&](const slmprop::nn::ParamBinding& p) {
            return att::fuse(p, cfg, p.tape().constant(xs[0]), p.tape().constant(xs[1]));
        },
        seed, 3);
    r.max_rel_error = std::max(r.max_rel_error, pr.max_rel_error);
    r.checked += pr.checked;
    return r;
}

// max |fuse(a, b) - (a + b)| over random inputs with a freshly initialized fuser.
inline double fuser_identity_error(int trials, uint64_t seed) {
    slmprop::nn::Rng rng(seed);
    double worst = 0.0;
    for (int t = 0; t < trials; ++t) {
        att::FuserConfig cfg{rng.uniform_int(1, 8), static_cast<int>(rng.uniform_int(1, 4)),
                             static_cast<int>(rng.uniform_int(0, 3)), rng.bernoulli(0.5)};
        slmprop::nn::ParamStore ps;
        att::init_fuser_params(ps, cfg, rng);
        const int64_t h = rng.uniform_int(1, 9), w = rng.uniform_int(1, 9);
        Tensor a = random_tensor({1, cfg.channels, h, w}, rng, 3.0), b = random_tensor({1, cfg.channels, h, w}, rng, 3.0);
        Tape tape(false);
        slmprop::nn::ParamBinding p(tape, ps);
        Tensor out = att::fuse(p, cfg, tape.constant(a), tape.constant(b)).value();
        for (int64_t i = 0; i < out.numel(); ++i) worst = std::max(worst, std::abs(out[i] - (a[i] + b[i])));
    }
    return worst;
}

} // namespace testsupport
