#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "slmprop/nn/ops.hpp"
#include "slmprop/nn/rng.hpp"
#include "slmprop/nn/tape.hpp"

namespace testsupport {

using slmprop::nn::Tape;
using slmprop::nn::Tensor;
using slmprop::nn::Var;

using Forward = std::function<Var(Tape&, const std::vector<Var>&)>;

inline Tensor random_tensor(slmprop::nn::Shape shape, slmprop::nn::Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = scale * rng.normal();
    return t;
}

struct GradCheckResult {
    double max_rel_error = 0.0;
    double max_abs_grad = 0.0;
    int64_t checked = 0;
};

// |a - n| / max(|a|, |n|, floor)
inline double rel_error(double a, double n, double floor = 1e-3) {
    return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

// Scalarizes the output with a fixed random projection and compares the tape adjoints of
// every input against central differences.
inline GradCheckResult grad_check(const Forward& f, const std::vector<Tensor>& inputs, uint64_t seed = 7,
                                  double h = 1e-5) {
    Tensor proj;
    auto scalar_of = [&](const std::vector<Tensor>& xs, bool grad, std::vector<Tensor>* grads_out) {
        Tape tape(grad);
        std::vector<Var> vars;
        for (const auto& x : xs) vars.push_back(tape.leaf(x));
        Var out = f(tape, vars);
        if (proj.empty()) {
            slmprop::nn::Rng rng(seed);
            proj = random_tensor(out.shape(), rng);
        }
        double s = 0.0;
        const auto& ov = out.value();
        for (int64_t i = 0; i < ov.numel(); ++i) s += proj[i] * ov[i];
        if (grads_out) {
            Var p = tape.constant(proj);
            Var loss = slmprop::nn::sum(slmprop::nn::mul(out, p));
            tape.backward(loss);
            for (const auto& v : vars) grads_out->push_back(tape.grad(v));
        }
        return s;
    };

    std::vector<Tensor> analytic;
    scalar_of(inputs, true, &analytic);

    GradCheckResult res;
    std::vector<Tensor> xs = inputs;
    for (size_t k = 0; k < xs.size(); ++k) {
        for (int64_t i = 0; i < xs[k].numel(); ++i) {
            const double orig = xs[k][i];
            xs[k][i] = orig + h;
            const double fp = scalar_of(xs, false, nullptr);
            xs[k][i] = orig - h;
            const double fm = scalar_of(xs, false, nullptr);
            xs[k][i] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            res.max_rel_error = std::max(res.max_rel_error, rel_error(analytic[k][i], numeric));
            res.max_abs_grad = std::max(res.max_abs_grad, std::abs(analytic[k][i]));
            ++res.checked;
        }
    }
    return res;
}

} // namespace testsupport
