#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <set>
#include <vector>

#include "slmprop/io/volume.hpp"
#include "slmprop/metrics/metrics.hpp"
#include "slmprop/nn/rng.hpp"

namespace testsupport {

using Coord = std::array<int64_t, 3>;

inline std::set<Coord> voxel_set(const slmprop::io::MaskVolume& m, uint8_t id) {
    std::set<Coord> s;
    const auto& d = m.dims();
    for (int64_t z = 0; z < d.depth; ++z)
        for (int64_t y = 0; y < d.height; ++y)
            for (int64_t x = 0; x < d.width; ++x)
                if (m.at(z, y, x) == id) s.insert({z, y, x});
    return s;
}

inline double oracle_dsc(const std::set<Coord>& a, const std::set<Coord>& b) {
    if (a.empty() && b.empty()) return 1.0;
    int64_t both = 0;
    for (const auto& c : a) both += b.count(c);
    return 2.0 * static_cast<double>(both) / static_cast<double>(a.size() + b.size());
}

inline std::vector<Coord> oracle_surface(const std::set<Coord>& s, const slmprop::io::Dims& d) {
    std::vector<Coord> out;
    const int64_t ext[3] = {d.depth, d.height, d.width};
    for (const auto& c : s) {
        bool surf = false;
        for (int axis = 0; axis < 3 && !surf; ++axis)
            for (int step : {-1, 1}) {
                Coord n = c;
                n[axis] += step;
                if (n[axis] < 0 || n[axis] >= ext[axis] || !s.count(n)) surf = true;
            }
        if (surf) out.push_back(c);
    }
    return out;
}

inline std::optional<double> oracle_assd(const slmprop::io::MaskVolume& a, const slmprop::io::MaskVolume& b,
                                         uint8_t id) {
    const auto sa = oracle_surface(voxel_set(a, id), a.dims());
    const auto sb = oracle_surface(voxel_set(b, id), b.dims());
    if (sa.empty() || sb.empty()) return std::nullopt;
    const auto& sp = a.spacing();
    const double w[3] = {sp.z, sp.y, sp.x};
    auto directed = [&](const std::vector<Coord>& from, const std::vector<Coord>& to) {
        double sum = 0.0;
        for (const auto& p : from) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& q : to) {
                double dd = 0.0;
                for (int k = 0; k < 3; ++k) {
                    const double t = static_cast<double>(p[k] - q[k]) * w[k];
                    dd += t * t;
                }
                best = std::min(best, std::sqrt(dd));
            }
            sum += best;
        }
        return sum;
    };
    return (directed(sa, sb) + directed(sb, sa)) / static_cast<double>(sa.size() + sb.size());
}

struct OracleFn {
    double fnsr, pfnsr;
};

// A false-negative present slice is premature when every slice between it and the start (or
// the end) of the present range, itself included, has an empty prediction.
inline OracleFn oracle_fnsr(const slmprop::io::MaskVolume& pred, const slmprop::io::MaskVolume& gt, uint8_t id) {
    const int64_t D = gt.dims().depth;
    std::vector<int64_t> present;
    for (int64_t z = 0; z < D; ++z)
        if (gt.object_area(z, id) > 0) present.push_back(z);
    const int64_t first = present.front(), last = present.back();
    auto empty_between = [&](int64_t lo, int64_t hi) {
        for (int64_t z = lo; z <= hi; ++z)
            if (pred.object_area(z, id) > 0) return false;
        return true;
    };
    int64_t fn = 0, pre = 0;
    for (int64_t z : present) {
        if (pred.object_area(z, id) > 0) continue;
        ++fn;
        if (empty_between(first, z) || empty_between(z, last)) ++pre;
    }
    const double n = static_cast<double>(present.size());
    return {static_cast<double>(fn) / n, static_cast<double>(pre) / n};
}

// Union of a few random boxes plus sparse speckle; sometimes empty.
inline slmprop::io::MaskVolume random_mask(slmprop::nn::Rng& rng, const slmprop::io::Dims& d,
                                           const slmprop::io::Spacing& sp, uint8_t id = 1) {
    slmprop::io::MaskVolume m(d, sp);
    if (rng.bernoulli(0.08)) return m;
    const int64_t boxes = rng.uniform_int(1, 3);
    for (int64_t b = 0; b < boxes; ++b) {
        const int64_t z0 = rng.uniform_int(0, d.depth - 1), y0 = rng.uniform_int(0, d.height - 1),
                      x0 = rng.uniform_int(0, d.width - 1);
        const int64_t z1 = std::min(d.depth - 1, z0 + rng.uniform_int(0, 5));
        const int64_t y1 = std::min(d.height - 1, y0 + rng.uniform_int(0, 6));
        const int64_t x1 = std::min(d.width - 1, x0 + rng.uniform_int(0, 6));
        for (int64_t z = z0; z <= z1; ++z)
            for (int64_t y = y0; y <= y1; ++y)
                for (int64_t x = x0; x <= x1; ++x) m.set(z, y, x, id);
    }
    const int64_t speckle = rng.uniform_int(0, 4);
    for (int64_t k = 0; k < speckle; ++k)
        m.set(rng.uniform_int(0, d.depth - 1), rng.uniform_int(0, d.height - 1), rng.uniform_int(0, d.width - 1), id);
    return m;
}

// Random prediction correlated with gt: copy, then drop some slices, add spurious ones, jitter voxels.
inline slmprop::io::MaskVolume perturb_mask(slmprop::nn::Rng& rng, const slmprop::io::MaskVolume& gt, uint8_t id = 1) {
    slmprop::io::MaskVolume p(gt.dims(), gt.spacing(), gt.labels());
    const auto& d = gt.dims();
    for (int64_t z = 0; z < d.depth; ++z) {
        const double u = rng.uniform();
        if (u < 0.25) {
            p.set_object_slice(z, id, slmprop::io::Label2D(d.height, d.width, 0));
        } else if (u < 0.35) {
            p.set(z, rng.uniform_int(0, d.height - 1), rng.uniform_int(0, d.width - 1), id);
        }
        const int64_t flips = rng.uniform_int(0, 3);
        for (int64_t k = 0; k < flips && u >= 0.25; ++k) {
            const int64_t y = rng.uniform_int(0, d.height - 1), x = rng.uniform_int(0, d.width - 1);
            p.set(z, y, x, p.at(z, y, x) == id ? 0 : id);
        }
    }
    return p;
}

inline slmprop::io::Dims random_dims(slmprop::nn::Rng& rng, int64_t max_side = 16) {
    return {rng.uniform_int(1, max_side), rng.uniform_int(1, max_side), rng.uniform_int(1, max_side)};
}

inline slmprop::io::Spacing random_spacing(slmprop::nn::Rng& rng) {
    return {static_cast<float>(rng.uniform(0.5, 3.0)), static_cast<float>(rng.uniform(0.5, 2.0)),
            static_cast<float>(rng.uniform(0.5, 2.0))};
}

struct MetricTrialStats {
    int trials = 0;
    int dsc_mismatch = 0;
    int assd_mismatch = 0;
    int fn_mismatch = 0;
    int symmetry_failures = 0;
    int ordering_failures = 0;
    double max_assd_error = 0.0;
};

// Library metrics vs the oracles above on random pairs up to max_side^3.
inline MetricTrialStats run_metric_trials(int trials, uint64_t seed, int64_t max_side = 16) {
    namespace mx = slmprop::metrics;
    slmprop::nn::Rng rng(seed);
    MetricTrialStats st;
    for (int t = 0; t < trials; ++t) {
        const auto d = random_dims(rng, max_side);
        const auto sp = random_spacing(rng);
        const auto gt = random_mask(rng, d, sp);
        const auto pred = rng.bernoulli(0.5) ? perturb_mask(rng, gt) : random_mask(rng, d, sp);
        ++st.trials;
        const auto va = voxel_set(pred, 1), vb = voxel_set(gt, 1);
        const double dl = mx::dsc(pred, gt, 1);
        if (dl != oracle_dsc(va, vb)) ++st.dsc_mismatch;
        if (dl != mx::dsc(gt, pred, 1)) ++st.symmetry_failures;

        const auto al = mx::assd(pred, gt, 1), ao = oracle_assd(pred, gt, 1);
        const auto ar = mx::assd(gt, pred, 1);
        if (al.has_value() != ao.has_value()) {
            ++st.assd_mismatch;
        } else if (al) {
            const double e = std::abs(*al - *ao);
            st.max_assd_error = std::max(st.max_assd_error, e);
            if (e > 1e-9) ++st.assd_mismatch;
            if (std::abs(*al - *ar) > 1e-9) ++st.symmetry_failures;
            const bool same_surface = oracle_surface(va, d) == oracle_surface(vb, d);
            if ((*al == 0.0) != same_surface) ++st.symmetry_failures;
        }

        if (!vb.empty()) {
            const auto fl = mx::fnsr_pfnsr(pred, gt, 1);
            const auto fo = oracle_fnsr(pred, gt, 1);
            if (fl.fnsr != fo.fnsr || fl.pfnsr != fo.pfnsr) ++st.fn_mismatch;
            if (fl.pfnsr > fl.fnsr) ++st.ordering_failures;
        }
    }
    return st;
}

} // namespace testsupport
