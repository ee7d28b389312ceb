#include "slmprop/synth/scenario.hpp"

#include <algorithm>
#include <cmath>

#include "slmprop/error.hpp"
#include "slmprop/nn/rng.hpp"

namespace slmprop::synth {

namespace {

struct Blob {
    double cy = 0, cx = 0, ry = 0, rx = 0;
};

// Superellipse membership.
bool inside(const Blob& b, double exponent, double y, double x) {
    const double u = std::abs((y - b.cy) / b.ry);
    const double v = std::abs((x - b.cx) / b.rx);
    return std::pow(u, exponent) + std::pow(v, exponent) <= 1.0;
}

// Per-segment taper keeps adjacent-slice area ratios moderate near the segment ends.
double taper(int64_t z, const SliceRange& r) {
    if (r.last == r.first) return 0.9;
    const double mid = 0.5 * static_cast<double>(r.first + r.last);
    const double half = 0.5 * static_cast<double>(r.last - r.first);
    const double u = (static_cast<double>(z) - mid) / half;
    return 0.8 + 0.2 * std::sqrt(std::max(0.0, 1.0 - u * u));
}

const SliceRange* range_of(const std::vector<SliceRange>& ranges, int64_t z) {
    for (const auto& r : ranges)
        if (z >= r.first && z <= r.last) return &r;
    return nullptr;
}

struct Region {
    double y0, y1, x0, x1;
};

} // namespace

std::string_view to_string(ScenarioKind kind) {
    switch (kind) {
    case ScenarioKind::SimpleBlob: return "SimpleBlob";
    case ScenarioKind::AdjacentDistractor: return "AdjacentDistractor";
    case ScenarioKind::GapReappear: return "GapReappear";
    case ScenarioKind::Intermittent: return "Intermittent";
    }
    return "SimpleBlob";
}

ScenarioKind scenario_kind_from_string(std::string_view s) {
    if (s == "SimpleBlob") return ScenarioKind::SimpleBlob;
    if (s == "AdjacentDistractor") return ScenarioKind::AdjacentDistractor;
    if (s == "GapReappear") return ScenarioKind::GapReappear;
    if (s == "Intermittent") return ScenarioKind::Intermittent;
    throw Error(ErrorCode::ConfigInvalid, "unknown scenario kind '" + std::string(s) + "'");
}

void validate(const ScenarioSpec& spec) {
    const auto& d = spec.dims;
    if (d.depth < 1 || d.height < 8 || d.width < 8) throw Error(ErrorCode::SpecInvalid, "dims too small");
    if (!(spec.radius_min >= 1.0) || spec.radius_max < spec.radius_min) {
        throw Error(ErrorCode::SpecInvalid, "radius range must satisfy 1 <= rmin <= rmax");
    }
    if (2.0 * spec.radius_max + 2.0 > static_cast<double>(std::min(d.height, d.width / std::max(1, spec.num_objects)))) {
        throw Error(ErrorCode::SpecInvalid, "radius_max too large for slice size");
    }
    if (spec.distractor_contrast < 0.0 || spec.distractor_contrast > 1.0) {
        throw Error(ErrorCode::SpecInvalid, "distractor_contrast must lie in [0,1]");
    }
    if (spec.num_objects < 1 || spec.num_objects > 2) throw Error(ErrorCode::SpecInvalid, "num_objects must be 1 or 2");
    if (spec.present_ranges.empty()) throw Error(ErrorCode::SpecInvalid, "present_ranges is empty");
    int64_t prev_last = -1;
    for (const auto& r : spec.present_ranges) {
        if (r.first > r.last || r.first < 0 || r.last > d.depth - 1) {
            throw Error(ErrorCode::SpecInvalid, "range (" + std::to_string(r.first) + "," + std::to_string(r.last) +
                                                    ") outside [0," + std::to_string(d.depth - 1) + "]");
        }
        if (r.first <= prev_last) throw Error(ErrorCode::SpecInvalid, "present_ranges must be sorted and disjoint");
        prev_last = r.last;
    }
    if ((spec.kind == ScenarioKind::GapReappear || spec.kind == ScenarioKind::Intermittent) &&
        spec.present_ranges.size() < 2) {
        throw Error(ErrorCode::SpecInvalid, std::string(to_string(spec.kind)) + " needs at least two ranges");
    }
    if (spec.range_jitter < 0) throw Error(ErrorCode::SpecInvalid, "range_jitter must be non-negative");
}

ScenarioSpec default_spec(ScenarioKind kind, io::Dims dims, uint64_t seed) {
    ScenarioSpec s;
    s.kind = kind;
    s.dims = dims;
    s.seed = seed;
    const int64_t D = dims.depth;
    switch (kind) {
    case ScenarioKind::SimpleBlob: s.present_ranges = {{D / 4, D - D / 4 - 1}}; break;
    case ScenarioKind::AdjacentDistractor: s.present_ranges = {{D / 5, 3 * D / 5}}; break;
    case ScenarioKind::GapReappear: s.present_ranges = {{D / 8, 3 * D / 8 - 1}, {9 * D / 16, 3 * D / 4}}; break;
    case ScenarioKind::Intermittent:
        s.present_ranges = {{D / 8, D / 4}, {3 * D / 8, D / 2}, {5 * D / 8, 3 * D / 4}};
        break;
    }
    const double side = static_cast<double>(std::min(dims.height, dims.width));
    s.radius_min = std::max(1.5, side / 8.0);
    s.radius_max = std::max(s.radius_min, side * 7.0 / 32.0);
    return s;
}

LabeledCase generate_case(const ScenarioSpec& spec) {
    validate(spec);
    const auto& d = spec.dims;
    nn::Rng rng(spec.seed);
    const double H = static_cast<double>(d.height), W = static_cast<double>(d.width);

    io::Volume vol(d, io::Spacing{}, io::Modality::SYNTH);
    io::MaskVolume mask(d, io::Spacing{});

    const double background = rng.uniform(20.0, 60.0);
    const double bg_noise = 8.0;
    const double tex_noise = 6.0;
    for (auto& v : vol.voxels()) v = static_cast<float>(background + bg_noise * rng.normal());

    std::vector<uint8_t> target_hit(static_cast<size_t>(d.voxels()), 0);
    LabeledCase out;

    for (int obj = 0; obj < spec.num_objects; ++obj) {
        const uint8_t label = static_cast<uint8_t>(obj + 1);
        mask.declare_object(label);
        const Region region = spec.num_objects == 1 ? Region{0, H, 0, W}
                                                    : Region{0, H, W * obj / 2.0, W * (obj + 1) / 2.0};
        const double margin = spec.radius_max + 1.0;
        const double intensity = obj == 0 ? rng.uniform(150.0, 200.0) : rng.uniform(100.0, 130.0);
        const double exponent = rng.uniform(2.0, 3.0);
        Blob b;
        b.cy = rng.uniform(region.y0 + margin, std::max(region.y0 + margin, region.y1 - margin));
        b.cx = rng.uniform(region.x0 + margin, std::max(region.x0 + margin, region.x1 - margin));
        b.ry = rng.uniform(spec.radius_min, spec.radius_max);
        b.rx = rng.uniform(spec.radius_min, spec.radius_max);

        std::vector<Blob> per_slice(static_cast<size_t>(d.depth));
        for (int64_t z = 0; z < d.depth; ++z) {
            per_slice[static_cast<size_t>(z)] = b;
            b.cy = std::clamp(b.cy + 0.35 * rng.normal(), region.y0 + margin, std::max(region.y0 + margin, region.y1 - margin));
            b.cx = std::clamp(b.cx + 0.35 * rng.normal(), region.x0 + margin, std::max(region.x0 + margin, region.x1 - margin));
            b.ry = std::clamp(b.ry + 0.15 * rng.normal(), spec.radius_min, spec.radius_max);
            b.rx = std::clamp(b.rx + 0.15 * rng.normal(), spec.radius_min, spec.radius_max);
        }

        for (int64_t z = 0; z < d.depth; ++z) {
            const SliceRange* r = range_of(spec.present_ranges, z);
            if (!r) continue;
            Blob s = per_slice[static_cast<size_t>(z)];
            const double t = taper(z, *r);
            s.ry *= t;
            s.rx *= t;
            int64_t area = 0;
            for (int64_t y = 0; y < d.height; ++y)
                for (int64_t x = 0; x < d.width; ++x) {
                    if (!inside(s, exponent, static_cast<double>(y), static_cast<double>(x))) continue;
                    mask.set(z, y, x, label);
                    vol.at(z, y, x) = static_cast<float>(intensity + tex_noise * rng.normal());
                    target_hit[static_cast<size_t>((z * d.height + y) * d.width + x)] = 1;
                    ++area;
                }
            if (area == 0) {
                const auto y = std::clamp<int64_t>(std::llround(s.cy), 0, d.height - 1);
                const auto x = std::clamp<int64_t>(std::llround(s.cx), 0, d.width - 1);
                mask.set(z, y, x, label);
                vol.at(z, y, x) = static_cast<float>(intensity);
                target_hit[static_cast<size_t>((z * d.height + y) * d.width + x)] = 1;
            }
        }

        if (spec.kind != ScenarioKind::AdjacentDistractor || obj != 0) continue;

        // Look-alike neighbour: abuts the target during its last slices, then drifts into
        // the region the target vacated.
        const SliceRange last_range = spec.present_ranges.back();
        const Blob end = per_slice[static_cast<size_t>(last_range.last)];
        const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
        const double d_intensity = std::clamp(intensity + sign * spec.distractor_contrast * 255.0, 0.0, 255.0);
        Blob dist;
        dist.ry = rng.uniform(spec.radius_min, spec.radius_max);
        dist.rx = rng.uniform(spec.radius_min, spec.radius_max);
        const double end_t = taper(last_range.last, last_range);
        // Pick the side with the most room.
        struct Side { double dy, dx, room; };
        const Side sides[4] = {
            {0, 1, W - (end.cx + end.rx * end_t)}, {0, -1, end.cx - end.rx * end_t},
            {1, 0, H - (end.cy + end.ry * end_t)}, {-1, 0, end.cy - end.ry * end_t}};
        int best = static_cast<int>(rng.uniform_int(0, 3));
        for (int i = 0; i < 4; ++i)
            if (sides[i].room > sides[best].room + 2.0) best = i;
        const Side side = sides[best];
        const double exp_d = rng.uniform(2.0, 3.0);
        const int64_t z0 = std::max<int64_t>(0, last_range.last - 2);
        const int64_t z1 = std::min<int64_t>(d.depth - 1, last_range.last + 6);
        for (int64_t z = z0; z <= z1; ++z) {
            const Blob& tb = per_slice[static_cast<size_t>(std::min(z, last_range.last))];
            const double t = z <= last_range.last ? taper(z, last_range) : end_t;
            Blob s = dist;
            const double gap_y = side.dy * (tb.ry * t + dist.ry - 1.0);
            const double gap_x = side.dx * (tb.rx * t + dist.rx - 1.0);
            const double pull = z > last_range.last ? std::min(0.6, 0.2 * static_cast<double>(z - last_range.last)) : 0.0;
            s.cy = tb.cy + gap_y * (1.0 - pull);
            s.cx = tb.cx + gap_x * (1.0 - pull);
            for (int64_t y = 0; y < d.height; ++y)
                for (int64_t x = 0; x < d.width; ++x) {
                    const size_t idx = static_cast<size_t>((z * d.height + y) * d.width + x);
                    if (target_hit[idx]) continue;
                    if (!inside(s, exp_d, static_cast<double>(y), static_cast<double>(x))) continue;
                    vol.at(z, y, x) = static_cast<float>(d_intensity + tex_noise * rng.normal());
                    out.distractor_voxels.push_back(static_cast<int64_t>(idx));
                }
        }
    }

    for (auto& v : vol.voxels()) v = std::clamp(v, 0.0f, 255.0f);
    out.volume = std::move(vol);
    out.mask = std::move(mask);
    out.spec = spec;
    return out;
}

Split generate_split(const std::vector<ScenarioSpec>& templates, int n_train, int n_test, uint64_t seed) {
    if (templates.empty()) throw Error(ErrorCode::SpecInvalid, "no scenario templates");
    if (n_train < 1 || n_test < 1) throw Error(ErrorCode::SpecInvalid, "n_train and n_test must be >= 1");
    Split split;
    const int total = n_train + n_test;
    for (int i = 0; i < total; ++i) {
        ScenarioSpec s = templates[static_cast<size_t>(i) % templates.size()];
        s.seed = nn::mix_seed(seed, static_cast<uint64_t>(i));
        if (s.range_jitter > 0) {
            nn::Rng jr(nn::mix_seed(s.seed, 0xA11CE));
            const int64_t lo = std::max(-s.range_jitter, -s.present_ranges.front().first);
            const int64_t hi = std::min(s.range_jitter, s.dims.depth - 1 - s.present_ranges.back().last);
            const int64_t off = jr.uniform_int(lo, std::max(lo, hi));
            for (auto& r : s.present_ranges) {
                r.first += off;
                r.last += off;
            }
        }
        (i < n_train ? split.train : split.test).push_back(generate_case(s));
    }
    return split;
}

Split generate_split(const ScenarioSpec& spec_template, int n_train, int n_test, uint64_t seed) {
    return generate_split(std::vector<ScenarioSpec>{spec_template}, n_train, n_test, seed);
}

void to_json(nlohmann::json& j, const SliceRange& r) { j = nlohmann::json::array({r.first, r.last}); }

void from_json(const nlohmann::json& j, SliceRange& r) {
    r.first = j.at(0).get<int64_t>();
    r.last = j.at(1).get<int64_t>();
}

void to_json(nlohmann::json& j, const ScenarioSpec& s) {
    j = nlohmann::json{{"kind", to_string(s.kind)},
                       {"dims", {s.dims.depth, s.dims.height, s.dims.width}},
                       {"radius_range", {s.radius_min, s.radius_max}},
                       {"distractor_contrast", s.distractor_contrast},
                       {"present_ranges", s.present_ranges},
                       {"seed", s.seed},
                       {"num_objects", s.num_objects},
                       {"range_jitter", s.range_jitter}};
}

void from_json(const nlohmann::json& j, ScenarioSpec& s) {
    s = ScenarioSpec{};
    s.kind = scenario_kind_from_string(j.at("kind").get<std::string>());
    const auto& dims = j.at("dims");
    s.dims = io::Dims{dims.at(0).get<int64_t>(), dims.at(1).get<int64_t>(), dims.at(2).get<int64_t>()};
    if (j.contains("radius_range")) {
        s.radius_min = j["radius_range"].at(0).get<double>();
        s.radius_max = j["radius_range"].at(1).get<double>();
    }
    s.distractor_contrast = j.value("distractor_contrast", s.distractor_contrast);
    if (j.contains("present_ranges")) s.present_ranges = j["present_ranges"].get<std::vector<SliceRange>>();
    s.seed = j.value("seed", uint64_t{0});
    s.num_objects = j.value("num_objects", 1);
    s.range_jitter = j.value("range_jitter", int64_t{0});
}

} // namespace slmprop::synth
