#include "slmprop/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <tuple>

#include "slmprop/error.hpp"
#include "slmprop/nn/rng.hpp"

namespace slmprop::metrics {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_dims(const io::MaskVolume& a, const io::MaskVolume& b) {
    if (!(a.dims() == b.dims()))
        throw Error(ErrorCode::DimMismatch, "prediction and ground truth dims differ");
}

std::vector<uint8_t> binary(const io::MaskVolume& m, uint8_t id) {
    std::vector<uint8_t> out(m.labels().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = m.labels()[i] == id ? 1 : 0;
    return out;
}

// 1D lower envelope of parabolas f(q) + w2 (p - q)^2.
void edt_1d(const double* f, double* d, int64_t n, int64_t stride, double w2, std::vector<int64_t>& v,
            std::vector<double>& zb) {
    v.resize(static_cast<size_t>(n));
    zb.resize(static_cast<size_t>(n + 1));
    int64_t k = -1;
    for (int64_t q = 0; q < n; ++q) {
        const double fq = f[q * stride];
        if (fq == kInf) continue;
        while (k >= 0) {
            const int64_t p = v[static_cast<size_t>(k)];
            const double fp = f[p * stride];
            const double s = ((fq + w2 * q * q) - (fp + w2 * p * p)) / (2.0 * w2 * (q - p));
            if (s <= zb[static_cast<size_t>(k)]) {
                --k;
                continue;
            }
            ++k;
            v[static_cast<size_t>(k)] = q;
            zb[static_cast<size_t>(k)] = s;
            zb[static_cast<size_t>(k + 1)] = kInf;
            break;
        }
        if (k < 0) {
            k = 0;
            v[0] = q;
            zb[0] = -kInf;
            zb[1] = kInf;
        }
    }
    std::vector<double> out(static_cast<size_t>(n), kInf);
    if (k >= 0) {
        int64_t j = 0;
        for (int64_t p = 0; p < n; ++p) {
            while (zb[static_cast<size_t>(j + 1)] < static_cast<double>(p)) ++j;
            const int64_t q = v[static_cast<size_t>(j)];
            out[static_cast<size_t>(p)] = f[q * stride] + w2 * static_cast<double>((p - q) * (p - q));
        }
    }
    for (int64_t p = 0; p < n; ++p) d[p * stride] = out[static_cast<size_t>(p)];
}

// Squared physical distance from every voxel to the nearest seed voxel.
std::vector<double> squared_distance_field(const std::vector<int64_t>& seeds, const io::Dims& dims,
                                           const io::Spacing& sp) {
    std::vector<double> g(static_cast<size_t>(dims.voxels()), kInf);
    for (int64_t i : seeds) g[static_cast<size_t>(i)] = 0.0;
    const int64_t D = dims.depth, H = dims.height, W = dims.width;
    std::vector<int64_t> v;
    std::vector<double> zb;
    const double wx = static_cast<double>(sp.x) * sp.x, wy = static_cast<double>(sp.y) * sp.y,
                 wz = static_cast<double>(sp.z) * sp.z;
    for (int64_t z = 0; z < D; ++z)
        for (int64_t y = 0; y < H; ++y) {
            double* row = g.data() + (z * H + y) * W;
            edt_1d(row, row, W, 1, wx, v, zb);
        }
    for (int64_t z = 0; z < D; ++z)
        for (int64_t x = 0; x < W; ++x) {
            double* col = g.data() + z * H * W + x;
            edt_1d(col, col, H, W, wy, v, zb);
        }
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
            double* col = g.data() + y * W + x;
            edt_1d(col, col, D, H * W, wz, v, zb);
        }
    return g;
}

double mean_of(const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double percentile(const std::vector<double>& sorted, double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const size_t lo = static_cast<size_t>(std::floor(pos));
    const size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double t = pos - static_cast<double>(lo);
    return sorted[lo] + t * (sorted[hi] - sorted[lo]);
}

bool slice_has(const io::MaskVolume& m, int64_t z, uint8_t id) { return m.object_present(z, id); }

} // namespace

double dsc(std::span<const uint8_t> a, std::span<const uint8_t> b) {
    if (a.size() != b.size()) throw Error(ErrorCode::DimMismatch, "mask sizes differ");
    int64_t na = 0, nb = 0, both = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        const bool x = a[i] != 0, y = b[i] != 0;
        na += x;
        nb += y;
        both += x && y;
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

double dsc(const io::MaskVolume& pred, const io::MaskVolume& gt, uint8_t object_id) {
    check_dims(pred, gt);
    return dsc(binary(pred, object_id), binary(gt, object_id));
}

std::vector<int64_t> surface_voxels(std::span<const uint8_t> m, const io::Dims& d) {
    if (static_cast<int64_t>(m.size()) != d.voxels()) throw Error(ErrorCode::DimMismatch, "mask size vs dims");
    std::vector<int64_t> out;
    const int64_t H = d.height, W = d.width, plane = H * W;
    for (int64_t z = 0; z < d.depth; ++z)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x) {
                const int64_t i = z * plane + y * W + x;
                if (!m[static_cast<size_t>(i)]) continue;
                const bool border =
                    z == 0 || z == d.depth - 1 || y == 0 || y == H - 1 || x == 0 || x == W - 1;
                if (border || !m[static_cast<size_t>(i - 1)] || !m[static_cast<size_t>(i + 1)] ||
                    !m[static_cast<size_t>(i - W)] || !m[static_cast<size_t>(i + W)] ||
                    !m[static_cast<size_t>(i - plane)] || !m[static_cast<size_t>(i + plane)])
                    out.push_back(i);
            }
    return out;
}

std::optional<double> assd(std::span<const uint8_t> a, std::span<const uint8_t> b, const io::Dims& dims,
                           const io::Spacing& spacing) {
    if (a.size() != b.size()) throw Error(ErrorCode::DimMismatch, "mask sizes differ");
    const auto sa = surface_voxels(a, dims), sb = surface_voxels(b, dims);
    if (sa.empty() || sb.empty()) return std::nullopt;
    const auto da = squared_distance_field(sa, dims, spacing);
    const auto db = squared_distance_field(sb, dims, spacing);
    double total = 0.0;
    for (int64_t p : sa) total += std::sqrt(db[static_cast<size_t>(p)]);
    for (int64_t q : sb) total += std::sqrt(da[static_cast<size_t>(q)]);
    return total / static_cast<double>(sa.size() + sb.size());
}

std::optional<double> assd(const io::MaskVolume& pred, const io::MaskVolume& gt, uint8_t object_id) {
    check_dims(pred, gt);
    return assd(binary(pred, object_id), binary(gt, object_id), gt.dims(), gt.spacing());
}

SlicePartition slice_dsc_partition(const io::MaskVolume& pred, const io::MaskVolume& gt, uint8_t object_id) {
    check_dims(pred, gt);
    SlicePartition out;
    const int64_t plane = gt.dims().slice_size();
    std::vector<uint8_t> p(static_cast<size_t>(plane)), g(static_cast<size_t>(plane));
    for (int64_t z = 0; z < gt.dims().depth; ++z) {
        bool present = false;
        for (int64_t k = 0; k < plane; ++k) {
            const size_t i = static_cast<size_t>(z * plane + k);
            p[static_cast<size_t>(k)] = pred.labels()[i] == object_id;
            g[static_cast<size_t>(k)] = gt.labels()[i] == object_id;
            present = present || g[static_cast<size_t>(k)];
        }
        (present ? out.present : out.absent).emplace_back(z, dsc(p, g));
    }
    return out;
}

FalseNegativeRates fnsr_pfnsr(const io::MaskVolume& pred, const io::MaskVolume& gt, uint8_t object_id) {
    check_dims(pred, gt);
    const int64_t D = gt.dims().depth;
    std::vector<char> present(static_cast<size_t>(D)), predicted(static_cast<size_t>(D));
    int64_t first = -1, last = -1;
    FalseNegativeRates r;
    for (int64_t z = 0; z < D; ++z) {
        present[static_cast<size_t>(z)] = slice_has(gt, z, object_id);
        predicted[static_cast<size_t>(z)] = slice_has(pred, z, object_id);
        if (present[static_cast<size_t>(z)]) {
            if (first < 0) first = z;
            last = z;
            ++r.present;
            if (!predicted[static_cast<size_t>(z)]) ++r.false_negative;
        }
    }
    if (first < 0) throw Error(ErrorCode::NoTargetSlices, "ground truth has no slice with the object");
    std::vector<char> premature(static_cast<size_t>(D), 0);
    for (int64_t z = first; z <= last && !predicted[static_cast<size_t>(z)]; ++z)
        if (present[static_cast<size_t>(z)]) premature[static_cast<size_t>(z)] = 1;
    for (int64_t z = last; z >= first && !predicted[static_cast<size_t>(z)]; --z)
        if (present[static_cast<size_t>(z)]) premature[static_cast<size_t>(z)] = 1;
    r.premature = std::count(premature.begin(), premature.end(), 1);
    r.fnsr = static_cast<double>(r.false_negative) / static_cast<double>(r.present);
    r.pfnsr = static_cast<double>(r.premature) / static_cast<double>(r.present);
    return r;
}

SavedEffort saved_effort(double spv_base, double spv_new, double csr_base, double csr_new) {
    if (!(spv_base > 0.0) || !(csr_base > 0.0))
        throw Error(ErrorCode::ZeroBaseline, "baseline SPV and CSR must be positive");
    return {(spv_base - spv_new) / spv_base, (csr_base - csr_new) / csr_base};
}

SavedEffort average_saved_effort(const std::vector<EffortRow>& rows) {
    if (rows.empty()) throw Error(ErrorCode::TooFewValues, "no effort rows");
    SavedEffort acc;
    for (const auto& r : rows) {
        const auto s = saved_effort(r.spv_base, r.spv_new, r.csr_base, r.csr_new);
        acc.spv_saved += s.spv_saved;
        acc.csr_saved += s.csr_saved;
    }
    acc.spv_saved /= static_cast<double>(rows.size());
    acc.csr_saved /= static_cast<double>(rows.size());
    return acc;
}

ConfidenceInterval bootstrap_ci(const std::vector<double>& values, int resamples, uint64_t seed) {
    if (values.size() < 2) throw Error(ErrorCode::TooFewValues, "bootstrap needs at least 2 values");
    if (resamples < 1) throw Error(ErrorCode::ConfigInvalid, "resamples must be positive");
    nn::Rng rng(seed);
    const int64_t n = static_cast<int64_t>(values.size());
    std::vector<double> means(static_cast<size_t>(resamples));
    for (auto& m : means) {
        double s = 0.0;
        for (int64_t i = 0; i < n; ++i) s += values[static_cast<size_t>(rng.uniform_int(0, n - 1))];
        m = s / static_cast<double>(n);
    }
    std::sort(means.begin(), means.end());
    ConfidenceInterval ci;
    ci.mean = mean_of(values);
    ci.lo = std::min(percentile(means, 0.025), ci.mean);
    ci.hi = std::max(percentile(means, 0.975), ci.mean);
    ci.resamples = resamples;
    ci.seed = seed;
    return ci;
}

MetricsReport compute_report(const io::MaskVolume& pred, const io::MaskVolume& gt, uint8_t object_id) {
    MetricsReport r;
    r.object_id = object_id;
    r.dsc_3d = dsc(pred, gt, object_id);
    r.assd_3d = assd(pred, gt, object_id);
    r.slices = slice_dsc_partition(pred, gt, object_id);
    r.fn = fnsr_pfnsr(pred, gt, object_id);
    std::vector<double> pv, av;
    for (auto& [z, d] : r.slices.present) pv.push_back(d);
    for (auto& [z, d] : r.slices.absent) av.push_back(d);
    r.present_dsc_mean = mean_of(pv);
    if (!av.empty()) r.absent_dsc_mean = mean_of(av);
    return r;
}

namespace {

ConfidenceInterval interval(const std::vector<double>& v, int resamples, uint64_t seed) {
    if (v.size() >= 2) return bootstrap_ci(v, resamples, seed);
    ConfidenceInterval ci;
    ci.mean = ci.lo = ci.hi = v.empty() ? 0.0 : v.front();
    ci.resamples = 0;
    ci.seed = seed;
    return ci;
}

} // namespace

AggregateReport aggregate(const std::vector<MetricsReport>& reports, int resamples, uint64_t seed) {
    if (reports.empty()) throw Error(ErrorCode::TooFewValues, "no reports to aggregate");
    AggregateReport a;
    a.volumes = static_cast<int>(reports.size());
    std::vector<double> d, s, pd, ad, fn, pf;
    for (const auto& r : reports) {
        d.push_back(r.dsc_3d);
        if (r.assd_3d)
            s.push_back(*r.assd_3d);
        else
            ++a.assd_undefined;
        pd.push_back(r.present_dsc_mean);
        if (r.absent_dsc_mean) ad.push_back(*r.absent_dsc_mean);
        fn.push_back(r.fn.fnsr);
        pf.push_back(r.fn.pfnsr);
    }
    // Distinct streams so metrics do not share resample indices by accident of order.
    a.dsc_3d = interval(d, resamples, nn::mix_seed(seed, 1));
    if (!s.empty()) a.assd_3d = interval(s, resamples, nn::mix_seed(seed, 2));
    a.present_dsc = interval(pd, resamples, nn::mix_seed(seed, 3));
    if (!ad.empty()) a.absent_dsc = interval(ad, resamples, nn::mix_seed(seed, 4));
    a.fnsr = interval(fn, resamples, nn::mix_seed(seed, 5));
    a.pfnsr = interval(pf, resamples, nn::mix_seed(seed, 6));
    return a;
}

nlohmann::json to_json(const ConfidenceInterval& ci) {
    return {{"mean", ci.mean}, {"lo", ci.lo}, {"hi", ci.hi}, {"resamples", ci.resamples}, {"seed", ci.seed}};
}

nlohmann::json to_json(const MetricsReport& r) {
    nlohmann::json j;
    j["object_id"] = r.object_id;
    j["dsc_3d"] = r.dsc_3d;
    j["assd_3d"] = r.assd_3d ? nlohmann::json(*r.assd_3d) : nlohmann::json(nullptr);
    j["assd_units"] = "physical";
    j["assd_undefined"] = !r.assd_3d.has_value();
    auto slices = [](const std::vector<std::pair<int64_t, double>>& v) {
        nlohmann::json a = nlohmann::json::array();
        for (auto& [z, d] : v) a.push_back({{"slice", z}, {"dsc", d}});
        return a;
    };
    j["present_slices"] = slices(r.slices.present);
    j["absent_slices"] = slices(r.slices.absent);
    j["present_dsc_mean"] = r.present_dsc_mean;
    j["absent_dsc_mean"] = r.absent_dsc_mean ? nlohmann::json(*r.absent_dsc_mean) : nlohmann::json(nullptr);
    j["fnsr"] = r.fn.fnsr;
    j["pfnsr"] = r.fn.pfnsr;
    j["present_count"] = r.fn.present;
    j["false_negative_count"] = r.fn.false_negative;
    j["premature_count"] = r.fn.premature;
    return j;
}

nlohmann::json to_json(const AggregateReport& a) {
    nlohmann::json j;
    j["volumes"] = a.volumes;
    j["dsc_3d"] = to_json(a.dsc_3d);
    j["assd_3d"] = a.assd_3d ? to_json(*a.assd_3d) : nlohmann::json(nullptr);
    j["assd_undefined"] = a.assd_undefined;
    j["present_dsc"] = to_json(a.present_dsc);
    j["absent_dsc"] = a.absent_dsc ? to_json(*a.absent_dsc) : nlohmann::json(nullptr);
    j["fnsr"] = to_json(a.fnsr);
    j["pfnsr"] = to_json(a.pfnsr);
    return j;
}

nlohmann::json to_document(const std::vector<MetricsReport>& reports, const std::optional<AggregateReport>& agg) {
    nlohmann::json j;
    j["format"] = "slmprop-metrics-report";
    j["version"] = 1;
    j["reports"] = nlohmann::json::array();
    for (const auto& r : reports) j["reports"].push_back(to_json(r));
    j["aggregate"] = agg ? to_json(*agg) : nlohmann::json(nullptr);
    return j;
}

std::string to_csv(const std::vector<MetricsReport>& reports) {
    std::ostringstream os;
    os.precision(17);
    os << "volume,object_id,slice,gt_present,dsc\n";
    for (size_t v = 0; v < reports.size(); ++v) {
        const auto& r = reports[v];
        std::vector<std::tuple<int64_t, int, double>> rows;
        for (auto& [z, d] : r.slices.present) rows.emplace_back(z, 1, d);
        for (auto& [z, d] : r.slices.absent) rows.emplace_back(z, 0, d);
        std::sort(rows.begin(), rows.end());
        for (auto& [z, p, d] : rows) os << v << ',' << int(r.object_id) << ',' << z << ',' << p << ',' << d << '\n';
    }
    return os.str();
}

} // namespace slmprop::metrics
